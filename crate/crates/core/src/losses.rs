//! The three training objectives as pure functions over batches.
//!
//! Every objective comes in two flavours: a plain value (`*_loss`) and a
//! value-plus-gradient form used by the training loops. All arithmetic is in
//! `f64`.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::config::KlDirection;
use crate::error::{Error, Result};

/// Stabilizer added under the square root of every column norm.
pub const CORRELATION_EPS: f64 = 1e-12;

/// Which embedding a degenerate column came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    A,
    B,
}

/// Normalized cross-correlation between the columns of two embedding batches.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossCorrelationMatrix {
    pub matrix: Array2<f64>,
    pub batch_size: usize,
    /// Columns whose (centered) norm vanished; their entries are ~0.
    pub degenerate_columns: Vec<(View, usize)>,
}

impl CrossCorrelationMatrix {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Wraps a hand-made square matrix.
    pub fn from_matrix(matrix: Array2<f64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(Error::Shape {
                expected: vec![matrix.nrows(), matrix.nrows()],
                actual: vec![matrix.nrows(), matrix.ncols()],
            });
        }
        Ok(CrossCorrelationMatrix {
            matrix,
            batch_size: 0,
            degenerate_columns: Vec::new(),
        })
    }
}

fn check_finite(name: &str, a: ArrayView2<f64>) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{name} contains non-finite values")))
    }
}

fn check_same_shape(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape {
            expected: vec![a.nrows(), a.ncols()],
            actual: vec![b.nrows(), b.ncols()],
        });
    }
    Ok(())
}

/// Column-normalized (optionally batch-centered) embeddings and their norms.
struct Normalized {
    unit: Array2<f64>,
    centered: Array2<f64>,
    norms: Array1<f64>,
}

fn normalize_columns(z: ArrayView2<f64>, center: bool, view: View, degenerate: &mut Vec<(View, usize)>) -> Normalized {
    let mut centered = z.to_owned();
    if center {
        let mean = z.mean_axis(Axis(0)).expect("non-empty batch");
        centered -= &mean;
    }
    let sq = centered.map_axis(Axis(0), |c| c.iter().map(|v| v * v).sum::<f64>());
    for (j, s) in sq.iter().enumerate() {
        if *s <= CORRELATION_EPS {
            degenerate.push((view, j));
        }
    }
    let norms = sq.mapv(|s| (s + CORRELATION_EPS).sqrt());
    let unit = &centered / &norms;
    Normalized { unit, centered, norms }
}

fn check_embeddings(za: ArrayView2<f64>, zb: ArrayView2<f64>) -> Result<()> {
    check_same_shape(za, zb)?;
    if za.nrows() < 2 {
        return Err(Error::Shape {
            expected: vec![2, za.ncols()],
            actual: vec![za.nrows(), za.ncols()],
        });
    }
    check_finite("view A embeddings", za)?;
    check_finite("view B embeddings", zb)
}

/// `C[c, j] = sum_i a[i, c] b[i, j] / (|a[:, c]| |b[:, j]|)` with `a`, `b`
/// mean-centered along the batch when `center` is set.
pub fn cross_correlation_with(za: ArrayView2<f64>, zb: ArrayView2<f64>, center: bool) -> Result<CrossCorrelationMatrix> {
    check_embeddings(za, zb)?;
    let mut degenerate = Vec::new();
    let a = normalize_columns(za, center, View::A, &mut degenerate);
    let b = normalize_columns(zb, center, View::B, &mut degenerate);
    Ok(CrossCorrelationMatrix {
        matrix: a.unit.t().dot(&b.unit),
        batch_size: za.nrows(),
        degenerate_columns: degenerate,
    })
}

/// Batch-centered cross-correlation (the default behaviour).
pub fn cross_correlation(za: ArrayView2<f64>, zb: ArrayView2<f64>) -> Result<CrossCorrelationMatrix> {
    cross_correlation_with(za, zb, true)
}

/// `sum_c (1 - C_cc)^2 + lambda1 * sum_c sum_{j != c} C_cj^2`.
pub fn barlow_twins_loss(c: &CrossCorrelationMatrix, lambda1: f64) -> f64 {
    let m = &c.matrix;
    let mut on = 0.0;
    let mut off = 0.0;
    for ((i, j), v) in m.indexed_iter() {
        if i == j {
            on += (1.0 - v) * (1.0 - v);
        } else {
            off += v * v;
        }
    }
    on + lambda1 * off
}

/// Loss value with gradients for both embedding batches.
#[derive(Debug, Clone)]
pub struct BarlowTwinsOutput {
    pub loss: f64,
    pub on_diagonal: f64,
    pub off_diagonal: f64,
    pub grad_a: Array2<f64>,
    pub grad_b: Array2<f64>,
    pub correlation: CrossCorrelationMatrix,
}

/// Backpropagates through `u = x / sqrt(|x|^2 + eps)` column-wise, then
/// through centering when enabled.
fn normalize_backward(n: &Normalized, du: &Array2<f64>, center: bool) -> Array2<f64> {
    // d x_k = du_k / n - x_k (x . du) / n^3
    let dots = (&n.centered * du).sum_axis(Axis(0));
    let n3 = n.norms.mapv(|v| v * v * v);
    let mut dx = du / &n.norms - &(&n.centered * &(&dots / &n3));
    if center {
        let mean = dx.mean_axis(Axis(0)).expect("non-empty batch");
        dx -= &mean;
    }
    dx
}

pub fn barlow_twins_objective(
    za: ArrayView2<f64>,
    zb: ArrayView2<f64>,
    lambda1: f64,
    center: bool,
) -> Result<BarlowTwinsOutput> {
    check_embeddings(za, zb)?;
    let mut degenerate = Vec::new();
    let a = normalize_columns(za, center, View::A, &mut degenerate);
    let b = normalize_columns(zb, center, View::B, &mut degenerate);
    let m = a.unit.t().dot(&b.unit);
    let dim = m.nrows();
    let mut g = Array2::<f64>::zeros((dim, dim));
    let (mut on, mut off) = (0.0, 0.0);
    for ((i, j), v) in m.indexed_iter() {
        if i == j {
            on += (1.0 - v) * (1.0 - v);
            g[[i, j]] = -2.0 * (1.0 - v);
        } else {
            off += v * v;
            g[[i, j]] = 2.0 * lambda1 * v;
        }
    }
    // C = U^T V  =>  dU = V G^T, dV = U G
    let du = b.unit.dot(&g.t());
    let dv = a.unit.dot(&g);
    let grad_a = normalize_backward(&a, &du, center);
    let grad_b = normalize_backward(&b, &dv, center);
    Ok(BarlowTwinsOutput {
        loss: on + lambda1 * off,
        on_diagonal: on,
        off_diagonal: off,
        grad_a,
        grad_b,
        correlation: CrossCorrelationMatrix {
            matrix: m,
            batch_size: za.nrows(),
            degenerate_columns: degenerate,
        },
    })
}

fn log_softmax_rows(x: ArrayView2<f64>, temperature: f64) -> Array2<f64> {
    let mut out = x.mapv(|v| v / temperature);
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

fn check_labels(labels: &[usize], classes: usize, rows: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Shape {
            expected: vec![rows],
            actual: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Label { label: bad, classes });
    }
    Ok(())
}

/// Mean cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy_objective(logits: ArrayView2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    check_labels(labels, logits.ncols(), logits.nrows())?;
    check_finite("logits", logits)?;
    if logits.nrows() == 0 {
        return Err(Error::Shape {
            expected: vec![1, logits.ncols()],
            actual: vec![0, logits.ncols()],
        });
    }
    let b = logits.nrows() as f64;
    let logp = log_softmax_rows(logits, 1.0);
    let loss = -labels.iter().enumerate().map(|(i, &y)| logp[[i, y]]).sum::<f64>() / b;
    let mut grad = logp.mapv(f64::exp);
    for (i, &y) in labels.iter().enumerate() {
        grad[[i, y]] -= 1.0;
    }
    grad /= b;
    Ok((loss, grad))
}

pub fn cross_entropy_loss(logits: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    cross_entropy_objective(logits, labels).map(|(l, _)| l)
}

/// Batch-mean KL divergence between per-sample temperature softmaxes of the
/// student and teacher latents, with the gradient for the student latents.
pub fn kl_objective(
    student: ArrayView2<f64>,
    teacher: ArrayView2<f64>,
    temperature: f64,
    direction: KlDirection,
) -> Result<(f64, Array2<f64>)> {
    check_same_shape(student, teacher)?;
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::Config(format!("distillation temperature must be > 0 (got {temperature})")));
    }
    check_finite("student latents", student)?;
    check_finite("teacher latents", teacher)?;
    let b = student.nrows() as f64;
    let ls = log_softmax_rows(student, temperature);
    let lt = log_softmax_rows(teacher, temperature);
    let ps = ls.mapv(f64::exp);
    let pt = lt.mapv(f64::exp);
    let diff = &ls - &lt;
    let mut total = 0.0;
    let mut grad = Array2::<f64>::zeros(student.dim());
    for i in 0..student.nrows() {
        match direction {
            KlDirection::StudentTeacher => {
                let kl: f64 = ps.row(i).iter().zip(diff.row(i)).map(|(p, d)| p * d).sum();
                total += kl;
                for k in 0..student.ncols() {
                    grad[[i, k]] = ps[[i, k]] * (diff[[i, k]] - kl);
                }
            }
            KlDirection::TeacherStudent => {
                let kl: f64 = pt.row(i).iter().zip(diff.row(i)).map(|(p, d)| -p * d).sum();
                total += kl;
                for k in 0..student.ncols() {
                    grad[[i, k]] = ps[[i, k]] - pt[[i, k]];
                }
            }
        }
    }
    grad /= b * temperature;
    Ok((total / b, grad))
}

/// Value and gradients of the self-distillation objective.
#[derive(Debug, Clone)]
pub struct DistillationOutput {
    pub loss: f64,
    pub kl: f64,
    pub cross_entropy: f64,
    pub grad_latents: Array2<f64>,
    pub grad_logits: Array2<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn distillation_objective(
    student_latents: ArrayView2<f64>,
    teacher_latents: ArrayView2<f64>,
    student_logits: ArrayView2<f64>,
    labels: &[usize],
    lambda2: f64,
    temperature: f64,
    direction: KlDirection,
) -> Result<DistillationOutput> {
    if !(0.0..=1.0).contains(&lambda2) {
        return Err(Error::Config(format!("distillation weight must lie in [0, 1] (got {lambda2})")));
    }
    if student_latents.nrows() != student_logits.nrows() {
        return Err(Error::Shape {
            expected: vec![student_latents.nrows(), student_logits.ncols()],
            actual: vec![student_logits.nrows(), student_logits.ncols()],
        });
    }
    let (kl, gk) = kl_objective(student_latents, teacher_latents, temperature, direction)?;
    let (ce, gc) = cross_entropy_objective(student_logits, labels)?;
    Ok(DistillationOutput {
        loss: lambda2 * kl + (1.0 - lambda2) * ce,
        kl,
        cross_entropy: ce,
        grad_latents: gk * lambda2,
        grad_logits: gc * (1.0 - lambda2),
    })
}

/// `lambda2 * KL(student || teacher) + (1 - lambda2) * CE(logits, labels)`.
pub fn distillation_loss(
    student_latents: ArrayView2<f64>,
    teacher_latents: ArrayView2<f64>,
    student_logits: ArrayView2<f64>,
    labels: &[usize],
    lambda2: f64,
    temperature: f64,
) -> Result<f64> {
    distillation_objective(
        student_latents,
        teacher_latents,
        student_logits,
        labels,
        lambda2,
        temperature,
        KlDirection::StudentTeacher,
    )
    .map(|o| o.loss)
}
