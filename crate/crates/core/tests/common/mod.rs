//! Helpers shared by the integration suites: independent loss oracles,
//! finite differences and tiny configurations.
#![allow(dead_code)]

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use triplet_core::config::{desk_config, ExperimentConfig};
use triplet_core::data::synth::{synth_generate, SynthSpec};
use triplet_core::pipeline::Datasets;
use triplet_core::rng;

pub fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0) * scale)
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Barlow Twins loss written out with plain loops.
pub fn bt_oracle(za: &Array2<f64>, zb: &Array2<f64>, lambda: f64, center: bool) -> f64 {
    let (n, d) = za.dim();
    let prep = |z: &Array2<f64>| {
        let mut out = z.clone();
        for c in 0..d {
            let mean = if center { (0..n).map(|i| z[[i, c]]).sum::<f64>() / n as f64 } else { 0.0 };
            let norm = ((0..n).map(|i| (z[[i, c]] - mean).powi(2)).sum::<f64>() + 1e-12).sqrt();
            for i in 0..n {
                out[[i, c]] = (z[[i, c]] - mean) / norm;
            }
        }
        out
    };
    let (a, b) = (prep(za), prep(zb));
    let mut loss = 0.0;
    for c in 0..d {
        for j in 0..d {
            let v: f64 = (0..n).map(|i| a[[i, c]] * b[[i, j]]).sum();
            loss += if c == j { (1.0 - v).powi(2) } else { lambda * v * v };
        }
    }
    loss
}

fn softmax_row(row: &[f64], t: f64) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| ((v - m) / t).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn ce_oracle(logits: &Array2<f64>, labels: &[usize]) -> f64 {
    let n = logits.nrows();
    (0..n)
        .map(|i| -softmax_row(logits.row(i).as_slice().unwrap(), 1.0)[labels[i]].ln())
        .sum::<f64>()
        / n as f64
}

/// Mean KL(student || teacher) of temperature softmaxes.
pub fn kl_oracle(student: &Array2<f64>, teacher: &Array2<f64>, t: f64) -> f64 {
    let n = student.nrows();
    (0..n)
        .map(|i| {
            let p = softmax_row(student.row(i).as_slice().unwrap(), t);
            let q = softmax_row(teacher.row(i).as_slice().unwrap(), t);
            p.iter().zip(&q).map(|(p, q)| p * (p / q).ln()).sum::<f64>()
        })
        .sum::<f64>()
        / n as f64
}

/// Relative error `|g - fd| / max(|g| + |fd|, 1e-12)` (Euclidean norms)
/// between `grad` and central differences of `f` at `x`.
pub fn fd_relative_error(x: &Array2<f64>, grad: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> f64 {
    let h = 1e-5;
    let mut fd = Array2::<f64>::zeros(x.dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let (i, j) = (idx / x.ncols(), idx % x.ncols());
        let orig = probe[[i, j]];
        probe[[i, j]] = orig + h;
        let up = f(&probe);
        probe[[i, j]] = orig - h;
        let down = f(&probe);
        probe[[i, j]] = orig;
        fd[[i, j]] = (up - down) / (2.0 * h);
    }
    let diff = (&fd - grad).mapv(|v| v * v).sum().sqrt();
    let scale = grad.mapv(|v| v * v).sum().sqrt() + fd.mapv(|v| v * v).sum().sqrt();
    diff / scale.max(1e-12)
}

/// Small but complete configuration: 20^3 volumes, two folds.
pub fn tiny_config(iterations: usize) -> ExperimentConfig {
    let mut c = desk_config();
    c.input_shape = [20; 3];
    c.base_channels = 2;
    c.latent_dim = 16;
    c.projection_dim = 32;
    c.head_hidden_dim = 16;
    c.folds = 2;
    c.eval_every = 2;
    for s in [&mut c.ssl, &mut c.distill, &mut c.finetune, &mut c.supervised_t, &mut c.supervised_d] {
        s.iterations = iterations;
        s.batch_size = 8;
    }
    c.synth = SynthSpec {
        unlabeled_count: 16,
        task_count: 30,
        target_count: 24,
        volume_shape: [20; 3],
        ..SynthSpec::desk()
    };
    c
}

/// Generates `config.synth` under `dir`, points the config at it and loads
/// every role.
pub fn synth_data(config: &mut ExperimentConfig, dir: &Path) -> Datasets {
    synth_data_roles(config, dir, true, true)
}

/// Like [`synth_data`] but loads role U and role D only when asked.
pub fn synth_data_roles(config: &mut ExperimentConfig, dir: &Path, unlabeled: bool, task: bool) -> Datasets {
    let out = synth_generate(&config.synth, &dir.join("data"), &mut rng::stream(config.seed, &[rng::label_id("synth")]))
        .expect("synthetic data");
    config.manifests.unlabeled = Some(out.unlabeled_path);
    config.manifests.task = Some(out.task_path);
    config.manifests.target = Some(out.target_path);
    config.output_dir = dir.join("run");
    Datasets::load_roles(config, unlabeled, task, true).expect("datasets load")
}

/// Labeled role-T manifest with `n` records; labels drawn from `classes`
/// with the given weights, some ages and sexes missing.
pub fn random_manifest(n: usize, weights: &[f64], r: &mut ChaCha8Rng) -> triplet_core::data::manifest::Manifest {
    use triplet_core::data::manifest::{Manifest, ManifestRecord, Role};
    let total: f64 = weights.iter().sum();
    let records = (0..n)
        .map(|i| {
            let mut u = r.random_range(0.0..total);
            let mut label = weights.len() - 1;
            for (k, w) in weights.iter().enumerate() {
                if u < *w {
                    label = k;
                    break;
                }
                u -= w;
            }
            ManifestRecord {
                subject_id: format!("s{i:05}"),
                path: format!("v/s{i:05}.raw").into(),
                role: Role::T,
                label: Some(label),
                age: (r.random_range(0.0..1.0) > 0.05).then(|| r.random_range(50.0..90.0)),
                sex: (r.random_range(0.0..1.0) > 0.05).then(|| if r.random_bool(0.5) { "F" } else { "M" }.to_string()),
            }
        })
        .collect();
    Manifest::new(records).expect("valid manifest")
}
