//! Two-dimensional embeddings of latent tables and their rendering.
//!
//! The default reducer follows the UMAP recipe in simplified form: a fuzzy
//! k-nearest-neighbour graph, a PCA initialization and stochastic layout
//! optimization with negative sampling. Plain PCA is the fallback.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::latent::LatentTable;
use crate::data::Role;
use crate::error::{Error, Result};
use crate::rng;

pub const MIN_ROWS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reducer {
    Umap,
    Pca,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UmapParams {
    pub neighbors: usize,
    pub epochs: usize,
    pub negative_samples: usize,
    /// Curve parameters for `1 / (1 + a d^(2b))`; these correspond to a
    /// minimum distance of 0.1.
    pub a: f64,
    pub b: f64,
}

impl Default for UmapParams {
    fn default() -> Self {
        Self {
            neighbors: 15,
            epochs: 200,
            negative_samples: 5,
            a: 1.577,
            b: 0.895,
        }
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum()
}

/// Top-two principal component scores of the rows.
pub fn pca_2d(rows: &[Vec<f32>]) -> Vec<[f64; 2]> {
    let n = rows.len();
    let dim = rows.first().map_or(0, Vec::len);
    if n == 0 || dim == 0 {
        return vec![[0.0; 2]; n];
    }
    let mut mean = vec![0.0f64; dim];
    for r in rows {
        for (m, &x) in mean.iter_mut().zip(r) {
            *m += x as f64 / n as f64;
        }
    }
    let centered: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().zip(&mean).map(|(&x, m)| x as f64 - m).collect()).collect();
    let mut comps: Vec<Vec<f64>> = Vec::new();
    for c in 0..2 {
        // Power iteration on X^T X with deflation against earlier components.
        let mut v: Vec<f64> = (0..dim).map(|i| 1.0 + ((i * 7 + c * 13) % 11) as f64 * 0.1).collect();
        for _ in 0..200 {
            let xv: Vec<f64> = centered.iter().map(|r| r.iter().zip(&v).map(|(a, b)| a * b).sum()).collect();
            let mut next = vec![0.0; dim];
            for (r, s) in centered.iter().zip(&xv) {
                for (nx, a) in next.iter_mut().zip(r) {
                    *nx += a * s;
                }
            }
            for prev in &comps {
                let d: f64 = next.iter().zip(prev).map(|(a, b)| a * b).sum();
                for (nx, p) in next.iter_mut().zip(prev) {
                    *nx -= d * p;
                }
            }
            let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-300 {
                break;
            }
            v = next.iter().map(|x| x / norm).collect();
        }
        comps.push(v);
    }
    centered
        .iter()
        .map(|r| {
            let p = |c: &Vec<f64>| r.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
            [p(&comps[0]), p(&comps[1])]
        })
        .collect()
}

/// Symmetric fuzzy neighbour graph as an edge list `(i, j, weight)`, `i < j`.
fn fuzzy_graph(rows: &[Vec<f32>], k: usize) -> Vec<(usize, usize, f64)> {
    let n = rows.len();
    let k = k.min(n - 1).max(1);
    let knn: Vec<Vec<(usize, f64)>> = crate::parallel::map_indexed(n, |i| {
        let mut d: Vec<(usize, f64)> = (0..n).filter(|&j| j != i).map(|j| (j, sq_dist(&rows[i], &rows[j]).sqrt())).collect();
        d.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        d.truncate(k);
        d
    });
    let target = (k as f64).log2();
    let mut directed = std::collections::HashMap::<(usize, usize), f64>::new();
    for (i, nb) in knn.iter().enumerate() {
        let rho = nb.iter().map(|p| p.1).find(|&d| d > 0.0).unwrap_or(0.0);
        let (mut lo, mut hi, mut sigma) = (0.0, f64::INFINITY, 1.0);
        for _ in 0..64 {
            let s: f64 = nb.iter().map(|&(_, d)| (-((d - rho).max(0.0)) / sigma).exp()).sum();
            if (s - target).abs() < 1e-5 {
                break;
            }
            if s > target {
                hi = sigma;
                sigma = (lo + hi) / 2.0;
            } else {
                lo = sigma;
                sigma = if hi.is_finite() { (lo + hi) / 2.0 } else { sigma * 2.0 };
            }
        }
        for &(j, d) in nb {
            directed.insert((i, j), (-((d - rho).max(0.0)) / sigma.max(1e-12)).exp());
        }
    }
    let mut pairs = std::collections::BTreeMap::<(usize, usize), (f64, f64)>::new();
    for (&(i, j), &w) in &directed {
        let e = pairs.entry((i.min(j), i.max(j))).or_default();
        if i < j {
            e.0 = w;
        } else {
            e.1 = w;
        }
    }
    let edges: Vec<(usize, usize, f64)> = pairs.into_iter().map(|((i, j), (a, b))| (i, j, a + b - a * b)).collect();
    edges
}

/// UMAP-style layout of the rows.
pub fn umap_2d<R: Rng + ?Sized>(rows: &[Vec<f32>], params: &UmapParams, rng: &mut R) -> Vec<[f64; 2]> {
    let n = rows.len();
    let edges = fuzzy_graph(rows, params.neighbors);
    let mut pos = pca_2d(rows);
    let extent = pos.iter().flat_map(|p| p.iter().map(|x| x.abs())).fold(0.0f64, f64::max).max(1e-12);
    for p in &mut pos {
        for x in p.iter_mut() {
            *x = *x / extent * 10.0 + rng.random_range(-1e-4..1e-4);
        }
    }
    let wmax = edges.iter().map(|e| e.2).fold(0.0f64, f64::max).max(1e-12);
    let every: Vec<f64> = edges.iter().map(|e| wmax / e.2.max(1e-12)).collect();
    let mut next_at = every.clone();
    let (a, b) = (params.a, params.b);
    let clip = |g: f64| g.clamp(-4.0, 4.0);
    for epoch in 0..params.epochs {
        let lr = 1.0 - epoch as f64 / params.epochs as f64;
        for (e, &(i, j, _)) in edges.iter().enumerate() {
            if next_at[e] > (epoch + 1) as f64 {
                continue;
            }
            next_at[e] += every[e];
            let d2 = (pos[i][0] - pos[j][0]).powi(2) + (pos[i][1] - pos[j][1]).powi(2);
            if d2 > 0.0 {
                let coef = -2.0 * a * b * d2.powf(b - 1.0) / (1.0 + a * d2.powf(b));
                for c in 0..2 {
                    let g = clip(coef * (pos[i][c] - pos[j][c])) * lr;
                    pos[i][c] += g;
                    pos[j][c] -= g;
                }
            }
            for _ in 0..params.negative_samples {
                let k = rng.random_range(0..n);
                if k == i {
                    continue;
                }
                let d2 = (pos[i][0] - pos[k][0]).powi(2) + (pos[i][1] - pos[k][1]).powi(2);
                let coef = 2.0 * b / ((0.001 + d2) * (1.0 + a * d2.powf(b)));
                for c in 0..2 {
                    let g = if coef > 0.0 { clip(coef * (pos[i][c] - pos[k][c])) } else { 4.0 };
                    pos[i][c] += g * lr;
                }
            }
        }
    }
    pos
}

/// Mean silhouette of 2-D points under Euclidean distance.
pub fn silhouette(points: &[[f64; 2]], labels: &[usize]) -> f64 {
    let n = points.len();
    let dist = |i: usize, j: usize| ((points[i][0] - points[j][0]).powi(2) + (points[i][1] - points[j][1]).powi(2)).sqrt();
    let classes: Vec<usize> = {
        let mut c = labels.to_vec();
        c.sort_unstable();
        c.dedup();
        c
    };
    if classes.len() < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = vec![(0.0, 0usize); classes.len()];
        for j in 0..n {
            if i != j {
                let c = classes.binary_search(&labels[j]).expect("known");
                sums[c].0 += dist(i, j);
                sums[c].1 += 1;
            }
        }
        let own = classes.binary_search(&labels[i]).expect("known");
        if sums[own].1 == 0 {
            continue;
        }
        let a = sums[own].0 / sums[own].1 as f64;
        let b = sums
            .iter()
            .enumerate()
            .filter(|&(c, s)| c != own && s.1 > 0)
            .map(|(_, s)| s.0 / s.1 as f64)
            .fold(f64::INFINITY, f64::min);
        total += (b - a) / a.max(b);
    }
    total / n as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedPoint {
    pub id: String,
    pub role: Role,
    pub label: Option<usize>,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub stage: String,
    pub reducer: Reducer,
    pub points: Vec<EmbeddedPoint>,
}

/// Embeds a latent table into the plane; deterministic for a given seed.
pub fn embed_latents_2d(table: &LatentTable, reducer: Reducer, seed: u64) -> Result<Embedding> {
    if table.rows.len() < MIN_ROWS {
        return Err(Error::Evaluation(format!(
            "need at least {MIN_ROWS} latent rows to embed, got {}",
            table.rows.len()
        )));
    }
    let vectors: Vec<Vec<f32>> = table.rows.iter().map(|r| r.latent.clone()).collect();
    let coords = match reducer {
        Reducer::Pca => pca_2d(&vectors),
        Reducer::Umap => umap_2d(&vectors, &UmapParams::default(), &mut rng::stream(seed, &[rng::label_id("umap")])),
    };
    Ok(Embedding {
        stage: table.stage.clone(),
        reducer,
        points: table
            .rows
            .iter()
            .zip(coords)
            .map(|(r, [x, y])| EmbeddedPoint {
                id: r.id.clone(),
                role: r.role,
                label: r.label,
                x,
                y,
            })
            .collect(),
    })
}

impl Embedding {
    /// `id,role,label,x,y`, one row per point.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Evaluation(format!("{}: {e}", path.display())))?;
        let err = |e: csv::Error| Error::Evaluation(format!("{}: {e}", path.display()));
        w.write_record(["id", "role", "label", "x", "y"]).map_err(err)?;
        for p in &self.points {
            let label = p.label.map(|l| crate::data::CLASS_NAMES.get(l).map_or(l.to_string(), |s| s.to_string()));
            w.write_record([
                p.id.clone(),
                p.role.to_string(),
                label.unwrap_or_default(),
                format!("{}", p.x),
                format!("{}", p.y),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Scatter plot: role U in grey, labelled roles coloured by class, role
    /// T drawn larger with a dark outline.
    pub fn write_png(&self, path: &Path, size: u32) -> Result<()> {
        let mut img = image::RgbImage::from_pixel(size, size, image::Rgb([255, 255, 255]));
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in &self.points {
            for (c, v) in [p.x, p.y].into_iter().enumerate() {
                lo[c] = lo[c].min(v);
                hi[c] = hi[c].max(v);
            }
        }
        let margin = 12.0;
        let span = (size as f64 - 2.0 * margin).max(1.0);
        let to_px = |v: f64, c: usize| margin + (v - lo[c]) / (hi[c] - lo[c]).max(1e-12) * span;
        let class_colours = [[46, 125, 50], [198, 40, 40], [21, 101, 192]];
        let mut ordered: Vec<&EmbeddedPoint> = self.points.iter().collect();
        ordered.sort_by_key(|p| match p.role {
            Role::U => 0,
            Role::D => 1,
            Role::T => 2,
        });
        for p in ordered {
            let (cx, cy) = (to_px(p.x, 0), size as f64 - to_px(p.y, 1));
            let fill = match (p.role, p.label) {
                (Role::U, _) | (_, None) => [170, 170, 170],
                (Role::D, Some(l)) => class_colours[l % 3].map(|c: u8| c / 2 + 110),
                (Role::T, Some(l)) => class_colours[l % 3],
            };
            let radius: f64 = if p.role == Role::T { 4.0 } else { 2.5 };
            let r = radius.ceil() as i64 + 1;
            for dy in -r..=r {
                for dx in -r..=r {
                    let d = ((dx * dx + dy * dy) as f64).sqrt();
                    let (px, py) = (cx as i64 + dx, cy as i64 + dy);
                    if d > radius || px < 0 || py < 0 || px >= size as i64 || py >= size as i64 {
                        continue;
                    }
                    let colour = if p.role == Role::T && d > radius - 1.2 { [20, 20, 20] } else { fill };
                    img.put_pixel(px as u32, py as u32, image::Rgb(colour));
                }
            }
        }
        img.save(path).map_err(|e| Error::Evaluation(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::latent::LatentRow;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    fn clusters(n: usize, seed: u64) -> (LatentTable, Vec<usize>) {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = i % 3;
            let latent = (0..8).map(|d| if d == c { 5.0 } else { 0.0 } + noise.sample(&mut r) as f32).collect();
            rows.push(LatentRow {
                id: format!("s{i}"),
                role: Role::D,
                label: Some(c),
                latent,
            });
            labels.push(c);
        }
        (
            LatentTable {
                stage: "test".into(),
                rows,
            },
            labels,
        )
    }

    #[test]
    fn separated_clusters_stay_separated() {
        let (t, labels) = clusters(100, 1);
        for reducer in [Reducer::Umap, Reducer::Pca] {
            let e = embed_latents_2d(&t, reducer, 0).unwrap();
            let pts: Vec<[f64; 2]> = e.points.iter().map(|p| [p.x, p.y]).collect();
            let s = silhouette(&pts, &labels);
            assert!(s > 0.5, "{reducer:?}: silhouette {s}");
        }
    }

    #[test]
    fn deterministic_and_written() {
        let (t, _) = clusters(30, 2);
        let a = embed_latents_2d(&t, Reducer::Umap, 4).unwrap();
        assert_eq!(a, embed_latents_2d(&t, Reducer::Umap, 4).unwrap());
        let dir = tempfile::tempdir().unwrap();
        a.write_csv(&dir.path().join("e.csv")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("e.csv")).unwrap();
        assert_eq!(text.lines().count(), 31);
        a.write_png(&dir.path().join("e.png"), 200).unwrap();
        assert!(dir.path().join("e.png").exists());
    }

    #[test]
    fn too_few_rows() {
        let (t, _) = clusters(9, 3);
        assert!(matches!(embed_latents_2d(&t, Reducer::Pca, 0), Err(Error::Evaluation(_))));
    }
}
