//! Latent-space tables: one row per sample with its extractor output.

use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::backbone::{ExtractorSpec, FeatureExtractor, ModelWeights};
use crate::data::{Role, VolumeSample};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentRow {
    pub id: String,
    pub role: Role,
    pub label: Option<usize>,
    pub latent: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentTable {
    pub stage: String,
    pub rows: Vec<LatentRow>,
}

impl LatentTable {
    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, |r| r.latent.len())
    }

    /// `id,role,label,z0,..,z{Z-1}`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let err = |e: csv::Error| Error::Evaluation(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        let mut header = vec!["id".to_string(), "role".into(), "label".into()];
        header.extend((0..self.dim()).map(|i| format!("z{i}")));
        w.write_record(&header).map_err(err)?;
        for r in &self.rows {
            let mut rec = vec![r.id.clone(), r.role.to_string(), r.label.map(|l| l.to_string()).unwrap_or_default()];
            rec.extend(r.latent.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Seeded uniform subsample of at most `max` indices out of `n`, in order.
pub fn subsample(n: usize, max: usize, seed: u64) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    let mut idx = sample(&mut rng::stream(seed, &[rng::label_id("subsample")]), n, max).into_vec();
    idx.sort_unstable();
    idx
}

/// Latent vectors of `samples` under `extractor`, in sample order.
pub fn extract_latents(extractor: &FeatureExtractor, samples: &[&VolumeSample], stage: &str) -> Result<LatentTable> {
    let latents = super::infer_in_batches(samples, |batch| extractor.infer(batch))?;
    Ok(LatentTable {
        stage: stage.to_string(),
        rows: samples
            .iter()
            .zip(latents)
            .map(|(s, latent)| LatentRow {
                id: s.subject_id.clone(),
                role: s.role,
                label: s.label,
                latent,
            })
            .collect(),
    })
}

/// One table per checkpoint, all over the same samples.
pub fn extract_stage_latents(
    weights: &[ModelWeights],
    spec: &ExtractorSpec,
    samples: &[&VolumeSample],
) -> Result<Vec<LatentTable>> {
    weights
        .iter()
        .map(|w| extract_latents(&w.extractor(spec)?, samples, &w.stage.to_string()))
        .collect()
}
