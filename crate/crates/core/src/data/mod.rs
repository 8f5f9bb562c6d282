//! Volumes, manifests, cross-validation splits, batching and the synthetic
//! data generator.

pub mod batches;
pub mod io;
pub mod manifest;
pub mod split;
pub mod synth;
pub mod volume;

pub use batches::{iterate_batches, BatchSampler};
pub use manifest::{load_manifest, Manifest, ManifestRecord, Role, CLASS_NAMES};
pub use split::{balanced_holdout, stratified_kfold, FoldSplit};
pub use synth::{synth_generate, SynthSpec};
pub use volume::{normalize_volume, Volume};

use std::path::Path;

use crate::error::Result;

/// One volume with its metadata, ready to flow through a training stage.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeSample {
    pub volume: Volume,
    pub label: Option<usize>,
    pub age: Option<f64>,
    pub sex: Option<String>,
    pub subject_id: String,
    pub role: Role,
}

/// Reads every volume of a manifest and normalizes it to `shape`.
pub fn load_samples(manifest: &Manifest, shape: [usize; 3]) -> Result<Vec<VolumeSample>> {
    let loaded = crate::parallel::map_indexed(manifest.len(), |i| -> Result<VolumeSample> {
        let r = &manifest.records()[i];
        let raw = io::read_volume(&r.path)?;
        Ok(VolumeSample {
            volume: normalize_volume(&raw, shape)?,
            label: r.label,
            age: r.age,
            sex: r.sex.clone(),
            subject_id: r.subject_id.clone(),
            role: r.role,
        })
    });
    loaded.into_iter().collect()
}

/// Convenience wrapper: load a manifest file and all of its volumes.
pub fn load_dataset(path: &Path, shape: [usize; 3]) -> Result<(Manifest, Vec<VolumeSample>)> {
    let m = load_manifest(path)?;
    let s = load_samples(&m, shape)?;
    Ok((m, s))
}
