//! Metrics, evaluation of trained classifiers, latent extraction and 2-D
//! embeddings of the latent space.

pub mod embed;
pub mod latent;
pub mod metrics;

pub use embed::{embed_latents_2d, silhouette, Embedding, Reducer};
pub use latent::{extract_latents, extract_stage_latents, LatentRow, LatentTable};
pub use metrics::{
    balanced_accuracy, confusion, macro_f1, mean_std, report_table, tpr, AggregateReport, ConfusionMatrix, EvalSet,
    MetricReport,
};

use crate::backbone::{FeatureExtractor, ProjectionHead};
use crate::data::volume::min_max_rescale;
use crate::data::VolumeSample;
use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Samples per inference batch.
pub const EVAL_BATCH: usize = 16;

/// Runs `f` over rescaled samples in fixed-size batches and splits the
/// output back into one row per sample.
pub(crate) fn infer_in_batches(
    samples: &[&VolumeSample],
    mut f: impl FnMut(&Tensor) -> Result<Tensor>,
) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let dims = chunk[0].volume.dims;
        let vols: Vec<Vec<f32>> = chunk.iter().map(|s| min_max_rescale(&s.volume).0.data).collect();
        let refs: Vec<&[f32]> = vols.iter().map(Vec::as_slice).collect();
        let y = f(&Tensor::stack(&[1, dims[0], dims[1], dims[2]], &refs)?)?;
        out.extend((0..chunk.len()).map(|i| y.sample(i).to_vec()));
    }
    Ok(out)
}

/// Index of the largest logit; the lowest index wins ties.
pub fn argmax(logits: &[f32]) -> usize {
    logits
        .iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Class predictions in evaluation mode, without augmentation.
pub fn predict(extractor: &FeatureExtractor, head: &ProjectionHead, samples: &[&VolumeSample]) -> Result<Vec<usize>> {
    let logits = infer_in_batches(samples, |b| head.infer(&extractor.infer(b)?))?;
    Ok(logits.iter().map(|l| argmax(l)).collect())
}

/// Metrics of a classifier on labelled samples.
pub fn evaluate(
    extractor: &FeatureExtractor,
    head: &ProjectionHead,
    samples: &[&VolumeSample],
    fold: Option<usize>,
    dataset: EvalSet,
) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::Evaluation("cannot evaluate on an empty split".into()));
    }
    let truth = samples
        .iter()
        .map(|s| s.label.ok_or_else(|| Error::Evaluation(format!("sample {} has no label", s.subject_id))))
        .collect::<Result<Vec<_>>>()?;
    let predicted = predict(extractor, head, samples)?;
    let cm = confusion(&truth, &predicted, head.out_dim())?;
    Ok(MetricReport::from_confusion(cm, fold, dataset))
}
