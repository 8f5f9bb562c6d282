//! The iteration loop shared by every stage: batch streaming, optimizer
//! steps, periodic resumable checkpoints, validation-driven early stopping
//! and abort on non-finite losses.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::runlog::RunLog;
use crate::backbone::{read_weights, save_weights, FeatureExtractor, Module, ModelWeights, ProjectionHead, StageTag};
use crate::config::StageHyperParams;
use crate::data::batches::BatchSampler;
use crate::data::VolumeSample;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalSet};
use crate::optim::{learning_rate, Optimizer};

pub const RESUME_STATE: &str = "resume.json";
pub const RESUME_WEIGHTS: &str = "resume.ckpt";
pub const BEST_WEIGHTS: &str = "best.ckpt";
pub const ABORT_REPORT: &str = "abort.json";

/// Number of checkpoints written over a stage.
const CHECKPOINTS_PER_STAGE: usize = 10;

/// Network being trained: extractor plus head.
#[derive(Debug, Clone)]
pub struct Model {
    pub extractor: FeatureExtractor,
    pub head: ProjectionHead,
}

impl Model {
    pub fn capture(&self, tag: StageTag, seed: u64) -> ModelWeights {
        ModelWeights::capture(tag, seed, &self.extractor, Some(&self.head))
    }

    fn zero_grad(&mut self) {
        self.extractor.zero_grad();
        self.head.zero_grad();
    }

    fn load(&mut self, w: &ModelWeights) -> Result<()> {
        self.extractor.load_arrays(&w.arrays)?;
        self.head.load_arrays(&w.arrays)
    }
}

/// Loss of one step and its named components.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: f64,
    pub terms: Vec<(&'static str, f64)>,
}

/// Everything the loop needs besides the step function.
#[derive(Debug, Clone)]
pub struct LoopSpec<'a> {
    pub stage: &'a str,
    pub tag: StageTag,
    pub fold: Option<usize>,
    pub hyper: &'a StageHyperParams,
    pub samples: usize,
    pub batch_seed: u64,
    pub seed: u64,
    pub dir: &'a Path,
    /// Identity of this stage's inputs; a checkpoint with another key is
    /// never resumed.
    pub key: &'a str,
    pub resume: bool,
}

/// Early-stopping configuration.
pub struct Validation<'a> {
    pub samples: Vec<&'a VolumeSample>,
    pub every: usize,
    pub patience: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopState {
    pub best: Option<f64>,
    pub best_iteration: Option<usize>,
    pub stale: usize,
    /// `(iterations completed, validation BAcc)` per evaluation.
    pub history: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ResumeState {
    key: String,
    iteration: usize,
    optimizer_steps: u64,
    loss_curve: Vec<f64>,
    early: EarlyStopState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopOutcome {
    pub loss_curve: Vec<f64>,
    pub stopped_early_at: Option<usize>,
    pub early: EarlyStopState,
    pub resumed_from: Option<usize>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_vec_pretty(value).map_err(|e| Error::io(path, e.into()))?;
    let tmp = path.with_extension("json.partial");
    std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub(crate) fn stage_file(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

fn try_resume(spec: &LoopSpec, model: &mut Model, opt: &mut Optimizer) -> Result<Option<(ResumeState, Option<ModelWeights>)>> {
    let state_path = stage_file(spec.dir, RESUME_STATE);
    if !spec.resume || !state_path.exists() {
        return Ok(None);
    }
    let state: ResumeState = read_json(&state_path)?;
    if state.key != spec.key {
        log::warn!("{}: ignoring checkpoint written for different inputs", spec.dir.display());
        return Ok(None);
    }
    let w = read_weights(&stage_file(spec.dir, RESUME_WEIGHTS))?;
    model.load(&w)?;
    opt.load_state(state.optimizer_steps, &w.arrays);
    let best = if state.early.best.is_some() {
        Some(read_weights(&stage_file(spec.dir, BEST_WEIGHTS))?)
    } else {
        None
    };
    log::info!("{}: resuming at iteration {}", spec.stage, state.iteration);
    Ok(Some((state, best)))
}

fn save_resume(
    spec: &LoopSpec,
    model: &Model,
    opt: &Optimizer,
    iteration: usize,
    curve: &[f64],
    early: &EarlyStopState,
    best: Option<&ModelWeights>,
) -> Result<()> {
    let mut w = model.capture(spec.tag, spec.seed);
    w.arrays.extend(opt.state_arrays());
    save_weights(&w, &stage_file(spec.dir, RESUME_WEIGHTS))?;
    if let Some(b) = best {
        save_weights(b, &stage_file(spec.dir, BEST_WEIGHTS))?;
    }
    write_json(
        &stage_file(spec.dir, RESUME_STATE),
        &ResumeState {
            key: spec.key.to_string(),
            iteration,
            optimizer_steps: opt.steps(),
            loss_curve: curve.to_vec(),
            early: early.clone(),
        },
    )
}

/// Removes resume artifacts once a stage has finished.
pub(crate) fn clear_resume(dir: &Path) {
    for f in [RESUME_STATE, RESUME_WEIGHTS, BEST_WEIGHTS] {
        let _ = std::fs::remove_file(stage_file(dir, f));
    }
}

/// Runs `spec.hyper.iterations` steps (fewer on early stop). `step` computes
/// the loss of one batch and accumulates gradients into the model.
pub fn train<F>(
    spec: &LoopSpec,
    model: &mut Model,
    validation: Option<Validation>,
    log: &mut RunLog,
    mut step: F,
) -> Result<LoopOutcome>
where
    F: FnMut(&mut Model, u64, &[usize]) -> Result<StepOutput>,
{
    let h = spec.hyper;
    if spec.samples < 2 {
        return Err(Error::Config(format!(
            "stage {} needs at least 2 training samples, got {}",
            spec.stage, spec.samples
        )));
    }
    let batch = if h.batch_size > spec.samples {
        log::warn!(
            "{}: batch size {} exceeds the {} training samples; using {}",
            spec.stage,
            h.batch_size,
            spec.samples,
            spec.samples
        );
        spec.samples
    } else {
        h.batch_size
    };
    std::fs::create_dir_all(spec.dir).map_err(|e| Error::io(spec.dir, e))?;
    let sampler = BatchSampler::new(spec.samples, batch, true, spec.batch_seed)?;
    let mut stream = sampler.stream();
    let mut opt = Optimizer::for_stage(h);
    let mut curve = Vec::with_capacity(h.iterations);
    let mut early = EarlyStopState::default();
    let mut best: Option<ModelWeights> = None;
    let mut start = 0;
    if let Some((state, best_w)) = try_resume(spec, model, &mut opt)? {
        start = state.iteration;
        curve = state.loss_curve;
        early = state.early;
        best = best_w;
        for _ in 0..start {
            stream.next_batch();
        }
    }
    let resumed_from = (start > 0).then_some(start);
    let cadence = h.iterations.div_ceil(CHECKPOINTS_PER_STAGE).max(1);
    let mut stopped_early_at = None;

    for it in start..h.iterations {
        let (epoch, idx) = stream.next_batch();
        model.zero_grad();
        let out = step(model, epoch, &idx)?;
        if !out.loss.is_finite() {
            let ids: Vec<usize> = idx.clone();
            let report = json!({
                "stage": spec.stage,
                "fold": spec.fold,
                "iteration": it,
                "loss": out.loss.to_string(),
                "terms": out.terms.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect::<BTreeMap<_, _>>(),
                "batch_indices": ids,
            });
            let _ = write_json(&stage_file(spec.dir, ABORT_REPORT), &report);
            let _ = log.record(json!({"event": "abort", "detail": report}));
            return Err(Error::Aborted {
                stage: spec.stage.to_string(),
                iteration: it,
                reason: format!(
                    "non-finite loss {} (terms {:?}) on batch {:?}",
                    out.loss, out.terms, idx
                ),
            });
        }
        let lr = learning_rate(h.learning_rate, h.schedule, it, h.iterations);
        {
            let mut params = model.extractor.params_mut();
            params.extend(model.head.params_mut());
            opt.step(&mut params, lr);
        }
        curve.push(out.loss);
        log.iteration(spec.stage, spec.fold, it, out.loss, lr, &out.terms)?;

        let done = it + 1;
        if let Some(v) = &validation {
            if done % v.every == 0 || done == h.iterations {
                let r = evaluate(&model.extractor, &model.head, &v.samples, spec.fold, EvalSet::TargetValidation)?;
                let bacc = r.balanced_accuracy;
                early.history.push((done, bacc));
                if early.best.is_none_or(|b| bacc > b) {
                    early.best = Some(bacc);
                    early.best_iteration = Some(done);
                    early.stale = 0;
                    best = Some(model.capture(spec.tag, spec.seed));
                } else {
                    early.stale += 1;
                }
                log.record(json!({
                    "event": "validation", "stage": spec.stage, "fold": spec.fold,
                    "iteration": done, "balanced_accuracy": bacc, "best": early.best, "stale": early.stale,
                }))?;
                if v.patience.is_some_and(|p| early.stale >= p) {
                    stopped_early_at = Some(done);
                    log::info!("{}: early stop after {done} iterations", spec.stage);
                    break;
                }
            }
        }
        if done % cadence == 0 && done < h.iterations {
            save_resume(spec, model, &opt, done, &curve, &early, best.as_ref())?;
        }
    }
    if let Some(b) = &best {
        model.load(b)?;
    }
    Ok(LoopOutcome {
        loss_curve: curve,
        stopped_early_at,
        early,
        resumed_from,
    })
}
