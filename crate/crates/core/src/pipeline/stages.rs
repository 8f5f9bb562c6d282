//! The individual training stages.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::runlog::RunLog;
use super::trainer::{clear_resume, read_json, stage_file, train, LoopSpec, Model, StepOutput, Validation};
use crate::augment::{stage_transforms, AugmentStage, AugmentationPipeline};
use crate::backbone::{
    freeze, init_model, read_weights, save_weights, ExtractorSpec, HeadKind, HeadSpec, ModelWeights,
    ProjectionHead, StageTag,
};
use crate::config::{ExperimentConfig, StageHyperParams};
use crate::data::batches::assemble_batch;
use crate::data::{FoldSplit, VolumeSample};
use crate::error::{Error, Result};
use crate::losses::{barlow_twins_objective, cross_entropy_objective, distillation_objective};
use crate::nn::{Mode, Tensor};
use crate::rng::{self, label_id};

pub const WEIGHTS_FILE: &str = "weights.ckpt";
pub const RESULT_FILE: &str = "result.json";
pub const LOG_FILE: &str = "log.jsonl";

/// Output directory, log and resume policy of one pipeline run.
#[derive(Debug)]
pub struct Run {
    pub dir: PathBuf,
    pub log: RunLog,
    /// Reuse finished stages and continue interrupted ones whose inputs match.
    pub resume: bool,
}

impl Run {
    pub fn create(dir: &Path, resume: bool) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            log: RunLog::open(&dir.join(LOG_FILE))?,
            resume,
        })
    }
}

/// Summary of a finished stage, also written as `result.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub stage: String,
    pub tag: StageTag,
    pub fold: Option<usize>,
    pub weights_path: PathBuf,
    pub weights_hash: String,
    /// Content hash of the weights this stage started from, when they came
    /// from an earlier stage.
    pub init_hash: Option<String>,
    pub loss_curve: Vec<f64>,
    pub wall_clock_secs: f64,
    pub seed: u64,
    pub config_fingerprint: String,
    pub stage_key: String,
    pub stopped_early_at: Option<usize>,
    pub best_validation_bacc: Option<f64>,
    pub best_iteration: Option<usize>,
    pub validation_history: Vec<(usize, f64)>,
    pub teacher_checksum_before: Option<String>,
    pub teacher_checksum_after: Option<String>,
    pub teacher_grad_norm_sq: Option<f64>,
    pub resumed_from: Option<usize>,
    /// Set when the stage was not re-run because a matching result existed.
    #[serde(default)]
    pub reused: bool,
}

#[derive(Debug, Clone)]
pub struct StageOutput {
    pub result: StageResult,
    pub weights: ModelWeights,
}

/// Digest of a JSON description of a stage's inputs.
pub fn stage_key(parts: &Value) -> String {
    hex::encode(Sha256::digest(parts.to_string().as_bytes()))
}

/// Digest of the subjects a stage trains on.
pub fn sample_digest(samples: &[&VolumeSample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update(s.role.to_string().as_bytes());
        h.update(s.subject_id.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

pub(crate) fn to_array(t: &Tensor) -> Array2<f64> {
    let b = t.batch();
    let n = t.sample_len();
    Array2::from_shape_fn((b, n), |(i, j)| t.data()[i * n + j] as f64)
}

pub(crate) fn from_array(a: &Array2<f64>) -> Tensor {
    Tensor::from_vec(&[a.nrows(), a.ncols()], a.iter().map(|&v| v as f32).collect()).expect("shape matches")
}

fn non_finite(what: &str) -> StepOutput {
    StepOutput {
        loss: f64::NAN,
        terms: vec![(if what == "latents" { "non_finite_latents" } else { "non_finite_outputs" }, 1.0)],
    }
}

fn reuse(run: &Run, dir: &Path, key: &str) -> Result<Option<StageOutput>> {
    let path = stage_file(dir, RESULT_FILE);
    if !run.resume || !path.exists() {
        return Ok(None);
    }
    let mut result: StageResult = read_json(&path)?;
    if result.stage_key != key {
        return Ok(None);
    }
    let weights = read_weights(&result.weights_path)?;
    if weights.content_hash() != result.weights_hash {
        log::warn!("{}: stored weights do not match their result record; re-running", dir.display());
        return Ok(None);
    }
    log::info!("reusing finished stage in {}", dir.display());
    result.reused = true;
    Ok(Some(StageOutput { result, weights }))
}

struct Finish<'a> {
    stage: &'a str,
    tag: StageTag,
    fold: Option<usize>,
    dir: &'a Path,
    key: String,
    init_hash: Option<String>,
    started: Instant,
}

impl Finish<'_> {
    fn write(
        self,
        config: &ExperimentConfig,
        run: &mut Run,
        model: &Model,
        outcome: super::trainer::LoopOutcome,
        teacher: Option<(String, String, f64)>,
    ) -> Result<StageOutput> {
        let weights = model.capture(self.tag, config.seed);
        let weights_path = stage_file(self.dir, WEIGHTS_FILE);
        save_weights(&weights, &weights_path)?;
        let (before, after, grad) = match teacher {
            Some((b, a, g)) => (Some(b), Some(a), Some(g)),
            None => (None, None, None),
        };
        let result = StageResult {
            stage: self.stage.to_string(),
            tag: self.tag,
            fold: self.fold,
            weights_path,
            weights_hash: weights.content_hash(),
            init_hash: self.init_hash,
            loss_curve: outcome.loss_curve,
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
            seed: config.seed,
            config_fingerprint: config.fingerprint(),
            stage_key: self.key,
            stopped_early_at: outcome.stopped_early_at,
            best_validation_bacc: outcome.early.best,
            best_iteration: outcome.early.best_iteration,
            validation_history: outcome.early.history,
            teacher_checksum_before: before,
            teacher_checksum_after: after,
            teacher_grad_norm_sq: grad,
            resumed_from: outcome.resumed_from,
            reused: false,
        };
        let text = serde_json::to_vec_pretty(&result).expect("result serializes");
        let path = stage_file(self.dir, RESULT_FILE);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        clear_resume(self.dir);
        run.log.record(json!({
            "event": "stage_end", "stage": result.stage, "fold": result.fold,
            "iterations": result.loss_curve.len(), "final_loss": result.loss_curve.last(),
            "weights_hash": result.weights_hash, "wall_clock_secs": result.wall_clock_secs,
        }))?;
        Ok(StageOutput { result, weights })
    }
}

fn pipeline_for(config: &ExperimentConfig, stage: AugmentStage, stream: &str) -> AugmentationPipeline {
    AugmentationPipeline::new(
        stage,
        stage_transforms(stage, config.input_shape),
        rng::derive_seed(config.seed, &[label_id(stream), label_id("augment")]),
    )
}

fn batch_seed(config: &ExperimentConfig, stream: &str, fold: Option<usize>) -> u64 {
    rng::derive_seed(config.seed, &[label_id(stream), label_id("batches"), fold.map_or(u64::MAX, |f| f as u64)])
}

/// Barlow Twins self-supervision on unlabeled volumes, producing the
/// pre-trained extractor (with its projection head).
pub fn run_ssl_stage(config: &ExperimentConfig, run: &mut Run, unlabeled: &[&VolumeSample]) -> Result<StageOutput> {
    const NAME: &str = "ssl";
    let hyper = &config.ssl;
    let dir = run.dir.join(NAME);
    let key = stage_key(&json!({
        "stage": NAME, "seed": config.seed, "hyper": hyper,
        "extractor": ExtractorSpec::from_config(config), "head": HeadSpec::from_config(config, HeadKind::Ssl),
        "center": config.center_embeddings, "data": sample_digest(unlabeled),
    }));
    if let Some(o) = reuse(run, &dir, &key)? {
        return Ok(o);
    }
    if unlabeled.is_empty() {
        return Err(Error::Config("self-supervision needs a non-empty unlabeled (role U) dataset".into()));
    }
    let started = Instant::now();
    let (extractor, head) = init_model(config, HeadKind::Ssl, &mut rng::stream(config.seed, &[label_id(NAME), label_id("init")]))?;
    let mut model = Model { extractor, head };
    let pipeline = pipeline_for(config, AugmentStage::Ssl, NAME);
    let spec = LoopSpec {
        stage: NAME,
        tag: StageTag::ThetaPrime,
        fold: None,
        hyper,
        samples: unlabeled.len(),
        batch_seed: batch_seed(config, NAME, None),
        seed: config.seed,
        dir: &dir,
        key: &key,
        resume: run.resume,
    };
    let (lambda, center) = (hyper.lambda, config.center_embeddings);
    let outcome = train(&spec, &mut model, None, &mut run.log, |m, epoch, idx| {
        let a = assemble_batch(unlabeled, idx, Some(&pipeline), epoch, 0)?;
        let b = assemble_batch(unlabeled, idx, Some(&pipeline), epoch, 1)?;
        let (za, ta) = m.extractor.forward(&a.volumes, Mode::Train)?;
        let (pa, ha) = m.head.forward(&za)?;
        let (zb, tb) = m.extractor.forward(&b.volumes, Mode::Train)?;
        let (pb, hb) = m.head.forward(&zb)?;
        if !pa.is_finite() || !pb.is_finite() {
            return Ok(non_finite("projections"));
        }
        let out = barlow_twins_objective(to_array(&pa).view(), to_array(&pb).view(), lambda, center)?;
        let dza = m.head.backward(ha, &from_array(&out.grad_a))?;
        m.extractor.backward(ta, &dza)?;
        let dzb = m.head.backward(hb, &from_array(&out.grad_b))?;
        m.extractor.backward(tb, &dzb)?;
        Ok(StepOutput {
            loss: out.loss,
            terms: vec![("on_diagonal", out.on_diagonal), ("off_diagonal", out.off_diagonal)],
        })
    })?;
    Finish {
        stage: NAME,
        tag: StageTag::ThetaPrime,
        fold: None,
        dir: &dir,
        key,
        init_hash: None,
        started,
    }
    .write(config, run, &model, outcome, None)
}

/// Self-distillation: a fresh student with a classification head learns the
/// labels of `task` while matching the frozen teacher's latent distribution.
pub fn run_distillation_stage(
    config: &ExperimentConfig,
    run: &mut Run,
    task: &[&VolumeSample],
    teacher: &ModelWeights,
) -> Result<StageOutput> {
    const NAME: &str = "distill";
    let hyper = &config.distill;
    let dir = run.dir.join(NAME);
    let spec_e = ExtractorSpec::from_config(config);
    let teacher_net = freeze(teacher.extractor(&spec_e)?);
    let key = stage_key(&json!({
        "stage": NAME, "seed": config.seed, "hyper": hyper, "extractor": spec_e,
        "head": HeadSpec::from_config(config, HeadKind::Cls), "teacher": teacher.content_hash(),
        "temperature": config.distill_temperature, "direction": config.kl_direction,
        "data": sample_digest(task),
    }));
    if let Some(o) = reuse(run, &dir, &key)? {
        return Ok(o);
    }
    let labels = labels_of(task)?;
    let started = Instant::now();
    let checksum_before = teacher_net.checksum();
    let (extractor, head) = init_model(config, HeadKind::Cls, &mut rng::stream(config.seed, &[label_id(NAME), label_id("init")]))?;
    let mut model = Model { extractor, head };
    let pipeline = pipeline_for(config, AugmentStage::Distill, NAME);
    let spec = LoopSpec {
        stage: NAME,
        tag: StageTag::PsiPrime,
        fold: None,
        hyper,
        samples: task.len(),
        batch_seed: batch_seed(config, NAME, None),
        seed: config.seed,
        dir: &dir,
        key: &key,
        resume: run.resume,
    };
    let (lambda, tau, direction) = (hyper.lambda, config.distill_temperature, config.kl_direction);
    let outcome = train(&spec, &mut model, None, &mut run.log, |m, epoch, idx| {
        let batch = assemble_batch(task, idx, Some(&pipeline), epoch, 0)?;
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let t = teacher_net.infer(&batch.volumes)?;
        let (z, tape) = m.extractor.forward(&batch.volumes, Mode::Train)?;
        let (logits, htape) = m.head.forward(&z)?;
        if !z.is_finite() || !logits.is_finite() {
            return Ok(non_finite("latents"));
        }
        let out = distillation_objective(
            to_array(&z).view(),
            to_array(&t).view(),
            to_array(&logits).view(),
            &y,
            lambda,
            tau,
            direction,
        )?;
        let mut dz = m.head.backward(htape, &from_array(&out.grad_logits))?;
        dz.add_assign(&from_array(&out.grad_latents));
        m.extractor.backward(tape, &dz)?;
        Ok(StepOutput {
            loss: out.loss,
            terms: vec![("kl", out.kl), ("cross_entropy", out.cross_entropy)],
        })
    })?;
    let checksum_after = teacher_net.checksum();
    if checksum_after != checksum_before {
        return Err(Error::Aborted {
            stage: NAME.into(),
            iteration: outcome.loss_curve.len(),
            reason: "teacher parameters changed during distillation".into(),
        });
    }
    let grad = teacher_net.grad_norm_sq();
    Finish {
        stage: NAME,
        tag: StageTag::PsiPrime,
        fold: None,
        dir: &dir,
        key,
        init_hash: Some(teacher.content_hash()),
        started,
    }
    .write(config, run, &model, outcome, Some((checksum_before, checksum_after, grad)))
}

fn labels_of(samples: &[&VolumeSample]) -> Result<Vec<usize>> {
    samples
        .iter()
        .map(|s| {
            s.label
                .ok_or_else(|| Error::Config(format!("sample {} ({}) has no label", s.subject_id, s.role)))
        })
        .collect()
}

/// Where a supervised stage starts from.
#[derive(Debug, Clone, Copy)]
pub enum Init<'a> {
    /// Fresh extractor and head.
    Random,
    /// Pre-trained extractor, fresh classification head.
    Extractor(&'a ModelWeights),
    /// Pre-trained extractor and classification head.
    Full(&'a ModelWeights),
}

/// Names that place a supervised stage: `stream` seeds its randomness,
/// `dir` is its directory below the run, `stage` labels logs.
#[derive(Debug, Clone)]
pub struct StagePlace {
    pub stage: String,
    pub stream: String,
    pub dir: PathBuf,
    pub fold: Option<usize>,
    pub tag: StageTag,
}

/// Cross-entropy training, optionally with validation-based early stopping.
pub fn run_supervised_stage(
    config: &ExperimentConfig,
    run: &mut Run,
    place: &StagePlace,
    hyper: &StageHyperParams,
    init: Init,
    train_set: &[&VolumeSample],
    validation: Option<&[&VolumeSample]>,
) -> Result<StageOutput> {
    let dir = run.dir.join(&place.dir);
    let spec_e = ExtractorSpec::from_config(config);
    let spec_h = HeadSpec::from_config(config, HeadKind::Cls);
    let init_hash = match init {
        Init::Random => None,
        Init::Extractor(w) | Init::Full(w) => Some(w.content_hash()),
    };
    let key = stage_key(&json!({
        "stage": place.stage, "stream": place.stream, "fold": place.fold, "seed": config.seed, "hyper": hyper,
        "extractor": spec_e, "head": spec_h, "init": init_hash, "eval_every": config.eval_every,
        "data": sample_digest(train_set), "validation": validation.map(sample_digest),
    }));
    if let Some(o) = reuse(run, &dir, &key)? {
        return Ok(o);
    }
    if train_set.is_empty() {
        return Err(Error::Config(format!("{}: empty training split", place.stage)));
    }
    let labels = labels_of(train_set)?;
    let started = Instant::now();
    let stream = label_id(&place.stream);
    let mut model = match init {
        Init::Random => {
            let (extractor, head) = init_model(config, HeadKind::Cls, &mut rng::stream(config.seed, &[stream, label_id("init")]))?;
            Model { extractor, head }
        }
        Init::Extractor(w) => Model {
            extractor: w.extractor(&spec_e)?,
            head: ProjectionHead::new(spec_h, &mut rng::stream(config.seed, &[stream, label_id("head")])),
        },
        Init::Full(w) => Model {
            extractor: w.extractor(&spec_e)?,
            head: w.head(&spec_h)?,
        },
    };
    let pipeline = pipeline_for(config, AugmentStage::Finetune, &place.stream);
    let spec = LoopSpec {
        stage: &place.stage,
        tag: place.tag,
        fold: place.fold,
        hyper,
        samples: train_set.len(),
        batch_seed: batch_seed(config, &place.stream, place.fold),
        seed: config.seed,
        dir: &dir,
        key: &key,
        resume: run.resume,
    };
    let validation = validation.map(|v| Validation {
        samples: v.to_vec(),
        every: config.eval_every,
        patience: hyper.early_stopping_patience,
    });
    let outcome = train(&spec, &mut model, validation, &mut run.log, |m, epoch, idx| {
        let batch = assemble_batch(train_set, idx, Some(&pipeline), epoch, 0)?;
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let (z, tape) = m.extractor.forward(&batch.volumes, Mode::Train)?;
        let (logits, htape) = m.head.forward(&z)?;
        if !logits.is_finite() {
            return Ok(non_finite("logits"));
        }
        let (loss, grad) = cross_entropy_objective(to_array(&logits).view(), &y)?;
        let dz = m.head.backward(htape, &from_array(&grad))?;
        m.extractor.backward(tape, &dz)?;
        Ok(StepOutput {
            loss,
            terms: vec![("cross_entropy", loss)],
        })
    })?;
    Finish {
        stage: &place.stage,
        tag: place.tag,
        fold: place.fold,
        dir: &dir,
        key,
        init_hash,
        started,
    }
    .write(config, run, &model, outcome, None)
}

/// Fine-tuning on one fold of the target set with early stopping on its
/// validation split; the best validation weights are kept.
#[allow(clippy::too_many_arguments)]
pub fn run_finetune_stage(
    config: &ExperimentConfig,
    run: &mut Run,
    dir: &Path,
    hyper: &StageHyperParams,
    fold: &FoldSplit,
    target: &[&VolumeSample],
    init: Init,
    stream: &str,
) -> Result<StageOutput> {
    let pick = |idx: &[usize]| -> Result<Vec<&VolumeSample>> {
        idx.iter()
            .map(|&i| {
                target
                    .get(i)
                    .copied()
                    .ok_or_else(|| Error::Config(format!("fold index {i} out of range for {} samples", target.len())))
            })
            .collect()
    };
    let train_set = pick(&fold.train)?;
    let val_set = pick(&fold.validation)?;
    if train_set.is_empty() {
        return Err(Error::Config(format!("fold {}: empty training split", fold.fold)));
    }
    let place = StagePlace {
        stage: "finetune".into(),
        stream: stream.to_string(),
        dir: dir.to_path_buf(),
        fold: Some(fold.fold),
        tag: StageTag::PsiFinal,
    };
    let validation = (!val_set.is_empty()).then_some(val_set.as_slice());
    run_supervised_stage(config, run, &place, hyper, init, &train_set, validation)
}

/// Checks that a consumed checkpoint on disk is the one a stage emitted.
pub fn verify_handoff(emitted: &StageResult) -> Result<ModelWeights> {
    let w = read_weights(&emitted.weights_path)?;
    let hash = w.content_hash();
    if hash != emitted.weights_hash {
        return Err(Error::Integrity {
            path: emitted.weights_path.clone(),
            reason: format!("content hash {hash} differs from recorded {}", emitted.weights_hash),
        });
    }
    Ok(w)
}
