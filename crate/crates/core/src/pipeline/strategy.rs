//! End-to-end training strategies over the three datasets.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::stages::{
    run_distillation_stage, run_finetune_stage, run_ssl_stage, run_supervised_stage, verify_handoff, Init, Run,
    StageOutput, StagePlace, StageResult,
};
use crate::backbone::{ExtractorSpec, HeadKind, HeadSpec, ModelWeights, StageTag};
use crate::config::{ExperimentConfig, StageHyperParams};
use crate::data::manifest::{load_manifest, Manifest};
use crate::data::split::{balanced_holdout, stratified_kfold, FoldSplit};
use crate::data::{load_samples, VolumeSample};
use crate::error::{Error, Result};
use crate::eval::{evaluate, report_table, AggregateReport, EvalSet, MetricReport};
use crate::rng::{self, label_id};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingStrategy {
    /// Random initialization, trained on the target set only.
    SupervisedT,
    /// Supervised on the task-related set, then fine-tuned on the target set.
    SupervisedDT,
    /// Barlow Twins pre-training, then fine-tuned on the target set.
    SslBtThenT,
    /// Pre-training, self-distillation on the task-related set, fine-tuning.
    Triplet,
}

impl TrainingStrategy {
    pub const ALL: [TrainingStrategy; 4] = [Self::SupervisedT, Self::SupervisedDT, Self::SslBtThenT, Self::Triplet];

    pub fn name(self) -> &'static str {
        match self {
            Self::SupervisedT => "supervised_t",
            Self::SupervisedDT => "supervised_dt",
            Self::SslBtThenT => "ssl_bt_then_t",
            Self::Triplet => "triplet",
        }
    }

    pub fn uses_unlabeled(self) -> bool {
        matches!(self, Self::SslBtThenT | Self::Triplet)
    }

    pub fn uses_task(self) -> bool {
        matches!(self, Self::SupervisedDT | Self::Triplet)
    }
}

impl fmt::Display for TrainingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|t| t.name()).collect();
                Error::Config(format!("unknown strategy '{s}' (expected one of {})", names.join(", ")))
            })
    }
}

/// The three datasets, loaded and normalized. Missing manifests give empty
/// sets.
#[derive(Debug, Clone, Default)]
pub struct Datasets {
    pub unlabeled: Vec<VolumeSample>,
    pub task: Vec<VolumeSample>,
    pub target: Vec<VolumeSample>,
    pub target_manifest: Option<Manifest>,
}

impl Datasets {
    /// Loads the manifests named in the config that `strategies` need.
    pub fn load(config: &ExperimentConfig, strategies: &[TrainingStrategy]) -> Result<Self> {
        Self::load_roles(
            config,
            strategies.iter().any(|s| s.uses_unlabeled()),
            strategies.iter().any(|s| s.uses_task()),
            true,
        )
    }

    /// Loads the requested roles; each one must be named in the config.
    pub fn load_roles(config: &ExperimentConfig, unlabeled: bool, task: bool, target: bool) -> Result<Self> {
        let paths = &config.manifests;
        let load = |p: &Option<PathBuf>, needed: bool, what: &str| -> Result<Option<Manifest>> {
            match p {
                _ if !needed => Ok(None),
                Some(p) => load_manifest(p).map(Some),
                None => Err(Error::Config(format!("manifests.{what} is required but not set"))),
            }
        };
        let u = load(&paths.unlabeled, unlabeled, "unlabeled")?;
        let d = load(&paths.task, task, "task")?;
        let t = load(&paths.target, target, "target")?;
        let samples = |m: &Option<Manifest>| m.as_ref().map_or(Ok(Vec::new()), |m| load_samples(m, config.input_shape));
        Ok(Self {
            unlabeled: samples(&u)?,
            task: samples(&d)?,
            target: samples(&t)?,
            target_manifest: t,
        })
    }

    /// Builds the set from samples already in memory.
    pub fn from_samples(unlabeled: Vec<VolumeSample>, task: Vec<VolumeSample>, target: Vec<VolumeSample>) -> Result<Self> {
        use crate::data::manifest::ManifestRecord;
        let records = target
            .iter()
            .map(|s| ManifestRecord {
                path: PathBuf::from(format!("{}.raw", s.subject_id)),
                label: s.label,
                age: s.age,
                sex: s.sex.clone(),
                subject_id: s.subject_id.clone(),
                role: s.role,
            })
            .collect();
        Ok(Self {
            target_manifest: Some(Manifest::new(records)?),
            unlabeled,
            task,
            target,
        })
    }
}

fn refs(v: &[VolumeSample]) -> Vec<&VolumeSample> {
    v.iter().collect()
}

fn pick<'a>(v: &'a [VolumeSample], idx: &[usize]) -> Vec<&'a VolumeSample> {
    idx.iter().map(|&i| &v[i]).collect()
}

/// Outcome of one strategy across all folds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrategyReport {
    pub strategy: TrainingStrategy,
    pub aggregate: AggregateReport,
    /// The model entering fine-tuning, scored on the task holdout.
    pub pretrained_task_holdout: Option<MetricReport>,
    pub stages: Vec<StageResult>,
    pub splits: Vec<FoldSplit>,
}

/// Runs several strategies in one run directory, sharing the stages they
/// have in common.
pub struct Experiment<'a> {
    pub config: &'a ExperimentConfig,
    pub data: &'a Datasets,
    pub run: Run,
    ssl: Option<StageOutput>,
    distill: Option<StageOutput>,
    supervised_d: Option<StageOutput>,
    folds: Option<Vec<FoldSplit>>,
    task_split: Option<(Vec<usize>, Vec<usize>)>,
}

impl<'a> Experiment<'a> {
    pub fn new(config: &'a ExperimentConfig, data: &'a Datasets, run: Run) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            data,
            run,
            ssl: None,
            distill: None,
            supervised_d: None,
            folds: None,
            task_split: None,
        })
    }

    /// Target-set folds, stratified by label, sex and age.
    pub fn folds(&mut self) -> Result<&[FoldSplit]> {
        if self.folds.is_none() {
            let m = self
                .data
                .target_manifest
                .as_ref()
                .ok_or_else(|| Error::Config("a target manifest is required".into()))?;
            let mut r = rng::stream(self.config.seed, &[label_id("split")]);
            self.folds = Some(stratified_kfold(m, self.config.folds, self.config.split_ratios, &mut r)?);
        }
        Ok(self.folds.as_deref().unwrap_or_default())
    }

    /// `(training, holdout)` indices into the task-related set.
    pub fn task_split(&mut self) -> Result<(Vec<usize>, Vec<usize>)> {
        if self.task_split.is_none() {
            let labels: Vec<Option<usize>> = self.data.task.iter().map(|s| s.label).collect();
            let mut r = rng::stream(self.config.seed, &[label_id("holdout")]);
            self.task_split = Some(balanced_holdout(&labels, self.config.task_holdout_fraction, &mut r)?);
        }
        Ok(self.task_split.clone().unwrap_or_default())
    }

    pub fn ssl(&mut self) -> Result<StageOutput> {
        if self.ssl.is_none() {
            self.ssl = Some(run_ssl_stage(self.config, &mut self.run, &refs(&self.data.unlabeled))?);
        }
        Ok(self.ssl.clone().expect("set above"))
    }

    pub fn distill(&mut self) -> Result<StageOutput> {
        if self.distill.is_none() {
            let ssl = self.ssl()?;
            let teacher = verify_handoff(&ssl.result)?;
            self.distill = Some(self.distill_from(&teacher)?);
        }
        Ok(self.distill.clone().expect("set above"))
    }

    /// Distillation from an explicit teacher checkpoint.
    pub fn distill_from(&mut self, teacher: &ModelWeights) -> Result<StageOutput> {
        let (train, _) = self.task_split()?;
        let task = pick(&self.data.task, &train);
        run_distillation_stage(self.config, &mut self.run, &task, teacher)
    }

    pub fn supervised_d(&mut self) -> Result<StageOutput> {
        if self.supervised_d.is_none() {
            let (train, _) = self.task_split()?;
            let task = pick(&self.data.task, &train);
            let place = StagePlace {
                stage: "supervised_d".into(),
                stream: "supervised_d".into(),
                dir: "supervised_d".into(),
                fold: None,
                tag: StageTag::PsiPrime,
            };
            let hyper = self.config.supervised_d.clone();
            self.supervised_d = Some(run_supervised_stage(self.config, &mut self.run, &place, &hyper, Init::Random, &task, None)?);
        }
        Ok(self.supervised_d.clone().expect("set above"))
    }

    /// BAcc of a classifier checkpoint on the task-related holdout.
    pub fn score_holdout(&mut self, w: &ModelWeights, fold: Option<usize>) -> Result<Option<MetricReport>> {
        let (_, hold) = self.task_split()?;
        if hold.is_empty() {
            return Ok(None);
        }
        let ext = w.extractor(&ExtractorSpec::from_config(self.config))?;
        let head = w.head(&HeadSpec::from_config(self.config, HeadKind::Cls))?;
        evaluate(&ext, &head, &pick(&self.data.task, &hold), fold, EvalSet::TaskHoldout).map(Some)
    }

    /// Fine-tunes and evaluates on every fold (or only `only_fold`) under
    /// `{label}/fold{k}`. `start` is the checkpoint to begin from and whether
    /// its classification head is kept.
    pub fn finetune_folds(
        &mut self,
        label: &str,
        start: Option<(&ModelWeights, bool)>,
        hyper: &StageHyperParams,
        only_fold: Option<usize>,
    ) -> Result<(AggregateReport, Vec<StageResult>, Vec<FoldSplit>)> {
        let config = self.config;
        let has_task = !self.data.task.is_empty();
        let folds: Vec<FoldSplit> = self
            .folds()?
            .iter()
            .filter(|f| only_fold.is_none_or(|k| k == f.fold))
            .cloned()
            .collect();
        if folds.is_empty() {
            return Err(Error::Config(format!("no fold {} (folds = {})", only_fold.unwrap_or(0), config.folds)));
        }
        let target = refs(&self.data.target);
        let mut fold_reports = Vec::new();
        let mut holdout_reports = Vec::new();
        let mut stages = Vec::new();
        for fold in &folds {
            let init = match start {
                Some((w, true)) => Init::Full(w),
                Some((w, false)) => Init::Extractor(w),
                None => Init::Random,
            };
            let dir = PathBuf::from(label).join(format!("fold{}", fold.fold));
            let out = run_finetune_stage(config, &mut self.run, &dir, hyper, fold, &target, init, "finetune")?;
            if let (Some((w, _)), Some(h)) = (start, &out.result.init_hash) {
                if &w.content_hash() != h {
                    return Err(Error::Integrity {
                        path: out.result.weights_path.clone(),
                        reason: "fine-tuning did not start from the emitted checkpoint".into(),
                    });
                }
            }
            let w = verify_handoff(&out.result)?;
            let ext = w.extractor(&ExtractorSpec::from_config(config))?;
            let head = w.head(&HeadSpec::from_config(config, HeadKind::Cls))?;
            let report = evaluate(&ext, &head, &pick(&self.data.target, &fold.test), Some(fold.fold), EvalSet::TargetTest)?;
            self.run.log.record(serde_json::json!({
                "event": "fold_eval", "strategy": label, "fold": fold.fold,
                "balanced_accuracy": report.balanced_accuracy, "macro_f1": report.macro_f1,
            }))?;
            fold_reports.push(report);
            if has_task {
                if let Some(h) = self.score_holdout(&w, Some(fold.fold))? {
                    holdout_reports.push(h);
                }
            }
            stages.push(out.result);
        }
        Ok((AggregateReport::new(label, fold_reports, holdout_reports)?, stages, folds))
    }

    /// Trains and evaluates one strategy on every fold and writes
    /// `{strategy}/report.json` and `report.txt`.
    pub fn run_strategy(&mut self, strategy: TrainingStrategy) -> Result<StrategyReport> {
        let config = self.config;
        let has_task = !self.data.task.is_empty();
        if strategy.uses_task() && !has_task {
            return Err(Error::Config(format!("{strategy} needs a task-related dataset")));
        }
        if strategy.uses_unlabeled() && self.data.unlabeled.is_empty() {
            return Err(Error::Config(format!("{strategy} needs an unlabeled dataset")));
        }
        self.run.log.record(serde_json::json!({"event": "strategy_start", "strategy": strategy.name()}))?;
        let mut stages = Vec::new();
        // (checkpoint entering fine-tuning, keep its classification head)
        let (entry, hyper) = match strategy {
            TrainingStrategy::SupervisedT => (None, &config.supervised_t),
            TrainingStrategy::SupervisedDT => {
                let s = self.supervised_d()?;
                stages.push(s.result.clone());
                (Some((s.result, true)), &config.finetune)
            }
            TrainingStrategy::SslBtThenT => {
                let s = self.ssl()?;
                stages.push(s.result.clone());
                (Some((s.result, false)), &config.finetune)
            }
            TrainingStrategy::Triplet => {
                stages.push(self.ssl()?.result);
                let d = self.distill()?;
                stages.push(d.result.clone());
                (Some((d.result, true)), &config.finetune)
            }
        };
        let start = match entry {
            Some((r, full)) => Some((verify_handoff(&r)?, full)),
            None => None,
        };
        let pretrained_task_holdout = match &start {
            Some((w, true)) if has_task => self.score_holdout(w, None)?,
            _ => None,
        };
        let (aggregate, finetuned, splits) =
            self.finetune_folds(strategy.name(), start.as_ref().map(|(w, full)| (w, *full)), hyper, None)?;
        stages.extend(finetuned);
        let report = StrategyReport {
            strategy,
            aggregate,
            pretrained_task_holdout,
            stages,
            splits,
        };
        let dir = self.run.dir.join(strategy.name());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let json_path = dir.join("report.json");
        let text = serde_json::to_vec_pretty(&report).expect("report serializes");
        std::fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
        let txt_path = dir.join("report.txt");
        std::fs::write(&txt_path, report_table(std::slice::from_ref(&report.aggregate)))
            .map_err(|e| Error::io(&txt_path, e))?;
        Ok(report)
    }
}

/// Runs `strategies` in order and writes the combined table to
/// `summary.txt` in the run directory.
pub fn run_strategies(
    config: &ExperimentConfig,
    data: &Datasets,
    strategies: &[TrainingStrategy],
    run: Run,
) -> Result<Vec<StrategyReport>> {
    let mut exp = Experiment::new(config, data, run)?;
    let mut out = Vec::new();
    for &s in strategies {
        out.push(exp.run_strategy(s)?);
    }
    let table = report_table(&out.iter().map(|r| r.aggregate.clone()).collect::<Vec<_>>());
    let path = exp.run.dir.join("summary.txt");
    std::fs::write(&path, table).map_err(|e| Error::io(&path, e))?;
    Ok(out)
}
