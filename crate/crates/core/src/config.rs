//! Experiment configuration: schema, stage defaults, presets and validation.
//!
//! A config file is a TOML document. Every key is optional; omitted keys take
//! the defaults of the selected profile (`profile = "full"` unless stated).
//! Unknown keys are rejected so typos never silently fall back to defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::synth::{SynthOverrides, SynthSpec};
use crate::error::{Error, Result};

/// Environment variable that replaces `output_dir` after loading.
pub const OUTPUT_DIR_ENV: &str = "TRIPLET_OUTPUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Adam with decoupled weight decay.
    AdamW,
    /// SGD with momentum and coupled L2 weight decay.
    Sgd,
    /// Layer-wise adaptive rate scaling on top of SGD with momentum.
    Lars,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// KL(student || teacher)
    StudentTeacher,
    /// KL(teacher || student)
    TeacherStudent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Full,
    Desk,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Profile::Full),
            "desk" => Ok(Profile::Desk),
            other => Err(Error::Config(format!("unknown profile `{other}` (expected `full` or `desk`)"))),
        }
    }
}

/// Scalars that drive one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageHyperParams {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub iterations: usize,
    /// Loss trade-off weight: redundancy weight for self-supervision,
    /// KL weight for distillation, unused otherwise.
    pub lambda: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub early_stopping_patience: Option<usize>,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub schedule: LrSchedule,
}

impl StageHyperParams {
    fn supervised(learning_rate: f64, weight_decay: f64, batch_size: usize, iterations: usize) -> Self {
        StageHyperParams {
            learning_rate,
            weight_decay,
            batch_size,
            iterations,
            lambda: 0.0,
            early_stopping_patience: None,
            optimizer: OptimizerKind::AdamW,
            momentum: 0.9,
            schedule: LrSchedule::Constant,
        }
    }

    fn validate(&self, name: &str, lambda_max: Option<f64>, out: &mut Vec<String>) {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            out.push(format!("{name}.learning_rate must be > 0 (got {})", self.learning_rate));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            out.push(format!("{name}.weight_decay must be >= 0 (got {})", self.weight_decay));
        }
        if self.batch_size < 2 {
            out.push(format!(
                "{name}.batch_size must be >= 2 (batch statistics are undefined for one sample; got {})",
                self.batch_size
            ));
        }
        if self.iterations < 1 {
            out.push(format!("{name}.iterations must be >= 1"));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            out.push(format!("{name}.lambda must be >= 0 (got {})", self.lambda));
        }
        if let Some(max) = lambda_max {
            if self.lambda > max {
                out.push(format!("{name}.lambda must lie in [0, {max}] (got {})", self.lambda));
            }
        }
        if self.early_stopping_patience == Some(0) {
            out.push(format!("{name}.early_stopping_patience must be >= 1"));
        }
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            out.push(format!("{name}.momentum must lie in [0, 1) (got {})", self.momentum));
        }
    }
}

/// Locations of the three dataset manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ManifestPaths {
    /// Task-unrelated, unlabeled data (role U).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unlabeled: Option<PathBuf>,
    /// Task-related labeled data (role D).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<PathBuf>,
    /// Small target data set (role T).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub seed: u64,
    /// Self-supervised pre-training on role U.
    pub ssl: StageHyperParams,
    /// Frozen-teacher self-distillation on role D.
    pub distill: StageHyperParams,
    /// Fine-tuning on role T folds.
    pub finetune: StageHyperParams,
    /// Supervised-only baseline on role T.
    pub supervised_t: StageHyperParams,
    /// Supervised pre-training baseline on role D.
    pub supervised_d: StageHyperParams,
    /// Latent dimension of the feature extractor.
    pub latent_dim: usize,
    /// Output dimension of the self-supervision projection head.
    pub projection_dim: usize,
    /// Width of the hidden layer in both projection heads.
    pub head_hidden_dim: usize,
    /// Channels of the first residual block; doubled by each strided block.
    pub base_channels: usize,
    pub num_classes: usize,
    pub input_shape: [usize; 3],
    pub distill_temperature: f64,
    pub kl_direction: KlDirection,
    /// Mean-center embeddings along the batch before cross-correlation.
    pub center_embeddings: bool,
    pub folds: usize,
    /// Train / validation / test fractions of each fold.
    pub split_ratios: [f64; 3],
    /// Label-balanced fraction of role D held out for evaluation.
    pub task_holdout_fraction: f64,
    /// Fine-tuning steps between validation evaluations.
    pub eval_every: usize,
    /// Cap on role-U samples in latent-space plots.
    pub plot_max_unlabeled: usize,
    pub manifests: ManifestPaths,
    pub output_dir: PathBuf,
    pub synth: SynthSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        default_config()
    }
}

/// Full-scale configuration with the published per-stage hyper-parameters.
pub fn default_config() -> ExperimentConfig {
    let ssl = StageHyperParams {
        learning_rate: 0.5,
        weight_decay: 1.5e-6,
        batch_size: 128,
        iterations: 29_300,
        lambda: 0.005,
        early_stopping_patience: None,
        optimizer: OptimizerKind::Lars,
        momentum: 0.9,
        schedule: LrSchedule::Cosine,
    };
    let distill = StageHyperParams {
        lambda: 0.001,
        ..StageHyperParams::supervised(0.01, 1.5e-6, 128, 600)
    };
    let finetune = StageHyperParams {
        early_stopping_patience: Some(20),
        ..StageHyperParams::supervised(0.0005, 1e-5, 64, 150)
    };
    let supervised_t = StageHyperParams {
        early_stopping_patience: Some(20),
        ..StageHyperParams::supervised(0.01, 1e-5, 64, 150)
    };
    let supervised_d = StageHyperParams::supervised(0.01, 1.5e-6, 128, 600);
    ExperimentConfig {
        profile: Profile::Full,
        seed: 0,
        ssl,
        distill,
        finetune,
        supervised_t,
        supervised_d,
        latent_dim: 512,
        projection_dim: 2048,
        head_hidden_dim: 512,
        base_channels: 16,
        num_classes: 3,
        input_shape: [55, 55, 55],
        distill_temperature: 1.0,
        kl_direction: KlDirection::StudentTeacher,
        center_embeddings: true,
        folds: 5,
        split_ratios: [0.65, 0.15, 0.20],
        task_holdout_fraction: 0.2,
        eval_every: 10,
        plot_max_unlabeled: 1000,
        manifests: ManifestPaths::default(),
        output_dir: PathBuf::from("runs"),
        synth: SynthSpec::default(),
    }
}

/// Reduced preset that fits on a workstation: 32^3 volumes, shorter stages,
/// batch 32 everywhere and AdamW for self-supervision.
pub fn desk_config() -> ExperimentConfig {
    let mut c = default_config();
    c.profile = Profile::Desk;
    c.input_shape = [32, 32, 32];
    c.base_channels = 4;
    c.latent_dim = 128;
    c.projection_dim = 512;
    c.head_hidden_dim = 128;
    c.ssl.iterations = 2_000;
    // LARS at lr 0.5 makes no progress at batch 32 within 2,000 steps
    c.ssl.optimizer = OptimizerKind::AdamW;
    c.ssl.learning_rate = 3e-3;
    c.distill.iterations = 300;
    c.finetune.iterations = 100;
    c.supervised_t.iterations = 100;
    c.supervised_d.iterations = 300;
    for s in [&mut c.ssl, &mut c.distill, &mut c.finetune, &mut c.supervised_t, &mut c.supervised_d] {
        s.batch_size = 32;
    }
    c.eval_every = 5;
    c.synth = SynthSpec::desk();
    c
}

pub fn profile_config(profile: Profile) -> ExperimentConfig {
    match profile {
        Profile::Full => default_config(),
        Profile::Desk => desk_config(),
    }
}

impl ExperimentConfig {
    /// Collects every invariant violation instead of stopping at the first.
    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        self.ssl.validate("ssl", None, &mut v);
        self.distill.validate("distill", Some(1.0), &mut v);
        self.finetune.validate("finetune", None, &mut v);
        self.supervised_t.validate("supervised_t", None, &mut v);
        self.supervised_d.validate("supervised_d", None, &mut v);
        if self.input_shape.iter().any(|&d| d < 8) {
            v.push(format!("input_shape dimensions must be >= 8 (got {:?})", self.input_shape));
        }
        if self.num_classes < 2 {
            v.push(format!("num_classes must be >= 2 (got {})", self.num_classes));
        }
        for (name, val) in [
            ("latent_dim", self.latent_dim),
            ("projection_dim", self.projection_dim),
            ("head_hidden_dim", self.head_hidden_dim),
            ("base_channels", self.base_channels),
            ("eval_every", self.eval_every),
        ] {
            if val == 0 {
                v.push(format!("{name} must be >= 1"));
            }
        }
        if !(self.distill_temperature.is_finite() && self.distill_temperature > 0.0) {
            v.push(format!("distill_temperature must be > 0 (got {})", self.distill_temperature));
        }
        if self.folds < 2 {
            v.push(format!("folds must be >= 2 (got {})", self.folds));
        }
        let sum: f64 = self.split_ratios.iter().sum();
        if self.split_ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) || (sum - 1.0).abs() > 1e-9 {
            v.push(format!("split_ratios must be positive and sum to 1 (got {:?})", self.split_ratios));
        }
        if !(self.task_holdout_fraction > 0.0 && self.task_holdout_fraction < 1.0) {
            v.push(format!(
                "task_holdout_fraction must lie in (0, 1) (got {})",
                self.task_holdout_fraction
            ));
        }
        self.synth.validate(self.num_classes, self.folds, &mut v);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(v))
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses a TOML document onto the defaults of its profile.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: ConfigFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim().to_string()))?;
        let cfg = file.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Stable digest of the whole configuration.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Reads, fills in and validates a config file. `TRIPLET_OUTPUT_DIR`, when
/// set, replaces the output directory.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg = ExperimentConfig::from_toml_str(&text)?;
    if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
        if !dir.is_empty() {
            cfg.output_dir = PathBuf::from(dir);
        }
    }
    Ok(cfg)
}

macro_rules! apply {
    ($target:expr, $src:expr, $($field:ident),+ $(,)?) => {
        $( if let Some(v) = $src.$field { $target.$field = v; } )+
    };
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct StageOverrides {
    learning_rate: Option<f64>,
    weight_decay: Option<f64>,
    batch_size: Option<usize>,
    iterations: Option<usize>,
    lambda: Option<f64>,
    early_stopping_patience: Option<usize>,
    optimizer: Option<OptimizerKind>,
    momentum: Option<f64>,
    schedule: Option<LrSchedule>,
}

impl StageOverrides {
    fn apply(self, s: &mut StageHyperParams) {
        apply!(s, self, learning_rate, weight_decay, batch_size, iterations, lambda, optimizer, momentum, schedule);
        if self.early_stopping_patience.is_some() {
            s.early_stopping_patience = self.early_stopping_patience;
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    profile: Option<Profile>,
    seed: Option<u64>,
    ssl: Option<StageOverrides>,
    distill: Option<StageOverrides>,
    finetune: Option<StageOverrides>,
    supervised_t: Option<StageOverrides>,
    supervised_d: Option<StageOverrides>,
    latent_dim: Option<usize>,
    projection_dim: Option<usize>,
    head_hidden_dim: Option<usize>,
    base_channels: Option<usize>,
    num_classes: Option<usize>,
    input_shape: Option<[usize; 3]>,
    distill_temperature: Option<f64>,
    kl_direction: Option<KlDirection>,
    center_embeddings: Option<bool>,
    folds: Option<usize>,
    split_ratios: Option<[f64; 3]>,
    task_holdout_fraction: Option<f64>,
    eval_every: Option<usize>,
    plot_max_unlabeled: Option<usize>,
    manifests: Option<ManifestPaths>,
    output_dir: Option<PathBuf>,
    synth: Option<SynthOverrides>,
}

impl ConfigFile {
    fn resolve(self) -> ExperimentConfig {
        let mut c = profile_config(self.profile.unwrap_or_default());
        apply!(
            c,
            self,
            seed,
            latent_dim,
            projection_dim,
            head_hidden_dim,
            base_channels,
            num_classes,
            input_shape,
            distill_temperature,
            kl_direction,
            center_embeddings,
            folds,
            split_ratios,
            task_holdout_fraction,
            eval_every,
            plot_max_unlabeled,
            manifests,
            output_dir,
        );
        for (o, s) in [
            (self.ssl, &mut c.ssl),
            (self.distill, &mut c.distill),
            (self.finetune, &mut c.finetune),
            (self.supervised_t, &mut c.supervised_t),
            (self.supervised_d, &mut c.supervised_d),
        ] {
            if let Some(o) = o {
                o.apply(s);
            }
        }
        if let Some(o) = self.synth {
            o.apply(&mut c.synth);
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_yields_published_defaults() {
        let c = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(c.ssl.learning_rate, 0.5);
        assert_eq!(c.ssl.weight_decay, 1.5e-6);
        assert_eq!(c.ssl.batch_size, 128);
        assert_eq!(c.ssl.iterations, 29_300);
        assert_eq!(c.ssl.lambda, 0.005);
        assert_eq!(c.distill.learning_rate, 0.01);
        assert_eq!(c.distill.weight_decay, 1.5e-6);
        assert_eq!(c.distill.batch_size, 128);
        assert_eq!(c.distill.iterations, 600);
        assert_eq!(c.distill.lambda, 0.001);
        assert_eq!(c.finetune.learning_rate, 0.0005);
        assert_eq!(c.finetune.weight_decay, 1e-5);
        assert_eq!(c.finetune.batch_size, 64);
        assert_eq!(c.finetune.iterations, 150);
        assert_eq!(c, default_config());
    }

    #[test]
    fn single_field_override() {
        let c = ExperimentConfig::from_toml_str("seed = 42").unwrap();
        let mut want = default_config();
        want.seed = 42;
        assert_eq!(c, want);
    }

    #[test]
    fn batch_of_one_is_rejected() {
        let err = ExperimentConfig::from_toml_str("[ssl]\nbatch_size = 1").unwrap_err();
        match err {
            Error::Validation(v) => assert!(v.iter().any(|m| m.contains("ssl.batch_size"))),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn all_violations_are_listed() {
        let err = ExperimentConfig::from_toml_str("num_classes = 1\n[distill]\nlambda = 2.0\n[finetune]\niterations = 0")
            .unwrap_err();
        match err {
            Error::Validation(v) => {
                for key in ["num_classes", "distill.lambda", "finetune.iterations"] {
                    assert!(v.iter().any(|m| m.contains(key)), "{key} missing from {v:?}");
                }
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_errors_name_the_key() {
        let err = ExperimentConfig::from_toml_str("[ssl]\nbatch_sise = 3").unwrap_err();
        assert!(err.to_string().contains("batch_sise"), "{err}");
        let err = ExperimentConfig::from_toml_str("[ssl]\nbatch_size = \"many\"").unwrap_err();
        assert!(err.to_string().contains("batch_size"), "{err}");
    }

    #[test]
    fn default_spot_values() {
        let c = default_config();
        assert_eq!(c.ssl.iterations, 29_300);
        assert_eq!(c.distill.lambda, 0.001);
        assert_eq!(c.finetune.batch_size, 64);
        assert!(c.validate().is_ok());
        assert!(desk_config().validate().is_ok());
    }

    #[test]
    fn desk_profile_is_selectable() {
        let c = ExperimentConfig::from_toml_str("profile = \"desk\"\nseed = 3").unwrap();
        assert_eq!(c.input_shape, [32, 32, 32]);
        assert_eq!((c.ssl.iterations, c.distill.iterations, c.finetune.iterations), (2_000, 300, 100));
        assert_eq!(c.ssl.batch_size, 32);
        assert_eq!(c.seed, 3);
    }
}
