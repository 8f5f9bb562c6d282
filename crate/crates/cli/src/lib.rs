//! Command-line front end for the three-stage training framework.

mod logger;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use triplet_core::backbone::{read_weights, HeadKind};
use triplet_core::config::{load_config, profile_config, ExperimentConfig, Profile};
use triplet_core::data::manifest::load_manifest;
use triplet_core::data::synth::{synth_generate, TARGET_MANIFEST, TASK_MANIFEST, UNLABELED_MANIFEST};
use triplet_core::data::{load_samples, VolumeSample};
use triplet_core::eval::{
    embed_latents_2d, evaluate, extract_latents, latent::subsample, report_table, silhouette, EvalSet, Reducer,
};
use triplet_core::pipeline::{run_strategies, Datasets, Experiment, Run, StageOutput, TrainingStrategy};
use triplet_core::rng::{self, label_id};

/// Directory below the output directory that `synth` writes to and that the
/// other commands fall back on when the config names no manifests.
pub const SYNTH_DIR: &str = "data";
pub const VISUALIZE_DIR: &str = "visualize";

#[derive(Debug, Parser)]
#[command(name = "triplet", version, about = "Three-stage training of 3D volume classifiers")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Built-in preset to use when no config file is given.
    #[arg(long, global = true, value_enum)]
    pub profile: Option<ProfileArg>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for data-parallel kernels.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Re-run every stage instead of reusing or resuming earlier results.
    #[arg(long, global = true)]
    pub fresh: bool,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Errors only.
    #[arg(short, long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ProfileArg {
    Desk,
    Full,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ReducerArg {
    Umap,
    Pca,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic unlabeled, task-related and target datasets.
    Synth,
    /// Self-supervised pre-training on the unlabeled set.
    Pretrain {
        /// Unlabeled manifest (overrides the config).
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Self-distillation on the task-related set from a pre-trained teacher.
    Distill {
        /// Task-related manifest (overrides the config).
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Teacher checkpoint; defaults to the pre-training output.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Fine-tune on the target folds and report test metrics.
    Finetune {
        /// Target manifest (overrides the config).
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Starting checkpoint; random initialization when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Only this fold.
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Run one strategy, or all of them, end to end.
    Run {
        /// supervised_t, supervised_dt, ssl_bt_then_t, triplet or all.
        #[arg(long, default_value = "all")]
        strategy: String,
    },
    /// Evaluate a classifier checkpoint on a labelled manifest.
    Eval {
        /// Checkpoint with a classification head
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest of labelled volumes to score
        #[arg(long)]
        manifest: PathBuf,
    },
    /// 2-D embeddings of the latent space after each stage.
    Visualize {
        /// Checkpoints to embed; defaults to the stage outputs in the output
        /// directory.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "umap")]
        reducer: ReducerArg,
    },
    /// Check a config file and print its fingerprint.
    ValidateConfig,
}

/// Misuse detected after argument parsing; exits with code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    logger::init(cli.common.verbose, cli.common.quiet);
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

/// Resolves the effective config from the file or preset plus overrides.
pub fn resolve_config(common: &Common) -> Result<ExperimentConfig> {
    let mut config = match (&common.config, common.profile) {
        (Some(path), profile) => {
            let c = load_config(path).with_context(|| format!("loading {}", path.display()))?;
            if let Some(p) = profile {
                log::warn!("--profile {p:?} ignored: the config file sets profile {:?}", c.profile);
            }
            c
        }
        (None, Some(ProfileArg::Desk)) => profile_config(Profile::Desk),
        (None, Some(ProfileArg::Full)) => profile_config(Profile::Full),
        (None, None) => return Err(usage("either --config or --profile is required")),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(out) = &common.out {
        config.output_dir = out.clone();
    }
    let synth = config.output_dir.join(SYNTH_DIR);
    let m = &mut config.manifests;
    for (slot, name) in [
        (&mut m.unlabeled, UNLABELED_MANIFEST),
        (&mut m.task, TASK_MANIFEST),
        (&mut m.target, TARGET_MANIFEST),
    ] {
        if slot.is_none() && synth.join(name).exists() {
            *slot = Some(synth.join(name));
        }
    }
    config.validate()?;
    Ok(config)
}

fn dispatch(cli: &Cli) -> Result<()> {
    let common = &cli.common;
    if let Some(j) = common.jobs {
        if j == 0 {
            return Err(usage("--jobs must be at least 1"));
        }
        triplet_core::parallel::configure_threads(j)?;
    }
    if let Command::ValidateConfig = cli.command {
        let path = common
            .config
            .as_ref()
            .ok_or_else(|| usage("validate-config needs --config"))?;
        let c = load_config(path).with_context(|| format!("loading {}", path.display()))?;
        println!("{}: valid ({:?} profile, fingerprint {})", path.display(), c.profile, c.fingerprint());
        return Ok(());
    }
    let config = resolve_config(common)?;
    let out = config.output_dir.clone();
    let open_run = || Run::create(&out, !common.fresh);
    match &cli.command {
        Command::Synth => synth(&config),
        Command::Pretrain { manifest } => {
            let mut c = config.clone();
            override_manifest(&mut c.manifests.unlabeled, manifest);
            let data = Datasets::load_roles(&c, true, false, false)?;
            let mut exp = Experiment::new(&c, &data, open_run()?)?;
            let s = exp.ssl()?;
            print_stage(&s);
            Ok(())
        }
        Command::Distill { manifest, checkpoint } => {
            let mut c = config.clone();
            override_manifest(&mut c.manifests.task, manifest);
            let teacher_path = checkpoint.clone().unwrap_or_else(|| out.join("ssl").join("weights.ckpt"));
            let teacher = read_weights(&teacher_path)
                .with_context(|| format!("reading teacher checkpoint {}", teacher_path.display()))?;
            let data = Datasets::load_roles(&c, false, true, false)?;
            let mut exp = Experiment::new(&c, &data, open_run()?)?;
            let s = exp.distill_from(&teacher)?;
            print_stage(&s);
            if let Some(r) = exp.score_holdout(&s.weights, None)? {
                println!("task holdout balanced accuracy: {:.2}%", 100.0 * r.balanced_accuracy);
            }
            Ok(())
        }
        Command::Finetune {
            manifest,
            checkpoint,
            fold,
        } => {
            let mut c = config.clone();
            override_manifest(&mut c.manifests.target, manifest);
            let data = Datasets::load_roles(&c, false, c.manifests.task.is_some(), true)?;
            let start = match checkpoint {
                Some(p) => {
                    let w = read_weights(p).with_context(|| format!("reading {}", p.display()))?;
                    let keep_head = w.head_spec.as_ref().is_some_and(|h| h.kind == HeadKind::Cls);
                    Some((w, keep_head))
                }
                None => None,
            };
            let mut exp = Experiment::new(&c, &data, open_run()?)?;
            let hyper = if start.is_some() { &c.finetune } else { &c.supervised_t };
            let (report, _, _) =
                exp.finetune_folds("finetune", start.as_ref().map(|(w, k)| (w, *k)), hyper, *fold)?;
            let path = out.join("finetune").join("report.json");
            std::fs::write(&path, serde_json::to_vec_pretty(&report)?).with_context(|| format!("writing {}", path.display()))?;
            print!("{}", report_table(std::slice::from_ref(&report)));
            Ok(())
        }
        Command::Run { strategy } => {
            let strategies = parse_strategies(strategy)?;
            let data = Datasets::load(&config, &strategies)?;
            let reports = run_strategies(&config, &data, &strategies, open_run()?)?;
            let table = report_table(&reports.iter().map(|r| r.aggregate.clone()).collect::<Vec<_>>());
            print!("{table}");
            Ok(())
        }
        Command::Eval { checkpoint, manifest } => eval(&config, checkpoint, manifest),
        Command::Visualize { checkpoint, reducer } => visualize(&config, checkpoint, *reducer),
        Command::ValidateConfig => unreachable!("handled above"),
    }
}

fn override_manifest(slot: &mut Option<PathBuf>, value: &Option<PathBuf>) {
    if let Some(v) = value {
        *slot = Some(v.clone());
    }
}

fn parse_strategies(s: &str) -> Result<Vec<TrainingStrategy>> {
    if s == "all" {
        return Ok(TrainingStrategy::ALL.to_vec());
    }
    s.split(',')
        .map(|name| name.trim().parse::<TrainingStrategy>().map_err(|e| usage(e.to_string())))
        .collect()
}

fn print_stage(s: &StageOutput) {
    let r = &s.result;
    println!(
        "{}",
        json!({
            "stage": r.stage, "tag": r.tag.to_string(), "weights": r.weights_path, "weights_hash": r.weights_hash,
            "iterations": r.loss_curve.len(), "initial_loss": r.loss_curve.first(), "final_loss": r.loss_curve.last(),
            "reused": r.reused,
        })
    );
}

fn synth(config: &ExperimentConfig) -> Result<()> {
    let dir = config.output_dir.join(SYNTH_DIR);
    let mut r = rng::stream(config.seed, &[label_id("synth")]);
    let out = synth_generate(&config.synth, &dir, &mut r)?;
    for (role, path, m) in [
        ("unlabeled", &out.unlabeled_path, &out.unlabeled),
        ("task", &out.task_path, &out.task),
        ("target", &out.target_path, &out.target),
    ] {
        println!("{role}: {} records -> {}", m.len(), path.display());
    }
    Ok(())
}

fn eval(config: &ExperimentConfig, checkpoint: &Path, manifest: &Path) -> Result<()> {
    let w = read_weights(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
    let head_spec = match &w.head_spec {
        Some(h) if h.kind == HeadKind::Cls => h.clone(),
        _ => bail!("{} holds no classification head", checkpoint.display()),
    };
    let ext = w.extractor(&w.extractor_spec)?;
    let head = w.head(&head_spec)?;
    let m = load_manifest(manifest)?;
    let samples = load_samples(&m, config.input_shape)?;
    let refs: Vec<&VolumeSample> = samples.iter().collect();
    let report = evaluate(&ext, &head, &refs, None, EvalSet::TargetTest)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn default_checkpoints(out: &Path) -> Vec<PathBuf> {
    ["ssl", "distill", "triplet/fold0"]
        .iter()
        .map(|d| out.join(d).join("weights.ckpt"))
        .filter(|p| p.exists())
        .collect()
}

fn visualize(config: &ExperimentConfig, checkpoints: &[PathBuf], reducer: ReducerArg) -> Result<()> {
    let paths = if checkpoints.is_empty() { default_checkpoints(&config.output_dir) } else { checkpoints.to_vec() };
    if paths.is_empty() {
        bail!("no checkpoints given and none found in {}", config.output_dir.display());
    }
    let mut samples = Vec::new();
    for (path, cap) in [
        (&config.manifests.unlabeled, config.plot_max_unlabeled),
        (&config.manifests.task, usize::MAX),
        (&config.manifests.target, usize::MAX),
    ] {
        let Some(path) = path else { continue };
        let m = load_manifest(path)?;
        let keep = subsample(m.len(), cap, config.seed);
        samples.extend(load_samples(&m.subset(&keep)?, config.input_shape)?);
    }
    if samples.is_empty() {
        bail!("no manifests configured to embed");
    }
    let refs: Vec<&VolumeSample> = samples.iter().collect();
    let dir = config.output_dir.join(VISUALIZE_DIR);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let reducer = match reducer {
        ReducerArg::Umap => Reducer::Umap,
        ReducerArg::Pca => Reducer::Pca,
    };
    for (i, path) in paths.iter().enumerate() {
        let w = read_weights(path).with_context(|| format!("reading {}", path.display()))?;
        let stage = w.stage.to_string();
        let table = extract_latents(&w.extractor(&w.extractor_spec)?, &refs, &stage)?;
        let emb = embed_latents_2d(&table, reducer, config.seed)?;
        let stem = format!("{i}_{stage}");
        table.write_csv(&dir.join(format!("{stem}_latents.csv")))?;
        emb.write_csv(&dir.join(format!("{stem}.csv")))?;
        emb.write_png(&dir.join(format!("{stem}.png")), 800)?;
        let (pts, labels): (Vec<[f64; 2]>, Vec<usize>) = emb
            .points
            .iter()
            .filter_map(|p| p.label.map(|l| ([p.x, p.y], l)))
            .unzip();
        let score = if labels.len() > 1 { silhouette(&pts, &labels) } else { f64::NAN };
        println!("{stem}: {} points, labelled silhouette {score:.3} -> {}", emb.points.len(), dir.join(format!("{stem}.png")).display());
    }
    Ok(())
}
