//! Synthetic stand-in for the three clinical datasets.
//!
//! Each subject is an ellipsoidal density "brain" with a cortical shell,
//! subject-specific texture and pose jitter, and ventricles that widen with
//! age. Cortex also thins with age. Class 1 attenuates a medial-posterior
//! region and class 2 a frontal region, with random severity. Role T
//! volumes get a site-like intensity remap and extra noise, both scaled by
//! `shift`. Role U is mostly class-0-like and carries no labels.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::io::write_volume;
use super::manifest::{Manifest, ManifestRecord, Role};
use super::volume::Volume;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeFormat {
    Raw,
    Nifti,
}

impl VolumeFormat {
    fn extension(self) -> &'static str {
        match self {
            VolumeFormat::Raw => "raw",
            VolumeFormat::Nifti => "nii",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub unlabeled_count: usize,
    pub task_count: usize,
    pub target_count: usize,
    pub volume_shape: [usize; 3],
    /// Class mix of roles D and T.
    pub class_proportions: Vec<f64>,
    /// Mix of disease-like patterns hidden in role U.
    pub unlabeled_proportions: Vec<f64>,
    /// Strength of the role-T domain gap; 0 makes D and T identically distributed.
    pub shift: f64,
    /// Standard deviation of voxel-wise noise.
    pub noise: f64,
    /// Amplitude of the smooth low-frequency noise field.
    pub smooth_noise: f64,
    /// Amplitude of the subject-specific tissue texture.
    pub texture: f64,
    /// Range of the peak regional attenuation for disease classes.
    pub severity: (f64, f64),
    pub age_range: (f64, f64),
    pub format: VolumeFormat,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            unlabeled_count: 2000,
            task_count: 600,
            target_count: 150,
            volume_shape: [55, 55, 55],
            class_proportions: vec![1.0 / 3.0; 3],
            unlabeled_proportions: vec![0.7, 0.15, 0.15],
            shift: 0.5,
            noise: 0.03,
            smooth_noise: 0.06,
            texture: 0.04,
            severity: (0.35, 0.6),
            age_range: (55.0, 85.0),
            format: VolumeFormat::Raw,
        }
    }
}

impl SynthSpec {
    pub fn desk() -> Self {
        Self {
            volume_shape: [32, 32, 32],
            ..Self::default()
        }
    }

    pub fn validate(&self, num_classes: usize, folds: usize, out: &mut Vec<String>) {
        if self.target_count < folds * num_classes {
            out.push(format!(
                "synth.target_count must be >= folds x classes = {} (got {})",
                folds * num_classes,
                self.target_count
            ));
        }
        if self.volume_shape.iter().any(|&d| d < 8) {
            out.push(format!("synth.volume_shape dimensions must be >= 8 (got {:?})", self.volume_shape));
        }
        for (name, p) in [
            ("class_proportions", &self.class_proportions),
            ("unlabeled_proportions", &self.unlabeled_proportions),
        ] {
            let sum: f64 = p.iter().sum();
            if p.len() != num_classes || p.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
                out.push(format!(
                    "synth.{name} must hold {num_classes} non-negative values summing to 1 (got {p:?})"
                ));
            }
        }
        for (name, x) in [("shift", self.shift), ("noise", self.noise), ("smooth_noise", self.smooth_noise)] {
            if !(x.is_finite() && x >= 0.0) {
                out.push(format!("synth.{name} must be >= 0 (got {x})"));
            }
        }
        let (lo, hi) = self.severity;
        if !(0.0..=1.0).contains(&lo) || !(lo..=1.0).contains(&hi) {
            out.push(format!("synth.severity must satisfy 0 <= lo <= hi <= 1 (got {:?})", self.severity));
        }
        if !(self.age_range.0.is_finite() && self.age_range.0 <= self.age_range.1) {
            out.push(format!("synth.age_range must be ordered (got {:?})", self.age_range));
        }
    }
}

/// Partial `[synth]` table from a config file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthOverrides {
    unlabeled_count: Option<usize>,
    task_count: Option<usize>,
    target_count: Option<usize>,
    volume_shape: Option<[usize; 3]>,
    class_proportions: Option<Vec<f64>>,
    unlabeled_proportions: Option<Vec<f64>>,
    shift: Option<f64>,
    noise: Option<f64>,
    smooth_noise: Option<f64>,
    severity: Option<(f64, f64)>,
    age_range: Option<(f64, f64)>,
    format: Option<VolumeFormat>,
}

impl SynthOverrides {
    pub fn apply(self, s: &mut SynthSpec) {
        macro_rules! set {
            ($($f:ident),+) => { $( if let Some(v) = self.$f { s.$f = v; } )+ };
        }
        set!(
            unlabeled_count,
            task_count,
            target_count,
            volume_shape,
            class_proportions,
            unlabeled_proportions,
            shift,
            noise,
            smooth_noise,
            severity,
            age_range,
            format
        );
    }
}

/// Centres (z, y, x in [-1, 1]; y grows towards posterior) and widths of
/// the attenuated region per class.
const REGIONS: [Option<([f64; 3], f64)>; 3] = [None, Some(([0.05, 0.45, 0.0], 0.28)), Some(([0.15, -0.55, 0.0], 0.28))];

/// Subject-level draws that fully determine a volume.
#[derive(Debug, Clone)]
pub struct SubjectParams {
    pub pattern: usize,
    pub age: f64,
    pub severity: f64,
    radii: [f64; 3],
    offset: [f64; 3],
    texture: Vec<([f64; 3], f64, f64)>,
    smooth: Vec<([f64; 3], f64, f64)>,
}

fn waves<R: Rng + ?Sized>(rng: &mut R, count: usize, max_freq: f64, amplitude: f64) -> Vec<([f64; 3], f64, f64)> {
    (0..count)
        .map(|_| {
            let f = [0; 3].map(|_: i32| rng.random_range(-max_freq..=max_freq));
            (f, rng.random_range(0.0..2.0 * PI), amplitude * rng.random_range(0.5..1.0))
        })
        .collect()
}

impl SubjectParams {
    pub fn draw<R: Rng + ?Sized>(spec: &SynthSpec, pattern: usize, rng: &mut R) -> Self {
        let (lo, hi) = spec.severity;
        Self {
            pattern,
            age: rng.random_range(spec.age_range.0..=spec.age_range.1),
            severity: if pattern == 0 { 0.0 } else { rng.random_range(lo..=hi) },
            radii: [0.72, 0.82, 0.66].map(|r| r * rng.random_range(0.93..1.07)),
            offset: [0; 3].map(|_: i32| rng.random_range(-0.06..0.06)),
            texture: waves(rng, 6, 9.0, spec.texture),
            smooth: waves(rng, 4, 2.5, spec.smooth_noise),
        }
    }

    fn sum_waves(w: &[([f64; 3], f64, f64)], u: [f64; 3]) -> f64 {
        w.iter().map(|(f, ph, a)| a * (f[0] * u[0] + f[1] * u[1] + f[2] * u[2] + ph).cos()).sum()
    }

    /// Noise-free density at normalized coordinates `u`.
    pub fn density(&self, u: [f64; 3], age_range: (f64, f64)) -> f64 {
        let q: [f64; 3] = std::array::from_fn(|i| (u[i] - self.offset[i]) / self.radii[i]);
        let r = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt();
        let aging = ((self.age - age_range.0) / (age_range.1 - age_range.0).max(1e-9)).clamp(0.0, 1.0);
        let inside = 1.0 / (1.0 + (-(1.0 - r) * 18.0).exp());
        let shell_width = 0.16 * (1.0 - 0.35 * aging);
        let cortex = (-((1.0 - 0.08 - r) / shell_width).powi(2)).exp();
        let vent_r = 0.18 + 0.12 * aging;
        let vr = (q[0] * q[0] * 1.6 + q[1] * q[1] * 0.7 + q[2] * q[2] * 4.0).sqrt();
        let ventricle = 1.0 / (1.0 + ((vr - vent_r) * 30.0).exp());
        let mut d = inside * (0.45 + 0.45 * cortex + Self::sum_waves(&self.texture, u)) * (1.0 - 0.85 * ventricle);
        d *= 1.0 - 0.15 * aging;
        if let Some((c, w)) = REGIONS[self.pattern] {
            let g = (0..3).map(|i| ((u[i] - self.offset[i] - c[i]) / w).powi(2)).sum::<f64>();
            d *= 1.0 - self.severity * (-g).exp();
        }
        d.max(0.0)
    }

    /// The full volume with role-dependent noise and intensity profile.
    pub fn render<R: Rng + ?Sized>(&self, spec: &SynthSpec, role: Role, rng: &mut R) -> Volume {
        let dims = spec.volume_shape;
        let shifted = role == Role::T;
        let noise_sd = spec.noise * if shifted { 1.0 + spec.shift } else { 1.0 };
        let gamma = if shifted { 1.0 + 0.6 * spec.shift } else { 1.0 };
        let gain = if shifted { 1.0 - 0.2 * spec.shift } else { 1.0 };
        let noise = Normal::new(0.0, noise_sd.max(0.0)).expect("finite sd");
        let coord = |i: usize, n: usize| if n > 1 { 2.0 * i as f64 / (n - 1) as f64 - 1.0 } else { 0.0 };
        Volume::from_fn(dims, |z, y, x| {
            let u = [coord(z, dims[0]), coord(y, dims[1]), coord(x, dims[2])];
            let d = self.density(u, spec.age_range);
            let mut v = gain * d.powf(gamma) + Self::sum_waves(&self.smooth, u) * d.min(1.0);
            if noise_sd > 0.0 {
                v += noise.sample(rng);
            }
            v as f32
        })
    }
}

/// Manifests written by the generator.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub unlabeled: Manifest,
    pub task: Manifest,
    pub target: Manifest,
    pub unlabeled_path: PathBuf,
    pub task_path: PathBuf,
    pub target_path: PathBuf,
}

pub const UNLABELED_MANIFEST: &str = "unlabeled.csv";
pub const TASK_MANIFEST: &str = "task.csv";
pub const TARGET_MANIFEST: &str = "target.csv";

/// Exact class counts for `n` samples, shuffled.
fn pattern_plan<R: Rng + ?Sized>(n: usize, proportions: &[f64], rng: &mut R) -> Vec<usize> {
    let exact: Vec<f64> = proportions.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut missing = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if missing == 0 {
            break;
        }
        counts[i] += 1;
        missing -= 1;
    }
    let mut plan: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &k)| std::iter::repeat_n(c, k)).collect();
    plan.shuffle(rng);
    plan
}

fn role_manifest(spec: &SynthSpec, role: Role, count: usize, seed: u64, out_dir: &Path) -> Result<Manifest> {
    let props = if role == Role::U { &spec.unlabeled_proportions } else { &spec.class_proportions };
    let role_id = role as u64;
    let plan = pattern_plan(count, props, &mut rng::stream(seed, &[role_id]));
    let prefix = role.to_string().to_lowercase();
    let dir = out_dir.join("volumes").join(&prefix);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let records = crate::parallel::map_indexed(count, |i| -> Result<ManifestRecord> {
        let mut r = rng::stream(seed, &[role_id, 1, i as u64]);
        let params = SubjectParams::draw(spec, plan[i], &mut r);
        let female = r.random_bool(0.5);
        let volume = params.render(spec, role, &mut r);
        let id = format!("{prefix}{i:05}");
        let path = dir.join(format!("{id}.{}", spec.format.extension()));
        write_volume(&path, &volume)?;
        Ok(ManifestRecord {
            subject_id: id,
            path,
            role,
            label: (role != Role::U).then_some(plan[i]),
            age: Some((params.age * 10.0).round() / 10.0),
            sex: Some(if female { "F" } else { "M" }.to_string()),
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Manifest::new(records)
}

/// Writes all three synthetic datasets under `out_dir`.
pub fn synth_generate<R: Rng + ?Sized>(spec: &SynthSpec, out_dir: &Path, rng: &mut R) -> Result<SynthOutput> {
    let classes = spec.class_proportions.len();
    let mut problems = Vec::new();
    spec.validate(classes, 5, &mut problems);
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    let seed: u64 = rng.random();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let unlabeled = role_manifest(spec, Role::U, spec.unlabeled_count, seed, out_dir)?;
    let task = role_manifest(spec, Role::D, spec.task_count, seed, out_dir)?;
    let target = role_manifest(spec, Role::T, spec.target_count, seed, out_dir)?;
    let unlabeled_path = out_dir.join(UNLABELED_MANIFEST);
    let task_path = out_dir.join(TASK_MANIFEST);
    let target_path = out_dir.join(TARGET_MANIFEST);
    unlabeled.write(&unlabeled_path)?;
    task.write(&task_path)?;
    target.write(&target_path)?;
    Ok(SynthOutput {
        unlabeled,
        task,
        target,
        unlabeled_path,
        task_path,
        target_path,
    })
}
