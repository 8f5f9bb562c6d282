//! Stochastic augmentation pipelines and the paired-view sampler.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::volume::{min_max_rescale, resample_region, Boundary, Volume};
use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentStage {
    Ssl,
    Distill,
    Finetune,
}

impl FromStr for AugmentStage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ssl" => Ok(AugmentStage::Ssl),
            "distill" => Ok(AugmentStage::Distill),
            "finetune" => Ok(AugmentStage::Finetune),
            other => Err(Error::Config(format!("unknown augmentation stage {other:?}"))),
        }
    }
}

impl fmt::Display for AugmentStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AugmentStage::Ssl => "ssl",
            AugmentStage::Distill => "distill",
            AugmentStage::Finetune => "finetune",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Interpolation {
    Trilinear,
    Nearest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Transform {
    /// Min-max rescale to `[0, 1]`.
    RescaleIntensity,
    /// Crop a sub-cube holding a `scale` fraction of the volume and resize it
    /// back to `output`.
    RandomCropResize {
        scale: (f64, f64),
        output: [usize; 3],
        random_center: bool,
    },
    /// Mirror each listed axis independently with probability `p`.
    RandomFlip { axes: [bool; 3], p: f64 },
    /// Rotate about the volume centre by an independent angle per axis in
    /// `±max_rotation_deg` and shift by up to `±max_translation` voxels per axis.
    RandomAffine {
        max_rotation_deg: f64,
        max_translation: f64,
        p: f64,
    },
}

#[derive(Debug, Clone)]
pub struct AugmentationPipeline {
    pub stage: AugmentStage,
    pub transforms: Vec<Transform>,
    pub interpolation: Interpolation,
    seed: u64,
    rng: StreamRng,
}

pub const SSL_CROP_SCALE: (f64, f64) = (0.5, 1.0);
pub const SSL_MAX_ROTATION_DEG: f64 = 90.0;
pub const TASK_MAX_ROTATION_DEG: f64 = 8.0;
pub const MAX_TRANSLATION_VOXELS: f64 = 8.0;

/// The stage's transform list for volumes of `shape`.
pub fn stage_transforms(stage: AugmentStage, shape: [usize; 3]) -> Vec<Transform> {
    match stage {
        AugmentStage::Ssl => vec![
            Transform::RescaleIntensity,
            Transform::RandomCropResize {
                scale: SSL_CROP_SCALE,
                output: shape,
                random_center: true,
            },
            Transform::RandomFlip { axes: [true; 3], p: 0.5 },
            Transform::RandomAffine {
                max_rotation_deg: SSL_MAX_ROTATION_DEG,
                max_translation: MAX_TRANSLATION_VOXELS,
                p: 0.5,
            },
        ],
        AugmentStage::Distill | AugmentStage::Finetune => vec![
            Transform::RescaleIntensity,
            Transform::RandomAffine {
                max_rotation_deg: TASK_MAX_ROTATION_DEG,
                max_translation: MAX_TRANSLATION_VOXELS,
                p: 0.5,
            },
        ],
    }
}

/// Builds the stage pipeline; its random stream is seeded from `rng`.
pub fn build_pipeline<R: Rng + ?Sized>(
    stage: AugmentStage,
    config: &ExperimentConfig,
    rng: &mut R,
) -> AugmentationPipeline {
    AugmentationPipeline::new(stage, stage_transforms(stage, config.input_shape), rng.random())
}

impl AugmentationPipeline {
    pub fn new(stage: AugmentStage, transforms: Vec<Transform>, seed: u64) -> Self {
        Self {
            stage,
            transforms,
            interpolation: Interpolation::Trilinear,
            seed,
            rng: rng::stream(seed, &[]),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent pipeline for worker or sample `stream_id`.
    pub fn fork(&self, stream_id: u64) -> Self {
        let seed = rng::derive_seed(self.seed, &[stream_id]);
        Self {
            rng: rng::stream(seed, &[]),
            seed,
            ..self.clone()
        }
    }

    /// The random stream addressed by `path` under this pipeline's seed.
    pub fn stream(&self, path: &[u64]) -> StreamRng {
        rng::stream(self.seed, path)
    }

    /// One draw, advancing the pipeline's own stream.
    pub fn apply(&mut self, volume: &Volume) -> Result<Volume> {
        let mut rng = std::mem::replace(&mut self.rng, rng::stream(0, &[]));
        let out = self.apply_with(volume, &mut rng);
        self.rng = rng;
        out
    }

    /// One draw using an explicit random stream.
    pub fn apply_with<R: Rng + ?Sized>(&self, volume: &Volume, rng: &mut R) -> Result<Volume> {
        if !volume.is_finite() {
            return Err(Error::Numeric("augmentation input contains non-finite values".into()));
        }
        let mut v = volume.clone();
        for t in &self.transforms {
            v = match *t {
                Transform::RescaleIntensity => min_max_rescale(&v).0,
                Transform::RandomCropResize {
                    scale,
                    output,
                    random_center,
                } => {
                    let s = if scale.1 > scale.0 { rng.random_range(scale.0..=scale.1) } else { scale.0 };
                    crop_resize(&v, s, output, random_center.then_some(&mut *rng))
                }
                Transform::RandomFlip { axes, p } => {
                    let mut flips = [false; 3];
                    for (f, &enabled) in flips.iter_mut().zip(&axes) {
                        *f = enabled && p > 0.0 && rng.random_bool(p.min(1.0));
                    }
                    flip(&v, flips)
                }
                Transform::RandomAffine {
                    max_rotation_deg,
                    max_translation,
                    p,
                } => {
                    if p > 0.0 && rng.random_bool(p.min(1.0)) {
                        let mut angles = [0.0; 3];
                        let mut shift = [0.0; 3];
                        for a in angles.iter_mut() {
                            *a = uniform_sym(rng, max_rotation_deg).to_radians();
                        }
                        for s in shift.iter_mut() {
                            *s = uniform_sym(rng, max_translation);
                        }
                        affine(&v, angles, shift, self.interpolation)
                    } else {
                        v
                    }
                }
            };
        }
        for x in &mut v.data {
            *x = x.clamp(0.0, 1.0);
        }
        Ok(v)
    }

    /// Two independent draws of the same input.
    pub fn paired_views(&mut self, volume: &Volume) -> Result<(Volume, Volume)> {
        let a = self.apply(volume)?;
        let b = self.apply(volume)?;
        Ok((a, b))
    }
}

fn uniform_sym<R: Rng + ?Sized>(rng: &mut R, half_width: f64) -> f64 {
    if half_width > 0.0 {
        rng.random_range(-half_width..=half_width)
    } else {
        0.0
    }
}

/// Crops a cube holding `scale` of the volume (side fraction `scale^(1/3)`)
/// and resizes it to `output`. Without an rng the crop is centred.
pub fn crop_resize<R: Rng + ?Sized>(v: &Volume, scale: f64, output: [usize; 3], rng: Option<&mut R>) -> Volume {
    let side = scale.clamp(0.0, 1.0).cbrt();
    let extent = v.dims.map(|n| n as f64 * side);
    let mut start = [0.0; 3];
    let mut rng = rng;
    for a in 0..3 {
        let slack = v.dims[a] as f64 - extent[a];
        start[a] = match rng.as_deref_mut() {
            Some(r) if slack > 0.0 => r.random_range(0.0..=slack),
            _ => slack / 2.0,
        };
    }
    resample_region(v, start, extent, output)
}

/// Mirrors the flagged axes.
pub fn flip(v: &Volume, axes: [bool; 3]) -> Volume {
    if !axes.iter().any(|&a| a) {
        return v.clone();
    }
    let [d, h, w] = v.dims;
    let m = |flag: bool, i: usize, n: usize| if flag { n - 1 - i } else { i };
    Volume::from_fn(v.dims, |z, y, x| v.get(m(axes[0], z, d), m(axes[1], y, h), m(axes[2], x, w)))
}

fn rotation(angles: [f64; 3]) -> [[f64; 3]; 3] {
    let rot = |axis: usize, t: f64| {
        let (s, c) = t.sin_cos();
        let mut r = [[0.0; 3]; 3];
        r[axis][axis] = 1.0;
        let (i, j) = ((axis + 1) % 3, (axis + 2) % 3);
        r[i][i] = c;
        r[i][j] = -s;
        r[j][i] = s;
        r[j][j] = c;
        r
    };
    let mul = |a: [[f64; 3]; 3], b: [[f64; 3]; 3]| {
        let mut o = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                o[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        o
    };
    mul(rot(2, angles[2]), mul(rot(1, angles[1]), rot(0, angles[0])))
}

/// Rotates about the centre by per-axis `angles` (radians, applied axis 0,
/// then 1, then 2) and then shifts by `shift` voxels. Outside the field of
/// view is zero.
pub fn affine(v: &Volume, angles: [f64; 3], shift: [f64; 3], interp: Interpolation) -> Volume {
    let r = rotation(angles);
    let c = v.dims.map(|n| (n as f64 - 1.0) / 2.0);
    Volume::from_fn(v.dims, |z, y, x| {
        // Inverse map: output p = R (q - c) + c + shift  =>  q = R^T (p - c - shift) + c.
        let p = [z as f64 - c[0] - shift[0], y as f64 - c[1] - shift[1], x as f64 - c[2] - shift[2]];
        let q: [f64; 3] = std::array::from_fn(|i| (0..3).map(|k| r[k][i] * p[k]).sum::<f64>() + c[i]);
        match interp {
            Interpolation::Trilinear => v.sample_trilinear(q[0], q[1], q[2], Boundary::Zero),
            Interpolation::Nearest => v.sample_nearest(q[0], q[1], q[2]),
        }
    })
}
