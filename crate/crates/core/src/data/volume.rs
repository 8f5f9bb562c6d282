use crate::error::{Error, Result};

/// Dense scalar volume, indexed `(z * h + y) * w + x` with `dims = [d, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub data: Vec<f32>,
}

/// What trilinear sampling returns outside the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    /// Nearest edge voxel.
    Clamp,
    /// Zero outside the field of view.
    Zero,
}

impl Volume {
    pub fn new(dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::Shape {
                expected: dims.to_vec(),
                actual: vec![data.len()],
            });
        }
        Ok(Volume { dims, data })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Volume {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn filled(dims: [usize; 3], v: f32) -> Self {
        Volume {
            dims,
            data: vec![v; dims.iter().product()],
        }
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    data.push(f(z, y, x));
                }
            }
        }
        Volume { dims, data }
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(z, y, x)]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }

    /// Linear interpolation at a continuous voxel coordinate.
    pub fn sample_trilinear(&self, z: f64, y: f64, x: f64, boundary: Boundary) -> f32 {
        let [d, h, w] = self.dims;
        if boundary == Boundary::Zero && (z <= -1.0 || y <= -1.0 || x <= -1.0 || z >= d as f64 || y >= h as f64 || x >= w as f64) {
            return 0.0;
        }
        let (z, y, x) = match boundary {
            Boundary::Clamp => (
                z.clamp(0.0, (d - 1) as f64),
                y.clamp(0.0, (h - 1) as f64),
                x.clamp(0.0, (w - 1) as f64),
            ),
            Boundary::Zero => (z, y, x),
        };
        let (z0, y0, x0) = (z.floor(), y.floor(), x.floor());
        let (fz, fy, fx) = (z - z0, y - y0, x - x0);
        let (z0, y0, x0) = (z0 as isize, y0 as isize, x0 as isize);
        let at = |zi: isize, yi: isize, xi: isize| -> f64 {
            if zi < 0 || yi < 0 || xi < 0 || zi >= d as isize || yi >= h as isize || xi >= w as isize {
                0.0
            } else {
                self.get(zi as usize, yi as usize, xi as usize) as f64
            }
        };
        let mut acc = 0.0;
        for (dz, wz) in [(0, 1.0 - fz), (1, fz)] {
            if wz == 0.0 {
                continue;
            }
            for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
                if wy == 0.0 {
                    continue;
                }
                for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                    if wx == 0.0 {
                        continue;
                    }
                    acc += wz * wy * wx * at(z0 + dz, y0 + dy, x0 + dx);
                }
            }
        }
        acc as f32
    }

    /// Nearest-neighbour lookup (zero outside).
    pub fn sample_nearest(&self, z: f64, y: f64, x: f64) -> f32 {
        let [d, h, w] = self.dims;
        let (zi, yi, xi) = (z.round(), y.round(), x.round());
        if zi < 0.0 || yi < 0.0 || xi < 0.0 || zi >= d as f64 || yi >= h as f64 || xi >= w as f64 {
            0.0
        } else {
            self.get(zi as usize, yi as usize, xi as usize)
        }
    }

    pub fn crop(&self, start: [usize; 3], size: [usize; 3]) -> Result<Volume> {
        for a in 0..3 {
            if start[a] + size[a] > self.dims[a] || size[a] == 0 {
                return Err(Error::Shape {
                    expected: self.dims.to_vec(),
                    actual: vec![start[a] + size[a]],
                });
            }
        }
        Ok(Volume::from_fn(size, |z, y, x| self.get(start[0] + z, start[1] + y, start[2] + x)))
    }
}

/// Maps each output voxel centre onto `[start, start + extent)` of the
/// source axis (half-voxel aligned) and interpolates with clamped edges.
pub fn resample_region(v: &Volume, start: [f64; 3], extent: [f64; 3], out: [usize; 3]) -> Volume {
    let scale = [extent[0] / out[0] as f64, extent[1] / out[1] as f64, extent[2] / out[2] as f64];
    let coord = |a: usize, i: usize| start[a] + (i as f64 + 0.5) * scale[a] - 0.5;
    Volume::from_fn(out, |z, y, x| v.sample_trilinear(coord(0, z), coord(1, y), coord(2, x), Boundary::Clamp))
}

pub fn resample(v: &Volume, out: [usize; 3]) -> Volume {
    if v.dims == out {
        return v.clone();
    }
    let d = v.dims;
    resample_region(v, [0.0; 3], [d[0] as f64, d[1] as f64, d[2] as f64], out)
}

/// Linearly maps intensities onto `[0, 1]`. A constant volume becomes all
/// zeros; the flag reports that case.
pub fn min_max_rescale(v: &Volume) -> (Volume, bool) {
    let (lo, hi) = v.min_max();
    if !(hi > lo) {
        return (Volume::zeros(v.dims), true);
    }
    let range = (hi - lo) as f64;
    let data = v.data.iter().map(|&x| (((x - lo) as f64) / range) as f32).collect();
    (Volume { dims: v.dims, data }, false)
}

/// Largest centred cube; returns the crop and its start offsets.
pub fn center_crop_cube(v: &Volume) -> (Volume, [usize; 3]) {
    let side = *v.dims.iter().min().expect("three dims");
    let start = v.dims.map(|n| (n - side) / 2);
    let cube = v.crop(start, [side; 3]).expect("cube fits");
    (cube, start)
}

/// Min-max rescale, centre-crop to a cube, resample to `target`. The range
/// is re-established after interpolation so the output spans exactly
/// `[0, 1]`, which makes the operation idempotent.
pub fn normalize_volume(raw: &Volume, target: [usize; 3]) -> Result<Volume> {
    if !raw.is_finite() {
        return Err(Error::Numeric("volume contains non-finite values".into()));
    }
    if raw.dims.iter().any(|&n| n < 8) {
        return Err(Error::Shape {
            expected: vec![8, 8, 8],
            actual: raw.dims.to_vec(),
        });
    }
    let (scaled, degenerate) = min_max_rescale(raw);
    if degenerate {
        log::warn!("constant volume normalized to zeros");
        return Ok(Volume::zeros(target));
    }
    let (cube, _) = center_crop_cube(&scaled);
    let resized = resample(&cube, target);
    Ok(min_max_rescale(&resized).0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rescales_into_unit_range_and_target_shape() {
        let v = Volume::from_fn([64, 64, 64], |z, y, x| 10.0 + ((z * 7 + y * 3 + x) % 11) as f32);
        let n = normalize_volume(&v, [55, 55, 55]).unwrap();
        assert_eq!(n.dims, [55, 55, 55]);
        let (lo, hi) = n.min_max();
        assert!(lo >= 0.0 && hi <= 1.0);
    }

    #[test]
    fn unit_range_cube_is_a_fixed_point() {
        let v = Volume::from_fn([55, 55, 55], |z, y, x| ((z + 2 * y + 3 * x) % 55) as f32 / 54.0);
        let n = normalize_volume(&v, [55, 55, 55]).unwrap();
        for (a, b) in n.data.iter().zip(&v.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn anisotropic_volume_is_center_cropped() {
        // linear ramps are reproduced exactly by trilinear interpolation
        let v = Volume::from_fn([60, 70, 80], |z, y, x| (z as f32) + 100.0 * y as f32 + 10_000.0 * x as f32);
        let (cube, start) = center_crop_cube(&v);
        assert_eq!(start, [0, 5, 10]);
        assert_eq!(cube.dims, [60, 60, 60]);
        assert_eq!(cube.get(0, 0, 0), v.get(0, 5, 10));
        assert_eq!(cube.get(59, 59, 59), v.get(59, 64, 69));
        let n = normalize_volume(&v, [55, 55, 55]).unwrap();
        // output voxel i samples crop coordinate (i + 0.5) * 60 / 55 - 0.5
        let c = |i: usize| (i as f64 + 0.5) * 60.0 / 55.0 - 0.5;
        let raw = |z: f64, y: f64, x: f64| z + 100.0 * (y + 5.0) + 10_000.0 * (x + 10.0);
        let lo = raw(c(0), c(0), c(0));
        let hi = raw(c(54), c(54), c(54));
        let want = |z, y, x| (raw(c(z), c(y), c(x)) - lo) / (hi - lo);
        for (z, y, x) in [(0, 0, 0), (54, 54, 54), (10, 20, 30), (54, 0, 27)] {
            assert!((n.get(z, y, x) as f64 - want(z, y, x)).abs() < 1e-5, "{z} {y} {x}");
        }
    }

    #[test]
    fn normalization_is_idempotent() {
        let v = Volume::from_fn([40, 37, 45], |z, y, x| ((z * y) as f32).sin() + (x as f32).cos());
        let once = normalize_volume(&v, [32, 32, 32]).unwrap();
        let twice = normalize_volume(&once, [32, 32, 32]).unwrap();
        for (a, b) in once.data.iter().zip(&twice.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_volume_becomes_zeros() {
        let v = Volume::filled([10, 10, 10], 7.0);
        let n = normalize_volume(&v, [8, 8, 8]).unwrap();
        assert!(n.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn non_finite_and_tiny_volumes_are_rejected() {
        let mut v = Volume::zeros([8, 8, 8]);
        v.data[3] = f32::NAN;
        assert!(normalize_volume(&v, [8, 8, 8]).is_err());
        assert!(normalize_volume(&Volume::zeros([4, 8, 8]), [8, 8, 8]).is_err());
    }
}
