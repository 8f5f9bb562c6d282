use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::gemm::sgemm;
use super::tensor::{Param, Tensor};
use crate::error::{Error, Result};
use crate::parallel;

/// Upper bound on the im2col scratch buffer, in elements.
const COL_BUDGET: usize = 1 << 21;
/// Samples per weight-gradient partial sum. Fixed so the reduction order does
/// not depend on the thread count.
const GRAD_CHUNK: usize = 4;
/// Up to this many output channels the weight gradient is computed as dot
/// products instead of a thin matrix product.
const DOT_GRAD_MAX_CHANNELS: usize = 8;

/// 3D convolution without bias (always followed by batch normalization).
///
/// Weight layout is `[out, in, k, k, k]`; padding is `kernel / 2`, which with
/// stride 2 yields `ceil(n / 2)` output voxels along every axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub weight: Param,
}

#[derive(Debug, Clone, Copy)]
struct Geom {
    cin: usize,
    d: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    od: usize,
    oh: usize,
    ow: usize,
}

impl Geom {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    fn in_len(&self) -> usize {
        self.cin * self.d * self.h * self.w
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    fn out_spatial(&self) -> usize {
        self.od * self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.s == 1
    }

    /// Output depth planes per im2col slab.
    fn slab(&self) -> usize {
        let per_plane = (self.rows() * self.out_plane()).max(1);
        (COL_BUDGET / per_plane).clamp(1, self.od.max(1))
    }
}

impl Conv3d {
    /// He-normal initialized convolution.
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        let shape = [out_channels, in_channels, kernel, kernel, kernel];
        let n: usize = shape.iter().product();
        let value = (0..n).map(|_| normal.sample(rng) as f32).collect();
        Conv3d {
            in_channels,
            out_channels,
            kernel,
            stride,
            weight: Param::new(&shape, value),
        }
    }

    pub fn padding(&self) -> usize {
        self.kernel / 2
    }

    /// Output extent along one axis of length `n`.
    pub fn output_extent(&self, n: usize) -> usize {
        (n + 2 * self.padding() - self.kernel) / self.stride + 1
    }

    fn geom(&self, x: &Tensor) -> Result<Geom> {
        let s = x.shape();
        if s.len() != 5 || s[1] != self.in_channels {
            return Err(Error::Shape {
                expected: vec![0, self.in_channels, 0, 0, 0],
                actual: s.to_vec(),
            });
        }
        if s[2..].iter().any(|&n| n + 2 * self.padding() < self.kernel) {
            return Err(Error::Shape {
                expected: vec![0, self.in_channels, self.kernel, self.kernel, self.kernel],
                actual: s.to_vec(),
            });
        }
        Ok(Geom {
            cin: s[1],
            d: s[2],
            h: s[3],
            w: s[4],
            k: self.kernel,
            s: self.stride,
            p: self.padding(),
            od: self.output_extent(s[2]),
            oh: self.output_extent(s[3]),
            ow: self.output_extent(s[4]),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let g = self.geom(x)?;
        let b = x.batch();
        let cout = self.out_channels;
        let n_out = g.out_spatial();
        let mut out = Tensor::zeros(&[b, cout, g.od, g.oh, g.ow]);
        let w = &self.weight.value;
        parallel::for_each_chunk_pair(
            out.data_mut(),
            cout * n_out,
            x.data(),
            g.in_len(),
            |_, y, xs| conv_sample(&g, cout, w, xs, y),
        );
        Ok(out)
    }

    /// Accumulates the weight gradient and returns the input gradient when
    /// `need_input_grad` is set.
    pub fn backward(&mut self, x: &Tensor, dy: &Tensor, need_input_grad: bool) -> Result<Option<Tensor>> {
        let g = self.geom(x)?;
        let b = x.batch();
        let cout = self.out_channels;
        let n_out = g.out_spatial();
        if dy.shape() != [b, cout, g.od, g.oh, g.ow] {
            return Err(Error::Shape {
                expected: vec![b, cout, g.od, g.oh, g.ow],
                actual: dy.shape().to_vec(),
            });
        }
        let rows = g.rows();
        let chunks = b.div_ceil(GRAD_CHUNK);
        let partials = parallel::map_indexed(chunks, |c| {
            let mut dw = vec![0.0f32; cout * rows];
            let mut scratch = [Vec::new(), Vec::new()];
            for i in c * GRAD_CHUNK..((c + 1) * GRAD_CHUNK).min(b) {
                let xs = x.sample(i);
                let dys = dy.sample(i);
                weight_grad_sample(&g, cout, xs, dys, &mut dw, &mut scratch);
            }
            dw
        });
        for p in &partials {
            self.weight.accumulate(p);
        }
        if !need_input_grad {
            return Ok(None);
        }
        let mut dx = Tensor::zeros(x.shape());
        let w = &self.weight.value;
        parallel::for_each_chunk_pair(dx.data_mut(), g.in_len(), dy.data(), cout * n_out, |_, dxs, dys| {
            input_grad_sample(&g, cout, w, dys, dxs)
        });
        Ok(Some(dx))
    }
}

thread_local! {
    static SCRATCH: std::cell::RefCell<Vec<f32>> = const { std::cell::RefCell::new(Vec::new()) };
}

/// Runs `f` with this thread's scratch buffer resized to `len`. Contents are
/// unspecified; callers overwrite before reading.
fn with_scratch<T>(len: usize, f: impl FnOnce(&mut [f32]) -> T) -> T {
    SCRATCH.with(|cell| {
        let mut buf = cell.borrow_mut();
        if buf.len() < len {
            buf.resize(len, 0.0);
        }
        f(&mut buf[..len])
    })
}

fn conv_sample(g: &Geom, cout: usize, w: &[f32], x: &[f32], y: &mut [f32]) {
    let rows = g.rows();
    let n_out = g.out_spatial();
    if g.is_pointwise() {
        sgemm(cout, rows, n_out, 1.0, w, rows, 1, x, n_out, 1, 0.0, y, n_out, 1);
        return;
    }
    let slab = g.slab();
    let plane = g.out_plane();
    with_scratch(rows * slab * plane, |col| {
        let mut d0 = 0;
        while d0 < g.od {
            let d1 = (d0 + slab).min(g.od);
            let cols = (d1 - d0) * plane;
            im2col(g, x, d0, d1, &mut col[..rows * cols]);
            sgemm(cout, rows, cols, 1.0, w, rows, 1, &col[..rows * cols], cols, 1, 0.0, &mut y[d0 * plane..], n_out, 1);
            d0 = d1;
        }
    })
}

fn weight_grad_sample(g: &Geom, cout: usize, x: &[f32], dy: &[f32], dw: &mut [f32], scratch: &mut [Vec<f32>; 2]) {
    let rows = g.rows();
    let n_out = g.out_spatial();
    if g.is_pointwise() {
        // dW += dY * X^T
        sgemm(cout, n_out, rows, 1.0, dy, n_out, 1, x, 1, n_out, 1.0, dw, rows, 1);
        return;
    }
    let slab = g.slab();
    let plane = g.out_plane();
    let [col, colt] = scratch;
    col.resize(rows * slab * plane, 0.0);
    colt.resize(rows * slab * plane, 0.0);
    let mut d0 = 0;
    while d0 < g.od {
        let d1 = (d0 + slab).min(g.od);
        let cols = (d1 - d0) * plane;
        im2col(g, x, d0, d1, &mut col[..rows * cols]);
        let col = &col[..rows * cols];
        if cout <= DOT_GRAD_MAX_CHANNELS {
            for (r, col_row) in col.chunks_exact(cols).enumerate() {
                for o in 0..cout {
                    let dy_row = &dy[o * n_out + d0 * plane..][..cols];
                    dw[o * rows + r] += dot(dy_row, col_row);
                }
            }
        } else {
            // Packing `col` column-wise strides by a power of two and
            // thrashes the cache; a row-major copy is several times faster.
            transpose(col, rows, cols, &mut colt[..rows * cols]);
            sgemm(cout, cols, rows, 1.0, &dy[d0 * plane..], n_out, 1, &colt[..rows * cols], rows, 1, 1.0, dw, rows, 1);
        }
        d0 = d1;
    }
}

fn input_grad_sample(g: &Geom, cout: usize, w: &[f32], dy: &[f32], dx: &mut [f32]) {
    let rows = g.rows();
    let n_out = g.out_spatial();
    if g.is_pointwise() {
        // dX = W^T * dY
        sgemm(rows, cout, n_out, 1.0, w, 1, rows, dy, n_out, 1, 0.0, dx, n_out, 1);
        return;
    }
    let slab = g.slab();
    let plane = g.out_plane();
    with_scratch(rows * slab * plane, |col| {
        let mut d0 = 0;
        while d0 < g.od {
            let d1 = (d0 + slab).min(g.od);
            let cols = (d1 - d0) * plane;
            let buf = &mut col[..rows * cols];
            sgemm(rows, cout, cols, 1.0, w, 1, rows, &dy[d0 * plane..], n_out, 1, 0.0, buf, cols, 1);
            col2im(g, buf, d0, d1, dx);
            d0 = d1;
        }
    })
}

/// Dot product with eight independent accumulators, combined in a fixed
/// order.
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Writes the transpose of the row-major `rows x cols` matrix `a` into `out`.
fn transpose(a: &[f32], rows: usize, cols: usize, out: &mut [f32]) {
    const TILE: usize = 32;
    for r0 in (0..rows).step_by(TILE) {
        for c0 in (0..cols).step_by(TILE) {
            let c1 = (c0 + TILE).min(cols);
            for r in r0..(r0 + TILE).min(rows) {
                for (dst, v) in out[c0 * rows + r..].iter_mut().step_by(rows).zip(&a[r * cols + c0..r * cols + c1]) {
                    *dst = *v;
                }
            }
        }
    }
}

/// Valid output range `[lo, hi)` along the fastest axis for kernel offset
/// `kw` at stride 1.
fn unit_stride_range(g: &Geom, kw: usize) -> (usize, usize) {
    let lo = g.p.saturating_sub(kw).min(g.ow);
    let hi = (g.w + g.p).saturating_sub(kw).min(g.ow).max(lo);
    (lo, hi)
}

fn im2col(g: &Geom, x: &[f32], d0: usize, d1: usize, col: &mut [f32]) {
    let plane = g.out_plane();
    let cols = (d1 - d0) * plane;
    let k = g.k;
    let in_plane = g.h * g.w;
    let in_vol = g.d * in_plane;
    for ci in 0..g.cin {
        let xc = &x[ci * in_vol..(ci + 1) * in_vol];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let r = ((ci * k + kd) * k + kh) * k + kw;
                    let row = &mut col[r * cols..(r + 1) * cols];
                    let (lo, hi) = unit_stride_range(g, kw);
                    for od in d0..d1 {
                        let dst = &mut row[(od - d0) * plane..(od - d0 + 1) * plane];
                        let id = (od * g.s + kd) as isize - g.p as isize;
                        if id < 0 || id >= g.d as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src_plane = &xc[id as usize * in_plane..(id as usize + 1) * in_plane];
                        for oh in 0..g.oh {
                            let line = &mut dst[oh * g.ow..(oh + 1) * g.ow];
                            let ih = (oh * g.s + kh) as isize - g.p as isize;
                            if ih < 0 || ih >= g.h as isize {
                                line.fill(0.0);
                                continue;
                            }
                            let src = &src_plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                            if g.s == 1 {
                                line[..lo].fill(0.0);
                                line[lo..hi].copy_from_slice(&src[lo + kw - g.p..hi + kw - g.p]);
                                line[hi..].fill(0.0);
                            } else {
                                for (ow, v) in line.iter_mut().enumerate() {
                                    let iw = (ow * g.s + kw) as isize - g.p as isize;
                                    *v = if iw >= 0 && iw < g.w as isize { src[iw as usize] } else { 0.0 };
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im(g: &Geom, col: &[f32], d0: usize, d1: usize, dx: &mut [f32]) {
    let plane = g.out_plane();
    let cols = (d1 - d0) * plane;
    let k = g.k;
    let in_plane = g.h * g.w;
    let in_vol = g.d * in_plane;
    for ci in 0..g.cin {
        let xc = &mut dx[ci * in_vol..(ci + 1) * in_vol];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let r = ((ci * k + kd) * k + kh) * k + kw;
                    let row = &col[r * cols..(r + 1) * cols];
                    let (lo, hi) = unit_stride_range(g, kw);
                    for od in d0..d1 {
                        let id = (od * g.s + kd) as isize - g.p as isize;
                        if id < 0 || id >= g.d as isize {
                            continue;
                        }
                        let srcp = &row[(od - d0) * plane..(od - d0 + 1) * plane];
                        let dst_plane = &mut xc[id as usize * in_plane..(id as usize + 1) * in_plane];
                        for oh in 0..g.oh {
                            let ih = (oh * g.s + kh) as isize - g.p as isize;
                            if ih < 0 || ih >= g.h as isize {
                                continue;
                            }
                            let line = &srcp[oh * g.ow..(oh + 1) * g.ow];
                            let dst = &mut dst_plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                            if g.s == 1 {
                                let dst = &mut dst[lo + kw - g.p..hi + kw - g.p];
                                for (d, v) in dst.iter_mut().zip(&line[lo..hi]) {
                                    *d += *v;
                                }
                            } else {
                                for (ow, v) in line.iter().enumerate() {
                                    let iw = (ow * g.s + kw) as isize - g.p as isize;
                                    if iw >= 0 && iw < g.w as isize {
                                        dst[iw as usize] += *v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
