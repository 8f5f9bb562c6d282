use super::tensor::{Param, Tensor};
use super::Mode;
use crate::error::{Error, Result};
use crate::parallel;

/// Per-channel batch normalization over `[batch, channels, ...]` tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm3d {
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub momentum: f32,
    pub eps: f32,
}

/// Normalized activations and per-channel inverse std from the forward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f32>,
    mode: Mode,
}

impl BatchNorm3d {
    pub fn new(channels: usize) -> Self {
        BatchNorm3d {
            channels,
            gamma: Param::filled(&[channels], 1.0),
            beta: Param::zeros(&[channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Starts the layer with a zero scale, so a residual branch ending in it
    /// is initially the identity.
    pub fn zero_scaled(channels: usize) -> Self {
        let mut bn = Self::new(channels);
        bn.gamma.value.fill(0.0);
        bn
    }

    fn check(&self, x: &Tensor) -> Result<usize> {
        let s = x.shape();
        if s.len() < 2 || s[1] != self.channels {
            return Err(Error::Shape {
                expected: vec![0, self.channels],
                actual: s.to_vec(),
            });
        }
        Ok(x.sample_len() / self.channels)
    }

    /// Train-mode forward updates the running statistics.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, BnCache)> {
        let spatial = self.check(x)?;
        let c = self.channels;
        let b = x.batch();
        let (mean, inv_std) = match mode {
            Mode::Train => {
                let n = (b * spatial) as f64;
                if b * spatial < 2 {
                    return Err(Error::Numeric(
                        "batch normalization in training mode needs at least two values per channel".into(),
                    ));
                }
                let stats = parallel::map_indexed(c, |ch| {
                    let mut sum = 0.0f64;
                    for i in 0..b {
                        let base = (i * c + ch) * spatial;
                        sum += x.data()[base..base + spatial].iter().map(|&v| v as f64).sum::<f64>();
                    }
                    let mean = sum / n;
                    let mut sq = 0.0f64;
                    for i in 0..b {
                        let base = (i * c + ch) * spatial;
                        sq += x.data()[base..base + spatial]
                            .iter()
                            .map(|&v| {
                                let d = v as f64 - mean;
                                d * d
                            })
                            .sum::<f64>();
                    }
                    (mean, sq / n)
                });
                let m = self.momentum as f64;
                let mut means = Vec::with_capacity(c);
                let mut inv = Vec::with_capacity(c);
                for (ch, &(mean, var)) in stats.iter().enumerate() {
                    let unbiased = var * n / (n - 1.0);
                    self.running_mean[ch] = ((1.0 - m) * self.running_mean[ch] as f64 + m * mean) as f32;
                    self.running_var[ch] = ((1.0 - m) * self.running_var[ch] as f64 + m * unbiased) as f32;
                    means.push(mean as f32);
                    inv.push((1.0 / (var + self.eps as f64).sqrt()) as f32);
                }
                (means, inv)
            }
            Mode::Eval => (self.running_mean.clone(), self.eval_inv_std()),
        };
        let mut xhat = x.clone();
        parallel::for_each_chunk_mut(xhat.data_mut(), spatial, |i, chunk| {
            let ch = i % c;
            let (m, s) = (mean[ch], inv_std[ch]);
            chunk.iter_mut().for_each(|v| *v = (*v - m) * s);
        });
        let mut y = xhat.clone();
        let (g, bt) = (&self.gamma.value, &self.beta.value);
        parallel::for_each_chunk_mut(y.data_mut(), spatial, |i, chunk| {
            let ch = i % c;
            let (gc, bc) = (g[ch], bt[ch]);
            chunk.iter_mut().for_each(|v| *v = *v * gc + bc);
        });
        Ok((y, BnCache { xhat, inv_std, mode }))
    }

    fn eval_inv_std(&self) -> Vec<f32> {
        self.running_var
            .iter()
            .map(|&v| (1.0 / (v as f64 + self.eps as f64).sqrt()) as f32)
            .collect()
    }

    /// Inference with running statistics; does not touch any state.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let spatial = self.check(x)?;
        let c = self.channels;
        let inv = self.eval_inv_std();
        let mut y = x.clone();
        let (g, bt, rm) = (&self.gamma.value, &self.beta.value, &self.running_mean);
        parallel::for_each_chunk_mut(y.data_mut(), spatial, |i, chunk| {
            let ch = i % c;
            let (m, s, gc, bc) = (rm[ch], inv[ch], g[ch], bt[ch]);
            chunk.iter_mut().for_each(|v| *v = (*v - m) * s * gc + bc);
        });
        Ok(y)
    }

    pub fn backward(&mut self, cache: &BnCache, dy: &Tensor) -> Result<Tensor> {
        let spatial = self.check(dy)?;
        if dy.shape() != cache.xhat.shape() {
            return Err(Error::Shape {
                expected: cache.xhat.shape().to_vec(),
                actual: dy.shape().to_vec(),
            });
        }
        let c = self.channels;
        let b = dy.batch();
        let xhat = &cache.xhat;
        let sums = parallel::map_indexed(c, |ch| {
            let (mut db, mut dg) = (0.0f64, 0.0f64);
            for i in 0..b {
                let base = (i * c + ch) * spatial;
                for (d, xh) in dy.data()[base..base + spatial].iter().zip(&xhat.data()[base..base + spatial]) {
                    db += *d as f64;
                    dg += *d as f64 * *xh as f64;
                }
            }
            (db, dg)
        });
        for (ch, &(db, dg)) in sums.iter().enumerate() {
            self.beta.grad[ch] += db as f32;
            self.gamma.grad[ch] += dg as f32;
        }
        let n = (b * spatial) as f64;
        let gamma = &self.gamma.value;
        let inv = &cache.inv_std;
        let mut dx = dy.clone();
        let mode = cache.mode;
        parallel::for_each_chunk_mut(dx.data_mut(), spatial, |i, chunk| {
            let ch = i % c;
            let scale = gamma[ch] as f64 * inv[ch] as f64;
            let base = i * spatial;
            match mode {
                Mode::Train => {
                    let (db, dg) = sums[ch];
                    let xh = &xhat.data()[base..base + spatial];
                    for (v, x) in chunk.iter_mut().zip(xh) {
                        *v = (scale / n * (n * *v as f64 - db - *x as f64 * dg)) as f32;
                    }
                }
                Mode::Eval => chunk.iter_mut().for_each(|v| *v = (*v as f64 * scale) as f32),
            }
        });
        Ok(dx)
    }
}
