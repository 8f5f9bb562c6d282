use rand::Rng;

use super::gemm::sgemm;
use super::tensor::{Param, Tensor};
use crate::error::{Error, Result};

/// Affine layer `y = x W^T + b` over `[batch, features]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_features as f32).sqrt();
        let w = (0..in_features * out_features)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let b = (0..out_features).map(|_| rng.random_range(-bound..bound)).collect();
        Linear {
            in_features,
            out_features,
            weight: Param::new(&[out_features, in_features], w),
            bias: Param::new(&[out_features], b),
        }
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.shape()[1] != self.in_features {
            return Err(Error::Shape {
                expected: vec![x.shape().first().copied().unwrap_or(0), self.in_features],
                actual: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let (b, i, o) = (x.batch(), self.in_features, self.out_features);
        let mut y = Tensor::zeros(&[b, o]);
        for row in y.data_mut().chunks_mut(o) {
            row.copy_from_slice(&self.bias.value);
        }
        sgemm(b, i, o, 1.0, x.data(), i, 1, &self.weight.value, 1, i, 1.0, y.data_mut(), o, 1);
        Ok(y)
    }

    pub fn backward(&mut self, x: &Tensor, dy: &Tensor, need_input_grad: bool) -> Result<Option<Tensor>> {
        self.check(x)?;
        let (b, i, o) = (x.batch(), self.in_features, self.out_features);
        if dy.shape() != [b, o] {
            return Err(Error::Shape {
                expected: vec![b, o],
                actual: dy.shape().to_vec(),
            });
        }
        sgemm(o, b, i, 1.0, dy.data(), 1, o, x.data(), i, 1, 1.0, &mut self.weight.grad, i, 1);
        for row in dy.data().chunks(o) {
            self.bias.accumulate(row);
        }
        if !need_input_grad {
            return Ok(None);
        }
        let mut dx = Tensor::zeros(&[b, i]);
        sgemm(b, o, i, 1.0, dy.data(), o, 1, &self.weight.value, i, 1, 0.0, dx.data_mut(), i, 1);
        Ok(Some(dx))
    }
}
