use super::tensor::Tensor;
use crate::error::{Error, Result};

pub fn relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

/// Gradient of ReLU given its output `y`.
pub fn relu_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (d, v) in dx.data_mut().iter_mut().zip(y.data()) {
        if *v <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

/// Averages `[batch, channels, ...]` over all trailing axes.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    if x.shape().len() < 3 {
        return Err(Error::Shape {
            expected: vec![0, 0, 0],
            actual: x.shape().to_vec(),
        });
    }
    let (b, c) = (x.shape()[0], x.shape()[1]);
    let spatial = x.sample_len() / c;
    let data = x
        .data()
        .chunks(spatial)
        .map(|ch| (ch.iter().map(|&v| v as f64).sum::<f64>() / spatial as f64) as f32)
        .collect();
    Tensor::from_vec(&[b, c], data)
}

pub fn global_avg_pool_backward(input_shape: &[usize], dy: &Tensor) -> Tensor {
    let c = input_shape[1];
    let spatial: usize = input_shape[2..].iter().product();
    let mut dx = Tensor::zeros(input_shape);
    let scale = 1.0 / spatial as f32;
    for (chunk, g) in dx.data_mut().chunks_mut(spatial).zip(dy.data()) {
        chunk.fill(g * scale);
    }
    debug_assert_eq!(dy.data().len(), input_shape[0] * c);
    dx
}
