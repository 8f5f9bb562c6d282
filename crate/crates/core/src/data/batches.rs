//! Seeded shuffling and batch assembly.

use std::borrow::Borrow;

use rand::seq::SliceRandom;

use super::VolumeSample;
use crate::augment::AugmentationPipeline;
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::rng;

/// Epoch-wise shuffled index batches over `len` samples.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    len: usize,
    batch_size: usize,
    drop_last: bool,
    seed: u64,
}

impl BatchSampler {
    pub fn new(len: usize, batch_size: usize, drop_last: bool, seed: u64) -> Result<Self> {
        if len == 0 {
            return Err(Error::Iteration("cannot iterate over an empty dataset".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if drop_last && batch_size > len {
            return Err(Error::Iteration(format!(
                "batch size {batch_size} exceeds the {len} available samples with drop_last"
            )));
        }
        Ok(Self {
            len,
            batch_size,
            drop_last,
            seed,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        if self.drop_last {
            self.len / self.batch_size
        } else {
            self.len.div_ceil(self.batch_size)
        }
    }

    /// The batches of epoch `epoch`; the same epoch always gives the same order.
    pub fn epoch(&self, epoch: u64) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len).collect();
        order.shuffle(&mut rng::stream(self.seed, &[epoch]));
        let mut out: Vec<Vec<usize>> = order.chunks(self.batch_size).map(<[usize]>::to_vec).collect();
        if self.drop_last && out.last().is_some_and(|b| b.len() < self.batch_size) {
            out.pop();
        }
        out
    }

    /// Endless stream of batches that rolls over epoch boundaries.
    pub fn stream(&self) -> BatchStream {
        BatchStream {
            sampler: self.clone(),
            epoch: 0,
            pending: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchStream {
    sampler: BatchSampler,
    epoch: u64,
    pending: Vec<Vec<usize>>,
}

impl BatchStream {
    /// Next `(epoch, indices)`.
    pub fn next_batch(&mut self) -> (u64, Vec<usize>) {
        if self.pending.is_empty() {
            self.pending = self.sampler.epoch(self.epoch);
            self.pending.reverse();
            self.epoch += 1;
        }
        let b = self.pending.pop().expect("sampler yields at least one batch");
        (self.epoch - 1, b)
    }
}

/// A stacked batch `[B, 1, d, h, w]` with its labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub volumes: Tensor,
    pub labels: Vec<Option<usize>>,
}

impl Batch {
    /// Labels as plain codes; errors if any sample is unlabeled.
    pub fn class_labels(&self) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .map(|l| l.ok_or_else(|| Error::Iteration("batch contains unlabeled samples".into())))
            .collect()
    }
}

/// Stacks the samples at `indices`, augmenting each with its own stream
/// `(epoch, sample index, view)` when a pipeline is given.
pub fn assemble_batch<S: Borrow<VolumeSample> + Sync>(
    samples: &[S],
    indices: &[usize],
    pipeline: Option<&AugmentationPipeline>,
    epoch: u64,
    view: u64,
) -> Result<Batch> {
    let first = samples
        .get(*indices.first().ok_or_else(|| Error::Iteration("empty batch".into()))?)
        .ok_or_else(|| Error::Iteration("batch index out of range".into()))?
        .borrow();
    let dims = first.volume.dims;
    let views = crate::parallel::map_indexed(indices.len(), |j| -> Result<Vec<f32>> {
        let i = indices[j];
        let s = samples
            .get(i)
            .ok_or_else(|| Error::Iteration(format!("sample index {i} out of range")))?
            .borrow();
        match pipeline {
            Some(p) => Ok(p.apply_with(&s.volume, &mut p.stream(&[epoch, i as u64, view]))?.data),
            None => Ok(s.volume.data.clone()),
        }
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&[f32]> = views.iter().map(Vec::as_slice).collect();
    Ok(Batch {
        indices: indices.to_vec(),
        volumes: Tensor::stack(&[1, dims[0], dims[1], dims[2]], &refs)?,
        labels: indices.iter().map(|&i| samples[i].borrow().label).collect(),
    })
}

/// One epoch of batches over `samples`.
pub fn iterate_batches<'a>(
    samples: &'a [VolumeSample],
    batch_size: usize,
    pipeline: Option<&'a AugmentationPipeline>,
    seed: u64,
    epoch: u64,
    drop_last: bool,
) -> Result<impl Iterator<Item = Result<Batch>> + 'a> {
    let sampler = BatchSampler::new(samples.len(), batch_size, drop_last, seed)?;
    Ok(sampler
        .epoch(epoch)
        .into_iter()
        .map(move |idx| assemble_batch(samples, &idx, pipeline, epoch, 0)))
}
