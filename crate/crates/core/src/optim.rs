//! Optimizers and learning-rate schedules.

use std::collections::BTreeMap;

use crate::config::{LrSchedule, OptimizerKind, StageHyperParams};
use crate::nn::Param;

/// Trust coefficient of layer-wise adaptive rate scaling.
const LARS_ETA: f64 = 0.001;
/// Learning-rate factor for one-dimensional parameters (biases, norm
/// scales) under LARS, which are neither decayed nor adapted.
const LARS_BIAS_LR_FACTOR: f64 = 0.024;

#[derive(Debug, Clone, Default)]
struct Slot {
    first: Vec<f32>,
    second: Vec<f32>,
}

/// Stateful optimizer. Parameters must be passed in the same order at every
/// step.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub weight_decay: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    slots: Vec<Slot>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, weight_decay: f64, momentum: f64) -> Self {
        Optimizer {
            kind,
            weight_decay,
            momentum,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            slots: Vec::new(),
        }
    }

    pub fn for_stage(h: &StageHyperParams) -> Self {
        Self::new(h.optimizer, h.weight_decay, h.momentum)
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Moment buffers by name (`optim.{index}.first` / `.second`) for
    /// checkpointing.
    pub fn state_arrays(&self) -> BTreeMap<String, (Vec<usize>, Vec<f32>)> {
        let mut m = BTreeMap::new();
        for (i, s) in self.slots.iter().enumerate() {
            m.insert(format!("optim.{i:04}.first"), (vec![s.first.len()], s.first.clone()));
            if !s.second.is_empty() {
                m.insert(format!("optim.{i:04}.second"), (vec![s.second.len()], s.second.clone()));
            }
        }
        m
    }

    /// Restores the step count and the buffers written by `state_arrays`.
    pub fn load_state(&mut self, steps: u64, arrays: &BTreeMap<String, (Vec<usize>, Vec<f32>)>) {
        self.steps = steps;
        self.slots = (0..)
            .map_while(|i| {
                arrays.get(&format!("optim.{i:04}.first")).map(|(_, first)| Slot {
                    first: first.clone(),
                    second: arrays
                        .get(&format!("optim.{i:04}.second"))
                        .map(|(_, v)| v.clone())
                        .unwrap_or_default(),
                })
            })
            .collect();
    }

    /// Applies one update with learning rate `lr` and leaves the gradients
    /// untouched.
    pub fn step(&mut self, params: &mut [&mut Param], lr: f64) {
        if params.is_empty() {
            log::warn!("optimizer step with an empty parameter list");
            return;
        }
        if self.slots.len() != params.len() {
            self.slots = params
                .iter()
                .map(|p| Slot {
                    first: vec![0.0; p.len()],
                    second: if self.kind == OptimizerKind::AdamW { vec![0.0; p.len()] } else { Vec::new() },
                })
                .collect();
        }
        self.steps += 1;
        for (p, slot) in params.iter_mut().zip(&mut self.slots) {
            match self.kind {
                OptimizerKind::AdamW => adamw(p, slot, lr, self.weight_decay, self.beta1, self.beta2, self.eps, self.steps),
                OptimizerKind::Sgd => sgd(p, slot, lr, self.weight_decay, self.momentum),
                OptimizerKind::Lars => lars(p, slot, lr, self.weight_decay, self.momentum),
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn adamw(p: &mut Param, s: &mut Slot, lr: f64, wd: f64, b1: f64, b2: f64, eps: f64, t: u64) {
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for i in 0..p.len() {
        let g = p.grad[i] as f64;
        let m = b1 * s.first[i] as f64 + (1.0 - b1) * g;
        let v = b2 * s.second[i] as f64 + (1.0 - b2) * g * g;
        s.first[i] = m as f32;
        s.second[i] = v as f32;
        let w = p.value[i] as f64;
        let update = (m / c1) / ((v / c2).sqrt() + eps) + wd * w;
        p.value[i] = (w - lr * update) as f32;
    }
}

fn sgd(p: &mut Param, s: &mut Slot, lr: f64, wd: f64, momentum: f64) {
    for i in 0..p.len() {
        let w = p.value[i] as f64;
        let g = p.grad[i] as f64 + wd * w;
        let buf = momentum * s.first[i] as f64 + g;
        s.first[i] = buf as f32;
        p.value[i] = (w - lr * buf) as f32;
    }
}

fn lars(p: &mut Param, s: &mut Slot, lr: f64, wd: f64, momentum: f64) {
    let matrix = p.shape.len() > 1;
    let (scale, wd, lr) = if matrix {
        let pn = p.value.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        let un = p
            .value
            .iter()
            .zip(&p.grad)
            .map(|(w, g)| (*g as f64 + wd * *w as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        let q = if pn > 0.0 && un > 0.0 { LARS_ETA * pn / un } else { 1.0 };
        (q, wd, lr)
    } else {
        (1.0, 0.0, lr * LARS_BIAS_LR_FACTOR)
    };
    for i in 0..p.len() {
        let w = p.value[i] as f64;
        let g = (p.grad[i] as f64 + wd * w) * scale;
        let buf = momentum * s.first[i] as f64 + g;
        s.first[i] = buf as f32;
        p.value[i] = (w - lr * buf) as f32;
    }
}

/// Learning rate at step `t` (0-based) of `total`.
pub fn learning_rate(base: f64, schedule: LrSchedule, t: usize, total: usize) -> f64 {
    match schedule {
        LrSchedule::Constant => base,
        LrSchedule::Cosine => {
            let frac = if total <= 1 { 0.0 } else { t as f64 / total as f64 };
            base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_descends(kind: OptimizerKind, lr: f64) {
        // f(w) = 0.5 |w - 3|^2
        let mut p = Param::new(&[2, 2], vec![0.0, 1.0, -2.0, 5.0]);
        let mut opt = Optimizer::new(kind, 0.0, 0.9);
        let f = |p: &Param| p.value.iter().map(|v| 0.5 * (*v as f64 - 3.0).powi(2)).sum::<f64>();
        let start = f(&p);
        for _ in 0..200 {
            p.grad = p.value.iter().map(|v| v - 3.0).collect();
            opt.step(&mut [&mut p], lr);
        }
        assert!(f(&p) < start * 0.1, "{kind:?}: {} -> {}", start, f(&p));
    }

    #[test]
    fn state_round_trip_continues_identically() {
        let run = |split: Option<usize>| {
            let mut p = Param::new(&[2, 2], vec![0.0, 1.0, -2.0, 5.0]);
            let mut opt = Optimizer::new(OptimizerKind::AdamW, 0.01, 0.9);
            for t in 0..10 {
                if split == Some(t) {
                    let (steps, st) = (opt.steps(), opt.state_arrays());
                    opt = Optimizer::new(OptimizerKind::AdamW, 0.01, 0.9);
                    opt.load_state(steps, &st);
                }
                p.grad = p.value.iter().map(|v| v - 3.0).collect();
                opt.step(&mut [&mut p], 0.1);
            }
            p.value
        };
        assert_eq!(run(None), run(Some(4)));
    }

    #[test]
    fn all_optimizers_minimize_a_quadratic() {
        quadratic_descends(OptimizerKind::AdamW, 0.05);
        quadratic_descends(OptimizerKind::Sgd, 0.02);
        quadratic_descends(OptimizerKind::Lars, 20.0);
    }

    #[test]
    fn adamw_first_step_has_unit_magnitude() {
        let mut p = Param::new(&[1], vec![1.0]);
        p.grad = vec![123.0];
        let mut opt = Optimizer::new(OptimizerKind::AdamW, 0.0, 0.9);
        opt.step(&mut [&mut p], 0.1);
        assert!((p.value[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(learning_rate(0.5, LrSchedule::Cosine, 0, 100), 0.5);
        assert!((learning_rate(0.5, LrSchedule::Cosine, 50, 100) - 0.25).abs() < 1e-12);
        assert_eq!(learning_rate(0.5, LrSchedule::Constant, 99, 100), 0.5);
    }
}
