//! Analytic loss gradients against central finite differences, and loss
//! values against loop-based oracles.

mod common;

use common::*;
use ndarray::Array2;
use rand::Rng;
use triplet_core::config::KlDirection;
use triplet_core::losses::*;

const INSTANCES: u64 = 25;
const TOLERANCE: f64 = 1e-4;

#[test]
fn barlow_twins_gradients_match_finite_differences() {
    for seed in 0..INSTANCES {
        let mut r = seeded(seed);
        let (n, d) = (r.random_range(3..8), r.random_range(2..6));
        let za = random_matrix(n, d, 2.0, &mut r);
        let zb = random_matrix(n, d, 2.0, &mut r);
        for center in [true, false] {
            let lambda = 0.005 + r.random_range(0.0..0.5);
            let out = barlow_twins_objective(za.view(), zb.view(), lambda, center).unwrap();
            assert!((out.loss - bt_oracle(&za, &zb, lambda, center)).abs() < 1e-10);
            let ea = fd_relative_error(&za, &out.grad_a, |x| bt_oracle(x, &zb, lambda, center));
            let eb = fd_relative_error(&zb, &out.grad_b, |x| bt_oracle(&za, x, lambda, center));
            assert!(ea < TOLERANCE && eb < TOLERANCE, "seed {seed} center {center}: {ea:e} {eb:e}");
        }
    }
}

#[test]
fn cross_entropy_gradients_match_finite_differences() {
    for seed in 0..INSTANCES {
        let mut r = seeded(100 + seed);
        let (n, k) = (r.random_range(1..9), r.random_range(2..6));
        let logits = random_matrix(n, k, 4.0, &mut r);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let (loss, grad) = cross_entropy_objective(logits.view(), &labels).unwrap();
        assert!((loss - ce_oracle(&logits, &labels)).abs() < 1e-12);
        let e = fd_relative_error(&logits, &grad, |x| ce_oracle(x, &labels));
        assert!(e < TOLERANCE, "seed {seed}: {e:e}");
    }
}

fn distillation_value(s: &Array2<f64>, t: &Array2<f64>, logits: &Array2<f64>, y: &[usize], l2: f64, tau: f64) -> f64 {
    l2 * kl_oracle(s, t, tau) + (1.0 - l2) * ce_oracle(logits, y)
}

#[test]
fn distillation_gradients_match_finite_differences() {
    for seed in 0..INSTANCES {
        let mut r = seeded(200 + seed);
        let (n, z, k) = (r.random_range(1..7), r.random_range(2..8), 3);
        let s = random_matrix(n, z, 3.0, &mut r);
        let t = random_matrix(n, z, 3.0, &mut r);
        let logits = random_matrix(n, k, 3.0, &mut r);
        let y: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let l2 = r.random_range(0.0..1.0);
        let tau = r.random_range(0.5..4.0);
        let out = distillation_objective(s.view(), t.view(), logits.view(), &y, l2, tau, KlDirection::StudentTeacher).unwrap();
        assert!((out.loss - distillation_value(&s, &t, &logits, &y, l2, tau)).abs() < 1e-10);
        let es = fd_relative_error(&s, &out.grad_latents, |x| distillation_value(x, &t, &logits, &y, l2, tau));
        let el = fd_relative_error(&logits, &out.grad_logits, |x| distillation_value(&s, &t, x, &y, l2, tau));
        assert!(es < TOLERANCE && el < TOLERANCE, "seed {seed}: {es:e} {el:e}");
    }
}

#[test]
fn reverse_kl_gradients_match_finite_differences() {
    for seed in 0..INSTANCES {
        let mut r = seeded(300 + seed);
        let (n, z) = (r.random_range(1..6), r.random_range(2..7));
        let s = random_matrix(n, z, 2.0, &mut r);
        let t = random_matrix(n, z, 2.0, &mut r);
        let tau = r.random_range(0.5..3.0);
        let (kl, g) = kl_objective(s.view(), t.view(), tau, KlDirection::TeacherStudent).unwrap();
        assert!((kl - kl_oracle(&t, &s, tau)).abs() < 1e-12);
        let e = fd_relative_error(&s, &g, |x| kl_oracle(&t, x, tau));
        assert!(e < TOLERANCE, "seed {seed}: {e:e}");
    }
}
