//! Bias-corrected Adam. Moment buffers are keyed by parameter name and the
//! update walks slots in name-sorted order, so two runs with the same seed
//! and data produce bitwise-identical parameters.

use std::collections::HashMap;

use super::params::{ParamKind, ParamRegistry};
use super::tensor::Tensor2;

pub const ADAM_LR: f64 = 1e-3;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    t: u64,
    moments: HashMap<String, (Tensor2, Tensor2)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, t: 0, moments: HashMap::new() }
    }

    pub fn step_index(&self) -> u64 {
        self.t
    }

    /// One update over every trainable slot; gradients are zeroed afterward.
    pub fn step(&mut self, reg: &mut ParamRegistry) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for id in reg.sorted_ids() {
            let slot = reg.slot_mut(id);
            if slot.kind == ParamKind::State {
                continue;
            }
            let (m, v) = self.moments.entry(slot.name.clone()).or_insert_with(|| {
                (
                    Tensor2::zeros(slot.value.rows(), slot.value.cols()),
                    Tensor2::zeros(slot.value.rows(), slot.value.cols()),
                )
            });
            let g = slot.grad.data();
            let p = slot.value.data().to_vec();
            let mut new_p = p;
            for (i, pv) in new_p.iter_mut().enumerate() {
                let gi = g[i];
                let mi = ADAM_BETA1 * m.data()[i] + (1.0 - ADAM_BETA1) * gi;
                let vi = ADAM_BETA2 * v.data()[i] + (1.0 - ADAM_BETA2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / c1;
                let vhat = vi / c2;
                *pv -= self.lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
            slot.value.data_mut().copy_from_slice(&new_p);
        }
        reg.zero_grads();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::params::Init;
    use crate::numkernel::rng::Rng;

    #[test]
    fn zero_gradient_leaves_params_bitwise_unchanged() {
        let mut reg = ParamRegistry::new();
        let id = reg.add("w", 3, 3, ParamKind::Dense, Init::Uniform { limit: 1.0 });
        reg.init_params(&mut Rng::new(5));
        let before = reg.value(id).data().to_vec();
        let mut opt = Adam::new(ADAM_LR);
        opt.step(&mut reg);
        assert_eq!(reg.value(id).data(), &before[..]);
    }

    #[test]
    fn first_step_moves_by_about_lr_against_gradient() {
        let mut reg = ParamRegistry::new();
        let id = reg.add("w", 1, 1, ParamKind::Dense, Init::Zeros);
        reg.init_params(&mut Rng::new(0));
        reg.slot_mut(id).grad.set(0, 0, 1.0);
        let mut opt = Adam::new(1e-3);
        opt.step(&mut reg);
        // bias correction makes the first step ≈ lr·sign(g)
        let moved = -reg.value(id).at(0, 0);
        assert!((moved - 1e-3).abs() < 1e-5, "moved {moved}");
        // and the gradient buffer was cleared
        assert_eq!(reg.slot(id).grad.at(0, 0), 0.0);
    }

    #[test]
    fn state_slots_are_not_touched() {
        let mut reg = ParamRegistry::new();
        let id = reg.add("bn_mean", 1, 4, ParamKind::State, Init::Zeros);
        reg.slot_mut(id).grad.fill(9.0); // garbage grads must be ignored
        let before = reg.value(id).data().to_vec();
        Adam::new(1e-3).step(&mut reg);
        assert_eq!(reg.value(id).data(), &before[..]);
    }

    #[test]
    fn two_identical_runs_match_bitwise() {
        let run = || {
            let mut reg = ParamRegistry::new();
            let id = reg.add("w", 2, 2, ParamKind::Dense, Init::Uniform { limit: 0.5 });
            reg.init_params(&mut Rng::new(42));
            let mut opt = Adam::new(1e-3);
            for step in 0..25 {
                for (i, g) in reg.slot_mut(id).grad.data_mut().iter_mut().enumerate() {
                    *g = ((step * 4 + i) as f64 * 0.37).sin();
                }
                opt.step(&mut reg);
            }
            reg.value(id).data().to_vec()
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
