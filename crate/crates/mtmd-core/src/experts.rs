//! Reusable expert blocks: the FFN stack every expert is made of, softmax
//! gates over expert outputs, and the low-rank cross network applied after
//! mixing. Tower assembly lives in `towers`.

use crate::error::Result;
use crate::numkernel::params::{Init, ParamKind, ParamRegistry, SlotId};
use crate::numkernel::tape::{NodeId, Tape};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone)]
pub struct FfnLayer {
    pub w: SlotId,
    pub b: SlotId,
    /// layer-norm (gamma, beta); `None` on a plain final layer
    pub ln: Option<(SlotId, SlotId)>,
}

/// Stack of `linear -> layer_norm -> leaky_relu` layers. With `final_plain`
/// the last layer is a bare linear map, which gate networks and task heads
/// use.
#[derive(Debug, Clone)]
pub struct FfnParams {
    pub layers: Vec<FfnLayer>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl FfnParams {
    pub fn build(
        reg: &mut ParamRegistry,
        prefix: &str,
        in_dim: usize,
        dims: &[usize],
        final_plain: bool,
    ) -> FfnParams {
        assert!(!dims.is_empty());
        let mut layers = Vec::with_capacity(dims.len());
        let mut fan_in = in_dim;
        for (i, &d) in dims.iter().enumerate() {
            let plain = final_plain && i == dims.len() - 1;
            let w_init = if plain {
                Init::XavierUniform { fan_in, fan_out: d }
            } else {
                Init::HeUniform { fan_in }
            };
            let w = reg.add(&format!("{prefix}.l{i}.w"), d, fan_in, ParamKind::Dense, w_init);
            let b = reg.add(&format!("{prefix}.l{i}.b"), 1, d, ParamKind::Dense, Init::Zeros);
            let ln = (!plain).then(|| {
                (
                    reg.add(&format!("{prefix}.l{i}.ln.gamma"), 1, d, ParamKind::Dense, Init::Ones),
                    reg.add(&format!("{prefix}.l{i}.ln.beta"), 1, d, ParamKind::Dense, Init::Zeros),
                )
            });
            layers.push(FfnLayer { w, b, ln });
            fan_in = d;
        }
        FfnParams { layers, in_dim, out_dim: fan_in }
    }

    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for layer in &self.layers {
            let w = tape.param(layer.w);
            let b = tape.param(layer.b);
            h = tape.linear(h, w, b)?;
            if let Some((gamma, beta)) = layer.ln {
                let g = tape.param(gamma);
                let bt = tape.param(beta);
                h = tape.layer_norm(h, g, bt)?;
                h = tape.leaky_relu(h, LEAKY_SLOPE);
            }
        }
        Ok(h)
    }

    pub fn slots(&self) -> Vec<SlotId> {
        self.layers
            .iter()
            .flat_map(|l| {
                [l.w, l.b]
                    .into_iter()
                    .chain(l.ln.map(|(g, b)| [g, b]).into_iter().flatten())
            })
            .collect()
    }
}

/// Gate over a fixed expert set: an FFN trunk with a plain linear output,
/// normalized row-wise to the simplex.
#[derive(Debug, Clone)]
pub struct GateParams {
    pub net: FfnParams,
}

impl GateParams {
    pub fn build(
        reg: &mut ParamRegistry,
        prefix: &str,
        in_dim: usize,
        hidden: &[usize],
        n_experts: usize,
    ) -> GateParams {
        let dims: Vec<usize> = hidden.iter().copied().chain([n_experts]).collect();
        GateParams { net: FfnParams::build(reg, prefix, in_dim, &dims, true) }
    }

    /// Returns the mixing weights, one simplex row per example.
    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let logits = self.net.forward(tape, x)?;
        Ok(tape.softmax_rows(logits))
    }
}

/// Low-rank cross network: x_{l+1} = x0 ⊙ (U_l (V_lᵀ x_l) + b_l) + x_l.
/// With all parameters at zero every layer passes its input through
/// untouched.
#[derive(Debug, Clone)]
pub struct DcnParams {
    pub layers: Vec<(SlotId, SlotId, SlotId)>, // (U, V, b)
    pub dim: usize,
    pub rank: usize,
}

impl DcnParams {
    pub fn build(
        reg: &mut ParamRegistry,
        prefix: &str,
        dim: usize,
        rank: usize,
        depth: usize,
    ) -> DcnParams {
        let layers = (0..depth)
            .map(|l| {
                (
                    reg.add(&format!("{prefix}.l{l}.u"), dim, rank, ParamKind::Dense, Init::XavierUniform { fan_in: rank, fan_out: dim }),
                    reg.add(&format!("{prefix}.l{l}.v"), dim, rank, ParamKind::Dense, Init::XavierUniform { fan_in: dim, fan_out: rank }),
                    reg.add(&format!("{prefix}.l{l}.b"), 1, dim, ParamKind::Dense, Init::Zeros),
                )
            })
            .collect();
        DcnParams { layers, dim, rank }
    }

    pub fn forward(&self, tape: &mut Tape, x0: NodeId) -> NodeId {
        let mut x = x0;
        for &(u, v, b) in &self.layers {
            let vn = tape.param(v);
            let t = tape.matmul_nn(x, vn); // V^T x, batched
            let un = tape.param(u);
            let s = tape.matmul_nt(t, un); // U (V^T x)
            let bn = tape.param(b);
            let cross = tape.add_row(s, bn);
            let prod = tape.mul(x0, cross);
            x = tape.add(prod, x);
        }
        x
    }

    pub fn slots(&self) -> Vec<SlotId> {
        self.layers.iter().flat_map(|&(u, v, b)| [u, v, b]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::gradcheck::{grad_check, FD_STEP};
    use crate::numkernel::rng::Rng;
    use crate::numkernel::tensor::Tensor2;
    use proptest::prelude::*;

    fn random_input(rows: usize, cols: usize, seed: u64) -> Tensor2 {
        let mut rng = Rng::new(seed);
        let mut t = Tensor2::zeros(rows, cols);
        for v in t.data_mut() {
            *v = rng.normal();
        }
        t
    }

    #[test]
    fn ffn_shapes_follow_dims() {
        let mut reg = ParamRegistry::new();
        let ffn = FfnParams::build(&mut reg, "t", 10, &[16, 8, 4], false);
        reg.init_params(&mut Rng::new(0));
        let mut tape = Tape::new(&mut reg);
        let x = tape.constant(random_input(3, 10, 1));
        let y = ffn.forward(&mut tape, x).unwrap();
        assert_eq!((tape.value(y).rows(), tape.value(y).cols()), (3, 4));
    }

    #[test]
    fn plain_final_layer_skips_norm_and_activation() {
        let mut reg = ParamRegistry::new();
        let ffn = FfnParams::build(&mut reg, "t", 4, &[4, 2], true);
        assert!(ffn.layers[0].ln.is_some());
        assert!(ffn.layers[1].ln.is_none());
        // zero weights and biases: plain final layer gives exactly zero output
        reg.init_params(&mut Rng::new(0));
        for s in ffn.slots() {
            if reg.slot(s).name.ends_with(".w") || reg.slot(s).name.ends_with(".b") {
                reg.slot_mut(s).value.fill(0.0);
            }
        }
        let mut tape = Tape::new(&mut reg);
        let x = tape.constant(random_input(5, 4, 2));
        let y = ffn.forward(&mut tape, x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_gate_params_mix_to_expert_mean() {
        let mut reg = ParamRegistry::new();
        let gate = GateParams::build(&mut reg, "g", 6, &[8], 3);
        reg.init_params(&mut Rng::new(0));
        for s in gate.net.slots() {
            reg.slot_mut(s).value.fill(0.0);
        }
        let e: Vec<Tensor2> = (0..3).map(|i| random_input(4, 5, 10 + i)).collect();
        let mut tape = Tape::new(&mut reg);
        let x = tape.constant(random_input(4, 6, 3));
        let w = gate.forward(&mut tape, x).unwrap();
        let experts: Vec<NodeId> = e.iter().map(|t| tape.constant(t.clone())).collect();
        let mixed = tape.mix_experts(&experts, w);
        for r in 0..4 {
            for c in 0..5 {
                let mean = (e[0].at(r, c) + e[1].at(r, c) + e[2].at(r, c)) / 3.0;
                assert!((tape.value(mixed).at(r, c) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_experts_mix_to_themselves() {
        let mut reg = ParamRegistry::new();
        let gate = GateParams::build(&mut reg, "g", 6, &[8], 3);
        reg.init_params(&mut Rng::new(4));
        let shared = random_input(4, 5, 20);
        let mut tape = Tape::new(&mut reg);
        let x = tape.constant(random_input(4, 6, 5));
        let w = gate.forward(&mut tape, x).unwrap();
        let experts: Vec<NodeId> = (0..3).map(|_| tape.constant(shared.clone())).collect();
        let mixed = tape.mix_experts(&experts, w);
        for (got, want) in tape.value(mixed).data().iter().zip(shared.data()) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_param_dcn_is_identity() {
        let mut reg = ParamRegistry::new();
        let dcn = DcnParams::build(&mut reg, "d", 6, 2, 2);
        reg.init_params(&mut Rng::new(0));
        for s in dcn.slots() {
            reg.slot_mut(s).value.fill(0.0);
        }
        let x = random_input(4, 6, 30);
        let mut tape = Tape::new(&mut reg);
        let x0 = tape.constant(x.clone());
        let y = dcn.forward(&mut tape, x0);
        assert_eq!(tape.value(y).data(), x.data());
    }

    #[test]
    fn ones_bias_zero_uv_doubles_input() {
        let mut reg = ParamRegistry::new();
        let dcn = DcnParams::build(&mut reg, "d", 6, 2, 1);
        reg.init_params(&mut Rng::new(0));
        let (u, v, b) = dcn.layers[0];
        reg.slot_mut(u).value.fill(0.0);
        reg.slot_mut(v).value.fill(0.0);
        reg.slot_mut(b).value.fill(1.0);
        let x = random_input(4, 6, 31);
        let mut tape = Tape::new(&mut reg);
        let x0 = tape.constant(x.clone());
        let y = dcn.forward(&mut tape, x0);
        for (got, want) in tape.value(y).data().iter().zip(x.data()) {
            assert!((got - 2.0 * want).abs() < 1e-15);
        }
    }

    #[test]
    fn ffn_grad_check() {
        let mut reg = ParamRegistry::new();
        let ffn = FfnParams::build(&mut reg, "t", 5, &[6, 4], false);
        reg.init_params(&mut Rng::new(1));
        let x = random_input(3, 5, 40);
        let proj = random_input(3, 4, 41);
        let err = grad_check(&mut reg, &ffn.slots(), FD_STEP, |tape| {
            let xn = tape.constant(x.clone());
            let y = ffn.forward(tape, xn).unwrap();
            tape.proj_sum(y, proj.clone())
        });
        assert!(err <= 1e-4, "ffn grad check failed: {err}");
    }

    #[test]
    fn gated_mixture_grad_check() {
        let mut reg = ParamRegistry::new();
        let gate = GateParams::build(&mut reg, "g", 5, &[6], 2);
        let e0 = FfnParams::build(&mut reg, "e0", 5, &[4, 4], false);
        let e1 = FfnParams::build(&mut reg, "e1", 5, &[4, 4], false);
        reg.init_params(&mut Rng::new(2));
        let x = random_input(3, 5, 50);
        let proj = random_input(3, 4, 51);
        let targets: Vec<SlotId> = gate
            .net
            .slots()
            .into_iter()
            .chain(e0.slots())
            .chain(e1.slots())
            .collect();
        let err = grad_check(&mut reg, &targets, FD_STEP, |tape| {
            let xn = tape.constant(x.clone());
            let w = gate.forward(tape, xn).unwrap();
            let a = e0.forward(tape, xn).unwrap();
            let b = e1.forward(tape, xn).unwrap();
            let mixed = tape.mix_experts(&[a, b], w);
            tape.proj_sum(mixed, proj.clone())
        });
        assert!(err <= 1e-4, "mixture grad check failed: {err}");
    }

    #[test]
    fn dcn_grad_check() {
        let mut reg = ParamRegistry::new();
        let dcn = DcnParams::build(&mut reg, "d", 5, 2, 2);
        reg.init_params(&mut Rng::new(3));
        let x = random_input(3, 5, 60);
        let proj = random_input(3, 5, 61);
        let err = grad_check(&mut reg, &dcn.slots(), FD_STEP, |tape| {
            let x0 = tape.constant(x.clone());
            let y = dcn.forward(tape, x0);
            tape.proj_sum(y, proj.clone())
        });
        assert!(err <= 1e-4, "dcn grad check failed: {err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn gate_rows_stay_on_the_simplex(seed in 0u64..1000, rows in 1usize..6) {
            let mut reg = ParamRegistry::new();
            let gate = GateParams::build(&mut reg, "g", 4, &[6], 3);
            reg.init_params(&mut Rng::new(seed));
            let mut tape = Tape::new(&mut reg);
            let x = tape.constant(random_input(rows, 4, seed ^ 0xabcd));
            let w = gate.forward(&mut tape, x).unwrap();
            for r in 0..rows {
                let row = tape.value(w).row(r);
                let sum: f64 = row.iter().sum();
                prop_assert!((sum - 1.0).abs() <= 1e-9);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }
}
