//! Central finite-difference verification of the tape's backward pass.
//!
//! The loss closure rebuilds the graph on a fresh tape each call, so the
//! forward must be side-effect free; batch norm is checked with
//! `BnMode::Train { update_stats: false }` or `Infer`. Inputs are checked by
//! registering them as temporary parameter slots.

use super::params::{ParamRegistry, SlotId};
use super::tape::{NodeId, Tape};
use super::tensor::Tensor2;

pub const FD_STEP: f64 = 1e-5;

fn eval_loss<F>(reg: &mut ParamRegistry, f: &F) -> f64
where
    F: Fn(&mut Tape) -> NodeId,
{
    let mut tape = Tape::new(reg);
    let l = f(&mut tape);
    tape.value(l).scalar()
}

/// Gradients of the loss for `targets` via one backward pass.
pub fn analytic_grads<F>(reg: &mut ParamRegistry, targets: &[SlotId], f: &F) -> Vec<Tensor2>
where
    F: Fn(&mut Tape) -> NodeId,
{
    reg.zero_grads();
    {
        let mut tape = Tape::new(reg);
        let l = f(&mut tape);
        tape.backward(l);
    }
    let out = targets.iter().map(|&id| reg.slot(id).grad.clone()).collect();
    reg.zero_grads();
    out
}

/// Central differences (f(x+h) − f(x−h)) / 2h for every coordinate of every
/// target slot. Slow and exact-ish; test-only machinery.
pub fn numeric_grads<F>(reg: &mut ParamRegistry, targets: &[SlotId], h: f64, f: &F) -> Vec<Tensor2>
where
    F: Fn(&mut Tape) -> NodeId,
{
    let mut out = Vec::with_capacity(targets.len());
    for &id in targets {
        let (rows, cols) = (reg.value(id).rows(), reg.value(id).cols());
        let mut g = Tensor2::zeros(rows, cols);
        for i in 0..rows * cols {
            let orig = reg.value(id).data()[i];
            reg.slot_mut(id).value.data_mut()[i] = orig + h;
            let lp = eval_loss(reg, f);
            reg.slot_mut(id).value.data_mut()[i] = orig - h;
            let lm = eval_loss(reg, f);
            reg.slot_mut(id).value.data_mut()[i] = orig;
            g.data_mut()[i] = (lp - lm) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// max over coordinates of |g_a − g_n| / max(1e-8, |g_a| + |g_n|).
pub fn max_rel_err(analytic: &[Tensor2], numeric: &[Tensor2]) -> f64 {
    let mut worst = 0.0_f64;
    for (a, n) in analytic.iter().zip(numeric.iter()) {
        for (ga, gn) in a.data().iter().zip(n.data().iter()) {
            let err = (ga - gn).abs() / (ga.abs() + gn.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    worst
}

/// One-call check: builds both gradient estimates and reports the worst
/// relative disagreement over all coordinates of all targets.
pub fn grad_check<F>(reg: &mut ParamRegistry, targets: &[SlotId], h: f64, f: F) -> f64
where
    F: Fn(&mut Tape) -> NodeId,
{
    let analytic = analytic_grads(reg, targets, &f);
    let numeric = numeric_grads(reg, targets, h, &f);
    max_rel_err(&analytic, &numeric)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::params::{Init, ParamKind};
    use crate::numkernel::rng::Rng;
    use crate::numkernel::tape::BnMode;

    fn random_proj(rows: usize, cols: usize, rng: &mut Rng) -> Tensor2 {
        let mut w = Tensor2::zeros(rows, cols);
        for v in w.data_mut() {
            *v = rng.normal();
        }
        w
    }

    #[test]
    fn linear_layer_is_exact_to_1e6() {
        let mut rng = Rng::new(1);
        let mut reg = ParamRegistry::new();
        let x = reg.add("x", 3, 5, ParamKind::Dense, Init::Uniform { limit: 2.0 });
        let w = reg.add("w", 4, 5, ParamKind::Dense, Init::Uniform { limit: 1.0 });
        let b = reg.add("b", 1, 4, ParamKind::Dense, Init::Uniform { limit: 1.0 });
        reg.init_params(&mut rng);
        let proj = random_proj(3, 4, &mut rng);
        let err = grad_check(&mut reg, &[x, w, b], FD_STEP, |tape| {
            let (xn, wn, bn) = (tape.param(x), tape.param(w), tape.param(b));
            let y = tape.linear(xn, wn, bn).unwrap();
            tape.proj_sum(y, proj.clone())
        });
        assert!(err <= 1e-6, "linear grad check failed: {err}");
    }

    #[test]
    fn nonlinear_chain_within_1e4() {
        // linear -> layer_norm -> leaky_relu -> linear -> sigmoid -> clamp
        let mut rng = Rng::new(2);
        let mut reg = ParamRegistry::new();
        let x = reg.add("x", 4, 6, ParamKind::Dense, Init::Uniform { limit: 1.5 });
        let w1 = reg.add("w1", 8, 6, ParamKind::Dense, Init::HeUniform { fan_in: 6 });
        let b1 = reg.add("b1", 1, 8, ParamKind::Dense, Init::Zeros);
        let g1 = reg.add("g1", 1, 8, ParamKind::Dense, Init::Ones);
        let be1 = reg.add("be1", 1, 8, ParamKind::Dense, Init::Zeros);
        let w2 = reg.add("w2", 1, 8, ParamKind::Dense, Init::XavierUniform { fan_in: 8, fan_out: 1 });
        let b2 = reg.add("b2", 1, 1, ParamKind::Dense, Init::Zeros);
        reg.init_params(&mut rng);
        let proj = random_proj(4, 1, &mut rng);
        let targets = [x, w1, b1, g1, be1, w2, b2];
        let err = grad_check(&mut reg, &targets, FD_STEP, |tape| {
            let xn = tape.param(x);
            let (w1n, b1n) = (tape.param(w1), tape.param(b1));
            let h = tape.linear(xn, w1n, b1n).unwrap();
            let (g1n, be1n) = (tape.param(g1), tape.param(be1));
            let h = tape.layer_norm(h, g1n, be1n).unwrap();
            let h = tape.leaky_relu(h, 0.2);
            let (w2n, b2n) = (tape.param(w2), tape.param(b2));
            let s = tape.linear(h, w2n, b2n).unwrap();
            let p = tape.sigmoid(s);
            let p = tape.clamp(p, 1e-7, 1.0 - 1e-7);
            tape.proj_sum(p, proj.clone())
        });
        assert!(err <= 1e-4, "chain grad check failed: {err}");
    }

    #[test]
    fn softmax_gated_mixture_within_1e4() {
        let mut rng = Rng::new(3);
        let mut reg = ParamRegistry::new();
        let x = reg.add("x", 3, 4, ParamKind::Dense, Init::Uniform { limit: 1.0 });
        let e0 = reg.add("e0", 3, 5, ParamKind::Dense, Init::Uniform { limit: 1.0 });
        let e1 = reg.add("e1", 3, 5, ParamKind::Dense, Init::Uniform { limit: 1.0 });
        let wg = reg.add("wg", 2, 4, ParamKind::Dense, Init::Uniform { limit: 1.0 });
        let bg = reg.add("bg", 1, 2, ParamKind::Dense, Init::Zeros);
        reg.init_params(&mut rng);
        let proj = random_proj(3, 5, &mut rng);
        let err = grad_check(&mut reg, &[x, e0, e1, wg, bg], FD_STEP, |tape| {
            let xn = tape.param(x);
            let (wgn, bgn) = (tape.param(wg), tape.param(bg));
            let z = tape.linear(xn, wgn, bgn).unwrap();
            let gate = tape.softmax_rows(z);
            let (e0n, e1n) = (tape.param(e0), tape.param(e1));
            let y = tape.mix_experts(&[e0n, e1n], gate);
            tape.proj_sum(y, proj.clone())
        });
        assert!(err <= 1e-4, "mixture grad check failed: {err}");
    }

    #[test]
    fn batch_norm_train_mode_within_1e4() {
        let mut rng = Rng::new(4);
        let mut reg = ParamRegistry::new();
        let x = reg.add("x", 6, 3, ParamKind::Dense, Init::Uniform { limit: 2.0 });
        let m = reg.add("bn_mean", 1, 3, ParamKind::State, Init::Zeros);
        let v = reg.add("bn_var", 1, 3, ParamKind::State, Init::Ones);
        reg.init_params(&mut rng);
        let proj = random_proj(6, 3, &mut rng);
        let err = grad_check(&mut reg, &[x], FD_STEP, |tape| {
            let xn = tape.param(x);
            let y = tape
                .batch_norm(xn, m, v, BnMode::Train { update_stats: false })
                .unwrap();
            tape.proj_sum(y, proj.clone())
        });
        assert!(err <= 1e-4, "batch_norm grad check failed: {err}");
    }

    #[test]
    fn se_style_field_ops_within_1e4() {
        let mut rng = Rng::new(5);
        let mut reg = ParamRegistry::new();
        let fields = vec![(0, 1), (1, 1), (2, 3)];
        let x = reg.add("x", 4, 5, ParamKind::Dense, Init::Uniform { limit: 1.0 });
        let w1 = reg.add("w1", 2, 3, ParamKind::Dense, Init::Uniform { limit: 1.0 });
        let b1 = reg.add("b1", 1, 2, ParamKind::Dense, Init::Zeros);
        let w2 = reg.add("w2", 3, 2, ParamKind::Dense, Init::Uniform { limit: 1.0 });
        let b2 = reg.add("b2", 1, 3, ParamKind::Dense, Init::Zeros);
        reg.init_params(&mut rng);
        let proj = random_proj(4, 5, &mut rng);
        let f2 = fields.clone();
        let err = grad_check(&mut reg, &[x, w1, b1, w2, b2], FD_STEP, move |tape| {
            let xn = tape.param(x);
            let s = tape.field_mean(xn, &f2);
            let (w1n, b1n) = (tape.param(w1), tape.param(b1));
            let h = tape.linear(s, w1n, b1n).unwrap();
            let h = tape.relu(h);
            let (w2n, b2n) = (tape.param(w2), tape.param(b2));
            let z = tape.linear(h, w2n, b2n).unwrap();
            let a = tape.sigmoid(z);
            let gates = tape.scale(a, 2.0);
            let y = tape.scale_fields(xn, gates, &f2);
            tape.proj_sum(y, proj.clone())
        });
        assert!(err <= 1e-4, "field-op grad check failed: {err}");
    }

    #[test]
    fn row_ops_within_1e4() {
        let mut rng = Rng::new(6);
        let mut reg = ParamRegistry::new();
        let a = reg.add("a", 5, 4, ParamKind::Dense, Init::Uniform { limit: 1.0 });
        let b = reg.add("b", 5, 4, ParamKind::Dense, Init::Uniform { limit: 1.0 });
        reg.init_params(&mut rng);
        let proj = random_proj(5, 1, &mut rng);
        let err = grad_check(&mut reg, &[a, b], FD_STEP, |tape| {
            let an = tape.param(a);
            let bn = tape.param(b);
            let odd = tape.gather_rows(an, &[1, 3]);
            let even = tape.gather_rows(an, &[0, 2, 4]);
            let back = tape.assemble_rows(&[(odd, vec![1, 3]), (even, vec![0, 2, 4])], 5);
            let d = tape.row_dot(back, bn);
            tape.proj_sum(d, proj.clone())
        });
        assert!(err <= 1e-6, "row-op grad check failed: {err}");
    }

    #[test]
    fn corrupted_backward_is_detected() {
        let mut rng = Rng::new(7);
        let mut reg = ParamRegistry::new();
        let x = reg.add("x", 2, 3, ParamKind::Dense, Init::Uniform { limit: 1.0 });
        let w = reg.add("w", 3, 3, ParamKind::Dense, Init::Uniform { limit: 1.0 });
        let b = reg.add("b", 1, 3, ParamKind::Dense, Init::Zeros);
        reg.init_params(&mut rng);
        let proj = random_proj(2, 3, &mut rng);
        let f = |tape: &mut Tape| -> NodeId {
            let (xn, wn, bn) = (tape.param(x), tape.param(w), tape.param(b));
            let y = tape.linear(xn, wn, bn).unwrap();
            let y = tape.leaky_relu(y, 0.2);
            tape.proj_sum(y, proj.clone())
        };
        let mut analytic = analytic_grads(&mut reg, &[x, w], &f);
        let numeric = numeric_grads(&mut reg, &[x, w], FD_STEP, &f);
        assert!(max_rel_err(&analytic, &numeric) <= 1e-6);
        // scale one analytic coordinate by 2: the harness must notice
        let v = analytic[1].at(0, 0) * 2.0;
        analytic[1].set(0, 0, v);
        assert!(max_rel_err(&analytic, &numeric) > 1e-2);
    }
}
