//! Reverse-mode autodiff on a Wengert list. Builder methods evaluate eagerly,
//! record one op per node, and `backward` replays the list in reverse,
//! accumulating parameter gradients into the owning registry.
//!
//! Everything runs batched: node values are `Tensor2` with one example per
//! row, so a single tape covers a whole mini-batch.

use super::params::{ParamKind, ParamRegistry, SlotId};
use super::tensor::{gemm_acc, Tensor2, Trans};
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Batch-norm execution mode. Gradient checks run `Train { update_stats:
/// false }` so repeated forwards see identical statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train { update_stats: bool },
    Infer,
}

enum Op {
    Const,
    Param { slot: SlotId },
    /// y = a . w^T
    MatMulNT { a: NodeId, w: NodeId },
    /// y = a . b
    MatMulNN { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, k: f64 },
    /// y = a + bias with bias broadcast across rows
    AddRow { a: NodeId, bias: NodeId },
    LeakyRelu { a: NodeId, slope: f64 },
    Relu { a: NodeId },
    Sigmoid { a: NodeId },
    SoftmaxRows { a: NodeId },
    LayerNorm { a: NodeId, gamma: NodeId, beta: NodeId, xhat: Tensor2, inv: Vec<f64> },
    BatchNorm { a: NodeId, inv: Vec<f64>, train: bool },
    /// y.row(i) = a.row(idx[i]); doubles as embedding lookup and row selection
    GatherRows { a: NodeId, idx: Vec<usize> },
    /// inverse of a set of gathers: y.row(idx[i]) = part.row(i)
    AssembleRows { parts: Vec<(NodeId, Vec<usize>)> },
    ConcatCols { parts: Vec<NodeId> },
    SliceCols { a: NodeId, start: usize },
    /// s[b,f] = mean of field f's slice of row b
    FieldMean { a: NodeId, fields: Vec<(usize, usize)> },
    /// y[b,j] = a[b,j] * g[b, field(j)]
    ScaleFields { a: NodeId, g: NodeId, fields: Vec<(usize, usize)> },
    /// y = Σ_e gate[:,e] ⊙ expert_e
    MixExperts { experts: Vec<NodeId>, gate: NodeId },
    /// y[b,0] = Σ_j a[b,j]·b[b,j]
    RowDot { a: NodeId, b: NodeId },
    Clamp { a: NodeId, lo: f64, hi: f64 },
    /// scalar Σ a ⊙ w; reduction used by gradient checks
    ProjSum { a: NodeId, w: Tensor2 },
    /// scalar weight·Σ_b mask_b·KL(p_b ‖ q_b) over Bernoulli pairs
    KlSum { q: NodeId, p: Tensor2, mask: Tensor2, weight: f64 },
}

pub struct Tape<'a> {
    reg: &'a mut ParamRegistry,
    values: Vec<Tensor2>,
    ops: Vec<Op>,
}

impl<'a> Tape<'a> {
    pub fn new(reg: &'a mut ParamRegistry) -> Self {
        Tape { reg, values: Vec::new(), ops: Vec::new() }
    }

    pub fn value(&self, n: NodeId) -> &Tensor2 {
        &self.values[n.0]
    }

    pub fn registry(&self) -> &ParamRegistry {
        self.reg
    }

    fn push(&mut self, v: Tensor2, op: Op) -> NodeId {
        self.values.push(v);
        self.ops.push(op);
        NodeId(self.values.len() - 1)
    }

    // ── graph construction ──────────────────────────────────────────────

    pub fn constant(&mut self, t: Tensor2) -> NodeId {
        self.push(t, Op::Const)
    }

    pub fn param(&mut self, slot: SlotId) -> NodeId {
        let s = self.reg.slot(slot);
        assert!(s.kind != ParamKind::State, "state slot {} used as weight", s.name);
        let v = s.value.clone();
        self.push(v, Op::Param { slot })
    }

    pub fn matmul_nt(&mut self, a: NodeId, w: NodeId) -> NodeId {
        let v = super::tensor::matmul_nt(self.value(a), self.value(w));
        self.push(v, Op::MatMulNT { a, w })
    }

    pub fn matmul_nn(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = super::tensor::matmul_nn(self.value(a), self.value(b));
        self.push(v, Op::MatMulNN { a, b })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        debug_assert!(ta.same_shape(tb));
        let mut v = ta.clone();
        v.axpy(1.0, tb);
        self.push(v, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        debug_assert!(ta.same_shape(tb));
        let mut v = ta.clone();
        for (x, y) in v.data_mut().iter_mut().zip(tb.data().iter()) {
            *x *= y;
        }
        self.push(v, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.value(a).map(|x| k * x);
        self.push(v, Op::Scale { a, k })
    }

    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(bias));
        debug_assert_eq!(tb.rows(), 1);
        debug_assert_eq!(ta.cols(), tb.cols());
        let mut v = ta.clone();
        for r in 0..v.rows() {
            for (x, y) in v.row_mut(r).iter_mut().zip(tb.row(0).iter()) {
                *x += y;
            }
        }
        self.push(v, Op::AddRow { a, bias })
    }

    /// y = x . W^T + b with W stored [out x in].
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tx.cols() != tw.cols() || tb.rows() != 1 || tb.cols() != tw.rows() {
            return Err(Error::Config(format!(
                "linear shape mismatch: x {}x{}, W {}x{}, b {}x{}",
                tx.rows(),
                tx.cols(),
                tw.rows(),
                tw.cols(),
                tb.rows(),
                tb.cols()
            )));
        }
        let h = self.matmul_nt(x, w);
        Ok(self.add_row(h, b))
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        debug_assert!(slope > 0.0 && slope < 1.0);
        let v = self.value(a).map(|x| if x >= 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu { a, slope })
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu { a })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid_scalar);
        self.push(v, Op::Sigmoid { a })
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let mut v = ta.clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        self.push(v, Op::SoftmaxRows { a })
    }

    /// Row-wise layer norm with affine parameters (1 x d each).
    pub fn layer_norm(&mut self, a: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        let d = ta.cols();
        if d < 2 {
            return Err(Error::Config(format!("layer_norm needs width >= 2, got {d}")));
        }
        debug_assert_eq!(self.value(gamma).cols(), d);
        debug_assert_eq!(self.value(beta).cols(), d);
        let rows = ta.rows();
        let mut xhat = Tensor2::zeros(rows, d);
        let mut inv = vec![0.0; rows];
        for r in 0..rows {
            let row = ta.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let iv = 1.0 / (var + LN_EPS).sqrt();
            inv[r] = iv;
            for (c, x) in row.iter().enumerate() {
                xhat.set(r, c, (x - mean) * iv);
            }
        }
        let g = self.value(gamma).row(0).to_vec();
        let bb = self.value(beta).row(0).to_vec();
        let mut y = xhat.clone();
        for r in 0..rows {
            for (c, x) in y.row_mut(r).iter_mut().enumerate() {
                *x = g[c] * *x + bb[c];
            }
        }
        Ok(self.push(y, Op::LayerNorm { a, gamma, beta, xhat, inv }))
    }

    /// Per-column batch norm without affine terms. `mean_slot` / `var_slot`
    /// are 1 x d state slots holding running statistics; train mode uses the
    /// batch statistics (population variance) and optionally folds them into
    /// the running stats with momentum 0.1.
    pub fn batch_norm(
        &mut self,
        a: NodeId,
        mean_slot: SlotId,
        var_slot: SlotId,
        mode: BnMode,
    ) -> Result<NodeId> {
        let ta = self.value(a).clone();
        let (rows, cols) = (ta.rows(), ta.cols());
        debug_assert_eq!(self.reg.value(mean_slot).cols(), cols);
        debug_assert_eq!(self.reg.value(var_slot).cols(), cols);
        match mode {
            BnMode::Train { update_stats } => {
                if rows < 2 {
                    return Err(Error::Data(format!(
                        "batch_norm in train mode needs batch size >= 2, got {rows}"
                    )));
                }
                let mut mean = vec![0.0; cols];
                let mut var = vec![0.0; cols];
                for r in 0..rows {
                    for (c, x) in ta.row(r).iter().enumerate() {
                        mean[c] += x;
                    }
                }
                for m in mean.iter_mut() {
                    *m /= rows as f64;
                }
                for r in 0..rows {
                    for (c, x) in ta.row(r).iter().enumerate() {
                        let d = x - mean[c];
                        var[c] += d * d;
                    }
                }
                for v in var.iter_mut() {
                    *v /= rows as f64;
                }
                let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                if update_stats {
                    let rm = self.reg.slot_mut(mean_slot);
                    for (c, x) in rm.value.row_mut(0).iter_mut().enumerate() {
                        *x = (1.0 - BN_MOMENTUM) * *x + BN_MOMENTUM * mean[c];
                    }
                    let rv = self.reg.slot_mut(var_slot);
                    for (c, x) in rv.value.row_mut(0).iter_mut().enumerate() {
                        *x = (1.0 - BN_MOMENTUM) * *x + BN_MOMENTUM * var[c];
                    }
                }
                let mut y = ta;
                for r in 0..rows {
                    for (c, x) in y.row_mut(r).iter_mut().enumerate() {
                        *x = (*x - mean[c]) * inv[c];
                    }
                }
                Ok(self.push(y, Op::BatchNorm { a, inv, train: true }))
            }
            BnMode::Infer => {
                let mean = self.reg.value(mean_slot).row(0).to_vec();
                let inv: Vec<f64> = self
                    .reg
                    .value(var_slot)
                    .row(0)
                    .iter()
                    .map(|v| 1.0 / (v + BN_EPS).sqrt())
                    .collect();
                let mut y = ta;
                for r in 0..rows {
                    for (c, x) in y.row_mut(r).iter_mut().enumerate() {
                        *x = (*x - mean[c]) * inv[c];
                    }
                }
                Ok(self.push(y, Op::BatchNorm { a, inv, train: false }))
            }
        }
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> NodeId {
        let ta = self.value(a);
        let mut v = Tensor2::zeros(idx.len(), ta.cols());
        for (i, &r) in idx.iter().enumerate() {
            v.row_mut(i).copy_from_slice(ta.row(r));
        }
        self.push(v, Op::GatherRows { a, idx: idx.to_vec() })
    }

    /// Scatters row groups back into one batch: output row idx[i] of each
    /// part comes from part row i. Every output row must be written once.
    pub fn assemble_rows(&mut self, parts: &[(NodeId, Vec<usize>)], rows: usize) -> NodeId {
        let cols = self.value(parts[0].0).cols();
        let mut v = Tensor2::zeros(rows, cols);
        let mut seen = vec![false; rows];
        for (node, idx) in parts {
            let t = self.value(*node);
            debug_assert_eq!(t.rows(), idx.len());
            debug_assert_eq!(t.cols(), cols);
            for (i, &r) in idx.iter().enumerate() {
                debug_assert!(!seen[r], "row {r} assembled twice");
                seen[r] = true;
                v.row_mut(r).copy_from_slice(t.row(i));
            }
        }
        debug_assert!(seen.iter().all(|&s| s), "assemble_rows left gaps");
        self.push(v, Op::AssembleRows { parts: parts.to_vec() })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Tensor2::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            debug_assert_eq!(t.rows(), rows);
            for r in 0..rows {
                v.row_mut(r)[off..off + t.cols()].copy_from_slice(t.row(r));
            }
            off += t.cols();
        }
        self.push(v, Op::ConcatCols { parts: parts.to_vec() })
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let ta = self.value(a);
        debug_assert!(start + len <= ta.cols());
        let mut v = Tensor2::zeros(ta.rows(), len);
        for r in 0..ta.rows() {
            v.row_mut(r).copy_from_slice(&ta.row(r)[start..start + len]);
        }
        self.push(v, Op::SliceCols { a, start })
    }

    /// One mean per (row, field): the squeeze step of the SE block.
    pub fn field_mean(&mut self, a: NodeId, fields: &[(usize, usize)]) -> NodeId {
        let ta = self.value(a);
        let mut v = Tensor2::zeros(ta.rows(), fields.len());
        for r in 0..ta.rows() {
            let row = ta.row(r);
            for (f, &(off, len)) in fields.iter().enumerate() {
                let s: f64 = row[off..off + len].iter().sum();
                v.set(r, f, s / len as f64);
            }
        }
        self.push(v, Op::FieldMean { a, fields: fields.to_vec() })
    }

    /// Rescales each field slice by its per-row gate: the excite step.
    pub fn scale_fields(&mut self, a: NodeId, g: NodeId, fields: &[(usize, usize)]) -> NodeId {
        let (ta, tg) = (self.value(a), self.value(g));
        debug_assert_eq!(tg.cols(), fields.len());
        debug_assert_eq!(tg.rows(), ta.rows());
        let mut v = ta.clone();
        for r in 0..v.rows() {
            for (f, &(off, len)) in fields.iter().enumerate() {
                let gate = tg.at(r, f);
                for x in &mut v.row_mut(r)[off..off + len] {
                    *x *= gate;
                }
            }
        }
        self.push(v, Op::ScaleFields { a, g, fields: fields.to_vec() })
    }

    /// Convex mix of expert outputs: y[b,:] = Σ_e gate[b,e] · expert_e[b,:].
    pub fn mix_experts(&mut self, experts: &[NodeId], gate: NodeId) -> NodeId {
        let tg = self.value(gate);
        debug_assert_eq!(tg.cols(), experts.len());
        let first = self.value(experts[0]);
        let (rows, cols) = (first.rows(), first.cols());
        let mut v = Tensor2::zeros(rows, cols);
        for (e, &x) in experts.iter().enumerate() {
            let tx = self.value(x);
            debug_assert_eq!(tx.rows(), rows);
            debug_assert_eq!(tx.cols(), cols);
            for r in 0..rows {
                let w = self.value(gate).at(r, e);
                for (y, xv) in v.row_mut(r).iter_mut().zip(tx.row(r).iter()) {
                    *y += w * xv;
                }
            }
        }
        self.push(v, Op::MixExperts { experts: experts.to_vec(), gate })
    }

    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        debug_assert!(ta.same_shape(tb));
        let mut v = Tensor2::zeros(ta.rows(), 1);
        for r in 0..ta.rows() {
            let s: f64 = ta.row(r).iter().zip(tb.row(r).iter()).map(|(x, y)| x * y).sum();
            v.set(r, 0, s);
        }
        self.push(v, Op::RowDot { a, b })
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp { a, lo, hi })
    }

    /// Scalar projection Σ a ⊙ w; gradient-check harness reduction.
    pub fn proj_sum(&mut self, a: NodeId, w: Tensor2) -> NodeId {
        let ta = self.value(a);
        debug_assert!(ta.same_shape(&w));
        let s: f64 = ta.data().iter().zip(w.data().iter()).map(|(x, y)| x * y).sum();
        self.push(Tensor2::filled(1, 1, s), Op::ProjSum { a, w })
    }

    /// weight · Σ_b mask_b · KL(p_b ‖ q_b) for Bernoulli distributions, with
    /// q the predicted (student) probability column and p the teacher's.
    pub fn kl_sum(&mut self, q: NodeId, p: Tensor2, mask: Tensor2, weight: f64) -> NodeId {
        let tq = self.value(q);
        debug_assert_eq!(tq.cols(), 1);
        debug_assert!(tq.same_shape(&p) && tq.same_shape(&mask));
        let mut s = 0.0;
        for r in 0..tq.rows() {
            let m = mask.at(r, 0);
            if m == 0.0 {
                continue;
            }
            let (pp, qq) = (p.at(r, 0), tq.at(r, 0));
            s += m * (pp * (pp / qq).ln() + (1.0 - pp) * ((1.0 - pp) / (1.0 - qq)).ln());
        }
        self.push(Tensor2::filled(1, 1, weight * s), Op::KlSum { q, p, mask, weight })
    }

    // ── reverse pass ────────────────────────────────────────────────────

    /// Backpropagates from a scalar loss node, consuming the tape and adding
    /// parameter gradients into the registry's grad buffers.
    pub fn backward(mut self, loss: NodeId) {
        let values = std::mem::take(&mut self.values);
        let ops = std::mem::take(&mut self.ops);
        assert_eq!(values[loss.0].len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor2>> = (0..values.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor2::filled(1, 1, 1.0));

        for i in (0..ops.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &ops[i] {
                Op::Const => {}
                Op::Param { slot } => {
                    self.reg.slot_mut(*slot).grad.axpy(1.0, &g);
                }
                Op::MatMulNT { a, w } => {
                    // y = a.w^T: da += g.w, dw += g^T.a
                    gemm_acc(grad_of(&mut grads, &values, *a), Trans::No, &g, Trans::No, &values[w.0], 1.0);
                    gemm_acc(grad_of(&mut grads, &values, *w), Trans::Yes, &g, Trans::No, &values[a.0], 1.0);
                }
                Op::MatMulNN { a, b } => {
                    gemm_acc(grad_of(&mut grads, &values, *a), Trans::No, &g, Trans::Yes, &values[b.0], 1.0);
                    gemm_acc(grad_of(&mut grads, &values, *b), Trans::Yes, &values[a.0], Trans::No, &g, 1.0);
                }
                Op::Add { a, b } => {
                    grad_of(&mut grads, &values, *a).axpy(1.0, &g);
                    grad_of(&mut grads, &values, *b).axpy(1.0, &g);
                }
                Op::Mul { a, b } => {
                    {
                        let da = grad_of(&mut grads, &values, *a);
                        for ((d, gv), bv) in da.data_mut().iter_mut().zip(g.data()).zip(values[b.0].data()) {
                            *d += gv * bv;
                        }
                    }
                    let db = grad_of(&mut grads, &values, *b);
                    for ((d, gv), av) in db.data_mut().iter_mut().zip(g.data()).zip(values[a.0].data()) {
                        *d += gv * av;
                    }
                }
                Op::Scale { a, k } => {
                    grad_of(&mut grads, &values, *a).axpy(*k, &g);
                }
                Op::AddRow { a, bias } => {
                    grad_of(&mut grads, &values, *a).axpy(1.0, &g);
                    let db = grad_of(&mut grads, &values, *bias);
                    for r in 0..g.rows() {
                        for (d, gv) in db.row_mut(0).iter_mut().zip(g.row(r)) {
                            *d += gv;
                        }
                    }
                }
                Op::LeakyRelu { a, slope } => {
                    let da = grad_of(&mut grads, &values, *a);
                    for ((d, gv), xv) in da.data_mut().iter_mut().zip(g.data()).zip(values[a.0].data()) {
                        *d += gv * if *xv >= 0.0 { 1.0 } else { *slope };
                    }
                }
                Op::Relu { a } => {
                    let da = grad_of(&mut grads, &values, *a);
                    for ((d, gv), xv) in da.data_mut().iter_mut().zip(g.data()).zip(values[a.0].data()) {
                        *d += gv * if *xv > 0.0 { 1.0 } else { 0.0 };
                    }
                }
                Op::Sigmoid { a } => {
                    // dy/dx = y(1-y) from the stored output
                    let y = &values[i];
                    let da = grad_of(&mut grads, &values, *a);
                    for ((d, gv), yv) in da.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *d += gv * yv * (1.0 - yv);
                    }
                }
                Op::SoftmaxRows { a } => {
                    // dx = y ⊙ (g − Σ_k g_k y_k)
                    let y = &values[i];
                    let da = grad_of(&mut grads, &values, *a);
                    for r in 0..y.rows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(gv, yv)| gv * yv).sum();
                        for ((d, gv), yv) in da.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *d += yv * (gv - dot);
                        }
                    }
                }
                Op::LayerNorm { a, gamma, beta, xhat, inv } => {
                    let d = xhat.cols() as f64;
                    let gvec = values[gamma.0].row(0).to_vec();
                    {
                        let da = grad_of(&mut grads, &values, *a);
                        for r in 0..xhat.rows() {
                            // dxhat = g ⊙ gamma; dx = inv·(dxhat − mean(dxhat)
                            //         − xhat·mean(dxhat ⊙ xhat))
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for c in 0..xhat.cols() {
                                let dxh = g.at(r, c) * gvec[c];
                                m1 += dxh;
                                m2 += dxh * xhat.at(r, c);
                            }
                            m1 /= d;
                            m2 /= d;
                            for (c, dv) in da.row_mut(r).iter_mut().enumerate() {
                                let dxh = g.at(r, c) * gvec[c];
                                *dv += inv[r] * (dxh - m1 - xhat.at(r, c) * m2);
                            }
                        }
                    }
                    {
                        let dg = grad_of(&mut grads, &values, *gamma);
                        for r in 0..xhat.rows() {
                            for (c, dv) in dg.row_mut(0).iter_mut().enumerate() {
                                *dv += g.at(r, c) * xhat.at(r, c);
                            }
                        }
                    }
                    let db = grad_of(&mut grads, &values, *beta);
                    for r in 0..xhat.rows() {
                        for (c, dv) in db.row_mut(0).iter_mut().enumerate() {
                            *dv += g.at(r, c);
                        }
                    }
                }
                Op::BatchNorm { a, inv, train } => {
                    let y = &values[i];
                    let n = y.rows() as f64;
                    let da = grad_of(&mut grads, &values, *a);
                    if *train {
                        // dx = inv/n · (n·g − Σ_b g − y·Σ_b g⊙y) per column
                        let cols = y.cols();
                        let mut s1 = vec![0.0; cols];
                        let mut s2 = vec![0.0; cols];
                        for r in 0..y.rows() {
                            for c in 0..cols {
                                s1[c] += g.at(r, c);
                                s2[c] += g.at(r, c) * y.at(r, c);
                            }
                        }
                        for r in 0..y.rows() {
                            for (c, dv) in da.row_mut(r).iter_mut().enumerate() {
                                *dv += inv[c] / n * (n * g.at(r, c) - s1[c] - y.at(r, c) * s2[c]);
                            }
                        }
                    } else {
                        for r in 0..y.rows() {
                            for (c, dv) in da.row_mut(r).iter_mut().enumerate() {
                                *dv += g.at(r, c) * inv[c];
                            }
                        }
                    }
                }
                Op::GatherRows { a, idx } => {
                    let da = grad_of(&mut grads, &values, *a);
                    for (i, &r) in idx.iter().enumerate() {
                        for (d, gv) in da.row_mut(r).iter_mut().zip(g.row(i)) {
                            *d += gv;
                        }
                    }
                }
                Op::AssembleRows { parts } => {
                    for (node, idx) in parts {
                        let dp = grad_of(&mut grads, &values, *node);
                        for (i, &r) in idx.iter().enumerate() {
                            for (d, gv) in dp.row_mut(i).iter_mut().zip(g.row(r)) {
                                *d += gv;
                            }
                        }
                    }
                }
                Op::ConcatCols { parts } => {
                    let mut off = 0;
                    for &p in parts {
                        let w = values[p.0].cols();
                        let dp = grad_of(&mut grads, &values, p);
                        for r in 0..g.rows() {
                            for (d, gv) in dp.row_mut(r).iter_mut().zip(&g.row(r)[off..off + w]) {
                                *d += gv;
                            }
                        }
                        off += w;
                    }
                }
                Op::SliceCols { a, start } => {
                    let w = g.cols();
                    let da = grad_of(&mut grads, &values, *a);
                    for r in 0..g.rows() {
                        for (d, gv) in da.row_mut(r)[*start..start + w].iter_mut().zip(g.row(r)) {
                            *d += gv;
                        }
                    }
                }
                Op::FieldMean { a, fields } => {
                    let da = grad_of(&mut grads, &values, *a);
                    for r in 0..g.rows() {
                        for (f, &(off, len)) in fields.iter().enumerate() {
                            let share = g.at(r, f) / len as f64;
                            for d in &mut da.row_mut(r)[off..off + len] {
                                *d += share;
                            }
                        }
                    }
                }
                Op::ScaleFields { a, g: gate, fields } => {
                    let (xa, xg) = (&values[a.0], &values[gate.0]);
                    {
                        let da = grad_of(&mut grads, &values, *a);
                        for r in 0..g.rows() {
                            for (f, &(off, len)) in fields.iter().enumerate() {
                                let gv = xg.at(r, f);
                                for (d, gg) in da.row_mut(r)[off..off + len]
                                    .iter_mut()
                                    .zip(&g.row(r)[off..off + len])
                                {
                                    *d += gg * gv;
                                }
                            }
                        }
                    }
                    let dg = grad_of(&mut grads, &values, *gate);
                    for r in 0..g.rows() {
                        for (f, &(off, len)) in fields.iter().enumerate() {
                            let s: f64 = g.row(r)[off..off + len]
                                .iter()
                                .zip(&xa.row(r)[off..off + len])
                                .map(|(gg, xx)| gg * xx)
                                .sum();
                            *dg.row_mut(r).get_mut(f).unwrap() += s;
                        }
                    }
                }
                Op::MixExperts { experts, gate } => {
                    let tg = values[gate.0].clone();
                    for (e, &x) in experts.iter().enumerate() {
                        let dx = grad_of(&mut grads, &values, x);
                        for r in 0..g.rows() {
                            let w = tg.at(r, e);
                            for (d, gv) in dx.row_mut(r).iter_mut().zip(g.row(r)) {
                                *d += w * gv;
                            }
                        }
                    }
                    let dg = grad_of(&mut grads, &values, *gate);
                    for (e, &x) in experts.iter().enumerate() {
                        let tx = &values[x.0];
                        for r in 0..g.rows() {
                            let s: f64 = g.row(r).iter().zip(tx.row(r)).map(|(gv, xv)| gv * xv).sum();
                            *dg.row_mut(r).get_mut(e).unwrap() += s;
                        }
                    }
                }
                Op::RowDot { a, b } => {
                    {
                        let da = grad_of(&mut grads, &values, *a);
                        for r in 0..g.rows() {
                            let gv = g.at(r, 0);
                            for (d, bv) in da.row_mut(r).iter_mut().zip(values[b.0].row(r)) {
                                *d += gv * bv;
                            }
                        }
                    }
                    let db = grad_of(&mut grads, &values, *b);
                    for r in 0..g.rows() {
                        let gv = g.at(r, 0);
                        for (d, av) in db.row_mut(r).iter_mut().zip(values[a.0].row(r)) {
                            *d += gv * av;
                        }
                    }
                }
                Op::Clamp { a, lo, hi } => {
                    let da = grad_of(&mut grads, &values, *a);
                    for ((d, gv), xv) in da.data_mut().iter_mut().zip(g.data()).zip(values[a.0].data()) {
                        if *xv > *lo && *xv < *hi {
                            *d += gv;
                        }
                    }
                }
                Op::ProjSum { a, w } => {
                    let s = g.scalar();
                    grad_of(&mut grads, &values, *a).axpy(s, w);
                }
                Op::KlSum { q, p, mask, weight } => {
                    // d/dq KL(p‖q) = (1−p)/(1−q) − p/q
                    let s = g.scalar() * weight;
                    let tq = &values[q.0];
                    let dq = grad_of(&mut grads, &values, *q);
                    for r in 0..p.rows() {
                        let m = mask.at(r, 0);
                        if m == 0.0 {
                            continue;
                        }
                        let (pp, qq) = (p.at(r, 0), tq.at(r, 0));
                        let d = (1.0 - pp) / (1.0 - qq) - pp / qq;
                        *dq.row_mut(r).get_mut(0).unwrap() += s * m * d;
                    }
                }
            }
        }
    }
}

fn grad_of<'g>(grads: &'g mut [Option<Tensor2>], values: &[Tensor2], id: NodeId) -> &'g mut Tensor2 {
    let slot = &mut grads[id.0];
    if slot.is_none() {
        *slot = Some(Tensor2::zeros(values[id.0].rows(), values[id.0].cols()));
    }
    slot.as_mut().unwrap()
}

pub fn sigmoid_scalar(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::params::Init;

    fn reg_with(name: &str, rows: usize, cols: usize, data: Vec<f64>) -> (ParamRegistry, SlotId) {
        let mut reg = ParamRegistry::new();
        let id = reg.add(name, rows, cols, ParamKind::Dense, Init::Zeros);
        reg.slot_mut(id).value = Tensor2::from_vec(rows, cols, data).unwrap();
        (reg, id)
    }

    #[test]
    fn linear_identity_and_zero_and_hand_case() {
        let mut reg = ParamRegistry::new();
        let w_id = reg.add("w", 2, 2, ParamKind::Dense, Init::Zeros);
        let b_id = reg.add("b", 1, 2, ParamKind::Dense, Init::Zeros);

        // identity weights, zero bias
        reg.slot_mut(w_id).value = Tensor2::identity(2);
        let mut tape = Tape::new(&mut reg);
        let x = tape.constant(Tensor2::row_vector(&[1.0, 2.0]));
        let (w, b) = (tape.param(w_id), tape.param(b_id));
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).row(0), &[1.0, 2.0]);
        drop(tape);

        // zero weights: output is the bias
        reg.slot_mut(w_id).value = Tensor2::zeros(2, 2);
        reg.slot_mut(b_id).value = Tensor2::row_vector(&[3.0, 3.0]);
        let mut tape = Tape::new(&mut reg);
        let x = tape.constant(Tensor2::row_vector(&[-5.0, 9.0]));
        let (w, b) = (tape.param(w_id), tape.param(b_id));
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).row(0), &[3.0, 3.0]);
        drop(tape);

        // x=[1,2], W=[[1,1],[0,2]], b=[1,0] -> [4,4]
        reg.slot_mut(w_id).value = Tensor2::from_vec(2, 2, vec![1.0, 1.0, 0.0, 2.0]).unwrap();
        reg.slot_mut(b_id).value = Tensor2::row_vector(&[1.0, 0.0]);
        let mut tape = Tape::new(&mut reg);
        let x = tape.constant(Tensor2::row_vector(&[1.0, 2.0]));
        let (w, b) = (tape.param(w_id), tape.param(b_id));
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).row(0), &[4.0, 4.0]);
    }

    #[test]
    fn linear_rejects_shape_mismatch() {
        let (mut reg, w_id) = reg_with("w", 2, 3, vec![0.0; 6]);
        let b_id = reg.add("b", 1, 2, ParamKind::Dense, Init::Zeros);
        let mut tape = Tape::new(&mut reg);
        let x = tape.constant(Tensor2::row_vector(&[1.0, 2.0])); // needs 3 inputs
        let (w, b) = (tape.param(w_id), tape.param(b_id));
        assert!(tape.linear(x, w, b).is_err());
    }

    #[test]
    fn leaky_relu_values() {
        let mut reg = ParamRegistry::new();
        let mut tape = Tape::new(&mut reg);
        let x = tape.constant(Tensor2::row_vector(&[3.0, -1.0, 0.0]));
        let y = tape.leaky_relu(x, 0.2);
        assert_eq!(tape.value(y).row(0), &[3.0, -0.2, 0.0]);
    }

    #[test]
    fn layer_norm_examples() {
        let mut reg = ParamRegistry::new();
        let g1 = reg.add("g", 1, 3, ParamKind::Dense, Init::Ones);
        let b0 = reg.add("b", 1, 3, ParamKind::Dense, Init::Zeros);
        reg.init_params(&mut crate::numkernel::rng::Rng::new(0));

        // constant input collapses to beta
        let mut tape = Tape::new(&mut reg);
        let x = tape.constant(Tensor2::row_vector(&[4.2, 4.2, 4.2]));
        let (g, b) = (tape.param(g1), tape.param(b0));
        let y = tape.layer_norm(x, g, b).unwrap();
        assert!(tape.value(y).row(0).iter().all(|v| v.abs() < 1e-10));
        drop(tape);

        // [1,-1]: mean 0 variance 1
        let mut reg2 = ParamRegistry::new();
        let g2 = reg2.add("g", 1, 2, ParamKind::Dense, Init::Ones);
        let b2 = reg2.add("b", 1, 2, ParamKind::Dense, Init::Zeros);
        reg2.init_params(&mut crate::numkernel::rng::Rng::new(0));
        let mut tape = Tape::new(&mut reg2);
        let x = tape.constant(Tensor2::row_vector(&[1.0, -1.0]));
        let (g, b) = (tape.param(g2), tape.param(b2));
        let y = tape.layer_norm(x, g, b).unwrap();
        assert!((tape.value(y).at(0, 0) - 1.0).abs() < 1e-4);
        assert!((tape.value(y).at(0, 1) + 1.0).abs() < 1e-4);
        drop(tape);

        // affine of the previous case: gamma=2, beta=1 -> [3,-1]
        reg2.slot_mut(g2).value = Tensor2::row_vector(&[2.0, 2.0]);
        reg2.slot_mut(b2).value = Tensor2::row_vector(&[1.0, 1.0]);
        let mut tape = Tape::new(&mut reg2);
        let x = tape.constant(Tensor2::row_vector(&[1.0, -1.0]));
        let (g, b) = (tape.param(g2), tape.param(b2));
        let y = tape.layer_norm(x, g, b).unwrap();
        assert!((tape.value(y).at(0, 0) - 3.0).abs() < 1e-4);
        assert!((tape.value(y).at(0, 1) + 1.0).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_zero_mean_when_beta_zero() {
        let mut reg = ParamRegistry::new();
        let g = reg.add("g", 1, 8, ParamKind::Dense, Init::Ones);
        let b = reg.add("b", 1, 8, ParamKind::Dense, Init::Zeros);
        reg.init_params(&mut crate::numkernel::rng::Rng::new(0));
        let mut rng = crate::numkernel::rng::Rng::new(11);
        let mut tape = Tape::new(&mut reg);
        let mut x = Tensor2::zeros(5, 8);
        for v in x.data_mut() {
            *v = rng.normal() * 3.0 + 1.0;
        }
        let xn = tape.constant(x);
        let (gn, bn) = (tape.param(g), tape.param(b));
        let y = tape.layer_norm(xn, gn, bn).unwrap();
        for r in 0..5 {
            let mean: f64 = tape.value(y).row(r).iter().sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-10);
        }
    }

    #[test]
    fn layer_norm_rejects_width_one() {
        let mut reg = ParamRegistry::new();
        let g = reg.add("g", 1, 1, ParamKind::Dense, Init::Ones);
        let b = reg.add("b", 1, 1, ParamKind::Dense, Init::Zeros);
        let mut tape = Tape::new(&mut reg);
        let x = tape.constant(Tensor2::row_vector(&[1.0]));
        let (gn, bn) = (tape.param(g), tape.param(b));
        assert!(tape.layer_norm(x, gn, bn).is_err());
    }

    #[test]
    fn batch_norm_examples() {
        let mut reg = ParamRegistry::new();
        let m = reg.add("m", 1, 1, ParamKind::State, Init::Zeros);
        let v = reg.add("v", 1, 1, ParamKind::State, Init::Ones);
        reg.init_params(&mut crate::numkernel::rng::Rng::new(0));

        // constant batch normalizes to zero exactly
        let mut tape = Tape::new(&mut reg);
        let x = tape.constant(Tensor2::col_vector(&[5.0, 5.0, 5.0, 5.0]));
        let y = tape.batch_norm(x, m, v, BnMode::Train { update_stats: false }).unwrap();
        assert!(tape.value(y).data().iter().all(|&t| t == 0.0));
        drop(tape);

        // [0,2]: mean 1, population std 1
        let mut tape = Tape::new(&mut reg);
        let x = tape.constant(Tensor2::col_vector(&[0.0, 2.0]));
        let y = tape.batch_norm(x, m, v, BnMode::Train { update_stats: false }).unwrap();
        assert!((tape.value(y).at(0, 0) + 1.0).abs() < 1e-4);
        assert!((tape.value(y).at(1, 0) - 1.0).abs() < 1e-4);
        drop(tape);

        // infer with identity stats is (nearly) the identity
        let mut tape = Tape::new(&mut reg);
        let x = tape.constant(Tensor2::col_vector(&[7.0]));
        let y = tape.batch_norm(x, m, v, BnMode::Infer).unwrap();
        assert!((tape.value(y).at(0, 0) - 7.0).abs() < 1e-3);
        drop(tape);

        // train batches below two are rejected
        let mut tape = Tape::new(&mut reg);
        let x = tape.constant(Tensor2::col_vector(&[7.0]));
        assert!(tape.batch_norm(x, m, v, BnMode::Train { update_stats: false }).is_err());
    }

    #[test]
    fn batch_norm_momentum_update() {
        let mut reg = ParamRegistry::new();
        let m = reg.add("m", 1, 1, ParamKind::State, Init::Zeros);
        let v = reg.add("v", 1, 1, ParamKind::State, Init::Ones);
        reg.init_params(&mut crate::numkernel::rng::Rng::new(0));
        {
            let mut tape = Tape::new(&mut reg);
            let x = tape.constant(Tensor2::col_vector(&[0.0, 2.0]));
            tape.batch_norm(x, m, v, BnMode::Train { update_stats: true }).unwrap();
        }
        // running = 0.9·init + 0.1·batch; batch mean 1, batch var 1
        assert!((reg.value(m).at(0, 0) - 0.1).abs() < 1e-12);
        assert!((reg.value(v).at(0, 0) - (0.9 + 0.1)).abs() < 1e-12);
    }

    #[test]
    fn softmax_examples_and_simplex() {
        let mut reg = ParamRegistry::new();
        let mut tape = Tape::new(&mut reg);
        let x = tape.constant(Tensor2::row_vector(&[0.0, 0.0, 0.0]));
        let y = tape.softmax_rows(x);
        for &t in tape.value(y).row(0) {
            assert!((t - 1.0 / 3.0).abs() < 1e-15);
        }

        let x = tape.constant(Tensor2::row_vector(&[2.0_f64.ln(), 0.0]));
        let y = tape.softmax_rows(x);
        assert!((tape.value(y).at(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((tape.value(y).at(0, 1) - 1.0 / 3.0).abs() < 1e-15);

        // shift invariance and simplex membership on a rough vector
        let z = [3.7, -2.1, 0.4, 9.9, -8.0];
        let zc: Vec<f64> = z.iter().map(|v| v + 123.456).collect();
        let a = tape.constant(Tensor2::row_vector(&z));
        let b = tape.constant(Tensor2::row_vector(&zc));
        let (ya, yb) = (tape.softmax_rows(a), tape.softmax_rows(b));
        let sum: f64 = tape.value(ya).row(0).iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(tape.value(ya).row(0).iter().all(|&v| v >= 0.0));
        for (u, w) in tape.value(ya).row(0).iter().zip(tape.value(yb).row(0)) {
            assert!((u - w).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert!((sigmoid_scalar(3.0_f64.ln()) - 0.75).abs() < 1e-15);
        let s = 1.7;
        assert!((sigmoid_scalar(s) + sigmoid_scalar(-s) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn backward_through_product_matches_product_rule() {
        // f = Σ (x ⊙ x) ⇒ df/dx = 2x
        let (mut reg, x_id) = reg_with("x", 1, 3, vec![1.0, -2.0, 0.5]);
        let tape_loss = {
            let mut tape = Tape::new(&mut reg);
            let x = tape.param(x_id);
            let sq = tape.mul(x, x);
            let loss = tape.proj_sum(sq, Tensor2::filled(1, 3, 1.0));
            let val = tape.value(loss).scalar();
            tape.backward(loss);
            val
        };
        assert!((tape_loss - (1.0 + 4.0 + 0.25)).abs() < 1e-12);
        assert_eq!(reg.slot(x_id).grad.row(0), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn gather_and_assemble_are_inverse() {
        let mut reg = ParamRegistry::new();
        let mut tape = Tape::new(&mut reg);
        let x = tape.constant(Tensor2::from_vec(4, 2, vec![0., 1., 10., 11., 20., 21., 30., 31.]).unwrap());
        let even = tape.gather_rows(x, &[0, 2]);
        let odd = tape.gather_rows(x, &[1, 3]);
        let back = tape.assemble_rows(&[(even, vec![0, 2]), (odd, vec![1, 3])], 4);
        assert_eq!(tape.value(back), tape.value(x));
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut reg = ParamRegistry::new();
        let mut tape = Tape::new(&mut reg);
        let a = tape.constant(Tensor2::from_vec(2, 2, vec![1., 2., 3., 4.]).unwrap());
        let b = tape.constant(Tensor2::from_vec(2, 1, vec![9., 8.]).unwrap());
        let cat = tape.concat_cols(&[a, b]);
        assert_eq!(tape.value(cat).row(0), &[1., 2., 9.]);
        let right = tape.slice_cols(cat, 2, 1);
        assert_eq!(tape.value(right).data(), tape.value(b).data());
    }

    #[test]
    fn mix_experts_with_one_hot_gate_selects_one_expert() {
        let mut reg = ParamRegistry::new();
        let mut tape = Tape::new(&mut reg);
        let e0 = tape.constant(Tensor2::filled(2, 3, 1.0));
        let e1 = tape.constant(Tensor2::filled(2, 3, 5.0));
        let gate = tape.constant(Tensor2::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = tape.mix_experts(&[e0, e1], gate);
        assert_eq!(tape.value(y).row(0), &[1.0, 1.0, 1.0]);
        assert_eq!(tape.value(y).row(1), &[5.0, 5.0, 5.0]);
    }

    #[test]
    fn kl_sum_value_and_gradient_sign() {
        // KL(0.8 ‖ 0.5) = 0.8·ln(1.6) + 0.2·ln(0.4)
        let want = 0.8 * (0.8_f64 / 0.5).ln() + 0.2 * (0.2_f64 / 0.5).ln();
        let (mut reg, q_id) = reg_with("q", 1, 1, vec![0.5]);
        let mut tape = Tape::new(&mut reg);
        let q = tape.param(q_id);
        let loss = tape.kl_sum(q, Tensor2::filled(1, 1, 0.8), Tensor2::filled(1, 1, 1.0), 1.0);
        let got = tape.value(loss).scalar();
        assert!((got - want).abs() < 1e-12);
        tape.backward(loss);
        // teacher above student: pushing q up lowers the loss
        assert!(reg.slot(q_id).grad.at(0, 0) < 0.0);
    }
}
