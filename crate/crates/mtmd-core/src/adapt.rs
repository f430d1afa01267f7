//! Domain adaptation front-end, run per tower side: continuous features go
//! through that domain's batch norm, categorical features through embedding
//! lookup, and an SE block reweights the concatenated fields. SE weights are
//! shared across a side's domains; batch-norm statistics are per domain.
//!
//! The `domain_adapt` toggle swaps all of this for a single global batch
//! norm with no SE, keeping the output layout identical.

use crate::data::Example;
use crate::error::{Error, Result};
use crate::numkernel::params::{Init, ParamKind, ParamRegistry, SlotId};
use crate::numkernel::tape::{BnMode, NodeId, Tape};
use crate::numkernel::tensor::Tensor2;
use crate::schema::{DomainKey, SideSchema, Tower};

pub const SE_REDUCTION: usize = 2;

#[derive(Debug, Clone)]
pub struct AdaptParams {
    pub tower: Tower,
    /// One embedding table per categorical field, declaration order.
    pub emb: Vec<SlotId>,
    /// (running mean, running var) per domain, or a single global pair.
    pub bn: Vec<(SlotId, SlotId)>,
    /// Squeeze-and-excitation weights, absent when adaptation is disabled.
    pub se: Option<(SlotId, SlotId)>,
    pub domain_adapt: bool,
}

/// Adapted batch: the full vector plus the two sub-vector views the expert
/// blocks consume.
#[derive(Debug, Clone, Copy)]
pub struct AdaptOut {
    pub full: NodeId,
    pub shared: NodeId,
    pub high_level: NodeId,
}

impl AdaptParams {
    pub fn build(
        reg: &mut ParamRegistry,
        side: &SideSchema,
        tower: Tower,
        domain_adapt: bool,
    ) -> AdaptParams {
        let t = tower.name();
        let emb = side
            .cat
            .iter()
            .map(|c| {
                reg.add(
                    &format!("{t}.adapt.emb.{}", c.name),
                    c.cardinality,
                    c.emb_dim,
                    ParamKind::Embedding,
                    Init::Uniform { limit: 0.1 },
                )
            })
            .collect();
        let n_cont = side.cont.len();
        let bn_pair = |reg: &mut ParamRegistry, key: &str| {
            (
                reg.add(&format!("{t}.adapt.bn.{key}.mean"), 1, n_cont, ParamKind::State, Init::Zeros),
                reg.add(&format!("{t}.adapt.bn.{key}.var"), 1, n_cont, ParamKind::State, Init::Ones),
            )
        };
        let bn = if domain_adapt {
            DomainKey::all().iter().map(|d| bn_pair(reg, &d.name())).collect()
        } else {
            vec![bn_pair(reg, "global")]
        };
        let se = domain_adapt.then(|| {
            let f = side.cont.len() + side.cat.len();
            debug_assert!(f >= 2, "SE block needs at least two fields");
            let hidden = (f / SE_REDUCTION).max(1);
            (
                reg.add(&format!("{t}.adapt.se.w1"), hidden, f, ParamKind::Dense, Init::XavierUniform { fan_in: f, fan_out: hidden }),
                reg.add(&format!("{t}.adapt.se.w2"), f, hidden, ParamKind::Dense, Init::XavierUniform { fan_in: hidden, fan_out: f }),
            )
        });
        AdaptParams { tower, emb, bn, se, domain_adapt }
    }

    fn side_cont<'e>(&self, ex: &'e Example) -> &'e [f64] {
        match self.tower {
            Tower::Query => &ex.query_cont,
            Tower::Item => &ex.item_cont,
        }
    }

    fn side_cat<'e>(&self, ex: &'e Example) -> &'e [usize] {
        match self.tower {
            Tower::Query => &ex.query_cat,
            Tower::Item => &ex.item_cat,
        }
    }

    /// Adapts a batch. Training-mode batch norm needs two examples per
    /// domain group; smaller groups fall back to running statistics so a
    /// stray singleton cannot poison the stats or abort the step.
    pub fn forward(
        &self,
        tape: &mut Tape,
        side: &SideSchema,
        examples: &[Example],
        mode: BnMode,
    ) -> Result<AdaptOut> {
        assert!(!examples.is_empty(), "adapt on an empty batch");
        let b = examples.len();
        let n_cont = side.cont.len();

        let mut cont = Tensor2::zeros(b, n_cont);
        for (r, ex) in examples.iter().enumerate() {
            let vals = self.side_cont(ex);
            if vals.len() != n_cont {
                return Err(Error::Data(format!(
                    "example {} has {} continuous values, schema wants {n_cont}",
                    ex.id,
                    vals.len()
                )));
            }
            cont.row_mut(r).copy_from_slice(vals);
        }
        let cont_node = tape.constant(cont);

        let effective = |rows: usize| match mode {
            BnMode::Train { .. } if rows < 2 => BnMode::Infer,
            m => m,
        };
        let bn_out = if self.domain_adapt {
            let mut parts: Vec<(NodeId, Vec<usize>)> = Vec::new();
            for (di, d) in DomainKey::all().into_iter().enumerate() {
                let rows: Vec<usize> = examples
                    .iter()
                    .enumerate()
                    .filter(|(_, ex)| ex.domain == d)
                    .map(|(i, _)| i)
                    .collect();
                if rows.is_empty() {
                    continue;
                }
                let g = tape.gather_rows(cont_node, &rows);
                let (m, v) = self.bn[di];
                let y = tape.batch_norm(g, m, v, effective(rows.len()))?;
                parts.push((y, rows));
            }
            tape.assemble_rows(&parts, b)
        } else {
            let (m, v) = self.bn[0];
            tape.batch_norm(cont_node, m, v, effective(b))?
        };

        let mut blocks = vec![bn_out];
        for (fi, c) in side.cat.iter().enumerate() {
            let mut idx = Vec::with_capacity(b);
            for ex in examples {
                let v = self.side_cat(ex)[fi];
                if v >= c.cardinality {
                    return Err(Error::Data(format!(
                        "example {}: {} value {v} exceeds cardinality {}",
                        ex.id, c.name, c.cardinality
                    )));
                }
                idx.push(v);
            }
            let table = tape.param(self.emb[fi]);
            blocks.push(tape.gather_rows(table, &idx));
        }
        let raw = tape.concat_cols(&blocks);

        let spans = side.field_spans();
        let full = if let Some((w1, w2)) = self.se {
            let s = tape.field_mean(raw, &spans);
            let w1n = tape.param(w1);
            let h = tape.matmul_nt(s, w1n);
            let h = tape.relu(h);
            let w2n = tape.param(w2);
            let z = tape.matmul_nt(h, w2n);
            let a = tape.sigmoid(z);
            let gates = tape.scale(a, 2.0);
            tape.scale_fields(raw, gates, &spans)
        } else {
            raw
        };

        let slice_concat = |tape: &mut Tape, spans: &[(usize, usize)]| {
            let parts: Vec<NodeId> =
                spans.iter().map(|&(off, len)| tape.slice_cols(full, off, len)).collect();
            tape.concat_cols(&parts)
        };
        let shared = slice_concat(tape, &side.shared_spans());
        let high_level = slice_concat(tape, &side.high_level_spans());
        Ok(AdaptOut { full, shared, high_level })
    }
}
