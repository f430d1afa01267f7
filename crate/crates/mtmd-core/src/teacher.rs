//! Synthetic teacher: a stand-in for the heavyweight ranker whose scores the
//! lightweight model distills. Each domain owns a small tanh network for the
//! base click logit; a shared cross-domain network is blended in with weight
//! `alpha`, which controls how much signal domains have in common. The
//! conditional tasks multiply the click probability by a sigmoid factor, so
//! their teachers are exact products the constrained heads can match. Net
//! inputs carry a fixed set of pairwise feature products, giving every score
//! explicit second-order structure.
//!
//! The oracle also owns the per-(domain, field) feature distributions used by
//! dataset generation, so train and eval files drawn with different data
//! seeds describe the same world. Scoring happens in standardized coordinates:
//! each continuous feature is centered and scaled by its own domain's
//! generating distribution before the nets see it, so the raw cross-domain
//! shift carries no label information on its own and a student must normalize
//! it away rather than memorize it.

use crate::numkernel::rng::Rng;
use crate::numkernel::tape::sigmoid_scalar;
use crate::schema::{fnv1a64, DomainKey, FeatureSchema, TaskId, Tower};
use crate::data::TeacherScores;

pub const TEACHER_CLAMP: (f64, f64) = (1e-4, 1.0 - 1e-4);
pub const DEFAULT_ALPHA: f64 = 0.6;
pub const DEFAULT_TEACHER_SEED: u64 = 7;

const HIDDEN: usize = 24;
const SCALARS_PER_CAT: usize = 2;
const QUAD_TERMS: usize = 10;

#[derive(Debug, Clone)]
struct TinyNet {
    d: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: f64,
}

impl TinyNet {
    fn init(rng: &mut Rng, d: usize, out_shift: f64, out_spread: f64) -> TinyNet {
        let s1 = 1.5 / (d as f64).sqrt();
        let s2 = out_spread / (HIDDEN as f64).sqrt();
        TinyNet {
            d,
            w1: (0..HIDDEN * d).map(|_| rng.normal() * s1).collect(),
            b1: (0..HIDDEN).map(|_| rng.normal() * 0.3).collect(),
            w2: (0..HIDDEN).map(|_| rng.normal() * s2).collect(),
            b2: out_shift + rng.normal() * 0.4,
        }
    }

    fn eval(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.d);
        let mut out = self.b2;
        for h in 0..HIDDEN {
            let mut z = self.b1[h];
            let row = &self.w1[h * self.d..(h + 1) * self.d];
            for (w, v) in row.iter().zip(x.iter()) {
                z += w * v;
            }
            out += self.w2[h] * z.tanh();
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TeacherOracle {
    pub seed: u64,
    pub alpha: f64,
    base: Vec<TinyNet>,
    shared: TinyNet,
    g_gctr: TinyNet,
    g_octr: TinyNet,
    /// (mu, sigma) per [domain][continuous field], query then item.
    dist_query: Vec<Vec<(f64, f64)>>,
    dist_item: Vec<Vec<(f64, f64)>>,
    /// Index pairs into the concatenated continuous vector whose products
    /// extend the net input, giving the scores explicit second-order terms.
    quad: Vec<(usize, usize)>,
    phi_dim: usize,
}

impl TeacherOracle {
    pub fn new(seed: u64, alpha: f64, schema: &FeatureSchema) -> TeacherOracle {
        let phi_dim = schema.query.cont.len()
            + schema.item.cont.len()
            + SCALARS_PER_CAT * (schema.query.cat.len() + schema.item.cat.len())
            + QUAD_TERMS;
        let mut rng = Rng::new(seed ^ 0x7ea0_5eed_0000_0001);
        let base = DomainKey::all()
            .iter()
            .map(|_| TinyNet::init(&mut rng, phi_dim, -1.6, 2.4))
            .collect();
        let shared = TinyNet::init(&mut rng, phi_dim, 0.0, 2.4);
        let g_gctr = TinyNet::init(&mut rng, phi_dim, -0.9, 1.8);
        let g_octr = TinyNet::init(&mut rng, phi_dim, -1.2, 1.8);
        let mut dist_for = |side: &crate::schema::SideSchema| -> Vec<Vec<(f64, f64)>> {
            DomainKey::all()
                .iter()
                .map(|_| {
                    side.cont
                        .iter()
                        .map(|_| (rng.uniform_in(-4.0, 4.0), rng.uniform_in(0.5, 1.5)))
                        .collect()
                })
                .collect()
        };
        let dist_query = dist_for(&schema.query);
        let dist_item = dist_for(&schema.item);
        let n_cont = schema.query.cont.len() + schema.item.cont.len();
        let quad = (0..QUAD_TERMS)
            .map(|_| {
                let i = rng.below(n_cont as u64) as usize;
                let mut j = rng.below(n_cont as u64) as usize;
                while j == i {
                    j = rng.below(n_cont as u64) as usize;
                }
                (i, j)
            })
            .collect();
        TeacherOracle {
            seed,
            alpha,
            base,
            shared,
            g_gctr,
            g_octr,
            dist_query,
            dist_item,
            quad,
            phi_dim,
        }
    }

    /// Generating distribution of one continuous field in one domain.
    pub fn cont_dist(&self, domain: DomainKey, tower: Tower, field: usize) -> (f64, f64) {
        match tower {
            Tower::Query => self.dist_query[domain.index()][field],
            Tower::Item => self.dist_item[domain.index()][field],
        }
    }

    fn standardize(&self, domain: DomainKey, tower: Tower, cont: &[f64]) -> Vec<f64> {
        cont.iter()
            .enumerate()
            .map(|(f, &v)| {
                let (mu, sigma) = self.cont_dist(domain, tower, f);
                (v - mu) / sigma
            })
            .collect()
    }

    /// Two per-value scalars that stand in for a categorical field's effect.
    fn cat_scalars(&self, tower: Tower, field: usize, value: usize) -> (f64, f64) {
        let mut bytes = Vec::with_capacity(25);
        bytes.push(match tower {
            Tower::Query => 0u8,
            Tower::Item => 1u8,
        });
        bytes.extend_from_slice(&self.seed.to_le_bytes());
        bytes.extend_from_slice(&(field as u64).to_le_bytes());
        bytes.extend_from_slice(&(value as u64).to_le_bytes());
        let mut r = Rng::new(fnv1a64(&bytes));
        (r.uniform_in(-1.0, 1.0), r.uniform_in(-1.0, 1.0))
    }

    fn phi(
        &self,
        query_cont: &[f64],
        query_cat: &[usize],
        item_cont: &[f64],
        item_cat: &[usize],
    ) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.phi_dim);
        x.extend_from_slice(query_cont);
        x.extend_from_slice(item_cont);
        for (f, &v) in query_cat.iter().enumerate() {
            let (a, b) = self.cat_scalars(Tower::Query, f, v);
            x.push(a);
            x.push(b);
        }
        for (f, &v) in item_cat.iter().enumerate() {
            let (a, b) = self.cat_scalars(Tower::Item, f, v);
            x.push(a);
            x.push(b);
        }
        let qn = query_cont.len();
        let pick = |k: usize| if k < qn { query_cont[k] } else { item_cont[k - qn] };
        for &(i, j) in &self.quad {
            x.push(pick(i) * pick(j));
        }
        debug_assert_eq!(x.len(), self.phi_dim);
        x
    }

    pub fn score(
        &self,
        domain: DomainKey,
        query_cont: &[f64],
        query_cat: &[usize],
        item_cont: &[f64],
        item_cat: &[usize],
    ) -> TeacherScores {
        let qz = self.standardize(domain, Tower::Query, query_cont);
        let iz = self.standardize(domain, Tower::Item, item_cont);
        let x = self.phi(&qz, query_cat, &iz, item_cat);
        let squash = |z: f64| sigmoid_scalar(z).clamp(TEACHER_CLAMP.0, TEACHER_CLAMP.1);
        let clamp_p = |p: f64| p.clamp(TEACHER_CLAMP.0, TEACHER_CLAMP.1);
        let z = self.base[domain.index()].eval(&x) + self.alpha * self.shared.eval(&x);
        let p_ctr = squash(z);
        let p_gctr = clamp_p(p_ctr * sigmoid_scalar(self.g_gctr.eval(&x)));
        let p_octr = TaskId::Octr
            .active_for(domain.product)
            .then(|| clamp_p(p_ctr * sigmoid_scalar(self.g_octr.eval(&x))));
        TeacherScores { ctr: p_ctr, gctr: p_gctr, octr: p_octr }
    }
}
