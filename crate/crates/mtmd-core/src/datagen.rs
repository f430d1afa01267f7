//! Seeded dataset synthesis: domains drawn from a mix, continuous features
//! from the oracle's per-domain distributions, categorical values from a
//! Zipf(1.1) over the cardinality, teacher scores attached at the end.

use std::path::Path;

use crate::data::{write_dataset, Example};
use crate::error::{Error, Result};
use crate::numkernel::rng::Rng;
use crate::schema::{DomainKey, FeatureSchema, SideSchema, Tower, CAT_DEFAULT, CONT_DEFAULT};
use crate::teacher::TeacherOracle;

pub const ZIPF_EXPONENT: f64 = 1.1;

/// Cumulative distribution of Zipf(1.1) over {0, .., cardinality-1}.
fn zipf_cdf(cardinality: usize) -> Vec<f64> {
    let mut w: Vec<f64> = (1..=cardinality).map(|k| 1.0 / (k as f64).powf(ZIPF_EXPONENT)).collect();
    let total: f64 = w.iter().sum();
    let mut acc = 0.0;
    for x in w.iter_mut() {
        acc += *x / total;
        *x = acc;
    }
    *w.last_mut().unwrap() = 1.0;
    w
}

fn draw_from_cdf(cdf: &[f64], rng: &mut Rng) -> usize {
    let u = rng.uniform();
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
}

/// A domain mix: fractions over `DomainKey::all()` order, summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainMix(pub [f64; 6]);

impl DomainMix {
    pub fn uniform() -> DomainMix {
        DomainMix([1.0 / 6.0; 6])
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|&f| f < 0.0) {
            return Err(Error::Config("domain mix has a negative fraction".into()));
        }
        let sum: f64 = self.0.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("domain mix sums to {sum}, expected 1")));
        }
        Ok(())
    }

    fn cdf(&self) -> Vec<f64> {
        let mut acc = 0.0;
        let mut cdf: Vec<f64> = self.0.iter().map(|f| {
            acc += f;
            acc
        }).collect();
        *cdf.last_mut().unwrap() = 1.0;
        cdf
    }
}

fn draw_side(
    side: &SideSchema,
    tower: Tower,
    domain: DomainKey,
    oracle: &TeacherOracle,
    rng: &mut Rng,
) -> (Vec<f64>, Vec<usize>) {
    let cont = side
        .cont
        .iter()
        .enumerate()
        .map(|(i, f)| {
            if f.avail.available_in(domain) {
                let (mu, sigma) = oracle.cont_dist(domain, tower, i);
                mu + sigma * rng.normal()
            } else {
                CONT_DEFAULT
            }
        })
        .collect();
    let cat = side
        .cat
        .iter()
        .map(|c| {
            // identity fields always reflect the example's true domain
            if c.name == "surface_id" {
                domain.surface.index()
            } else if c.name == "ad_product_type" {
                domain.product.index()
            } else if c.avail.available_in(domain) {
                draw_from_cdf(&zipf_cdf(c.cardinality), rng)
            } else {
                CAT_DEFAULT
            }
        })
        .collect();
    (cont, cat)
}

pub fn generate_dataset(
    seed: u64,
    n: usize,
    mix: &DomainMix,
    schema: &FeatureSchema,
    oracle: &TeacherOracle,
) -> Result<Vec<Example>> {
    mix.validate()?;
    let domain_cdf = mix.cdf();
    let domains = DomainKey::all();
    let mut rng = Rng::new(seed);
    let mut out = Vec::with_capacity(n);
    for id in 1..=n as u64 {
        let domain = domains[draw_from_cdf(&domain_cdf, &mut rng)];
        let (query_cont, query_cat) = draw_side(&schema.query, Tower::Query, domain, oracle, &mut rng);
        let (item_cont, item_cat) = draw_side(&schema.item, Tower::Item, domain, oracle, &mut rng);
        let teacher = oracle.score(domain, &query_cont, &query_cat, &item_cont, &item_cat);
        out.push(Example { id, domain, query_cont, query_cat, item_cont, item_cat, teacher });
    }
    Ok(out)
}

pub fn generate_dataset_file(
    path: &Path,
    seed: u64,
    n: usize,
    mix: &DomainMix,
    schema: &FeatureSchema,
    oracle: &TeacherOracle,
) -> Result<()> {
    let examples = generate_dataset(seed, n, mix, schema, oracle)?;
    write_dataset(path, schema, &examples)
}
