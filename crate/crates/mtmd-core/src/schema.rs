//! Domains, tasks, and the feature schema. A domain is a (surface, ad
//! product) pair; features are declared per tower side with availability,
//! sharing, and high-level flags that drive adaptation and expert routing.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Surface {
    HomeFeed,
    Search,
    RelatedPin,
}

impl Surface {
    pub const ALL: [Surface; 3] = [Surface::HomeFeed, Surface::Search, Surface::RelatedPin];

    pub fn name(self) -> &'static str {
        match self {
            Surface::HomeFeed => "home_feed",
            Surface::Search => "search",
            Surface::RelatedPin => "related_pin",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&s| s == self).unwrap()
    }

    pub fn parse(s: &str) -> Result<Surface> {
        Self::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Data(format!("unknown surface: {s}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AdProduct {
    Standard,
    Shopping,
}

impl AdProduct {
    pub const ALL: [AdProduct; 2] = [AdProduct::Standard, AdProduct::Shopping];

    pub fn name(self) -> &'static str {
        match self {
            AdProduct::Standard => "standard",
            AdProduct::Shopping => "shopping",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&p| p == self).unwrap()
    }

    pub fn parse(s: &str) -> Result<AdProduct> {
        Self::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Data(format!("unknown ad product: {s}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskId {
    Ctr,
    Gctr,
    Octr,
}

impl TaskId {
    pub const ALL: [TaskId; 3] = [TaskId::Ctr, TaskId::Gctr, TaskId::Octr];

    pub fn name(self) -> &'static str {
        match self {
            TaskId::Ctr => "ctr",
            TaskId::Gctr => "gctr",
            TaskId::Octr => "octr",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&t| t == self).unwrap()
    }

    pub fn parse(s: &str) -> Result<TaskId> {
        Self::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Data(format!("unknown task: {s}")))
    }

    /// Optimizable-conversion prediction is undefined for shopping items.
    pub fn active_for(self, product: AdProduct) -> bool {
        !(self == TaskId::Octr && product == AdProduct::Shopping)
    }
}

/// One ad domain: the (surface, product) pair an example belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DomainKey {
    pub surface: Surface,
    pub product: AdProduct,
}

impl DomainKey {
    pub fn new(surface: Surface, product: AdProduct) -> Self {
        DomainKey { surface, product }
    }

    pub fn all() -> Vec<DomainKey> {
        let mut out = Vec::with_capacity(6);
        for s in Surface::ALL {
            for p in AdProduct::ALL {
                out.push(DomainKey::new(s, p));
            }
        }
        out
    }

    pub fn index(self) -> usize {
        self.surface.index() * AdProduct::ALL.len() + self.product.index()
    }

    pub fn name(self) -> String {
        format!("{}_{}", self.surface.name(), self.product.name())
    }

    /// "surface/product" form used in the dataset format.
    pub fn encode(self) -> String {
        format!("{}/{}", self.surface.name(), self.product.name())
    }

    pub fn parse(s: &str) -> Result<DomainKey> {
        let (a, b) = s
            .split_once('/')
            .ok_or_else(|| Error::Data(format!("bad domain: {s}")))?;
        Ok(DomainKey::new(Surface::parse(a)?, AdProduct::parse(b)?))
    }
}

/// Where a field exists. Shared fields must be `All`; the others exercise
/// missing-value handling (absent fields carry the schema default).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Availability {
    All,
    SurfaceOnly(Surface),
    ProductOnly(AdProduct),
}

impl Availability {
    pub fn available_in(self, d: DomainKey) -> bool {
        match self {
            Availability::All => true,
            Availability::SurfaceOnly(s) => d.surface == s,
            Availability::ProductOnly(p) => d.product == p,
        }
    }

    fn encode(self) -> &'static str {
        match self {
            Availability::All => "all",
            Availability::SurfaceOnly(s) => s.name(),
            Availability::ProductOnly(p) => p.name(),
        }
    }

    fn parse(s: &str) -> Result<Availability> {
        if s == "all" {
            return Ok(Availability::All);
        }
        if let Ok(sf) = Surface::parse(s) {
            return Ok(Availability::SurfaceOnly(sf));
        }
        if let Ok(p) = AdProduct::parse(s) {
            return Ok(Availability::ProductOnly(p));
        }
        Err(Error::Format(format!("unknown availability: {s}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContField {
    pub name: String,
    pub avail: Availability,
    pub shared: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CatField {
    pub name: String,
    pub cardinality: usize,
    pub emb_dim: usize,
    pub avail: Availability,
    pub shared: bool,
    pub high_level: bool,
}

/// Continuous fields carry a 0.0 default when unavailable; categorical
/// fields default to index 0.
pub const CONT_DEFAULT: f64 = 0.0;
pub const CAT_DEFAULT: usize = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct SideSchema {
    pub cont: Vec<ContField>,
    pub cat: Vec<CatField>,
}

impl SideSchema {
    /// Width of the adapted feature vector: one column per continuous field
    /// followed by the embedding of each categorical field, declaration order.
    pub fn adapted_dim(&self) -> usize {
        self.cont.len() + self.cat.iter().map(|c| c.emb_dim).sum::<usize>()
    }

    /// (offset, len) of each field's slice in the adapted vector.
    pub fn field_spans(&self) -> Vec<(usize, usize)> {
        let mut spans = Vec::with_capacity(self.cont.len() + self.cat.len());
        let mut off = 0;
        for _ in &self.cont {
            spans.push((off, 1));
            off += 1;
        }
        for c in &self.cat {
            spans.push((off, c.emb_dim));
            off += c.emb_dim;
        }
        spans
    }

    /// Column spans of the shared fields, for the domain-shared expert input.
    pub fn shared_spans(&self) -> Vec<(usize, usize)> {
        self.flagged_spans(|shared, _| shared)
    }

    /// Column spans of the high-level categorical fields, for shallow experts.
    pub fn high_level_spans(&self) -> Vec<(usize, usize)> {
        self.flagged_spans(|_, high| high)
    }

    fn flagged_spans(&self, keep: impl Fn(bool, bool) -> bool) -> Vec<(usize, usize)> {
        let spans = self.field_spans();
        let mut out = Vec::new();
        for (i, f) in self.cont.iter().enumerate() {
            if keep(f.shared, false) {
                out.push(spans[i]);
            }
        }
        for (i, c) in self.cat.iter().enumerate() {
            if keep(c.shared, c.high_level) {
                out.push(spans[self.cont.len() + i]);
            }
        }
        out
    }

    pub fn shared_dim(&self) -> usize {
        self.shared_spans().iter().map(|&(_, l)| l).sum()
    }

    pub fn high_level_dim(&self) -> usize {
        self.high_level_spans().iter().map(|&(_, l)| l).sum()
    }

    fn validate(&self, side: &str) -> Result<()> {
        for f in &self.cont {
            if f.shared && f.avail != Availability::All {
                return Err(Error::Config(format!(
                    "{side} field {} is shared but not available everywhere",
                    f.name
                )));
            }
        }
        for c in &self.cat {
            if c.shared && c.avail != Availability::All {
                return Err(Error::Config(format!(
                    "{side} field {} is shared but not available everywhere",
                    c.name
                )));
            }
            if c.cardinality == 0 || c.emb_dim == 0 {
                return Err(Error::Config(format!("{side} field {} has zero size", c.name)));
            }
        }
        if !self.cat.iter().any(|c| c.high_level) {
            return Err(Error::Config(format!("{side} side has no high-level field")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSchema {
    pub query: SideSchema,
    pub item: SideSchema,
}

fn cont(name: &str, avail: Availability, shared: bool) -> ContField {
    ContField { name: name.to_string(), avail, shared }
}

fn cat(
    name: &str,
    cardinality: usize,
    emb_dim: usize,
    avail: Availability,
    shared: bool,
    high_level: bool,
) -> CatField {
    CatField { name: name.to_string(), cardinality, emb_dim, avail, shared, high_level }
}

/// Desk-scale default schema. Shared fields are declared first on each side
/// so their columns are contiguous; the high-level categorical fields come
/// first in the categorical block for the same reason.
pub fn make_default_schema() -> FeatureSchema {
    use AdProduct::*;
    use Availability::*;
    use Surface::*;
    let query = SideSchema {
        cont: vec![
            cont("user_activity_7d", All, true),
            cont("user_ctr_30d", All, true),
            cont("user_session_depth", All, true),
            cont("query_recency", All, true),
            cont("user_engagement_score", All, true),
            cont("user_ad_click_rate", All, true),
            cont("context_hour_norm", All, true),
            cont("user_freshness", All, true),
            cont("search_query_length", SurfaceOnly(Search), false),
            cont("homefeed_scroll_depth", SurfaceOnly(HomeFeed), false),
            cont("related_pin_similarity", SurfaceOnly(RelatedPin), false),
            cont("user_shopping_intent", ProductOnly(Shopping), false),
        ],
        cat: vec![
            cat("surface_id", 3, 8, All, true, true),
            cat("user_country", 32, 8, All, true, false),
            cat("user_segment", 24, 8, All, false, false),
            cat("search_query_cluster", 40, 8, SurfaceOnly(Search), false, false),
        ],
    };
    let item = SideSchema {
        cont: vec![
            cont("item_ctr_30d", All, true),
            cont("item_impressions_log", All, true),
            cont("item_freshness", All, true),
            cont("advertiser_quality", All, true),
            cont("bid_normalized", All, true),
            cont("budget_pacing", All, true),
            cont("image_aspect_ratio", All, true),
            cont("text_length_norm", All, true),
            cont("product_price_log", ProductOnly(Shopping), false),
            cont("catalog_match_score", ProductOnly(Shopping), false),
            cont("promo_flag_rate", ProductOnly(Standard), false),
            cont("search_keyword_match", SurfaceOnly(Search), false),
        ],
        cat: vec![
            cat("ad_product_type", 2, 8, All, true, true),
            cat("ad_format", 6, 8, All, true, true),
            cat("advertiser_vertical", 24, 8, All, false, false),
            cat("creative_style", 16, 8, All, false, false),
            cat("merchant_tier", 8, 8, ProductOnly(Shopping), false, false),
            cat("campaign_objective", 10, 8, ProductOnly(Standard), false, false),
        ],
    };
    let schema = FeatureSchema { query, item };
    schema.validate().expect("default schema is valid");
    schema
}

impl FeatureSchema {
    pub fn validate(&self) -> Result<()> {
        self.query.validate("query")?;
        self.item.validate("item")
    }

    /// Canonical text form; also the input to the schema hash.
    pub fn to_config_text(&self) -> String {
        let mut out = String::new();
        for (name, side) in [("query", &self.query), ("item", &self.item)] {
            out.push_str(&format!("[{name}]\n"));
            let conts: Vec<String> = side
                .cont
                .iter()
                .map(|f| {
                    let mut s = format!("{}:{}", f.name, f.avail.encode());
                    if f.shared {
                        s.push_str(":shared");
                    }
                    s
                })
                .collect();
            out.push_str(&format!("cont = {}\n", conts.join(", ")));
            let cats: Vec<String> = side
                .cat
                .iter()
                .map(|c| {
                    let mut s =
                        format!("{}:{}:{}:{}", c.name, c.cardinality, c.emb_dim, c.avail.encode());
                    if c.shared {
                        s.push_str(":shared");
                    }
                    if c.high_level {
                        s.push_str(":high");
                    }
                    s
                })
                .collect();
            out.push_str(&format!("cat = {}\n", cats.join(", ")));
        }
        out
    }

    pub fn from_config_text(text: &str) -> Result<FeatureSchema> {
        let mut query: Option<SideSchema> = None;
        let mut item: Option<SideSchema> = None;
        let mut current: Option<(String, SideSchema)> = None;
        let store =
            |cur: &mut Option<(String, SideSchema)>, q: &mut Option<SideSchema>, i: &mut Option<SideSchema>| {
                if let Some((name, side)) = cur.take() {
                    match name.as_str() {
                        "query" => *q = Some(side),
                        "item" => *i = Some(side),
                        other => panic!("unreachable section {other}"),
                    }
                }
            };
        for raw in text.lines() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(section) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                if section != "query" && section != "item" {
                    return Err(Error::Format(format!("unknown schema section: {section}")));
                }
                store(&mut current, &mut query, &mut item);
                current = Some((section.to_string(), SideSchema { cont: Vec::new(), cat: Vec::new() }));
                continue;
            }
            let (key, val) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad schema line: {line}")))?;
            let side = &mut current
                .as_mut()
                .ok_or_else(|| Error::Format("schema field outside a section".into()))?
                .1;
            match key.trim() {
                "cont" => {
                    for tok in val.split(',').map(str::trim).filter(|t| !t.is_empty()) {
                        let parts: Vec<&str> = tok.split(':').collect();
                        if parts.len() < 2 || parts.len() > 3 {
                            return Err(Error::Format(format!("bad continuous field: {tok}")));
                        }
                        side.cont.push(ContField {
                            name: parts[0].to_string(),
                            avail: Availability::parse(parts[1])?,
                            shared: parts.get(2) == Some(&"shared"),
                        });
                    }
                }
                "cat" => {
                    for tok in val.split(',').map(str::trim).filter(|t| !t.is_empty()) {
                        let parts: Vec<&str> = tok.split(':').collect();
                        if parts.len() < 4 || parts.len() > 6 {
                            return Err(Error::Format(format!("bad categorical field: {tok}")));
                        }
                        let card = parts[1]
                            .parse()
                            .map_err(|_| Error::Format(format!("bad cardinality in: {tok}")))?;
                        let dim = parts[2]
                            .parse()
                            .map_err(|_| Error::Format(format!("bad embedding dim in: {tok}")))?;
                        let flags = &parts[3 + 1..];
                        side.cat.push(CatField {
                            name: parts[0].to_string(),
                            cardinality: card,
                            emb_dim: dim,
                            avail: Availability::parse(parts[3])?,
                            shared: flags.contains(&"shared"),
                            high_level: flags.contains(&"high"),
                        });
                    }
                }
                other => return Err(Error::Format(format!("unknown schema key: {other}"))),
            }
        }
        store(&mut current, &mut query, &mut item);
        let schema = FeatureSchema {
            query: query.ok_or_else(|| Error::Format("schema missing [query] section".into()))?,
            item: item.ok_or_else(|| Error::Format("schema missing [item] section".into()))?,
        };
        schema.validate()?;
        Ok(schema)
    }

    /// FNV-1a over the canonical text; stamped into dataset and checkpoint
    /// headers so artifacts can't silently mix schemas.
    pub fn hash(&self) -> u64 {
        fnv1a64(self.to_config_text().as_bytes())
    }

    pub fn side(&self, tower: Tower) -> &SideSchema {
        match tower {
            Tower::Query => &self.query,
            Tower::Item => &self.item,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tower {
    Query,
    Item,
}

impl Tower {
    pub const ALL: [Tower; 2] = [Tower::Query, Tower::Item];

    pub fn name(self) -> &'static str {
        match self {
            Tower::Query => "query",
            Tower::Item => "item",
        }
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
