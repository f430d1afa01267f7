//! Example records and the line-oriented dataset file format.
//!
//! Layout: line 1 is `MTMDDS 1 <schema-hash>`; every other line is one
//! record with tab-separated fields in schema declaration order (query
//! continuous, query categorical, item continuous, item categorical) framed
//! by the id and domain up front and `task:value` teacher pairs at the end.
//! Floats are rendered with 17 significant digits so round-trips are
//! bit-exact.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::schema::{AdProduct, DomainKey, FeatureSchema, TaskId};

pub const DATASET_MAGIC: &str = "MTMDDS";
pub const DATASET_VERSION: u32 = 1;

/// Teacher probabilities for one example; the conversion-style tasks never
/// exceed the click task, and shopping items carry no OCTR.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TeacherScores {
    pub ctr: f64,
    pub gctr: f64,
    pub octr: Option<f64>,
}

impl TeacherScores {
    pub fn get(&self, task: TaskId) -> Option<f64> {
        match task {
            TaskId::Ctr => Some(self.ctr),
            TaskId::Gctr => Some(self.gctr),
            TaskId::Octr => self.octr,
        }
    }

    fn validate(&self, product: AdProduct) -> Result<()> {
        let mut pairs = vec![(TaskId::Ctr, self.ctr), (TaskId::Gctr, self.gctr)];
        if let Some(o) = self.octr {
            pairs.push((TaskId::Octr, o));
        }
        for (t, p) in &pairs {
            if !(*p > 0.0 && *p < 1.0) {
                return Err(Error::Data(format!("teacher {} out of (0,1): {p}", t.name())));
            }
        }
        if self.gctr > self.ctr {
            return Err(Error::Data("teacher gctr exceeds ctr".into()));
        }
        if let Some(o) = self.octr {
            if o > self.ctr {
                return Err(Error::Data("teacher octr exceeds ctr".into()));
            }
        }
        if product == AdProduct::Shopping && self.octr.is_some() {
            return Err(Error::Data("shopping example carries an octr teacher".into()));
        }
        if product != AdProduct::Shopping && self.octr.is_none() {
            return Err(Error::Data("non-shopping example is missing the octr teacher".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: u64,
    pub domain: DomainKey,
    pub query_cont: Vec<f64>,
    pub query_cat: Vec<usize>,
    pub item_cont: Vec<f64>,
    pub item_cat: Vec<usize>,
    pub teacher: TeacherScores,
}

fn render_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_record(out: &mut impl Write, ex: &Example) -> std::io::Result<()> {
    let mut fields: Vec<String> = Vec::with_capacity(40);
    fields.push(ex.id.to_string());
    fields.push(ex.domain.encode());
    fields.extend(ex.query_cont.iter().map(|&v| render_f64(v)));
    fields.extend(ex.query_cat.iter().map(|v| v.to_string()));
    fields.extend(ex.item_cont.iter().map(|&v| render_f64(v)));
    fields.extend(ex.item_cat.iter().map(|v| v.to_string()));
    fields.push(format!("{}:{}", TaskId::Ctr.name(), render_f64(ex.teacher.ctr)));
    fields.push(format!("{}:{}", TaskId::Gctr.name(), render_f64(ex.teacher.gctr)));
    if let Some(o) = ex.teacher.octr {
        fields.push(format!("{}:{}", TaskId::Octr.name(), render_f64(o)));
    }
    writeln!(out, "{}", fields.join("\t"))
}

pub fn write_dataset(path: &Path, schema: &FeatureSchema, examples: &[Example]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{DATASET_MAGIC} {DATASET_VERSION} {:016x}", schema.hash())?;
    for ex in examples {
        write_record(&mut out, ex)?;
    }
    out.flush()?;
    Ok(())
}

struct LineParser<'s> {
    tokens: Vec<&'s str>,
    pos: usize,
    line_no: usize,
}

impl<'s> LineParser<'s> {
    fn err(&self, msg: &str) -> Error {
        Error::Data(format!("line {}: {msg}", self.line_no))
    }

    fn next(&mut self) -> Result<&'s str> {
        let t = self
            .tokens
            .get(self.pos)
            .ok_or_else(|| self.err("too few fields"))?;
        self.pos += 1;
        Ok(t)
    }

    fn next_f64(&mut self) -> Result<f64> {
        let t = self.next()?;
        t.parse().map_err(|_| self.err(&format!("bad float: {t}")))
    }

    fn next_usize(&mut self) -> Result<usize> {
        let t = self.next()?;
        t.parse().map_err(|_| self.err(&format!("bad integer: {t}")))
    }
}

fn parse_record(line: &str, line_no: usize, schema: &FeatureSchema) -> Result<Example> {
    let mut p = LineParser { tokens: line.split('\t').collect(), pos: 0, line_no };
    let id: u64 = {
        let t = p.next()?;
        t.parse().map_err(|_| p.err(&format!("bad id: {t}")))?
    };
    let domain = DomainKey::parse(p.next()?).map_err(|e| p.err(&e.to_string()))?;

    let mut query_cont = Vec::with_capacity(schema.query.cont.len());
    for _ in &schema.query.cont {
        query_cont.push(p.next_f64()?);
    }
    let mut query_cat = Vec::with_capacity(schema.query.cat.len());
    for c in &schema.query.cat {
        let v = p.next_usize()?;
        if v >= c.cardinality {
            return Err(p.err(&format!("{} value {v} out of range", c.name)));
        }
        query_cat.push(v);
    }
    let mut item_cont = Vec::with_capacity(schema.item.cont.len());
    for _ in &schema.item.cont {
        item_cont.push(p.next_f64()?);
    }
    let mut item_cat = Vec::with_capacity(schema.item.cat.len());
    for c in &schema.item.cat {
        let v = p.next_usize()?;
        if v >= c.cardinality {
            return Err(p.err(&format!("{} value {v} out of range", c.name)));
        }
        item_cat.push(v);
    }

    let mut ctr = None;
    let mut gctr = None;
    let mut octr = None;
    while p.pos < p.tokens.len() {
        let tok = p.next()?;
        let (name, val) = tok
            .split_once(':')
            .ok_or_else(|| p.err(&format!("bad teacher pair: {tok}")))?;
        let task = TaskId::parse(name).map_err(|e| p.err(&e.to_string()))?;
        let v: f64 = val.parse().map_err(|_| p.err(&format!("bad float: {val}")))?;
        let slot = match task {
            TaskId::Ctr => &mut ctr,
            TaskId::Gctr => &mut gctr,
            TaskId::Octr => &mut octr,
        };
        if slot.is_some() {
            return Err(p.err(&format!("duplicate teacher task: {name}")));
        }
        *slot = Some(v);
    }
    let teacher = TeacherScores {
        ctr: ctr.ok_or_else(|| p.err("missing ctr teacher"))?,
        gctr: gctr.ok_or_else(|| p.err("missing gctr teacher"))?,
        octr,
    };
    teacher
        .validate(domain.product)
        .map_err(|e| p.err(&e.to_string()))?;
    Ok(Example { id, domain, query_cont, query_cat, item_cont, item_cat, teacher })
}

pub fn read_dataset(path: &Path, schema: &FeatureSchema) -> Result<Vec<Example>> {
    let reader = BufReader::new(File::open(path)?);
    let mut examples = Vec::new();
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty dataset file".into()))??;
    let parts: Vec<&str> = header.split(' ').collect();
    if parts.len() != 3 || parts[0] != DATASET_MAGIC {
        return Err(Error::Format(format!("bad dataset header: {header}")));
    }
    let version: u32 = parts[1]
        .parse()
        .map_err(|_| Error::Format(format!("bad dataset version: {}", parts[1])))?;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version: {version}")));
    }
    let expect = format!("{:016x}", schema.hash());
    if parts[2] != expect {
        return Err(Error::Format(format!(
            "dataset schema hash {} does not match the active schema {expect}",
            parts[2]
        )));
    }
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        examples.push(parse_record(&line, i + 2, schema)?);
    }
    Ok(examples)
}
