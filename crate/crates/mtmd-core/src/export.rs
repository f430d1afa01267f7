//! Binary artifacts: embedding stores for serving and checkpoints for
//! saving trained models, all sharing one little-endian container format.
//!
//! Container layout: magic `MTMD`, u32 format version, then a u8 kind tag.
//! Stores carry a per-task header (name, deep width, shallow width) followed
//! by rows of f32 embeddings; checkpoints carry the model's config text, the
//! feature-schema hash, and every parameter blob keyed by slot name.

use std::collections::HashSet;
use std::path::Path;

use crate::baseline::BaselineModel;
use crate::config::{baseline_from_text, baseline_to_text, model_from_text, model_to_text};
use crate::data::Example;
use crate::error::{Error, Result};
use crate::numkernel::params::{ParamKind, ParamRegistry};
use crate::schema::{AdProduct, DomainKey, FeatureSchema, TaskId, Tower};
use crate::towers::{MtmdModel, PROB_CLAMP};

const MAGIC: [u8; 4] = *b"MTMD";
const VERSION: u32 = 1;

const TAG_QUERY_STORE: u8 = 0;
const TAG_ITEM_STORE: u8 = 1;
const TAG_MODEL: u8 = 2;
const TAG_BASELINE: u8 = 3;

fn tag_name(tag: u8) -> &'static str {
    match tag {
        TAG_QUERY_STORE => "query embedding store",
        TAG_ITEM_STORE => "item embedding store",
        TAG_MODEL => "model checkpoint",
        TAG_BASELINE => "baseline checkpoint",
        _ => "unknown artifact",
    }
}

#[derive(Default)]
struct Enc {
    buf: Vec<u8>,
}

impl Enc {
    fn with_tag(tag: u8) -> Enc {
        let mut e = Enc::default();
        e.buf.extend_from_slice(&MAGIC);
        e.u32(VERSION);
        e.u8(tag);
        e
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn str16(&mut self, s: &str) {
        assert!(s.len() <= u16::MAX as usize);
        self.u16(s.len() as u16);
        self.buf.extend_from_slice(s.as_bytes());
    }
}

struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Dec<'a> {
    fn new(buf: &'a [u8]) -> Dec<'a> {
        Dec { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated file: needed {n} bytes at byte {}, only {} remain",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn utf8(&mut self, n: usize) -> Result<String> {
        let at = self.pos;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format(format!("invalid UTF-8 at byte {at}")))
    }

    fn str16(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        self.utf8(n)
    }

    /// Validates magic and version, returns the kind tag.
    fn header(&mut self) -> Result<u8> {
        let magic = self.take(4)?;
        if magic != MAGIC {
            return Err(Error::Format("bad magic: not an artifact file".into()));
        }
        let version = self.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported artifact version {version}")));
        }
        self.u8()
    }

    fn expect_tag(&mut self, want: u8) -> Result<()> {
        let tag = self.header()?;
        if tag != want {
            return Err(Error::Format(format!(
                "expected {}, found {}",
                tag_name(want),
                tag_name(tag)
            )));
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("unexpected trailing bytes at byte {}", self.pos)));
        }
        Ok(())
    }
}

/// Widths of one task's embeddings as recorded in a store header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskDims {
    pub task: TaskId,
    pub deep: usize,
    pub shallow: usize,
}

/// One exported row: all task embeddings in header order, deep then shallow
/// per task, flattened to f32.
#[derive(Debug, Clone, PartialEq)]
pub struct StoreRow {
    pub id: u64,
    /// Which ad product the row belongs to; ranking uses it to skip rows
    /// whose product does not serve the requested task.
    pub product: AdProduct,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    pub tower: Tower,
    pub tasks: Vec<TaskDims>,
    pub rows: Vec<StoreRow>,
}

impl EmbeddingStore {
    /// Embeds `examples` on one tower side in inference mode and freezes the
    /// result. An empty slice yields a valid store with zero rows.
    pub fn build(model: &mut MtmdModel, examples: &[Example], tower: Tower) -> Result<EmbeddingStore> {
        let shallow = *model.cfg.shallow_dims.last().expect("validated config");
        let tasks: Vec<TaskDims> = TaskId::ALL
            .into_iter()
            .map(|task| TaskDims { task, deep: model.cfg.emb_dims[task.index()], shallow })
            .collect();
        let mut rows = Vec::with_capacity(examples.len());
        let embedded = if examples.is_empty() { Vec::new() } else { model.embed(examples, tower)? };
        for emb in embedded {
            let mut values = Vec::with_capacity(row_width(&tasks));
            for dims in &tasks {
                let t = emb
                    .tasks
                    .iter()
                    .find(|t| t.task == dims.task)
                    .expect("every row carries all tasks");
                values.extend(t.deep.iter().map(|&v| v as f32));
                values.extend(t.shallow.iter().map(|&v| v as f32));
            }
            rows.push(StoreRow { id: emb.id, product: emb.domain.product, values });
        }
        Ok(EmbeddingStore { tower, tasks, rows })
    }

    pub fn dims(&self, task: TaskId) -> Option<TaskDims> {
        self.tasks.iter().copied().find(|d| d.task == task)
    }

    /// Byte offset of `task`'s deep block within a row, if present.
    fn start_of(&self, task: TaskId) -> Option<(usize, TaskDims)> {
        let mut off = 0;
        for d in &self.tasks {
            if d.task == task {
                return Some((off, *d));
            }
            off += d.deep + d.shallow;
        }
        None
    }

    pub fn deep<'a>(&self, row: &'a StoreRow, task: TaskId) -> Option<&'a [f32]> {
        let (off, d) = self.start_of(task)?;
        Some(&row.values[off..off + d.deep])
    }

    pub fn shallow<'a>(&self, row: &'a StoreRow, task: TaskId) -> Option<&'a [f32]> {
        let (off, d) = self.start_of(task)?;
        Some(&row.values[off + d.deep..off + d.deep + d.shallow])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let tag = match self.tower {
            Tower::Query => TAG_QUERY_STORE,
            Tower::Item => TAG_ITEM_STORE,
        };
        let mut enc = Enc::with_tag(tag);
        enc.u16(self.tasks.len() as u16);
        for d in &self.tasks {
            enc.str16(d.task.name());
            enc.u32(d.deep as u32);
            enc.u32(d.shallow as u32);
        }
        enc.u64(self.rows.len() as u64);
        for row in &self.rows {
            enc.u64(row.id);
            enc.u8(row.product.index() as u8);
            debug_assert_eq!(row.values.len(), row_width(&self.tasks));
            for &v in &row.values {
                enc.f32(v);
            }
        }
        enc.buf
    }

    pub fn from_bytes(buf: &[u8]) -> Result<EmbeddingStore> {
        let mut dec = Dec::new(buf);
        let tower = match dec.header()? {
            TAG_QUERY_STORE => Tower::Query,
            TAG_ITEM_STORE => Tower::Item,
            t => {
                return Err(Error::Format(format!(
                    "expected an embedding store, found {}",
                    tag_name(t)
                )))
            }
        };
        let n_tasks = dec.u16()? as usize;
        let mut tasks = Vec::with_capacity(n_tasks);
        for _ in 0..n_tasks {
            let at = dec.pos;
            let name = dec.str16()?;
            let task = TaskId::parse(&name)
                .map_err(|_| Error::Format(format!("unknown task '{name}' at byte {at}")))?;
            let deep = dec.u32()? as usize;
            let shallow = dec.u32()? as usize;
            tasks.push(TaskDims { task, deep, shallow });
        }
        let width = row_width(&tasks);
        let n_rows = dec.u64()? as usize;
        let mut rows = Vec::with_capacity(n_rows.min(1 << 20));
        for _ in 0..n_rows {
            let id = dec.u64()?;
            let at = dec.pos;
            let p = dec.u8()? as usize;
            let product = *AdProduct::ALL
                .get(p)
                .ok_or_else(|| Error::Format(format!("bad product tag {p} at byte {at}")))?;
            let mut values = Vec::with_capacity(width);
            for _ in 0..width {
                values.push(dec.f32()?);
            }
            rows.push(StoreRow { id, product, values });
        }
        dec.finish()?;
        Ok(EmbeddingStore { tower, tasks, rows })
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<EmbeddingStore> {
        EmbeddingStore::from_bytes(&std::fs::read(path)?)
    }
}

fn row_width(tasks: &[TaskDims]) -> usize {
    tasks.iter().map(|d| d.deep + d.shallow).sum()
}

fn kind_tag(kind: ParamKind) -> u8 {
    match kind {
        ParamKind::Dense => 0,
        ParamKind::Embedding => 1,
        ParamKind::State => 2,
    }
}

fn encode_params(enc: &mut Enc, reg: &ParamRegistry) {
    let ids = reg.sorted_ids();
    enc.u32(ids.len() as u32);
    for id in ids {
        let slot = reg.slot(id);
        enc.str16(&slot.name);
        enc.u8(kind_tag(slot.kind));
        enc.u32(slot.value.rows() as u32);
        enc.u32(slot.value.cols() as u32);
        for &v in slot.value.data() {
            enc.f64(v);
        }
    }
}

fn decode_params(dec: &mut Dec, reg: &mut ParamRegistry) -> Result<()> {
    let n = dec.u32()? as usize;
    let expected = reg.sorted_ids().len();
    if n != expected {
        return Err(Error::Format(format!(
            "checkpoint carries {n} parameters, the model expects {expected}"
        )));
    }
    let mut seen: HashSet<String> = HashSet::with_capacity(n);
    for _ in 0..n {
        let name = dec.str16()?;
        let kind = dec.u8()?;
        let rows = dec.u32()? as usize;
        let cols = dec.u32()? as usize;
        let id = reg
            .lookup(&name)
            .map_err(|_| Error::Format(format!("checkpoint has unknown parameter '{name}'")))?;
        if !seen.insert(name.clone()) {
            return Err(Error::Format(format!("duplicate parameter '{name}'")));
        }
        let slot = reg.slot_mut(id);
        if kind != kind_tag(slot.kind) || rows != slot.value.rows() || cols != slot.value.cols() {
            return Err(Error::Format(format!(
                "parameter '{name}' is {rows}x{cols} kind {kind}, the model expects {}x{} kind {}",
                slot.value.rows(),
                slot.value.cols(),
                kind_tag(slot.kind)
            )));
        }
        for v in slot.value.data_mut() {
            *v = dec.f64()?;
        }
    }
    Ok(())
}

pub fn model_to_bytes(model: &MtmdModel) -> Vec<u8> {
    let mut enc = Enc::with_tag(TAG_MODEL);
    let text = model_to_text(&model.cfg);
    enc.u32(text.len() as u32);
    enc.buf.extend_from_slice(text.as_bytes());
    enc.u64(model.schema.hash());
    encode_params(&mut enc, &model.reg);
    enc.buf
}

/// Restores a model checkpoint. The schema must hash to the value recorded
/// at save time, and the parameter set must match the rebuilt model exactly.
pub fn model_from_bytes(buf: &[u8], schema: &FeatureSchema) -> Result<MtmdModel> {
    let mut dec = Dec::new(buf);
    dec.expect_tag(TAG_MODEL)?;
    let len = dec.u32()? as usize;
    let cfg = model_from_text(&dec.utf8(len)?)?;
    let hash = dec.u64()?;
    if hash != schema.hash() {
        return Err(Error::Format(
            "checkpoint was built against a different feature schema".into(),
        ));
    }
    let mut model = MtmdModel::new(cfg, schema.clone(), 0)?;
    decode_params(&mut dec, &mut model.reg)?;
    dec.finish()?;
    Ok(model)
}

pub fn save_model(model: &MtmdModel, path: &Path) -> Result<()> {
    std::fs::write(path, model_to_bytes(model))?;
    Ok(())
}

pub fn load_model(path: &Path, schema: &FeatureSchema) -> Result<MtmdModel> {
    model_from_bytes(&std::fs::read(path)?, schema)
}

pub fn baseline_to_bytes(model: &BaselineModel) -> Vec<u8> {
    let mut enc = Enc::with_tag(TAG_BASELINE);
    enc.u8(model.domain.index() as u8);
    let text = baseline_to_text(&model.cfg);
    enc.u32(text.len() as u32);
    enc.buf.extend_from_slice(text.as_bytes());
    enc.u64(model.schema.hash());
    encode_params(&mut enc, &model.reg);
    enc.buf
}

pub fn baseline_from_bytes(buf: &[u8], schema: &FeatureSchema) -> Result<BaselineModel> {
    let mut dec = Dec::new(buf);
    dec.expect_tag(TAG_BASELINE)?;
    let at = dec.pos;
    let d = dec.u8()? as usize;
    let domains = DomainKey::all();
    let domain = *domains
        .get(d)
        .ok_or_else(|| Error::Format(format!("bad domain tag {d} at byte {at}")))?;
    let len = dec.u32()? as usize;
    let cfg = baseline_from_text(&dec.utf8(len)?)?;
    let hash = dec.u64()?;
    if hash != schema.hash() {
        return Err(Error::Format(
            "checkpoint was built against a different feature schema".into(),
        ));
    }
    let mut model = BaselineModel::new(cfg, schema.clone(), domain, 0)?;
    decode_params(&mut dec, &mut model.reg)?;
    dec.finish()?;
    Ok(model)
}

pub fn save_baseline(model: &BaselineModel, path: &Path) -> Result<()> {
    std::fs::write(path, baseline_to_bytes(model))?;
    Ok(())
}

pub fn load_baseline(path: &Path, schema: &FeatureSchema) -> Result<BaselineModel> {
    baseline_from_bytes(&std::fs::read(path)?, schema)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dot32(q: &[f64], v: &[f32]) -> f64 {
    debug_assert_eq!(q.len(), v.len());
    q.iter().zip(v).map(|(a, &b)| a * f64::from(b)).sum()
}

/// Ranks the store's rows for one query by a task's predicted probability:
/// descending, ties broken by ascending id, at most `k` rows. The query is
/// embedded online; rows whose product does not serve the task are skipped.
pub fn rank_top_k(
    model: &mut MtmdModel,
    query: &Example,
    store: &EmbeddingStore,
    task: TaskId,
    k: usize,
) -> Result<Vec<(u64, f64)>> {
    if store.tower != Tower::Item {
        return Err(Error::Config("ranking needs an item embedding store".into()));
    }
    let emb = model.embed(std::slice::from_ref(query), Tower::Query)?.remove(0);
    let q_of = |t: TaskId| -> Result<(Vec<f64>, Vec<f64>)> {
        let dims = store
            .dims(t)
            .ok_or_else(|| Error::Config(format!("store has no {} embeddings", t.name())))?;
        let q = emb.tasks.iter().find(|e| e.task == t).expect("all tasks embedded");
        if q.deep.len() != dims.deep || q.shallow.len() != dims.shallow {
            return Err(Error::Config(format!(
                "{} embedding is {}+{} wide, store rows are {}+{}",
                t.name(),
                q.deep.len(),
                q.shallow.len(),
                dims.deep,
                dims.shallow
            )));
        }
        Ok((q.deep.clone(), q.shallow.clone()))
    };
    let (q_deep, q_shallow) = q_of(task)?;
    let ctr = if model.cfg.constrained && task != TaskId::Ctr { Some(q_of(TaskId::Ctr)?) } else { None };
    let mut scored: Vec<(u64, f64)> = Vec::new();
    for row in &store.rows {
        if !task.active_for(row.product) {
            continue;
        }
        let s = dot32(&q_deep, store.deep(row, task).unwrap())
            + dot32(&q_shallow, store.shallow(row, task).unwrap());
        let p = match &ctr {
            Some((c_deep, c_shallow)) => {
                let s_ctr = dot32(c_deep, store.deep(row, TaskId::Ctr).unwrap())
                    + dot32(c_shallow, store.shallow(row, TaskId::Ctr).unwrap());
                sigmoid(s) * sigmoid(s_ctr)
            }
            None => sigmoid(s),
        };
        scored.push((row.id, p.clamp(PROB_CLAMP.0, PROB_CLAMP.1)));
    }
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baseline::BaselineConfig;
    use crate::datagen::{generate_dataset, DomainMix};
    use crate::numkernel::tape::BnMode;
    use crate::schema::{make_default_schema, Surface};
    use crate::teacher::TeacherOracle;
    use crate::towers::ModelConfig;
    use crate::trainer::{train, TrainConfig};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            constrained: true,
            emb_dims: [6, 4, 4],
            domain_adapt: true,
            dcn: true,
            pre_norm: true,
            deep_dims: vec![10, 8],
            shallow_dims: vec![8, 4],
            gate_hidden: vec![6],
            dcn_rank: 2,
            dcn_depth: 1,
        }
    }

    fn setup(n: usize, seed: u64) -> (FeatureSchema, Vec<Example>) {
        let schema = make_default_schema();
        let oracle = TeacherOracle::new(7, 0.6, &schema);
        let examples = generate_dataset(seed, n, &DomainMix::uniform(), &schema, &oracle).unwrap();
        (schema, examples)
    }

    fn tiny_train_cfg(steps: usize) -> TrainConfig {
        TrainConfig { batch_size: 8, steps, ..TrainConfig::default() }
    }

    #[test]
    fn store_round_trip_is_byte_identical() {
        let (schema, examples) = setup(20, 30);
        let mut model = MtmdModel::new(tiny_config(), schema, 31).unwrap();
        for tower in Tower::ALL {
            let store = EmbeddingStore::build(&mut model, &examples, tower).unwrap();
            let bytes = store.to_bytes();
            let back = EmbeddingStore::from_bytes(&bytes).unwrap();
            assert_eq!(back, store);
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn file_round_trip_preserves_bytes() {
        let (schema, examples) = setup(8, 32);
        let mut model = MtmdModel::new(tiny_config(), schema, 33).unwrap();
        let store = EmbeddingStore::build(&mut model, &examples, Tower::Item).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("items.emb");
        store.write_to(&path).unwrap();
        let back = EmbeddingStore::read_from(&path).unwrap();
        assert_eq!(back.to_bytes(), store.to_bytes());
    }

    #[test]
    fn empty_store_is_a_valid_file() {
        let (schema, _) = setup(1, 34);
        let mut model = MtmdModel::new(tiny_config(), schema, 35).unwrap();
        let store = EmbeddingStore::build(&mut model, &[], Tower::Item).unwrap();
        let back = EmbeddingStore::from_bytes(&store.to_bytes()).unwrap();
        assert!(back.rows.is_empty());
        assert_eq!(back.tasks.len(), 3);
    }

    #[test]
    fn header_for_asymmetric_widths_records_each_task() {
        let (schema, examples) = setup(2, 36);
        let cfg = ModelConfig {
            emb_dims: ModelConfig::constrained_profile(),
            ..ModelConfig::default()
        };
        let mut model = MtmdModel::new(cfg, schema, 37).unwrap();
        let store = EmbeddingStore::build(&mut model, &examples[..1], Tower::Item).unwrap();
        let dims: Vec<(TaskId, usize, usize)> =
            store.tasks.iter().map(|d| (d.task, d.deep, d.shallow)).collect();
        assert_eq!(
            dims,
            vec![
                (TaskId::Ctr, 128, 64),
                (TaskId::Gctr, 32, 64),
                (TaskId::Octr, 32, 64),
            ]
        );
        assert_eq!(store.rows[0].values.len(), 128 + 32 + 32 + 3 * 64);
    }

    #[test]
    fn same_seed_builds_identical_bytes() {
        let (schema, examples) = setup(12, 38);
        let mut a = MtmdModel::new(tiny_config(), schema.clone(), 39).unwrap();
        let mut b = MtmdModel::new(tiny_config(), schema, 39).unwrap();
        let sa = EmbeddingStore::build(&mut a, &examples, Tower::Item).unwrap();
        let sb = EmbeddingStore::build(&mut b, &examples, Tower::Item).unwrap();
        assert_eq!(sa.to_bytes(), sb.to_bytes());
    }

    #[test]
    fn corrupt_headers_are_format_errors() {
        let (schema, examples) = setup(2, 40);
        let mut model = MtmdModel::new(tiny_config(), schema, 41).unwrap();
        let good = EmbeddingStore::build(&mut model, &examples, Tower::Item).unwrap().to_bytes();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        let err = EmbeddingStore::from_bytes(&bad_magic).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
        assert!(err.to_string().contains("magic"));

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        let err = EmbeddingStore::from_bytes(&bad_version).unwrap_err();
        assert!(err.to_string().contains("version"));

        let mut bad_task = good;
        // first task name starts right after tag byte and task count
        let name_at = 4 + 4 + 1 + 2 + 2;
        bad_task[name_at] = b'x';
        let err = EmbeddingStore::from_bytes(&bad_task).unwrap_err();
        assert!(err.to_string().contains("unknown task"), "{err}");
    }

    #[test]
    fn truncation_reports_the_byte_offset() {
        let (schema, examples) = setup(3, 42);
        let mut model = MtmdModel::new(tiny_config(), schema, 43).unwrap();
        let bytes = EmbeddingStore::build(&mut model, &examples, Tower::Item).unwrap().to_bytes();
        for cut in [3, 8, 11, 20, bytes.len() / 2, bytes.len() - 1] {
            let err = EmbeddingStore::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Format(_)), "cut {cut}: {err}");
            assert!(err.to_string().contains("byte"), "cut {cut}: {err}");
        }
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let (schema, examples) = setup(2, 44);
        let mut model = MtmdModel::new(tiny_config(), schema, 45).unwrap();
        let mut bytes =
            EmbeddingStore::build(&mut model, &examples, Tower::Item).unwrap().to_bytes();
        bytes.push(0);
        let err = EmbeddingStore::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("trailing"), "{err}");
    }

    #[test]
    fn rank_matches_brute_force_over_the_store() {
        let (schema, examples) = setup(51, 46);
        let mut model = MtmdModel::new(tiny_config(), schema, 47).unwrap();
        let (query, items) = examples.split_first().unwrap();
        let store = EmbeddingStore::build(&mut model, items, Tower::Item).unwrap();
        for task in TaskId::ALL {
            let q = model.embed(std::slice::from_ref(query), Tower::Query).unwrap().remove(0);
            let find = |t: TaskId| q.tasks.iter().find(|e| e.task == t).unwrap().clone();
            let qt = find(task);
            let qc = find(TaskId::Ctr);
            let mut all: Vec<(u64, f64)> = store
                .rows
                .iter()
                .filter(|row| task.active_for(row.product))
                .map(|row| {
                    let s = dot32(&qt.deep, store.deep(row, task).unwrap())
                        + dot32(&qt.shallow, store.shallow(row, task).unwrap());
                    let p = if task == TaskId::Ctr {
                        sigmoid(s)
                    } else {
                        let sc = dot32(&qc.deep, store.deep(row, TaskId::Ctr).unwrap())
                            + dot32(&qc.shallow, store.shallow(row, TaskId::Ctr).unwrap());
                        sigmoid(s) * sigmoid(sc)
                    };
                    (row.id, p.clamp(PROB_CLAMP.0, PROB_CLAMP.1))
                })
                .collect();
            all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            for k in [1, 5, all.len(), all.len() + 10] {
                let got = rank_top_k(&mut model, query, &store, task, k).unwrap();
                let want: Vec<(u64, f64)> = all.iter().copied().take(k).collect();
                assert_eq!(got, want, "task {} k {k}", task.name());
            }
        }
    }

    #[test]
    fn rank_skips_rows_whose_product_masks_the_task() {
        let (schema, examples) = setup(40, 48);
        let mut model = MtmdModel::new(tiny_config(), schema, 49).unwrap();
        let query = examples[0].clone();
        let store = EmbeddingStore::build(&mut model, &examples[1..], Tower::Item).unwrap();
        let ranked = rank_top_k(&mut model, &query, &store, TaskId::Octr, 100).unwrap();
        let standard: Vec<u64> = store
            .rows
            .iter()
            .filter(|r| r.product == AdProduct::Standard)
            .map(|r| r.id)
            .collect();
        assert!(!ranked.is_empty());
        assert_eq!(ranked.len(), standard.len());
        assert!(ranked.iter().all(|(id, _)| standard.contains(id)));
        for w in ranked.windows(2) {
            assert!(w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0));
        }
    }

    #[test]
    fn rank_serves_the_conversion_task_from_any_query_domain() {
        let (schema, examples) = setup(14, 50);
        let mut model = MtmdModel::new(tiny_config(), schema, 51).unwrap();
        let query = examples
            .iter()
            .find(|e| e.domain.product == AdProduct::Shopping)
            .unwrap()
            .clone();
        let store = EmbeddingStore::build(&mut model, &examples, Tower::Item).unwrap();
        let eligible =
            store.rows.iter().filter(|r| r.product == AdProduct::Standard).count();
        let ranked = rank_top_k(&mut model, &query, &store, TaskId::Octr, 100).unwrap();
        assert_eq!(ranked.len(), eligible);

        let shopping_only: Vec<Example> = examples
            .iter()
            .filter(|e| e.domain.product == AdProduct::Shopping)
            .cloned()
            .collect();
        let store = EmbeddingStore::build(&mut model, &shopping_only, Tower::Item).unwrap();
        assert!(rank_top_k(&mut model, &query, &store, TaskId::Octr, 5).unwrap().is_empty());
    }

    #[test]
    fn rank_ties_break_by_ascending_id() {
        let (schema, examples) = setup(4, 52);
        let mut model = MtmdModel::new(tiny_config(), schema, 53).unwrap();
        let built = EmbeddingStore::build(&mut model, &examples[1..2], Tower::Item).unwrap();
        let template = built.rows[0].clone();
        let mut store = built.clone();
        store.rows = vec![
            StoreRow { id: 9, ..template.clone() },
            StoreRow { id: 3, ..template.clone() },
            StoreRow { id: 6, ..template },
        ];
        let ranked = rank_top_k(&mut model, &examples[0], &store, TaskId::Ctr, 3).unwrap();
        let ids: Vec<u64> = ranked.iter().map(|(id, _)| *id).collect();
        assert_eq!(ids, vec![3, 6, 9]);
        assert_eq!(ranked[0].1, ranked[2].1);
    }

    #[test]
    fn rank_needs_an_item_store() {
        let (schema, examples) = setup(4, 54);
        let mut model = MtmdModel::new(tiny_config(), schema, 55).unwrap();
        let store = EmbeddingStore::build(&mut model, &examples[1..], Tower::Query).unwrap();
        let err = rank_top_k(&mut model, &examples[0], &store, TaskId::Ctr, 2).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn rank_rejects_width_mismatch() {
        let (schema, examples) = setup(4, 56);
        let mut model = MtmdModel::new(tiny_config(), schema.clone(), 57).unwrap();
        let mut wide = MtmdModel::new(
            ModelConfig { emb_dims: [8, 4, 4], ..tiny_config() },
            schema,
            57,
        )
        .unwrap();
        let store = EmbeddingStore::build(&mut wide, &examples[1..], Tower::Item).unwrap();
        let err = rank_top_k(&mut model, &examples[0], &store, TaskId::Ctr, 2).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn model_checkpoint_restores_predictions_bitwise() {
        let (schema, examples) = setup(24, 58);
        let mut model = MtmdModel::new(tiny_config(), schema.clone(), 59).unwrap();
        train(&mut model, &examples, &tiny_train_cfg(5), |_, _| Ok(())).unwrap();
        let bytes = model_to_bytes(&model);
        let mut back = model_from_bytes(&bytes, &schema).unwrap();
        assert_eq!(back.cfg, model.cfg);
        let want = model.predict_batch(&examples, BnMode::Infer).unwrap();
        let got = back.predict_batch(&examples, BnMode::Infer).unwrap();
        for (w, g) in want.iter().zip(&got) {
            assert_eq!(w.ctr.to_bits(), g.ctr.to_bits());
            assert_eq!(w.gctr.to_bits(), g.gctr.to_bits());
            assert_eq!(w.octr.map(f64::to_bits), g.octr.map(f64::to_bits));
        }
        assert_eq!(model_to_bytes(&back), bytes);
    }

    #[test]
    fn checkpoint_file_round_trip() {
        let (schema, examples) = setup(8, 60);
        let mut model = MtmdModel::new(tiny_config(), schema.clone(), 61).unwrap();
        train(&mut model, &examples, &tiny_train_cfg(2), |_, _| Ok(())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_model(&model, &path).unwrap();
        let back = load_model(&path, &schema).unwrap();
        assert_eq!(model_to_bytes(&back), model_to_bytes(&model));
    }

    #[test]
    fn checkpoint_schema_hash_is_checked() {
        let (schema, _) = setup(1, 62);
        let model = MtmdModel::new(tiny_config(), schema.clone(), 63).unwrap();
        let mut bytes = model_to_bytes(&model);
        // the schema hash sits right after the config text block
        let text_len =
            u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
        bytes[13 + text_len] ^= 0xff;
        let err = model_from_bytes(&bytes, &schema).err().expect("load should fail");
        assert!(err.to_string().contains("schema"), "{err}");
    }

    #[test]
    fn checkpoint_parameter_set_must_match_the_config() {
        let (schema, _) = setup(1, 64);
        let model = MtmdModel::new(tiny_config(), schema.clone(), 65).unwrap();
        let bytes = model_to_bytes(&model);
        // rewrite the embedded config so the rebuilt model expects a
        // different parameter set than the blobs describe
        let text_len = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
        let text = std::str::from_utf8(&bytes[13..13 + text_len]).unwrap();
        let patched = text.replace("dcn = true", "dcn = false");
        let mut out = bytes[..9].to_vec();
        out.extend_from_slice(&(patched.len() as u32).to_le_bytes());
        out.extend_from_slice(patched.as_bytes());
        out.extend_from_slice(&bytes[13 + text_len..]);
        let err = model_from_bytes(&out, &schema).err().expect("load should fail");
        assert!(matches!(err, Error::Format(_)), "{err}");
    }

    #[test]
    fn store_bytes_are_not_a_checkpoint() {
        let (schema, examples) = setup(2, 66);
        let mut model = MtmdModel::new(tiny_config(), schema.clone(), 67).unwrap();
        let bytes = EmbeddingStore::build(&mut model, &examples, Tower::Item).unwrap().to_bytes();
        let err = model_from_bytes(&bytes, &schema).err().expect("load should fail");
        assert!(err.to_string().contains("checkpoint"), "{err}");
    }

    #[test]
    fn baseline_checkpoint_round_trips() {
        let (schema, examples) = setup(60, 68);
        let domain = DomainKey::new(Surface::Search, AdProduct::Shopping);
        let slice: Vec<Example> =
            examples.iter().filter(|e| e.domain == domain).cloned().collect();
        assert!(slice.len() >= 4);
        let cfg = BaselineConfig { deep_dims: vec![10, 8], emb_dim: 6 };
        let mut model = BaselineModel::new(cfg, schema.clone(), domain, 69).unwrap();
        train(&mut model, &slice, &tiny_train_cfg(3), |_, _| Ok(())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("baseline.ckpt");
        save_baseline(&model, &path).unwrap();
        let mut back = load_baseline(&path, &schema).unwrap();
        assert_eq!(back.domain, domain);
        assert_eq!(back.cfg, model.cfg);
        let want = model.predict_batch(&slice, BnMode::Infer).unwrap();
        let got = back.predict_batch(&slice, BnMode::Infer).unwrap();
        for (w, g) in want.iter().zip(&got) {
            assert_eq!(w.ctr.to_bits(), g.ctr.to_bits());
        }
        assert_eq!(baseline_to_bytes(&back), baseline_to_bytes(&model));
    }
}
