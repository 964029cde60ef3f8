//! Bit-exact file formats: binary sparse increments and dense checkpoints
//! (little-endian, CRC32-tailed), flat key-value run configs, and
//! byte-deterministic CSV/JSON writers.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::landscape::LandscapeScan;
use crate::mask::MaskSelection;
use crate::models::ParamSet;
use crate::optim::SparseIncrement;
use crate::tensor::{numel, ElemType, Tensor};

const INCREMENT_MAGIC: &[u8; 4] = b"SIFT";
const CHECKPOINT_MAGIC: &[u8; 4] = b"SIFC";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {0}")]
    BadVersion(u32),
    #[error("unknown element-type tag {0}")]
    BadElemType(u8),
    #[error("checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    BadChecksum { stored: u32, computed: u32 },
    #[error("indices not strictly increasing in `{0}`")]
    NonMonotonicIndices(String),
    #[error("index {index} out of range for `{name}` ({elements} elements)")]
    IndexOutOfRange {
        name: String,
        index: u64,
        elements: u64,
    },
    #[error("file truncated")]
    Truncated,
    #[error("malformed field: {0}")]
    Malformed(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("key `{key}`: {detail}")]
    BadValue { key: String, detail: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

// ── CRC32 (IEEE, reflected) ─────────────────────────────────────────────

fn crc32_table() -> [u32; 256] {
    let mut table = [0u32; 256];
    let mut i = 0;
    while i < 256 {
        let mut c = i as u32;
        let mut k = 0;
        while k < 8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
            k += 1;
        }
        table[i] = c;
        i += 1;
    }
    table
}

pub fn crc32(data: &[u8]) -> u32 {
    static TABLE: std::sync::OnceLock<[u32; 256]> = std::sync::OnceLock::new();
    let table = TABLE.get_or_init(crc32_table);
    let mut c = 0xFFFF_FFFFu32;
    for &b in data {
        c = table[((c ^ b as u32) & 0xFF) as usize] ^ (c >> 8);
    }
    c ^ 0xFFFF_FFFF
}

// ── Little-endian cursor ────────────────────────────────────────────────

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PersistError> {
        if self.pos + n > self.data.len() {
            return Err(PersistError::Truncated);
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, PersistError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, PersistError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, PersistError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, PersistError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, PersistError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String, PersistError> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| PersistError::Malformed("tensor name is not utf-8".into()))
    }
}

fn push_name(buf: &mut Vec<u8>, name: &str) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
}

fn push_value(buf: &mut Vec<u8>, v: f64, elem: ElemType) {
    match elem {
        ElemType::F32 => buf.extend_from_slice(&(v as f32).to_le_bytes()),
        ElemType::F64 => buf.extend_from_slice(&v.to_le_bytes()),
    }
}

fn read_value(cur: &mut Cursor<'_>, elem: ElemType) -> Result<f64, PersistError> {
    match elem {
        ElemType::F32 => Ok(cur.f32()? as f64),
        ElemType::F64 => cur.f64(),
    }
}

fn finish_payload(path: &Path, mut payload: Vec<u8>) -> Result<(), PersistError> {
    let crc = crc32(&payload);
    payload.extend_from_slice(&crc.to_le_bytes());
    let mut f = std::fs::File::create(path)?;
    f.write_all(&payload)?;
    Ok(())
}

fn open_payload(path: &Path, magic: &[u8; 4]) -> Result<Vec<u8>, PersistError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 4 {
        return Err(PersistError::Truncated);
    }
    if &bytes[..4] != magic {
        return Err(PersistError::BadMagic);
    }
    if bytes.len() < 8 {
        return Err(PersistError::Truncated);
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32(payload);
    if stored != computed {
        return Err(PersistError::BadChecksum { stored, computed });
    }
    Ok(payload.to_vec())
}

// ── Sparse increment file ───────────────────────────────────────────────

/// A sparse increment together with the tensor extents and element type
/// it was saved with.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementFile {
    pub elem: ElemType,
    pub shapes: BTreeMap<String, Vec<usize>>,
    pub increment: SparseIncrement,
}

/// Serialize an increment. Tensor extents come from the checkpoint the
/// increment applies to; values are stored in the run's element type.
pub fn save_increment(
    path: &Path,
    increment: &SparseIncrement,
    params: &ParamSet,
    elem: ElemType,
) -> Result<(), PersistError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(INCREMENT_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.push(elem.tag());
    buf.extend_from_slice(&(increment.len() as u64).to_le_bytes());
    for (name, (indices, values)) in increment.iter() {
        let shape: Vec<usize> = params
            .get(name)
            .map(|t| t.shape().to_vec())
            .unwrap_or_else(|| vec![indices.iter().max().map_or(1, |&m| m + 1)]);
        push_name(&mut buf, name);
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &e in &shape {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        buf.extend_from_slice(&(indices.len() as u64).to_le_bytes());
        for &i in indices {
            buf.extend_from_slice(&(i as u64).to_le_bytes());
        }
        for &v in values {
            push_value(&mut buf, v, elem);
        }
    }
    finish_payload(path, buf)
}

pub fn load_increment(path: &Path) -> Result<IncrementFile, PersistError> {
    let payload = open_payload(path, INCREMENT_MAGIC)?;
    let mut cur = Cursor {
        data: &payload,
        pos: 4,
    };
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(PersistError::BadVersion(version));
    }
    let elem = ElemType::from_tag(cur.u8()?).ok_or_else(|| {
        PersistError::BadElemType(payload[8])
    })?;
    let n_tensors = cur.u64()?;
    let mut shapes = BTreeMap::new();
    let mut increment = SparseIncrement::empty();
    for _ in 0..n_tensors {
        let name = cur.name()?;
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64()? as usize);
        }
        let elements = numel(&shape) as u64;
        let count = cur.u64()?;
        let mut indices = Vec::with_capacity(count as usize);
        let mut prev: Option<u64> = None;
        for _ in 0..count {
            let i = cur.u64()?;
            if let Some(p) = prev {
                if i <= p {
                    return Err(PersistError::NonMonotonicIndices(name));
                }
            }
            if i >= elements {
                return Err(PersistError::IndexOutOfRange {
                    name,
                    index: i,
                    elements,
                });
            }
            prev = Some(i);
            indices.push(i as usize);
        }
        let mut values = Vec::with_capacity(count as usize);
        for _ in 0..count {
            values.push(read_value(&mut cur, elem)?);
        }
        shapes.insert(name.clone(), shape);
        increment.insert(name, indices, values);
    }
    if cur.pos != payload.len() {
        return Err(PersistError::Malformed("trailing bytes after records".into()));
    }
    Ok(IncrementFile {
        elem,
        shapes,
        increment,
    })
}

// ── Dense checkpoint file ───────────────────────────────────────────────

pub fn save_checkpoint(path: &Path, params: &ParamSet, elem: ElemType) -> Result<(), PersistError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.push(elem.tag());
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, tensor) in params.iter() {
        push_name(&mut buf, name);
        buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &e in tensor.shape() {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            push_value(&mut buf, v, elem);
        }
    }
    finish_payload(path, buf)
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamSet, ElemType), PersistError> {
    let payload = open_payload(path, CHECKPOINT_MAGIC)?;
    let mut cur = Cursor {
        data: &payload,
        pos: 4,
    };
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(PersistError::BadVersion(version));
    }
    let elem = ElemType::from_tag(cur.u8()?).ok_or_else(|| PersistError::BadElemType(payload[8]))?;
    let n_tensors = cur.u64()?;
    let mut params = ParamSet::default();
    for _ in 0..n_tensors {
        let name = cur.name()?;
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64()? as usize);
        }
        let n = numel(&shape);
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(read_value(&mut cur, elem)?);
        }
        let tensor = Tensor::new(shape, data)
            .map_err(|e| PersistError::Malformed(format!("tensor `{name}`: {e}")))?;
        params.insert(name, tensor);
    }
    if cur.pos != payload.len() {
        return Err(PersistError::Malformed("trailing bytes after records".into()));
    }
    Ok((params, elem))
}

// ── Masks as JSON ───────────────────────────────────────────────────────

pub fn save_mask(path: &Path, mask: &MaskSelection) -> Result<(), PersistError> {
    write_report_json(path, mask)
}

pub fn load_mask(path: &Path) -> Result<MaskSelection, PersistError> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

// ── Float formatting ────────────────────────────────────────────────────

/// Shortest round-trip decimal; non-finite values print as `nan`, `inf`,
/// `-inf`.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".to_string() } else { "-inf".to_string() }
    } else {
        format!("{v}")
    }
}

// ── Scan CSV ────────────────────────────────────────────────────────────

/// `# key: value` metadata lines, a header, then one row per grid point.
/// 1-D: `alpha,loss,flag`; 2-D: `alpha,beta,loss,flag`. The flag marks
/// non-finite losses.
pub fn write_scan_csv(path: &Path, scan: &LandscapeScan) -> Result<(), PersistError> {
    let mut out = String::new();
    for (k, v) in &scan.metadata {
        out.push_str(&format!("# {k}: {v}\n"));
    }
    match &scan.betas {
        None => {
            out.push_str("alpha,loss,flag\n");
            for (i, &a) in scan.alphas.iter().enumerate() {
                out.push_str(&format!(
                    "{},{},{}\n",
                    fmt_f64(a),
                    fmt_f64(scan.losses[i]),
                    scan.non_finite[i] as u8
                ));
            }
        }
        Some(betas) => {
            out.push_str("alpha,beta,loss,flag\n");
            for (ai, &a) in scan.alphas.iter().enumerate() {
                for (bi, &b) in betas.iter().enumerate() {
                    let i = ai * betas.len() + bi;
                    out.push_str(&format!(
                        "{},{},{},{}\n",
                        fmt_f64(a),
                        fmt_f64(b),
                        fmt_f64(scan.losses[i]),
                        scan.non_finite[i] as u8
                    ));
                }
            }
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Generic metadata + header + rows CSV writer with deterministic float
/// formatting (callers pre-format values through [`fmt_f64`]).
pub fn write_csv(
    path: &Path,
    metadata: &BTreeMap<String, String>,
    header: &str,
    rows: &[Vec<String>],
) -> Result<(), PersistError> {
    let mut out = String::new();
    for (k, v) in metadata {
        out.push_str(&format!("# {k}: {v}\n"));
    }
    out.push_str(header);
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Pretty JSON with a trailing newline; byte-deterministic for identical
/// inputs.
pub fn write_report_json<T: Serialize>(path: &Path, report: &T) -> Result<(), PersistError> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

// ── Dataset text dump ───────────────────────────────────────────────────

/// Line-delimited token-id dump for inspection; regeneration from the
/// seed is the source of truth. Unsupervised targets print as `_`.
pub fn write_dataset_text(path: &Path, dataset: &crate::tasks::Dataset) -> Result<(), PersistError> {
    use crate::tape::IGNORE_TARGET;
    use crate::tasks::Split;
    let mut out = String::new();
    for split in [Split::Pretrain, Split::FinetuneTrain, Split::FinetuneEval] {
        for ex in dataset.split(split) {
            let toks: Vec<String> = ex.tokens.iter().map(|t| t.to_string()).collect();
            let tgts: Vec<String> = ex
                .targets
                .iter()
                .map(|&t| {
                    if t == IGNORE_TARGET {
                        "_".to_string()
                    } else {
                        t.to_string()
                    }
                })
                .collect();
            out.push_str(&format!("{split}\t{}\t{}\n", toks.join(" "), tgts.join(" ")));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ── Run configuration ───────────────────────────────────────────────────

/// Flat dotted-key configuration. The key set is closed: applying an
/// unknown key is an error, and the serialized form always carries every
/// key, seeds included, so a manifest is a complete, re-runnable config.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    map: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let defaults: &[(&str, &str)] = &[
            ("model.kind", "tiny-transformer"),
            ("model.hidden", "32"),
            ("model.layers", "2"),
            ("model.heads", "4"),
            ("model.mlp_dims", "8,32,8"),
            ("model.seed", "1"),
            ("task.kind", "seq-classify"),
            ("task.seed", "11"),
            ("task.seq_len", "12"),
            ("task.modulus", "59"),
            ("task.alphabet", "24"),
            ("task.pretrain_size", "2048"),
            ("task.train_size", "512"),
            ("task.eval_size", "256"),
            ("data.batch_size", "32"),
            ("data.order_seed", "7"),
            ("optim.lr", "0.003"),
            ("optim.beta1", "0.9"),
            ("optim.beta2", "0.999"),
            ("optim.eps", "1e-8"),
            ("optim.weight_decay", "0.0"),
            ("optim.schedule", "constant"),
            ("pretrain.epochs", "30"),
            ("train.method", "sift"),
            ("train.filter", "QKVO"),
            ("train.epochs", "10"),
            ("sift.rate", "0.008"),
            ("sift.granularity", "per-tensor"),
            ("sift.calibration_batches", "1"),
            ("sift.mask_seed", "17"),
            ("sift.reselect_interval", "0"),
            ("sift.micro_batches", "1"),
            ("run.elem", "f64"),
            ("landscape.alpha_min", "-0.5"),
            ("landscape.alpha_max", "1.5"),
            ("landscape.alpha_points", "41"),
            ("landscape.beta_min", "-1"),
            ("landscape.beta_max", "1"),
            ("landscape.beta_points", "41"),
            ("landscape.dir_seed", "23"),
            ("landscape.eval_batches", "2"),
            ("analyze.bins", "64"),
            ("analyze.capture_batches", "8"),
            ("analyze.taus", "0.005,0.01,0.05"),
            ("analyze.fractions", "0.001,0.005,0.01,0.05,0.1,0.25,0.5,1.0"),
            ("compare.methods", "sift,random,head-only"),
            ("compare.rates", "0.008"),
            ("compare.seeds", "5"),
            ("run.dump_data", "false"),
        ];
        RunConfig {
            map: defaults
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

impl RunConfig {
    /// Set one key, rejecting keys outside the schema.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        if !self.map.contains_key(key) {
            return Err(ConfigError::UnknownKey(key.to_string()));
        }
        self.map.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    /// Parse `key = value` lines (`#` comments, blank lines allowed) on
    /// top of the current values.
    pub fn merge_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line: lineno + 1,
                    text: raw.to_string(),
                });
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        cfg.merge_text(&std::fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    /// Canonical full serialization; a valid config file in itself.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.map {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn get(&self, key: &str) -> Result<&str, ConfigError> {
        self.map
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| ConfigError::UnknownKey(key.to_string()))
    }

    pub fn get_usize(&self, key: &str) -> Result<usize, ConfigError> {
        self.get(key)?.parse().map_err(|e| ConfigError::BadValue {
            key: key.to_string(),
            detail: format!("{e}"),
        })
    }

    pub fn get_u64(&self, key: &str) -> Result<u64, ConfigError> {
        self.get(key)?.parse().map_err(|e| ConfigError::BadValue {
            key: key.to_string(),
            detail: format!("{e}"),
        })
    }

    pub fn get_f64(&self, key: &str) -> Result<f64, ConfigError> {
        self.get(key)?.parse().map_err(|e| ConfigError::BadValue {
            key: key.to_string(),
            detail: format!("{e}"),
        })
    }

    pub fn get_bool(&self, key: &str) -> Result<bool, ConfigError> {
        match self.get(key)? {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(ConfigError::BadValue {
                key: key.to_string(),
                detail: format!("expected true/false, got `{other}`"),
            }),
        }
    }

    pub fn get_f64_list(&self, key: &str) -> Result<Vec<f64>, ConfigError> {
        self.get(key)?
            .split(',')
            .map(|s| {
                s.trim().parse().map_err(|e| ConfigError::BadValue {
                    key: key.to_string(),
                    detail: format!("{e}"),
                })
            })
            .collect()
    }

    pub fn get_usize_list(&self, key: &str) -> Result<Vec<usize>, ConfigError> {
        self.get(key)?
            .split(',')
            .map(|s| {
                s.trim().parse().map_err(|e| ConfigError::BadValue {
                    key: key.to_string(),
                    detail: format!("{e}"),
                })
            })
            .collect()
    }

    pub fn get_str_list(&self, key: &str) -> Result<Vec<String>, ConfigError> {
        Ok(self
            .get(key)?
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().expect("tempdir")
    }

    fn sample_increment() -> (SparseIncrement, ParamSet) {
        let mut inc = SparseIncrement::empty();
        inc.insert("layer.0.attn.q", vec![0, 5, 17], vec![0.5, -1.25, 3.0]);
        inc.insert("layer.0.attn.v", vec![2], vec![42.0]);
        let mut params = ParamSet::default();
        params.insert("layer.0.attn.q", Tensor::zeros(vec![6, 3]));
        params.insert("layer.0.attn.v", Tensor::zeros(vec![4]));
        (inc, params)
    }

    #[test]
    fn increment_round_trip_bitwise() {
        let dir = tmpdir();
        let path = dir.path().join("inc.sift");
        let (inc, params) = sample_increment();
        save_increment(&path, &inc, &params, ElemType::F64).unwrap();
        let loaded = load_increment(&path).unwrap();
        assert_eq!(loaded.increment, inc);
        assert_eq!(loaded.elem, ElemType::F64);
        assert_eq!(loaded.shapes["layer.0.attn.q"], vec![6, 3]);
        // Second write produces identical bytes.
        let path2 = dir.path().join("inc2.sift");
        save_increment(&path2, &inc, &params, ElemType::F64).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn increment_f32_round_trip_on_representable_values() {
        let dir = tmpdir();
        let path = dir.path().join("inc32.sift");
        let mut inc = SparseIncrement::empty();
        inc.insert("w", vec![1, 3], vec![0.5, -0.125]);
        let mut params = ParamSet::default();
        params.insert("w", Tensor::zeros(vec![4]));
        save_increment(&path, &inc, &params, ElemType::F32).unwrap();
        let loaded = load_increment(&path).unwrap();
        assert_eq!(loaded.increment, inc);
        assert_eq!(loaded.elem, ElemType::F32);
    }

    #[test]
    fn empty_increment_is_valid_minimal_file() {
        let dir = tmpdir();
        let path = dir.path().join("empty.sift");
        save_increment(&path, &SparseIncrement::empty(), &ParamSet::default(), ElemType::F64)
            .unwrap();
        let loaded = load_increment(&path).unwrap();
        assert!(loaded.increment.is_empty());
    }

    #[test]
    fn corruption_detected_with_distinct_errors() {
        let dir = tmpdir();
        let path = dir.path().join("inc.sift");
        let (inc, params) = sample_increment();
        save_increment(&path, &inc, &params, ElemType::F64).unwrap();
        let good = std::fs::read(&path).unwrap();

        // Flip one payload byte -> checksum.
        let mut bad = good.clone();
        bad[20] ^= 0xFF;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(
            load_increment(&path),
            Err(PersistError::BadChecksum { .. })
        ));

        // Wrong magic.
        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_increment(&path), Err(PersistError::BadMagic)));

        // Wrong version (with checksum re-stamped so only the version is bad).
        let mut bad = good.clone();
        bad[4] = 99;
        let len = bad.len();
        let crc = crc32(&bad[..len - 4]);
        bad[len - 4..].copy_from_slice(&crc.to_le_bytes());
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(
            load_increment(&path),
            Err(PersistError::BadVersion(99))
        ));

        // Truncated.
        std::fs::write(&path, &good[..good.len() / 2]).unwrap();
        let err = load_increment(&path).unwrap_err();
        assert!(
            matches!(err, PersistError::BadChecksum { .. } | PersistError::Truncated),
            "got {err:?}"
        );
    }

    #[test]
    fn non_monotonic_indices_rejected() {
        let dir = tmpdir();
        let path = dir.path().join("inc.sift");
        let mut inc = SparseIncrement::empty();
        inc.insert("w", vec![3, 1], vec![1.0, 2.0]); // deliberately unsorted
        let mut params = ParamSet::default();
        params.insert("w", Tensor::zeros(vec![8]));
        save_increment(&path, &inc, &params, ElemType::F64).unwrap();
        assert!(matches!(
            load_increment(&path),
            Err(PersistError::NonMonotonicIndices(_))
        ));
    }

    #[test]
    fn out_of_range_index_rejected() {
        let dir = tmpdir();
        let path = dir.path().join("inc.sift");
        let mut inc = SparseIncrement::empty();
        inc.insert("w", vec![9], vec![1.0]);
        let mut params = ParamSet::default();
        params.insert("w", Tensor::zeros(vec![4])); // only 4 elements
        save_increment(&path, &inc, &params, ElemType::F64).unwrap();
        assert!(matches!(
            load_increment(&path),
            Err(PersistError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tmpdir();
        let path = dir.path().join("model.ckpt");
        let mut params = ParamSet::default();
        params.insert("a", Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-7, 9.0]).unwrap());
        params.insert("b", Tensor::from_vec(vec![0.25; 5]));
        save_checkpoint(&path, &params, ElemType::F64).unwrap();
        let (loaded, elem) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, params);
        assert_eq!(elem, ElemType::F64);
    }

    #[test]
    fn scan_csv_columns_and_nan_rule() {
        let dir = tmpdir();
        let path = dir.path().join("scan.csv");
        let scan = LandscapeScan {
            alphas: vec![0.0, 0.5],
            betas: None,
            losses: vec![1.25, f64::NAN],
            non_finite: vec![false, true],
            metadata: [("eval_set".to_string(), "finetune-eval".to_string())]
                .into_iter()
                .collect(),
        };
        write_scan_csv(&path, &scan).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# eval_set: finetune-eval\nalpha,loss,flag\n"));
        assert!(text.contains("0.5,nan,1\n"));
        // Byte determinism.
        let path2 = dir.path().join("scan2.csv");
        write_scan_csv(&path2, &scan).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn shortest_round_trip_formatting() {
        assert_eq!(fmt_f64(0.1), "0.1");
        assert_eq!(fmt_f64(1.0 / 3.0), "0.3333333333333333");
        assert_eq!(fmt_f64(f64::NAN), "nan");
        assert_eq!(fmt_f64(f64::INFINITY), "inf");
        assert_eq!(fmt_f64(f64::NEG_INFINITY), "-inf");
        let v = 0.1 + 0.2;
        assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
    }

    #[test]
    fn mask_json_round_trip() {
        use crate::mask::{select_from_gradients, MaskGranularity};
        let dir = tmpdir();
        let path = dir.path().join("mask.json");
        let grads: BTreeMap<String, Vec<f64>> =
            [("w".to_string(), vec![3.0, -1.0, 0.5, 9.0])].into_iter().collect();
        let mask = select_from_gradients(&grads, 0.5, MaskGranularity::PerTensor, 2).unwrap();
        save_mask(&path, &mask).unwrap();
        let loaded = load_mask(&path).unwrap();
        assert_eq!(loaded, mask);
    }

    #[test]
    fn config_defaults_parse_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_text();
        let mut reparsed = RunConfig::default();
        reparsed.merge_text(&text).unwrap();
        assert_eq!(reparsed, cfg);
        assert_eq!(cfg.get("train.method").unwrap(), "sift");
        assert_eq!(cfg.get_f64("sift.rate").unwrap(), 0.008);
        assert_eq!(cfg.get_usize("model.hidden").unwrap(), 32);
    }

    #[test]
    fn config_unknown_key_rejected() {
        let mut cfg = RunConfig::default();
        assert!(matches!(
            cfg.set("model.nonsense", "1"),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            cfg.merge_text("typo.key = 3\n"),
            Err(ConfigError::UnknownKey(_))
        ));
    }

    #[test]
    fn config_syntax_error_reports_line() {
        let mut cfg = RunConfig::default();
        let err = cfg.merge_text("model.hidden = 64\nbroken line\n").unwrap_err();
        assert!(matches!(err, ConfigError::Syntax { line: 2, .. }));
    }

    #[test]
    fn dataset_text_dump() {
        use crate::tasks::{make_task, TaskKind, TaskSizes, TaskSpec};
        let dir = tmpdir();
        let path = dir.path().join("data.txt");
        let data = make_task(&TaskSpec {
            kind: TaskKind::ModularArith,
            seed: 1,
            sizes: TaskSizes {
                pretrain: 3,
                finetune_train: 2,
                finetune_eval: 2,
            },
            seq_len: 3,
            modulus: 7,
            alphabet: 4,
        })
        .unwrap();
        write_dataset_text(&path, &data).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 7);
        assert!(text.lines().all(|l| l.split('\t').count() == 3));
        assert!(text.contains("pretrain\t"));
        assert!(text.contains("_ _ "));
    }
}
