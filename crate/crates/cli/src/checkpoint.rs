//! The `IDXN` checkpoint container.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "IDXN" version count
//! count x (name_len name rank dims[rank] f32[prod(dims)])
//! crc32 of every preceding byte
//! ```
//!
//! A training state is stored as `param/<name>` for every parameter,
//! `adam/m/<name>` and `adam/v/<name>` for every parameter with moment
//! estimates, and the scalars `adam/step` and `train/step`.

use std::collections::HashMap;
use std::path::Path;

use indexnet_core::mattenet::TrainState;
use indexnet_core::optim::{AdamState, Moments};
use indexnet_core::{ParamStore, Tensor};

use crate::error::{io_err, CliError, Result};

pub const MAGIC: &[u8; 4] = b"IDXN";
pub const VERSION: u32 = 1;

/// Steps are stored as `f32`, which is exact below this bound.
const MAX_EXACT_STEP: u64 = 1 << 24;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Record {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<f32>) -> Self {
        Self { name: name.into(), shape: shape.to_vec(), data }
    }
}

fn integrity(msg: impl Into<String>) -> CliError {
    CliError::Integrity(msg.into())
}

fn u32_of(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| CliError::Usage(format!("{what} {n} does not fit the checkpoint format")))
}

pub fn encode(records: &[Record]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32_of(records.len(), "record count")?.to_le_bytes());
    for r in records {
        if r.shape.iter().product::<usize>() != r.data.len() {
            return Err(CliError::Usage(format!("record {} has shape {:?} but {} values", r.name, r.shape, r.data.len())));
        }
        out.extend_from_slice(&u32_of(r.name.len(), "name length")?.to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.extend_from_slice(&u32_of(r.shape.len(), "rank")?.to_le_bytes());
        for &d in &r.shape {
            out.extend_from_slice(&u32_of(d, "dimension")?.to_le_bytes());
        }
        for v in &r.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| integrity("truncated record"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Record>> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(integrity("not an IDXN checkpoint"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(integrity(format!("CRC mismatch (stored {stored:08x}, computed {actual:08x})")));
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(integrity(format!("unsupported checkpoint version {version} (expected {VERSION})")));
    }
    let count = r.u32()? as usize;
    let mut records = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| integrity("record name is not UTF-8"))?.to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| integrity(format!("record {name} is too large")))?;
        let data = r.take(numel)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        records.push(Record { name, shape, data });
    }
    if r.pos != body.len() {
        return Err(integrity(format!("{} trailing bytes after the last record", body.len() - r.pos)));
    }
    Ok(records)
}

pub fn write(path: &Path, records: &[Record]) -> Result<()> {
    let bytes = encode(records)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn read(path: &Path) -> Result<Vec<Record>> {
    decode(&std::fs::read(path).map_err(io_err(path))?)
}

fn step_record(name: &str, step: u64) -> Result<Record> {
    if step >= MAX_EXACT_STEP {
        return Err(CliError::Usage(format!("{name} {step} is too large to store exactly")));
    }
    Ok(Record::new(name, &[], vec![step as f32]))
}

pub fn state_records(state: &TrainState<f32>) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    for (_, p) in state.params.iter() {
        out.push(Record::new(format!("param/{}", p.name), p.value.shape(), p.value.data().to_vec()));
    }
    for (id, p) in state.params.iter() {
        if let Some(Some(m)) = state.adam.moments.get(id.index()) {
            out.push(Record::new(format!("adam/m/{}", p.name), p.value.shape(), m.m.clone()));
            out.push(Record::new(format!("adam/v/{}", p.name), p.value.shape(), m.v.clone()));
        }
    }
    out.push(step_record("adam/step", state.adam.step)?);
    out.push(step_record("train/step", state.step)?);
    Ok(out)
}

/// Rebuilds a training state on top of `template`, the freshly built
/// parameters of the same model. Every parameter must be present exactly
/// once with its expected shape, and no unknown records may remain.
pub fn restore_state(records: Vec<Record>, template: &ParamStore<f32>) -> Result<TrainState<f32>> {
    let mut by_name: HashMap<String, Record> = HashMap::new();
    for r in records {
        if by_name.contains_key(&r.name) {
            return Err(integrity(format!("record {} appears twice", r.name)));
        }
        by_name.insert(r.name.clone(), r);
    }
    let mut take = |name: &str, shape: &[usize]| -> Result<Option<Vec<f32>>> {
        match by_name.remove(name) {
            None => Ok(None),
            Some(r) if r.shape == shape => Ok(Some(r.data)),
            Some(r) => Err(integrity(format!("record {name} has shape {:?}, model expects {shape:?}", r.shape))),
        }
    };

    let mut params = template.clone();
    let mut moments = vec![None; template.len()];
    for (id, p) in template.iter() {
        let shape = p.value.shape();
        let value = take(&format!("param/{}", p.name), shape)?
            .ok_or_else(|| integrity(format!("parameter {} is missing", p.name)))?;
        params.set(id, Tensor::new(shape, value)?)?;
        let m = take(&format!("adam/m/{}", p.name), shape)?;
        let v = take(&format!("adam/v/{}", p.name), shape)?;
        moments[id.index()] = match (m, v) {
            (Some(m), Some(v)) => Some(Moments { m, v }),
            (None, None) => None,
            _ => return Err(integrity(format!("parameter {} has only one Adam moment", p.name))),
        };
    }
    let mut step = |name: &str| -> Result<u64> {
        let v = take(name, &[])?.ok_or_else(|| integrity(format!("{name} is missing")))?[0];
        if !(v >= 0.0 && v.fract() == 0.0) {
            return Err(integrity(format!("{name} is not a step count: {v}")));
        }
        Ok(v as u64)
    };
    if moments.iter().all(Option::is_none) {
        moments.clear();
    }
    let adam_step = step("adam/step")?;
    let train_step = step("train/step")?;
    if let Some(extra) = by_name.keys().min() {
        return Err(integrity(format!("unexpected record {extra}")));
    }
    Ok(TrainState {
        params,
        adam: AdamState { step: adam_step, moments },
        step: train_step,
    })
}

pub fn save_state(path: &Path, state: &TrainState<f32>) -> Result<()> {
    write(path, &state_records(state)?)
}

pub fn load_state(path: &Path, template: &ParamStore<f32>) -> Result<TrainState<f32>> {
    restore_state(read(path)?, template)
}
