//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "STCK"  magic, 4 bytes
//! u16     format version (currently 1)
//! u32     record count
//! record* each: u32 name length, UTF-8 name,
//!               u32 rank, rank x u32 extents,
//!               numel x f64 values
//! ```
//!
//! Records are written in parameter visit order, so saving, loading into the
//! same architecture, and saving again reproduces the file byte for byte.
//! Loading is strict about the file (any truncation, trailing garbage, bad
//! magic, or unknown version is an error) but partial with respect to the
//! model: parameters without a record keep their current values, which is
//! how a backbone-only checkpoint is loaded into a larger adapted model.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Parameterized, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"STCK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Serializes every parameter (frozen ones included) to `path`.
pub fn save_checkpoint(model: &dyn Parameterized, path: &Path) -> Result<()> {
    let mut records: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    let mut seen = BTreeMap::new();
    let mut duplicate = None;
    model.visit_params(&mut |p| {
        if seen.insert(p.name().to_string(), ()).is_some() && duplicate.is_none() {
            duplicate = Some(p.name().to_string());
        }
        records.push((
            p.name().to_string(),
            p.value().shape().to_vec(),
            p.value().values().to_vec(),
        ));
    });
    if let Some(name) = duplicate {
        return Err(Error::State(format!(
            "cannot checkpoint a model with duplicate parameter name `{name}`"
        )));
    }

    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, shape, values) in &records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Length(format!(
                "checkpoint ends inside {what}: needed {n} bytes at offset {}, file has {}",
                self.at,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Loads a checkpoint into the model, returning the record names applied in
/// file order. Every record must match a parameter by name and shape;
/// parameters not mentioned in the file are left as they are.
pub fn load_checkpoint_into(model: &mut dyn Parameterized, path: &Path) -> Result<Vec<String>> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        at: 0,
    };

    let magic = r.take(4, "the magic header")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "not a checkpoint file: magic bytes {magic:02x?}"
        )));
    }
    let version = r.u16("the version field")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let count = r.u32("the record count")? as usize;

    let mut order = Vec::with_capacity(count);
    let mut by_name: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    for i in 0..count {
        let name_len = r.u32("a record name length")? as usize;
        let name_bytes = r.take(name_len, "a record name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| Error::Format(format!("record {i} has a non-UTF-8 name")))?
            .to_string();
        let rank = r.u32("a record rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut numel = 1u64;
        for _ in 0..rank {
            let d = r.u32("a record extent")? as usize;
            numel = numel.saturating_mul(d as u64);
            shape.push(d);
        }
        let payload = r.take(numel as usize * 8, &format!("the payload of `{name}`"))?;
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        if by_name.insert(name.clone(), (shape, values)).is_some() {
            return Err(Error::Checkpoint(format!(
                "duplicate record `{name}` in checkpoint"
            )));
        }
        order.push(name);
    }
    if r.at != bytes.len() {
        return Err(Error::Length(format!(
            "{} trailing bytes after the last record",
            bytes.len() - r.at
        )));
    }

    // Validate every record against the model before touching anything, so
    // a failed load never leaves the model half-written.
    let mut model_shapes: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    model.visit_params(&mut |p| {
        model_shapes.insert(p.name().to_string(), p.value().shape().to_vec());
    });
    for name in &order {
        let (shape, _) = &by_name[name];
        match model_shapes.get(name) {
            None => {
                return Err(Error::Checkpoint(format!(
                    "checkpoint record `{name}` matches no parameter in the receiving model"
                )))
            }
            Some(expected) if expected != shape => {
                return Err(Error::Checkpoint(format!(
                    "record `{name}` has shape {shape:?}, model expects {expected:?}"
                )))
            }
            Some(_) => {}
        }
    }

    let mut failure: Option<Error> = None;
    model.visit_params_mut(&mut |p| {
        if failure.is_some() {
            return;
        }
        if let Some((shape, values)) = by_name.get(p.name()) {
            match Tensor::new(shape.clone(), values.clone()) {
                Ok(t) => {
                    if let Err(e) = p.set_value(t) {
                        failure = Some(e);
                    }
                }
                Err(e) => failure = Some(e),
            }
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(order),
    }
}
