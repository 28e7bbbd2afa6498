//! Binary checkpoints, all integers and floats little-endian:
//!
//! ```text
//! magic "HRNC" | u32 version | u32 config length | config TOML
//! u32 record count | records
//! record: u32 name length | name | u32 rank | rank × u32 extents | f32 values
//! ```
//!
//! Records hold every parameter in model order, then the running mean and
//! variance of every batch-norm layer as `<layer>.running_mean` and
//! `<layer>.running_var`.

use std::path::Path;

use indexmap::IndexMap;

use crate::architecture::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"HRNC";
const RUNNING_MEAN: &str = ".running_mean";
const RUNNING_VAR: &str = ".running_var";

pub fn checkpoint_bytes(model: &Model) -> Vec<u8> {
    fn put_u32(out: &mut Vec<u8>, v: usize) {
        out.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
    }
    fn put_record(out: &mut Vec<u8>, name: &str, shape: &[usize], values: &[f32]) {
        put_u32(out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(out, shape.len());
        for &d in shape {
            put_u32(out, d);
        }
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION as usize);
    let config = model.config().to_toml_string();
    put_u32(&mut out, config.len());
    out.extend_from_slice(config.as_bytes());
    put_u32(&mut out, model.params().len() + 2 * model.bn_states().len());
    for (name, t) in model.params() {
        put_record(&mut out, name, t.shape(), t.data());
    }
    for (name, s) in model.bn_states() {
        let c = [s.channels()];
        put_record(
            &mut out,
            &format!("{name}{RUNNING_MEAN}"),
            &c,
            &s.running_mean,
        );
        put_record(
            &mut out,
            &format!("{name}{RUNNING_VAR}"),
            &c,
            &s.running_var,
        );
    }
    out
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(model)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::CheckpointTruncated(format!(
                "{what} needs {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn text(&mut self, what: &str) -> Result<&'a str> {
        let n = self.u32(what)?;
        std::str::from_utf8(self.take(n, what)?).map_err(|e| Error::Parse {
            what: format!("checkpoint {what}"),
            detail: e.to_string(),
        })
    }
}

struct Parsed<'a> {
    config: &'a str,
    records: IndexMap<&'a str, Tensor>,
}

fn parse(bytes: &[u8]) -> Result<Parsed<'_>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Parse {
            what: "checkpoint".into(),
            detail: "missing HRNC magic".into(),
        });
    }
    let version = r.u32("version")? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let config = r.text("config")?;
    let count = r.u32("record count")?;
    let mut records = IndexMap::new();
    for i in 0..count {
        let name = r.text(&format!("record {i} name"))?;
        let rank = r.u32(&format!("`{name}` rank"))?;
        let shape = (0..rank)
            .map(|_| r.u32(&format!("`{name}` extents")))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| {
                Error::CheckpointTruncated(format!("`{name}` extents {shape:?} overflow"))
            })?;
        let data = r
            .take(numel, &format!("`{name}` values"))?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if records.insert(name, Tensor::new(shape, data)?).is_some() {
            return Err(Error::Parse {
                what: "checkpoint".into(),
                detail: format!("duplicate record `{name}`"),
            });
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Parse {
            what: "checkpoint".into(),
            detail: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(Parsed { config, records })
}

fn fill(model: &mut Model, mut records: IndexMap<&str, Tensor>) -> Result<()> {
    let bn_names: Vec<String> = model.bn_states().keys().cloned().collect();
    let known = |name: &str| {
        model.params().contains_key(name)
            || [RUNNING_MEAN, RUNNING_VAR].iter().any(|suffix| {
                name.strip_suffix(suffix)
                    .is_some_and(|layer| model.bn_states().contains_key(layer))
            })
    };
    if let Some(name) = records.keys().find(|n| !known(n)) {
        return Err(Error::UnknownParameter(name.to_string()));
    }
    let mut take = |name: &str, shape: &[usize]| -> Result<Tensor> {
        let t = records
            .swap_remove(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))?;
        if t.shape() != shape {
            return Err(Error::shape(
                "load_checkpoint",
                format!(
                    "`{name}` stored as {:?}, model expects {shape:?}",
                    t.shape()
                ),
            ));
        }
        Ok(t)
    };
    let names: Vec<(String, Vec<usize>)> = model
        .params()
        .iter()
        .map(|(n, t)| (n.clone(), t.shape().to_vec()))
        .collect();
    let mut values = Vec::with_capacity(names.len());
    for (name, shape) in &names {
        values.push(take(name, shape)?);
    }
    let mut stats = Vec::with_capacity(bn_names.len());
    for layer in &bn_names {
        let c = [model.bn_states()[layer].channels()];
        let mean = take(&format!("{layer}{RUNNING_MEAN}"), &c)?;
        let var = take(&format!("{layer}{RUNNING_VAR}"), &c)?;
        stats.push((mean.into_data(), var.into_data()));
    }
    for ((_, p), v) in model.params_mut().zip(values) {
        *p = v;
    }
    for (layer, (mean, var)) in bn_names.iter().zip(stats) {
        let s = model
            .bn_state_mut(layer)
            .expect("layer listed by the model");
        s.running_mean = mean;
        s.running_var = var;
    }
    Ok(())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Model rebuilt from the configuration stored in the checkpoint.
pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = read(path)?;
    let parsed = parse(&bytes)?;
    let mut model = Model::new(&ModelConfig::from_toml_str(parsed.config)?)?;
    fill(&mut model, parsed.records)?;
    Ok(model)
}

/// Loads the stored tensors into a fresh model built from `config`. Every
/// stored name must exist in that model, and the first model parameter
/// absent from the file is reported as missing.
pub fn load_checkpoint_into(path: &Path, config: &ModelConfig) -> Result<Model> {
    let bytes = read(path)?;
    let parsed = parse(&bytes)?;
    let mut model = Model::new(config)?;
    fill(&mut model, parsed.records)?;
    Ok(model)
}
