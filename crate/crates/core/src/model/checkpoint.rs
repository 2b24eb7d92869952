//! Single-file checkpoints.
//!
//! ```text
//! normformer-checkpoint v1\n
//! config <n>\n
//! <n bytes: canonical `key = value` model config>
//! tensors <count>\n
//! tensor <name> <rank> <d0> … <dk>\n
//! <8·numel bytes: little-endian IEEE-754 f64>
//! …
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{Model, ModelParams};
use crate::config;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &str = "normformer-checkpoint v1";

pub fn write_checkpoint(model: &Model, mut w: impl Write) -> Result<()> {
    let cfg = config::model_config_to_kv(&model.config);
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "config {}", cfg.len())?;
    w.write_all(cfg.as_bytes())?;
    let tensors = model.params.flatten();
    writeln!(w, "tensors {}", tensors.len())?;
    for (name, t) in tensors {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        writeln!(w, "tensor {name} {} {}", t.shape().len(), dims.join(" "))?;
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

fn header(r: &mut impl BufRead) -> Result<String> {
    let mut line = String::new();
    if r.read_line(&mut line)? == 0 {
        return Err(Error::Checkpoint("unexpected end of file".into()));
    }
    Ok(line.trim_end_matches('\n').to_string())
}

fn field<T: std::str::FromStr>(s: Option<&str>, what: &str) -> Result<T> {
    s.and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Checkpoint(format!("malformed {what}")))
}

pub fn read_checkpoint(mut r: impl BufRead) -> Result<Model> {
    if header(&mut r)? != MAGIC {
        return Err(Error::Checkpoint("bad magic line".into()));
    }
    let line = header(&mut r)?;
    let len: usize = field(line.strip_prefix("config "), "config length")?;
    let mut cfg = vec![0u8; len];
    r.read_exact(&mut cfg)?;
    let cfg = String::from_utf8(cfg).map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
    let model_cfg = config::model_config_from_kv(&cfg)?;

    let line = header(&mut r)?;
    let count: usize = field(line.strip_prefix("tensors "), "tensor count")?;
    let mut loaded = Vec::with_capacity(count);
    for _ in 0..count {
        let line = header(&mut r)?;
        let mut parts = line.split(' ');
        if parts.next() != Some("tensor") {
            return Err(Error::Checkpoint(format!("expected tensor header, got `{line}`")));
        }
        let name = parts
            .next()
            .ok_or_else(|| Error::Checkpoint("missing tensor name".into()))?
            .to_string();
        let rank: usize = field(parts.next(), "rank")?;
        let shape = (0..rank)
            .map(|_| field::<usize>(parts.next(), "dimension"))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; 8 * n];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        loaded.push((name, Tensor::new(shape, data)?));
    }

    // Allocate the expected layout, then fill it by name.
    let mut params = ModelParams::init(&model_cfg)?;
    let mut it = loaded.into_iter();
    let mut err = None;
    params.visit_mut(&mut |name, slot| {
        if err.is_some() {
            return;
        }
        match it.next() {
            Some((n, t)) if n == name && t.shape() == slot.shape() => *slot = t,
            Some((n, t)) => {
                err = Some(Error::Checkpoint(format!(
                    "expected `{name}` {:?}, found `{n}` {:?}",
                    slot.shape(),
                    t.shape()
                )))
            }
            None => err = Some(Error::Checkpoint(format!("missing tensor `{name}`"))),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if it.next().is_some() {
        return Err(Error::Checkpoint("unexpected extra tensors".into()));
    }
    Model::from_parts(model_cfg, params)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
