//! Model checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MDGC"  u32 version  u64 config_len  config JSON
//! u8 dtype (0 = f32, 1 = f64)  u32 tensor_count
//! per tensor: u32 name_len  name  u32 ndim  u64 dims[ndim]  raw values
//! ```
//!
//! Tensors are stored under their hierarchical parameter names, in the order
//! the model registers them.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::locnet::{Model, ModelConfig};
use crate::tensor::{Float, Tensor, FLOAT_BYTES};

const MAGIC: &[u8; 4] = b"MDGC";
const VERSION: u32 = 1;

fn dtype_code() -> u8 {
    if FLOAT_BYTES == 4 {
        0
    } else {
        1
    }
}

pub fn write_model<W: Write>(model: &Model, mut w: W) -> Result<()> {
    let config = serde_json::to_vec(&model.config)
        .map_err(|e| Error::config(format!("cannot serialise model config: {e}")))?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(config.len() as u64).to_le_bytes())?;
    w.write_all(&config)?;
    w.write_all(&[dtype_code()])?;
    w.write_all(&(model.store.len() as u32).to_le_bytes())?;
    for (_, p) in model.store.iter() {
        w.write_all(&(p.name.len() as u32).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        let shape = p.value().shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(p.value().len() * FLOAT_BYTES);
        for v in p.value().data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!(
                    "truncated {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }
}

pub fn read_model<R: Read>(mut r: R) -> Result<Model> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "not a model checkpoint (bad magic)".into(),
        });
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported checkpoint version {version}"),
        });
    }
    let config_len = c.u64("config length")? as usize;
    let config_at = c.pos;
    let config: ModelConfig = serde_json::from_slice(c.take(config_len, "config")?).map_err(|e| Error::Format {
        offset: config_at as u64,
        msg: format!("invalid model config: {e}"),
    })?;
    let dtype = c.take(1, "dtype")?[0];
    if dtype != dtype_code() {
        return Err(c.err(format!(
            "checkpoint dtype code {dtype} does not match this build ({})",
            dtype_code()
        )));
    }
    let mut model = Model::build(config)?;
    let count = c.u32("tensor count")? as usize;
    if count != model.store.len() {
        return Err(c.err(format!(
            "checkpoint holds {count} tensors, model has {}",
            model.store.len()
        )));
    }
    for _ in 0..count {
        let name_len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(name_len, "name")?)
            .map_err(|_| c.err("tensor name is not UTF-8"))?
            .to_string();
        let id = model
            .store
            .find(&name)
            .ok_or_else(|| c.err(format!("unknown tensor {name}")))?;
        let ndim = c.u32("rank")? as usize;
        let shape = (0..ndim)
            .map(|_| c.u64("extent").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if shape != model.store.get(id).shape() {
            return Err(c.err(format!(
                "tensor {name} has shape {shape:?}, model expects {:?}",
                model.store.get(id).shape()
            )));
        }
        let n: usize = shape.iter().product();
        let raw = c.take(n * FLOAT_BYTES, "tensor data")?;
        let data = raw
            .chunks_exact(FLOAT_BYTES)
            .map(|b| Float::from_le_bytes(b.try_into().expect("float bytes")))
            .collect();
        model.store.set(id, Tensor::new(shape, data)?)?;
    }
    if c.pos != bytes.len() {
        return Err(c.err(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(model)
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_model(model, &mut buf)?;
    fs::write(path, buf).map_err(Error::file(path))
}

pub fn load_model(path: &Path) -> Result<Model> {
    let f = fs::File::open(path).map_err(Error::file(path))?;
    read_model(std::io::BufReader::new(f))
}
