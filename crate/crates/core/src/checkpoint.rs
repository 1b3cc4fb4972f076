//! Versioned binary checkpoint.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "GBSTCKPT1\n"
//! u64 config length, then the config as `key = value` text
//! u64 step
//! u64 parameter count
//! per parameter:
//!   u32 name length, name bytes
//!   u8 frozen flag
//!   u32 rank, rank × u64 extents
//!   extents-product × f64 values
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};
use crate::transformer::Model;

pub const MAGIC: &[u8; 10] = b"GBSTCKPT1\n";

pub fn to_bytes(model: &Model, config: &RunConfig) -> Result<Vec<u8>> {
    if config.model != *model.config() {
        return Err(Error::Checkpoint("run config does not describe this model".into()));
    }
    let mut out = Vec::new();
    out.write_all(MAGIC)?;
    let text = config.to_text();
    out.write_all(&(text.len() as u64).to_le_bytes())?;
    out.write_all(text.as_bytes())?;
    out.write_all(&model.step.to_le_bytes())?;
    out.write_all(&(model.params.len() as u64).to_le_bytes())?;
    for (_, p) in model.params.iter() {
        out.write_all(&(p.name.len() as u32).to_le_bytes())?;
        out.write_all(p.name.as_bytes())?;
        out.write_all(&[u8::from(p.frozen)])?;
        out.write_all(&(p.value.shape().len() as u32).to_le_bytes())?;
        for &e in p.value.shape() {
            out.write_all(&(e as u64).to_le_bytes())?;
        }
        for v in p.value.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() < n {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.take(8)?.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.take(4)?.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("non-UTF-8 text".into()))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<(RunConfig, Model)> {
    let mut r = Reader { buf };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a GBSTCKPT1 file".into()));
    }
    let n = r.u64()? as usize;
    let config = RunConfig::parse(&r.string(n)?)?;
    let step = r.u64()?;
    let count = r.u64()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = r.string(n)?;
        let frozen = r.take(1)?[0] != 0;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let raw = r.take(len * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let id = store.add(name, Tensor::new(shape, data)?)?;
        store.get_mut(id).frozen = frozen;
    }
    if !r.buf.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", r.buf.len())));
    }
    let model = Model::from_params(config.model.clone(), store, step)?;
    Ok((config, model))
}

pub fn save(path: &Path, model: &Model, config: &RunConfig) -> Result<()> {
    fs::write(path, to_bytes(model, config)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(RunConfig, Model)> {
    from_bytes(&fs::read(path)?)
}
