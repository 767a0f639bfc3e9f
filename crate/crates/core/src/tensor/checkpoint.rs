//! Binary parameter checkpoints.
//!
//! Layout (little-endian): magic `PSCK`, `u32` version, `u32`-length meta
//! string of `key=value` lines, `u32` parameter count, then per parameter its
//! name, `u32` rank, `u32` dims, and finally every parameter's values as
//! `f32` in name-table order. A trailing CRC32 covers everything before it.

use std::path::Path;

use super::{ParameterStore, Tensor};
use crate::error::{Error, Result};
use crate::io::{write_file, BinReader, BinWriter};

const MAGIC: &[u8; 4] = b"PSCK";
const VERSION: u32 = 1;

/// Parameters plus the model description needed to rebuild their owner.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub store: ParameterStore,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = BinWriter::new(MAGIC, VERSION);
        let mut meta = String::new();
        for (k, v) in &self.meta {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Config(format!("checkpoint meta entry `{k}` is not a single key=value line")));
            }
            meta.push_str(&format!("{k}={v}\n"));
        }
        w.bytes(meta.as_bytes());
        w.u32(self.store.len() as u32);
        for id in self.store.ids() {
            w.bytes(self.store.name(id).as_bytes());
            let shape = self.store.value(id).shape();
            w.u32(shape.len() as u32);
            for &d in shape {
                w.u32(d as u32);
            }
        }
        for id in self.store.ids() {
            for &v in self.store.value(id).data() {
                w.f32(v as f32);
            }
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = BinReader::open(bytes, MAGIC, VERSION)?;
        let meta_text = r.string()?;
        let mut meta = Vec::new();
        for line in meta_text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(r.position(), format!("meta line `{line}` lacks `=`")))?;
            meta.push((k.to_string(), v.to_string()));
        }
        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            if rank == 0 || rank > 8 {
                return Err(Error::format(r.position(), format!("parameter `{name}` has rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            table.push((name, shape));
        }
        let mut store = ParameterStore::new();
        for (name, shape) in table {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
            let at = r.position();
            let t = Tensor::new(shape, data).map_err(|e| Error::format(at, e.to_string()))?;
            store.add(&name, t).map_err(|e| Error::format(at, e.to_string()))?;
        }
        r.finish()?;
        Ok(Checkpoint { meta, store })
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    write_file(path, checkpoint.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    Checkpoint::from_bytes(&bytes)
}
