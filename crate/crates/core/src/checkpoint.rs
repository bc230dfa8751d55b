//! Versioned binary container for named tensors.
//!
//! Layout: a magic line (e.g. `QANCHOR-CKPT-1\n`), a little-endian `u64`
//! header length, a JSON header describing every tensor, then the raw
//! little-endian `f64` data of all tensors in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const CKPT_MAGIC: &str = "QANCHOR-CKPT-1";
pub const PROMPT_MAGIC: &str = "QANCHOR-PT-1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    #[serde(default = "yes")]
    trainable: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

/// Decoded container contents.
#[derive(Debug, Clone)]
pub struct Container {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor, bool)>,
}

impl Container {
    pub fn into_store(self) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, t, trainable) in self.tensors {
            let id = store.add(name, t);
            store.set_trainable(id, trainable);
        }
        store
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _, _)| n == name).map(|(_, t, _)| t)
    }
}

pub fn write_container<'a>(
    path: &Path,
    magic: &str,
    meta: serde_json::Value,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor, bool)>,
) -> Result<()> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let header = Header {
        meta,
        tensors: tensors
            .iter()
            .map(|(n, t, tr)| Entry {
                name: n.to_string(),
                shape: t.shape().to_vec(),
                trainable: *tr,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(magic.as_bytes())?;
    w.write_all(b"\n")?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, t, _) in &tensors {
        for x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_store(path: &Path, magic: &str, meta: serde_json::Value, store: &ParamStore) -> Result<()> {
    let entries: Vec<(&str, &Tensor, bool)> = store
        .ids()
        .map(|id| (store.name(id), store.get(id), store.is_trainable(id)))
        .collect();
    write_container(path, magic, meta, entries)
}

pub fn read_container(path: &Path, magic: &str) -> Result<Container> {
    let load_err = |msg: String| Error::Load {
        path: path.to_path_buf(),
        msg,
    };
    let file = File::open(path).map_err(|e| load_err(e.to_string()))?;
    let mut r = BufReader::new(file);
    let mut head = vec![0u8; magic.len() + 1];
    r.read_exact(&mut head).map_err(|_| load_err("file too short".into()))?;
    if &head[..magic.len()] != magic.as_bytes() || head[magic.len()] != b'\n' {
        return Err(load_err(format!("not a {magic} file")));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|_| load_err("truncated header".into()))?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 30 {
        return Err(load_err("implausible header length".into()));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|_| load_err("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| load_err(e.to_string()))?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut buf = [0u8; 8];
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut buf)
                .map_err(|_| load_err(format!("truncated data in tensor {}", e.name)))?;
            data.push(f64::from_le_bytes(buf));
        }
        tensors.push((e.name, Tensor::new(e.shape, data)?, e.trainable));
    }
    if r.read(&mut buf)? != 0 {
        return Err(load_err("trailing bytes after tensor data".into()));
    }
    Ok(Container {
        meta: header.meta,
        tensors,
    })
}
