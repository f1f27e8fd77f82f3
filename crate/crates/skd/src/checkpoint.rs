//! `SKDC` checkpoints.
//!
//! ```text
//! "SKDC" | version u32 | config_len u32 | config text (sorted key=value lines)
//! n_tensors u32 | per tensor: name_len u32, name, rank u32, dims u32 × rank
//! f32 LE values of every tensor, in manifest order
//! ```
//!
//! The digest of a checkpoint is the SHA-256 of its bytes.

use std::path::Path;

use sha2::{Digest, Sha256};
use skd_core::model::{ModelConfig, Seq2Seq};
use skd_core::params::ParamStore;
use skd_core::Tensor;

use crate::binio::{put_len, put_u32, read, write_atomic, Reader};
use crate::error::Result;

const MAGIC: &[u8; 4] = b"SKDC";
const VERSION: u32 = 1;

pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn encode(model: &Seq2Seq<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    let config = model.config().to_text();
    put_len(&mut out, config.len())?;
    out.extend_from_slice(config.as_bytes());
    let params = model.params();
    put_len(&mut out, params.len())?;
    for (_, name, t) in params.iter() {
        put_len(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_len(&mut out, t.shape().len())?;
        for &d in t.shape() {
            put_len(&mut out, d)?;
        }
    }
    for t in params.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<Seq2Seq<f32>> {
    let mut r = Reader::new(path, bytes);
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let len = r.u32("config length")? as usize;
    let at = r.pos();
    let text = std::str::from_utf8(r.take(len, "config")?)
        .map_err(|e| r.error(at, format!("config is not UTF-8: {e}")))?;
    let config = ModelConfig::from_text(text).map_err(|e| r.error(at, e.to_string()))?;

    let n = r.u32("tensor count")? as usize;
    let mut manifest = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.u32("name length")? as usize;
        let at = r.pos();
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|e| r.error(at, format!("name is not UTF-8: {e}")))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let dims = (0..rank)
            .map(|_| r.u32("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        manifest.push((name, dims));
    }
    let mut store = ParamStore::new();
    for (name, dims) in manifest {
        let at = r.pos();
        let numel: usize = dims.iter().product();
        let data = r.f32s(numel, &name)?;
        let t = Tensor::new(dims, data).map_err(|e| r.error(at, format!("{name}: {e}")))?;
        if store.id(&name).is_some() {
            return Err(r.error(at, format!("duplicate tensor {name}")));
        }
        store.insert(name, t);
    }
    r.finish()?;
    Ok(Seq2Seq::from_params(config, store)?)
}

/// Writes the checkpoint and returns its digest.
pub fn save(path: &Path, model: &Seq2Seq<f32>) -> Result<String> {
    let bytes = encode(model)?;
    write_atomic(path, &bytes)?;
    Ok(digest(&bytes))
}

/// Loads a checkpoint and its digest.
pub fn load(path: &Path) -> Result<(Seq2Seq<f32>, String)> {
    let bytes = read(path)?;
    let model = decode(path, &bytes)?;
    Ok((model, digest(&bytes)))
}
