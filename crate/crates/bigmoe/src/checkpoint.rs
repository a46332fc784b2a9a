//! Versioned binary checkpoints: a header with the embedded config (exact
//! TOML text plus its SHA-256) followed by every named parameter as f64
//! little-endian payloads. Round trips are byte-identical and loading
//! rejects version or hash mismatches instead of migrating silently.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::backbone::BigMoeModel;
use crate::config::RunConfig;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"BMCK";
const VERSION: u32 = 1;

pub struct CheckpointBundle {
    pub model: BigMoeModel,
    /// The exact config text embedded in the file; re-saving reuses it so
    /// save -> load -> save is byte-stable.
    pub config_toml: String,
}

fn sha256(bytes: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().into()
}

pub fn save_checkpoint(path: &Path, model: &BigMoeModel, config_toml: &str) -> Result<()> {
    // the embedded text must describe this model
    let parsed = RunConfig::from_toml(config_toml)?;
    if parsed != model.cfg {
        return Err(Error::Usage(
            "config text does not match the model being saved".into(),
        ));
    }
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&sha256(config_toml.as_bytes()));
    buf.extend_from_slice(&(config_toml.len() as u32).to_le_bytes());
    buf.extend_from_slice(config_toml.as_bytes());
    let params = model.params();
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in &params {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        let shape = tensor.shape();
        buf.push(shape.len() as u8);
        for &e in &shape {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in tensor.data().iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointBundle> {
    let mut raw = Vec::new();
    fs::File::open(path)?.read_to_end(&mut raw)?;
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if pos + n > raw.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &raw[pos..pos + n];
        pos += n;
        Ok(s)
    };
    if take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version} unsupported (expected {VERSION}); no silent migration"
        )));
    }
    let stored_hash: [u8; 32] = take(32)?.try_into().unwrap();
    let cfg_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let config_toml = std::str::from_utf8(take(cfg_len)?)
        .map_err(|_| Error::Format("embedded config is not utf8".into()))?
        .to_string();
    if sha256(config_toml.as_bytes()) != stored_hash {
        return Err(Error::Format(
            "embedded config does not match its stored hash".into(),
        ));
    }
    let cfg = RunConfig::from_toml(&config_toml)?;
    let model = BigMoeModel::init(&cfg)?;

    let n_params = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let expected = model.params();
    if n_params != expected.len() {
        return Err(Error::Format(format!(
            "checkpoint has {n_params} parameters, model expects {}",
            expected.len()
        )));
    }
    for (name, tensor) in &expected {
        let name_len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let stored_name = std::str::from_utf8(take(name_len)?)
            .map_err(|_| Error::Format("parameter name is not utf8".into()))?;
        if stored_name != name {
            return Err(Error::Format(format!(
                "parameter order mismatch: expected '{name}', found '{stored_name}'"
            )));
        }
        let ndim = take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
        }
        if shape != tensor.shape() {
            return Err(Error::Format(format!(
                "parameter '{name}' has shape {shape:?}, model expects {:?}",
                tensor.shape()
            )));
        }
        let numel: usize = shape.iter().product();
        let bytes = take(8 * numel)?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensor.set_data(&data)?;
    }
    if pos != raw.len() {
        return Err(Error::Format("trailing bytes after last parameter".into()));
    }
    Ok(CheckpointBundle { model, config_toml })
}
