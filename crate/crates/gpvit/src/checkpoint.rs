//! Single-file versioned checkpoints: magic, version, config digest, then
//! parameter blobs (f64 little-endian) in declaration order.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::scalar::{s, Scalar};

const MAGIC: &[u8; 4] = b"GPVC";
const VERSION: u32 = 1;

/// SHA-256 of the canonical TOML form of the configuration; a checkpoint only
/// loads into the exact configuration it was saved from.
pub fn config_digest(cfg: &ModelConfig) -> Result<[u8; 32]> {
    let text = cfg.to_toml_string()?;
    Ok(Sha256::digest(text.as_bytes()).into())
}

pub fn save<E: Scalar>(path: &Path, cfg: &ModelConfig, params: &ParamSet<E>) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&config_digest(cfg)?);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params.iter() {
        let name = p.name().as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(p.numel() as u64).to_le_bytes());
        for v in p.values() {
            out.extend_from_slice(&v.to_f64().unwrap().to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load<E: Scalar>(path: &Path, cfg: &ModelConfig, params: &ParamSet<E>) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "version {version} not supported (expected {VERSION})"
        )));
    }
    let digest = r.take(32)?;
    if digest != config_digest(cfg)? {
        return Err(Error::Checkpoint(format!(
            "config digest mismatch: checkpoint was saved from a different configuration than '{}'",
            cfg.name
        )));
    }
    let count = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
    if count != params.len() {
        return Err(Error::Checkpoint(format!(
            "{count} parameter blobs vs {} model parameters",
            params.len()
        )));
    }
    for p in params.iter() {
        let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not utf8".into()))?;
        if name != p.name() {
            return Err(Error::Checkpoint(format!(
                "parameter order mismatch: expected '{}', found '{name}'",
                p.name()
            )));
        }
        let numel = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
        if numel != p.numel() {
            return Err(Error::Checkpoint(format!(
                "'{name}': {numel} values vs expected {}",
                p.numel()
            )));
        }
        let mut values = Vec::with_capacity(numel);
        for _ in 0..numel {
            let v = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
            values.push(s::<E>(v));
        }
        p.set_values(&values);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last parameter".into()));
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("unexpected end of file".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}
