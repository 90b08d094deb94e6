//! Binary checkpoint format.
//!
//! Layout: magic `LSKP`, format version (`u32` LE), header length (`u32` LE),
//! a JSON header holding the model config, free-form run configs and the
//! tensor manifest, then every tensor as little-endian `f32` in manifest
//! order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};

pub const MAGIC: &[u8; 4] = b"LSKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    configs: serde_json::Value,
    manifest: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    /// Whatever the writer stored next to the model config (training and
    /// schedule settings for runs written by the trainer).
    pub configs: serde_json::Value,
}

pub fn to_bytes(params: &ModelParams<f32>, configs: &serde_json::Value) -> Result<Vec<u8>> {
    let named = params.named();
    let header = Header {
        model: params.config,
        configs: configs.clone(),
        manifest: named
            .iter()
            .map(|(name, p)| ManifestEntry {
                name: name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let header_len = u32::try_from(json.len())
        .map_err(|_| Error::Config("checkpoint header exceeds 4 GiB".into()))?;
    let mut out = Vec::with_capacity(12 + json.len() + 4 * params.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&json);
    for (_, p) in &named {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(
    params: &ModelParams<f32>,
    configs: &serde_json::Value,
    path: &Path,
) -> Result<()> {
    let bytes = to_bytes(params, configs)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Checkpoint {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!(
                "truncated while reading {what}: need {n} bytes, {} left",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path,
    };
    if r.take(4, "magic")? != MAGIC {
        r.pos = 0;
        return Err(r.fail("bad magic bytes"));
    }
    let version = r.u32("format version")?;
    if version > FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    if version == 0 {
        r.pos -= 4;
        return Err(r.fail("format version 0 is invalid"));
    }
    let header_len = r.u32("header length")? as usize;
    let header_start = r.pos;
    let header: Header =
        serde_json::from_slice(r.take(header_len, "header")?).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            offset: header_start as u64,
            reason: format!("malformed header: {e}"),
        })?;
    header.model.validate().map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        offset: header_start as u64,
        reason: e.to_string(),
    })?;
    let mut params = ModelParams::<f32>::init(header.model, 0)?;
    let expected: Vec<ManifestEntry> = params
        .named()
        .into_iter()
        .map(|(name, p)| ManifestEntry {
            name,
            shape: p.value.shape().to_vec(),
        })
        .collect();
    if expected != header.manifest {
        r.pos = header_start;
        return Err(r.fail("manifest does not match the model config"));
    }
    for (entry, p) in header.manifest.iter().zip(params.params_mut()) {
        let n = p.value.numel();
        let raw = r.take(4 * n, &entry.name)?;
        for (dst, chunk) in p.value.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        }
    }
    if r.pos != bytes.len() {
        return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint {
        params,
        configs: header.configs,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes, path)
}
