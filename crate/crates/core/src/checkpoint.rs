//! Binary checkpoint format.
//!
//! ```text
//! "TDRT"                      magic, 4 bytes
//! u32                         format version
//! u32                         byte length of the config block
//! [u8]                        UTF-8 `key=value` lines
//! repeated until end of file:
//!   u32                       name length
//!   [u8]                      UTF-8 parameter name
//!   u32                       rank
//!   u64 × rank                dimensions
//!   f32 × prod(dims)          values
//! ```
//!
//! All integers and floats are little-endian. The config block carries the
//! training configuration plus `epoch` and `rng.<stream>` entries.

use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TDRT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    /// Configuration snapshot as ordered key/value pairs.
    pub config: Vec<(String, String)>,
    pub epoch: usize,
    /// Word positions of the named random streams.
    pub rng: Vec<(String, u128)>,
}

impl Checkpoint {
    pub fn config_value(&self, key: &str) -> Option<&str> {
        self.config
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    fn config_block(&self) -> String {
        let mut block = String::new();
        for (k, v) in &self.config {
            block.push_str(&format!("{k}={v}\n"));
        }
        block.push_str(&format!("epoch={}\n", self.epoch));
        for (name, pos) in &self.rng {
            block.push_str(&format!("rng.{name}={pos}\n"));
        }
        block
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let block = self.config_block();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(block.len() as u32).to_le_bytes());
        out.extend_from_slice(block.as_bytes());
        for (_, name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic; not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let block_len = r.u32()? as usize;
        let block = std::str::from_utf8(r.take(block_len)?)
            .map_err(|_| Error::Format("config block is not UTF-8".into()))?;
        let mut config = Vec::new();
        let mut epoch = None;
        let mut rng = Vec::new();
        for line in block.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("malformed config line `{line}`")))?;
            if k == "epoch" {
                epoch = Some(v.parse().map_err(|_| Error::Format(format!("bad epoch `{v}`")))?);
            } else if let Some(stream) = k.strip_prefix("rng.") {
                let pos = v
                    .parse()
                    .map_err(|_| Error::Format(format!("bad rng position `{v}`")))?;
                rng.push((stream.to_string(), pos));
            } else {
                config.push((k.to_string(), v.to_string()));
            }
        }
        let mut params = ParamStore::new();
        while r.pos < bytes.len() {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let dims: Vec<usize> = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
            let count = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("`{name}`: dimension overflow")))?;
            let raw = r.take(count.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            params
                .register(name, Tensor::from_vec(&dims, data)?)
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        Ok(Checkpoint {
            params,
            config,
            epoch: epoch.ok_or_else(|| Error::Format("config block lacks `epoch`".into()))?,
            rng,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated file at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
