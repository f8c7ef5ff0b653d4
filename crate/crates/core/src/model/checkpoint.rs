use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use super::{ModelDims, ModelParams, Variant};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"TDCKPT01";

/// Model parameters plus a `key=value` manifest.
///
/// Layout: magic, manifest byte length (u64 LE), manifest text, tensor count
/// (u64 LE), then every tensor in canonical order in the tensor wire format.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: BTreeMap<String, String>,
    pub params: ModelParams,
}

impl Checkpoint {
    /// `extra` entries are stored alongside the variant and dimensions.
    pub fn new(params: ModelParams, extra: BTreeMap<String, String>) -> Self {
        let mut manifest = extra;
        let d = params.dims;
        for (k, v) in [
            ("variant", params.variant.to_string()),
            ("src_vocab", d.src_vocab.to_string()),
            ("tgt_vocab", d.tgt_vocab.to_string()),
            ("src_emb", d.src_emb.to_string()),
            ("tgt_emb", d.tgt_emb.to_string()),
            ("n_units", d.n_units.to_string()),
            ("tensors", params.names().join(",")),
        ] {
            manifest.insert(k.to_string(), v);
        }
        Self { manifest, params }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut text = String::new();
        for (k, v) in &self.manifest {
            text.push_str(k);
            text.push('=');
            text.push_str(v);
            text.push('\n');
        }
        let tensors = self.params.tensors();
        let mut out = Vec::with_capacity(32 + text.len() + self.params.num_values() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
        for t in tensors {
            t.write_to(&mut out).expect("write to Vec");
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let r = &mut bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| Error::data("checkpoint too short"))?;
        if &magic != MAGIC {
            return Err(Error::data("not a checkpoint file (bad magic)"));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|_| Error::data("truncated checkpoint header"))?;
        let len = u64::from_le_bytes(len) as usize;
        if len > r.len() {
            return Err(Error::data("truncated checkpoint manifest"));
        }
        let text = std::str::from_utf8(&r[..len]).map_err(|_| Error::data("checkpoint manifest is not UTF-8"))?;
        let mut manifest = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::data(format!("bad manifest line {line:?}")))?;
            manifest.insert(k.to_string(), v.to_string());
        }
        *r = &r[len..];

        let field = |k: &str| -> Result<&String> {
            manifest
                .get(k)
                .ok_or_else(|| Error::data(format!("checkpoint manifest lacks {k}")))
        };
        let num = |k: &str| -> Result<usize> {
            field(k)?
                .parse()
                .map_err(|_| Error::data(format!("checkpoint field {k} is not an integer")))
        };
        let variant: Variant = field("variant")?.parse()?;
        let dims = ModelDims {
            src_vocab: num("src_vocab")?,
            tgt_vocab: num("tgt_vocab")?,
            src_emb: num("src_emb")?,
            tgt_emb: num("tgt_emb")?,
            n_units: num("n_units")?,
        };
        let mut params = ModelParams::zeros(dims, variant)?;

        let mut count = [0u8; 8];
        r.read_exact(&mut count).map_err(|_| Error::data("truncated checkpoint tensor count"))?;
        let count = u64::from_le_bytes(count) as usize;
        let slots = params.tensors_mut();
        if count != slots.len() {
            return Err(Error::data(format!("checkpoint holds {count} tensors, expected {}", slots.len())));
        }
        for slot in slots {
            let t = Tensor::read_from(r)?;
            if t.shape() != slot.shape() {
                return Err(Error::Shape {
                    op: "checkpoint load",
                    left: t.shape().to_vec(),
                    right: slot.shape().to_vec(),
                });
            }
            *slot = t;
        }
        if !r.is_empty() {
            return Err(Error::data("trailing bytes after checkpoint tensors"));
        }
        Ok(Self { manifest, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
