//! Versioned binary checkpoints.
//!
//! ```text
//! b"AMLCKPT\0" | u32 version | u64 manifest length | manifest (JSON) | payload
//! ```
//!
//! Integers are little-endian. The manifest lists every tensor with its
//! group, name, dtype, shape and byte range in the payload; tensors are
//! stored as raw little-endian floats.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::aml::AmlNet;
use crate::error::{Error, Result};
use crate::optim::Moments;
use crate::params::{tensor_le_bytes, ParamStore, SlotKind};
use crate::trainer::OptimState;

pub const MAGIC: &[u8; 8] = b"AMLCKPT\0";
pub const VERSION: u32 = 1;

const GEN: &str = "generator";
const DISC: &str = "discriminator";
const GEN_OPT: &str = "generator_adam";
const DISC_OPT: &str = "discriminator_adam";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub group: String,
    pub name: String,
    /// `param`, `buffer`, `adam_m` or `adam_v`.
    pub kind: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_digest: String,
    /// The full run configuration, so a checkpoint is self-describing.
    pub config_toml: String,
    pub epoch: usize,
    pub best_val_miou: f64,
    pub optimizer_steps: BTreeMap<String, u64>,
    pub entries: Vec<Entry>,
}

/// Run metadata stored alongside the tensors.
#[derive(Debug, Clone)]
pub struct CheckpointMeta {
    pub config_digest: String,
    pub config_toml: String,
    pub epoch: usize,
    pub best_val_miou: f64,
}

fn dtype_name(d: DType) -> Result<&'static str> {
    match d {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

struct Writer {
    entries: Vec<Entry>,
    payload: Vec<u8>,
}

impl Writer {
    fn push(&mut self, group: &str, name: &str, kind: &str, t: &Tensor) -> Result<()> {
        let bytes = tensor_le_bytes(t)?;
        self.entries.push(Entry {
            group: group.into(),
            name: name.into(),
            kind: kind.into(),
            dtype: dtype_name(t.dtype())?.into(),
            shape: t.dims().to_vec(),
            offset: self.payload.len() as u64,
            len: bytes.len() as u64,
        });
        self.payload.extend_from_slice(&bytes);
        Ok(())
    }

    fn store(&mut self, group: &str, store: &ParamStore) -> Result<()> {
        for (name, slot) in store.entries() {
            let kind = match slot.kind {
                SlotKind::Trainable => "param",
                SlotKind::Buffer => "buffer",
            };
            self.push(group, &name, kind, slot.var.as_tensor())?;
        }
        Ok(())
    }

    fn optim(&mut self, group: &str, st: &OptimState) -> Result<()> {
        for (name, m) in &st.moments {
            self.push(group, name, "adam_m", &m.m)?;
            self.push(group, name, "adam_v", &m.v)?;
        }
        Ok(())
    }
}

pub fn save(
    path: &Path,
    net: &AmlNet,
    meta: &CheckpointMeta,
    gen_optim: Option<&OptimState>,
    disc_optim: Option<&OptimState>,
) -> Result<()> {
    let mut w = Writer {
        entries: Vec::new(),
        payload: Vec::new(),
    };
    w.store(GEN, net.gen_store())?;
    w.store(DISC, net.disc_store())?;
    let mut optimizer_steps = BTreeMap::new();
    for (group, st) in [(GEN_OPT, gen_optim), (DISC_OPT, disc_optim)] {
        if let Some(st) = st {
            w.optim(group, st)?;
            optimizer_steps.insert(group.to_string(), st.step);
        }
    }
    let manifest = Manifest {
        config_digest: meta.config_digest.clone(),
        config_toml: meta.config_toml.clone(),
        epoch: meta.epoch,
        best_val_miou: meta.best_val_miou,
        optimizer_steps,
        entries: w.entries,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(20 + json.len() + w.payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&w.payload);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub struct Checkpoint {
    pub manifest: Manifest,
    tensors: BTreeMap<(String, String, String), Tensor>,
}

fn decode(entry: &Entry, bytes: &[u8]) -> Result<Tensor> {
    let n: usize = entry.shape.iter().product();
    let t = match entry.dtype.as_str() {
        "f32" if bytes.len() == 4 * n => {
            let v: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, entry.shape.as_slice(), &Device::Cpu)?
        }
        "f64" if bytes.len() == 8 * n => {
            let v: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, entry.shape.as_slice(), &Device::Cpu)?
        }
        other => {
            return Err(Error::Checkpoint(format!(
                "entry `{}` has dtype {other} and {} bytes for shape {:?}",
                entry.name,
                bytes.len(),
                entry.shape
            )))
        }
    };
    Ok(t)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("format version {version}, expected {VERSION}")));
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = 20usize.checked_add(mlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[20..body]).map_err(|e| bad(&e.to_string()))?;
    let payload = &bytes[body..];
    let mut tensors = BTreeMap::new();
    for e in &manifest.entries {
        let (start, end) = (e.offset as usize, (e.offset + e.len) as usize);
        if end > payload.len() || start > end {
            return Err(bad(&format!("entry `{}` lies outside the payload", e.name)));
        }
        tensors.insert(
            (e.group.clone(), e.name.clone(), e.kind.clone()),
            decode(e, &payload[start..end])?,
        );
    }
    Ok(Checkpoint { manifest, tensors })
}

impl Checkpoint {
    fn restore_store(&self, group: &str, store: &ParamStore) -> Result<()> {
        let stored: Vec<&String> = self
            .tensors
            .keys()
            .filter(|(g, _, k)| g == group && (k == "param" || k == "buffer"))
            .map(|(_, n, _)| n)
            .collect();
        let entries = store.entries();
        if stored.len() != entries.len() {
            return Err(Error::Checkpoint(format!(
                "{group}: checkpoint holds {} tensors, network has {}",
                stored.len(),
                entries.len()
            )));
        }
        let mut snap = BTreeMap::new();
        for (name, slot) in entries {
            let kind = match slot.kind {
                SlotKind::Trainable => "param",
                SlotKind::Buffer => "buffer",
            };
            let t = self
                .tensors
                .get(&(group.to_string(), name.clone(), kind.to_string()))
                .ok_or_else(|| Error::Checkpoint(format!("{group}: checkpoint lacks `{name}`")))?;
            if t.dims() != slot.var.dims() {
                return Err(Error::Checkpoint(format!(
                    "{group}: `{name}` has shape {:?} in the checkpoint, {:?} in the network",
                    t.dims(),
                    slot.var.dims()
                )));
            }
            snap.insert(name, t.clone());
        }
        store.restore(&snap)
    }

    /// Loads every generator and discriminator tensor into `net`.
    pub fn restore_net(&self, net: &AmlNet) -> Result<()> {
        self.restore_store(GEN, net.gen_store())?;
        self.restore_store(DISC, net.disc_store())
    }

    fn optim(&self, group: &str, dtype: DType) -> Result<Option<OptimState>> {
        let Some(&step) = self.manifest.optimizer_steps.get(group) else {
            return Ok(None);
        };
        let mut moments = BTreeMap::new();
        for ((g, name, kind), t) in &self.tensors {
            if g != group || kind != "adam_m" {
                continue;
            }
            let v = self
                .tensors
                .get(&(g.clone(), name.clone(), "adam_v".to_string()))
                .ok_or_else(|| Error::Checkpoint(format!("{group}: `{name}` has no second moment")))?;
            moments.insert(
                name.clone(),
                Moments {
                    m: t.to_dtype(dtype)?,
                    v: v.to_dtype(dtype)?,
                },
            );
        }
        Ok(Some(OptimState { step, moments }))
    }

    pub fn gen_optim(&self, dtype: DType) -> Result<Option<OptimState>> {
        self.optim(GEN_OPT, dtype)
    }

    pub fn disc_optim(&self, dtype: DType) -> Result<Option<OptimState>> {
        self.optim(DISC_OPT, dtype)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_garbage_and_wrong_version() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        fs::write(&p, b"hello world, not a checkpoint").unwrap();
        assert!(matches!(load(&p), Err(Error::Checkpoint(_))));
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&7u32.to_le_bytes());
        bytes.extend_from_slice(&0u64.to_le_bytes());
        fs::write(&p, &bytes).unwrap();
        let err = load(&p).err().unwrap().to_string();
        assert!(err.contains("version 7"), "{err}");
    }

    #[test]
    fn decode_checks_length() {
        let e = Entry {
            group: "g".into(),
            name: "w".into(),
            kind: "param".into(),
            dtype: "f32".into(),
            shape: vec![2, 2],
            offset: 0,
            len: 12,
        };
        assert!(decode(&e, &[0u8; 12]).is_err());
        let t = decode(&e, &[0u8; 16]).unwrap();
        assert_eq!(t.dims(), &[2, 2]);
    }
}
