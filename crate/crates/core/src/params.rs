//! Named parameter storage shared by every network in the crate.
//!
//! A [`ParamStore`] owns the variables of one network (generator or
//! discriminator). Names are hierarchical (`enc.1.conv2.weight`) and ordered,
//! so digests and checkpoints are stable across runs. Initial values are
//! derived from `(store seed, parameter name)` only, which keeps the shared
//! part of two differently-configured networks bit-identical.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, MutexGuard};

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Const(f64),
    /// PyTorch-style default for conv layers: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    Uniform { fan_in: usize },
    Normal { std: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotKind {
    Trainable,
    /// Persistent state updated during forward (batch-norm statistics,
    /// power-iteration vectors). Never touched by the optimizer.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Slot {
    pub var: Var,
    pub kind: SlotKind,
}

struct Inner {
    slots: Mutex<BTreeMap<String, Slot>>,
    dtype: DType,
    device: Device,
    seed: u64,
}

#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Inner>,
}

/// Deep copy of every slot's value.
pub type Snapshot = BTreeMap<String, Tensor>;

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            inner: Arc::new(Inner {
                slots: Mutex::new(BTreeMap::new()),
                dtype,
                device: Device::Cpu,
                seed,
            }),
        }
    }

    pub fn root(&self) -> Scope {
        Scope {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.inner.dtype
    }

    pub fn device(&self) -> &Device {
        &self.inner.device
    }

    pub fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn lock(&self) -> MutexGuard<'_, BTreeMap<String, Slot>> {
        self.inner.slots.lock().expect("parameter store poisoned")
    }

    pub fn get(&self, name: &str) -> Option<Slot> {
        self.lock().get(name).cloned()
    }

    pub fn entries(&self) -> Vec<(String, Slot)> {
        self.lock()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.lock()
            .iter()
            .filter(|(_, s)| s.kind == SlotKind::Trainable)
            .map(|(k, s)| (k.clone(), s.var.clone()))
            .collect()
    }

    pub fn num_trainable_elements(&self) -> usize {
        self.trainable().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// SHA-256 over names, shapes and little-endian payloads of every slot
    /// whose name starts with `prefix` (use `""` for the whole store).
    pub fn digest_prefix(&self, prefix: &str) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, slot) in self.entries() {
            if !name.starts_with(prefix) {
                continue;
            }
            hasher.update(name.as_bytes());
            for d in slot.var.dims() {
                hasher.update((*d as u64).to_le_bytes());
            }
            hasher.update(tensor_le_bytes(slot.var.as_tensor())?);
        }
        Ok(hex::encode(hasher.finalize()))
    }

    pub fn digest(&self) -> Result<String> {
        self.digest_prefix("")
    }

    pub fn snapshot(&self) -> Result<Snapshot> {
        self.entries()
            .into_iter()
            .map(|(k, s)| Ok((k, s.var.as_tensor().copy()?)))
            .collect()
    }

    pub fn restore(&self, snap: &Snapshot) -> Result<()> {
        let slots = self.lock();
        for (name, slot) in slots.iter() {
            let value = snap
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("snapshot has no entry `{name}`")))?;
            slot.var.set(&value.to_dtype(self.inner.dtype)?)?;
        }
        Ok(())
    }

    fn create(&self, name: String, shape: Shape, init: Init, kind: SlotKind) -> Result<Var> {
        let mut slots = self.lock();
        if slots.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        let n = shape.elem_count();
        let values: Vec<f64> = match init {
            Init::Const(c) => vec![c; n],
            Init::Uniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let mut rng = self.rng_for(&name);
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            }
            Init::Normal { std } => {
                let mut rng = self.rng_for(&name);
                (0..n).map(|_| std * standard_normal(&mut rng)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.inner.device)?.to_dtype(self.inner.dtype)?;
        let var = Var::from_tensor(&t)?;
        slots.insert(
            name,
            Slot {
                var: var.clone(),
                kind,
            },
        );
        Ok(var)
    }

    fn rng_for(&self, name: &str) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.inner.seed.to_le_bytes());
        h.update(name.as_bytes());
        let d = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&d);
        ChaCha8Rng::from_seed(seed)
    }
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    // Box-Muller; u1 in (0, 1] keeps ln finite.
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Hierarchical view into a store, in the spirit of a var-builder path.
#[derive(Clone)]
pub struct Scope {
    store: ParamStore,
    prefix: String,
}

impl Scope {
    pub fn pp(&self, name: impl std::fmt::Display) -> Scope {
        Scope {
            store: self.store.clone(),
            prefix: self.path(&name.to_string()),
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn param(&self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Param> {
        let var = self
            .store
            .create(self.path(name), shape.into(), init, SlotKind::Trainable)?;
        Ok(Param(var))
    }

    pub fn buffer(&self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Var> {
        self.store
            .create(self.path(name), shape.into(), init, SlotKind::Buffer)
    }
}

/// A trainable variable. `get(true)` returns a detached view so that a
/// forward pass can run without routing gradients into this parameter.
#[derive(Debug, Clone)]
pub struct Param(Var);

impl Param {
    pub fn get(&self, frozen: bool) -> Tensor {
        if frozen {
            self.0.as_tensor().detach()
        } else {
            self.0.as_tensor().clone()
        }
    }

    pub fn var(&self) -> &Var {
        &self.0
    }

    pub fn set(&self, t: &Tensor) -> Result<()> {
        self.0.set(t)?;
        Ok(())
    }
}

pub fn tensor_le_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F64 => flat
            .to_vec1::<f64>()?
            .into_iter()
            .flat_map(f64::to_le_bytes)
            .collect(),
        _ => flat
            .to_dtype(DType::F32)?
            .to_vec1::<f32>()?
            .into_iter()
            .flat_map(f32::to_le_bytes)
            .collect(),
    })
}
