//! Versioned binary container for parameters and optimizer state.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic      b"SGCK"
//! version    u32                      (currently 1)
//! n_meta     u32, then n_meta x { key: str, value: str }
//! n_tensors  u32, then n_tensors x { name: str, rank: u32, dims: u64 x rank, data: f64 x numel }
//! has_optim  u8
//!   step u64, lr f64, beta1 f64, beta2 f64, eps f64, weight_decay f64,
//!   n_slots u32, then n_slots x { name: str, m: f64 x numel, v: f64 x numel }
//! str        u32 byte length + UTF-8 bytes
//! ```
//!
//! Tensor names carry a namespace prefix (`ggt.` or `rel.`), so one file can
//! hold several models.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use super::{Adam, AdamConfig, ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"SGCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint has no tensor `{0}`")]
    Missing(String),
    #[error("tensor `{name}` has shape {found:?}, model expects {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSnapshot {
    pub config: AdamConfig,
    pub step: u64,
    /// `(parameter name, first moment, second moment)`.
    pub slots: Vec<(String, Vec<f64>, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
    pub optimizer: Option<OptimizerSnapshot>,
}

impl Checkpoint {
    /// Snapshot of `store` with each name prefixed by `namespace.`.
    pub fn from_store(namespace: &str, store: &ParamStore, optimizer: Option<&Adam>) -> Self {
        let tensors = store
            .iter()
            .map(|(_, name, t)| {
                (format!("{namespace}.{name}"), Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("shape"))
            })
            .collect();
        let optimizer = optimizer.map(|adam| OptimizerSnapshot {
            config: adam.config,
            step: adam.step_count(),
            slots: store
                .iter()
                .zip(adam.first_moment().iter().zip(adam.second_moment()))
                .map(|((_, name, _), (m, v))| (format!("{namespace}.{name}"), m.clone(), v.clone()))
                .collect(),
        });
        Self { metadata: BTreeMap::new(), tensors, optimizer }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies `namespace.*` tensors into an already-built store.
    pub fn load_into(&self, namespace: &str, store: &mut ParamStore) -> Result<(), CheckpointError> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let full = format!("{namespace}.{}", store.name(id));
            let t = self.tensor(&full).ok_or_else(|| CheckpointError::Missing(full.clone()))?;
            let expected = store.get(id).shape().to_vec();
            if t.shape() != expected.as_slice() {
                return Err(CheckpointError::ShapeMismatch { name: full, expected, found: t.shape().to_vec() });
            }
            store.set_data(id, t.data()).expect("shape checked");
        }
        Ok(())
    }

    /// Rebuilds the optimizer for `store` from the snapshot, if one was saved.
    pub fn restore_optimizer(&self, namespace: &str, store: &ParamStore) -> Result<Option<Adam>, CheckpointError> {
        let Some(snap) = &self.optimizer else {
            return Ok(None);
        };
        let mut first = Vec::with_capacity(store.len());
        let mut second = Vec::with_capacity(store.len());
        for (_, name, t) in store.iter() {
            let full = format!("{namespace}.{name}");
            let (_, m, v) = snap
                .slots
                .iter()
                .find(|(n, _, _)| *n == full)
                .ok_or_else(|| CheckpointError::Missing(format!("optimizer slot {full}")))?;
            if m.len() != t.numel() || v.len() != t.numel() {
                return Err(CheckpointError::Malformed(format!("optimizer slot {full} length")));
            }
            first.push(m.clone());
            second.push(v.clone());
        }
        Ok(Some(Adam::from_parts(snap.config, snap.step, first, second)))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), CheckpointError> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u32::<LittleEndian>(self.metadata.len() as u32)?;
        for (k, v) in &self.metadata {
            write_str(w, k)?;
            write_str(w, v)?;
        }
        w.write_u32::<LittleEndian>(self.tensors.len() as u32)?;
        for (name, t) in &self.tensors {
            write_str(w, name)?;
            w.write_u32::<LittleEndian>(t.shape().len() as u32)?;
            for &d in t.shape() {
                w.write_u64::<LittleEndian>(d as u64)?;
            }
            write_f64s(w, t.data())?;
        }
        match &self.optimizer {
            None => w.write_u8(0)?,
            Some(o) => {
                w.write_u8(1)?;
                w.write_u64::<LittleEndian>(o.step)?;
                for x in
                    [o.config.learning_rate, o.config.beta1, o.config.beta2, o.config.epsilon, o.config.weight_decay]
                {
                    w.write_f64::<LittleEndian>(x)?;
                }
                w.write_u32::<LittleEndian>(o.slots.len() as u32)?;
                for (name, m, v) in &o.slots {
                    write_str(w, name)?;
                    w.write_u32::<LittleEndian>(m.len() as u32)?;
                    write_f64s(w, m)?;
                    write_f64s(w, v)?;
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let mut metadata = BTreeMap::new();
        for _ in 0..r.read_u32::<LittleEndian>()? {
            let k = read_str(r)?;
            metadata.insert(k, read_str(r)?);
        }
        let n = r.read_u32::<LittleEndian>()?;
        let mut tensors = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let name = read_str(r)?;
            let rank = r.read_u32::<LittleEndian>()? as usize;
            let shape =
                (0..rank).map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize)).collect::<io::Result<Vec<_>>>()?;
            let data = read_f64s(r, shape.iter().product())?;
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            tensors.push((name, t));
        }
        let optimizer = match r.read_u8()? {
            0 => None,
            1 => {
                let step = r.read_u64::<LittleEndian>()?;
                let mut f = [0.0; 5];
                for x in &mut f {
                    *x = r.read_f64::<LittleEndian>()?;
                }
                let config =
                    AdamConfig { learning_rate: f[0], beta1: f[1], beta2: f[2], epsilon: f[3], weight_decay: f[4] };
                let count = r.read_u32::<LittleEndian>()?;
                let mut slots = Vec::with_capacity(count as usize);
                for _ in 0..count {
                    let name = read_str(r)?;
                    let len = r.read_u32::<LittleEndian>()? as usize;
                    let m = read_f64s(r, len)?;
                    let v = read_f64s(r, len)?;
                    slots.push((name, m, v));
                }
                Some(OptimizerSnapshot { config, step, slots })
            }
            other => return Err(CheckpointError::Malformed(format!("optimizer flag {other}"))),
        };
        Ok(Self { metadata, tensors, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}

fn write_str(w: &mut impl Write, s: &str) -> io::Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_str(r: &mut impl Read) -> Result<String, CheckpointError> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| CheckpointError::Malformed(e.to_string()))
}

fn write_f64s(w: &mut impl Write, xs: &[f64]) -> io::Result<()> {
    for &x in xs {
        w.write_f64::<LittleEndian>(x)?;
    }
    Ok(())
}

fn read_f64s(r: &mut impl Read, n: usize) -> io::Result<Vec<f64>> {
    (0..n).map(|_| r.read_f64::<LittleEndian>()).collect()
}
