use std::fs;
use std::path::Path;

use crate::binio::ByteReader;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{numel, ParameterStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"OCVTCK1";
pub const CHECKPOINT_VERSION: u32 = 1;

const FLAG_OPTIMIZER: u8 = 1;
const TAG_INT: u8 = 0;
const TAG_REAL: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ConfigValue {
    Int(i64),
    Real(f64),
}

/// Parameters plus a self-describing config block.
///
/// Layout (little-endian): magic, `u32` version, `u32` parameter count,
/// `u8` flags, `u64` optimizer step, `u32` config entry count, config entries
/// (`u32` name length, name, `u8` tag, `i64` or `f64`), then per parameter
/// `u32` name length, name, `u32` rank, `u32` extents, `f32` values and, when
/// the optimizer flag is set, `f32` first and second moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Vec<(String, ConfigValue)>,
    pub store: ParameterStore<f32>,
    pub with_optimizer: bool,
}

impl Checkpoint {
    pub fn new<S: Scalar>(store: &ParameterStore<S>, config: Vec<(String, ConfigValue)>, with_optimizer: bool) -> Self {
        Checkpoint {
            config,
            store: store.cast(),
            with_optimizer,
        }
    }

    pub fn get(&self, name: &str) -> Option<ConfigValue> {
        self.config.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn int(&self, name: &str) -> Result<i64> {
        match self.get(name) {
            Some(ConfigValue::Int(v)) => Ok(v),
            Some(ConfigValue::Real(_)) => Err(Error::malformed("checkpoint", format!("config '{name}' is not an integer"))),
            None => Err(Error::malformed("checkpoint", format!("missing config '{name}'"))),
        }
    }

    pub fn real(&self, name: &str) -> Result<f64> {
        match self.get(name) {
            Some(ConfigValue::Real(v)) => Ok(v),
            Some(ConfigValue::Int(v)) => Ok(v as f64),
            None => Err(Error::malformed("checkpoint", format!("missing config '{name}'"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let put_str = |out: &mut Vec<u8>, s: &str| {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        };
        let put_f32s = |out: &mut Vec<u8>, v: &[f32]| {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        };
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.store.len() as u32).to_le_bytes());
        out.push(if self.with_optimizer { FLAG_OPTIMIZER } else { 0 });
        let step = if self.with_optimizer { self.store.step } else { 0 };
        out.extend_from_slice(&step.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        for (name, value) in &self.config {
            put_str(&mut out, name);
            match value {
                ConfigValue::Int(v) => {
                    out.push(TAG_INT);
                    out.extend_from_slice(&v.to_le_bytes());
                }
                ConfigValue::Real(v) => {
                    out.push(TAG_REAL);
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        for p in self.store.iter() {
            put_str(&mut out, &p.name);
            out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
            for &e in &p.value.shape {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            put_f32s(&mut out, &p.value.data);
            if self.with_optimizer {
                put_f32s(&mut out, &p.m);
                put_f32s(&mut out, &p.v);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const WHAT: &str = "checkpoint";
        let mut r = ByteReader::new(bytes, WHAT);
        if r.take(7)? != CHECKPOINT_MAGIC {
            return Err(Error::malformed(WHAT, "bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::malformed(WHAT, format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let flags = r.u8()?;
        if flags & !FLAG_OPTIMIZER != 0 {
            return Err(Error::malformed(WHAT, format!("unknown flags {flags:#x}")));
        }
        let with_optimizer = flags & FLAG_OPTIMIZER != 0;
        let step = r.u64()?;
        let read_str = |r: &mut ByteReader| -> Result<String> {
            let n = r.u32()? as usize;
            String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::malformed(WHAT, "name is not UTF-8"))
        };
        let read_f32s = |r: &mut ByteReader, n: usize| -> Result<Vec<f32>> { (0..n).map(|_| r.f32()).collect() };

        let n_config = r.u32()? as usize;
        let mut config = Vec::with_capacity(n_config.min(1024));
        for _ in 0..n_config {
            let name = read_str(&mut r)?;
            let value = match r.u8()? {
                TAG_INT => ConfigValue::Int(r.i64()?),
                TAG_REAL => ConfigValue::Real(r.f64()?),
                t => return Err(Error::malformed(WHAT, format!("unknown config tag {t}"))),
            };
            config.push((name, value));
        }
        let mut store = ParameterStore::new();
        for _ in 0..count {
            let name = read_str(&mut r)?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let n = numel(&shape);
            let data = read_f32s(&mut r, n)?;
            let idx = store
                .add(&name, Tensor { shape, data })
                .map_err(|_| Error::malformed(WHAT, format!("duplicate parameter '{name}'")))?;
            if with_optimizer {
                let m = read_f32s(&mut r, n)?;
                let v = read_f32s(&mut r, n)?;
                let p = store.get_mut(idx);
                p.m = m;
                p.v = v;
            }
        }
        if !r.is_empty() {
            return Err(Error::malformed(WHAT, "trailing bytes"));
        }
        store.step = step;
        Ok(Checkpoint {
            config,
            store,
            with_optimizer,
        })
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
