//! Named parameters, their initialisation, and the checkpoint file.
//!
//! Checkpoint layout (little-endian): magic `"TSLC"`, version `u32` = 1,
//! entry count `u32`, then per entry: name (`u16` length + UTF-8), rank
//! `u8`, `rank` extents as `u32`, dtype `u8` (0 = f32, 1 = f64), payload.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, TslError};
use crate::tensor::{Tape, Tensor, Var, MAX_RANK};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"TSLC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
    Normal(f64),
    Const(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }
}

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Draws every parameter from its initialiser, in spec order.
    pub fn initialize(specs: &[ParamSpec], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for spec in specs {
            let n: usize = spec.shape.iter().product();
            let data = match spec.init {
                Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
                Init::Normal(std) => (0..n)
                    .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
                Init::Const(c) => vec![c; n],
            };
            store.insert(
                &spec.name,
                Tensor::new(&spec.shape, data).expect("spec shape"),
            );
        }
        store
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        match self.index.get(name) {
            Some(&i) => self.values[i] = value,
            None => {
                self.index.insert(name.to_owned(), self.names.len());
                self.names.push(name.to_owned());
                self.values.push(value);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Places every parameter on `tape` as a leaf (or as a constant when
    /// `trainable` is false).
    pub fn bind<'a>(&'a self, tape: &mut Tape, trainable: bool) -> Bound<'a> {
        let vars = self
            .values
            .iter()
            .map(|v| {
                if trainable {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect();
        Bound { store: self, vars }
    }

    /// Binds variables already on a tape, one per parameter in store order.
    pub fn bind_vars<'a>(&'a self, tape: &Tape, vars: &[Var]) -> Result<Bound<'a>> {
        if vars.len() != self.len() {
            return Err(TslError::Dimension {
                op: "bind_vars",
                lhs: vec![self.len()],
                rhs: vec![vars.len()],
            });
        }
        for ((name, value), &v) in self.iter().zip(vars) {
            if tape.shape(v) != value.shape() {
                return Err(TslError::CheckpointMismatch(format!(
                    "parameter {name}: expected shape {:?}, found {:?}",
                    value.shape(),
                    tape.shape(v)
                )));
            }
        }
        Ok(Bound {
            store: self,
            vars: vars.to_vec(),
        })
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        for (name, value) in self.iter() {
            match other.get(name) {
                None => {
                    return Err(TslError::CheckpointMismatch(format!(
                        "missing parameter {name}"
                    )));
                }
                Some(o) if o.shape() != value.shape() => {
                    return Err(TslError::CheckpointMismatch(format!(
                        "parameter {name}: expected shape {:?}, found {:?}",
                        value.shape(),
                        o.shape()
                    )));
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = other.names.iter().find(|n| !self.index.contains_key(*n)) {
            return Err(TslError::CheckpointMismatch(format!(
                "unexpected parameter {extra}"
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for (name, value) in self.iter() {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(value.rank() as u8);
            for &d in value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.push(1);
            for v in value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let available = bytes.len() - pos;
            if n > available {
                return Err(TslError::Truncated {
                    offset: pos,
                    needed: n,
                    available,
                });
            }
            pos += n;
            Ok(&bytes[pos - n..pos])
        };
        let magic: [u8; 4] = take(4)?.try_into().unwrap();
        if magic != CHECKPOINT_MAGIC {
            return Err(TslError::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found: magic,
            });
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(TslError::BadVersion(version));
        }
        let count = u32::from_le_bytes(take(4)?.try_into().unwrap());
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(len)?)
                .map_err(|e| TslError::Malformed(format!("parameter name is not UTF-8: {e}")))?
                .to_owned();
            let rank = take(1)?[0] as usize;
            if rank > MAX_RANK {
                return Err(TslError::Malformed(format!(
                    "{name}: rank {rank} too large"
                )));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| TslError::Malformed(format!("{name}: shape overflows")))?;
            let dtype = take(1)?[0];
            let data: Vec<f64> = match dtype {
                0 => take(
                    n.checked_mul(4)
                        .ok_or_else(|| TslError::Malformed("payload overflows".into()))?,
                )?
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
                .collect(),
                1 => take(
                    n.checked_mul(8)
                        .ok_or_else(|| TslError::Malformed("payload overflows".into()))?,
                )?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
                other => {
                    return Err(TslError::Malformed(format!(
                        "{name}: unknown dtype {other}"
                    )))
                }
            };
            if store.get(&name).is_some() {
                return Err(TslError::Malformed(format!("duplicate parameter {name}")));
            }
            store.insert(&name, Tensor::new(&shape, data)?);
        }
        if pos != bytes.len() {
            return Err(TslError::Malformed(
                "trailing bytes after checkpoint".into(),
            ));
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| TslError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| TslError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Parameters placed on a tape, addressable by name.
pub struct Bound<'a> {
    store: &'a ParamStore,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn get(&self, name: &str) -> Var {
        match self.store.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("unknown parameter {name}"),
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradient of every parameter in store order; zeros where none reached.
    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(&self.store.values)
            .map(|(&v, p)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect()
    }
}
