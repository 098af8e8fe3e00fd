//! Named parameter storage and the `CKPT1` checkpoint format.
//!
//! Layout: magic `CKPT1`, u32 entry count, then per entry a u16 name length,
//! the UTF-8 name, and an embedded `TNS1` tensor. Entries are written in
//! name order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{CgdError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{read_u16, read_u32, Tensor};

const CKPT_MAGIC: &[u8; 5] = b"CKPT1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| CgdError::Config(format!("missing parameter `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Sum of sizes of parameters whose name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.numel())
            .sum()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, t) in &self.params {
            let bytes = name.as_bytes();
            let len = u16::try_from(bytes.len())
                .map_err(|_| CgdError::Format(format!("parameter name too long: {name}")))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(bytes)?;
            t.write_tns(w)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(CgdError::Format("not a CKPT1 checkpoint".into()));
        }
        let count = read_u32(r)?;
        let mut store = Self::new();
        for _ in 0..count {
            let len = read_u16(r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| CgdError::Format("checkpoint entry name is not UTF-8".into()))?;
            let t = Tensor::read_tns(r)?;
            store.insert(name, t);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path)
            .map_err(|e| CgdError::Data(format!("cannot open checkpoint {}: {e}", path.display())))?;
        Self::read_from(&mut BufReader::new(f))
    }

    /// Values as they survive a save/load cycle (payload is float32).
    pub fn rounded_to_f32(&self) -> Self {
        let params = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), v.map(|x| x as f32 as f64)))
            .collect();
        Self { params }
    }

    /// Checks that `other` holds exactly the same names and shapes.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        for (name, t) in &self.params {
            match other.params.get(name) {
                None => {
                    return Err(CgdError::Config(format!(
                        "checkpoint is missing parameter `{name}`"
                    )))
                }
                Some(o) if o.shape() != t.shape() => {
                    return Err(CgdError::Config(format!(
                        "parameter `{name}` has shape {:?} in checkpoint but {:?} in config",
                        o.shape(),
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = other.params.keys().find(|k| !self.params.contains_key(*k)) {
            return Err(CgdError::Config(format!(
                "checkpoint has unexpected parameter `{extra}`"
            )));
        }
        Ok(())
    }
}

/// Lazily binds stored parameters into a [`Graph`].
///
/// Only parameters actually requested during a forward pass become graph
/// leaves, so the set of touched names is exactly the set that can receive
/// gradients.
pub struct ParamScope<'a> {
    store: &'a ParamStore,
    bound: BTreeMap<String, Var>,
    trainable: bool,
}

impl<'a> ParamScope<'a> {
    pub fn trainable(store: &'a ParamStore) -> Self {
        Self {
            store,
            bound: BTreeMap::new(),
            trainable: true,
        }
    }

    pub fn frozen(store: &'a ParamStore) -> Self {
        Self {
            store,
            bound: BTreeMap::new(),
            trainable: false,
        }
    }

    pub fn get(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.store.require(name)?.clone();
        let v = if self.trainable { g.param(t) } else { g.constant(t) };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn touched(&self) -> impl Iterator<Item = &str> {
        self.bound.keys().map(String::as_str)
    }

    /// Gradients of every bound parameter that received one.
    pub fn grads(&self, g: &Graph) -> BTreeMap<String, Tensor> {
        self.bound
            .iter()
            .filter_map(|(k, &v)| g.grad(v).map(|t| (k.clone(), t.clone())))
            .collect()
    }
}
