//! String-keyed parameter storage.
//!
//! Parameters live outside any tape as plain buffers; each training step
//! binds them onto a fresh tape as leaves (see [`crate::session`]). Names
//! are dotted paths ("vel.0.expert.3.w1") so freezing and checkpointing
//! can address whole subtrees by prefix. Iteration follows insertion
//! order, which makes every downstream consumer deterministic.

use indexmap::IndexMap;

use crate::error::{CoreError, Result};
use crate::Scalar;

#[derive(Clone, Debug)]
pub struct Param<S: Scalar> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<S: Scalar> {
    entries: IndexMap<String, Param<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            entries: IndexMap::new(),
        }
    }

    /// Registers a new trainable parameter. Names must be unique.
    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<S>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(CoreError::DuplicateParam(name.to_string()));
        }
        let want: usize = shape.iter().product();
        if want != data.len() {
            return Err(CoreError::InvalidShape {
                op: "param_insert",
                shape,
                msg: format!("shape wants {want} elements, data has {}", data.len()),
            });
        }
        self.entries.insert(
            name.to_string(),
            Param {
                shape,
                data,
                trainable: true,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param<S>> {
        self.entries
            .get(name)
            .ok_or_else(|| CoreError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<S>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| CoreError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar elements across all parameters.
    pub fn total_elements(&self) -> usize {
        self.entries.values().map(|p| p.data.len()).sum()
    }

    /// Scalar elements in parameters currently marked trainable.
    pub fn trainable_elements(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.data.len())
            .sum()
    }

    /// Scalar elements under a dotted-path prefix.
    pub fn elements_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, p)| p.data.len())
            .sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<S>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.get_mut(name)?.trainable = trainable;
        Ok(())
    }

    /// Flips trainability for every parameter under a dotted-path prefix.
    /// Returns how many entries matched.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut hits = 0;
        for (k, p) in self.entries.iter_mut() {
            if k.starts_with(prefix) {
                p.trainable = trainable;
                hits += 1;
            }
        }
        hits
    }

    pub fn freeze_all(&mut self) {
        for p in self.entries.values_mut() {
            p.trainable = false;
        }
    }

    /// Drops every entry under a dotted-path prefix, preserving the
    /// relative order of the rest. Returns how many entries left.
    pub fn remove_prefix(&mut self, prefix: &str) -> usize {
        let names: Vec<String> = self
            .entries
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect();
        for n in &names {
            self.entries.shift_remove(n);
        }
        names.len()
    }

    /// Order-sensitive FNV-1a digest over names, shapes, and raw little-endian
    /// value bytes. Bitwise-equal stores hash equal; used to prove parameters
    /// stayed untouched across a phase.
    pub fn digest(&self) -> u64 {
        self.digest_filtered(|_| true)
    }

    /// Digest restricted to names under `prefix`.
    pub fn digest_prefix(&self, prefix: &str) -> u64 {
        self.digest_filtered(|name| name.starts_with(prefix))
    }

    fn digest_filtered(&self, keep: impl Fn(&str) -> bool) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for (name, p) in &self.entries {
            if !keep(name) {
                continue;
            }
            eat(name.as_bytes());
            for &d in &p.shape {
                eat(&(d as u64).to_le_bytes());
            }
            for &v in &p.data {
                eat(&v.to_f64().unwrap_or(f64::NAN).to_bits().to_le_bytes());
            }
        }
        h
    }
}
