use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::tensor::{Tape, Tensor, Var};

/// Named parameters and buffers of a network, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

/// Running normalization statistics are state, not weights.
pub fn is_buffer(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.entries.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars (buffers excluded).
    pub fn trainable_count(&self) -> usize {
        self.iter()
            .filter(|(n, _)| !is_buffer(n))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// SHA-256 over names, shapes and little-endian value bytes.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((t.rank() as u64).to_le_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Bitwise equality of every trainable tensor (buffers ignored).
    pub fn trainable_bit_eq(&self, other: &ParamSet) -> bool {
        let a: Vec<_> = self.iter().filter(|(n, _)| !is_buffer(n)).collect();
        let b: Vec<_> = other.iter().filter(|(n, _)| !is_buffer(n)).collect();
        a.len() == b.len() && a.iter().zip(&b).all(|((na, ta), (nb, tb))| na == nb && ta.bit_eq(tb))
    }

    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|((na, ta), (nb, tb))| na == nb && ta.bit_eq(tb))
    }
}

/// Which parameters get gradients when bound to a tape.
#[derive(Clone, Debug, PartialEq)]
pub enum Trainable {
    None,
    All,
    /// Only names starting with one of the prefixes.
    Prefixes(Vec<String>),
}

impl Trainable {
    fn allows(&self, name: &str) -> bool {
        if is_buffer(name) {
            return false;
        }
        match self {
            Trainable::None => false,
            Trainable::All => true,
            Trainable::Prefixes(p) => p.iter().any(|p| name.starts_with(p.as_str())),
        }
    }
}

/// Parameters placed on a tape for one forward pass.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn new(tape: &mut Tape, params: &ParamSet, trainable: &Trainable) -> Self {
        let vars = params
            .iter()
            .filter(|(n, _)| !is_buffer(n))
            .map(|(n, t)| (n.to_string(), tape.leaf(t.clone(), trainable.allows(n))))
            .collect();
        Self { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} was not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}
