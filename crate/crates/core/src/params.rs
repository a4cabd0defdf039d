//! Named parameter table and the per-graph binder that exposes it to a tape.

use std::collections::{BTreeMap, HashMap};

use bginpaint_tensor::{Element, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Parameters keyed by dotted path, iterated in lexicographic order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<E> {
    tensors: BTreeMap<String, Tensor<E>>,
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<E>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<E>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Value(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<E>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn cast<F: Element>(&self) -> ParamStore<F> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

impl ParamStore<f32> {
    /// SHA-256 over names, shapes and little-endian values of every
    /// parameter whose name starts with one of `prefixes`.
    pub fn hash_prefixes(&self, prefixes: &[&str]) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            if !prefixes.iter().any(|p| name.starts_with(p)) {
                continue;
            }
            h.update((name.len() as u32).to_le_bytes());
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u32).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Which parameters a graph should differentiate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    Everything,
    Prefixes(Vec<String>),
}

impl Trainable {
    pub fn prefixes(p: &[&str]) -> Self {
        Trainable::Prefixes(p.iter().map(|s| s.to_string()).collect())
    }

    pub fn includes(&self, name: &str) -> bool {
        match self {
            Trainable::Nothing => false,
            Trainable::Everything => true,
            Trainable::Prefixes(ps) => ps.iter().any(|p| name.starts_with(p.as_str())),
        }
    }
}

/// One forward graph: a tape plus lazily bound parameter leaves.
pub struct Graph<'a, E> {
    pub tape: Tape<E>,
    store: &'a ParamStore<E>,
    trainable: &'a Trainable,
    bound: HashMap<String, Var>,
}

impl<'a, E: Element> Graph<'a, E> {
    pub fn new(store: &'a ParamStore<E>, trainable: &'a Trainable) -> Self {
        Self {
            tape: Tape::new(),
            store,
            trainable,
            bound: HashMap::new(),
        }
    }

    pub fn store(&self) -> &ParamStore<E> {
        self.store
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.contains(name)
    }

    /// Leaf for a named parameter; the same name always yields the same node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?.clone();
        let v = self.tape.param(name, t, self.trainable.includes(name));
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Routes `name` to an existing node instead of the stored value, e.g. a
    /// gradient-check probe.
    pub fn bind(&mut self, name: &str, v: Var) -> Result<()> {
        let want = self.store.get(name)?.shape();
        if self.tape.shape(v) != want {
            return Err(Error::Shape(format!(
                "binding {name}: node {:?}, parameter {want:?}",
                self.tape.shape(v)
            )));
        }
        self.bound.insert(name.to_string(), v);
        Ok(())
    }

    pub fn constant(&mut self, t: Tensor<E>) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        self.tape.value(v)
    }
}

/// Initializers for the parameter table.
pub struct Init<'r> {
    pub rng: &'r mut ChaCha8Rng,
}

impl Init<'_> {
    /// Xavier-uniform `[fan_in, fan_out]` matrix.
    pub fn xavier(&mut self, fan_in: usize, fan_out: usize) -> Tensor<f32> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
        let data = (0..fan_in * fan_out)
            .map(|_| self.rng.gen_range(-bound..bound))
            .collect();
        Tensor::new([fan_in, fan_out], data).expect("xavier shape")
    }

    pub fn normal(&mut self, shape: &[usize], std: f32) -> Tensor<f32> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0f32, std).expect("valid std");
        let data = (0..n).map(|_| dist.sample(self.rng)).collect();
        Tensor::new(shape.to_vec(), data).expect("normal shape")
    }
}
