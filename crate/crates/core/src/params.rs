//! Named parameter storage and the forward-pass binding context.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Parameters keyed by hierarchical name (`blocks.3.attn.qkv.weight`).
/// Iteration is in name order, which keeps every derived artifact stable.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<E: Element> {
    tensors: BTreeMap<String, Tensor<E>>,
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<E>) -> Option<Tensor<E>> {
        self.tensors.insert(name.into(), value)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<E>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<E>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|k| k.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<E>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn cast<F: Element>(&self) -> ParamStore<F> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Copy of the entries whose names are in `names`.
    pub fn subset<'n>(&self, names: impl IntoIterator<Item = &'n str>) -> ParamStore<E> {
        let mut out = ParamStore::new();
        for n in names {
            if let Some(t) = self.tensors.get(n) {
                out.insert(n, t.clone());
            }
        }
        out
    }

    /// Overwrites existing entries with `other`'s. Unknown names and shape
    /// changes are rejected before anything is written.
    pub fn overwrite_from(&mut self, other: &ParamStore<E>) -> Result<()> {
        for (name, t) in other.iter() {
            let Some(current) = self.tensors.get(name) else {
                return Err(Error::Config(format!("unknown parameter `{name}`")));
            };
            if current.shape() != t.shape() {
                return Err(Error::Shape {
                    op: "overwrite_from",
                    lhs: current.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        for (name, t) in other.iter() {
            self.tensors.insert(name.to_string(), t.clone());
        }
        Ok(())
    }
}

/// Which bound parameters ask the tape for gradients.
#[derive(Debug, Clone, Copy)]
pub enum Trainable<'a> {
    Nothing,
    Everything,
    Only(&'a BTreeSet<String>),
}

impl Trainable<'_> {
    pub fn contains(&self, name: &str) -> bool {
        match self {
            Trainable::Nothing => false,
            Trainable::Everything => true,
            Trainable::Only(set) => set.contains(name),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    Spatial,
    Temporal,
}

/// Attention weights captured during a forward pass, `[sequences, heads, query, key]`.
#[derive(Debug, Clone)]
pub struct AttentionMap<E: Element> {
    pub block: usize,
    pub kind: AttentionKind,
    pub weights: Tensor<E>,
}

/// One forward pass: the tape plus the parameter bindings made on it.
pub struct Forward<'a, E: Element> {
    pub graph: Graph<E>,
    params: &'a ParamStore<E>,
    trainable: Trainable<'a>,
    bound: BTreeMap<String, Var>,
    drop_rng: Option<&'a mut Rng>,
    record_attention: bool,
    attention: Vec<AttentionMap<E>>,
    taps: Vec<(String, Var)>,
}

impl<'a, E: Element> Forward<'a, E> {
    pub fn new(params: &'a ParamStore<E>, trainable: Trainable<'a>) -> Self {
        Forward {
            graph: Graph::new(),
            params,
            trainable,
            bound: BTreeMap::new(),
            drop_rng: None,
            record_attention: false,
            attention: Vec::new(),
            taps: Vec::new(),
        }
    }

    /// Enables stochastic depth, drawing drop decisions from `rng`.
    pub fn with_stochastic_depth(mut self, rng: &'a mut Rng) -> Self {
        self.drop_rng = Some(rng);
        self
    }

    pub fn with_attention_recording(mut self) -> Self {
        self.record_attention = true;
        self
    }

    pub fn params(&self) -> &ParamStore<E> {
        self.params
    }

    /// Binds a named parameter as a tape leaf (once per pass).
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?;
        let v = self.graph.leaf(t.clone(), self.trainable.contains(name));
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.params.contains(name)
    }

    pub(crate) fn drop_rng(&mut self) -> Option<&mut Rng> {
        self.drop_rng.as_deref_mut()
    }

    pub(crate) fn recording(&self) -> bool {
        self.record_attention
    }

    pub(crate) fn record(&mut self, block: usize, kind: AttentionKind, weights: Tensor<E>) {
        self.attention.push(AttentionMap {
            block,
            kind,
            weights,
        });
    }

    pub fn attention(&self) -> &[AttentionMap<E>] {
        &self.attention
    }

    pub fn take_attention(&mut self) -> Vec<AttentionMap<E>> {
        core::mem::take(&mut self.attention)
    }

    /// Names an intermediate value so tests and tools can find it later.
    pub fn tap(&mut self, name: impl Into<String>, v: Var) {
        self.taps.push((name.into(), v));
    }

    pub fn tapped(&self, name: &str) -> Option<Var> {
        self.taps.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }

    /// Gradients of every bound trainable parameter after `graph.backward`.
    pub fn take_grads(&mut self) -> BTreeMap<String, Vec<E>> {
        let mut out = BTreeMap::new();
        for (name, &v) in &self.bound {
            if let Some(g) = self.graph.take_grad(v) {
                out.insert(name.clone(), g);
            }
        }
        out
    }
}
