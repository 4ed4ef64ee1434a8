//! Named parameter storage and the layers built on it.
//!
//! Layers hold [`ParamId`]s into a [`ParameterTree`]; a forward pass runs
//! against a [`Ctx`] that binds every entry to a [`Var`] on one tape.

mod layers;

use std::cell::RefCell;

use indexmap::IndexMap;
use rand::Rng;

use crate::autograd::{BatchNormMode, BatchNormStats, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub use layers::{BatchNorm, Conv, ConvTranspose, Linear, ResCon};

pub type ParamId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    /// Trained by the optimizer.
    Param,
    /// State updated outside the gradient step (batch-norm running stats).
    Buffer,
}

/// Ordered map from dotted layer paths to tensors. Iteration order is
/// insertion order, so two builds from the same config and seed agree.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterTree<E: Element = f32> {
    entries: IndexMap<String, (Kind, Tensor<E>)>,
}

impl<E: Element> Default for ParameterTree<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> ParameterTree<E> {
    pub fn new() -> Self {
        ParameterTree { entries: IndexMap::new() }
    }

    pub fn insert(&mut self, name: &str, kind: Kind, value: Tensor<E>) -> Result<ParamId> {
        if self.entries.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name `{name}`")));
        }
        let (id, _) = self.entries.insert_full(name.to_string(), (kind, value));
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<E> {
        &self.entries[id].1
    }

    pub fn kind(&self, id: ParamId) -> Kind {
        self.entries[id].0
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id).map(|(n, _)| n.as_str()).unwrap_or("")
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name)
    }

    pub fn get_by_name(&self, name: &str) -> Option<&Tensor<E>> {
        self.entries.get(name).map(|(_, t)| t)
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<E>) -> Result<()> {
        let slot = &mut self.entries[id].1;
        if slot.shape() != value.shape() {
            return Err(Error::shape(
                "ParameterTree::set",
                format!("{:?} vs {:?}", slot.shape(), value.shape()),
            ));
        }
        *slot = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, Kind, &Tensor<E>)> {
        self.entries.iter().enumerate().map(|(i, (n, (k, t)))| (i, n.as_str(), *k, t))
    }

    /// Ids of trainable entries, in order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|e| e.2 == Kind::Param).map(|e| e.0).collect()
    }

    pub fn param_tensors(&self) -> Vec<Tensor<E>> {
        self.param_ids().into_iter().map(|i| self.get(i).clone()).collect()
    }

    /// Number of trainable scalars.
    pub fn num_parameters(&self) -> usize {
        self.iter().filter(|e| e.2 == Kind::Param).map(|e| e.3.numel()).sum()
    }

    pub fn cast<F: Element>(&self) -> ParameterTree<F> {
        ParameterTree {
            entries: self.entries.iter().map(|(n, (k, t))| (n.clone(), (*k, t.cast()))).collect(),
        }
    }

    pub fn apply_bn_updates(&mut self, updates: Vec<BnUpdate<E>>) -> Result<()> {
        for u in updates {
            self.set(u.mean, u.stats.mean)?;
            self.set(u.var, u.stats.var)?;
        }
        Ok(())
    }
}

/// Running-stat update produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnUpdate<E: Element> {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BatchNormStats<E>,
}

/// Parameter initialization while a model is being assembled.
pub struct Builder<'a, E: Element, R: Rng> {
    pub tree: &'a mut ParameterTree<E>,
    pub rng: &'a mut R,
}

impl<E: Element, R: Rng> Builder<'_, E, R> {
    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn weight(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let t = Tensor::uniform(shape, -bound, bound, self.rng);
        self.tree.insert(name, Kind::Param, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64, kind: Kind) -> Result<ParamId> {
        self.tree.insert(name, kind, Tensor::full(shape, E::lit(value)))
    }
}

/// One forward pass: every tree entry bound to a variable on `tape`.
pub struct Ctx<'t, E: Element> {
    pub tape: &'t Tape<E>,
    vars: Vec<Var<E>>,
    mode: BatchNormMode,
    bn_updates: RefCell<Vec<BnUpdate<E>>>,
}

impl<'t, E: Element> Ctx<'t, E> {
    /// Parameters become leaves, batch norm uses batch statistics.
    pub fn train(tape: &'t Tape<E>, tree: &ParameterTree<E>) -> Self {
        let vars = tree
            .iter()
            .map(|(_, _, k, t)| match k {
                Kind::Param => tape.leaf(t.clone()),
                Kind::Buffer => Var::constant(t.clone()),
            })
            .collect();
        Self::bound(tape, vars, BatchNormMode::Train)
    }

    /// Everything constant, batch norm uses running statistics; nothing is recorded.
    pub fn eval(tape: &'t Tape<E>, tree: &ParameterTree<E>) -> Self {
        let vars = tree.iter().map(|(_, _, _, t)| Var::constant(t.clone())).collect();
        Self::bound(tape, vars, BatchNormMode::Eval)
    }

    /// Binds trainable entries to caller-supplied variables (in
    /// [`ParameterTree::param_ids`] order) and buffers to constants.
    pub fn with_params(tape: &'t Tape<E>, tree: &ParameterTree<E>, params: &[Var<E>], mode: BatchNormMode) -> Result<Self> {
        let mut it = params.iter();
        let mut vars = Vec::with_capacity(tree.len());
        for (_, name, kind, t) in tree.iter() {
            vars.push(match kind {
                Kind::Buffer => Var::constant(t.clone()),
                Kind::Param => {
                    let v = it
                        .next()
                        .ok_or_else(|| Error::InvalidArgument("too few parameter variables".into()))?;
                    if v.shape() != t.shape() {
                        return Err(Error::shape("Ctx::with_params", format!("`{name}`: {:?} vs {:?}", v.shape(), t.shape())));
                    }
                    v.clone()
                }
            });
        }
        if it.next().is_some() {
            return Err(Error::InvalidArgument("too many parameter variables".into()));
        }
        Ok(Self::bound(tape, vars, mode))
    }

    fn bound(tape: &'t Tape<E>, vars: Vec<Var<E>>, mode: BatchNormMode) -> Self {
        Ctx { tape, vars, mode, bn_updates: RefCell::new(Vec::new()) }
    }

    pub fn var(&self, id: ParamId) -> &Var<E> {
        &self.vars[id]
    }

    pub fn mode(&self) -> BatchNormMode {
        self.mode
    }

    pub(crate) fn push_bn_update(&self, u: BnUpdate<E>) {
        self.bn_updates.borrow_mut().push(u);
    }

    /// Releases the tape borrow, keeping what the optimizer step needs.
    pub fn finish(self) -> Bound<E> {
        Bound { vars: self.vars, bn_updates: self.bn_updates.into_inner() }
    }
}

/// Variables and batch-norm updates from a finished forward pass.
pub struct Bound<E: Element> {
    vars: Vec<Var<E>>,
    pub bn_updates: Vec<BnUpdate<E>>,
}

impl<E: Element> Bound<E> {
    /// Gradient for every tree entry, index-aligned; zeros for buffers.
    pub fn gradients(&self, grads: &Gradients<E>) -> Vec<Tensor<E>> {
        self.vars.iter().map(|v| grads.wrt(v)).collect()
    }
}
