use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::{Grads, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Learned by the optimiser.
    Trainable,
    /// State updated outside the optimiser (e.g. running statistics).
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Arc<Tensor<T>>,
}

/// Named, ordered collection of a model's parameters and buffers.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.entries.push(ParamEntry { name, kind, value: Arc::new(value) });
        ParamId(self.entries.len() - 1)
    }

    pub fn trainable(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.add(name, value, ParamKind::Trainable)
    }

    pub fn buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.add(name, value, ParamKind::Buffer)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let cur = self.get(id);
        if cur.shape() != value.shape() {
            return Err(TensorError::shapes("ParamStore::set", cur.shape(), value.shape()));
        }
        self.entries[id.0].value = Arc::new(value);
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.kind == ParamKind::Trainable).map(|e| e.value.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { name: e.name.clone(), kind: e.kind, value: Arc::new(e.value.cast()) })
                .collect(),
        }
    }

    /// Bitwise equality of every entry.
    pub fn bit_equal(&self, other: &ParamStore<T>) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_f64().map(f64::to_bits) == y.to_f64().map(f64::to_bits))
            })
    }
}

/// Binding of a [`ParamStore`] to a tape for one forward pass.
///
/// Trainable entries become leaves (tracked when `track` is set), buffers
/// become constants. Layers running in training mode queue buffer updates,
/// applied with [`Ctx::apply_updates`] once the step is done.
pub struct Ctx<'t, T: Scalar> {
    tape: &'t Tape<T>,
    vars: Vec<Var<'t, T>>,
    values: Vec<Arc<Tensor<T>>>,
    training: bool,
    updates: RefCell<Vec<(ParamId, Tensor<T>)>>,
}

impl<'t, T: Scalar> Ctx<'t, T> {
    pub fn new(tape: &'t Tape<T>, store: &ParamStore<T>, track: bool, training: bool) -> Self {
        let vars = store
            .entries
            .iter()
            .map(|e| tape.leaf_shared(e.value.clone(), track && e.kind == ParamKind::Trainable))
            .collect();
        let values = store.entries.iter().map(|e| e.value.clone()).collect();
        Ctx { tape, vars, values, training, updates: RefCell::new(Vec::new()) }
    }

    /// Inference binding: no gradients, evaluation mode.
    pub fn inference(tape: &'t Tape<T>, store: &ParamStore<T>) -> Self {
        Self::new(tape, store, false, false)
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn p(&self, id: ParamId) -> Var<'t, T> {
        self.vars[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn queue_update(&self, id: ParamId, value: Tensor<T>) {
        self.updates.borrow_mut().push((id, value));
    }

    /// Gradients of every entry, aligned with the store (None for buffers
    /// and entries the loss does not depend on).
    pub fn grads(&self, grads: &Grads<T>) -> Vec<Option<Tensor<T>>> {
        self.vars.iter().map(|v| if v.requires_grad() { grads.get(*v) } else { None }).collect()
    }

    pub fn apply_updates(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (id, value) in self.updates.borrow_mut().drain(..) {
            store.set(id, value)?;
        }
        Ok(())
    }
}
