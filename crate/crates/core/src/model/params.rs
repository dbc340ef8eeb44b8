//! Named parameter storage and the per-forward graph context.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Insertion-ordered map from canonical names to tensors.
#[derive(Clone, Debug, Default)]
pub struct TensorMap<T> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Real> TensorMap<T> {
    pub fn new() -> Self {
        TensorMap {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate tensor name {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("unknown tensor {name}")))
    }

    /// Replaces an existing entry, checking its shape.
    pub fn set(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        let slot = self
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown tensor {name}")))?;
        if slot.shape() != t.shape() {
            return Err(Error::shape(format!(
                "{name}: expected {:?}, got {:?}",
                slot.shape(),
                t.shape()
            )));
        }
        *slot = t;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> TensorMap<U> {
        TensorMap {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Learnable parameters plus non-learnable buffers (running statistics).
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    pub params: TensorMap<T>,
    pub buffers: TensorMap<T>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: TensorMap::new(),
            buffers: TensorMap::new(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.cast(),
            buffers: self.buffers.cast(),
        }
    }
}

/// Whether a forward pass runs with training-time behaviour (batch
/// statistics, dropout, random positional chunks) or inference behaviour.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// State of one forward pass: parameter leaves, mode, randomness and the
/// buffer updates it produced.
pub struct Ctx<'a, T: Real> {
    store: &'a ParamStore<T>,
    mode: Mode,
    track: bool,
    bound: RefCell<HashMap<String, Var<T>>>,
    rng: RefCell<ChaCha8Rng>,
    updates: RefCell<Vec<(String, Tensor<T>)>>,
}

impl<'a, T: Real> Ctx<'a, T> {
    /// `track` makes parameters gradient-requiring leaves.
    pub fn new(store: &'a ParamStore<T>, mode: Mode, track: bool, seed: u64) -> Self {
        Ctx {
            store,
            mode,
            track,
            bound: RefCell::new(HashMap::new()),
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
            updates: RefCell::new(Vec::new()),
        }
    }

    /// Inference context without gradient tracking.
    pub fn eval(store: &'a ParamStore<T>) -> Self {
        Self::new(store, Mode::Eval, false, 0)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Makes `name` resolve to `var` for the rest of this pass.
    pub fn bind(&self, name: impl Into<String>, var: Var<T>) {
        self.bound.borrow_mut().insert(name.into(), var);
    }

    /// The graph node of parameter `name`; repeated lookups return the same
    /// node, so shared parameters accumulate a single gradient.
    pub fn param(&self, name: &str) -> Result<Var<T>> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(v.clone());
        }
        let t = self.store.params.require(name)?.clone();
        let v = if self.track {
            Var::leaf(t)
        } else {
            Var::constant(t)
        };
        self.bound.borrow_mut().insert(name.to_string(), v.clone());
        Ok(v)
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.store.buffers.require(name)
    }

    /// Parameter nodes created so far, by name.
    pub fn leaves(&self) -> Vec<(String, Var<T>)> {
        let mut v: Vec<_> = self
            .bound
            .borrow()
            .iter()
            .map(|(n, v)| (n.clone(), v.clone()))
            .collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }

    pub fn with_rng<R>(&self, f: impl FnOnce(&mut ChaCha8Rng) -> R) -> R {
        f(&mut self.rng.borrow_mut())
    }

    pub(crate) fn record_update(&self, name: String, t: Tensor<T>) {
        self.updates.borrow_mut().push((name, t));
    }

    /// Buffer updates produced by this pass, in the order they happened.
    pub fn take_updates(&self) -> Vec<(String, Tensor<T>)> {
        std::mem::take(&mut self.updates.borrow_mut())
    }
}

impl<T: Real> ParamStore<T> {
    /// Folds batch statistics recorded by a training pass into the running
    /// averages, `r ← (1 − momentum)·r + momentum·s`, in recorded order.
    pub fn apply_running(&mut self, updates: &[(String, Tensor<T>)], momentum: f64) -> Result<()> {
        let m = T::lit(momentum);
        for (name, stat) in updates {
            let slot = self
                .buffers
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("unknown buffer {name}")))?;
            if slot.shape() != stat.shape() {
                return Err(Error::shape(format!("buffer {name} update shape")));
            }
            for (r, &s) in slot.data_mut().iter_mut().zip(stat.data()) {
                *r = (T::one() - m) * *r + m * s;
            }
        }
        Ok(())
    }
}
