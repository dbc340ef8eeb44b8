use std::collections::{BTreeMap, HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::tensor::{Real, Tensor};

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

/// Backward rule: maps the output gradient to one optional gradient per parent.
pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&Tensor<T>, &[Var<T>], &Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct GradFn<T: Real> {
    parents: Vec<Var<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Real> {
    id: usize,
    value: Tensor<T>,
    requires_grad: bool,
    grad_fn: Option<GradFn<T>>,
}

/// A node of a dynamically built computation graph.
///
/// Nodes that do not (transitively) depend on a gradient-requiring leaf keep
/// no reference to their inputs, so inference graphs free intermediates as
/// soon as the owning `Var` is dropped.
pub struct Var<T: Real>(Rc<Node<T>>);

impl<T: Real> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Real> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.0.value.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<T: Real> Var<T> {
    fn new(value: Tensor<T>, requires_grad: bool, grad_fn: Option<GradFn<T>>) -> Self {
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            grad_fn,
        }))
    }

    /// Input or constant: no gradient is tracked.
    pub fn constant(value: Tensor<T>) -> Self {
        Self::new(value, false, None)
    }

    /// Trainable leaf: gradients are accumulated for it.
    pub fn leaf(value: Tensor<T>) -> Self {
        Self::new(value, true, None)
    }

    pub(crate) fn from_op(value: Tensor<T>, parents: Vec<Var<T>>, backward: BackwardFn<T>) -> Self {
        if parents.iter().any(Var::requires_grad) {
            Self::new(
                value,
                true,
                Some(GradFn {
                    parents,
                    backward,
                }),
            )
        } else {
            Self::new(value, false, None)
        }
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Detached copy of the value.
    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }

    /// Reverse-mode sweep from this (scalar) node.
    pub fn backward(&self) -> Gradients<T> {
        let seed = Tensor::ones(self.shape());
        self.backward_with(seed)
    }

    /// Reverse-mode sweep seeded with an explicit output gradient.
    pub fn backward_with(&self, seed: Tensor<T>) -> Gradients<T> {
        let mut leaves = HashMap::new();
        if !self.requires_grad() {
            return Gradients { leaves };
        }
        // Children always carry larger ids than their parents, so descending
        // id order is a valid reverse topological order.
        let mut order: BTreeMap<usize, Var<T>> = BTreeMap::new();
        let mut seen = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(v) = stack.pop() {
            if !seen.insert(v.id()) {
                continue;
            }
            if let Some(gf) = &v.0.grad_fn {
                for p in &gf.parents {
                    if p.requires_grad() && !seen.contains(&p.id()) {
                        stack.push(p.clone());
                    }
                }
            }
            order.insert(v.id(), v);
        }

        let mut grads: HashMap<usize, Tensor<T>> = HashMap::new();
        grads.insert(self.id(), seed);
        for (id, var) in order.into_iter().rev() {
            let Some(g) = grads.remove(&id) else {
                continue;
            };
            match &var.0.grad_fn {
                None => {
                    leaves.insert(id, g);
                }
                Some(gf) => {
                    let parent_grads = (gf.backward)(&g, &gf.parents, &var.0.value);
                    debug_assert_eq!(parent_grads.len(), gf.parents.len());
                    for (p, pg) in gf.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.shape(), p.shape(), "gradient shape mismatch");
                        match grads.get_mut(&p.id()) {
                            Some(acc) => acc.add_assign(&pg),
                            None => {
                                grads.insert(p.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        Gradients { leaves }
    }
}

/// Gradients of trainable leaves produced by [`Var::backward`].
pub struct Gradients<T> {
    leaves: HashMap<usize, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf; `None` when the loss does not depend on it.
    pub fn get(&self, v: &Var<T>) -> Option<&Tensor<T>> {
        self.leaves.get(&v.id())
    }

    /// Gradient of a leaf, or zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: &Var<T>) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.shape()))
    }
}
