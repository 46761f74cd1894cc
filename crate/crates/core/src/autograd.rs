//! Minimal reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Var`] owns its value and, only when some ancestor requires a gradient,
//! the parents and backward closure that produced it. Graphs built entirely
//! from constants therefore release intermediates as soon as the caller drops
//! them, which keeps inference memory close to the live working set.

use std::cell::Cell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::tensor::{Real, Tensor};

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[Var<T>]) -> Vec<Option<Tensor<T>>>>;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

struct Node<T: Real> {
    id: u64,
    value: Tensor<T>,
    requires_grad: bool,
    parents: Vec<Var<T>>,
    backward: Option<BackwardFn<T>>,
}

/// A node in a dynamically built computation graph.
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
    /// A constant: no gradient flows into it.
    pub fn constant(value: Tensor<T>) -> Self {
        Self::leaf(value, false)
    }

    /// A trainable leaf whose gradient is reported by [`Var::backward`].
    pub fn parameter(value: Tensor<T>) -> Self {
        Self::leaf(value, true)
    }

    fn leaf(value: Tensor<T>, requires_grad: bool) -> Self {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad,
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// Records an operation. Parents and the closure are dropped when no
    /// parent requires a gradient.
    pub fn from_op(
        value: Tensor<T>,
        parents: Vec<Var<T>>,
        backward: impl Fn(&Tensor<T>, &[Var<T>]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Self {
        let requires_grad = parents.iter().any(Var::requires_grad);
        let (parents, backward) = if requires_grad {
            (parents, Some(Box::new(backward) as BackwardFn<T>))
        } else {
            (Vec::new(), None)
        };
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad,
            parents,
            backward,
        }))
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

    pub fn id(&self) -> u64 {
        self.0.id
    }

    /// Back-propagates from this node, seeding with ones.
    pub fn backward(&self) -> Grads<T> {
        let mut grads = HashMap::new();
        if !self.requires_grad() {
            return Grads { map: grads };
        }
        let order = self.topo_order();
        grads.insert(self.id(), Tensor::full(self.shape(), T::one()));
        let mut leaves = HashMap::new();
        for var in order.iter().rev() {
            let Some(g) = grads.remove(&var.id()) else {
                continue;
            };
            match &var.0.backward {
                None => {
                    leaves.insert(var.id(), g);
                }
                Some(f) => {
                    let parent_grads = f(&g, &var.0.parents);
                    debug_assert_eq!(parent_grads.len(), var.0.parents.len());
                    for (parent, pg) in var.0.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.shape(), parent.shape());
                        match grads.get_mut(&parent.id()) {
                            Some(acc) => acc.add_assign(&pg),
                            None => {
                                grads.insert(parent.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        Grads { map: leaves }
    }

    /// Post-order over nodes that require a gradient.
    fn topo_order(&self) -> Vec<Var<T>> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Var<T>, bool)> = vec![(self.clone(), false)];
        while let Some((var, expanded)) = stack.pop() {
            if expanded {
                order.push(var);
                continue;
            }
            if !visited.insert(var.id()) {
                continue;
            }
            stack.push((var.clone(), true));
            for p in var.0.parents.iter().filter(|p| p.requires_grad()) {
                if !visited.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}

/// Gradients of leaf parameters produced by [`Var::backward`].
#[derive(Debug, Default)]
pub struct Grads<T: Real> {
    map: HashMap<u64, Tensor<T>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        self.map.get(&var.id())
    }

    pub fn take(&mut self, var: &Var<T>) -> Option<Tensor<T>> {
        self.map.remove(&var.id())
    }
}
