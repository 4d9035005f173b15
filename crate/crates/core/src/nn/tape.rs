//! Minimal reverse-mode autodiff over `ndarray` tensors.
//!
//! A [`Tape`] is an append-only arena of nodes. Operations record their
//! output value plus a backward closure that scatters cotangents into a
//! [`GradStore`]. Node ids grow monotonically, so one reverse sweep over the
//! arena visits every node after all of its consumers; accumulation order is
//! therefore deterministic, which keeps training runs reproducible.
//!
//! Forward values are wrapped in `Rc` so backward closures can capture the
//! exact tensors they need without copying.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

use super::scalar::Scalar;

pub(crate) type BackFn<F> = Box<dyn Fn(&ArrayD<F>, &mut GradStore<F>)>;

pub(crate) struct Node<F: Scalar> {
    value: Rc<ArrayD<F>>,
    backward: Option<BackFn<F>>,
}

pub struct Tape<F: Scalar> {
    nodes: Rc<RefCell<Vec<Node<F>>>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Rc::new(RefCell::new(Vec::new())),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Record a leaf holding `value`. Gradients flow into it only when
    /// `needs_grad` is set.
    pub fn leaf(&self, value: ArrayD<F>, needs_grad: bool) -> Var<F> {
        self.push(value, needs_grad, None)
    }

    /// Constant input: no gradient is tracked.
    pub fn input(&self, value: ArrayD<F>) -> Var<F> {
        self.leaf(value, false)
    }

    /// Trainable parameter: gradient is tracked.
    pub fn param(&self, value: ArrayD<F>) -> Var<F> {
        self.leaf(value, true)
    }

    pub(crate) fn push(
        &self,
        value: ArrayD<F>,
        needs_grad: bool,
        backward: Option<BackFn<F>>,
    ) -> Var<F> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            backward: if needs_grad { backward } else { None },
        });
        Var {
            nodes: Rc::clone(&self.nodes),
            id,
            needs_grad,
        }
    }

    /// Reverse sweep seeding `root` with a cotangent of ones. Returns the
    /// store of accumulated gradients, indexed by variable.
    pub fn backward(&self, root: &Var<F>) -> GradStore<F> {
        let nodes = self.nodes.borrow();
        assert!(
            Rc::ptr_eq(&self.nodes, &root.nodes),
            "backward root from another tape"
        );
        let mut store = GradStore {
            grads: vec![None; nodes.len()],
        };
        let seed = ArrayD::<F>::ones(IxDyn(nodes[root.id].value.shape()));
        store.grads[root.id] = Some(seed);
        for id in (0..=root.id).rev() {
            let Some(g) = store.grads[id].take() else {
                continue;
            };
            if let Some(back) = nodes[id].backward.as_ref() {
                back(&g, &mut store);
            }
            store.grads[id] = Some(g);
        }
        store
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct GradStore<F: Scalar> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> GradStore<F> {
    /// Accumulate a cotangent contribution for node `id`.
    pub fn add(&mut self, id: usize, g: ArrayD<F>) {
        match &mut self.grads[id] {
            Some(acc) => acc.zip_mut_with(&g, |a, &b| *a = *a + b),
            slot @ None => *slot = Some(g),
        }
    }

    /// Gradient of the root with respect to `var`, if any path reached it.
    pub fn get(&self, var: &Var<F>) -> Option<&ArrayD<F>> {
        self.grads[var.id].as_ref()
    }

    pub fn take(&mut self, var: &Var<F>) -> Option<ArrayD<F>> {
        self.grads[var.id].take()
    }
}

/// Handle to a tape node.
#[derive(Clone)]
pub struct Var<F: Scalar> {
    pub(crate) nodes: Rc<RefCell<Vec<Node<F>>>>,
    pub(crate) id: usize,
    pub(crate) needs_grad: bool,
}

impl<F: Scalar> Var<F> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn needs_grad(&self) -> bool {
        self.needs_grad
    }

    /// Shared handle to this node's forward value.
    pub fn value(&self) -> Rc<ArrayD<F>> {
        Rc::clone(&self.nodes.borrow()[self.id].value)
    }

    /// Forward value of a zero-dimensional (scalar) node.
    pub fn scalar(&self) -> F {
        let v = self.value();
        assert_eq!(v.ndim(), 0, "scalar() on non-scalar var");
        *v.iter().next().unwrap()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub(crate) fn same_tape(&self, other: &Var<F>) -> bool {
        Rc::ptr_eq(&self.nodes, &other.nodes)
    }

    pub(crate) fn push(
        &self,
        value: ArrayD<F>,
        needs_grad: bool,
        backward: Option<BackFn<F>>,
    ) -> Var<F> {
        let tape = Tape {
            nodes: Rc::clone(&self.nodes),
        };
        tape.push(value, needs_grad, backward)
    }
}
