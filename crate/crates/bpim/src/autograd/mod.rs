//! Minimal reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! The graph is built define-by-run: every op returns a new [`Var`] holding
//! its value plus a closure that maps the output gradient back onto the op's
//! parents. `backward()` walks the graph once in reverse topological order.
//! Gradients of intermediate nodes are dropped as soon as they have been
//! propagated; leaf parameters accumulate until `zero_grad`.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{ArrayD, IxDyn};

use crate::scalar::Scalar;

pub mod check;
pub mod conv;
pub mod norm;
pub mod ops;
pub mod pool;

/// Dynamic-rank tensor carried by every graph node.
pub type Arr<T> = ArrayD<T>;

type BackwardFn<T> = Box<dyn Fn(&Arr<T>, &[bool]) -> Vec<Option<Arr<T>>>>;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

/// While alive, newly created ops record no graph (pure inference).
pub struct NoGradGuard {
    prev: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        NO_GRAD.with(|f| f.set(self.prev));
    }
}

/// Disable graph recording until the returned guard is dropped.
pub fn no_grad() -> NoGradGuard {
    let prev = NO_GRAD.with(|f| f.replace(true));
    NoGradGuard { prev }
}

fn grad_enabled() -> bool {
    !NO_GRAD.with(|f| f.get())
}

struct Node<T: Scalar> {
    id: u64,
    value: RefCell<Arr<T>>,
    grad: RefCell<Option<Arr<T>>>,
    requires_grad: bool,
    parents: Vec<Var<T>>,
    backward: Option<BackwardFn<T>>,
}

/// A tensor in the autodiff graph. Cloning is cheap (shared node).
pub struct Var<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Scalar> Var<T> {
    fn new_node(
        value: Arr<T>,
        requires_grad: bool,
        parents: Vec<Var<T>>,
        backward: Option<BackwardFn<T>>,
    ) -> Self {
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value: RefCell::new(value),
            grad: RefCell::new(None),
            requires_grad,
            parents,
            backward,
        }))
    }

    /// Leaf that never receives a gradient (inputs, targets, constants).
    pub fn constant(value: Arr<T>) -> Self {
        Self::new_node(value, false, Vec::new(), None)
    }

    /// Trainable leaf; gradients accumulate here across backward calls.
    pub fn parameter(value: Arr<T>) -> Self {
        Self::new_node(value, true, Vec::new(), None)
    }

    pub fn scalar(x: T) -> Self {
        Self::constant(Arr::from_elem(IxDyn(&[]), x))
    }

    /// Internal constructor used by every op.
    pub(crate) fn from_op<F>(value: Arr<T>, parents: Vec<Var<T>>, backward: F) -> Self
    where
        F: Fn(&Arr<T>, &[bool]) -> Vec<Option<Arr<T>>> + 'static,
    {
        let track = grad_enabled() && parents.iter().any(|p| p.0.requires_grad);
        if track {
            Self::new_node(value, true, parents, Some(Box::new(backward)))
        } else {
            Self::constant(value)
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.backward.is_none()
    }

    pub fn value(&self) -> Ref<'_, Arr<T>> {
        self.0.value.borrow()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.value.borrow().shape().to_vec()
    }

    /// Detached copy of the current value.
    pub fn to_array(&self) -> Arr<T> {
        self.0.value.borrow().clone()
    }

    pub fn scalar_value(&self) -> T {
        let v = self.0.value.borrow();
        debug_assert_eq!(v.len(), 1, "scalar_value on non-scalar tensor");
        *v.iter().next().expect("non-empty")
    }

    /// Replace the stored value (parameter updates, running stats).
    pub fn set_value(&self, value: Arr<T>) {
        debug_assert_eq!(value.shape(), self.0.value.borrow().shape());
        *self.0.value.borrow_mut() = value;
    }

    /// In-place mutation of the stored value.
    pub fn update_value(&self, f: impl FnOnce(&mut Arr<T>)) {
        f(&mut self.0.value.borrow_mut());
    }

    pub fn grad(&self) -> Option<Arr<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Detach from the graph: same value, no history.
    pub fn detach(&self) -> Self {
        Self::constant(self.to_array())
    }

    fn accumulate(&self, g: Arr<T>) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.zip_mut_with(&g, |a, b| *a += *b),
            None => *slot = Some(g),
        }
    }

    /// Reverse-mode sweep from this node. Seeds with ones, so calling it on a
    /// scalar loss yields d(loss)/d(leaf) in every reachable leaf's grad slot.
    pub fn backward(&self) {
        if !self.0.requires_grad {
            return;
        }
        let order = self.topo_order();
        {
            let shape = self.0.value.borrow().raw_dim();
            self.accumulate(Arr::ones(shape));
        }
        for node in order.iter().rev() {
            let grad = {
                let mut slot = node.0.grad.borrow_mut();
                if node.is_leaf() {
                    continue; // leaves keep accumulated grads
                }
                match slot.take() {
                    Some(g) => g,
                    None => continue, // not on a path to the root
                }
            };
            if let Some(backward) = &node.0.backward {
                let needs: Vec<bool> = node.0.parents.iter().map(|p| p.0.requires_grad).collect();
                let grads = backward(&grad, &needs);
                debug_assert_eq!(grads.len(), node.0.parents.len());
                for (parent, g) in node.0.parents.iter().zip(grads) {
                    if let (true, Some(g)) = (parent.0.requires_grad, g) {
                        debug_assert_eq!(
                            g.shape(),
                            parent.0.value.borrow().shape(),
                            "gradient shape mismatch"
                        );
                        parent.accumulate(g);
                    }
                }
            }
        }
    }

    /// Post-order DFS: every parent precedes its children in the result.
    fn topo_order(&self) -> Vec<Var<T>> {
        let mut visited: HashSet<u64> = HashSet::new();
        let mut order: Vec<Var<T>> = Vec::new();
        let mut stack: Vec<(Var<T>, usize)> = vec![(self.clone(), 0)];
        while let Some((node, idx)) = stack.pop() {
            if idx == 0 && visited.contains(&node.id()) {
                continue;
            }
            if idx < node.0.parents.len() {
                let parent = node.0.parents[idx].clone();
                stack.push((node, idx + 1));
                if !visited.contains(&parent.id()) && parent.0.requires_grad {
                    stack.push((parent, 0));
                }
            } else if visited.insert(node.id()) {
                order.push(node);
            }
        }
        order
    }
}

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}
