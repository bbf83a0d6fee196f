use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Computes parent gradients from the output gradient, the output value and
/// the parents. Entries are `None` for parents that need no gradient.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T], &[T], &[Tensor<T>]) -> Vec<Option<Vec<T>>>>;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

struct Node<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: Cell<bool>,
    parents: Vec<Tensor<T>>,
    backward: Option<BackwardFn<T>>,
}

/// Dense row-major tensor with reverse-mode gradient tracking.
///
/// Cloning is cheap and shares the underlying node, so parameters can be
/// held by the model and referenced by every graph built on top of them.
pub struct Tensor<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.0.data.borrow();
        let preview: Vec<&T> = data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad.get())
            .field("data", &preview)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    fn make(
        data: Vec<T>,
        shape: Vec<usize>,
        requires_grad: bool,
        parents: Vec<Tensor<T>>,
        backward: Option<BackwardFn<T>>,
    ) -> Self {
        debug_assert_eq!(data.len(), numel(&shape));
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: Cell::new(requires_grad),
            parents,
            backward,
        }))
    }

    /// A constant (no gradient) tensor.
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if data.len() != numel(shape) {
            return Err(Error::shape(
                "new",
                format!("{} values for shape {shape:?}", data.len()),
            ));
        }
        Ok(Self::make(data, shape.to_vec(), false, Vec::new(), None))
    }

    /// A trainable leaf tensor.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let t = Self::new(data, shape)?;
        t.0.requires_grad.set(true);
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::make(vec![T::zero(); numel(shape)], shape.to_vec(), false, Vec::new(), None)
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self::make(vec![v; numel(shape)], shape.to_vec(), false, Vec::new(), None)
    }

    pub fn scalar(v: T) -> Self {
        Self::make(vec![v], Vec::new(), false, Vec::new(), None)
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::new(data.iter().map(|&v| T::lit(v)).collect(), shape)
    }

    /// Result of an op; it tracks gradients iff some parent does.
    pub(crate) fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        let rg = parents.iter().any(|p| p.requires_grad());
        if rg {
            Self::make(data, shape, true, parents, Some(backward))
        } else {
            Self::make(data, shape, false, Vec::new(), None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    /// `(rows, cols)` of a 2-D tensor; vectors and scalars count as one row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.0.shape.len() {
            0 => (1, 1),
            1 => (1, self.0.shape[0]),
            _ => {
                let cols = *self.0.shape.last().unwrap();
                (self.numel() / cols.max(1), cols)
            }
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad.get()
    }

    pub fn set_requires_grad(&self, v: bool) {
        self.0.requires_grad.set(v);
    }

    pub fn is_leaf(&self) -> bool {
        self.0.backward.is_none()
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.borrow().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.borrow().iter().map(|v| v.as_f64()).collect()
    }

    /// Overwrites the values in place; the shape is fixed.
    pub fn set_data(&self, data: Vec<T>) -> Result<()> {
        if data.len() != self.numel() {
            return Err(Error::shape(
                "set_data",
                format!("{} values for shape {:?}", data.len(), self.shape()),
            ));
        }
        *self.0.data.borrow_mut() = data;
        Ok(())
    }

    pub fn update_data(&self, f: impl FnOnce(&mut [T])) {
        f(&mut self.0.data.borrow_mut());
    }

    pub fn item(&self) -> T {
        self.0.data.borrow()[0]
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        let (_, c) = self.dims2();
        self.0.data.borrow()[row * c + col]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn has_grad(&self) -> bool {
        self.0.grad.borrow().is_some()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub(crate) fn take_grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow_mut().take()
    }

    fn accumulate_grad(&self, g: &[T]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, &b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Copy of the values as a new constant leaf.
    pub fn detach(&self) -> Self {
        Self::make(self.to_vec(), self.0.shape.clone(), false, Vec::new(), None)
    }

    /// Back-propagates from this scalar, accumulating into every reachable
    /// leaf that requires a gradient. Interior gradients are released.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        self.accumulate_grad(&[T::one()]);
        for node in order.iter().rev() {
            let Some(backward) = node.0.backward.as_ref() else {
                continue;
            };
            let Some(g) = node.take_grad() else { continue };
            let out = node.0.data.borrow();
            let grads = backward(&g, &out, &node.0.parents);
            drop(out);
            for (parent, pg) in node.0.parents.iter().zip(grads) {
                if let Some(pg) = pg {
                    if parent.requires_grad() {
                        parent.accumulate_grad(&pg);
                    }
                }
            }
        }
        Ok(())
    }

    /// Nodes reachable from `self`, parents before children.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            for p in node.0.parents.iter().rev() {
                if p.requires_grad() && !visited.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}
