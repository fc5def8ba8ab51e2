//! Dense n-dimensional tensor with reverse-mode differentiation.
//!
//! A `Tensor` is a cheap handle (`Rc`) onto an immutable data buffer plus
//! its position in the computation graph. Operations build fresh nodes;
//! `backward()` on a scalar walks the graph in reverse topological order.
//! Leaves created with [`Tensor::param`] accumulate gradients across calls
//! until [`Tensor::zero_grad`].
//!
//! Buffers are written once by their producing op. The two sanctioned
//! mutations — optimizer steps and finite-difference probes — go through
//! [`Tensor::set_data`] on leaves, between graph constructions, in a single
//! execution context.
//!
//! Every op forward validates that its output is finite and fails with
//! [`Error::NonFinite`] otherwise.

use std::cell::{Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Gradient contributions for each parent of a node, in parent order.
/// `None` when the op does not differentiate through that input.
pub(crate) type ParentGrads<T> = Vec<Option<Vec<T>>>;
pub(crate) type BackwardFn<T> = Rc<dyn Fn(&[T]) -> ParentGrads<T>>;

pub(crate) struct Inner<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    needs_grad: bool,
    parents: Vec<Tensor<T>>,
    backward: Option<BackwardFn<T>>,
}

pub struct Tensor<T: Scalar> {
    inner: Rc<RefCell<Inner<T>>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

fn check_finite<T: Scalar>(op: &str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            op: op.to_string(),
            context: String::new(),
        })
    }
}

impl<T: Scalar> Tensor<T> {
    // ---- construction ------------------------------------------------

    /// Leaf tensor from raw data. Fails if the element count does not
    /// match the shape or the data contains NaN/Inf.
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::BadShape {
                op: "from_vec",
                shape: shape.to_vec(),
                detail: format!("shape implies {numel} elements, got {}", data.len()),
            });
        }
        check_finite("from_vec", &data)?;
        Ok(Self::new_leaf(data, shape.to_vec(), false))
    }

    /// Trainable leaf: participates in backward and accumulates `grad`.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let t = Self::from_vec(data, shape)?;
        t.make_param();
        Ok(t)
    }

    /// Promote a leaf to a trainable parameter in place.
    /// Panics on op outputs.
    pub fn make_param(&self) {
        let mut inner = self.inner.borrow_mut();
        assert!(
            inner.backward.is_none(),
            "make_param on an op output; only leaves can be parameters"
        );
        inner.requires_grad = true;
        inner.needs_grad = true;
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self::new_leaf(vec![T::zero(); numel], shape.to_vec(), false)
    }

    pub fn ones(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self::new_leaf(vec![T::one(); numel], shape.to_vec(), false)
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let numel: usize = shape.iter().product();
        Self::new_leaf(vec![v; numel], shape.to_vec(), false)
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(v: T) -> Self {
        Self::new_leaf(vec![v], Vec::new(), false)
    }

    fn new_leaf(data: Vec<T>, shape: Vec<usize>, requires_grad: bool) -> Self {
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                shape,
                data,
                grad: None,
                requires_grad,
                needs_grad: requires_grad,
                parents: Vec::new(),
                backward: None,
            })),
        }
    }

    /// Op-output constructor used by the ops modules. Attaches the node to
    /// the graph only when some parent participates in backward.
    pub(crate) fn from_op(
        op: &'static str,
        data: Vec<T>,
        shape: Vec<usize>,
        parents: Vec<Tensor<T>>,
        backward: impl Fn(&[T]) -> ParentGrads<T> + 'static,
    ) -> Result<Self> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        check_finite(op, &data)?;
        let needs_grad = parents.iter().any(|p| p.needs_grad());
        if !needs_grad {
            return Ok(Self::new_leaf(data, shape, false));
        }
        Ok(Tensor {
            inner: Rc::new(RefCell::new(Inner {
                shape,
                data,
                grad: None,
                requires_grad: false,
                needs_grad: true,
                parents,
                backward: Some(Rc::new(backward)),
            })),
        })
    }

    // ---- accessors -----------------------------------------------------

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn rank(&self) -> usize {
        self.inner.borrow().shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.inner.borrow().shape[axis]
    }

    /// Borrow the data buffer.
    pub fn data(&self) -> Ref<'_, [T]> {
        Ref::map(self.inner.borrow(), |i| i.data.as_slice())
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.borrow().data.clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        let inner = self.inner.borrow();
        assert_eq!(inner.data.len(), 1, "item() on tensor with numel != 1");
        inner.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub(crate) fn needs_grad(&self) -> bool {
        self.inner.borrow().needs_grad
    }

    /// Accumulated gradient of a trainable leaf, if any backward has run.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Same-node identity (two handles onto one buffer).
    pub fn same_node(&self, other: &Tensor<T>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Replace a leaf's data in place. Panics on interior nodes; those are
    /// immutable once written.
    pub fn set_data(&self, data: Vec<T>) {
        let mut inner = self.inner.borrow_mut();
        assert!(
            inner.backward.is_none(),
            "set_data on an op output; only leaves may be mutated"
        );
        assert_eq!(inner.data.len(), data.len(), "set_data length mismatch");
        inner.data = data;
    }

    /// Leaf copy of this tensor's values, cut off from the graph.
    pub fn detach(&self) -> Tensor<T> {
        let inner = self.inner.borrow();
        Self::new_leaf(inner.data.clone(), inner.shape.clone(), false)
    }

    fn ptr_key(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    // ---- backward ------------------------------------------------------

    /// Reverse pass from a one-element output. Gradients of trainable
    /// leaves accumulate into their `grad` buffers.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::BadShape {
                op: "backward",
                shape: self.shape(),
                detail: "backward requires a one-element output".to_string(),
            });
        }
        if !self.needs_grad() {
            return Ok(());
        }

        let order = self.topo_order();
        let mut grads: HashMap<usize, Vec<T>> = HashMap::new();
        grads.insert(self.ptr_key(), vec![T::one()]);

        for node in &order {
            let Some(grad_out) = grads.remove(&node.ptr_key()) else {
                continue;
            };
            let (is_leaf, back, parents) = {
                let inner = node.inner.borrow();
                (
                    inner.requires_grad,
                    inner.backward.clone(),
                    inner.parents.clone(),
                )
            };
            if is_leaf {
                let mut inner = node.inner.borrow_mut();
                let n = inner.data.len();
                let slot = inner.grad.get_or_insert_with(|| vec![T::zero(); n]);
                for (s, g) in slot.iter_mut().zip(grad_out.iter()) {
                    *s = *s + *g;
                }
                continue;
            }
            let Some(back) = back else { continue };
            let parent_grads = back(&grad_out);
            debug_assert_eq!(parent_grads.len(), parents.len());
            for (parent, pg) in parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !parent.needs_grad() {
                    continue;
                }
                debug_assert_eq!(pg.len(), parent.numel());
                let entry = grads
                    .entry(parent.ptr_key())
                    .or_insert_with(|| vec![T::zero(); pg.len()]);
                for (e, g) in entry.iter_mut().zip(pg.iter()) {
                    *e = *e + *g;
                }
            }
        }
        Ok(())
    }

    /// Nodes reachable through grad-needing parents, output first.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.ptr_key()) {
                continue;
            }
            stack.push((node.clone(), true));
            let parents = node.inner.borrow().parents.clone();
            for p in parents {
                if p.needs_grad() && !visited.contains(&p.ptr_key()) {
                    stack.push((p, false));
                }
            }
        }
        order.reverse();
        order
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        write!(f, "Tensor{:?}", inner.shape)?;
        if inner.data.len() <= 8 {
            write!(f, " {:?}", inner.data)
        } else {
            write!(f, " [{:?}, {:?}, ...]", inner.data[0], inner.data[1])
        }
    }
}

/// Row-major strides of a shape.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_agreement_enforced() {
        assert!(Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0], &[2, 2]).is_err());
        assert!(Tensor::<f64>::from_vec(vec![1.0; 4], &[2, 2]).is_ok());
    }

    #[test]
    fn non_finite_leaf_rejected() {
        let e = Tensor::<f64>::from_vec(vec![1.0, f64::NAN], &[2]).unwrap_err();
        assert!(matches!(e, Error::NonFinite { .. }));
    }

    #[test]
    fn scalar_has_empty_shape() {
        let s = Tensor::<f64>::scalar(3.5);
        assert_eq!(s.shape(), Vec::<usize>::new());
        assert_eq!(s.numel(), 1);
        assert_eq!(s.item(), 3.5);
    }

    #[test]
    fn grad_accumulates_until_zeroed() {
        let x = Tensor::<f64>::param(vec![2.0], &[1]).unwrap();
        for _ in 0..2 {
            let y = x.mul(&x).unwrap().sum_all().unwrap();
            y.backward().unwrap();
        }
        assert_eq!(x.grad().unwrap(), vec![8.0]); // 2 * (2x) at x=2
        x.zero_grad();
        assert!(x.grad().is_none());
    }
}
