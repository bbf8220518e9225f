//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! Every op builds a node holding its parents and a backward closure;
//! `backward()` walks the graph once in reverse topological order and
//! accumulates gradients into the leaves. Graphs are per-call: clone a
//! `Tensor` to share the underlying node, drop the last handle to free it.

mod check;
mod io;
mod ops;

pub use check::{finite_diff_gradients, max_grad_discrepancy};
pub use io::{read_bten, write_bten, Dtype};
pub use ops::{no_grad, sum_scalars};

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Backward closure: receives (output grad, output data) and accumulates
/// into the parents it captured.
type GradFn = Box<dyn Fn(&[f64], &[f64])>;

pub(crate) struct Inner {
    data: Vec<f64>,
    shape: Vec<usize>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    grad_fn: Option<GradFn>,
}

#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<Inner>>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .finish()
    }
}

fn validate_shape(data_len: usize, shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "dimensions must all be >= 1".into(),
        });
    }
    let numel: usize = shape.iter().product();
    if numel != data_len {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("data length {data_len} != product of dims {numel}"),
        });
    }
    Ok(())
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        validate_shape(data.len(), shape)?;
        Ok(Self::from_parts(data, shape.to_vec(), false))
    }

    /// Leaf tensor that participates in gradient computation.
    pub fn var(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        validate_shape(data.len(), shape)?;
        Ok(Self::from_parts(data, shape.to_vec(), true))
    }

    pub fn scalar(v: f64) -> Tensor {
        Self::from_parts(vec![v], vec![1], false)
    }

    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        Tensor::new(vec![0.0; numel], shape)
    }

    pub(crate) fn from_parts(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                data,
                shape,
                grad: None,
                requires_grad,
                parents: Vec::new(),
                grad_fn: None,
            })),
        }
    }

    /// Node produced by an op. `requires_grad` is inherited from parents and
    /// the closure is only kept when gradients will actually flow.
    pub(crate) fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        grad_fn: GradFn,
    ) -> Tensor {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                data,
                shape,
                grad: None,
                requires_grad,
                parents: if requires_grad { parents } else { Vec::new() },
                grad_fn: if requires_grad { Some(grad_fn) } else { None },
            })),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.inner.borrow(), |i| i.data.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    pub fn item(&self) -> f64 {
        let inner = self.inner.borrow();
        assert_eq!(inner.data.len(), 1, "item() on non-scalar tensor");
        inner.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, v: bool) {
        let mut inner = self.inner.borrow_mut();
        inner.requires_grad = v;
        if !v {
            inner.grad = None;
        }
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        let mut inner = self.inner.borrow_mut();
        if let Some(g) = inner.grad.as_mut() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Overwrite the stored values in place (used by optimizers; the tensor
    /// keeps its identity so existing graphs must not be reused afterwards).
    pub fn set_data(&self, data: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(inner.data.len(), data.len(), "set_data length mismatch");
        inner.data.copy_from_slice(data);
    }

    pub(crate) fn accumulate_grad(&self, contrib: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        if !inner.requires_grad {
            return;
        }
        let n = inner.data.len();
        debug_assert_eq!(contrib.len(), n);
        let g = inner.grad.get_or_insert_with(|| vec![0.0; n]);
        for (gi, ci) in g.iter_mut().zip(contrib) {
            *gi += ci;
        }
    }

    fn ptr_id(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    /// Reverse topological order (root first), iterative so deep graphs
    /// cannot overflow the stack. Each node appears exactly once.
    fn reverse_topo(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.ptr_id()) {
                continue;
            }
            stack.push((node.clone(), true));
            let inner = node.inner.borrow();
            for p in &inner.parents {
                if p.requires_grad() && !visited.contains(&p.ptr_id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order.reverse();
        order
    }

    /// Backpropagate from a single-element tensor, seeding d(self)/d(self)=1.
    /// Gradients accumulate; callers zero them between independent passes.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::InvalidArgument {
                what: "backward",
                reason: format!("root must have a single element, got shape {:?}", self.shape()),
            });
        }
        if !self.requires_grad() {
            return Err(Error::InvalidArgument {
                what: "backward",
                reason: "root does not require grad".into(),
            });
        }
        self.accumulate_grad(&[1.0]);
        for node in self.reverse_topo() {
            // Copy what the closure needs out of the node first so it can
            // borrow parents freely (a parent is never its own child).
            let (has_fn, out_grad, out_data) = {
                let inner = node.inner.borrow();
                match (&inner.grad_fn, &inner.grad) {
                    (Some(_), Some(g)) => (true, g.clone(), inner.data.clone()),
                    _ => (false, Vec::new(), Vec::new()),
                }
            };
            if has_fn {
                let inner = node.inner.borrow();
                if let Some(f) = &inner.grad_fn {
                    f(&out_grad, &out_data);
                }
            }
        }
        Ok(())
    }
}
