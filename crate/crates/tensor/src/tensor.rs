use std::cell::Cell;
use std::fmt;
use std::rc::Rc;

use crate::backward::Op;
use crate::error::{Result, TensorError};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Restores the previous grad mode on drop, including during unwinding.
struct GradModeGuard(bool);

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.0));
    }
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

pub(crate) fn with_grad_mode<R>(enabled: bool, f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(enabled));
    let _guard = GradModeGuard(prev);
    f()
}

/// Runs `f` without recording any operation on the differentiation graph.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    with_grad_mode(false, f)
}

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) inputs: Vec<Tensor>,
}

pub(crate) struct Inner {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Rc<Vec<f64>>,
    pub(crate) requires_grad: bool,
    pub(crate) node: Option<Node>,
}

/// Row-major `f64` tensor. Cloning is cheap and shares the underlying node.
///
/// A tensor that requires grad keeps its producing operation and inputs
/// alive, so the graph is the set of tensors reachable from a root.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Rc<Inner>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Self::raw(data, shape.to_vec()))
    }

    pub(crate) fn raw(data: Vec<f64>, shape: Vec<usize>) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data: Rc::new(data),
                requires_grad: false,
                node: None,
            }),
        }
    }

    pub(crate) fn shared(data: Rc<Vec<f64>>, shape: Vec<usize>, op: Op, inputs: &[&Tensor]) -> Tensor {
        let requires_grad = is_grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        let node = requires_grad.then(|| Node {
            op,
            inputs: inputs.iter().map(|t| (*t).clone()).collect(),
        });
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data,
                requires_grad,
                node,
            }),
        }
    }

    pub(crate) fn from_op(data: Vec<f64>, shape: Vec<usize>, op: Op, inputs: &[&Tensor]) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        Self::shared(Rc::new(data), shape, op, inputs)
    }

    pub fn scalar(value: f64) -> Tensor {
        Self::raw(vec![value], Vec::new())
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::raw(vec![0.0; numel(shape)], shape.to_vec())
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Self::raw(vec![value; numel(shape)], shape.to_vec())
    }

    pub fn eye(n: usize) -> Tensor {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::raw(data, vec![n, n])
    }

    /// Leaf copy of this tensor that participates in differentiation.
    pub fn with_grad(&self) -> Tensor {
        Tensor {
            inner: Rc::new(Inner {
                shape: self.inner.shape.clone(),
                data: Rc::clone(&self.inner.data),
                requires_grad: true,
                node: None,
            }),
        }
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor {
            inner: Rc::new(Inner {
                shape: self.inner.shape.clone(),
                data: Rc::clone(&self.inner.data),
                requires_grad: false,
                node: None,
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.inner.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// True when the tensor was produced by a recorded operation.
    pub fn is_attached(&self) -> bool {
        self.inner.node.is_some()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(TensorError::InvalidShape {
                op: "item",
                msg: format!("expected one element, shape is {:?}", self.shape()),
            });
        }
        Ok(self.inner.data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.inner.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ptr(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.inner.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .field("data", &preview)
            .finish()
    }
}
