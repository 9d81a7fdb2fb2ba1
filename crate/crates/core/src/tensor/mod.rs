//! Dense multi-dimensional arrays with reverse-mode automatic differentiation.
//!
//! Tensors are immutable values: every operation returns a fresh tensor and,
//! when any input is tracked, records itself on an implicit computation graph
//! (a DAG of [`Node`]s connected through parent references). Calling
//! [`Tensor::backward`] on a scalar walks that graph once in reverse
//! topological order and returns the adjoints of all tracked leaves.
//!
//! Values are stored as `f64` and laid out row-major. Persisted artifacts
//! (checkpoints, embedding files) quantize to `f32` at the serialization
//! boundary; see the `encoder` and `trainer` modules.

mod gradcheck;
mod ops;

pub use gradcheck::{grad_check, grad_check_sampled, GradCheckReport};
pub(crate) use ops::gemm;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use thiserror::Error;

/// Errors raised by tensor construction and operations.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: index {index} out of bounds for dimension of size {size}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("expected a scalar tensor, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("gradient check: {0}")]
    GradCheck(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

static NEXT_NODE_ID: AtomicU64 = AtomicU64::new(1);

/// Backward rule: given the node and the adjoint of its output, produce the
/// adjoint contribution for each parent (same order and shapes as `parents`).
pub(crate) type GradFn = Box<dyn Fn(&Node, &[f64]) -> Vec<Vec<f64>> + Send + Sync>;

/// One recorded operation (or leaf) in the computation graph.
pub struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    parents: Vec<Tensor>,
    grad_fn: Option<GradFn>,
    requires_grad: bool,
}

impl Node {
    pub(crate) fn parent_data(&self, i: usize) -> &[f64] {
        self.parents[i].data()
    }

    pub(crate) fn parent_shape(&self, i: usize) -> &[usize] {
        self.parents[i].shape()
    }

    pub(crate) fn data(&self) -> &[f64] {
        &self.data
    }
}

/// An immutable, shareable dense array, optionally tracked on the autodiff
/// graph. Cloning is cheap (reference counted).
#[derive(Clone)]
pub struct Tensor(Arc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Build a tensor from a shape and row-major data.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if numel_of(shape) != data.len() {
            return Err(TensorError::InvalidShape {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Tensor::leaf(shape.to_vec(), Arc::new(data), false))
    }

    /// Build a tensor from f32 data (exact widening).
    pub fn from_f32(shape: &[usize], data: &[f32]) -> Result<Tensor> {
        Tensor::from_vec(shape, data.iter().map(|&v| v as f64).collect())
    }

    pub fn scalar_value(v: f64) -> Tensor {
        Tensor::leaf(vec![], Arc::new(vec![v]), false)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::leaf(shape.to_vec(), Arc::new(vec![0.0; numel_of(shape)]), false)
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        Tensor::leaf(shape.to_vec(), Arc::new(vec![v; numel_of(shape)]), false)
    }

    pub(crate) fn leaf(shape: Vec<usize>, data: Arc<Vec<f64>>, requires_grad: bool) -> Tensor {
        Tensor(Arc::new(Node {
            id: NEXT_NODE_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            parents: Vec::new(),
            grad_fn: None,
            requires_grad,
        }))
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        grad_fn: GradFn,
    ) -> Tensor {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        Tensor(Arc::new(Node {
            id: NEXT_NODE_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: Arc::new(data),
            parents: if requires_grad { parents } else { Vec::new() },
            grad_fn: if requires_grad { Some(grad_fn) } else { None },
            requires_grad,
        }))
    }

    /// Like [`Tensor::from_op`] but shares an existing allocation (reshape).
    pub(crate) fn from_op_shared(
        shape: Vec<usize>,
        data: Arc<Vec<f64>>,
        parents: Vec<Tensor>,
        grad_fn: GradFn,
    ) -> Tensor {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        Tensor(Arc::new(Node {
            id: NEXT_NODE_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            parents: if requires_grad { parents } else { Vec::new() },
            grad_fn: if requires_grad { Some(grad_fn) } else { None },
            requires_grad,
        }))
    }

    /// A new tracked leaf sharing this tensor's data. Gradients accumulate on
    /// the returned tensor, not on `self`.
    pub fn tracked(&self) -> Tensor {
        Tensor::leaf(self.0.shape.clone(), self.0.data.clone(), true)
    }

    /// A new untracked leaf sharing this tensor's data: cuts the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::leaf(self.0.shape.clone(), self.0.data.clone(), false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn data_arc(&self) -> Arc<Vec<f64>> {
        self.0.data.clone()
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.0.data.iter().map(|&v| v as f32).collect()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub(crate) fn id(&self) -> u64 {
        self.0.id
    }

    /// Extract the value of a scalar (single-element) tensor.
    pub fn scalar(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: self.shape().to_vec(),
            });
        }
        Ok(self.0.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    /// Reverse-mode differentiation from a scalar output. Every reachable
    /// graph node is visited exactly once; the result maps tracked leaves
    /// (and intermediates) to their adjoints.
    pub fn backward(&self) -> Result<Gradients> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: self.shape().to_vec(),
            });
        }
        let order = self.topo_order();
        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.0.id, vec![1.0]);
        for node in order.iter().rev() {
            let Some(out_grad) = grads.remove(&node.0.id) else {
                continue;
            };
            if let Some(grad_fn) = &node.0.grad_fn {
                let parent_grads = grad_fn(&node.0, &out_grad);
                debug_assert_eq!(parent_grads.len(), node.0.parents.len());
                for (parent, pgrad) in node.0.parents.iter().zip(parent_grads) {
                    if !parent.requires_grad() {
                        continue;
                    }
                    match grads.entry(parent.0.id) {
                        std::collections::hash_map::Entry::Occupied(mut e) => {
                            for (acc, g) in e.get_mut().iter_mut().zip(&pgrad) {
                                *acc += g;
                            }
                        }
                        std::collections::hash_map::Entry::Vacant(e) => {
                            e.insert(pgrad);
                        }
                    }
                }
            } else if node.0.requires_grad {
                // Tracked leaf: keep its adjoint for the caller.
                grads.insert(node.0.id, out_grad);
            }
        }
        Ok(Gradients { map: grads })
    }

    /// Topological order (parents before children) over the tracked subgraph.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        // Iterative post-order DFS; (tensor, next-parent index) stack.
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.0.id);
        while let Some((node, pi)) = stack.pop() {
            if pi < node.0.parents.len() {
                let parent = node.0.parents[pi].clone();
                stack.push((node, pi + 1));
                if parent.requires_grad() && visited.insert(parent.0.id) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }
}

/// Adjoints produced by [`Tensor::backward`], keyed by graph node identity.
#[derive(Debug)]
pub struct Gradients {
    map: HashMap<u64, Vec<f64>>,
}

impl Gradients {
    /// The adjoint of `t`, if `t` was a tracked leaf reachable from the
    /// output. A tracked leaf that did not influence the output has no entry.
    pub fn wrt(&self, t: &Tensor) -> Option<&[f64]> {
        self.map.get(&t.id()).map(|v| v.as_slice())
    }

    /// Adjoint of `t`, or zeros when `t` did not influence the output.
    pub fn wrt_or_zero(&self, t: &Tensor) -> Vec<f64> {
        self.wrt(t)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; t.numel()])
    }
}
