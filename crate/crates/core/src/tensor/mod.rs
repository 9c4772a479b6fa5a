//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! A [`Graph`] is an append-only tape. Operations are methods on the graph;
//! an operation records a backward closure only when at least one of its
//! inputs is tracked, so inference on untracked tensors runs without any
//! tape overhead. [`Graph::backward`] consumes the tape and walks it once in
//! reverse insertion order.

mod adam;
mod conv;
pub mod gradcheck;
mod multiview;
mod ops;
mod sample;

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::iter::Sum;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use num_traits::{Float, FromPrimitive, NumAssign};

use crate::error::{Error, Result};

pub use adam::{adam_step, AdamState};
pub use conv::ConvGeometry;

/// Element type of a tensor. Implemented for `f32` (training) and `f64`
/// (gradient checks).
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Sum + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    /// `c = op(a) · op(b) + beta · c` for row-major `m×k` and `k×n` operands.
    /// `ta`/`tb` mean the operand is stored transposed.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        ta: bool,
        b: &[Self],
        tb: bool,
        beta: Self,
        c: &mut [Self],
    );

    fn lit(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("representable literal")
    }

    fn to_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

fn gemm_strides(m: usize, k: usize, n: usize, ta: bool, tb: bool) -> (isize, isize, isize, isize) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    (rsa, csa, rsb, csb)
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                ta: bool,
                b: &[Self],
                tb: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa, rsb, csb) = gemm_strides(m, k, n, ta, tb);
                // SAFETY: bounds asserted above; strides describe dense
                // row-major (or transposed) layouts inside those bounds.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
struct NodeRef {
    graph: u64,
    index: usize,
}

/// Dense tensor handle. Cloning is cheap; the buffer is shared.
#[derive(Clone)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    node: Option<NodeRef>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("tensor", "numel", n, data.len()));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("zero-sized dimension in {shape:?}")));
        }
        Ok(Self::from_parts(shape.to_vec(), data))
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: Arc::new(data),
            node: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(Vec::new(), vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.as_ref().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    /// Same buffer, no graph membership.
    pub fn detach(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| U::lit(v.to_f64())).collect(),
        )
    }

    pub(crate) fn arc(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.data)
    }

    pub(crate) fn expect_rank(&self, op: &'static str, rank: usize) -> Result<()> {
        if self.shape.len() != rank {
            return Err(Error::shape(
                op,
                "rank",
                rank,
                format!("{} (shape {:?})", self.shape.len(), self.shape),
            ));
        }
        Ok(())
    }
}

/// Backward closure: receives the output gradient and returns one optional
/// gradient per recorded input, in input order.
type BackwardFn<T> = Box<dyn FnOnce(&[T]) -> Vec<Option<Vec<T>>>>;

struct Node<T: Scalar> {
    len: usize,
    inputs: Vec<Option<usize>>,
    backward: Option<BackwardFn<T>>,
}

/// Append-only operation tape. Topological order equals insertion order.
pub struct Graph<T: Scalar = f32> {
    id: u64,
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers `t` as a gradient-receiving leaf.
    pub fn leaf(&self, t: &Tensor<T>) -> Tensor<T> {
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len();
        nodes.push(Node {
            len: t.numel(),
            inputs: Vec::new(),
            backward: None,
        });
        Tensor {
            shape: t.shape.clone(),
            data: Arc::clone(&t.data),
            node: Some(NodeRef {
                graph: self.id,
                index,
            }),
        }
    }

    fn input_index(&self, t: &Tensor<T>) -> Option<usize> {
        t.node.map(|n| {
            assert_eq!(n.graph, self.id, "tensor belongs to a different graph");
            n.index
        })
    }

    /// Records a custom operation. `backward` receives the gradient of the
    /// output and must return one entry per element of `inputs`; entries for
    /// untracked inputs are ignored and may be `None`.
    pub fn record<F>(
        &self,
        shape: Vec<usize>,
        data: Vec<T>,
        inputs: &[&Tensor<T>],
        backward: F,
    ) -> Tensor<T>
    where
        F: FnOnce(&[T]) -> Vec<Option<Vec<T>>> + 'static,
    {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value produced by an operation"
        );
        let idx: Vec<Option<usize>> = inputs.iter().map(|t| self.input_index(t)).collect();
        if idx.iter().all(Option::is_none) {
            return Tensor::from_parts(shape, data);
        }
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len();
        nodes.push(Node {
            len: data.len(),
            inputs: idx,
            backward: Some(Box::new(backward)),
        });
        Tensor {
            shape,
            data: Arc::new(data),
            node: Some(NodeRef {
                graph: self.id,
                index,
            }),
        }
    }

    /// Reverse pass from a scalar loss. Every leaf receives a gradient;
    /// leaves the loss does not depend on get zeros.
    pub fn backward(self, loss: &Tensor<T>) -> Result<Gradients<T>> {
        if loss.numel() != 1 {
            return Err(Error::shape("backward", "loss numel", 1, loss.numel()));
        }
        let mut nodes = self.nodes.into_inner();
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        let lens: Vec<usize> = nodes.iter().map(|n| n.len).collect();
        let mut out = HashMap::new();
        if let Some(n) = loss.node {
            assert_eq!(n.graph, self.id, "loss belongs to a different graph");
            grads[n.index] = Some(vec![T::one()]);
        }
        for i in (0..nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &mut nodes[i];
            match node.backward.take() {
                None => {
                    out.insert(i, g);
                }
                Some(f) => {
                    let input_grads = f(&g);
                    debug_assert_eq!(input_grads.len(), node.inputs.len());
                    for (slot, ig) in node.inputs.iter().zip(input_grads) {
                        let (Some(j), Some(ig)) = (slot, ig) else { continue };
                        debug_assert_eq!(ig.len(), lens[*j]);
                        match &mut grads[*j] {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += *b),
                            empty => *empty = Some(ig),
                        }
                    }
                }
            }
        }
        for (i, node) in nodes.iter().enumerate() {
            if node.inputs.is_empty() && node.backward.is_none() {
                out.entry(i).or_insert_with(|| vec![T::zero(); node.len]);
            }
        }
        Ok(Gradients {
            graph: self.id,
            grads: out,
        })
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T: Scalar = f32> {
    graph: u64,
    grads: HashMap<usize, Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, leaf: &Tensor<T>) -> Option<&[T]> {
        let n = leaf.node?;
        if n.graph != self.graph {
            return None;
        }
        self.grads.get(&n.index).map(Vec::as_slice)
    }
}
