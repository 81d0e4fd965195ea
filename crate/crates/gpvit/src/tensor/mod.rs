//! Minimal dense tensor with reverse-mode automatic differentiation.
//!
//! Tensors are immutable nodes in an implicit computation graph. Each forward
//! operation records its parents and a backward rule; [`Tensor::backward`]
//! replays the rules in reverse topological order. Nodes whose inputs do not
//! require gradients are recorded as detached constants, so inference passes
//! build no graph at all.

mod conv;
mod linalg;

pub use conv::*;

use std::cell::Cell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::scalar::{s, Scalar};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Backward rule: given the gradient flowing into this node, accumulate
/// gradients into the parents via the store.
pub(crate) type BackFn<E> = Box<dyn Fn(&[E], &[Tensor<E>], &mut GradStore<E>)>;

pub(crate) struct Node<E: Scalar> {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<E>,
    pub(crate) parents: Vec<Tensor<E>>,
    pub(crate) backward: Option<BackFn<E>>,
    pub(crate) requires_grad: bool,
}

/// Dense n-dimensional tensor in row-major order.
#[derive(Clone)]
pub struct Tensor<E: Scalar> {
    pub(crate) node: Rc<Node<E>>,
}

/// Accumulated gradients keyed by graph-node identity.
pub struct GradStore<E: Scalar> {
    grads: HashMap<u64, Vec<E>>,
}

impl<E: Scalar> Default for GradStore<E> {
    fn default() -> Self {
        GradStore { grads: HashMap::new() }
    }
}

impl<E: Scalar> GradStore<E> {
    fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, t: &Tensor<E>) -> Option<&[E]> {
        self.grads.get(&t.node.id).map(|v| v.as_slice())
    }

    /// Gradient of `t`, an all-zero vector if `t` never received one
    /// (disconnected leaf).
    pub fn get_or_zeros(&self, t: &Tensor<E>) -> Vec<E> {
        match self.grads.get(&t.node.id) {
            Some(v) => v.clone(),
            None => vec![E::zero(); t.numel()],
        }
    }

    pub(crate) fn accumulate(&mut self, t: &Tensor<E>, delta: &[E]) {
        debug_assert_eq!(delta.len(), t.numel());
        let slot = self
            .grads
            .entry(t.node.id)
            .or_insert_with(|| vec![E::zero(); t.numel()]);
        for (g, d) in slot.iter_mut().zip(delta) {
            *g += *d;
        }
    }

    pub(crate) fn slot_mut(&mut self, t: &Tensor<E>) -> &mut [E] {
        self.grads
            .entry(t.node.id)
            .or_insert_with(|| vec![E::zero(); t.numel()])
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<E: Scalar> Tensor<E> {
    fn from_node(node: Node<E>) -> Self {
        debug_assert_eq!(node.data.len(), numel_of(&node.shape), "shape/data mismatch");
        debug_assert!(
            node.data.iter().all(|x| x.is_finite()),
            "non-finite value produced in tensor op"
        );
        Tensor { node: Rc::new(node) }
    }

    /// Leaf tensor. Has no parents in the graph.
    pub fn leaf(data: Vec<E>, shape: Vec<usize>, requires_grad: bool) -> Self {
        assert_eq!(
            data.len(),
            numel_of(&shape),
            "leaf data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor::from_node(Node {
            id: fresh_id(),
            shape,
            data,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        })
    }

    /// Non-differentiable constant.
    pub fn constant(data: Vec<E>, shape: Vec<usize>) -> Self {
        Tensor::leaf(data, shape, false)
    }

    pub fn from_f64(data: &[f64], shape: Vec<usize>) -> Self {
        Tensor::constant(data.iter().map(|&x| s(x)).collect(), shape)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel_of(&shape);
        Tensor::constant(vec![E::zero(); n], shape)
    }

    pub fn scalar(x: E) -> Self {
        Tensor::constant(vec![x], vec![1])
    }

    pub(crate) fn op(
        shape: Vec<usize>,
        data: Vec<E>,
        parents: Vec<Tensor<E>>,
        backward: BackFn<E>,
    ) -> Self {
        let requires = parents.iter().any(|p| p.node.requires_grad);
        if requires {
            Tensor::from_node(Node {
                id: fresh_id(),
                shape,
                data,
                parents,
                backward: Some(backward),
                requires_grad: true,
            })
        } else {
            // Detached: keep neither parents nor the rule.
            Tensor::from_node(Node {
                id: fresh_id(),
                shape,
                data,
                parents: Vec::new(),
                backward: None,
                requires_grad: false,
            })
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.node.data
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> E {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.node.data[0]
    }

    pub fn rows(&self) -> usize {
        assert_eq!(self.shape().len(), 2, "expected rank-2 tensor, got {:?}", self.shape());
        self.shape()[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape().len(), 2, "expected rank-2 tensor, got {:?}", self.shape());
        self.shape()[1]
    }

    /// View the same data under a different shape. Differentiable (gradient is
    /// reshaped back).
    pub fn reshape(&self, shape: Vec<usize>) -> Tensor<E> {
        assert_eq!(
            self.numel(),
            numel_of(&shape),
            "reshape {:?} -> {:?} changes element count",
            self.shape(),
            shape
        );
        Tensor::op(
            shape,
            self.node.data.clone(),
            vec![self.clone()],
            Box::new(|g, parents, store| store.accumulate(&parents[0], g)),
        )
    }

    /// Reverse-mode sweep from a scalar root. Returns gradients for every
    /// reachable node that requires them; unreachable leaves simply have no
    /// entry (see [`GradStore::get_or_zeros`]).
    pub fn backward(&self) -> GradStore<E> {
        assert_eq!(
            self.numel(),
            1,
            "backward() requires a scalar root, got shape {:?}",
            self.shape()
        );
        let order = topo_order(self);
        let mut store = GradStore::new();
        store.accumulate(self, &[E::one()]);
        for t in order.iter().rev() {
            if let Some(rule) = &t.node.backward {
                let grad = match store.grads.get(&t.node.id) {
                    Some(g) => g.clone(),
                    None => continue,
                };
                rule(&grad, &t.node.parents, &mut store);
            }
        }
        store
    }

    // ---- elementwise ----

    pub fn add(&self, other: &Tensor<E>) -> Tensor<E> {
        assert_eq!(
            self.shape(),
            other.shape(),
            "add: shape mismatch {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
        let data = zip_map(self.data(), other.data(), |a, b| a + b);
        Tensor::op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g, parents, store| {
                store.accumulate(&parents[0], g);
                store.accumulate(&parents[1], g);
            }),
        )
    }

    pub fn sub(&self, other: &Tensor<E>) -> Tensor<E> {
        assert_eq!(
            self.shape(),
            other.shape(),
            "sub: shape mismatch {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
        let data = zip_map(self.data(), other.data(), |a, b| a - b);
        Tensor::op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g, parents, store| {
                store.accumulate(&parents[0], g);
                let neg: Vec<E> = g.iter().map(|&x| -x).collect();
                store.accumulate(&parents[1], &neg);
            }),
        )
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor<E>) -> Tensor<E> {
        assert_eq!(
            self.shape(),
            other.shape(),
            "mul: shape mismatch {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
        let data = zip_map(self.data(), other.data(), |a, b| a * b);
        Tensor::op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g, parents, store| {
                let da = zip_map(g, parents[1].data(), |gi, b| gi * b);
                let db = zip_map(g, parents[0].data(), |gi, a| gi * a);
                store.accumulate(&parents[0], &da);
                store.accumulate(&parents[1], &db);
            }),
        )
    }

    pub fn scale(&self, c: f64) -> Tensor<E> {
        let ce: E = s(c);
        let data = self.data().iter().map(|&x| x * ce).collect();
        Tensor::op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, parents, store| {
                let dg: Vec<E> = g.iter().map(|&x| x * ce).collect();
                store.accumulate(&parents[0], &dg);
            }),
        )
    }

    /// Broadcast-add a `[C]` bias over the columns of an `[N, C]` tensor.
    pub fn add_bias(&self, bias: &Tensor<E>) -> Tensor<E> {
        let cols = self.cols();
        assert_eq!(
            bias.numel(),
            cols,
            "add_bias: bias length {} vs {} columns",
            bias.numel(),
            cols
        );
        let b = bias.data();
        let data: Vec<E> = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + b[i % cols])
            .collect();
        Tensor::op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), bias.clone()],
            Box::new(move |g, parents, store| {
                store.accumulate(&parents[0], g);
                let mut db = vec![E::zero(); cols];
                for (i, &gi) in g.iter().enumerate() {
                    db[i % cols] += gi;
                }
                store.accumulate(&parents[1], &db);
            }),
        )
    }

    /// GELU with the tanh approximation:
    /// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&self) -> Tensor<E> {
        let data = self.data().iter().map(|&x| gelu_val(x)).collect();
        Tensor::op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|g, parents, store| {
                let dx = zip_map(g, parents[0].data(), |gi, x| gi * gelu_grad(x));
                store.accumulate(&parents[0], &dx);
            }),
        )
    }

    pub fn sum_all(&self) -> Tensor<E> {
        let total = self.data().iter().fold(E::zero(), |a, &b| a + b);
        let n = self.numel();
        Tensor::op(
            vec![1],
            vec![total],
            vec![self.clone()],
            Box::new(move |g, parents, store| {
                let dg = vec![g[0]; n];
                store.accumulate(&parents[0], &dg);
            }),
        )
    }

    /// Mean over rows of an `[N, C]` tensor, producing `[1, C]`.
    pub fn mean_rows(&self) -> Tensor<E> {
        let (n, c) = (self.rows(), self.cols());
        let inv: E = s(1.0 / n as f64);
        let mut out = vec![E::zero(); c];
        for r in 0..n {
            for j in 0..c {
                out[j] += self.data()[r * c + j];
            }
        }
        for v in out.iter_mut() {
            *v *= inv;
        }
        Tensor::op(
            vec![1, c],
            out,
            vec![self.clone()],
            Box::new(move |g, parents, store| {
                let mut dx = vec![E::zero(); n * c];
                for r in 0..n {
                    for j in 0..c {
                        dx[r * c + j] = g[j] * inv;
                    }
                }
                store.accumulate(&parents[0], &dx);
            }),
        )
    }
}

fn zip_map<E: Scalar>(a: &[E], b: &[E], f: impl Fn(E, E) -> E) -> Vec<E> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_val<E: Scalar>(x: E) -> E {
    let c: E = s(GELU_C);
    let a: E = s(GELU_A);
    let half: E = s(0.5);
    let inner = c * (x + a * x * x * x);
    half * x * (E::one() + inner.tanh())
}

fn gelu_grad<E: Scalar>(x: E) -> E {
    let c: E = s(GELU_C);
    let a: E = s(GELU_A);
    let half: E = s(0.5);
    let three: E = s(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let sech2 = E::one() - t * t;
    half * (E::one() + t) + half * x * sech2 * c * (E::one() + three * a * x * x)
}

/// Topological order over the reachable subgraph (parents before children).
fn topo_order<E: Scalar>(root: &Tensor<E>) -> Vec<Tensor<E>> {
    let mut order = Vec::new();
    let mut visited = std::collections::HashSet::new();
    // Iterative DFS; graphs from deep models overflow the call stack otherwise.
    let mut stack: Vec<(Tensor<E>, usize)> = vec![(root.clone(), 0)];
    visited.insert(root.node.id);
    while let Some((t, child_idx)) = stack.pop() {
        if child_idx < t.node.parents.len() {
            let parent = t.node.parents[child_idx].clone();
            stack.push((t, child_idx + 1));
            if visited.insert(parent.node.id) {
                stack.push((parent, 0));
            }
        } else {
            order.push(t);
        }
    }
    order
}
