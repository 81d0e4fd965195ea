//! Parameters, parameter binding, and the small reusable layers.
//!
//! Parameters live outside the autodiff graph in `RefCell` storage so the
//! optimizer can update them in place. Each forward pass creates leaf tensors
//! from the current values through a [`Pass`], which remembers the binding so
//! gradients can be read back per parameter after `backward()`.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::rng::Prng;
use crate::scalar::{s, Scalar};
use crate::tensor::{depthwise_conv2d, Tensor};
use crate::GradStore;

pub const LN_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    TruncNormal,
    /// Depth-wise kernel: 1.0 at the center tap plus truncated-normal noise,
    /// so an untrained conv approximates a pass-through.
    CenterTap,
}

#[derive(Clone)]
pub struct Param<E: Scalar> {
    name: String,
    shape: Vec<usize>,
    data: Rc<RefCell<Vec<E>>>,
}

impl<E: Scalar> Param<E> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn values(&self) -> Vec<E> {
        self.data.borrow().clone()
    }

    pub fn set_values(&self, v: &[E]) {
        let mut d = self.data.borrow_mut();
        assert_eq!(v.len(), d.len(), "set_values: length mismatch for {}", self.name);
        d.copy_from_slice(v);
    }

    pub fn fill(&self, v: E) {
        for x in self.data.borrow_mut().iter_mut() {
            *x = v;
        }
    }

    /// In-place update through a closure (used by optimizers and finite
    /// differences).
    pub fn update(&self, f: impl FnMut(&mut E)) {
        self.data.borrow_mut().iter_mut().for_each(f);
    }

    pub fn nudge(&self, idx: usize, delta: E) {
        self.data.borrow_mut()[idx] += delta;
    }

    fn key(&self) -> usize {
        Rc::as_ptr(&self.data) as usize
    }
}

/// All parameters of a model in declaration order.
pub struct ParamSet<E: Scalar> {
    params: Vec<Param<E>>,
    rng: Prng,
}

impl<E: Scalar> ParamSet<E> {
    pub fn new(seed: u64) -> Self {
        ParamSet { params: Vec::new(), rng: Prng::seed_from(seed) }
    }

    pub fn register(&mut self, name: &str, shape: Vec<usize>, init: Init) -> Param<E> {
        let n: usize = shape.iter().product();
        let data: Vec<E> = match init {
            Init::Zeros => vec![E::zero(); n],
            Init::Ones => vec![E::one(); n],
            Init::TruncNormal => (0..n).map(|_| s(self.rng.trunc_normal(INIT_STD))).collect(),
            Init::CenterTap => {
                assert_eq!(shape.len(), 3, "CenterTap init expects a [k, k, C] kernel");
                let (k, c) = (shape[0], shape[2]);
                let mut v: Vec<E> =
                    (0..n).map(|_| s(self.rng.trunc_normal(INIT_STD))).collect();
                let center = (k / 2) * k + k / 2;
                for j in 0..c {
                    v[center * c + j] += E::one();
                }
                v
            }
        };
        let p = Param { name: name.to_string(), shape, data: Rc::new(RefCell::new(data)) };
        self.params.push(p.clone());
        p
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<E>> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_numel(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn find(&self, name: &str) -> Option<&Param<E>> {
        self.params.iter().find(|p| p.name == name)
    }
}

/// One forward pass: binds parameters to graph leaves exactly once each.
pub struct Pass<E: Scalar> {
    grad: bool,
    bindings: RefCell<HashMap<usize, Tensor<E>>>,
}

impl<E: Scalar> Pass<E> {
    pub fn new(grad: bool) -> Self {
        Pass { grad, bindings: RefCell::new(HashMap::new()) }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad
    }

    pub fn bind(&self, p: &Param<E>) -> Tensor<E> {
        let mut map = self.bindings.borrow_mut();
        map.entry(p.key())
            .or_insert_with(|| Tensor::leaf(p.data.borrow().clone(), p.shape.clone(), self.grad))
            .clone()
    }

    /// Gradient of `p` from this pass, zeros if the parameter never
    /// contributed to the loss.
    pub fn grad_of(&self, p: &Param<E>, store: &GradStore<E>) -> Vec<E> {
        match self.bindings.borrow().get(&p.key()) {
            Some(t) => store.get_or_zeros(t),
            None => vec![E::zero(); p.numel()],
        }
    }
}

// ---- layers ----

pub struct Linear<E: Scalar> {
    pub w: Param<E>, // [in, out]
    pub b: Param<E>, // [out]
}

impl<E: Scalar> Linear<E> {
    pub fn new(set: &mut ParamSet<E>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: set.register(&format!("{name}.w"), vec![fan_in, fan_out], Init::TruncNormal),
            b: set.register(&format!("{name}.b"), vec![fan_out], Init::Zeros),
        }
    }

    pub fn forward(&self, pass: &Pass<E>, x: &Tensor<E>) -> Tensor<E> {
        x.matmul(&pass.bind(&self.w)).add_bias(&pass.bind(&self.b))
    }
}

pub struct LayerNorm<E: Scalar> {
    pub gain: Param<E>,
    pub bias: Param<E>,
}

impl<E: Scalar> LayerNorm<E> {
    pub fn new(set: &mut ParamSet<E>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: set.register(&format!("{name}.gain"), vec![dim], Init::Ones),
            bias: set.register(&format!("{name}.bias"), vec![dim], Init::Zeros),
        }
    }

    pub fn forward(&self, pass: &Pass<E>, x: &Tensor<E>) -> Tensor<E> {
        x.layer_norm(&pass.bind(&self.gain), &pass.bind(&self.bias), LN_EPS)
    }
}

/// Pre-norm feed-forward block: `W2 gelu(W1 LN(x))`. The caller adds the
/// residual.
pub struct Ffn<E: Scalar> {
    pub ln: LayerNorm<E>,
    pub lin1: Linear<E>,
    pub lin2: Linear<E>,
}

impl<E: Scalar> Ffn<E> {
    pub fn new(set: &mut ParamSet<E>, name: &str, dim: usize, hidden: usize) -> Self {
        Ffn {
            ln: LayerNorm::new(set, &format!("{name}.ln"), dim),
            lin1: Linear::new(set, &format!("{name}.fc1"), dim, hidden),
            lin2: Linear::new(set, &format!("{name}.fc2"), hidden, dim),
        }
    }

    pub fn forward(&self, pass: &Pass<E>, x: &Tensor<E>) -> Tensor<E> {
        let h = self.lin1.forward(pass, &self.ln.forward(pass, x)).gelu();
        self.lin2.forward(pass, &h)
    }
}

pub struct DwConv<E: Scalar> {
    pub kernel: Param<E>, // [k, k, C]
    pub bias: Param<E>,   // [C]
}

impl<E: Scalar> DwConv<E> {
    pub fn new(set: &mut ParamSet<E>, name: &str, k: usize, dim: usize) -> Self {
        DwConv {
            kernel: set.register(&format!("{name}.kernel"), vec![k, k, dim], Init::CenterTap),
            bias: set.register(&format!("{name}.bias"), vec![dim], Init::Zeros),
        }
    }

    pub fn forward(&self, pass: &Pass<E>, x: &Tensor<E>, grid: (usize, usize)) -> Tensor<E> {
        depthwise_conv2d(x, grid, &pass.bind(&self.kernel), &pass.bind(&self.bias))
    }

    /// Force an exact identity (center tap one, zero noise and bias); used by
    /// the permutation-equivariance invariant.
    pub fn force_identity(&self) {
        let shape = self.kernel.shape().to_vec();
        let (k, c) = (shape[0], shape[2]);
        let mut v = vec![E::zero(); k * k * c];
        let center = (k / 2) * k + k / 2;
        for j in 0..c {
            v[center * c + j] = E::one();
        }
        self.kernel.set_values(&v);
        self.bias.fill(E::zero());
    }
}
