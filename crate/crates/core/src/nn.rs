//! Small fully connected networks with exact backpropagation and Adam,
//! generic over the floating-point type.

use std::fmt::Debug;
use std::ops::AddAssign;

use ndarray::{Array1, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Floating-point element type of a network.
pub trait Scalar:
    Float + FromPrimitive + LinalgScalar + ScalarOperand + AddAssign + Debug + Send + Sync + 'static
{
}

impl<T> Scalar for T where
    T: Float + FromPrimitive + LinalgScalar + ScalarOperand + AddAssign + Debug + Send + Sync + 'static
{
}

pub(crate) fn cast<T: Scalar>(v: f64) -> T {
    T::from_f64(v).expect("representable constant")
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NnError {
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: Vec<(usize, usize)>,
        found: Vec<(usize, usize)>,
    },
    #[error("parameter vector has {found} values, network needs {expected}")]
    ParamCount { expected: usize, found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output.
    fn grad_from_output<T: Scalar>(self, y: T) -> T {
        match self {
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - y * y,
            Activation::Identity => T::one(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    /// `inputs x outputs`
    pub w: Array2<T>,
    pub b: Array1<T>,
    pub act: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Layer<T>>,
}

/// Layer outputs of one forward pass; `outputs[0]` is the input batch.
pub struct Trace<T> {
    pub outputs: Vec<Array2<T>>,
}

impl<T: Scalar> Trace<T> {
    pub fn output(&self) -> &Array2<T> {
        self.outputs.last().expect("trace holds the input")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    pub dw: Vec<Array2<T>>,
    pub db: Vec<Array1<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn zeros_like(net: &Mlp<T>) -> Self {
        Self {
            dw: net.layers.iter().map(|l| Array2::zeros(l.w.raw_dim())).collect(),
            db: net.layers.iter().map(|l| Array1::zeros(l.b.raw_dim())).collect(),
        }
    }
}

impl<T: Scalar> Mlp<T> {
    /// He-uniform weights, zero biases. `sizes` lists every layer width
    /// including input and output.
    pub fn new<R: Rng>(sizes: &[usize], hidden: Activation, output: Activation, rng: &mut R) -> Self {
        let mut net = Self::zeros(sizes, hidden, output);
        for l in &mut net.layers {
            let fan_in = l.w.nrows() as f64;
            let limit = (6.0 / fan_in).sqrt();
            l.w.mapv_inplace(|_| cast(rng.gen_range(-limit..limit)));
        }
        net
    }

    /// Redraws the output layer weights from `U(-limit, limit)`, so a fresh
    /// network starts with near-zero outputs.
    pub fn with_output_limit<R: Rng>(mut self, limit: f64, rng: &mut R) -> Self {
        if let Some(l) = self.layers.last_mut() {
            l.w.mapv_inplace(|_| cast(rng.gen_range(-limit..limit)));
        }
        self
    }

    pub fn zeros(sizes: &[usize], hidden: Activation, output: Activation) -> Self {
        assert!(sizes.len() >= 2, "a network needs input and output widths");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| Layer {
                w: Array2::zeros((sizes[i], sizes[i + 1])),
                b: Array1::zeros(sizes[i + 1]),
                act: if i + 1 == n { output } else { hidden },
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").w.ncols()
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| l.w.dim()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        let mut h = x.to_owned();
        for l in &self.layers {
            h = Self::layer_forward(l, h.view());
        }
        h
    }

    fn layer_forward(l: &Layer<T>, x: ArrayView2<T>) -> Array2<T> {
        let mut z = x.dot(&l.w);
        z += &l.b;
        let act = l.act;
        z.mapv_inplace(|v| act.apply(v));
        z
    }

    pub fn forward_trace(&self, x: ArrayView2<T>) -> Trace<T> {
        let mut outputs = Vec::with_capacity(self.layers.len() + 1);
        outputs.push(x.to_owned());
        for l in &self.layers {
            let y = Self::layer_forward(l, outputs.last().expect("non-empty").view());
            outputs.push(y);
        }
        Trace { outputs }
    }

    /// Gradients of a scalar loss given `dL/d(output)`; also returns
    /// `dL/d(input)`.
    pub fn backward(&self, trace: &Trace<T>, grad_out: ArrayView2<T>) -> (Grads<T>, Array2<T>) {
        let n = self.layers.len();
        let mut dw = Vec::with_capacity(n);
        let mut db = Vec::with_capacity(n);
        let mut g = grad_out.to_owned();
        for i in (0..n).rev() {
            let l = &self.layers[i];
            let act = l.act;
            Zip::from(&mut g)
                .and(&trace.outputs[i + 1])
                .for_each(|g, &y| *g = *g * act.grad_from_output(y));
            dw.push(trace.outputs[i].t().dot(&g));
            db.push(g.sum_axis(Axis(0)));
            g = g.dot(&l.w.t());
        }
        dw.reverse();
        db.reverse();
        (Grads { dw, db }, g)
    }

    pub fn check_same_shape(&self, other: &Mlp<T>) -> Result<(), NnError> {
        if self.shapes() != other.shapes() {
            return Err(NnError::ShapeMismatch {
                expected: self.shapes(),
                found: other.shapes(),
            });
        }
        Ok(())
    }

    /// `self <- tau * online + (1 - tau) * self`
    pub fn soft_update(&mut self, online: &Mlp<T>, tau: T) -> Result<(), NnError> {
        self.check_same_shape(online)?;
        let keep = T::one() - tau;
        for (t, o) in self.layers.iter_mut().zip(&online.layers) {
            Zip::from(&mut t.w).and(&o.w).for_each(|t, &o| *t = tau * o + keep * *t);
            Zip::from(&mut t.b).and(&o.b).for_each(|t, &o| *t = tau * o + keep * *t);
        }
        Ok(())
    }

    /// Weights then bias of each layer, row-major.
    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.w.iter().copied());
            out.extend(l.b.iter().copied());
        }
        out
    }

    pub fn load_flat(&mut self, values: &[T]) -> Result<(), NnError> {
        if values.len() != self.param_count() {
            return Err(NnError::ParamCount {
                expected: self.param_count(),
                found: values.len(),
            });
        }
        let mut it = values.iter().copied();
        for l in &mut self.layers {
            l.w.iter_mut().for_each(|v| *v = it.next().expect("counted"));
            l.b.iter_mut().for_each(|v| *v = it.next().expect("counted"));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().all(|v| v.is_finite()) && l.b.iter().all(|v| v.is_finite()))
    }
}

/// Adam optimizer state for one network.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    t: i32,
    m: Grads<T>,
    v: Grads<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(net: &Mlp<T>, lr: T) -> Self {
        Self {
            lr,
            beta1: cast(0.9),
            beta2: cast(0.999),
            eps: cast(1e-8),
            t: 0,
            m: Grads::zeros_like(net),
            v: Grads::zeros_like(net),
        }
    }

    /// Descends along `g`.
    pub fn step(&mut self, net: &mut Mlp<T>, g: &Grads<T>) {
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = T::one() - b1.powi(self.t);
        let c2 = T::one() - b2.powi(self.t);
        let lr = self.lr;
        let one = T::one();
        let update = |p: &mut T, m: &mut T, v: &mut T, g: T| {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p = *p - lr * mh / (vh.sqrt() + eps);
        };
        for (i, l) in net.layers.iter_mut().enumerate() {
            Zip::from(&mut l.w)
                .and(&mut self.m.dw[i])
                .and(&mut self.v.dw[i])
                .and(&g.dw[i])
                .for_each(|p, m, v, &g| update(p, m, v, g));
            Zip::from(&mut l.b)
                .and(&mut self.m.db[i])
                .and(&mut self.v.db[i])
                .and(&g.db[i])
                .for_each(|p, m, v, &g| update(p, m, v, g));
        }
    }
}
