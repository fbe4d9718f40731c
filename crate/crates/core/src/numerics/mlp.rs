use rand::Rng;

use super::graph::{Graph, Var};
use super::param::Param;
use super::tensor::{Real, Tensor};
use crate::error::{shape_err, Result};
use crate::impl_parameterized;

/// Two-layer perceptron `in → hidden → out` with a ReLU between the layers.
/// The ReLU subgradient at exactly 0 is 0.
#[derive(Clone, Debug)]
pub struct MlpParams<T: Real = f64> {
    pub w1: Param<T>,
    pub b1: Param<T>,
    pub w2: Param<T>,
    pub b2: Param<T>,
}

impl_parameterized!(MlpParams<T> { w1, b1, w2, b2 });

impl<T: Real> MlpParams<T> {
    /// Weights and biases uniform in ±1/√fan_in.
    pub fn new(din: usize, hidden: usize, dout: usize, rng: &mut impl Rng) -> Self {
        Self {
            w1: Param::uniform(&[din, hidden], din, rng),
            b1: Param::uniform(&[1, hidden], din, rng),
            w2: Param::uniform(&[hidden, dout], hidden, rng),
            b2: Param::uniform(&[1, dout], hidden, rng),
        }
    }

    pub fn zeros(din: usize, hidden: usize, dout: usize) -> Self {
        Self {
            w1: Param::new(Tensor::zeros(&[din, hidden])),
            b1: Param::new(Tensor::zeros(&[1, hidden])),
            w2: Param::new(Tensor::zeros(&[hidden, dout])),
            b2: Param::new(Tensor::zeros(&[1, dout])),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w1.value().shape()[0]
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.value().shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.w2.value().shape()[1]
    }
}

/// Applies the perceptron over the last axis of `x`.
pub fn mlp_apply<T: Real>(g: &mut Graph<T>, p: &MlpParams<T>, x: Var) -> Result<Var> {
    let din = *g.shape(x).last().unwrap_or(&0);
    if din != p.in_dim() {
        return Err(shape_err("mlp_apply", format!("input last dim {din}, expected {}", p.in_dim())));
    }
    let w1 = g.param(&p.w1)?;
    let b1 = g.param(&p.b1)?;
    let w2 = g.param(&p.w2)?;
    let b2 = g.param(&p.b2)?;
    g.mlp(x, w1, b1, w2, b2)
}
