use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::graph::{Graph, Var};
use super::tensor::{Real, Tensor};
use crate::error::Result;

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

/// A trainable tensor with a process-unique identity.
///
/// Graphs key parameter nodes by id, so a parameter used twice in one pass
/// accumulates a single gradient.
#[derive(Debug)]
pub struct Param<T: Real = f64> {
    id: ParamId,
    value: Tensor<T>,
}

impl<T: Real> Clone for Param<T> {
    /// Clones get a fresh id so the copy can be trained independently.
    fn clone(&self) -> Self {
        Self::new(self.value.clone())
    }
}

impl<T: Real> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        Self { id: ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed)), value }
    }

    /// Uniform in ±1/√fan_in.
    pub fn uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::c(rng.random_range(-bound..=bound))).collect();
        Self::new(Tensor::new(shape.to_vec(), data).expect("shape product"))
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor<T> {
        &mut self.value
    }

    pub fn set(&mut self, value: Tensor<T>) {
        self.value = value;
    }

    pub fn fill(&mut self, v: T) {
        self.value.data_mut().iter_mut().for_each(|x| *x = v);
    }
}

/// Anything holding trainable parameters. Both visitors walk fields in the
/// same order; use [`impl_parameterized!`] rather than writing them by hand.
pub trait Parameterized<T: Real = f64> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>);
    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>);

    fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        self.collect_params("", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        self.collect_params_mut(&mut out);
        out
    }

    fn num_scalars(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.value().len()).sum()
    }
}

pub fn join_name(prefix: &str, field: &str) -> String {
    if prefix.is_empty() {
        field.to_string()
    } else {
        format!("{prefix}.{field}")
    }
}

impl<T: Real> Parameterized<T> for Param<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        out.push((prefix.to_string(), self));
    }
    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        out.push(self);
    }
}

impl<T: Real, P: Parameterized<T>> Parameterized<T> for Option<P> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        if let Some(p) = self {
            p.collect_params(prefix, out);
        }
    }
    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        if let Some(p) = self {
            p.collect_params_mut(out);
        }
    }
}

impl<T: Real, P: Parameterized<T>> Parameterized<T> for Vec<P> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        for (i, p) in self.iter().enumerate() {
            p.collect_params(&join_name(prefix, &i.to_string()), out);
        }
    }
    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        for p in self.iter_mut() {
            p.collect_params_mut(out);
        }
    }
}

/// Derives [`Parameterized`] from a field list.
#[macro_export]
macro_rules! impl_parameterized {
    ($name:ident<T> { $($field:ident),* $(,)? }) => {
        impl<T: $crate::numerics::Real> $crate::numerics::Parameterized<T> for $name<T> {
            fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a $crate::numerics::Param<T>)>) {
                $( $crate::numerics::Parameterized::<T>::collect_params(&self.$field, &$crate::numerics::join_name(prefix, stringify!($field)), out); )*
            }
            fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut $crate::numerics::Param<T>>) {
                $( $crate::numerics::Parameterized::<T>::collect_params_mut(&mut self.$field, out); )*
            }
        }
    };
    ($name:ident { $($field:ident),* $(,)? }) => {
        impl $crate::numerics::Parameterized<f64> for $name {
            fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a $crate::numerics::Param<f64>)>) {
                $( $crate::numerics::Parameterized::<f64>::collect_params(&self.$field, &$crate::numerics::join_name(prefix, stringify!($field)), out); )*
            }
            fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut $crate::numerics::Param<f64>>) {
                $( $crate::numerics::Parameterized::<f64>::collect_params_mut(&mut self.$field, out); )*
            }
        }
    };
}

/// Affine map over the last axis: x·w + b with w: [in×out].
#[derive(Clone, Debug)]
pub struct Linear<T: Real = f64> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl_parameterized!(Linear<T> { weight, bias });

impl<T: Real> Linear<T> {
    pub fn new(din: usize, dout: usize, rng: &mut impl Rng) -> Self {
        Self { weight: Param::uniform(&[din, dout], din, rng), bias: Param::uniform(&[1, dout], din, rng) }
    }

    pub fn zeros(din: usize, dout: usize) -> Self {
        Self { weight: Param::new(Tensor::zeros(&[din, dout])), bias: Param::new(Tensor::zeros(&[1, dout])) }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value().shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value().shape()[1]
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight)?;
        let b = g.param(&self.bias)?;
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

/// Row standardization followed by a learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm<T: Real = f64> {
    pub gain: Param<T>,
    pub shift: Param<T>,
}

impl_parameterized!(LayerNorm<T> { gain, shift });

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl<T: Real> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self { gain: Param::new(Tensor::full(&[1, dim], T::one())), shift: Param::new(Tensor::zeros(&[1, dim])) }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let n = g.layer_norm_rows(x, T::c(LAYER_NORM_EPS))?;
        let gain = g.param(&self.gain)?;
        let shift = g.param(&self.shift)?;
        let y = g.mul_row(n, gain)?;
        g.add_row(y, shift)
    }
}
