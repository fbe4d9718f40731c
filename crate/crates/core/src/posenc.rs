//! Relative position encoding: offsets between query boxes and seed points are
//! squashed by a signed-log nonlinearity and mapped by a small perceptron to
//! one additive attention bias per head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::geometry::{OffsetField, Scheme};
use crate::impl_parameterized;
use crate::numerics::{mlp_apply, Graph, MlpParams, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FKind {
    SignedLog,
    Identity,
}

impl std::str::FromStr for FKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "signed_log" => Ok(FKind::SignedLog),
            "identity" => Ok(FKind::Identity),
            _ => Err(Error::InvalidArgument(format!("unknown f_kind `{s}` (signed_log|identity)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosEncConfig {
    pub scheme: Scheme,
    pub f_kind: FKind,
    /// Meters; offsets of this size map to log 2.
    pub f_scale: f64,
    pub heads: usize,
    pub hidden_dim: usize,
}

impl PosEncConfig {
    pub fn new(scheme: Scheme, heads: usize, hidden_dim: usize) -> Self {
        Self { scheme, f_kind: FKind::SignedLog, f_scale: 0.1, heads, hidden_dim }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("posenc needs heads ≥ 1 and hidden_dim ≥ 1".into()));
        }
        if !(self.f_scale > 0.0 && self.f_scale.is_finite()) {
            return Err(Error::Config(format!("f_scale must be positive, got {}", self.f_scale)));
        }
        Ok(())
    }
}

/// A position encoder: configuration plus one perceptron per offset vector
/// (eight for the vertex scheme, one otherwise).
#[derive(Clone, Debug)]
pub struct PosEncoder<T: Real = f64> {
    pub cfg: PosEncConfig,
    pub mlps: Vec<MlpParams<T>>,
}

impl_parameterized!(PosEncoder<T> { mlps });

/// Additive attention bias laid out as `[H·K, N]` (head-major).
#[derive(Clone, Copy, Debug)]
pub struct AttnBias {
    pub var: Var,
    pub heads: usize,
    pub queries: usize,
    pub keys: usize,
}

impl<T: Real> PosEncoder<T> {
    pub fn new(cfg: PosEncConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mlps = (0..cfg.scheme.corners()).map(|_| MlpParams::new(3, cfg.hidden_dim, cfg.heads, rng)).collect();
        Ok(Self { cfg, mlps })
    }
}

/// Componentwise F: `sign(d)·ln(1 + |d|/scale)` or identity.
pub fn f_nonlinear<T: Real>(delta: &Tensor<T>, kind: FKind, scale: f64) -> Tensor<T> {
    match kind {
        FKind::Identity => delta.clone(),
        FKind::SignedLog => {
            let inv = T::one() / T::c(scale);
            delta.map(|d| {
                let m = (d.abs() * inv).ln_1p();
                if d < T::zero() {
                    -m
                } else {
                    m
                }
            })
        }
    }
}

/// E = MLP(F(ΔE)) with one bias per head; the vertex scheme sums its eight
/// per-corner encodings.
pub fn pe_bias<T: Real>(g: &mut Graph<T>, delta: &OffsetField<T>, enc: &PosEncoder<T>) -> Result<AttnBias> {
    let cfg = &enc.cfg;
    if delta.scheme != cfg.scheme {
        return Err(shape_err("pe_bias", format!("offset scheme {} vs encoder scheme {}", delta.scheme, cfg.scheme)));
    }
    let shape = delta.offsets.shape();
    let corners = cfg.scheme.corners();
    let expected_rank = if corners == 1 { 3 } else { 4 };
    if shape.len() != expected_rank || *shape.last().unwrap_or(&0) != 3 || (corners > 1 && shape[2] != corners) {
        return Err(shape_err("pe_bias", format!("offset shape {shape:?} for scheme {}", cfg.scheme)));
    }
    if enc.mlps.len() != corners {
        return Err(shape_err("pe_bias", format!("{} perceptrons for {corners} offset vectors", enc.mlps.len())));
    }
    let (k, n, h) = (shape[0], shape[1], cfg.heads);
    let squashed = f_nonlinear(&delta.offsets, cfg.f_kind, cfg.f_scale);

    let mut total: Option<Var> = None;
    if corners == 1 {
        let x = g.input(squashed.reshape(&[k * n, 3])?)?;
        total = Some(mlp_apply(g, &enc.mlps[0], x)?);
    } else {
        let src = squashed.data();
        for (c, mlp) in enc.mlps.iter().enumerate() {
            let mut part = Vec::with_capacity(k * n * 3);
            for pair in 0..k * n {
                let base = (pair * corners + c) * 3;
                part.extend_from_slice(&src[base..base + 3]);
            }
            let x = g.input(Tensor::new(vec![k * n, 3], part)?)?;
            let e = mlp_apply(g, mlp, x)?;
            total = Some(match total {
                None => e,
                Some(acc) => g.add(acc, e)?,
            });
        }
    }
    let per_pair = total.expect("at least one perceptron");
    // [K·N, H] → [H, K·N] → [H·K, N]
    let t = g.transpose(per_pair)?;
    let var = g.reshape(t, &[h * k, n])?;
    Ok(AttnBias { var, heads: h, queries: k, keys: n })
}

/// Analytic cost of producing one bias tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct PeCost {
    /// Perceptron passes, each over K·N offset vectors.
    pub mlp_applications: usize,
    /// Offset scalars held before encoding.
    pub offset_scalars: usize,
    /// Offsets plus per-perceptron bias outputs.
    pub bias_buffer_scalars: usize,
}

pub fn pe_cost_model(scheme: Scheme, k: usize, n: usize, _hidden: usize, heads: usize) -> PeCost {
    let m = scheme.corners();
    let offset_scalars = m * k * n * 3;
    PeCost { mlp_applications: m, offset_scalars, bias_buffer_scalars: offset_scalars + m * heads * k * n }
}
