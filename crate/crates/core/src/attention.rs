//! Multi-head cross-attention with an additive position bias and an optional
//! text-confidence gate over the keys.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::impl_parameterized;
use crate::numerics::{Graph, Linear, Real, Tensor, Var};
use crate::posenc::AttnBias;

/// Where the confidence gate enters the attention logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateWiring {
    /// softmax(S + E)
    None,
    /// softmax(S + E + logits)
    AdditiveBias,
    /// softmax(S + g∘E)
    GateOnPe,
    /// softmax(g∘(S + E))
    #[default]
    GateOnAll,
}

impl GateWiring {
    pub const ALL: [GateWiring; 4] = [GateWiring::None, GateWiring::AdditiveBias, GateWiring::GateOnPe, GateWiring::GateOnAll];

    pub fn name(self) -> &'static str {
        match self {
            GateWiring::None => "none",
            GateWiring::AdditiveBias => "additive_bias",
            GateWiring::GateOnPe => "gate_on_pe",
            GateWiring::GateOnAll => "gate_on_all",
        }
    }
}

impl std::str::FromStr for GateWiring {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        GateWiring::ALL
            .into_iter()
            .find(|w| w.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown wiring `{s}` (none|additive_bias|gate_on_pe|gate_on_all)")))
    }
}

/// Per-key gate in (0, 1) and the pre-sigmoid logits it came from, both `[1, N]`.
#[derive(Clone, Copy, Debug)]
pub struct GateVector {
    pub g: Var,
    pub logits: Var,
}

/// Projections of one multi-head attention block.
#[derive(Clone, Debug)]
pub struct Attention<T: Real = f64> {
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
    pub heads: usize,
}

impl_parameterized!(Attention<T> { wq, wk, wv, wo });

impl<T: Real> Attention<T> {
    pub fn new(dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            wq: Linear::new(dim, dim, rng),
            wk: Linear::new(dim, dim, rng),
            wv: Linear::new(dim, dim, rng),
            wo: Linear::new(dim, dim, rng),
            heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.wq.in_dim()
    }

    /// Zeroes the value and output projections so the block outputs 0.
    pub fn silence(&mut self) {
        for p in [&mut self.wv.weight, &mut self.wv.bias, &mut self.wo.weight, &mut self.wo.bias] {
            p.fill(T::zero());
        }
    }
}

/// confidence = V·T_sᵀ, `[N, L_s]`, no scaling.
pub fn token_confidence<T: Real>(g: &mut Graph<T>, seeds: Var, surround: Var) -> Result<Var> {
    if g.dims(surround).0 == 0 {
        return Err(Error::EmptySurrounding);
    }
    g.matmul_nt(seeds, surround)
}

/// g[i] = σ(max_j conf[i, j]).
pub fn confidence_gate<T: Real>(g: &mut Graph<T>, conf: Var) -> Result<GateVector> {
    if g.dims(conf).1 == 0 {
        return Err(Error::EmptySurrounding);
    }
    let col = g.max_cols(conf)?;
    let logits = g.transpose(col)?;
    let gate = g.sigmoid(logits)?;
    Ok(GateVector { g: gate, logits })
}

#[derive(Clone, Debug)]
pub struct AttnOutput {
    /// `[K, D]` after the output projection.
    pub out: Var,
    /// One `[K, N]` attention map per head.
    pub attn: Vec<Var>,
}

impl AttnOutput {
    /// Attention maps stacked to `[H, K, N]`.
    pub fn maps<T: Real>(&self, g: &Graph<T>) -> Tensor<T> {
        let (k, n) = g.dims(self.attn[0]);
        let data = self.attn.iter().flat_map(|v| g.value(*v).data().iter().copied()).collect();
        Tensor::new(vec![self.attn.len(), k, n], data).expect("equal head shapes")
    }
}

/// Per head h: S_h = Q_h·K_hᵀ/√(D/H), L_h = S_h + E_h, then the wiring decides
/// how the key gate enters before the row softmax. The gate is shared across
/// heads and broadcast along the query axis.
#[allow(clippy::too_many_arguments)]
pub fn gated_cross_attention<T: Real>(
    g: &mut Graph<T>,
    p: &Attention<T>,
    queries: Var,
    keys: Var,
    values: Var,
    bias: Option<&AttnBias>,
    gate: Option<&GateVector>,
    wiring: GateWiring,
) -> Result<AttnOutput> {
    let (kq, d) = g.dims(queries);
    let (n, dk) = g.dims(keys);
    let (nv, dv) = g.dims(values);
    let h = p.heads;
    if d != p.dim() || dk != d || dv != d || nv != n {
        return Err(shape_err("gated_cross_attention", format!("queries {kq}×{d}, keys {n}×{dk}, values {nv}×{dv}, model dim {}", p.dim())));
    }
    if h == 0 || d % h != 0 {
        return Err(shape_err("gated_cross_attention", format!("dim {d} not divisible by {h} heads")));
    }
    if let Some(b) = bias {
        if b.heads != h || b.queries != kq || b.keys != n {
            return Err(shape_err("gated_cross_attention", format!("bias {}×{}×{} vs {h}×{kq}×{n}", b.heads, b.queries, b.keys)));
        }
    }
    let gate = match (wiring, gate) {
        (GateWiring::None, _) => None,
        (w, None) => return Err(Error::MissingGate(w.name())),
        (_, Some(gv)) => {
            if g.value(gv.g).len() != n {
                return Err(shape_err("gated_cross_attention", format!("gate of {} for {n} keys", g.value(gv.g).len())));
            }
            Some(*gv)
        }
    };

    let q = p.wq.forward(g, queries)?;
    let k = p.wk.forward(g, keys)?;
    let v = p.wv.forward(g, values)?;
    let dh = d / h;
    let scale = T::one() / T::c(dh as f64).sqrt();

    let mut heads_out = Vec::with_capacity(h);
    let mut maps = Vec::with_capacity(h);
    for head in 0..h {
        let qh = g.slice_cols(q, head * dh, dh)?;
        let kh = g.slice_cols(k, head * dh, dh)?;
        let vh = g.slice_cols(v, head * dh, dh)?;
        let raw = g.matmul_nt(qh, kh)?;
        let scores = g.scale(raw, scale)?;
        let e = match bias {
            Some(b) => Some(g.slice_rows(b.var, head * kq, kq)?),
            None => None,
        };
        let logits = match (wiring, gate) {
            (GateWiring::None, _) | (_, None) => match e {
                Some(e) => g.add(scores, e)?,
                None => scores,
            },
            (GateWiring::AdditiveBias, Some(gv)) => {
                let l = match e {
                    Some(e) => g.add(scores, e)?,
                    None => scores,
                };
                g.add_row(l, gv.logits)?
            }
            (GateWiring::GateOnPe, Some(gv)) => match e {
                Some(e) => {
                    let ge = g.mul_row(e, gv.g)?;
                    g.add(scores, ge)?
                }
                None => scores,
            },
            (GateWiring::GateOnAll, Some(gv)) => {
                let l = match e {
                    Some(e) => g.add(scores, e)?,
                    None => scores,
                };
                g.mul_row(l, gv.g)?
            }
        };
        let a = g.softmax_rows(logits)?;
        heads_out.push(g.matmul(a, vh)?);
        maps.push(a);
    }
    let merged = if h == 1 { heads_out[0] } else { g.concat_cols(&heads_out)? };
    let out = p.wo.forward(g, merged)?;
    Ok(AttnOutput { out, attn: maps })
}
