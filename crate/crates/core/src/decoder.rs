//! Query decoder: a target-object branch and a surrounding branch run side by
//! side on the same queries and are fused after each layer. A single-branch
//! serial layer is provided as the baseline.
//!
//! Per layer:
//! 1. pre-norm self-attention over the K queries, residual;
//! 2. each branch cross-attends to its text tokens and to the seed points,
//!    the latter biased by the box-surface encoding of the layer's incoming
//!    boxes (and gated by text confidence when the branch is text-guided);
//!    the two results are summed and normalized;
//! 3. branch outputs are summed onto the residual stream, then a pre-norm
//!    feed-forward block;
//! 4. the box head re-predicts boxes relative to the incoming box centers.
//!
//! Incoming boxes are treated as constants, so no gradient flows through
//! the offsets into the previous layer's box head.

use rand::Rng;

use crate::attention::{confidence_gate, gated_cross_attention, token_confidence, Attention, AttnOutput, GateWiring};
use crate::error::{shape_err, Error, Result};
use crate::geometry::{offset_field, Box3, Point3};
use crate::impl_parameterized;
use crate::numerics::{mlp_apply, Graph, LayerNorm, MlpParams, Tensor, Var};
use crate::posenc::{pe_bias, PosEncConfig, PosEncoder};

/// Lower bound added to every predicted extent, meters.
pub const SIZE_FLOOR: f64 = 1e-4;

/// Queries carried between layers.
#[derive(Clone, Debug)]
pub struct QuerySet {
    /// `[K, D]`
    pub features: Var,
    /// Current box predictions (values of `box_var`).
    pub boxes: Vec<Box3>,
    /// `[K, 6]`: center xyz then size lwh, differentiable.
    pub box_var: Var,
    pub layer_index: usize,
}

#[derive(Clone, Debug)]
pub struct BoxHead {
    pub mlp: MlpParams,
}

impl_parameterized!(BoxHead { mlp });

impl BoxHead {
    pub fn new(dim: usize, rng: &mut impl Rng) -> Self {
        Self { mlp: MlpParams::new(dim, dim, 6, rng) }
    }
}

/// Six numbers per query: center = reference + offset, size = softplus + floor.
pub fn predict_boxes(g: &mut Graph, features: Var, refs: &[Point3], head: &BoxHead) -> Result<(Var, Vec<Box3>)> {
    let k = g.dims(features).0;
    if refs.len() != k {
        return Err(shape_err("predict_boxes", format!("{} reference centers for {k} queries", refs.len())));
    }
    let raw = mlp_apply(g, &head.mlp, features)?;
    let offset = g.slice_cols(raw, 0, 3)?;
    let size_raw = g.slice_cols(raw, 3, 3)?;
    let ref_t = g.input(Tensor::new(vec![k, 3], refs.iter().flat_map(|p| p.to_array()).collect())?)?;
    let center = g.add(ref_t, offset)?;
    let sp = g.softplus(size_raw)?;
    let size = g.add_scalar(sp, SIZE_FLOOR)?;
    let box_var = g.concat_cols(&[center, size])?;
    let boxes = boxes_from(g.value(box_var))?;
    Ok((box_var, boxes))
}

pub(crate) fn boxes_from(t: &Tensor) -> Result<Vec<Box3>> {
    (0..t.rows())
        .map(|i| {
            let r = t.row(i);
            Box3::new([r[0], r[1], r[2]], [r[3], r[4], r[5]])
        })
        .collect()
}

/// One decoder branch: text cross-attention, visual cross-attention with an
/// optional position encoder and gate, and the within-branch fusion norm.
#[derive(Clone, Debug)]
pub struct BranchParams {
    pub text_attn: Attention,
    pub visual_attn: Attention,
    pub posenc: Option<PosEncoder>,
    pub fuse_norm: LayerNorm,
    pub wiring: GateWiring,
}

impl_parameterized!(BranchParams { text_attn, visual_attn, posenc, fuse_norm });

impl BranchParams {
    pub fn new(dim: usize, heads: usize, posenc: Option<PosEncConfig>, wiring: GateWiring, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            text_attn: Attention::new(dim, heads, rng)?,
            visual_attn: Attention::new(dim, heads, rng)?,
            posenc: posenc.map(|cfg| PosEncoder::new(cfg, rng)).transpose()?,
            fuse_norm: LayerNorm::new(dim),
            wiring,
        })
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayerParams {
    pub self_attn: Attention,
    pub sa_norm: LayerNorm,
    pub query_norm: LayerNorm,
    pub target: BranchParams,
    /// `None` makes this a serial (single-branch) layer.
    pub surround: Option<BranchParams>,
    pub ffn: MlpParams,
    pub ffn_norm: LayerNorm,
    pub box_head: BoxHead,
}

impl_parameterized!(DecoderLayerParams { self_attn, sa_norm, query_norm, target, surround, ffn, ffn_norm, box_head });

/// Layer construction options.
#[derive(Clone, Copy, Debug)]
pub struct LayerSpec {
    pub dim: usize,
    pub heads: usize,
    pub target_pe: Option<PosEncConfig>,
    pub target_wiring: GateWiring,
    pub surround_pe: Option<PosEncConfig>,
    pub surround_wiring: GateWiring,
    pub parallel: bool,
}

impl DecoderLayerParams {
    pub fn new(spec: &LayerSpec, rng: &mut impl Rng) -> Result<Self> {
        let d = spec.dim;
        let self_attn = Attention::new(d, spec.heads, rng)?;
        let target = BranchParams::new(d, spec.heads, spec.target_pe, spec.target_wiring, rng)?;
        let surround = if spec.parallel {
            Some(BranchParams::new(d, spec.heads, spec.surround_pe, spec.surround_wiring, rng)?)
        } else {
            None
        };
        Ok(Self {
            self_attn,
            sa_norm: LayerNorm::new(d),
            query_norm: LayerNorm::new(d),
            target,
            surround,
            ffn: MlpParams::new(d, 2 * d, d, rng),
            ffn_norm: LayerNorm::new(d),
            box_head: BoxHead::new(d, rng),
        })
    }

    pub fn is_parallel(&self) -> bool {
        self.surround.is_some()
    }
}

/// Read-only context shared by every layer.
#[derive(Clone, Copy, Debug)]
pub struct DecoderInputs<'a> {
    /// `[N, D]` seed features.
    pub seeds: Var,
    pub seed_xyz: &'a [Point3],
    /// `[L_m, D]` target-object tokens (main object and attributes).
    pub target_tokens: Var,
    /// `[L_s, D]` surrounding tokens, absent when the utterance has none.
    pub surround_tokens: Option<Var>,
}

/// What one branch produced inside a layer.
#[derive(Clone, Debug)]
pub struct BranchTrace {
    pub visual_attn: Tensor,
    pub text_out: Option<Tensor>,
    pub bias: Option<Tensor>,
    pub gate: Option<Tensor>,
    pub fused: Tensor,
}

#[derive(Clone, Debug)]
pub struct LayerTrace {
    pub target: BranchTrace,
    pub surround: Option<BranchTrace>,
    pub boxes: Vec<Box3>,
    pub features: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct DecoderTrace {
    pub layers: Vec<LayerTrace>,
}

struct BranchOut {
    fused: Var,
    visual: AttnOutput,
    text_out: Option<Var>,
    bias: Option<Var>,
    gate: Option<Var>,
}

#[allow(clippy::too_many_arguments)]
fn run_branch(
    g: &mut Graph,
    b: &BranchParams,
    queries: Var,
    text: Option<Var>,
    gate_text: Option<Var>,
    inputs: &DecoderInputs<'_>,
    boxes: &[Box3],
) -> Result<BranchOut> {
    let bias = match &b.posenc {
        Some(enc) => {
            let field = offset_field(inputs.seed_xyz, boxes, enc.cfg.scheme)?;
            Some(pe_bias(g, &field, enc)?)
        }
        None => None,
    };
    let (wiring, gate) = match gate_text {
        Some(t) if b.wiring != GateWiring::None && g.dims(t).0 > 0 => {
            let conf = token_confidence(g, inputs.seeds, t)?;
            (b.wiring, Some(confidence_gate(g, conf)?))
        }
        _ => (GateWiring::None, None),
    };
    let text_out = match text {
        Some(t) if g.dims(t).0 > 0 => Some(gated_cross_attention(g, &b.text_attn, queries, t, t, None, None, GateWiring::None)?.out),
        _ => None,
    };
    let visual = gated_cross_attention(g, &b.visual_attn, queries, inputs.seeds, inputs.seeds, bias.as_ref(), gate.as_ref(), wiring)?;
    let sum = match text_out {
        Some(t) => g.add(t, visual.out)?,
        None => visual.out,
    };
    let fused = b.fuse_norm.forward(g, sum)?;
    Ok(BranchOut { fused, visual, text_out, bias: bias.map(|e| e.var), gate: gate.map(|gv| gv.g) })
}

fn branch_trace(g: &Graph, o: &BranchOut) -> BranchTrace {
    BranchTrace {
        visual_attn: o.visual.maps(g),
        text_out: o.text_out.map(|v| g.value(v).clone()),
        bias: o.bias.map(|v| g.value(v).clone()),
        gate: o.gate.map(|v| g.value(v).clone()),
        fused: g.value(o.fused).clone(),
    }
}

fn check_inputs(g: &Graph, q: &QuerySet, inputs: &DecoderInputs<'_>) -> Result<()> {
    let (k, _) = g.dims(q.features);
    if q.boxes.len() != k {
        return Err(shape_err("decoder_layer", format!("{} boxes for {k} queries", q.boxes.len())));
    }
    if g.dims(inputs.seeds).0 != inputs.seed_xyz.len() {
        return Err(shape_err("decoder_layer", "seed features and coordinates disagree"));
    }
    if g.dims(inputs.target_tokens).0 == 0 {
        return Err(Error::Text("no target-object tokens".into()));
    }
    Ok(())
}

/// Shared scaffolding of the parallel and serial layers.
fn layer_forward(g: &mut Graph, q: &QuerySet, inputs: &DecoderInputs<'_>, p: &DecoderLayerParams, trace: Option<&mut DecoderTrace>) -> Result<QuerySet> {
    check_inputs(g, q, inputs)?;
    let x = q.features;
    let sa_in = p.sa_norm.forward(g, x)?;
    let sa = gated_cross_attention(g, &p.self_attn, sa_in, sa_in, sa_in, None, None, GateWiring::None)?;
    let x1 = g.add(x, sa.out)?;
    let hq = p.query_norm.forward(g, x1)?;

    let surround_tokens = inputs.surround_tokens.filter(|t| g.dims(*t).0 > 0);
    let (target, surround) = match &p.surround {
        Some(sb) => {
            let t = run_branch(g, &p.target, hq, Some(inputs.target_tokens), Some(inputs.target_tokens), inputs, &q.boxes)?;
            let s = run_branch(g, sb, hq, surround_tokens, surround_tokens, inputs, &q.boxes)?;
            (t, Some(s))
        }
        None => {
            let all = match surround_tokens {
                Some(s) => g.concat_rows(&[inputs.target_tokens, s])?,
                None => inputs.target_tokens,
            };
            (run_branch(g, &p.target, hq, Some(all), Some(all), inputs, &q.boxes)?, None)
        }
    };
    let fused = match &surround {
        Some(s) => g.add(target.fused, s.fused)?,
        None => target.fused,
    };
    let x2 = g.add(x1, fused)?;
    let f_in = p.ffn_norm.forward(g, x2)?;
    let f = mlp_apply(g, &p.ffn, f_in)?;
    let x3 = g.add(x2, f)?;

    let refs: Vec<Point3> = q.boxes.iter().map(Box3::center_point).collect();
    let (box_var, boxes) = predict_boxes(g, x3, &refs, &p.box_head)?;
    if let Some(tr) = trace {
        tr.layers.push(LayerTrace {
            target: branch_trace(g, &target),
            surround: surround.as_ref().map(|s| branch_trace(g, s)),
            boxes: boxes.clone(),
            features: g.value(x3).clone(),
        });
    }
    Ok(QuerySet { features: x3, boxes, box_var, layer_index: q.layer_index + 1 })
}

/// Parallel dual-branch layer. With no surrounding tokens the surrounding
/// branch still attends to the seeds, ungated and without a text term.
pub fn decoder_layer(g: &mut Graph, q: &QuerySet, inputs: &DecoderInputs<'_>, p: &DecoderLayerParams, trace: Option<&mut DecoderTrace>) -> Result<QuerySet> {
    if !p.is_parallel() {
        return Err(Error::Config("decoder_layer needs a surrounding branch; use serial_layer".into()));
    }
    layer_forward(g, q, inputs, p, trace)
}

/// Single-branch baseline: one text cross-attention over all tokens and one
/// visual cross-attention.
pub fn serial_layer(g: &mut Graph, q: &QuerySet, inputs: &DecoderInputs<'_>, p: &DecoderLayerParams, trace: Option<&mut DecoderTrace>) -> Result<QuerySet> {
    if p.is_parallel() {
        return Err(Error::Config("serial_layer takes single-branch parameters".into()));
    }
    layer_forward(g, q, inputs, p, trace)
}

pub struct StackOutput {
    pub last: QuerySet,
    pub per_layer: Vec<QuerySet>,
    pub trace: Option<DecoderTrace>,
}

pub fn decode_stack(g: &mut Graph, q0: &QuerySet, inputs: &DecoderInputs<'_>, layers: &[DecoderLayerParams], trace: bool) -> Result<StackOutput> {
    if layers.is_empty() {
        return Err(Error::Config("decoder needs at least one layer".into()));
    }
    let mut tr = trace.then(DecoderTrace::default);
    let mut per_layer = Vec::with_capacity(layers.len());
    let mut q = q0.clone();
    for p in layers {
        q = if p.is_parallel() {
            decoder_layer(g, &q, inputs, p, tr.as_mut())?
        } else {
            serial_layer(g, &q, inputs, p, tr.as_mut())?
        };
        per_layer.push(q.clone());
    }
    Ok(StackOutput { last: q, per_layer, trace: tr })
}
