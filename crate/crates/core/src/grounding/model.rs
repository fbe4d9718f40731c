use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{DecoderKind, ModelConfig};
use crate::attention::{gated_cross_attention, Attention, GateWiring};
use crate::decoder::{decode_stack, predict_boxes, BoxHead, DecoderInputs, DecoderLayerParams, DecoderTrace, LayerSpec, QuerySet};
use crate::error::{Error, Result};
use crate::geometry::{Box3, Point3};
use crate::impl_parameterized;
use crate::numerics::{mlp_apply, Graph, LayerNorm, Linear, MlpParams, Param, Tensor, Var};
use crate::scenegen::{GroundingSample, PointCloud, SceneConfig};
use crate::textsplit::{label_components, partition_tokens, tokenize, Lexicon, SplitResult};

/// Ball radii (meters) for the density features.
const DENSITY_RADII: [f64; 3] = [0.15, 0.3, 0.6];
const COLOR_RADIUS: f64 = 0.25;
const CENTROID_RADIUS: f64 = 0.5;
const EXTENT_RADIUS: f64 = 0.8;
/// Width of the per-seed geometric descriptor fed to the visual perceptron.
pub const RAW_FEATURES: usize = 15;

/// Farthest-point sampling starting from index 0; ties go to the lower index.
pub fn farthest_point_sample(xyz: &[Point3], n: usize) -> Result<Vec<usize>> {
    if n > xyz.len() {
        return Err(Error::InvalidArgument(format!("{n} seeds from {} points", xyz.len())));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut chosen = vec![0usize];
    let mut nearest: Vec<f64> = xyz.iter().map(|p| p.dist(&xyz[0])).collect();
    while chosen.len() < n {
        let mut best = 0;
        for (i, d) in nearest.iter().enumerate() {
            if *d > nearest[best] {
                best = i;
            }
        }
        chosen.push(best);
        let b = xyz[best];
        for (d, p) in nearest.iter_mut().zip(xyz) {
            *d = d.min(p.dist(&b));
        }
    }
    Ok(chosen)
}

/// Seed coordinates plus the fixed per-seed descriptor: local mean color,
/// log point counts at three radii, position relative to the room center,
/// local centroid offset, and local extent.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualInput {
    pub seed_xyz: Vec<Point3>,
    pub raw: Tensor,
}

pub fn prepare_visual(cloud: &PointCloud, n: usize, room_center: [f64; 3]) -> Result<VisualInput> {
    let idx = farthest_point_sample(&cloud.xyz, n)?;
    let mut raw = Vec::with_capacity(n * RAW_FEATURES);
    for &s in &idx {
        let c = cloud.xyz[s];
        let mut counts = [0usize; 3];
        let (mut rgb, mut rgb_n) = ([0.0; 3], 0usize);
        let (mut cen, mut cen_n) = ([0.0; 3], 0usize);
        let (mut lo, mut hi) = ([f64::INFINITY; 3], [f64::NEG_INFINITY; 3]);
        for (p, col) in cloud.xyz.iter().zip(&cloud.rgb) {
            let d = p.dist(&c);
            for (k, r) in DENSITY_RADII.iter().enumerate() {
                counts[k] += usize::from(d <= *r);
            }
            let off = [p.x - c.x, p.y - c.y, p.z - c.z];
            if d <= COLOR_RADIUS {
                (0..3).for_each(|i| rgb[i] += col[i]);
                rgb_n += 1;
            }
            if d <= CENTROID_RADIUS {
                (0..3).for_each(|i| cen[i] += off[i]);
                cen_n += 1;
            }
            if d <= EXTENT_RADIUS {
                for i in 0..3 {
                    lo[i] = lo[i].min(off[i]);
                    hi[i] = hi[i].max(off[i]);
                }
            }
        }
        raw.extend(rgb.map(|v| v / rgb_n as f64));
        raw.extend(counts.map(|k| (k as f64).ln_1p() / 4.0));
        raw.extend([c.x - room_center[0], c.y - room_center[1], c.z - room_center[2]].map(|v| v / 4.0));
        raw.extend(cen.map(|v| v / (cen_n as f64 * CENTROID_RADIUS)));
        raw.extend([0, 1, 2].map(|i| (hi[i] - lo[i]) / (2.0 * EXTENT_RADIUS)));
    }
    Ok(VisualInput { seed_xyz: idx.iter().map(|&i| cloud.xyz[i]).collect(), raw: Tensor::new(vec![n, RAW_FEATURES], raw)? })
}

#[derive(Clone, Debug)]
pub struct VisualEncoder {
    pub mlp: MlpParams,
}

impl_parameterized!(VisualEncoder { mlp });

/// V_0 = perceptron over the per-seed descriptor.
pub fn encode_visual(g: &mut Graph, enc: &VisualEncoder, input: &VisualInput) -> Result<Var> {
    let x = g.input(input.raw.clone())?;
    mlp_apply(g, &enc.mlp, x)
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub embed: Param,
    pub mix: Attention,
    vocab: Vec<String>,
    index: HashMap<String, usize>,
}

impl_parameterized!(TextEncoder { embed, mix });

impl TextEncoder {
    pub fn new(vocab: Vec<String>, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let index = vocab.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Ok(Self { embed: Param::uniform(&[vocab.len(), dim], 1, rng), mix: Attention::new(dim, heads, rng)?, vocab, index })
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn token_ids(&self, tokens: &[String]) -> Result<Vec<usize>> {
        tokens.iter().map(|t| self.index.get(t).copied().ok_or_else(|| Error::Text(format!("out-of-vocabulary token `{t}`")))).collect()
    }
}

/// T_0 = embedding + self-attention(embedding).
pub fn encode_text(g: &mut Graph, enc: &TextEncoder, ids: &[usize]) -> Result<Var> {
    if ids.is_empty() {
        return Err(Error::Text("no tokens".into()));
    }
    let table = g.param(&enc.embed)?;
    let e = g.gather_rows(table, ids)?;
    let mixed = gated_cross_attention(g, &enc.mix, e, e, e, None, None, GateWiring::None)?;
    g.add(e, mixed.out)
}

/// One round of bidirectional cross-attention with residual and norm.
#[derive(Clone, Debug)]
pub struct CrossEncoder {
    pub visual_from_text: Attention,
    pub text_from_visual: Attention,
    pub visual_norm: LayerNorm,
    pub text_norm: LayerNorm,
}

impl_parameterized!(CrossEncoder { visual_from_text, text_from_visual, visual_norm, text_norm });

pub fn cross_encode(g: &mut Graph, p: &CrossEncoder, v: Var, t: Var) -> Result<(Var, Var)> {
    let vt = gated_cross_attention(g, &p.visual_from_text, v, t, t, None, None, GateWiring::None)?;
    let tv = gated_cross_attention(g, &p.text_from_visual, t, v, v, None, None, GateWiring::None)?;
    let v_sum = g.add(v, vt.out)?;
    let t_sum = g.add(t, tv.out)?;
    Ok((p.visual_norm.forward(g, v_sum)?, p.text_norm.forward(g, t_sum)?))
}

/// Indices of the `k` largest scores, ties to the lower index.
pub fn topk_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub struct Selection {
    pub queries: QuerySet,
    pub indices: Vec<usize>,
    /// `[N, 1]` scores of all seeds.
    pub scores: Var,
}

/// Linear score per seed, top-K selection, and initial boxes around the
/// selected seeds. The selection itself carries no gradient.
pub fn select_topk(g: &mut Graph, v: Var, seed_xyz: &[Point3], score_head: &Linear, box_head: &BoxHead, k: usize) -> Result<Selection> {
    let n = g.dims(v).0;
    if k > n || seed_xyz.len() != n {
        return Err(Error::InvalidArgument(format!("select {k} of {n} seeds ({} coordinates)", seed_xyz.len())));
    }
    let scores = score_head.forward(g, v)?;
    let indices = topk_indices(g.value(scores).data(), k);
    let features = g.gather_rows(v, &indices)?;
    let refs: Vec<Point3> = indices.iter().map(|&i| seed_xyz[i]).collect();
    let (box_var, boxes) = predict_boxes(g, features, &refs, box_head)?;
    Ok(Selection { queries: QuerySet { features, boxes, box_var, layer_index: 0 }, indices, scores })
}

#[derive(Clone, Debug)]
pub struct ProjectionHead {
    pub position: Linear,
    pub semantic: Linear,
}

impl_parameterized!(ProjectionHead { position, semantic });

#[derive(Clone, Debug)]
pub struct HeadOutputs {
    /// `[K, D_l]`
    pub position: Var,
    /// `[K, D_o]`
    pub semantic: Var,
    /// `[K, 6]`
    pub box_var: Var,
    pub boxes: Vec<Box3>,
}

pub fn project_head(g: &mut Graph, p: &ProjectionHead, q: &QuerySet) -> Result<HeadOutputs> {
    Ok(HeadOutputs { position: p.position.forward(g, q.features)?, semantic: p.semantic.forward(g, q.features)?, box_var: q.box_var, boxes: q.boxes.clone() })
}

#[derive(Clone, Debug)]
pub struct GroundingModel {
    pub cfg: ModelConfig,
    pub visual: VisualEncoder,
    pub text: TextEncoder,
    pub cross: CrossEncoder,
    pub score_head: Linear,
    pub proposal_head: BoxHead,
    pub layers: Vec<DecoderLayerParams>,
    pub head: ProjectionHead,
    pub text_proj: Linear,
}

impl_parameterized!(GroundingModel { visual, text, cross, score_head, proposal_head, layers, head, text_proj });

impl GroundingModel {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.dim;
        let spec = LayerSpec {
            dim: d,
            heads: cfg.heads,
            target_pe: cfg.posenc(cfg.target_pe),
            target_wiring: cfg.branch_wiring(cfg.target_gate),
            surround_pe: cfg.posenc(cfg.surround_pe),
            surround_wiring: cfg.branch_wiring(cfg.surround_gate),
            parallel: cfg.decoder == DecoderKind::Parallel,
        };
        let visual = VisualEncoder { mlp: MlpParams::new(RAW_FEATURES, d, d, &mut rng) };
        let text = TextEncoder::new(Lexicon::standard().vocabulary(), d, cfg.heads, &mut rng)?;
        let cross = CrossEncoder {
            visual_from_text: Attention::new(d, cfg.heads, &mut rng)?,
            text_from_visual: Attention::new(d, cfg.heads, &mut rng)?,
            visual_norm: LayerNorm::new(d),
            text_norm: LayerNorm::new(d),
        };
        let score_head = Linear::new(d, 1, &mut rng);
        let proposal_head = BoxHead::new(d, &mut rng);
        let layers = (0..cfg.layers).map(|_| DecoderLayerParams::new(&spec, &mut rng)).collect::<Result<_>>()?;
        let head = ProjectionHead { position: Linear::new(d, cfg.pos_dim, &mut rng), semantic: Linear::new(d, cfg.sem_dim, &mut rng) };
        let text_proj = Linear::new(d, cfg.sem_dim, &mut rng);
        Ok(Self { cfg: cfg.clone(), visual, text, cross, score_head, proposal_head, layers, head, text_proj })
    }
}

/// Everything about a sample that does not depend on the parameters.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub visual: VisualInput,
    pub tokens: Vec<String>,
    pub token_ids: Vec<usize>,
    pub split: SplitResult,
    pub gt: Box3,
    pub target_id: usize,
    pub object_boxes: Vec<(usize, Box3)>,
    pub multiple: bool,
}

pub fn prepare_sample(sample: &GroundingSample, model: &GroundingModel, scene_cfg: &SceneConfig, lex: &Lexicon) -> Result<PreparedSample> {
    let cloud = sample.points(scene_cfg)?;
    let visual = prepare_visual(&cloud, model.cfg.seeds, sample.scene.room_center())?;
    let tokens = tokenize(&sample.utterance)?;
    let labels = label_components(&tokens, lex)?;
    let split = partition_tokens(&tokens, &labels)?;
    let token_ids = model.text.token_ids(&tokens)?;
    Ok(PreparedSample {
        visual,
        tokens,
        token_ids,
        split,
        gt: sample.target().bbox,
        target_id: sample.target_id,
        object_boxes: sample.scene.objects.iter().map(|o| (o.id, o.bbox)).collect(),
        multiple: sample.is_multiple(),
    })
}

pub struct ForwardOutput {
    /// Layer 0 (initial proposals) followed by every decoder layer.
    pub heads: Vec<HeadOutputs>,
    /// Per-layer query logits `[1, K]` used by the semantic loss and ranking.
    pub logits: Vec<Var>,
    pub selected: Vec<usize>,
    pub trace: Option<DecoderTrace>,
}

/// Query logits: cosine(V_o, projected mean T_m) / τ plus the selected
/// seeds' confidence scores.
fn query_logits(g: &mut Graph, model: &GroundingModel, semantic: Var, text_anchor: Var, seed_scores: Var) -> Result<Var> {
    let eps = 1e-8;
    let vo = g.l2_normalize_rows(semantic, eps)?;
    let sim = g.matmul_nt(vo, text_anchor)?;
    let sim = g.scale(sim, 1.0 / model.cfg.tau)?;
    let total = g.add(sim, seed_scores)?;
    g.transpose(total)
}

pub fn forward(g: &mut Graph, model: &GroundingModel, s: &PreparedSample, trace: bool) -> Result<ForwardOutput> {
    let cfg = &model.cfg;
    let v0 = encode_visual(g, &model.visual, &s.visual)?;
    let t0 = encode_text(g, &model.text, &s.token_ids)?;
    let (v, t) = cross_encode(g, &model.cross, v0, t0)?;
    let sel = select_topk(g, v, &s.visual.seed_xyz, &model.score_head, &model.proposal_head, cfg.queries)?;

    let t_m = g.gather_rows(t, &s.split.target_indices)?;
    let t_s = if s.split.surrounding_indices.is_empty() { None } else { Some(g.gather_rows(t, &s.split.surrounding_indices)?) };
    let inputs = DecoderInputs { seeds: v, seed_xyz: &s.visual.seed_xyz, target_tokens: t_m, surround_tokens: t_s };
    let stack = decode_stack(g, &sel.queries, &inputs, &model.layers, trace)?;

    let mean_tm = g.mean_rows(t_m)?;
    let proj = model.text_proj.forward(g, mean_tm)?;
    let anchor = g.l2_normalize_rows(proj, 1e-8)?;
    let sel_scores = g.gather_rows(sel.scores, &sel.indices)?;

    let mut heads = Vec::with_capacity(cfg.layers + 1);
    let mut logits = Vec::with_capacity(cfg.layers + 1);
    for q in std::iter::once(&sel.queries).chain(stack.per_layer.iter()) {
        let h = project_head(g, &model.head, q)?;
        logits.push(query_logits(g, model, h.semantic, anchor, sel_scores)?);
        heads.push(h);
    }
    Ok(ForwardOutput { heads, logits, selected: sel.indices, trace: stack.trace })
}
