//! Straight-line scalar reimplementations used as oracles, plus random
//! fixtures shared by the integration tests.
#![allow(dead_code)]

use dualground_core::attention::{Attention, GateWiring};
use dualground_core::decoder::{BranchParams, DecoderLayerParams, LayerSpec, SIZE_FLOOR};
use dualground_core::geometry::{box_surface_offset, center_offset, vertex_offsets, Box3, Point3, Scheme};
use dualground_core::numerics::{LayerNorm, Linear, MlpParams, Param, Tensor, LAYER_NORM_EPS};
use dualground_core::posenc::{FKind, PosEncConfig, PosEncoder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor) -> Mat {
    let c = t.cols();
    t.data().chunks(c.max(1)).map(|r| r.to_vec()).collect()
}

pub fn pmat(p: &Param) -> Mat {
    mat(p.value())
}

pub fn to_tensor(m: &Mat) -> Tensor {
    let cols = m.first().map_or(0, |r| r.len());
    Tensor::new(vec![m.len(), cols], m.iter().flatten().copied().collect()).unwrap()
}

pub fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Mat {
    (0..r).map(|_| (0..c).map(|_| rng.random_range(-scale..scale)).collect()).collect()
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut worst = 0.0f64;
    for (ra, rb) in a.iter().zip(b) {
        assert_eq!(ra.len(), rb.len());
        for (x, y) in ra.iter().zip(rb) {
            worst = worst.max((x - y).abs());
        }
    }
    worst
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        (1.0 + x.exp()).ln()
    }
}

pub fn linear(x: &Mat, l: &Linear) -> Mat {
    let w = pmat(&l.weight);
    let b = pmat(&l.bias);
    x.iter()
        .map(|row| {
            (0..w[0].len())
                .map(|j| {
                    let mut s = b[0][j];
                    for (i, xi) in row.iter().enumerate() {
                        s += xi * w[i][j];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

pub fn mlp(x: &Mat, p: &MlpParams) -> Mat {
    let (w1, b1, w2, b2) = (pmat(&p.w1), pmat(&p.b1), pmat(&p.w2), pmat(&p.b2));
    x.iter()
        .map(|row| {
            let hidden: Vec<f64> = (0..w1[0].len())
                .map(|j| {
                    let mut s = b1[0][j];
                    for (i, xi) in row.iter().enumerate() {
                        s += xi * w1[i][j];
                    }
                    s.max(0.0)
                })
                .collect();
            (0..w2[0].len())
                .map(|j| {
                    let mut s = b2[0][j];
                    for (i, hi) in hidden.iter().enumerate() {
                        s += hi * w2[i][j];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

pub fn layer_norm(x: &Mat, ln: &LayerNorm) -> Mat {
    let gain = pmat(&ln.gain);
    let shift = pmat(&ln.shift);
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            row.iter().enumerate().map(|(j, v)| (v - mean) / (var + LAYER_NORM_EPS).sqrt() * gain[0][j] + shift[0][j]).collect()
        })
        .collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Gate value and pre-sigmoid logit per key.
pub struct OracleGate {
    pub g: Vec<f64>,
    pub logits: Vec<f64>,
}

pub fn gate(seeds: &Mat, tokens: &Mat) -> OracleGate {
    let logits: Vec<f64> = seeds
        .iter()
        .map(|s| tokens.iter().map(|t| s.iter().zip(t).map(|(a, b)| a * b).sum::<f64>()).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    OracleGate { g: logits.iter().map(|&l| sigmoid(l)).collect(), logits }
}

/// Returns the projected output and one attention map per head.
/// `bias[h][k][n]`.
pub fn attention(p: &Attention, queries: &Mat, keys: &Mat, values: &Mat, bias: Option<&Vec<Mat>>, gate: Option<&OracleGate>, wiring: GateWiring) -> (Mat, Vec<Mat>) {
    let q = linear(queries, &p.wq);
    let k = linear(keys, &p.wk);
    let v = linear(values, &p.wv);
    let d = q[0].len();
    let h = p.heads;
    let dh = d / h;
    let mut merged = vec![vec![0.0; d]; q.len()];
    let mut maps = Vec::new();
    for head in 0..h {
        let mut map = Vec::new();
        for (qi, qrow) in q.iter().enumerate() {
            let mut logits = Vec::new();
            for (ni, krow) in k.iter().enumerate() {
                let mut s = 0.0;
                for c in head * dh..(head + 1) * dh {
                    s += qrow[c] * krow[c];
                }
                s /= (dh as f64).sqrt();
                let e = bias.map_or(0.0, |b| b[head][qi][ni]);
                let l = match (wiring, gate) {
                    (GateWiring::None, _) | (_, None) => s + e,
                    (GateWiring::AdditiveBias, Some(gv)) => s + e + gv.logits[ni],
                    (GateWiring::GateOnPe, Some(gv)) => s + gv.g[ni] * e,
                    (GateWiring::GateOnAll, Some(gv)) => gv.g[ni] * (s + e),
                };
                logits.push(l);
            }
            let a = softmax(&logits);
            for c in head * dh..(head + 1) * dh {
                merged[qi][c] = a.iter().zip(&v).map(|(w, vrow)| w * vrow[c]).sum();
            }
            map.push(a);
        }
        maps.push(map);
    }
    (linear(&merged, &p.wo), maps)
}

fn squash(x: f64, cfg: &PosEncConfig) -> f64 {
    match cfg.f_kind {
        FKind::Identity => x,
        FKind::SignedLog => x.signum() * (x.abs() / cfg.f_scale).ln_1p(),
    }
}

/// `E[h][k][n]` for boxes × points.
pub fn pe_bias(enc: &PosEncoder, points: &[Point3], boxes: &[Box3]) -> Vec<Mat> {
    let h = enc.cfg.heads;
    let mut out = vec![vec![vec![0.0; points.len()]; boxes.len()]; h];
    for (ki, b) in boxes.iter().enumerate() {
        for (ni, p) in points.iter().enumerate() {
            let vecs: Vec<[f64; 3]> = match enc.cfg.scheme {
                Scheme::BoxSurface => vec![box_surface_offset(p, b).unwrap()],
                Scheme::Center => vec![center_offset(p, b)],
                Scheme::Vertex => vertex_offsets(p, b).to_vec(),
            };
            for (c, v) in vecs.iter().enumerate() {
                let x = vec![v.iter().map(|&d| squash(d, &enc.cfg)).collect::<Vec<f64>>()];
                let y = mlp(&x, &enc.mlps[c]);
                for (head, slot) in out.iter_mut().enumerate() {
                    slot[ki][ni] += y[0][head];
                }
            }
        }
    }
    out
}

pub struct OracleBranch {
    pub fused: Mat,
    pub maps: Vec<Mat>,
}

fn branch(b: &BranchParams, hq: &Mat, text: Option<&Mat>, seeds: &Mat, xyz: &[Point3], boxes: &[Box3]) -> OracleBranch {
    let bias = b.posenc.as_ref().map(|enc| pe_bias(enc, xyz, boxes));
    let text = text.filter(|t| !t.is_empty());
    let gv = match text {
        Some(t) if b.wiring != GateWiring::None => Some(gate(seeds, t)),
        _ => None,
    };
    let wiring = if gv.is_some() { b.wiring } else { GateWiring::None };
    let (vis, maps) = attention(&b.visual_attn, hq, seeds, seeds, bias.as_ref(), gv.as_ref(), wiring);
    let sum = match text {
        Some(t) => add(&attention(&b.text_attn, hq, t, t, None, None, GateWiring::None).0, &vis),
        None => vis,
    };
    OracleBranch { fused: layer_norm(&sum, &b.fuse_norm), maps }
}

pub struct OracleLayer {
    pub features: Mat,
    pub boxes: Vec<[f64; 6]>,
    pub target: OracleBranch,
    pub surround: Option<OracleBranch>,
}

/// One decoder layer (parallel when `p.surround` is set, else serial).
pub fn decoder_layer(p: &DecoderLayerParams, x: &Mat, boxes: &[Box3], seeds: &Mat, xyz: &[Point3], t_m: &Mat, t_s: &Mat) -> OracleLayer {
    let sa_in = layer_norm(x, &p.sa_norm);
    let sa = attention(&p.self_attn, &sa_in, &sa_in, &sa_in, None, None, GateWiring::None).0;
    let x1 = add(x, &sa);
    let hq = layer_norm(&x1, &p.query_norm);
    let (target, surround) = match &p.surround {
        Some(sb) => (branch(&p.target, &hq, Some(t_m), seeds, xyz, boxes), Some(branch(sb, &hq, Some(t_s), seeds, xyz, boxes))),
        None => {
            let all: Mat = t_m.iter().chain(t_s).cloned().collect();
            (branch(&p.target, &hq, Some(&all), seeds, xyz, boxes), None)
        }
    };
    let fused = match &surround {
        Some(s) => add(&target.fused, &s.fused),
        None => target.fused.clone(),
    };
    let x2 = add(&x1, &fused);
    let x3 = add(&x2, &mlp(&layer_norm(&x2, &p.ffn_norm), &p.ffn));
    let raw = mlp(&x3, &p.box_head.mlp);
    let out_boxes = raw
        .iter()
        .zip(boxes)
        .map(|(r, b)| [b.center[0] + r[0], b.center[1] + r[1], b.center[2] + r[2], softplus(r[3]) + SIZE_FLOOR, softplus(r[4]) + SIZE_FLOOR, softplus(r[5]) + SIZE_FLOOR])
        .collect();
    OracleLayer { features: x3, boxes: out_boxes, target, surround }
}

/// Random inputs for one decoder layer.
#[derive(Clone)]
pub struct LayerFixture {
    pub params: DecoderLayerParams,
    pub queries: Mat,
    pub boxes: Vec<Box3>,
    pub seeds: Mat,
    pub xyz: Vec<Point3>,
    pub t_m: Mat,
    pub t_s: Mat,
}

#[derive(Clone, Copy, Debug)]
pub struct FixtureShape {
    pub k: usize,
    pub n: usize,
    pub l_m: usize,
    pub l_s: usize,
    pub d: usize,
    pub h: usize,
}

pub const GRAD_SHAPE: FixtureShape = FixtureShape { k: 4, n: 8, l_m: 2, l_s: 3, d: 16, h: 2 };

pub fn random_box(rng: &mut ChaCha8Rng) -> Box3 {
    let c = [0, 1, 2].map(|_| rng.random_range(-2.0..2.0));
    let s = [0, 1, 2].map(|_| rng.random_range(0.2..2.0));
    Box3::new(c, s).unwrap()
}

pub fn random_point(rng: &mut ChaCha8Rng, extent: f64) -> Point3 {
    Point3::new(rng.random_range(-extent..extent), rng.random_range(-extent..extent), rng.random_range(-extent..extent))
}

pub fn layer_fixture(seed: u64, s: FixtureShape, parallel: bool, scheme: Scheme, target_wiring: GateWiring, surround_wiring: GateWiring) -> LayerFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pe = Some(PosEncConfig::new(scheme, s.h, 8));
    let spec = LayerSpec { dim: s.d, heads: s.h, target_pe: pe, target_wiring, surround_pe: pe, surround_wiring, parallel };
    let params = DecoderLayerParams::new(&spec, &mut rng).unwrap();
    LayerFixture {
        params,
        queries: rand_mat(&mut rng, s.k, s.d, 1.0),
        boxes: (0..s.k).map(|_| random_box(&mut rng)).collect(),
        seeds: rand_mat(&mut rng, s.n, s.d, 0.5),
        xyz: (0..s.n).map(|_| random_point(&mut rng, 3.0)).collect(),
        t_m: rand_mat(&mut rng, s.l_m, s.d, 0.5),
        t_s: rand_mat(&mut rng, s.l_s, s.d, 0.5),
    }
}

/// Checks a `[H, K, N]` tensor against per-head oracle maps.
pub fn maps_diff(t: &Tensor, maps: &[Mat]) -> f64 {
    let (k, n) = (t.shape()[1], t.shape()[2]);
    let mut worst = 0.0f64;
    for (h, m) in maps.iter().enumerate() {
        for i in 0..k {
            for j in 0..n {
                worst = worst.max((t.data()[(h * k + i) * n + j] - m[i][j]).abs());
            }
        }
    }
    worst
}

pub struct LibraryLayer {
    pub features: Mat,
    pub boxes: Mat,
    pub trace: dualground_core::decoder::DecoderTrace,
}

/// Runs the library layer on a fixture; `with_surround = false` passes no
/// surrounding tokens.
pub fn run_layer(fx: &LayerFixture, with_surround: bool) -> LibraryLayer {
    use dualground_core::decoder::{decoder_layer, serial_layer, DecoderInputs, DecoderTrace, QuerySet};
    use dualground_core::numerics::Graph;
    let mut g = Graph::new();
    let features = g.input(to_tensor(&fx.queries)).unwrap();
    let box_rows: Mat = fx.boxes.iter().map(|b| b.center.iter().chain(&b.size).copied().collect()).collect();
    let box_var = g.input(to_tensor(&box_rows)).unwrap();
    let q = QuerySet { features, boxes: fx.boxes.clone(), box_var, layer_index: 0 };
    let seeds = g.input(to_tensor(&fx.seeds)).unwrap();
    let t_m = g.input(to_tensor(&fx.t_m)).unwrap();
    let t_s = if with_surround { Some(g.input(to_tensor(&fx.t_s)).unwrap()) } else { None };
    let inputs = DecoderInputs { seeds, seed_xyz: &fx.xyz, target_tokens: t_m, surround_tokens: t_s };
    let mut trace = DecoderTrace::default();
    let out = if fx.params.is_parallel() {
        decoder_layer(&mut g, &q, &inputs, &fx.params, Some(&mut trace)).unwrap()
    } else {
        serial_layer(&mut g, &q, &inputs, &fx.params, Some(&mut trace)).unwrap()
    };
    LibraryLayer { features: mat(g.value(out.features)), boxes: mat(g.value(out.box_var)), trace }
}
