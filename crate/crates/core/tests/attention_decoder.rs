mod common;

use common::{layer_fixture, mat, max_abs_diff, maps_diff, rand_mat, run_layer, to_tensor, FixtureShape, Mat, GRAD_SHAPE};
use dualground_core::attention::{confidence_gate, gated_cross_attention, token_confidence, Attention, GateVector, GateWiring};
use dualground_core::geometry::{offset_field, Box3, Point3, Scheme};
use dualground_core::numerics::{Graph, Tensor};
use dualground_core::posenc::{pe_bias, PosEncConfig, PosEncoder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct AttnCase {
    attn: Attention,
    queries: Mat,
    seeds: Mat,
    tokens: Mat,
    bias: Vec<Mat>,
}

fn attn_case(seed: u64, k: usize, n: usize, d: usize, h: usize) -> AttnCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    AttnCase {
        attn: Attention::new(d, h, &mut rng).unwrap(),
        queries: rand_mat(&mut rng, k, d, 1.0),
        seeds: rand_mat(&mut rng, n, d, 1.0),
        tokens: rand_mat(&mut rng, 3, d, 1.0),
        bias: (0..h).map(|_| rand_mat(&mut rng, k, n, 2.0)).collect(),
    }
}

/// Library forward for one case; returns output and `[H, K, N]` maps.
fn library_attention(c: &AttnCase, wiring: GateWiring) -> (Mat, Tensor) {
    let mut g = Graph::new();
    let q = g.input(to_tensor(&c.queries)).unwrap();
    let v = g.input(to_tensor(&c.seeds)).unwrap();
    let t = g.input(to_tensor(&c.tokens)).unwrap();
    let flat: Mat = c.bias.iter().flatten().cloned().collect();
    let bias_var = g.input(to_tensor(&flat)).unwrap();
    let bias = dualground_core::posenc::AttnBias { var: bias_var, heads: c.bias.len(), queries: c.queries.len(), keys: c.seeds.len() };
    let conf = token_confidence(&mut g, v, t).unwrap();
    let gate = confidence_gate(&mut g, conf).unwrap();
    let out = gated_cross_attention(&mut g, &c.attn, q, v, v, Some(&bias), Some(&gate), wiring).unwrap();
    (mat(g.value(out.out)), out.maps(&g))
}

#[test]
fn attention_matches_scalar_formula_for_each_wiring() {
    for seed in 0..10 {
        let c = attn_case(seed, 2, 3, 4, if seed % 2 == 0 { 1 } else { 2 });
        let gate = common::gate(&c.seeds, &c.tokens);
        for w in GateWiring::ALL {
            let (out, maps) = library_attention(&c, w);
            let (want, want_maps) = common::attention(&c.attn, &c.queries, &c.seeds, &c.seeds, Some(&c.bias), Some(&gate), w);
            assert!(max_abs_diff(&out, &want) < 1e-12, "seed {seed} {w:?}");
            assert!(maps_diff(&maps, &want_maps) < 1e-12);
        }
    }
}

#[test]
fn small_gate_on_one_key_reduces_its_mass() {
    let c = attn_case(7, 2, 3, 4, 1);
    let mut g = Graph::new();
    let q = g.input(to_tensor(&c.queries)).unwrap();
    let v = g.input(to_tensor(&c.seeds)).unwrap();
    // large positive bias everywhere so gating shrinks logits
    let bias_var = g.input(Tensor::full(&[2, 3], 5.0)).unwrap();
    let bias = dualground_core::posenc::AttnBias { var: bias_var, heads: 1, queries: 2, keys: 3 };
    let gv = g.input(Tensor::new(vec![1, 3], vec![1.0, 0.01, 1.0]).unwrap()).unwrap();
    let gate = GateVector { g: gv, logits: gv };
    let gated = gated_cross_attention(&mut g, &c.attn, q, v, v, Some(&bias), Some(&gate), GateWiring::GateOnAll).unwrap().maps(&g);
    let plain = gated_cross_attention(&mut g, &c.attn, q, v, v, Some(&bias), None, GateWiring::None).unwrap().maps(&g);
    for row in 0..2 {
        assert!(gated.data()[row * 3 + 1] < plain.data()[row * 3 + 1]);
    }
}

fn kl_to_uniform(maps: &Tensor) -> f64 {
    let n = *maps.shape().last().unwrap();
    maps.data().iter().filter(|&&a| a > 0.0).map(|&a| a * (a * n as f64).ln()).sum()
}

#[test]
fn shrinking_the_gate_flattens_attention() {
    let c = attn_case(8, 3, 6, 8, 2);
    let mut prev = f64::INFINITY;
    for scale in [1.0, 0.5, 0.25, 0.1, 0.0] {
        let mut g = Graph::new();
        let q = g.input(to_tensor(&c.queries)).unwrap();
        let v = g.input(to_tensor(&c.seeds)).unwrap();
        let gv = g.input(Tensor::full(&[1, 6], scale)).unwrap();
        let gate = GateVector { g: gv, logits: gv };
        let maps = gated_cross_attention(&mut g, &c.attn, q, v, v, None, Some(&gate), GateWiring::GateOnAll).unwrap().maps(&g);
        let kl = kl_to_uniform(&maps);
        assert!(kl <= prev + 1e-15, "scale {scale}: {kl} > {prev}");
        prev = kl;
    }
    assert!(prev.abs() < 1e-12);
}

#[test]
fn decoder_layer_matches_scalar_oracle() {
    let shape = FixtureShape { k: 2, n: 5, l_m: 2, l_s: 2, d: 4, h: 2 };
    for seed in 0..10 {
        let scheme = Scheme::ALL[seed as usize % 3];
        let fx = layer_fixture(100 + seed, shape, true, scheme, GateWiring::ALL[seed as usize % 4], GateWiring::GateOnAll);
        let lib = run_layer(&fx, true);
        let want = common::decoder_layer(&fx.params, &fx.queries, &fx.boxes, &fx.seeds, &fx.xyz, &fx.t_m, &fx.t_s);
        assert!(max_abs_diff(&lib.features, &want.features) < 1e-10, "seed {seed}");
        let want_boxes: Mat = want.boxes.iter().map(|b| b.to_vec()).collect();
        assert!(max_abs_diff(&lib.boxes, &want_boxes) < 1e-10);
        let tr = &lib.trace.layers[0];
        assert!(maps_diff(&tr.target.visual_attn, &want.target.maps) < 1e-10);
        assert!(maps_diff(&tr.surround.as_ref().unwrap().visual_attn, &want.surround.as_ref().unwrap().maps) < 1e-10);
    }
}

#[test]
fn serial_layer_matches_scalar_oracle() {
    let shape = FixtureShape { k: 3, n: 4, l_m: 1, l_s: 2, d: 4, h: 1 };
    for seed in 0..5 {
        let fx = layer_fixture(200 + seed, shape, false, Scheme::BoxSurface, GateWiring::GateOnAll, GateWiring::None);
        let lib = run_layer(&fx, true);
        let want = common::decoder_layer(&fx.params, &fx.queries, &fx.boxes, &fx.seeds, &fx.xyz, &fx.t_m, &fx.t_s);
        assert!(max_abs_diff(&lib.features, &want.features) < 1e-10);
    }
}

#[test]
fn branches_read_only_their_own_tokens() {
    let mut fx = layer_fixture(300, GRAD_SHAPE, true, Scheme::BoxSurface, GateWiring::None, GateWiring::GateOnAll);
    let base = run_layer(&fx, true).trace.layers.remove(0);
    fx.t_s[0][0] += 0.7;
    let moved_s = run_layer(&fx, true).trace.layers.remove(0);
    assert_eq!(base.target.fused, moved_s.target.fused);
    assert_ne!(base.surround.as_ref().unwrap().fused, moved_s.surround.as_ref().unwrap().fused);
    fx.t_s[0][0] -= 0.7;
    fx.t_m[1][2] += 0.7;
    let moved_m = run_layer(&fx, true).trace.layers.remove(0);
    assert_eq!(base.surround.as_ref().unwrap().fused, moved_m.surround.as_ref().unwrap().fused);
    assert_ne!(base.target.fused, moved_m.target.fused);
}

#[test]
fn bias_follows_incoming_boxes() {
    let mut fx = layer_fixture(301, GRAD_SHAPE, true, Scheme::BoxSurface, GateWiring::None, GateWiring::GateOnAll);
    let check = |fx: &common::LayerFixture| {
        let tr = run_layer(fx, true).trace.layers.remove(0);
        let enc = fx.params.target.posenc.as_ref().unwrap();
        let want: Mat = common::pe_bias(enc, &fx.xyz, &fx.boxes).into_iter().flatten().collect();
        assert!(max_abs_diff(&mat(tr.target.bias.as_ref().unwrap()), &want) < 1e-12);
        tr
    };
    let before = check(&fx);
    fx.boxes[1] = Box3::new([5.0, -4.0, 1.0], [0.5, 0.7, 0.9]).unwrap();
    let after = check(&fx);
    assert_ne!(before.target.bias, after.target.bias);
}

#[test]
fn traced_attention_rows_sum_to_one() {
    let fx = layer_fixture(302, GRAD_SHAPE, true, Scheme::Vertex, GateWiring::GateOnPe, GateWiring::AdditiveBias);
    let tr = run_layer(&fx, true).trace;
    for b in [&tr.layers[0].target, tr.layers[0].surround.as_ref().unwrap()] {
        let n = *b.visual_attn.shape().last().unwrap();
        for row in b.visual_attn.data().chunks(n) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let gate_ok = b.gate.as_ref().is_none_or(|g| g.data().iter().all(|&x| x > 0.0 && x < 1.0));
        assert!(gate_ok);
    }
}

#[test]
fn silenced_surround_without_tokens_equals_serial() {
    let mut par = layer_fixture(303, GRAD_SHAPE, true, Scheme::BoxSurface, GateWiring::None, GateWiring::GateOnAll);
    par.params.surround.as_mut().unwrap().visual_attn.silence();
    let mut ser = par.clone();
    ser.params.surround = None;
    let a = run_layer(&par, false);
    let b = run_layer(&ser, false);
    assert!(max_abs_diff(&a.features, &b.features) < 1e-14);
    assert!(max_abs_diff(&a.boxes, &b.boxes) < 1e-14);
}

#[test]
fn gate_is_nondecreasing_in_each_entry() {
    let mut rng = ChaCha8Rng::seed_from_u64(304);
    for _ in 0..200 {
        let conf = rand_mat(&mut rng, 4, 3, 3.0);
        let (r, c) = (rng.random_range(0..4), rng.random_range(0..3));
        let mut bumped = conf.clone();
        bumped[r][c] += rng.random_range(0.0..2.0);
        let gate_of = |m: &Mat| {
            let mut g = Graph::new();
            let v = g.input(to_tensor(m)).unwrap();
            let gv = confidence_gate(&mut g, v).unwrap();
            g.value(gv.g).data().to_vec()
        };
        let (a, b) = (gate_of(&conf), gate_of(&bumped));
        assert!(b[r] >= a[r]);
        for i in (0..4).filter(|&i| i != r) {
            assert_eq!(a[i], b[i]);
        }
    }
}

#[test]
fn posenc_output_depends_on_scheme() {
    let mut rng = ChaCha8Rng::seed_from_u64(305);
    let pts = vec![Point3::new(0.3, 0.1, 0.0), Point3::new(2.0, 0.0, 0.0)];
    let boxes = vec![Box3::new([0.0; 3], [1.0; 3]).unwrap()];
    let mut seen = Vec::new();
    for scheme in Scheme::ALL {
        let enc: PosEncoder = PosEncoder::new(PosEncConfig::new(scheme, 1, 4), &mut rng).unwrap();
        let mut g = Graph::new();
        let b = pe_bias(&mut g, &offset_field(&pts, &boxes, scheme).unwrap(), &enc).unwrap();
        assert_eq!(g.dims(b.var), (1, 2));
        seen.push(g.value(b.var).clone());
    }
    assert_ne!(seen[0], seen[1]);
}
