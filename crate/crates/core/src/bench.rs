//! Latency and buffer-footprint comparison of the three position-encoding
//! schemes on one visual cross-attention forward, in 32-bit on one pinned
//! thread.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{confidence_gate, gated_cross_attention, token_confidence, Attention, AttnOutput, GateWiring};
use crate::error::{Error, Result};
use crate::geometry::{offset_field, Box3, Point3, Scheme};
use crate::numerics::{Graph, Tensor};
use crate::posenc::{pe_bias, pe_cost_model, PosEncConfig, PosEncoder};

pub const WARMUP_REPS: usize = 5;
pub const MIN_REPS: usize = 20;
/// Hidden width of the position-encoding perceptron.
pub const PE_HIDDEN: usize = 32;
/// Surrounding-token count used to build the gate.
pub const GATE_TOKENS: usize = 8;
const INPUT_SEED: u64 = 20240917;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchShape {
    pub queries: usize,
    pub seeds: usize,
    pub dim: usize,
    pub heads: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub scheme: Scheme,
    pub shape: BenchShape,
    pub warmup: usize,
    pub reps: usize,
    pub median_ms: f64,
    pub p10_ms: f64,
    pub p90_ms: f64,
    /// Offset scalars × 4 bytes.
    pub offset_bytes: usize,
    /// Offsets plus per-perceptron bias outputs, × 4 bytes.
    pub buffer_bytes: usize,
    /// Bytes held by the tape after one forward.
    pub tape_bytes: usize,
}

/// Fixed random inputs shared by every scheme.
pub struct BenchInputs {
    pub shape: BenchShape,
    pub seed_xyz: Vec<Point3>,
    pub boxes: Vec<Box3>,
    pub queries: Tensor<f32>,
    pub seeds: Tensor<f32>,
    pub surround: Tensor<f32>,
    pub attn: Attention<f32>,
}

fn random_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Tensor<f32> {
    Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-scale..scale) as f32).collect()).expect("r·c")
}

impl BenchInputs {
    pub fn new(shape: BenchShape) -> Result<Self> {
        let BenchShape { queries: k, seeds: n, dim: d, heads: h } = shape;
        if k == 0 || n == 0 || d == 0 || h == 0 {
            return Err(Error::InvalidArgument("benchmark shapes must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(INPUT_SEED);
        let seed_xyz = (0..n).map(|_| Point3::new(rng.random_range(0.0..8.0), rng.random_range(0.0..8.0), rng.random_range(0.0..3.0))).collect();
        let boxes = (0..k)
            .map(|_| {
                let size = [0, 1, 2].map(|_| rng.random_range(0.3..2.0));
                Box3::new([rng.random_range(1.0..7.0), rng.random_range(1.0..7.0), size[2] / 2.0], size)
            })
            .collect::<Result<_>>()?;
        let attn = Attention::new(d, h, &mut rng)?;
        Ok(Self {
            shape,
            seed_xyz,
            boxes,
            queries: random_tensor(&mut rng, k, d, 1.0),
            seeds: random_tensor(&mut rng, n, d, 1.0),
            surround: random_tensor(&mut rng, GATE_TOKENS, d, 0.2),
            attn,
        })
    }

    pub fn encoder(&self, scheme: Scheme) -> Result<PosEncoder<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(INPUT_SEED ^ scheme.corners() as u64);
        PosEncoder::new(PosEncConfig::new(scheme, self.shape.heads, PE_HIDDEN), &mut rng)
    }
}

/// The measured work: offsets, bias, gate, and one gated cross-attention.
pub fn bench_forward(g: &mut Graph<f32>, inputs: &BenchInputs, enc: &PosEncoder<f32>) -> Result<AttnOutput> {
    let field = offset_field::<f32>(&inputs.seed_xyz, &inputs.boxes, enc.cfg.scheme)?;
    let bias = pe_bias(g, &field, enc)?;
    let q = g.input(inputs.queries.clone())?;
    let v = g.input(inputs.seeds.clone())?;
    let ts = g.input(inputs.surround.clone())?;
    let conf = token_confidence(g, v, ts)?;
    let gate = confidence_gate(g, conf)?;
    gated_cross_attention(g, &inputs.attn, q, v, v, Some(&bias), Some(&gate), GateWiring::GateOnAll)
}

static RUNNING: AtomicBool = AtomicBool::new(false);

/// Held while measuring; a second concurrent measurement is refused.
struct RunGuard;

impl RunGuard {
    fn acquire() -> Result<Self> {
        RUNNING
            .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
            .map(|_| RunGuard)
            .map_err(|_| Error::InvalidArgument("another benchmark is already measuring".into()))
    }
}

impl Drop for RunGuard {
    fn drop(&mut self) {
        RUNNING.store(false, Ordering::Release);
    }
}

/// Pins the calling thread to the first CPU it may run on and restores the
/// previous mask on drop.
struct Pin {
    saved: Option<libc::cpu_set_t>,
}

impl Pin {
    fn acquire() -> Self {
        // SAFETY: cpu_set_t is plain data; the calls only read/write the
        // provided set for the calling thread (pid 0).
        unsafe {
            let mut current: libc::cpu_set_t = std::mem::zeroed();
            if libc::sched_getaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &mut current) != 0 {
                return Self { saved: None };
            }
            let Some(cpu) = (0..libc::CPU_SETSIZE as usize).find(|&c| libc::CPU_ISSET(c, &current)) else {
                return Self { saved: None };
            };
            let mut one: libc::cpu_set_t = std::mem::zeroed();
            libc::CPU_SET(cpu, &mut one);
            if libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &one) != 0 {
                return Self { saved: None };
            }
            Self { saved: Some(current) }
        }
    }
}

impl Drop for Pin {
    fn drop(&mut self) {
        if let Some(set) = self.saved {
            // SAFETY: restores the mask read in `acquire`.
            unsafe {
                libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set);
            }
        }
    }
}

/// Tape buffers here run to tens of megabytes, which glibc would map fresh on
/// every rep; the page faults then dominate and swing the timings. Serving
/// everything from a heap that is never trimmed keeps reps comparable.
fn keep_heap() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        static ONCE: std::sync::Once = std::sync::Once::new();
        // SAFETY: mallopt only adjusts allocator tunables.
        ONCE.call_once(|| unsafe {
            libc::mallopt(libc::M_MMAP_MAX, 0);
            libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
        });
    }
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn bench_pe(scheme: Scheme, shape: BenchShape, reps: usize) -> Result<BenchResult> {
    let inputs = BenchInputs::new(shape)?;
    bench_pe_with(&inputs, scheme, reps)
}

pub fn bench_pe_with(inputs: &BenchInputs, scheme: Scheme, reps: usize) -> Result<BenchResult> {
    Ok(bench_schemes(inputs, &[scheme], reps)?.remove(0))
}

/// Times several schemes with their reps interleaved round-robin (the
/// starting scheme rotates each round), so slow drift in machine speed hits
/// every scheme alike instead of whichever happened to run last.
pub fn bench_schemes(inputs: &BenchInputs, schemes: &[Scheme], reps: usize) -> Result<Vec<BenchResult>> {
    if reps < MIN_REPS {
        return Err(Error::InvalidArgument(format!("need at least {MIN_REPS} measured reps, got {reps}")));
    }
    if schemes.is_empty() {
        return Err(Error::InvalidArgument("no schemes to time".into()));
    }
    let _guard = RunGuard::acquire()?;
    let _pin = Pin::acquire();
    keep_heap();
    let encoders = schemes.iter().map(|&s| inputs.encoder(s)).collect::<Result<Vec<_>>>()?;
    let mut tape_bytes = vec![0; schemes.len()];
    for (enc, bytes) in encoders.iter().zip(&mut tape_bytes) {
        for _ in 0..WARMUP_REPS {
            let mut g = Graph::<f32>::new();
            bench_forward(&mut g, inputs, enc)?;
            *bytes = g.value_bytes();
        }
    }
    let mut times = vec![Vec::with_capacity(reps); schemes.len()];
    for rep in 0..reps {
        for i in 0..schemes.len() {
            let j = (rep + i) % schemes.len();
            let mut g = Graph::<f32>::new();
            let t = Instant::now();
            let out = bench_forward(&mut g, inputs, &encoders[j])?;
            std::hint::black_box(g.value(out.out));
            times[j].push(t.elapsed().as_secs_f64() * 1e3);
        }
    }
    let s = inputs.shape;
    Ok(schemes
        .iter()
        .zip(times)
        .zip(tape_bytes)
        .map(|((&scheme, mut t), tape_bytes)| {
            t.sort_by(f64::total_cmp);
            let cost = pe_cost_model(scheme, s.queries, s.seeds, PE_HIDDEN, s.heads);
            BenchResult {
                scheme,
                shape: s,
                warmup: WARMUP_REPS,
                reps,
                median_ms: quantile(&t, 0.5),
                p10_ms: quantile(&t, 0.1),
                p90_ms: quantile(&t, 0.9),
                offset_bytes: cost.offset_scalars * 4,
                buffer_bytes: cost.bias_buffer_scalars * 4,
                tape_bytes,
            }
        })
        .collect())
}

/// Aligned text table and CSV with ratios against the box-surface row (or
/// the first row if box-surface is absent).
pub fn compare_report(results: &[BenchResult]) -> Result<(String, String)> {
    if results.len() < 2 {
        return Err(Error::InvalidArgument("comparison needs at least two results".into()));
    }
    let base = results.iter().find(|r| r.scheme == Scheme::BoxSurface).unwrap_or(&results[0]);
    let s = base.shape;
    let mut text = String::new();
    let _ = writeln!(text, "# position-encoding cost, K={} N={} D={} H={}, f32, one pinned thread", s.queries, s.seeds, s.dim, s.heads);
    let _ = writeln!(text, "# bytes count PE-attributable buffers only (offsets and per-perceptron bias outputs), not the whole model");
    let _ = writeln!(
        text,
        "{:<12} {:>11} {:>10} {:>10} {:>13} {:>13} {:>13} {:>9} {:>9}",
        "scheme", "median_ms", "p10_ms", "p90_ms", "offset_bytes", "buffer_bytes", "tape_bytes", "lat_x", "buf_x"
    );
    let mut csv = String::from("scheme,median_ms,p10_ms,p90_ms,offset_bytes,buffer_bytes,tape_bytes,latency_ratio,buffer_ratio\n");
    for r in results {
        let lat = r.median_ms / base.median_ms;
        let buf = r.buffer_bytes as f64 / base.buffer_bytes as f64;
        let _ = writeln!(
            text,
            "{:<12} {:>11.3} {:>10.3} {:>10.3} {:>13} {:>13} {:>13} {:>9.3} {:>9.3}",
            r.scheme.name(),
            r.median_ms,
            r.p10_ms,
            r.p90_ms,
            r.offset_bytes,
            r.buffer_bytes,
            r.tape_bytes,
            lat,
            buf
        );
        let _ = writeln!(csv, "{},{},{},{},{},{},{},{},{}", r.scheme.name(), r.median_ms, r.p10_ms, r.p90_ms, r.offset_bytes, r.buffer_bytes, r.tape_bytes, lat, buf);
    }
    Ok((text, csv))
}

#[cfg(test)]
mod tests {
    use super::*;

    const TINY: BenchShape = BenchShape { queries: 4, seeds: 16, dim: 8, heads: 2 };
    static SERIAL: std::sync::Mutex<()> = std::sync::Mutex::new(());

    #[test]
    fn quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&v, 0.5), 3.0);
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert!((quantile(&v, 0.1) - 1.4).abs() < 1e-12);
    }

    #[test]
    fn result_invariants_and_report() {
        let _s = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
        let a = bench_pe(Scheme::BoxSurface, TINY, 20).unwrap();
        let b = bench_pe(Scheme::Vertex, TINY, 20).unwrap();
        for r in [&a, &b] {
            assert!(r.p10_ms <= r.median_ms && r.median_ms <= r.p90_ms);
            assert_eq!(r.reps, 20);
        }
        assert!(bench_pe(Scheme::Center, TINY, 5).is_err());
        assert!(compare_report(std::slice::from_ref(&a)).is_err());
        let (text, csv) = compare_report(&[a, b]).unwrap();
        assert!(text.contains("vertex"));
        let base_line = csv.lines().nth(1).unwrap();
        assert!(base_line.starts_with("box_surface,") && base_line.ends_with(",1,1"));
    }

    #[test]
    fn interleaved_results_keep_scheme_order() {
        let _s = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
        let inputs = BenchInputs::new(TINY).unwrap();
        let order = [Scheme::Vertex, Scheme::BoxSurface];
        let r = bench_schemes(&inputs, &order, 20).unwrap();
        assert_eq!(r.iter().map(|x| x.scheme).collect::<Vec<_>>(), order);
        assert!(r[0].offset_bytes > r[1].offset_bytes);
        assert!(bench_schemes(&inputs, &[], 20).is_err());
    }

    #[test]
    fn concurrent_measurement_refused() {
        let _s = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
        let _held = RunGuard::acquire().unwrap();
        assert!(RunGuard::acquire().is_err());
        assert!(bench_pe(Scheme::Center, TINY, 20).is_err());
    }
}
