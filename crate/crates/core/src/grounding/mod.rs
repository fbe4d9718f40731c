//! End-to-end grounding model: seed and token encoders, one cross-encoder
//! round, top-K query selection, the decoder stack, per-layer heads, the
//! position + semantic loss, training and accuracy evaluation.

mod checkpoint;
mod config;
mod eval;
mod loss;
mod model;
mod train;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

pub use checkpoint::{checkpoint_json, load_checkpoint, load_checkpoint_str, save_checkpoint};
pub use config::{DecoderKind, ModelConfig, PeChoice, CONFIG_KEYS};
pub use eval::{evaluate, evaluate_prepared, predict, EvalReport, Outcome, SubsetReport};
pub use loss::{assign_query, compute_loss, iou_var, LossParts};
pub use model::{
    cross_encode, encode_text, encode_visual, farthest_point_sample, forward, prepare_sample, prepare_visual, project_head, select_topk, topk_indices, CrossEncoder,
    ForwardOutput, GroundingModel, HeadOutputs, PreparedSample, ProjectionHead, Selection, TextEncoder, VisualEncoder, VisualInput, RAW_FEATURES,
};
pub use train::{prepare_all, sample_gradients, scheduled_lr, train, train_prepared, Adam, StepMetrics, TrainOptions, TrainOutcome};

use crate::decoder::DecoderTrace;
use crate::error::Result;
use crate::numerics::{Graph, Tensor};

/// `[H, K, N]` → `[K, N]` mean over heads.
pub fn head_average(maps: &Tensor) -> Tensor {
    let s = maps.shape();
    let (h, k, n) = (s[0], s[1], s[2]);
    let mut out = vec![0.0; k * n];
    for head in maps.data().chunks(k * n) {
        for (o, v) in out.iter_mut().zip(head) {
            *o += v / h as f64;
        }
    }
    Tensor::new(vec![k, n], out).expect("k·n elements")
}

fn write_csv(path: &Path, m: &Tensor) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    for r in 0..m.rows() {
        let line: Vec<String> = m.row(r).iter().map(|v| format!("{v:.6e}")).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Binary graymap scaled so the largest weight is white.
fn write_pgm(path: &Path, m: &Tensor) -> Result<()> {
    let max = m.data().iter().cloned().fold(0.0, f64::max);
    let mut bytes = format!("P5\n{} {}\n255\n", m.cols(), m.rows()).into_bytes();
    bytes.extend(m.data().iter().map(|v| if max > 0.0 { (v / max * 255.0).round() as u8 } else { 0 }));
    fs::write(path, bytes)?;
    Ok(())
}

/// Writes `layer{l}_{branch}.csv` and `.pgm` for every layer and branch
/// (head-averaged visual attention, rows = queries, cols = seeds).
pub fn write_attention_dump(trace: &DecoderTrace, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (l, layer) in trace.layers.iter().enumerate() {
        let branches = std::iter::once(("target", &layer.target)).chain(layer.surround.as_ref().map(|s| ("surround", s)));
        for (name, b) in branches {
            let avg = head_average(&b.visual_attn);
            for (ext, f) in [("csv", write_csv as fn(&Path, &Tensor) -> Result<()>), ("pgm", write_pgm)] {
                let p = dir.join(format!("layer{}_{name}.{ext}", l + 1));
                f(&p, &avg)?;
                written.push(p);
            }
        }
    }
    Ok(written)
}

/// Runs one sample with tracing on.
pub fn trace_sample(model: &GroundingModel, s: &PreparedSample) -> Result<DecoderTrace> {
    let mut g = Graph::new();
    let out = forward(&mut g, model, s, true)?;
    Ok(out.trace.unwrap_or_default())
}
