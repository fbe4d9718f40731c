use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::save_checkpoint;
use super::config::ModelConfig;
use super::loss::compute_loss;
use super::model::{forward, prepare_sample, GroundingModel, PreparedSample};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Parameterized, Tensor};
use crate::scenegen::{GroundingSample, SceneConfig};
use crate::textsplit::Lexicon;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub l_pos: f64,
    pub l_sem: f64,
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, shapes: &[Vec<usize>]) -> Self {
        let zeros = || shapes.iter().map(|s| Tensor::zeros(s)).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros(), v: zeros() }
    }

    pub fn step(&mut self, model: &mut impl Parameterized, grads: &[Tensor]) -> Result<()> {
        let mut params = model.params_mut();
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::Training(format!("{} params, {} gradients, {} moments", params.len(), grads.len(), self.m.len())));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, gr), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let (b1, b2) = (self.beta1, self.beta2);
            let w = p.value_mut().data_mut();
            for (((w, &gi), mi), vi) in w.iter_mut().zip(gr.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *w -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Loss and parameter gradients for one sample, in `named_params` order.
pub fn sample_gradients(model: &GroundingModel, s: &PreparedSample) -> Result<(StepMetrics, Vec<Tensor>)> {
    let mut g = Graph::new();
    let out = forward(&mut g, model, s, false)?;
    let (parts, _) = compute_loss(&mut g, &out, &s.gt, model.cfg.sem_weight, None)?;
    let grads = g.backward(parts.total)?;
    let per_param = model
        .named_params()
        .iter()
        .map(|(_, p)| grads.param(p).cloned().unwrap_or_else(|| Tensor::zeros(p.value().shape())))
        .collect();
    Ok((StepMetrics { step: 0, loss: g.scalar(parts.total), l_pos: g.scalar(parts.pos), l_sem: g.scalar(parts.sem) }, per_param))
}

pub struct TrainOptions<'a> {
    /// Receives one JSON line per logged step.
    pub metrics: Option<&'a mut dyn Write>,
    /// Written every `checkpoint_every` steps and at the end.
    pub checkpoint: Option<&'a Path>,
}

impl Default for TrainOptions<'_> {
    fn default() -> Self {
        Self { metrics: None, checkpoint: None }
    }
}

pub struct TrainOutcome {
    pub model: GroundingModel,
    pub curve: Vec<StepMetrics>,
}

pub fn prepare_all(data: &[GroundingSample], model: &GroundingModel, scene_cfg: &SceneConfig) -> Result<Vec<PreparedSample>> {
    let lex = Lexicon::standard();
    data.iter().map(|s| prepare_sample(s, model, scene_cfg, &lex)).collect()
}

pub fn train(data: &[GroundingSample], cfg: &ModelConfig, scene_cfg: &SceneConfig, opts: TrainOptions<'_>) -> Result<TrainOutcome> {
    let mut model = GroundingModel::new(cfg)?;
    let prepared = prepare_all(data, &model, scene_cfg)?;
    let curve = train_prepared(&mut model, &prepared, opts)?;
    Ok(TrainOutcome { model, curve })
}

/// Learning rate at `step` of `steps`: half-cosine from `lr` down to
/// `lr · lr_floor`.
pub fn scheduled_lr(cfg: &ModelConfig, step: usize) -> f64 {
    let progress = if cfg.steps > 1 { step as f64 / (cfg.steps - 1) as f64 } else { 0.0 };
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    cfg.lr * (cfg.lr_floor + (1.0 - cfg.lr_floor) * cos)
}

/// Mini-batch Adam over epoch-shuffled samples; the batch gradient is the
/// mean of per-sample gradients summed in batch order, clipped to a global
/// norm of `clip`.
pub fn train_prepared(model: &mut GroundingModel, data: &[PreparedSample], mut opts: TrainOptions<'_>) -> Result<Vec<StepMetrics>> {
    if data.is_empty() {
        return Err(Error::Training("empty dataset".into()));
    }
    let cfg = model.cfg.clone();
    let shapes: Vec<Vec<usize>> = model.named_params().iter().map(|(_, p)| p.value().shape().to_vec()).collect();
    let mut adam = Adam::new(cfg.lr, &shapes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_7a1e);
    let batch = cfg.batch.min(data.len());
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut curve = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut acc: Vec<Tensor> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
        let mut m = StepMetrics { step, loss: 0.0, l_pos: 0.0, l_sem: 0.0 };
        for _ in 0..batch {
            if cursor == order.len() {
                order = (0..data.len()).collect();
                for i in (1..order.len()).rev() {
                    order.swap(i, rng.random_range(0..=i));
                }
                cursor = 0;
            }
            let idx = order[cursor];
            cursor += 1;
            let (sm, grads) = sample_gradients(model, &data[idx]).map_err(|e| Error::Training(format!("step {step}, sample {idx}: {e}")))?;
            m.loss += sm.loss / batch as f64;
            m.l_pos += sm.l_pos / batch as f64;
            m.l_sem += sm.l_sem / batch as f64;
            for (a, gr) in acc.iter_mut().zip(&grads) {
                for (x, y) in a.data_mut().iter_mut().zip(gr.data()) {
                    *x += *y / batch as f64;
                }
            }
        }
        if let Some(bad) = acc.iter().position(|t| !t.is_finite()) {
            let name = model.named_params()[bad].0.clone();
            return Err(Error::Training(format!("step {step}: non-finite gradient for `{name}`")));
        }
        let norm = acc.iter().flat_map(|t| t.data()).map(|x| x * x).sum::<f64>().sqrt();
        if norm > cfg.clip {
            let s = cfg.clip / norm;
            acc.iter_mut().for_each(|t| t.data_mut().iter_mut().for_each(|x| *x *= s));
        }
        adam.lr = scheduled_lr(&cfg, step);
        adam.step(model, &acc)?;

        if let Some(w) = opts.metrics.as_deref_mut() {
            if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps) {
                serde_json::to_writer(&mut *w, &m)?;
                w.write_all(b"\n")?;
            }
        }
        if let Some(path) = opts.checkpoint {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 != cfg.steps {
                save_checkpoint(path, model, step + 1)?;
            }
        }
        curve.push(m);
    }
    if let Some(w) = opts.metrics.as_deref_mut() {
        w.flush()?;
    }
    if let Some(path) = opts.checkpoint {
        save_checkpoint(path, model, cfg.steps)?;
    }
    Ok(curve)
}
