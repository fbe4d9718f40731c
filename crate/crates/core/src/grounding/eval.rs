use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::model::{forward, GroundingModel, PreparedSample};
use super::train::prepare_all;
use crate::error::Result;
use crate::geometry::{iou, Box3};
use crate::numerics::Graph;
use crate::scenegen::{GroundingSample, SceneConfig};

/// One evaluated sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub predicted: Box3,
    pub gt: Box3,
    pub target_id: usize,
    pub object_boxes: Vec<(usize, Box3)>,
    pub multiple: bool,
}

impl Outcome {
    pub fn iou(&self) -> f64 {
        iou(&self.predicted, &self.gt)
    }

    /// The scene object the predicted box lands on: highest IoU, or the
    /// nearest center when it overlaps nothing.
    pub fn selected_object(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (id, b) in &self.object_boxes {
            let v = iou(&self.predicted, b);
            if v > 0.0 && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((*id, v));
            }
        }
        if let Some((id, _)) = best {
            return Some(id);
        }
        let c = self.predicted.center_point();
        self.object_boxes
            .iter()
            .map(|(id, b)| (*id, b.center_point().dist(&c)))
            .fold(None, |acc: Option<(usize, f64)>, (id, d)| match acc {
                Some((_, bd)) if bd <= d => acc,
                _ => Some((id, d)),
            })
            .map(|(id, _)| id)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SubsetReport {
    pub n: usize,
    pub acc_at_25: f64,
    pub acc_at_50: f64,
    pub top1_selection: f64,
}

impl SubsetReport {
    fn from_outcomes<'a>(items: impl Iterator<Item = &'a Outcome>) -> Self {
        let (mut n, mut a25, mut a50, mut top) = (0usize, 0usize, 0usize, 0usize);
        for o in items {
            let v = o.iou();
            n += 1;
            a25 += usize::from(v > 0.25);
            a50 += usize::from(v > 0.5);
            top += usize::from(o.selected_object() == Some(o.target_id));
        }
        let frac = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
        Self { n, acc_at_25: frac(a25), acc_at_50: frac(a50), top1_selection: frac(top) }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: SubsetReport,
    pub unique: SubsetReport,
    pub multiple: SubsetReport,
}

impl EvalReport {
    pub fn from_outcomes(items: &[Outcome]) -> Self {
        Self {
            overall: SubsetReport::from_outcomes(items.iter()),
            unique: SubsetReport::from_outcomes(items.iter().filter(|o| !o.multiple)),
            multiple: SubsetReport::from_outcomes(items.iter().filter(|o| o.multiple)),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:>6} {:>9} {:>9} {:>9}", "subset", "n", "acc@0.25", "acc@0.5", "top1");
        for (name, r) in [("overall", &self.overall), ("unique", &self.unique), ("multiple", &self.multiple)] {
            let _ = writeln!(s, "{:<10} {:>6} {:>9.4} {:>9.4} {:>9.4}", name, r.n, r.acc_at_25, r.acc_at_50, r.top1_selection);
        }
        s
    }
}

/// Index of the highest final-layer logit (lower index on ties) and its box.
pub fn predict(model: &GroundingModel, s: &PreparedSample) -> Result<(usize, Box3)> {
    let mut g = Graph::new();
    let out = forward(&mut g, model, s, false)?;
    let last = *out.logits.last().expect("at least one head");
    let logits = g.value(last).data();
    let mut best = 0;
    for (i, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = i;
        }
    }
    Ok((best, out.heads.last().expect("at least one head").boxes[best]))
}

pub fn evaluate_prepared(model: &GroundingModel, data: &[PreparedSample]) -> Result<EvalReport> {
    let outcomes = data
        .iter()
        .map(|s| {
            let (_, predicted) = predict(model, s)?;
            Ok(Outcome { predicted, gt: s.gt, target_id: s.target_id, object_boxes: s.object_boxes.clone(), multiple: s.multiple })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_outcomes(&outcomes))
}

pub fn evaluate(model: &GroundingModel, data: &[GroundingSample], scene_cfg: &SceneConfig) -> Result<EvalReport> {
    evaluate_prepared(model, &prepare_all(data, model, scene_cfg)?)
}
