use super::model::ForwardOutput;
use crate::error::{Error, Result};
use crate::geometry::{iou, Box3};
use crate::numerics::{Graph, Tensor, Var};

/// Index of the box with the highest IoU against `gt` (lower index on ties);
/// when nothing overlaps, the box whose center is nearest.
pub fn assign_query(boxes: &[Box3], gt: &Box3) -> usize {
    let mut best = 0;
    let mut best_iou = 0.0;
    for (i, b) in boxes.iter().enumerate() {
        let v = iou(b, gt);
        if v > best_iou {
            best_iou = v;
            best = i;
        }
    }
    if best_iou > 0.0 {
        return best;
    }
    let gc = gt.center_point();
    let mut best_d = f64::INFINITY;
    for (i, b) in boxes.iter().enumerate() {
        let d = b.center_point().dist(&gc);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

fn product3(g: &mut Graph, v: Var) -> Result<Var> {
    let a = g.slice_cols(v, 0, 1)?;
    let b = g.slice_cols(v, 1, 1)?;
    let c = g.slice_cols(v, 2, 1)?;
    let ab = g.mul(a, b)?;
    g.mul(ab, c)
}

/// Axis-aligned IoU of a `[1, 6]` (center, size) row against a fixed box.
pub fn iou_var(g: &mut Graph, row: Var, gt: &Box3) -> Result<Var> {
    let center = g.slice_cols(row, 0, 3)?;
    let size = g.slice_cols(row, 3, 3)?;
    let half = g.scale(size, 0.5)?;
    let lo_p = g.sub(center, half)?;
    let hi_p = g.add(center, half)?;
    let lo_g = g.input(Tensor::new(vec![1, 3], gt.min_corner().to_vec())?)?;
    let hi_g = g.input(Tensor::new(vec![1, 3], gt.max_corner().to_vec())?)?;
    let lo = g.maximum(lo_p, lo_g)?;
    let hi = g.minimum(hi_p, hi_g)?;
    let span = g.sub(hi, lo)?;
    let overlap = g.relu(span)?;
    let inter = product3(g, overlap)?;
    let vol = product3(g, size)?;
    let diff = g.sub(vol, inter)?;
    let union = g.add_scalar(diff, gt.volume())?;
    g.div(inter, union)
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub pos: Var,
    pub sem: Var,
}

/// Per layer: L_pos = L1(center) + L1(size) + (1 − IoU) on the assigned
/// query, L_sem = cross-entropy of the query logits against that query.
/// Both are averaged over layers; total = L_pos + weight·L_sem.
///
/// `fixed` overrides the per-layer assignment (used for gradient checks).
pub fn compute_loss(g: &mut Graph, out: &ForwardOutput, gt: &Box3, sem_weight: f64, fixed: Option<&[usize]>) -> Result<(LossParts, Vec<usize>)> {
    let layers = out.heads.len();
    if layers == 0 || out.logits.len() != layers {
        return Err(Error::Training("no head outputs to supervise".into()));
    }
    if let Some(f) = fixed {
        if f.len() != layers {
            return Err(Error::InvalidArgument(format!("{} fixed assignments for {layers} layers", f.len())));
        }
    }
    let gt_c = g.input(Tensor::new(vec![1, 3], gt.center.to_vec())?)?;
    let gt_s = g.input(Tensor::new(vec![1, 3], gt.size.to_vec())?)?;
    let mut assigned = Vec::with_capacity(layers);
    let mut pos_terms = Vec::with_capacity(layers);
    let mut sem_terms = Vec::with_capacity(layers);
    for (l, (h, logits)) in out.heads.iter().zip(&out.logits).enumerate() {
        let a = match fixed {
            Some(f) => f[l],
            None => assign_query(&h.boxes, gt),
        };
        assigned.push(a);
        let row = g.slice_rows(h.box_var, a, 1)?;
        let center = g.slice_cols(row, 0, 3)?;
        let size = g.slice_cols(row, 3, 3)?;
        let dc = g.sub(center, gt_c)?;
        let dc = g.abs(dc)?;
        let l1c = g.mean_all(dc)?;
        let ds = g.sub(size, gt_s)?;
        let ds = g.abs(ds)?;
        let l1s = g.mean_all(ds)?;
        let overlap = iou_var(g, row, gt)?;
        let miss = g.scale(overlap, -1.0)?;
        let miss = g.add_scalar(miss, 1.0)?;
        let p = g.add(l1c, l1s)?;
        pos_terms.push(g.add(p, miss)?);

        let lsm = g.log_softmax_rows(*logits)?;
        let pick = g.slice_cols(lsm, a, 1)?;
        sem_terms.push(g.scale(pick, -1.0)?);
    }
    let pos = g.concat_cols(&pos_terms)?;
    let pos = g.mean_all(pos)?;
    let sem = g.concat_cols(&sem_terms)?;
    let sem = g.mean_all(sem)?;
    let weighted = g.scale(sem, sem_weight)?;
    let total = g.add(pos, weighted)?;
    Ok((LossParts { total, pos, sem }, assigned))
}
