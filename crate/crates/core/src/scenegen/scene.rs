use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{SceneConfig, SceneObject, SceneSpec, CATEGORIES, COLORS};
use crate::error::{Error, Result};
use crate::geometry::Box3;

/// Gap kept between object footprints and to the walls, meters.
const CLEARANCE: f64 = 0.15;
const PLACEMENT_TRIES: usize = 200;
const LAYOUT_TRIES: usize = 50;

fn footprints_clear(a: &Box3, b: &Box3) -> bool {
    (0..2).any(|i| (a.center[i] - b.center[i]).abs() >= (a.size[i] + b.size[i]) / 2.0 + CLEARANCE)
}

/// Rejection-samples non-overlapping boxes standing on the floor. At least
/// two objects share a category.
pub fn gen_scene(seed: u64, cfg: &SceneConfig) -> Result<SceneSpec> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.num_objects;
    let mut cats: Vec<usize> = (0..n).map(|_| rng.random_range(0..cfg.num_categories)).collect();
    let has_pair = (0..n).any(|i| (i + 1..n).any(|j| cats[i] == cats[j]));
    if !has_pair {
        let (i, j) = (rng.random_range(0..n), rng.random_range(0..n - 1));
        let j = if j >= i { j + 1 } else { j };
        cats[j] = cats[i];
    }
    let colors: Vec<usize> = (0..n).map(|_| rng.random_range(0..cfg.num_colors)).collect();
    let sizes: Vec<[f64; 3]> = cats
        .iter()
        .map(|&c| {
            let base = CATEGORIES[c].size;
            [0, 1, 2].map(|i| base[i] * (1.0 + rng.random_range(-cfg.size_jitter..=cfg.size_jitter)))
        })
        .collect();

    'layout: for _ in 0..LAYOUT_TRIES {
        let mut placed: Vec<Box3> = Vec::with_capacity(n);
        for size in &sizes {
            let lo = [0, 1].map(|i| size[i] / 2.0 + CLEARANCE);
            let hi = [0, 1].map(|i| cfg.room[i] - size[i] / 2.0 - CLEARANCE);
            if lo[0] >= hi[0] || lo[1] >= hi[1] || size[2] > cfg.room[2] {
                return Err(Error::SceneGen("object larger than the room".into()));
            }
            let mut ok = None;
            for _ in 0..PLACEMENT_TRIES {
                let c = [rng.random_range(lo[0]..hi[0]), rng.random_range(lo[1]..hi[1]), size[2] / 2.0];
                let b = Box3 { center: c, size: *size };
                if placed.iter().all(|p| footprints_clear(p, &b)) {
                    ok = Some(b);
                    break;
                }
            }
            match ok {
                Some(b) => placed.push(b),
                None => continue 'layout,
            }
        }
        let objects = placed
            .into_iter()
            .enumerate()
            .map(|(i, bbox)| SceneObject { id: i, category: CATEGORIES[cats[i]].name.to_string(), color: COLORS[colors[i]].name.to_string(), bbox })
            .collect();
        return Ok(SceneSpec { scene_id: format!("scene-{seed:016x}"), objects, room: cfg.room });
    }
    Err(Error::SceneGen(format!("could not place {n} objects after {LAYOUT_TRIES} layouts")))
}
