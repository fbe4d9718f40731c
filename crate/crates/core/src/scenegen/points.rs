use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{color, SceneSpec};
use crate::error::{Error, Result};
use crate::geometry::{Box3, Point3};

/// Share of points scattered on the floor away from any object.
pub const CLUTTER_FRACTION: f64 = 0.05;
/// Per-channel Gaussian color noise.
pub const COLOR_JITTER: f64 = 0.04;
const FLOOR_GRAY: [f64; 3] = [0.5, 0.5, 0.5];

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub xyz: Vec<Point3>,
    pub rgb: Vec<[f64; 3]>,
    /// Source object of each point, `None` for floor clutter.
    pub object_ids: Vec<Option<usize>>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.xyz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xyz.is_empty()
    }
}

fn surface_point(b: &Box3, rng: &mut impl Rng) -> Point3 {
    let [sx, sy, sz] = b.size;
    let areas = [sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.random_range(0.0..total);
    let mut face = 5;
    for (i, a) in areas.iter().enumerate() {
        if pick < *a {
            face = i;
            break;
        }
        pick -= a;
    }
    let lo = b.min_corner();
    let hi = b.max_corner();
    let mut p = [0, 1, 2].map(|i| rng.random_range(lo[i]..=hi[i]));
    let axis = face / 2;
    p[axis] = if face % 2 == 0 { lo[axis] } else { hi[axis] };
    Point3::from_array(p)
}

/// Every object gets an equal share of the non-clutter budget, spread over
/// its six faces by area. Points are shuffled before returning.
pub fn sample_points(scene: &SceneSpec, n: usize, noise: f64, seed: u64) -> Result<PointCloud> {
    let m = scene.objects.len();
    if n < m * 8 {
        return Err(Error::SceneGen(format!("{n} points for {m} objects")));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::SceneGen(format!("bad noise {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pos_noise = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let col_noise = Normal::new(0.0, COLOR_JITTER).expect("valid sigma");
    let clutter = ((n as f64 * CLUTTER_FRACTION).round() as usize).min(n - m * 8);
    let per_object = n - clutter;

    let mut pts = Vec::with_capacity(n);
    let jitter = |rng: &mut ChaCha8Rng, base: [f64; 3]| base.map(|c| (c + col_noise.sample(rng)).clamp(0.0, 1.0));
    let displace = |rng: &mut ChaCha8Rng, p: Point3| if noise > 0.0 { p.translate([0, 1, 2].map(|_| pos_noise.sample(rng))) } else { p };
    for (i, o) in scene.objects.iter().enumerate() {
        let count = per_object / m + usize::from(i < per_object % m);
        let base = color(&o.color).map(|c| c.rgb).ok_or_else(|| Error::SceneGen(format!("unknown color `{}`", o.color)))?;
        for _ in 0..count {
            let p = surface_point(&o.bbox, &mut rng);
            let p = displace(&mut rng, p);
            pts.push((p, jitter(&mut rng, base), Some(o.id)));
        }
    }
    for _ in 0..clutter {
        let p = Point3::new(rng.random_range(0.0..scene.room[0]), rng.random_range(0.0..scene.room[1]), 0.0);
        let p = displace(&mut rng, p);
        pts.push((p, jitter(&mut rng, FLOOR_GRAY), None));
    }
    for i in (1..pts.len()).rev() {
        pts.swap(i, rng.random_range(0..=i));
    }
    Ok(PointCloud {
        xyz: pts.iter().map(|p| p.0).collect(),
        rgb: pts.iter().map(|p| p.1).collect(),
        object_ids: pts.iter().map(|p| p.2).collect(),
    })
}
