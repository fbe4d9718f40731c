//! Synthetic rooms of axis-aligned furniture boxes, referring utterances with
//! ground-truth component labels, and surface point clouds.
//!
//! Relations are evaluated in the fixed room frame: +x is "right", +y is
//! "behind" (away from the viewer), and distances are measured on the floor
//! plane between box centers.

mod io;
mod points;
mod scene;
mod utterance;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Box3;
use crate::textsplit::Label;

pub use io::{load_dataset, load_dataset_from_str, save_dataset, SampleRecord};
pub use points::{sample_points, PointCloud, CLUTTER_FRACTION, COLOR_JITTER};
pub use scene::gen_scene;
pub use utterance::{interpret, render_utterance, Template};

pub struct Category {
    pub name: &'static str,
    /// Nominal extents (x, y, z) in meters.
    pub size: [f64; 3],
}

pub const CATEGORIES: [Category; 10] = [
    Category { name: "chair", size: [0.5, 0.5, 0.9] },
    Category { name: "table", size: [1.4, 0.8, 0.75] },
    Category { name: "sofa", size: [2.0, 0.9, 0.8] },
    Category { name: "bed", size: [2.0, 1.6, 0.5] },
    Category { name: "desk", size: [1.2, 0.6, 1.05] },
    Category { name: "cabinet", size: [0.8, 0.5, 1.8] },
    Category { name: "lamp", size: [0.3, 0.3, 1.5] },
    Category { name: "shelf", size: [1.0, 0.35, 2.2] },
    Category { name: "box", size: [0.4, 0.4, 0.4] },
    Category { name: "bin", size: [0.35, 0.35, 0.65] },
];

pub struct ColorSpec {
    pub name: &'static str,
    pub rgb: [f64; 3],
}

pub const COLORS: [ColorSpec; 6] = [
    ColorSpec { name: "red", rgb: [0.85, 0.15, 0.15] },
    ColorSpec { name: "green", rgb: [0.15, 0.7, 0.2] },
    ColorSpec { name: "blue", rgb: [0.15, 0.25, 0.85] },
    ColorSpec { name: "yellow", rgb: [0.9, 0.85, 0.15] },
    ColorSpec { name: "white", rgb: [0.95, 0.95, 0.95] },
    ColorSpec { name: "black", rgb: [0.08, 0.08, 0.08] },
];

pub fn category(name: &str) -> Option<&'static Category> {
    CATEGORIES.iter().find(|c| c.name == name)
}

pub fn color(name: &str) -> Option<&'static ColorSpec> {
    COLORS.iter().find(|c| c.name == name)
}

/// Minimum center separation along an axis for left/right/front/behind.
pub const AXIS_MARGIN: f64 = 0.5;
/// Floor-plane center distance below which objects are "near".
pub const NEAR_DIST: f64 = 1.5;
/// Floor-plane center distance above which objects are "far from" each other.
pub const FAR_DIST: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Relation {
    LeftOf,
    RightOf,
    InFrontOf,
    Behind,
    Near,
    FarFrom,
}

pub const RELATIONS: [Relation; 6] = [Relation::LeftOf, Relation::RightOf, Relation::InFrontOf, Relation::Behind, Relation::Near, Relation::FarFrom];

impl Relation {
    pub fn phrase(self) -> &'static str {
        match self {
            Relation::LeftOf => "left of",
            Relation::RightOf => "right of",
            Relation::InFrontOf => "in front of",
            Relation::Behind => "behind",
            Relation::Near => "near",
            Relation::FarFrom => "far from",
        }
    }

    /// Whether `subject` stands in this relation to `anchor`.
    pub fn holds(self, subject: &Box3, anchor: &Box3) -> bool {
        let (s, a) = (subject.center, anchor.center);
        let planar = (s[0] - a[0]).hypot(s[1] - a[1]);
        match self {
            Relation::LeftOf => s[0] < a[0] - AXIS_MARGIN,
            Relation::RightOf => s[0] > a[0] + AXIS_MARGIN,
            Relation::InFrontOf => s[1] < a[1] - AXIS_MARGIN,
            Relation::Behind => s[1] > a[1] + AXIS_MARGIN,
            Relation::Near => planar < NEAR_DIST,
            Relation::FarFrom => planar > FAR_DIST,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: usize,
    pub category: String,
    pub color: String,
    pub bbox: Box3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub scene_id: String,
    pub objects: Vec<SceneObject>,
    /// Room extents; the room spans `[0, room[i]]` on each axis.
    pub room: [f64; 3],
}

impl SceneSpec {
    pub fn object(&self, id: usize) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn room_center(&self) -> [f64; 3] {
        [self.room[0] / 2.0, self.room[1] / 2.0, self.room[2] / 2.0]
    }

    /// Other objects sharing the category of `id`.
    pub fn distractors(&self, id: usize) -> Vec<&SceneObject> {
        match self.object(id) {
            Some(t) => self.objects.iter().filter(|o| o.id != id && o.category == t.category).collect(),
            None => Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub num_objects: usize,
    /// Use the first `num_categories` entries of [`CATEGORIES`].
    pub num_categories: usize,
    pub num_colors: usize,
    pub room: [f64; 3],
    /// Relative per-axis size jitter.
    pub size_jitter: f64,
    /// Points per cloud.
    pub num_points: usize,
    /// Gaussian position noise, meters.
    pub point_noise: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self { num_objects: 8, num_categories: 10, num_colors: 6, room: [8.0, 8.0, 3.0], size_jitter: 0.1, num_points: 1024, point_noise: 0.005 }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_objects < 2 {
            return Err(Error::SceneGen("need at least 2 objects".into()));
        }
        if self.num_categories == 0 || self.num_categories > CATEGORIES.len() {
            return Err(Error::SceneGen(format!("num_categories must be in 1..={}", CATEGORIES.len())));
        }
        if self.num_colors == 0 || self.num_colors > COLORS.len() {
            return Err(Error::SceneGen(format!("num_colors must be in 1..={}", COLORS.len())));
        }
        if !(0.0..0.5).contains(&self.size_jitter) || !self.room.iter().all(|r| *r > 0.0 && r.is_finite()) {
            return Err(Error::SceneGen("bad room or size jitter".into()));
        }
        if self.num_points < self.num_objects * 8 {
            return Err(Error::SceneGen(format!("{} points is fewer than 8 per object", self.num_points)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundingSample {
    pub scene: SceneSpec,
    pub utterance: String,
    pub token_labels: Vec<Label>,
    pub target_id: usize,
    pub pointcloud_seed: u64,
}

impl GroundingSample {
    pub fn target(&self) -> &SceneObject {
        self.scene.object(self.target_id).expect("target exists")
    }

    /// True when the scene has another object of the target's category.
    pub fn is_multiple(&self) -> bool {
        !self.scene.distractors(self.target_id).is_empty()
    }

    pub fn points(&self, cfg: &SceneConfig) -> Result<PointCloud> {
        sample_points(&self.scene, cfg.num_points, cfg.point_noise, self.pointcloud_seed)
    }
}

/// One sample from a scene seed: a target is drawn uniformly; if no
/// disambiguating utterance exists for it the remaining objects are tried in
/// random order, then the scene is regenerated.
pub fn gen_sample(seed: u64, cfg: &SceneConfig) -> Result<GroundingSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _attempt in 0..16 {
        let scene = gen_scene(rng.next_u64(), cfg)?;
        let mut order: Vec<usize> = scene.objects.iter().map(|o| o.id).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        for &target in &order {
            if let Ok((utterance, token_labels)) = render_utterance(&scene, target, &mut rng) {
                let pointcloud_seed = rng.next_u64();
                return Ok(GroundingSample { scene, utterance, token_labels, target_id: target, pointcloud_seed });
            }
        }
    }
    Err(Error::SceneGen(format!("no describable target for seed {seed}")))
}

/// `num_scenes` samples, one per scene, with per-scene seeds drawn from `seed`.
pub fn gen_dataset(seed: u64, num_scenes: usize, cfg: &SceneConfig) -> Result<Vec<GroundingSample>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..num_scenes).map(|_| gen_sample(rng.next_u64(), cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relation_thresholds() {
        let at = |x: f64, y: f64| Box3::new([x, y, 0.5], [0.5, 0.5, 1.0]).unwrap();
        assert!(Relation::LeftOf.holds(&at(1.0, 4.0), &at(2.0, 4.0)));
        assert!(!Relation::LeftOf.holds(&at(1.6, 4.0), &at(2.0, 4.0)));
        assert!(Relation::RightOf.holds(&at(3.0, 4.0), &at(2.0, 4.0)));
        assert!(Relation::InFrontOf.holds(&at(2.0, 1.0), &at(2.0, 4.0)));
        assert!(Relation::Behind.holds(&at(2.0, 5.0), &at(2.0, 4.0)));
        assert!(Relation::Near.holds(&at(2.0, 5.0), &at(2.0, 4.0)));
        assert!(Relation::FarFrom.holds(&at(6.0, 4.0), &at(2.0, 4.0)));
        assert!(!Relation::FarFrom.holds(&at(4.0, 4.0), &at(2.0, 4.0)));
    }

    #[test]
    fn dataset_is_deterministic() {
        let cfg = SceneConfig::default();
        let a = gen_dataset(3, 5, &cfg).unwrap();
        let b = gen_dataset(3, 5, &cfg).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, gen_dataset(4, 5, &cfg).unwrap());
    }

    #[test]
    fn vocabulary_lookup() {
        assert_eq!(category("lamp").unwrap().size, [0.3, 0.3, 1.5]);
        assert!(category("piano").is_none());
        assert_eq!(color("black").unwrap().rgb[0], 0.08);
    }
}
