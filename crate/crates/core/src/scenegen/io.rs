use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GroundingSample, SceneConfig, SceneObject, SceneSpec};
use crate::error::{Error, Result};
use crate::geometry::Box3;
use crate::textsplit::Label;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectRecord {
    id: usize,
    category: String,
    color: String,
    center: [f64; 3],
    size: [f64; 3],
}

/// One dataset line. Point clouds are not stored; they are regenerated
/// from `pointcloud_seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    scene_id: String,
    objects: Vec<ObjectRecord>,
    utterance: String,
    token_labels: Vec<Label>,
    target_id: usize,
    pointcloud_seed: u64,
}

impl From<&GroundingSample> for SampleRecord {
    fn from(s: &GroundingSample) -> Self {
        Self {
            scene_id: s.scene.scene_id.clone(),
            objects: s
                .scene
                .objects
                .iter()
                .map(|o| ObjectRecord { id: o.id, category: o.category.clone(), color: o.color.clone(), center: o.bbox.center, size: o.bbox.size })
                .collect(),
            utterance: s.utterance.clone(),
            token_labels: s.token_labels.clone(),
            target_id: s.target_id,
            pointcloud_seed: s.pointcloud_seed,
        }
    }
}

impl SampleRecord {
    fn into_sample(self, room: [f64; 3]) -> std::result::Result<GroundingSample, String> {
        let objects = self
            .objects
            .into_iter()
            .map(|o| {
                let bbox = Box3::new(o.center, o.size).map_err(|e| format!("object {}: {e}", o.id))?;
                Ok(SceneObject { id: o.id, category: o.category, color: o.color, bbox })
            })
            .collect::<std::result::Result<Vec<_>, String>>()?;
        if !objects.iter().any(|o| o.id == self.target_id) {
            return Err(format!("target {} not among the objects", self.target_id));
        }
        let words = self.utterance.split_whitespace().count();
        if words != self.token_labels.len() {
            return Err(format!("{} labels for {words} words", self.token_labels.len()));
        }
        Ok(GroundingSample {
            scene: SceneSpec { scene_id: self.scene_id, objects, room },
            utterance: self.utterance,
            token_labels: self.token_labels,
            target_id: self.target_id,
            pointcloud_seed: self.pointcloud_seed,
        })
    }
}

pub fn save_dataset(path: &Path, samples: &[GroundingSample]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut w, &SampleRecord::from(s))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Parses JSONL text; blank lines are skipped. The room comes from `cfg`.
pub fn load_dataset_from_str(text: &str, cfg: &SceneConfig) -> Result<Vec<GroundingSample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = i + 1;
        let rec: SampleRecord = serde_json::from_str(line).map_err(|e| Error::Parse { line: line_no, detail: e.to_string() })?;
        out.push(rec.into_sample(cfg.room).map_err(|detail| Error::Parse { line: line_no, detail })?);
    }
    Ok(out)
}

pub fn load_dataset(path: &Path, cfg: &SceneConfig) -> Result<Vec<GroundingSample>> {
    load_dataset_from_str(&fs::read_to_string(path)?, cfg)
}
