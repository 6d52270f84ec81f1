//! JSON-lines scene lists: `{"image_path", "grasps": [{x, y, w, h, theta, category}]}`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{load_image, DataError, LabeledScene};
use crate::geom::GraspRect;

/// One grasp as written on disk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspRecord {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
    pub category: usize,
}

impl From<&GraspRect> for GraspRecord {
    fn from(g: &GraspRect) -> Self {
        Self {
            x: g.x,
            y: g.y,
            w: g.w,
            h: g.h,
            theta: g.theta,
            category: g.category,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScene {
    image_path: String,
    #[serde(default)]
    source_id: Option<String>,
    grasps: Vec<GraspRecord>,
}

#[derive(Serialize)]
struct RawSceneOut<'a> {
    image_path: &'a str,
    source_id: &'a str,
    grasps: Vec<GraspRecord>,
}

/// A validated scene list entry; the image itself is not loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub image_path: String,
    /// Defaults to `image_path` when the record has none.
    pub source_id: String,
    pub grasps: Vec<GraspRect>,
}

impl SceneRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&RawSceneOut {
            image_path: &self.image_path,
            source_id: &self.source_id,
            grasps: self.grasps.iter().map(GraspRecord::from).collect(),
        })
        .expect("scene serializes")
    }
}

/// Parse one scene line. `line_no` is only used in error messages.
pub fn parse_scene_jsonl(line: &str, line_no: usize, num_classes: usize) -> Result<SceneRecord, DataError> {
    let err = |msg: String| DataError::Parse { line: line_no, msg };
    let raw: RawScene = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
    let grasps = raw
        .grasps
        .iter()
        .enumerate()
        .map(|(k, g)| {
            if g.category >= num_classes {
                return Err(err(format!(
                    "grasp {k}: category {} is not below {num_classes}",
                    g.category
                )));
            }
            GraspRect::new(g.x, g.y, g.w, g.h, g.theta)
                .map(|r| r.with_category(g.category))
                .map_err(|e| err(format!("grasp {k}: {e}")))
        })
        .collect::<Result<_, _>>()?;
    Ok(SceneRecord {
        source_id: raw.source_id.unwrap_or_else(|| raw.image_path.clone()),
        image_path: raw.image_path,
        grasps,
    })
}

/// Read a scene list and its images. Relative image paths are resolved
/// against the list's directory.
pub fn load_scenes(path: &Path, num_classes: usize) -> Result<Vec<LabeledScene>, DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut scenes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = parse_scene_jsonl(line, i + 1, num_classes)?;
        let image = load_image(&base.join(&rec.image_path))?;
        let scene = LabeledScene {
            image,
            grasps: rec.grasps,
            source_id: rec.source_id,
        };
        scene.validate(num_classes)?;
        scenes.push(scene);
    }
    Ok(scenes)
}
