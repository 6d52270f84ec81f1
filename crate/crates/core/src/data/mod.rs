//! Scenes, label formats, synthetic data, augmentation and dense targets.

mod augment;
mod cornell;
mod image_io;
mod scene;
mod synth;
mod targets;

pub use augment::{resize_to_input, rotate_augment, rotate_labels, ROTATION_STEP_DEG, ROTATION_STEPS};
pub use cornell::{parse_cornell_rect_file, serialize_cornell, CornellParse};
pub use image_io::{load_image, save_image};
pub use scene::{load_scenes, parse_scene_jsonl, GraspRecord, SceneRecord};
pub use synth::{synth_objects, synth_scene, synth_scene_with, ShapeKind, SynthObject, SYNTH_CLASSES};
pub use targets::{build_targets, CellTarget, TargetMaps};

use std::path::PathBuf;

use thiserror::Error;

use crate::geom::{normalize_angle, GraspRect};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Image { path: PathBuf, msg: String },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("scene `{scene}`: {msg}")]
    Scene { scene: String, msg: String },
}

/// An image with its grasp labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScene {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub grasps: Vec<GraspRect>,
    pub source_id: String,
}

impl LabeledScene {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// Image shape, centers inside the frame, categories below `num_classes`.
    pub fn validate(&self, num_classes: usize) -> Result<(), DataError> {
        let err = |msg: String| DataError::Scene {
            scene: self.source_id.clone(),
            msg,
        };
        let s = self.image.shape();
        if s.len() != 3 || s[0] != 3 || s[1] == 0 || s[2] == 0 {
            return Err(err(format!("image must be [3, H, W], got {s:?}")));
        }
        for (k, g) in self.grasps.iter().enumerate() {
            g.validate().map_err(|e| err(format!("grasp {k}: {e}")))?;
            if !(0.0..s[2] as f64).contains(&g.x) || !(0.0..s[1] as f64).contains(&g.y) {
                return Err(err(format!(
                    "grasp {k} center ({}, {}) is outside the {}x{} image",
                    g.x, g.y, s[2], s[1]
                )));
            }
            if g.category >= num_classes {
                return Err(err(format!(
                    "grasp {k} category {} is not below {num_classes}",
                    g.category
                )));
            }
        }
        Ok(())
    }
}

/// Angle class of `theta` among `bins` equal bins over `[0, 180)`.
pub fn bin_angle(theta: f64, bins: usize) -> usize {
    let width = 180.0 / bins as f64;
    ((normalize_angle(theta) / width).floor() as usize).min(bins - 1)
}

/// Center angle of bin `index`.
pub fn bin_center(index: usize, bins: usize) -> f64 {
    (index as f64 + 0.5) * 180.0 / bins as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bin_fixtures() {
        assert_eq!(bin_angle(5.0, 18), 0);
        assert_eq!(bin_angle(179.9, 18), 17);
        assert_eq!(bin_angle(180.0, 18), bin_angle(0.0, 18));
        assert_eq!(bin_angle(-5.0, 18), 17);
        assert_eq!(bin_center(0, 18), 5.0);
        assert_eq!(bin_center(17, 18), 175.0);
    }

    proptest! {
        #[test]
        fn bin_center_within_half_bin(theta in -720.0f64..720.0, bins in 2usize..40) {
            let b = bin_angle(theta, bins);
            prop_assert!(b < bins);
            let d = (normalize_angle(theta) - bin_center(b, bins)).abs();
            prop_assert!(d <= 90.0 / bins as f64 + 1e-9);
        }
    }

    #[test]
    fn validate_checks_bounds_and_categories() {
        let mut s = LabeledScene {
            image: Tensor::zeros(&[3, 10, 20]),
            grasps: vec![GraspRect::new(15.0, 5.0, 4.0, 2.0, 0.0).unwrap().with_category(1)],
            source_id: "s".into(),
        };
        s.validate(2).unwrap();
        assert!(s.validate(1).is_err());
        s.grasps[0].y = 12.0;
        assert!(s.validate(2).is_err());
    }
}
