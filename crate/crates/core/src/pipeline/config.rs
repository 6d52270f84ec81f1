//! Run configuration: one JSON file with model, train, data and eval sections.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PipelineError;
use crate::decoder::{DecoderConfig, DEFAULT_NMS_IOU, DEFAULT_SCORE_THRESHOLD};
use crate::encoder::EncoderConfig;
use crate::loss::LossWeights;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    /// 64 px input, ~0.4M parameters.
    pub fn micro() -> Self {
        Self {
            encoder: EncoderConfig::micro(),
            decoder: DecoderConfig {
                fused_channels: 32,
                head_channels: 32,
                ..DecoderConfig::default()
            },
        }
    }

    /// Hex SHA-256 of the canonical JSON of this section. Checkpoints carry
    /// it so weights are never loaded into a differently shaped model.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("model config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Output stride of the dense grasp map.
    pub fn stride(&self) -> usize {
        self.encoder.pyramid_strides()[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimiser steps even if epochs remain.
    pub max_steps: Option<usize>,
    /// Divide the learning rate by `decay_factor` every this many epochs;
    /// `null` keeps it constant.
    pub lr_decay_every: Option<usize>,
    pub decay_factor: f64,
    /// Rescale the gradient when its global L2 norm exceeds this.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub weights: LossWeights,
    /// Checkpoints and metrics go here.
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            momentum: 0.99,
            batch_size: 8,
            epochs: 30,
            max_steps: None,
            lr_decay_every: Some(10),
            decay_factor: 10.0,
            grad_clip: None,
            seed: 0,
            weights: LossWeights::default(),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl TrainConfig {
    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        match self.lr_decay_every {
            Some(every) => self.lr / self.decay_factor.powi((epoch / every) as i32),
            None => self.lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub count: usize,
    pub objects: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// JSON-lines scene list; takes precedence over `synth`.
    pub train_scenes: Option<PathBuf>,
    /// Generate training scenes instead of reading them.
    pub synth: Option<SynthConfig>,
    /// Random 20°-step rotations during training.
    pub augment: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_scenes: None,
            synth: Some(SynthConfig {
                count: 16,
                objects: 1,
                seed: 0,
            }),
            augment: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    /// Only suppress overlapping candidates of the same category.
    pub per_category_nms: bool,
    /// Emit the best cell even when no cell reaches the threshold.
    pub keep_top1: bool,
    /// Cap on grasps per scene after NMS.
    pub max_detections: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            score_threshold: DEFAULT_SCORE_THRESHOLD,
            nms_iou: DEFAULT_NMS_IOU,
            per_category_nms: true,
            keep_top1: true,
            max_detections: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

/// Environment variables that may replace configured paths.
pub const ENV_TRAIN_SCENES: &str = "GRASPKIT_TRAIN_SCENES";
pub const ENV_OUT_DIR: &str = "GRASPKIT_OUT_DIR";

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read, apply `GRASPKIT_*` path overrides, resolve relative paths
    /// against the file's directory, and validate.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        if let Ok(p) = std::env::var(ENV_TRAIN_SCENES) {
            cfg.data.train_scenes = Some(PathBuf::from(p));
        }
        if let Ok(p) = std::env::var(ENV_OUT_DIR) {
            cfg.train.out_dir = PathBuf::from(p);
        }
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = cfg.data.train_scenes.as_mut() {
            resolve(p);
        }
        resolve(&mut cfg.train.out_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |msg: String| Err(PipelineError::Config(msg));
        self.model
            .encoder
            .validate()
            .and_then(|_| self.model.decoder.validate())
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        let t = &self.train;
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return bad(format!("train.lr must be positive, got {}", t.lr));
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return bad(format!("train.momentum must be in [0, 1), got {}", t.momentum));
        }
        if t.batch_size == 0 || t.epochs == 0 {
            return bad("train.batch_size and train.epochs must be positive".into());
        }
        if t.lr_decay_every == Some(0) || !(t.decay_factor >= 1.0) {
            return bad("train.lr_decay_every must be positive and train.decay_factor ≥ 1".into());
        }
        if t.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("train.grad_clip must be positive".into());
        }
        let w = &t.weights;
        if [w.grasp_box, w.angle, w.obj_class, w.graspability]
            .iter()
            .any(|v| !(*v >= 0.0 && v.is_finite()))
        {
            return bad("loss weights must be finite and non-negative".into());
        }
        if self.data.train_scenes.is_none() && self.data.synth.is_none() {
            return bad("data needs train_scenes or synth".into());
        }
        if let Some(s) = &self.data.synth {
            if s.count == 0 || s.objects == 0 {
                return bad("data.synth count and objects must be positive".into());
            }
            if self.model.decoder.num_classes < crate::data::SYNTH_CLASSES {
                return bad(format!(
                    "synthetic scenes use {} categories but the model has {}",
                    crate::data::SYNTH_CLASSES,
                    self.model.decoder.num_classes
                ));
            }
        }
        let e = &self.eval;
        if !(0.0..=1.0).contains(&e.score_threshold) || !(0.0..=1.0).contains(&e.nms_iou) {
            return bad("eval thresholds must lie in [0, 1]".into());
        }
        if e.max_detections == 0 {
            return bad("eval.max_detections must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        assert_eq!(cfg.train.lr, 0.001);
        assert_eq!(cfg.train.momentum, 0.99);
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(RunConfig::from_json("{}").unwrap(), cfg);
    }

    #[test]
    fn lr_schedule() {
        let t = TrainConfig::default();
        assert_eq!(t.lr_at_epoch(0), 0.001);
        assert_eq!(t.lr_at_epoch(9), 0.001);
        assert!((t.lr_at_epoch(10) - 0.0001).abs() < 1e-18);
        assert!((t.lr_at_epoch(25) - 0.00001).abs() < 1e-18);
        let flat = TrainConfig {
            lr_decay_every: None,
            ..t
        };
        assert_eq!(flat.lr_at_epoch(100), 0.001);
    }

    #[test]
    fn rejects_bad_values() {
        for bad in [
            r#"{"train": {"lr": -1}}"#,
            r#"{"train": {"momentum": 1.0}}"#,
            r#"{"train": {"batch_size": 0}}"#,
            r#"{"train": {"lr_decay_every": 0}}"#,
            r#"{"eval": {"nms_iou": 2}}"#,
            r#"{"data": {"synth": null}}"#,
            r#"{"model": {"encoder": {"image_size": 60, "patch_size": 4, "embed_dim": 16,
                "depths": [1,1,1,1], "num_heads": [1,2,4,8], "window_size": 4}}}"#,
            r#"{"trian": {}}"#,
        ] {
            assert!(
                matches!(RunConfig::from_json(bad), Err(PipelineError::Config(_))),
                "{bad}"
            );
        }
    }

    #[test]
    fn hash_tracks_model_section_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.train.lr = 0.5;
        assert_eq!(a.model.hash(), b.model.hash());
        b.model.decoder.fused_channels += 1;
        assert_ne!(a.model.hash(), b.model.hash());
        assert_eq!(a.model.hash().len(), 64);
    }

    #[test]
    fn load_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.json");
        std::fs::write(&p, r#"{"data": {"train_scenes": "s.jsonl"}, "train": {"out_dir": "out"}}"#).unwrap();
        let cfg = RunConfig::load(&p).unwrap();
        // env overrides may be set by the caller's shell; only check when absent
        if std::env::var(ENV_TRAIN_SCENES).is_err() {
            assert_eq!(cfg.data.train_scenes.unwrap(), dir.path().join("s.jsonl"));
        }
        if std::env::var(ENV_OUT_DIR).is_err() {
            assert_eq!(cfg.train.out_dir, dir.path().join("out"));
        }
    }
}
