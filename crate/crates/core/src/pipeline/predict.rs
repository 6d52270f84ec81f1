//! Single-pass inference: forward, decode, suppress, map back to the
//! original image frame.

use std::path::Path;
use std::time::Instant;

use super::{EvalConfig, GraspNet, PipelineError};
use crate::data::{resize_to_input, LabeledScene};
use crate::decoder::{decode_candidates, nms_filter};
use crate::eval::{PredGrasp, PredictionRecord};
use crate::geom::{rect_from_vertices, GraspRect, Point};

pub struct PredictOutput {
    /// One record per input scene, in input order.
    pub records: Vec<PredictionRecord>,
    /// Mean wall-clock forward + decode time per scene.
    pub latency_ms: Option<f64>,
}

fn rescale(r: &GraspRect, sx: f64, sy: f64) -> Option<GraspRect> {
    if sx == 1.0 && sy == 1.0 {
        return Some(*r);
    }
    let v = r.quad().vertices.map(|p| Point::new(p.x * sx, p.y * sy));
    rect_from_vertices(&v)
        .ok()
        .map(|s| s.with_category(r.category).with_confidence(r.confidence))
}

/// Grasps for one scene, best first, in the scene's own pixel frame.
pub fn predict_scene(net: &GraspNet, scene: &LabeledScene, eval: &EvalConfig) -> Result<PredictionRecord, PipelineError> {
    let size = net.input_size();
    let input = resize_to_input(scene, size);
    let maps = net.dense_maps(&[input.image])?;
    let map = &maps[0];
    let stride = net.stride() as f64;
    let mut cands = decode_candidates(map, stride, eval.score_threshold);
    if cands.is_empty() && eval.keep_top1 {
        cands = decode_candidates(map, stride, 0.0);
        cands.truncate(1);
    }
    let mut kept = nms_filter(&cands, eval.nms_iou, eval.per_category_nms);
    kept.truncate(eval.max_detections);
    let (sx, sy) = (scene.width() as f64 / size as f64, scene.height() as f64 / size as f64);
    let grasps = kept
        .iter()
        .filter_map(|c| rescale(&c.rect, sx, sy))
        .map(|r| PredGrasp::from(&r))
        .collect();
    Ok(PredictionRecord {
        source_id: scene.source_id.clone(),
        grasps,
    })
}

pub fn predict_scenes(net: &GraspNet, scenes: &[LabeledScene], eval: &EvalConfig) -> Result<PredictOutput, PipelineError> {
    let start = Instant::now();
    let records = scenes
        .iter()
        .map(|s| predict_scene(net, s, eval))
        .collect::<Result<Vec<_>, _>>()?;
    let latency_ms = (!scenes.is_empty()).then(|| start.elapsed().as_secs_f64() * 1e3 / scenes.len() as f64);
    Ok(PredictOutput { records, latency_ms })
}

/// JSON-lines, one record per line; no records gives an empty file.
pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<(), PipelineError> {
    let mut text = String::new();
    for r in records {
        text.push_str(&r.to_json_line());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })
}
