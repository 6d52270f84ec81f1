//! Rectangle metric, top-1 scene accuracy and category-aware grasp mAP.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{angle_diff, jaccard, GraspRect};

pub const MAX_ANGLE_DIFF: f64 = 30.0;
pub const MIN_JACCARD: f64 = 0.25;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("predictions missing for {} scene(s): {}", .0.len(), .0.join(", "))]
    MissingPredictions(Vec<String>),
    #[error("predictions for unknown scene(s): {}", .0.join(", "))]
    UnknownScenes(Vec<String>),
    #[error("duplicate predictions for scene `{0}`")]
    Duplicate(String),
}

/// Correct iff the orientation is within 30° (strictly) and the rotated
/// Jaccard index exceeds 0.25 (strictly), plus equal categories when asked.
pub fn rect_match(pred: &GraspRect, gt: &GraspRect, check_category: bool) -> bool {
    (!check_category || pred.category == gt.category)
        && angle_diff(pred.theta, gt.theta) < MAX_ANGLE_DIFF
        && jaccard(pred, gt) > MIN_JACCARD
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracySummary {
    pub accuracy: f64,
    pub matched: usize,
    pub evaluated: usize,
    /// Scenes without ground truth, left out of the fraction.
    pub excluded: usize,
}

/// Fraction of scenes whose top prediction matches at least one ground truth.
/// A missing prediction counts as a miss.
pub fn scene_accuracy(
    top1: &[Option<GraspRect>],
    gts: &[Vec<GraspRect>],
    check_category: bool,
) -> AccuracySummary {
    assert_eq!(top1.len(), gts.len(), "one prediction slot per scene");
    let (mut matched, mut evaluated, mut excluded) = (0, 0, 0);
    for (p, gt) in top1.iter().zip(gts) {
        if gt.is_empty() {
            excluded += 1;
            continue;
        }
        evaluated += 1;
        if let Some(p) = p {
            if gt.iter().any(|g| rect_match(p, g, check_category)) {
                matched += 1;
            }
        }
    }
    AccuracySummary {
        accuracy: if evaluated == 0 { 0.0 } else { matched as f64 / evaluated as f64 },
        matched,
        evaluated,
        excluded,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub category: usize,
    pub ap: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub ground_truth: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSummary {
    pub map_g: f64,
    pub per_category: Vec<CategoryStats>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// 11-point interpolated average precision for a ranked TP/FP list.
pub fn average_precision_11pt(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(hits.len());
    for (k, &hit) in hits.iter().enumerate() {
        tp += hit as usize;
        curve.push((tp as f64 / num_gt as f64, tp as f64 / (k + 1) as f64));
    }
    (0..=10)
        .map(|t| {
            let r = t as f64 / 10.0;
            curve
                .iter()
                .filter(|(rec, _)| *rec >= r - 1e-12)
                .map(|p| p.1)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0
}

/// Grasp mAP: per category, predictions from all scenes ranked by
/// `confidence` are greedily matched one-to-one to unmatched ground truths of
/// the same scene; AP uses 11-point interpolation and the mean runs over
/// categories present in the ground truth. Without `check_category`
/// everything is pooled into one class.
pub fn map_grasp(preds: &[Vec<GraspRect>], gts: &[Vec<GraspRect>], check_category: bool) -> MapSummary {
    assert_eq!(preds.len(), gts.len(), "one prediction list per scene");
    let cat = |g: &GraspRect| if check_category { g.category } else { 0 };
    let mut gt_count: BTreeMap<usize, usize> = BTreeMap::new();
    for g in gts.iter().flatten() {
        *gt_count.entry(cat(g)).or_default() += 1;
    }
    let mut ranked: BTreeMap<usize, Vec<(usize, &GraspRect)>> = BTreeMap::new();
    for (s, ps) in preds.iter().enumerate() {
        for p in ps {
            ranked.entry(cat(p)).or_default().push((s, p));
        }
    }
    let mut per_category = Vec::new();
    let (mut tp_all, mut fp_all, mut fn_all) = (0, 0, 0);
    for (&c, &n_gt) in &gt_count {
        let mut list = ranked.remove(&c).unwrap_or_default();
        // stable: ties keep scene order
        list.sort_by(|a, b| b.1.confidence.total_cmp(&a.1.confidence));
        let mut used: HashMap<(usize, usize), ()> = HashMap::new();
        let mut hits = Vec::with_capacity(list.len());
        for (s, p) in list {
            let best = gts[s]
                .iter()
                .enumerate()
                .filter(|(k, g)| cat(g) == c && !used.contains_key(&(s, *k)) && rect_match(p, g, false))
                .map(|(k, g)| (k, jaccard(p, g)))
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            if let Some((k, _)) = best {
                used.insert((s, k), ());
            }
            hits.push(best.is_some());
        }
        let tp = hits.iter().filter(|&&h| h).count();
        let fp = hits.len() - tp;
        let fn_ = n_gt - tp;
        tp_all += tp;
        fp_all += fp;
        fn_all += fn_;
        per_category.push(CategoryStats {
            category: c,
            ap: average_precision_11pt(&hits, n_gt),
            precision: if hits.is_empty() { 0.0 } else { tp as f64 / hits.len() as f64 },
            recall: tp as f64 / n_gt as f64,
            tp,
            fp,
            fn_,
            ground_truth: n_gt,
        });
    }
    // predictions in categories absent from the ground truth are plain FPs
    fp_all += ranked.values().map(Vec::len).sum::<usize>();
    let map_g = if per_category.is_empty() {
        0.0
    } else {
        per_category.iter().map(|c| c.ap).sum::<f64>() / per_category.len() as f64
    };
    MapSummary {
        map_g,
        per_category,
        tp: tp_all,
        fp: fp_all,
        fn_: fn_all,
    }
}

/// One grasp in a prediction file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredGrasp {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
    pub category: usize,
    pub score: f64,
}

impl PredGrasp {
    pub fn to_rect(&self) -> Result<GraspRect, crate::geom::GeomError> {
        let r = GraspRect::new(self.x, self.y, self.w, self.h, self.theta)?
            .with_category(self.category)
            .with_confidence(self.score);
        r.validate()?;
        Ok(r)
    }
}

impl From<&GraspRect> for PredGrasp {
    fn from(g: &GraspRect) -> Self {
        Self {
            x: g.x,
            y: g.y,
            w: g.w,
            h: g.h,
            theta: g.theta,
            category: g.category,
            score: g.confidence,
        }
    }
}

/// One line of a prediction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub source_id: String,
    pub grasps: Vec<PredGrasp>,
}

impl PredictionRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("prediction serializes")
    }

    pub fn rects(&self) -> Vec<GraspRect> {
        self.grasps.iter().filter_map(|g| g.to_rect().ok()).collect()
    }

    /// Highest-scoring grasp; the first one wins ties.
    pub fn top1(&self) -> Option<GraspRect> {
        self.rects()
            .into_iter()
            .fold(None, |best: Option<GraspRect>, r| match best {
                Some(b) if b.confidence >= r.confidence => Some(b),
                _ => Some(r),
            })
    }
}

pub fn parse_predictions(text: &str) -> Result<Vec<PredictionRecord>, EvalError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let rec: PredictionRecord =
                serde_json::from_str(l).map_err(|e| EvalError::Parse { line: i + 1, msg: e.to_string() })?;
            for (k, g) in rec.grasps.iter().enumerate() {
                g.to_rect().map_err(|e| EvalError::Parse {
                    line: i + 1,
                    msg: format!("grasp {k}: {e}"),
                })?;
            }
            Ok(rec)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Top-1 rectangle-metric accuracy, categories ignored.
    Single,
    /// Category-aware grasp mAP.
    Multi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub scenes: usize,
    pub accuracy: Option<f64>,
    pub map_g: Option<f64>,
    /// How `map_g` averages: over categories present in the ground truth.
    pub map_averaging: String,
    pub per_category: Vec<CategoryStats>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub excluded_scenes: usize,
    /// Wall-clock forward + decode per image, when known.
    pub latency_ms: Option<f64>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.2}%", 100.0 * v));
        writeln!(s, "mode        {:?}", self.mode).ok();
        writeln!(s, "scenes      {}", self.scenes).ok();
        writeln!(s, "accuracy    {}", pct(self.accuracy)).ok();
        writeln!(s, "mAPg        {}", pct(self.map_g)).ok();
        writeln!(s, "TP/FP/FN    {}/{}/{}", self.tp, self.fp, self.fn_).ok();
        if let Some(l) = self.latency_ms {
            writeln!(s, "latency     {l:.1} ms").ok();
        }
        if !self.per_category.is_empty() {
            writeln!(s, "category  AP       precision  recall   TP   FP   FN").ok();
            for c in &self.per_category {
                writeln!(
                    s,
                    "{:<9} {:<8.4} {:<10.4} {:<8.4} {:<4} {:<4} {}",
                    c.category, c.ap, c.precision, c.recall, c.tp, c.fp, c.fn_
                )
                .ok();
            }
        }
        s
    }
}

/// Evaluate prediction records against `(source_id, ground truth)` pairs.
/// Every scene needs exactly one prediction record; record order is
/// irrelevant.
pub fn evaluate(
    preds: &[PredictionRecord],
    scenes: &[(String, Vec<GraspRect>)],
    mode: EvalMode,
) -> Result<EvalReport, EvalError> {
    let mut by_id: HashMap<&str, &PredictionRecord> = HashMap::new();
    for p in preds {
        if by_id.insert(p.source_id.as_str(), p).is_some() {
            return Err(EvalError::Duplicate(p.source_id.clone()));
        }
    }
    let missing: Vec<String> = scenes
        .iter()
        .filter(|(id, _)| !by_id.contains_key(id.as_str()))
        .map(|(id, _)| id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(EvalError::MissingPredictions(missing));
    }
    if preds.len() > scenes.len() {
        let known: std::collections::HashSet<&str> = scenes.iter().map(|s| s.0.as_str()).collect();
        let unknown = preds
            .iter()
            .filter(|p| !known.contains(p.source_id.as_str()))
            .map(|p| p.source_id.clone())
            .collect();
        return Err(EvalError::UnknownScenes(unknown));
    }
    let gts: Vec<Vec<GraspRect>> = scenes.iter().map(|s| s.1.clone()).collect();
    let ordered: Vec<&PredictionRecord> = scenes.iter().map(|(id, _)| by_id[id.as_str()]).collect();
    let mut report = EvalReport {
        mode,
        scenes: scenes.len(),
        accuracy: None,
        map_g: None,
        map_averaging: "category-mean".into(),
        per_category: Vec::new(),
        tp: 0,
        fp: 0,
        fn_: 0,
        excluded_scenes: 0,
        latency_ms: None,
    };
    match mode {
        EvalMode::Single => {
            let top: Vec<Option<GraspRect>> = ordered.iter().map(|p| p.top1()).collect();
            let acc = scene_accuracy(&top, &gts, false);
            report.accuracy = Some(acc.accuracy);
            report.tp = acc.matched;
            report.fp = acc.evaluated - acc.matched;
            report.excluded_scenes = acc.excluded;
        }
        EvalMode::Multi => {
            let all: Vec<Vec<GraspRect>> = ordered.iter().map(|p| p.rects()).collect();
            let m = map_grasp(&all, &gts, true);
            report.map_g = Some(m.map_g);
            report.tp = m.tp;
            report.fp = m.fp;
            report.fn_ = m.fn_;
            report.per_category = m.per_category;
        }
    }
    Ok(report)
}
