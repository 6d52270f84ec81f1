//! Training objective: CIoU box regression, angle and category
//! cross-entropy, their weighted sum, and a graspability BCE term.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::TargetMaps;
use crate::decoder::MapLayout;
use crate::geom::{center_distance_sq, enclosing_diagonal_sq, jaccard, GeomError, GraspRect};
use crate::tensor::{invalid, Result, Tape, Tensor, Var};

/// `4 / π²`
const ASPECT_SCALE: f64 = 4.0 / (PI * PI);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// ω, box regression.
    pub grasp_box: f64,
    /// β, angle classification.
    pub angle: f64,
    /// λ, object classification.
    pub obj_class: f64,
    /// Weight of the graspability term in the optimised objective.
    pub graspability: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            grasp_box: 0.05,
            angle: 0.25,
            obj_class: 0.5,
            graspability: 1.0,
        }
    }
}

impl LossWeights {
    /// `ω·box + β·angle + λ·class`.
    pub fn combine(&self, grasp_box: f64, angle: f64, obj_class: f64) -> f64 {
        self.grasp_box * grasp_box + self.angle * angle + self.obj_class * obj_class
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub grasp_box: f64,
    pub angle: f64,
    pub obj_class: f64,
    pub graspability: f64,
    /// `ω·box + β·angle + λ·class`.
    pub total: f64,
    /// `total` plus the weighted graspability term; what training minimises.
    pub objective: f64,
    pub weights: LossWeights,
}

/// Aspect-ratio consistency term `ν`.
pub fn aspect_term(w: f64, h: f64, w_gt: f64, h_gt: f64) -> f64 {
    ASPECT_SCALE * ((w_gt / h_gt).atan() - (w / h).atan()).powi(2)
}

/// CIoU loss between `pred` and `gt`, with IoU and the enclosing box taken
/// axis-aligned in the ground truth's frame (the predicted angle is ignored).
pub fn ciou_loss(pred: &GraspRect, gt: &GraspRect) -> std::result::Result<f64, GeomError> {
    pred.validate()?;
    gt.validate()?;
    let (s, c) = gt.theta.to_radians().sin_cos();
    let (dx, dy) = (pred.x - gt.x, pred.y - gt.y);
    let p = GraspRect::new(dx * c + dy * s, -dx * s + dy * c, pred.w, pred.h, 0.0)?;
    let g = GraspRect::new(0.0, 0.0, gt.w, gt.h, 0.0)?;
    let iou = jaccard(&p, &g);
    let nu = aspect_term(pred.w, pred.h, gt.w, gt.h);
    let alpha = ciou_alpha(iou, nu);
    Ok(1.0 - iou + center_distance_sq(&p, &g) / enclosing_diagonal_sq(&p, &g) + alpha * nu)
}

/// `−log softmax(logits)[gt]`.
pub fn cross_entropy_onehot(logits: &[f64], gt: usize) -> Result<f64> {
    if logits.len() < 2 {
        return Err(invalid("cross_entropy", "need at least two classes"));
    }
    if gt >= logits.len() {
        return Err(invalid(
            "cross_entropy",
            format!("class {gt} out of range for {} logits", logits.len()),
        ));
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    Ok(lse - logits[gt])
}

/// Ground-truth boxes for [`ciou_tape`], one entry per row.
#[derive(Debug, Clone, Default)]
pub struct BoxTargets {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub w: Vec<f64>,
    pub h: Vec<f64>,
    pub theta: Vec<f64>,
}

impl BoxTargets {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn push(&mut self, x: f64, y: f64, w: f64, h: f64, theta: f64) {
        self.x.push(x);
        self.y.push(y);
        self.w.push(w);
        self.h.push(h);
        self.theta.push(theta);
    }
}

/// Differentiable CIoU over `n` boxes. `px, py, pw, ph` are `[n]` variables;
/// returns the `[n]` per-box losses. `α` is a constant in the backward pass.
pub fn ciou_tape(tape: &mut Tape, px: Var, py: Var, pw: Var, ph: Var, gt: &BoxTargets) -> Result<Var> {
    Ok(ciou_tape_impl(tape, [px, py, pw, ph], gt, None)?.0)
}

/// [`ciou_tape`] with `α` supplied rather than taken from the current
/// prediction, so the forward value matches what the backward pass assumes.
pub fn ciou_tape_with_alpha(
    tape: &mut Tape,
    px: Var,
    py: Var,
    pw: Var,
    ph: Var,
    gt: &BoxTargets,
    alpha: &[f64],
) -> Result<Var> {
    if alpha.len() != gt.len() {
        return Err(invalid("ciou", "one alpha per box required"));
    }
    Ok(ciou_tape_impl(tape, [px, py, pw, ph], gt, Some(alpha))?.0)
}

/// `α = ν / ((1 − IoU) + ν)`, 0 when `ν = 0`.
pub fn ciou_alpha(iou: f64, nu: f64) -> f64 {
    if nu == 0.0 {
        0.0
    } else {
        nu / ((1.0 - iou) + nu)
    }
}

/// Per-box losses and the `α` values used.
fn ciou_tape_impl(
    tape: &mut Tape,
    pred: [Var; 4],
    gt: &BoxTargets,
    alpha: Option<&[f64]>,
) -> Result<(Var, Vec<f64>)> {
    let [px, py, pw, ph] = pred;
    let n = gt.len();
    for v in [px, py, pw, ph] {
        if tape.shape(v) != [n] {
            return Err(invalid("ciou", format!("prediction shape {:?}, want [{n}]", tape.shape(v))));
        }
    }
    if gt.w.iter().chain(&gt.h).any(|&v| !(v > 0.0)) || tape.value(pw).data().iter().chain(tape.value(ph).data()).any(|&v| !(v > 0.0)) {
        return Err(invalid("ciou", "box sizes must be positive"));
    }
    let konst = |tape: &mut Tape, f: &dyn Fn(usize) -> f64| tape.constant(Tensor::from_fn(&[n], f));
    let cos = konst(tape, &|k| gt.theta[k].to_radians().cos());
    let sin = konst(tape, &|k| gt.theta[k].to_radians().sin());
    let gx = konst(tape, &|k| gt.x[k]);
    let gy = konst(tape, &|k| gt.y[k]);
    let half_gw = konst(tape, &|k| gt.w[k] / 2.0);
    let half_gh = konst(tape, &|k| gt.h[k] / 2.0);
    let neg_half_gw = konst(tape, &|k| -gt.w[k] / 2.0);
    let neg_half_gh = konst(tape, &|k| -gt.h[k] / 2.0);
    let gt_area = konst(tape, &|k| gt.w[k] * gt.h[k]);
    let gt_atan = konst(tape, &|k| (gt.w[k] / gt.h[k]).atan());

    // predicted center in the ground-truth frame
    let dx = tape.sub(px, gx)?;
    let dy = tape.sub(py, gy)?;
    let a = tape.mul(dx, cos)?;
    let b = tape.mul(dy, sin)?;
    let u = tape.add(a, b)?;
    let a = tape.mul(dy, cos)?;
    let b = tape.mul(dx, sin)?;
    let v = tape.sub(a, b)?;

    let hw = tape.mul_scalar(pw, 0.5)?;
    let hh = tape.mul_scalar(ph, 0.5)?;
    let (x0, x1) = (tape.sub(u, hw)?, tape.add(u, hw)?);
    let (y0, y1) = (tape.sub(v, hh)?, tape.add(v, hh)?);

    let ix1 = tape.minimum(x1, half_gw)?;
    let ix0 = tape.maximum(x0, neg_half_gw)?;
    let iw = tape.sub(ix1, ix0)?;
    let iw = tape.relu(iw)?;
    let iy1 = tape.minimum(y1, half_gh)?;
    let iy0 = tape.maximum(y0, neg_half_gh)?;
    let ih = tape.sub(iy1, iy0)?;
    let ih = tape.relu(ih)?;
    let inter = tape.mul(iw, ih)?;
    let area = tape.mul(pw, ph)?;
    let union = tape.add(area, gt_area)?;
    let union = tape.sub(union, inter)?;
    let iou = tape.div(inter, union)?;

    let cx1 = tape.maximum(x1, half_gw)?;
    let cx0 = tape.minimum(x0, neg_half_gw)?;
    let cw = tape.sub(cx1, cx0)?;
    let cy1 = tape.maximum(y1, half_gh)?;
    let cy0 = tape.minimum(y0, neg_half_gh)?;
    let ch = tape.sub(cy1, cy0)?;
    let cw2 = tape.square(cw)?;
    let ch2 = tape.square(ch)?;
    let diag = tape.add(cw2, ch2)?;
    let u2 = tape.square(u)?;
    let v2 = tape.square(v)?;
    let rho = tape.add(u2, v2)?;
    let dist = tape.div(rho, diag)?;

    let ratio = tape.div(pw, ph)?;
    let at = tape.atan(ratio)?;
    let d = tape.sub(gt_atan, at)?;
    let d2 = tape.square(d)?;
    let nu = tape.mul_scalar(d2, ASPECT_SCALE)?;
    let alpha = match alpha {
        Some(a) => a.to_vec(),
        None => {
            let (nu_v, iou_v) = (tape.value(nu).data(), tape.value(iou).data());
            (0..n).map(|k| ciou_alpha(iou_v[k], nu_v[k])).collect()
        }
    };
    let alpha_var = tape.constant(Tensor::new(&[n], alpha.clone())?);
    let penalty = tape.mul(alpha_var, nu)?;

    let one_minus = tape.neg(iou)?;
    let one_minus = tape.add_scalar(one_minus, 1.0)?;
    let l = tape.add(one_minus, dist)?;
    Ok((tape.add(l, penalty)?, alpha))
}

/// Differentiable cross-entropy for `[n, K]` logits against class indices;
/// returns `[n]`.
pub fn cross_entropy_tape(tape: &mut Tape, logits: Var, classes: &[usize]) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    let [n, k] = s[..] else {
        return Err(invalid("cross_entropy", format!("logits must be [n, K], got {s:?}")));
    };
    if k < 2 || classes.len() != n || classes.iter().any(|&c| c >= k) {
        return Err(invalid(
            "cross_entropy",
            format!("{} class indices for {n}x{k} logits", classes.len()),
        ));
    }
    let lp = tape.log_softmax_lastdim(logits)?;
    let idx: Arc<[usize]> = classes.iter().enumerate().map(|(r, &c)| r * k + c).collect();
    let picked = tape.gather(lp, idx, &[n])?;
    tape.neg(picked)
}

/// Mean binary cross-entropy with logits, `softplus(z) − z·t`.
pub fn bce_with_logits_tape(tape: &mut Tape, logits: Var, targets: &Tensor) -> Result<Var> {
    if tape.shape(logits) != targets.shape() {
        return Err(invalid("bce", "logits and targets differ in shape"));
    }
    let sp = tape.softplus(logits)?;
    let t = tape.constant(targets.clone());
    let zt = tape.mul(logits, t)?;
    let l = tape.sub(sp, zt)?;
    tape.mean(l)
}

/// Differentiable loss terms plus their values.
pub struct LossVars {
    pub grasp_box: Var,
    pub angle: Var,
    pub obj_class: Var,
    pub graspability: Var,
    pub total: Var,
    /// Scalar to call `backward` on.
    pub objective: Var,
    pub breakdown: LossBreakdown,
    /// CIoU `α` per positive cell, in target order.
    pub alpha: Vec<f64>,
}

/// Loss of a `[B, C, H, W]` head output against per-image targets. Box,
/// angle and class terms average over each image's positive cells, then over
/// the batch (an image without positives contributes 0); graspability
/// averages over every cell.
pub fn total_loss(
    tape: &mut Tape,
    maps: Var,
    layout: MapLayout,
    targets: &[TargetMaps],
    weights: LossWeights,
) -> Result<LossVars> {
    total_loss_with_alpha(tape, maps, layout, targets, weights, None)
}

/// [`total_loss`] with the CIoU `α` of every positive cell supplied, as
/// needed to compare against finite differences.
pub fn total_loss_with_alpha(
    tape: &mut Tape,
    maps: Var,
    layout: MapLayout,
    targets: &[TargetMaps],
    weights: LossWeights,
    alpha: Option<&[f64]>,
) -> Result<LossVars> {
    let s = tape.shape(maps).to_vec();
    if s.len() != 4 || s[0] != targets.len() || s[1] != layout.channels() {
        return Err(invalid(
            "total_loss",
            format!(
                "maps {s:?} do not fit {} targets with {} channels",
                targets.len(),
                layout.channels()
            ),
        ));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if targets.iter().any(|t| t.height != h || t.width != w) {
        return Err(invalid("total_loss", "target grid does not match the map grid"));
    }
    let hw = h * w;
    let at = |img: usize, ch: usize, cell: usize| (img * c + ch) * hw + cell;

    // positive rows, gathered channel by channel
    let mut cell_weight = Vec::new();
    let mut gt = BoxTargets::default();
    let mut bins = Vec::new();
    let mut cats = Vec::new();
    let mut rows: Vec<(usize, usize)> = Vec::new();
    for (img, t) in targets.iter().enumerate() {
        let np = t.num_positive();
        for (cell, ct) in t.positives() {
            let (i, j) = (cell / w, cell % w);
            rows.push((img, cell));
            cell_weight.push(1.0 / (np as f64 * b as f64));
            gt.push(
                j as f64 + 0.5 + ct.dx.tanh(),
                i as f64 + 0.5 + ct.dy.tanh(),
                ct.log_w.exp(),
                ct.log_h.exp(),
                crate::data::bin_center(ct.angle_bin, layout.angle_bins),
            );
            bins.push(ct.angle_bin);
            cats.push(ct.category);
        }
    }
    let n = rows.len();
    if alpha.is_some_and(|a| a.len() != n) {
        return Err(invalid("total_loss", format!("need {n} alpha values")));
    }
    let mut alpha_used = Vec::new();
    let (grasp_box, angle, obj_class) = if n == 0 {
        let z = tape.constant(Tensor::scalar(0.0));
        (z, z, z)
    } else {
        let pick = |tape: &mut Tape, ch: usize| -> Result<Var> {
            let idx: Arc<[usize]> = rows.iter().map(|&(img, cell)| at(img, ch, cell)).collect();
            tape.gather(maps, idx, &[n])
        };
        let pick_block = |tape: &mut Tape, from: usize, len: usize| -> Result<Var> {
            let idx: Arc<[usize]> = rows
                .iter()
                .flat_map(|&(img, cell)| (from..from + len).map(move |ch| at(img, ch, cell)))
                .collect();
            tape.gather(maps, idx, &[n, len])
        };
        let dx = pick(tape, MapLayout::DX)?;
        let dy = pick(tape, MapLayout::DY)?;
        let lw = pick(tape, MapLayout::LOG_W)?;
        let lh = pick(tape, MapLayout::LOG_H)?;
        let base_x = tape.constant(Tensor::from_fn(&[n], |k| (rows[k].1 % w) as f64 + 0.5));
        let base_y = tape.constant(Tensor::from_fn(&[n], |k| (rows[k].1 / w) as f64 + 0.5));
        let tx = tape.tanh(dx)?;
        let px = tape.add(base_x, tx)?;
        let ty = tape.tanh(dy)?;
        let py = tape.add(base_y, ty)?;
        let pw = tape.exp(lw)?;
        let ph = tape.exp(lh)?;
        let (per_box, a) = ciou_tape_impl(tape, [px, py, pw, ph], &gt, alpha)?;
        alpha_used = a;

        let angle_logits = pick_block(tape, MapLayout::ANGLE, layout.angle_bins)?;
        let per_angle = cross_entropy_tape(tape, angle_logits, &bins)?;
        let obj_logits = pick_block(tape, layout.obj(), layout.num_classes)?;
        let per_obj = if layout.num_classes >= 2 {
            cross_entropy_tape(tape, obj_logits, &cats)?
        } else {
            tape.constant(Tensor::zeros(&[n]))
        };

        let wv = tape.constant(Tensor::new(&[n], cell_weight)?);
        let mut reduce = |v: Var| -> Result<Var> {
            let p = tape.mul(v, wv)?;
            tape.sum(p)
        };
        (reduce(per_box)?, reduce(per_angle)?, reduce(per_obj)?)
    };

    let g_idx: Arc<[usize]> = (0..b)
        .flat_map(|img| (0..hw).map(move |cell| at(img, layout.graspability(), cell)))
        .collect();
    let g_logits = tape.gather(maps, g_idx, &[b, hw])?;
    let g_t = Tensor::from_fn(&[b, hw], |k| {
        let (img, cell) = (k / hw, k % hw);
        targets[img].cells[cell].is_some() as u8 as f64
    });
    let graspability = bce_with_logits_tape(tape, g_logits, &g_t)?;

    let a = tape.mul_scalar(grasp_box, weights.grasp_box)?;
    let bb = tape.mul_scalar(angle, weights.angle)?;
    let cc = tape.mul_scalar(obj_class, weights.obj_class)?;
    let total = tape.add(a, bb)?;
    let total = tape.add(total, cc)?;
    let gw = tape.mul_scalar(graspability, weights.graspability)?;
    let objective = tape.add(total, gw)?;

    let val = |v: Var| tape.value(v).item();
    let breakdown = LossBreakdown {
        grasp_box: val(grasp_box),
        angle: val(angle),
        obj_class: val(obj_class),
        graspability: val(graspability),
        total: val(total),
        objective: val(objective),
        weights,
    };
    Ok(LossVars {
        grasp_box,
        angle,
        obj_class,
        graspability,
        total,
        objective,
        breakdown,
        alpha: alpha_used,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_targets;
    use crate::data::LabeledScene;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn r(x: f64, y: f64, w: f64, h: f64, t: f64) -> GraspRect {
        GraspRect::new(x, y, w, h, t).unwrap()
    }

    fn tape_ciou(pred: &GraspRect, gt: &GraspRect) -> f64 {
        let mut tape = Tape::new();
        let v = |tape: &mut Tape, x: f64| tape.leaf(Tensor::new(&[1], vec![x]).unwrap());
        let (px, py, pw, ph) = (v(&mut tape, pred.x), v(&mut tape, pred.y), v(&mut tape, pred.w), v(&mut tape, pred.h));
        let mut g = BoxTargets::default();
        g.push(gt.x, gt.y, gt.w, gt.h, gt.theta);
        let l = ciou_tape(&mut tape, px, py, pw, ph, &g).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn ciou_fixtures() {
        let a = r(10.0, 20.0, 8.0, 4.0, 30.0);
        assert!(ciou_loss(&a, &a).unwrap().abs() < 1e-9);
        assert!(tape_ciou(&a, &a).abs() < 1e-9);
        let half = r(10.0, 20.0, 4.0, 2.0, 30.0);
        assert!((ciou_loss(&half, &a).unwrap() - 0.75).abs() < 1e-9);
        assert!((tape_ciou(&half, &a) - 0.75).abs() < 1e-9);
        assert!((aspect_term(2.0, 1.0, 1.0, 2.0) - 0.1678).abs() < 1e-3);
        let mut bad = a;
        bad.w = 0.0;
        assert!(ciou_loss(&bad, &a).is_err());
    }

    #[test]
    fn tape_and_geometric_routes_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let gt = r(
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(0.5..6.0),
                rng.random_range(0.5..6.0),
                rng.random_range(0.0..180.0),
            );
            let p = r(
                gt.x + rng.random_range(-4.0..4.0),
                gt.y + rng.random_range(-4.0..4.0),
                rng.random_range(0.5..6.0),
                rng.random_range(0.5..6.0),
                rng.random_range(0.0..180.0),
            );
            let (a, b) = (ciou_loss(&p, &gt).unwrap(), tape_ciou(&p, &gt));
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    proptest! {
        #[test]
        fn ciou_bounds(
            x in -10.0f64..10.0, y in -10.0f64..10.0, w in 0.1f64..10.0, h in 0.1f64..10.0,
            gw in 0.1f64..10.0, gh in 0.1f64..10.0, t in 0.0f64..180.0,
        ) {
            let gt = r(0.0, 0.0, gw, gh, t);
            let p = r(x, y, w, h, 0.0);
            let l = ciou_loss(&p, &gt).unwrap();
            prop_assert!((0.0..3.0).contains(&l));
            prop_assert!(ciou_loss(&gt, &gt).unwrap().abs() < 1e-9);
        }
    }

    #[test]
    fn ciou_grows_along_a_ray() {
        let gt = r(0.0, 0.0, 6.0, 3.0, 25.0);
        for dir in [0.0f64, 40.0, 95.0, 200.0] {
            let (s, c) = dir.to_radians().sin_cos();
            let mut last = -1.0;
            for k in 1..=10 {
                let d = k as f64 * 0.9;
                let l = ciou_loss(&r(d * c, d * s, 4.0, 3.5, 0.0), &gt).unwrap();
                assert!(l > last, "dir {dir} radius {d}");
                last = l;
            }
        }
    }

    #[test]
    fn cross_entropy_fixtures() {
        assert!(cross_entropy_onehot(&[10.0, -10.0], 0).unwrap() <= 1e-8 + 2e-9);
        for k in [2usize, 5, 18] {
            let l = cross_entropy_onehot(&vec![0.3; k], k - 1).unwrap();
            assert!((l - (k as f64).ln()).abs() < 1e-12);
        }
        assert!((cross_entropy_onehot(&[0.0, 0.0], 1).unwrap() - 0.6931).abs() < 1e-4);
        assert!(cross_entropy_onehot(&[0.0, 0.0], 2).is_err());
        assert!(cross_entropy_onehot(&[0.0], 0).is_err());
    }

    #[test]
    fn cross_entropy_matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let k = rng.random_range(2..20);
            let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-8.0..8.0)).collect();
            let gt = rng.random_range(0..k);
            let z: f64 = logits.iter().map(|v| v.exp()).sum();
            let want = -(logits[gt].exp() / z).ln();
            assert!((cross_entropy_onehot(&logits, gt).unwrap() - want).abs() < 1e-12);
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(&[1, k], logits.clone()).unwrap());
            let l = cross_entropy_tape(&mut tape, x, &[gt]).unwrap();
            assert!((tape.value(l).item() - want).abs() < 1e-12);
        }
    }

    fn layout() -> MapLayout {
        MapLayout {
            angle_bins: 18,
            num_classes: 3,
        }
    }

    fn one_grasp_targets() -> TargetMaps {
        let scene = LabeledScene {
            image: Tensor::zeros(&[3, 32, 32]),
            grasps: vec![r(13.0, 21.0, 10.0, 6.0, 47.0).with_category(1)],
            source_id: "t".into(),
        };
        build_targets(&scene, 8, 18, 3).unwrap()
    }

    fn run(maps: &Tensor, t: &[TargetMaps], w: LossWeights) -> LossBreakdown {
        let mut tape = Tape::new();
        let m = tape.constant(maps.clone());
        total_loss(&mut tape, m, layout(), t, w).unwrap().breakdown
    }

    #[test]
    fn perfect_prediction_has_near_zero_terms() {
        let t = one_grasp_targets();
        let dense = t.to_dense_map(layout(), 30.0);
        let mut shape = vec![1];
        shape.extend_from_slice(dense.tensor().shape());
        let maps = dense.tensor().reshape(&shape).unwrap();
        let b = run(&maps, &[t.clone()], LossWeights::default());
        assert!(b.grasp_box.abs() < 1e-9);
        assert!(b.angle < 1e-9 && b.obj_class < 1e-9 && b.graspability < 1e-9);
        assert!(b.total.abs() < 1e-9);
        let zero = LossWeights {
            grasp_box: 0.0,
            angle: 0.0,
            obj_class: 0.0,
            graspability: 0.0,
        };
        let noisy = Tensor::from_fn(maps.shape(), |k| ((k * 7919) % 13) as f64 - 6.0);
        let b = run(&noisy, &[t], zero);
        assert_eq!((b.total, b.objective), (0.0, 0.0));
    }

    #[test]
    fn single_cell_hand_check_and_linearity() {
        let t = one_grasp_targets();
        let l = layout();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let maps = Tensor::from_fn(&[1, l.channels(), 4, 4], |_| rng.random_range(-1.0..1.0));
        let w = LossWeights::default();
        let b = run(&maps, &[t.clone()], w);

        // hand evaluation at the positive cell (row 2, col 1)
        let (i, j) = (2usize, 1usize);
        let at = |ch: usize| maps.get(&[0, ch, i, j]);
        let pred = r(
            (j as f64 + 0.5 + at(MapLayout::DX).tanh()) * 8.0,
            (i as f64 + 0.5 + at(MapLayout::DY).tanh()) * 8.0,
            at(MapLayout::LOG_W).exp() * 8.0,
            at(MapLayout::LOG_H).exp() * 8.0,
            0.0,
        );
        let ct = *t.positives().next().unwrap().1;
        let gt = r(13.0, 21.0, 10.0, 6.0, crate::data::bin_center(ct.angle_bin, 18));
        let want_box = ciou_loss(&pred, &gt).unwrap();
        let ang: Vec<f64> = (0..18).map(|k| at(MapLayout::ANGLE + k)).collect();
        let obj: Vec<f64> = (0..3).map(|k| at(l.obj() + k)).collect();
        let want_ang = cross_entropy_onehot(&ang, ct.angle_bin).unwrap();
        let want_cls = cross_entropy_onehot(&obj, 1).unwrap();
        assert!((b.grasp_box - want_box).abs() < 1e-9);
        assert!((b.angle - want_ang).abs() < 1e-12);
        assert!((b.obj_class - want_cls).abs() < 1e-12);
        assert_eq!(b.total, 0.05 * b.grasp_box + 0.25 * b.angle + 0.5 * b.obj_class);

        let mut w2 = w;
        w2.grasp_box *= 2.0;
        let b2 = run(&maps, &[t], w2);
        assert!((b2.total - b.total - 0.05 * b.grasp_box).abs() < 1e-12);
    }

    #[test]
    fn empty_images_contribute_zero() {
        let t = one_grasp_targets();
        let empty = TargetMaps {
            cells: vec![None; 16],
            collisions: 0,
            ..t.clone()
        };
        let l = layout();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let one = Tensor::from_fn(&[1, l.channels(), 4, 4], |_| rng.random_range(-1.0..1.0));
        let mut two_data = one.data().to_vec();
        two_data.extend(one.data());
        let two = Tensor::new(&[2, l.channels(), 4, 4], two_data).unwrap();
        let a = run(&one, &[t.clone()], LossWeights::default());
        let b = run(&two, &[t, empty.clone()], LossWeights::default());
        assert!((b.grasp_box - a.grasp_box / 2.0).abs() < 1e-15);
        let none = run(&one, &[empty], LossWeights::default());
        assert_eq!((none.grasp_box, none.angle, none.obj_class), (0.0, 0.0, 0.0));
        assert!(none.graspability > 0.0);
    }
}
