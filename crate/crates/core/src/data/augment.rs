//! Resizing and the 20° rotation augmentation, applied to image and labels.

use super::{DataError, LabeledScene};
use crate::geom::{rect_from_vertices, GraspRect, Point};
use crate::tensor::Tensor;

pub const ROTATION_STEP_DEG: f64 = 20.0;
/// Rotations `k ∈ 0..ROTATION_STEPS`; `k = 18` would repeat `k = 0`.
pub const ROTATION_STEPS: usize = 18;

/// Bilinear sample of channel `c` at continuous pixel coordinates (pixel
/// centers at `i + 0.5`), clamping to the border.
fn sample(img: &Tensor, c: usize, x: f64, y: f64) -> f64 {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let fx = (x - 0.5).clamp(0.0, (w - 1) as f64);
    let fy = (y - 0.5).clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
    let d = img.data();
    let at = |yy: usize, xx: usize| d[(c * h + yy) * w + xx];
    let top = at(y0, x0) * (1.0 - ax) + at(y0, x1) * ax;
    let bot = at(y1, x0) * (1.0 - ax) + at(y1, x1) * ax;
    top * (1.0 - ay) + bot * ay
}

fn warp(img: &Tensor, out_h: usize, out_w: usize, src: impl Fn(f64, f64) -> (f64, f64)) -> Tensor {
    let mut data = Vec::with_capacity(3 * out_h * out_w);
    for c in 0..3 {
        for y in 0..out_h {
            for x in 0..out_w {
                let (sx, sy) = src(x as f64 + 0.5, y as f64 + 0.5);
                data.push(sample(img, c, sx, sy));
            }
        }
    }
    Tensor::new(&[3, out_h, out_w], data).expect("warp shape")
}

fn map_rect(g: &GraspRect, f: impl Fn(Point) -> Point) -> Option<GraspRect> {
    let v = g.quad().vertices.map(f);
    rect_from_vertices(&v)
        .ok()
        .map(|r| r.with_category(g.category).with_confidence(g.confidence))
}

/// Bilinear resize to `size × size`; labels follow the per-axis scaling
/// through their corner points.
pub fn resize_to_input(scene: &LabeledScene, size: usize) -> LabeledScene {
    let (h, w) = (scene.height(), scene.width());
    if h == size && w == size {
        return scene.clone();
    }
    let (sx, sy) = (size as f64 / w as f64, size as f64 / h as f64);
    let image = warp(&scene.image, size, size, |x, y| (x / sx, y / sy));
    let grasps = scene
        .grasps
        .iter()
        .filter_map(|g| map_rect(g, |p| Point::new(p.x * sx, p.y * sy)))
        .collect();
    LabeledScene {
        image,
        grasps,
        source_id: scene.source_id.clone(),
    }
}

fn rotate_about(p: Point, c: Point, deg: f64) -> Point {
    let (s, co) = deg.to_radians().sin_cos();
    let (dx, dy) = (p.x - c.x, p.y - c.y);
    Point::new(c.x + dx * co - dy * s, c.y + dx * s + dy * co)
}

/// Labels of a `width × height` image rotated by `20k°` about its center.
/// Grasps whose centers leave the frame are dropped.
pub fn rotate_labels(grasps: &[GraspRect], k: usize, width: usize, height: usize) -> Vec<GraspRect> {
    let deg = ROTATION_STEP_DEG * (k % ROTATION_STEPS) as f64;
    let c = Point::new(width as f64 / 2.0, height as f64 / 2.0);
    grasps
        .iter()
        .filter_map(|g| {
            let p = rotate_about(g.center(), c, deg);
            if !(0.0..width as f64).contains(&p.x) || !(0.0..height as f64).contains(&p.y) {
                return None;
            }
            let mut r = *g;
            r.x = p.x;
            r.y = p.y;
            r.theta = crate::geom::normalize_angle(g.theta + deg);
            Some(r)
        })
        .collect()
}

/// Rotate a square scene by `20k°` about its center. Exposed corners repeat
/// the nearest edge pixel.
pub fn rotate_augment(scene: &LabeledScene, k: usize) -> Result<LabeledScene, DataError> {
    let (h, w) = (scene.height(), scene.width());
    if h != w {
        return Err(DataError::Scene {
            scene: scene.source_id.clone(),
            msg: format!("rotation needs a square image, got {w}x{h}"),
        });
    }
    if k % ROTATION_STEPS == 0 {
        return Ok(scene.clone());
    }
    let deg = ROTATION_STEP_DEG * (k % ROTATION_STEPS) as f64;
    let c = Point::new(w as f64 / 2.0, h as f64 / 2.0);
    let image = warp(&scene.image, h, w, |x, y| {
        let p = rotate_about(Point::new(x, y), c, -deg);
        (p.x, p.y)
    });
    Ok(LabeledScene {
        image,
        grasps: rotate_labels(&scene.grasps, k, w, h),
        source_id: scene.source_id.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_scene;
    use crate::eval::rect_match;
    use crate::geom::angle_diff;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scene_with(grasps: Vec<GraspRect>, w: usize, h: usize) -> LabeledScene {
        LabeledScene {
            image: Tensor::from_fn(&[3, h, w], |k| (k % 13) as f64 / 13.0),
            grasps,
            source_id: "t".into(),
        }
    }

    #[test]
    fn resize_identity_and_isotropic() {
        let g = GraspRect::new(100.0, 60.0, 40.0, 20.0, 30.0).unwrap().with_category(2);
        let s = scene_with(vec![g], 448, 448);
        assert_eq!(resize_to_input(&s, 448), s);
        let r = resize_to_input(&s, 224);
        assert_eq!(r.image.shape(), [3, 224, 224]);
        let h = r.grasps[0];
        assert!((h.x - 50.0).abs() < 1e-9 && (h.y - 30.0).abs() < 1e-9);
        assert!((h.w - 20.0).abs() < 1e-9 && (h.h - 10.0).abs() < 1e-9);
        assert!(angle_diff(h.theta, 30.0) < 1e-9);
        assert_eq!(h.category, 2);
    }

    #[test]
    fn anisotropic_resize_follows_vertices() {
        // The image of a rotated rectangle under (0.5, 1) scaling is a
        // parallelogram: the fit keeps its center, closing edge and area.
        let g = GraspRect::new(200.0, 100.0, 40.0, 20.0, 45.0).unwrap();
        let s = scene_with(vec![g], 448, 224);
        let r = resize_to_input(&s, 224).grasps[0];
        let v: Vec<Point> = g.quad().vertices.iter().map(|p| Point::new(p.x * 0.5, p.y)).collect();
        assert!((r.x - 100.0).abs() < 1e-9 && (r.y - 100.0).abs() < 1e-9);
        let closing = Point::new(v[1].x - v[0].x, v[1].y - v[0].y);
        assert!((r.w - closing.x.hypot(closing.y)).abs() < 1e-9);
        assert!(angle_diff(r.theta, closing.y.atan2(closing.x).to_degrees()) < 1e-9);
        let area = crate::geom::polygon_area(&v).abs();
        assert!((r.area() - area).abs() < 1e-9);

        // small grasps stay within half a pixel at every corner
        let g = GraspRect::new(200.0, 100.0, 2.0, 1.0, 45.0).unwrap();
        let r = resize_to_input(&scene_with(vec![g], 448, 224), 224).grasps[0];
        for (a, b) in r.quad().vertices.iter().zip(g.quad().vertices) {
            assert!((a.x - b.x * 0.5).abs() <= 0.5 && (a.y - b.y).abs() <= 0.5);
        }
    }

    #[test]
    fn rotation_fixtures() {
        let s = synth_scene(3, 2, 64);
        assert_eq!(rotate_augment(&s, 0).unwrap(), s);
        let half = rotate_augment(&s, 9).unwrap();
        for (a, b) in half.grasps.iter().zip(&s.grasps) {
            assert!((a.x - (64.0 - b.x)).abs() < 1e-9 && (a.y - (64.0 - b.y)).abs() < 1e-9);
            assert!(angle_diff(a.theta, b.theta) < 1e-9);
        }
        // half-turn image is the pixel-reversed original
        for c in 0..3 {
            for y in 0..64 {
                for x in 0..64 {
                    let want = s.image.get(&[c, 63 - y, 63 - x]);
                    assert!((half.image.get(&[c, y, x]) - want).abs() < 1e-9);
                }
            }
        }
        let wide = scene_with(vec![], 8, 4);
        assert!(rotate_augment(&wide, 1).is_err());
    }

    #[test]
    fn eighteen_steps_close_the_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let grasps: Vec<GraspRect> = (0..4)
                .map(|_| {
                    GraspRect::new(
                        rng.random_range(0.0..224.0),
                        rng.random_range(0.0..224.0),
                        rng.random_range(5.0..40.0),
                        rng.random_range(5.0..20.0),
                        rng.random_range(0.0..180.0),
                    )
                    .unwrap()
                })
                .collect();
            let mut cur: Vec<(usize, GraspRect)> = grasps.iter().copied().enumerate().collect();
            for _ in 0..18 {
                let ids: Vec<usize> = cur.iter().map(|p| p.0).collect();
                let rects: Vec<GraspRect> = cur.iter().map(|p| p.1).collect();
                // track survivors by re-rotating one at a time
                cur = ids
                    .into_iter()
                    .zip(rects)
                    .filter_map(|(i, r)| rotate_labels(&[r], 1, 224, 224).pop().map(|r| (i, r)))
                    .collect();
            }
            for (i, r) in cur {
                let g = grasps[i];
                assert!((r.x - g.x).abs() < 1e-6 && (r.y - g.y).abs() < 1e-6);
                assert!(angle_diff(r.theta, g.theta) < 1e-6);
                assert_eq!((r.w, r.h), (g.w, g.h));
            }
        }
    }

    #[test]
    fn inner_grasps_survive_and_invert() {
        let g = GraspRect::new(112.0, 100.0, 20.0, 10.0, 70.0).unwrap();
        let s = scene_with(vec![g], 224, 224);
        for k in 0..ROTATION_STEPS {
            let r = rotate_augment(&s, k).unwrap();
            assert_eq!(r.grasps.len(), 1);
            let back = rotate_labels(&r.grasps, (ROTATION_STEPS - k) % ROTATION_STEPS, 224, 224);
            assert!(rect_match(&back[0], &g, true));
        }
    }
}
