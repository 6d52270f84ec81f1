//! Dense supervision: one positive cell per grasp, at the cell holding its
//! center.

use super::{bin_angle, DataError, LabeledScene};
use crate::decoder::{DenseGraspMap, MapLayout};
use crate::tensor::Tensor;

/// Exact regression targets for one positive cell, in the parameterisation
/// the decoder inverts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellTarget {
    /// `atanh` of the center offset from the cell middle, in cells.
    pub dx: f64,
    pub dy: f64,
    /// `ln(w / stride)`, `ln(h / stride)`.
    pub log_w: f64,
    pub log_h: f64,
    pub angle_bin: usize,
    pub category: usize,
    /// Source grasp index within the scene.
    pub grasp: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetMaps {
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    /// Row-major `[height × width]`, `Some` on positive cells.
    pub cells: Vec<Option<CellTarget>>,
    /// Grasps that lost their cell to a larger grasp.
    pub collisions: usize,
}

impl TargetMaps {
    pub fn is_positive(&self, i: usize, j: usize) -> bool {
        self.cells[i * self.width + j].is_some()
    }

    /// `(flat cell index, target)` for every positive cell, in row-major order.
    pub fn positives(&self) -> impl Iterator<Item = (usize, &CellTarget)> {
        self.cells
            .iter()
            .enumerate()
            .filter_map(|(k, c)| c.as_ref().map(|t| (k, t)))
    }

    pub fn num_positive(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }

    /// The map a perfect model would emit: exact regression channels, and
    /// `±logit` for one-hot classes and graspability.
    pub fn to_dense_map(&self, layout: MapLayout, logit: f64) -> DenseGraspMap {
        let (h, w) = (self.height, self.width);
        let mut t = Tensor::zeros(&[layout.channels(), h, w]);
        for i in 0..h {
            for j in 0..w {
                match &self.cells[i * w + j] {
                    Some(c) => {
                        t.set(&[MapLayout::DX, i, j], c.dx);
                        t.set(&[MapLayout::DY, i, j], c.dy);
                        t.set(&[MapLayout::LOG_W, i, j], c.log_w);
                        t.set(&[MapLayout::LOG_H, i, j], c.log_h);
                        t.set(&[MapLayout::ANGLE + c.angle_bin, i, j], logit);
                        t.set(&[layout.obj() + c.category, i, j], logit);
                        t.set(&[layout.graspability(), i, j], logit);
                    }
                    None => t.set(&[layout.graspability(), i, j], -logit),
                }
            }
        }
        DenseGraspMap::new(layout, t).expect("finite target map")
    }
}

pub fn build_targets(
    scene: &LabeledScene,
    stride: usize,
    angle_bins: usize,
    num_classes: usize,
) -> Result<TargetMaps, DataError> {
    let (ih, iw) = (scene.height(), scene.width());
    if stride == 0 || ih % stride != 0 || iw % stride != 0 {
        return Err(DataError::Scene {
            scene: scene.source_id.clone(),
            msg: format!("{iw}x{ih} image is not divisible by stride {stride}"),
        });
    }
    scene.validate(num_classes)?;
    let (h, w) = (ih / stride, iw / stride);
    let s = stride as f64;
    let mut cells: Vec<Option<CellTarget>> = vec![None; h * w];
    let mut collisions = 0;
    for (k, g) in scene.grasps.iter().enumerate() {
        let j = ((g.x / s).floor() as usize).min(w - 1);
        let i = ((g.y / s).floor() as usize).min(h - 1);
        let target = CellTarget {
            dx: (g.x / s - j as f64 - 0.5).atanh(),
            dy: (g.y / s - i as f64 - 0.5).atanh(),
            log_w: (g.w / s).ln(),
            log_h: (g.h / s).ln(),
            angle_bin: bin_angle(g.theta, angle_bins),
            category: g.category,
            grasp: k,
        };
        let slot = &mut cells[i * w + j];
        match slot {
            Some(prev) => {
                collisions += 1;
                if g.area() > scene.grasps[prev.grasp].area() {
                    *slot = Some(target);
                }
            }
            None => *slot = Some(target),
        }
    }
    if collisions > 0 {
        log::debug!("{}: {collisions} grasp(s) shared a cell", scene.source_id);
    }
    Ok(TargetMaps {
        height: h,
        width: w,
        stride,
        cells,
        collisions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::decode_candidates;
    use crate::geom::GraspRect;

    fn scene(grasps: Vec<GraspRect>) -> LabeledScene {
        LabeledScene {
            image: Tensor::zeros(&[3, 64, 64]),
            grasps,
            source_id: "t".into(),
        }
    }

    #[test]
    fn center_cell_fixture() {
        let t = build_targets(&scene(vec![GraspRect::new(28.0, 20.0, 10.0, 5.0, 0.0).unwrap()]), 8, 18, 3).unwrap();
        assert!(t.is_positive(2, 3));
        assert_eq!(t.num_positive(), 1);
        let e = build_targets(&scene(vec![]), 8, 18, 3).unwrap();
        assert_eq!(e.num_positive(), 0);
        assert_eq!((e.height, e.width), (8, 8));
    }

    #[test]
    fn collision_keeps_the_larger_grasp() {
        let small = GraspRect::new(10.0, 10.0, 4.0, 2.0, 0.0).unwrap();
        let big = GraspRect::new(11.0, 12.0, 20.0, 8.0, 0.0).unwrap().with_category(1);
        for order in [vec![small, big], vec![big, small]] {
            let t = build_targets(&scene(order), 8, 18, 3).unwrap();
            assert_eq!(t.collisions, 1);
            assert_eq!(t.positives().next().unwrap().1.category, 1);
        }
    }

    #[test]
    fn decode_inverts_targets() {
        let g = GraspRect::new(37.3, 50.9, 13.0, 6.5, 123.0).unwrap().with_category(2);
        let t = build_targets(&scene(vec![g]), 8, 18, 3).unwrap();
        let layout = MapLayout {
            angle_bins: 18,
            num_classes: 3,
        };
        let c = decode_candidates(&t.to_dense_map(layout, 10.0), 8.0, 0.5);
        assert_eq!(c.len(), 1);
        let r = c[0].rect;
        assert!((r.x - g.x).abs() < 1e-9 && (r.y - g.y).abs() < 1e-9);
        assert!((r.w / g.w - 1.0).abs() < 1e-12 && (r.h / g.h - 1.0).abs() < 1e-12);
        assert_eq!((c[0].angle_class, r.category), (12, 2));
    }
}
