//! Procedural desk scenes: flat-colored bars, ellipses and diamonds on a
//! textured background, each with one grasp across its minor axis.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::LabeledScene;
use crate::geom::GraspRect;
use crate::tensor::Tensor;

/// Categories produced by the generator (one per [`ShapeKind`]).
pub const SYNTH_CLASSES: usize = 3;

const PALETTE: [[f64; 3]; 8] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.70, 0.20],
    [0.15, 0.30, 0.90],
    [0.95, 0.80, 0.10],
    [0.80, 0.20, 0.80],
    [0.10, 0.80, 0.85],
    [0.95, 0.55, 0.10],
    [0.98, 0.98, 0.98],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Bar,
    Ellipse,
    Diamond,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Bar, ShapeKind::Ellipse, ShapeKind::Diamond];

    pub fn category(self) -> usize {
        self as usize
    }

    /// Membership in shape-local coordinates normalised by the half extents.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            ShapeKind::Bar => u.abs() <= 1.0 && v.abs() <= 1.0,
            ShapeKind::Ellipse => u * u + v * v <= 1.0,
            ShapeKind::Diamond => u.abs() + v.abs() <= 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthObject {
    pub kind: ShapeKind,
    pub cx: f64,
    pub cy: f64,
    /// Extent along the major axis.
    pub length: f64,
    /// Extent along the minor axis.
    pub width: f64,
    /// Major-axis direction, degrees.
    pub angle: f64,
    pub color: [f64; 3],
}

impl SynthObject {
    /// Grasp centered on the object, closing across the minor axis with some
    /// clearance on both sides.
    pub fn grasp(&self) -> GraspRect {
        GraspRect::new(self.cx, self.cy, 1.3 * self.width, 0.6 * self.width, self.angle + 90.0)
            .expect("generator sizes are positive")
            .with_category(self.kind.category())
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.to_radians().sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * c + dy * s) / (self.length / 2.0);
        let v = (-dx * s + dy * c) / (self.width / 2.0);
        self.kind.contains(u, v)
    }
}

/// Object layout for a seed: centers in the middle 60% of the canvas and at
/// least 20% of the canvas apart when that is achievable.
pub fn synth_objects(seed: u64, n_objects: usize, canvas: usize) -> Vec<SynthObject> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    layout_objects(&mut rng, n_objects, canvas)
}

fn layout_objects(rng: &mut ChaCha8Rng, n_objects: usize, canvas: usize) -> Vec<SynthObject> {
    let c = canvas as f64;
    let mut colors: Vec<usize> = (0..PALETTE.len()).collect();
    colors.shuffle(rng);
    let mut objects: Vec<SynthObject> = Vec::with_capacity(n_objects);
    for k in 0..n_objects {
        let mut center = (0.0, 0.0);
        for _ in 0..200 {
            center = (rng.random_range(0.2 * c..0.8 * c), rng.random_range(0.2 * c..0.8 * c));
            let far = objects
                .iter()
                .all(|o| (o.cx - center.0).hypot(o.cy - center.1) >= 0.2 * c);
            if far {
                break;
            }
        }
        objects.push(SynthObject {
            kind: ShapeKind::ALL[rng.random_range(0..ShapeKind::ALL.len())],
            cx: center.0,
            cy: center.1,
            length: rng.random_range(0.3 * c..0.45 * c),
            width: rng.random_range(0.14 * c..0.2 * c),
            angle: rng.random_range(0.0..180.0),
            color: PALETTE[colors[k % colors.len()]],
        });
    }
    objects
}

/// Deterministic synthetic scene with `n_objects` objects on a square canvas.
pub fn synth_scene(seed: u64, n_objects: usize, canvas: usize) -> LabeledScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let objects = layout_objects(&mut rng, n_objects, canvas);
    synth_scene_with(&mut rng, &objects, canvas, format!("synth-{seed:08}"))
}

/// Render `objects` (later ones on top) over a background drawn from `rng`.
pub fn synth_scene_with(
    rng: &mut impl Rng,
    objects: &[SynthObject],
    canvas: usize,
    source_id: String,
) -> LabeledScene {
    let base: f64 = rng.random_range(0.3..0.55);
    let tint = [
        rng.random_range(-0.05..0.05),
        rng.random_range(-0.05..0.05),
        rng.random_range(-0.05..0.05),
    ];
    let dir = rng.random_range(0.0..std::f64::consts::PI);
    let period = rng.random_range(0.08..0.2) * canvas as f64;
    let n = canvas * canvas;
    let mut data = vec![0.0; 3 * n];
    for y in 0..canvas {
        for x in 0..canvas {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let top = objects.iter().rev().find(|o| o.contains(px, py));
            let stripe = 0.06 * ((px * dir.cos() + py * dir.sin()) * std::f64::consts::TAU / period).sin();
            let grain = rng.random_range(-0.03..0.03);
            for (c, slot) in data.iter_mut().skip(y * canvas + x).step_by(n).enumerate() {
                *slot = match top {
                    Some(o) => o.color[c],
                    None => (base + tint[c] + stripe + grain).clamp(0.0, 1.0),
                };
            }
        }
    }
    LabeledScene {
        image: Tensor::new(&[3, canvas, canvas], data).expect("canvas shape"),
        grasps: objects.iter().map(SynthObject::grasp).collect(),
        source_id,
    }
}
