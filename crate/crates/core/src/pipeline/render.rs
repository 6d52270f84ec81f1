//! Grasp overlays and graspability heatmaps.

use crate::data::bin_angle;
use crate::geom::GraspRect;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorBy {
    /// Hue follows the angle bin.
    Angle { bins: usize },
    Category,
}

#[derive(Debug, Clone)]
pub struct RenderOptions {
    pub color_by: ColorBy,
    /// Per-cell scores in `[0, 1]`, `[h, w]`, upsampled to the image.
    pub heatmap: Option<Tensor>,
    /// Blend weight of the heatmap colour.
    pub heat_alpha: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            color_by: ColorBy::Angle { bins: 18 },
            heatmap: None,
            heat_alpha: 0.45,
        }
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

pub fn angle_color(bin: usize, bins: usize) -> [f64; 3] {
    hsv(bin as f64 / bins.max(1) as f64, 0.9, 1.0)
}

pub fn category_color(category: usize) -> [f64; 3] {
    // golden-ratio hue steps keep neighbouring ids apart
    hsv(0.08 + category as f64 * 0.618_033_988_75, 0.85, 0.95)
}

fn heat_color(s: f64) -> [f64; 3] {
    let s = s.clamp(0.0, 1.0);
    [s, 0.25 * (1.0 - (2.0 * s - 1.0).abs()), 1.0 - s]
}

fn put(img: &mut Tensor, x: i64, y: i64, color: [f64; 3]) {
    let (h, w) = (img.shape()[1] as i64, img.shape()[2] as i64);
    if (0..w).contains(&x) && (0..h).contains(&y) {
        for (c, v) in color.iter().enumerate() {
            img.set(&[c, y as usize, x as usize], *v);
        }
    }
}

/// Bresenham segment between pixel indices, clipped to the image.
pub fn draw_line(img: &mut Tensor, from: (i64, i64), to: (i64, i64), color: [f64; 3]) {
    let (mut x, mut y) = from;
    let (dx, dy) = ((to.0 - x).abs(), -(to.1 - y).abs());
    let (sx, sy) = (if x < to.0 { 1 } else { -1 }, if y < to.1 { 1 } else { -1 });
    let mut err = dx + dy;
    loop {
        put(img, x, y, color);
        if (x, y) == to {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// The four edges of `r`; a vertex at `(x, y)` lands in pixel
/// `(⌊x⌋, ⌊y⌋)`.
pub fn draw_quad(img: &mut Tensor, r: &GraspRect, color: [f64; 3]) {
    let q = r.quad();
    if q.vertices.iter().any(|p| p.x.abs().max(p.y.abs()) > 1e5) {
        log::warn!("not drawing a grasp with vertices far outside the image");
        return;
    }
    let v = q.vertices.map(|p| (p.x.floor() as i64, p.y.floor() as i64));
    for k in 0..4 {
        draw_line(img, v[k], v[(k + 1) % 4], color);
    }
}

/// Copy of `image` with the heatmap blended in, then the grasps drawn on top.
pub fn render_scene(image: &Tensor, grasps: &[GraspRect], opts: &RenderOptions) -> Tensor {
    let mut out = image.clone();
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if let Some(heat) = &opts.heatmap {
        let (hh, hw) = (heat.shape()[0], heat.shape()[1]);
        let a = opts.heat_alpha;
        for y in 0..h {
            for x in 0..w {
                let s = heat.get(&[(y * hh / h).min(hh - 1), (x * hw / w).min(hw - 1)]);
                let col = heat_color(s);
                for (c, cv) in col.iter().enumerate() {
                    let p = out.get(&[c, y, x]);
                    out.set(&[c, y, x], (1.0 - a) * p + a * cv);
                }
            }
        }
    }
    for g in grasps {
        let color = match opts.color_by {
            ColorBy::Angle { bins } => angle_color(bin_angle(g.theta, bins), bins),
            ColorBy::Category => category_color(g.category),
        };
        draw_quad(&mut out, g, color);
    }
    out
}
