//! Multi-scale fusion decoder, dense grasp head, candidate decoding and NMS.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::bin_center;
use crate::encoder::FeaturePyramid;
use crate::geom::{jaccard, GraspRect};
use crate::nn::{Conv2d, Graph, ParamStore};
use crate::tensor::{invalid, Result, Tensor, TensorError, Var};

pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.5;
pub const DEFAULT_NMS_IOU: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    /// Width of the fused stride-8 map.
    pub fused_channels: usize,
    /// Width of the two 3×3 head convolutions.
    pub head_channels: usize,
    pub angle_bins: usize,
    pub num_classes: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            fused_channels: 64,
            head_channels: 64,
            angle_bins: 18,
            num_classes: 3,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fused_channels == 0 || self.head_channels == 0 {
            return Err(invalid("decoder_config", "channel widths must be positive"));
        }
        if self.angle_bins < 2 || self.num_classes < 1 {
            return Err(invalid(
                "decoder_config",
                "need at least 2 angle bins and 1 object class",
            ));
        }
        Ok(())
    }

    pub fn layout(&self) -> MapLayout {
        MapLayout {
            angle_bins: self.angle_bins,
            num_classes: self.num_classes,
        }
    }
}

/// Channel layout of a dense grasp map:
/// `[dx, dy, log_w, log_h, angle logits.., object logits.., graspability]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MapLayout {
    pub angle_bins: usize,
    pub num_classes: usize,
}

impl MapLayout {
    pub const DX: usize = 0;
    pub const DY: usize = 1;
    pub const LOG_W: usize = 2;
    pub const LOG_H: usize = 3;
    pub const ANGLE: usize = 4;

    pub fn channels(&self) -> usize {
        4 + self.angle_bins + self.num_classes + 1
    }

    pub fn obj(&self) -> usize {
        Self::ANGLE + self.angle_bins
    }

    pub fn graspability(&self) -> usize {
        self.obj() + self.num_classes
    }
}

/// Per-cell grasp predictions for one image, `[channels, H', W']`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGraspMap {
    pub layout: MapLayout,
    data: Tensor,
}

impl DenseGraspMap {
    pub fn new(layout: MapLayout, data: Tensor) -> Result<Self> {
        let s = data.shape();
        if s.len() != 3 || s[0] != layout.channels() {
            return Err(invalid(
                "dense_grasp_map",
                format!("expected [{}, H, W], got {s:?}", layout.channels()),
            ));
        }
        if !data.all_finite() {
            return Err(TensorError::NonFinite { op: "dense_grasp_map" });
        }
        Ok(Self { layout, data })
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn at(&self, channel: usize, i: usize, j: usize) -> f64 {
        self.data.get(&[channel, i, j])
    }

    /// Sigmoid of the graspability logit at cell `(i, j)`.
    pub fn score(&self, i: usize, j: usize) -> f64 {
        crate::tensor::sigmoid(self.at(self.layout.graspability(), i, j))
    }

    /// `[H', W']` graspability probabilities.
    pub fn score_map(&self) -> Tensor {
        let (h, w) = (self.height(), self.width());
        Tensor::from_fn(&[h, w], |k| self.score(k / w, k % w))
    }

    fn argmax(&self, from: usize, len: usize, i: usize, j: usize) -> usize {
        (0..len)
            .max_by(|&a, &b| self.at(from + a, i, j).total_cmp(&self.at(from + b, i, j)).then(b.cmp(&a)))
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspCandidate {
    pub rect: GraspRect,
    pub angle_class: usize,
    pub score: f64,
}

/// Fusion convolutions plus the per-cell prediction head.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    lateral: [Conv2d; 3],
    head1: Conv2d,
    head2: Conv2d,
    out: Conv2d,
}

impl Decoder {
    pub fn new(
        store: &mut ParamStore,
        cfg: &DecoderConfig,
        pyramid_channels: [usize; 3],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let cf = cfg.fused_channels;
        let ch = cfg.head_channels;
        let lateral = [
            Conv2d::new(store, "dec.lateral8", pyramid_channels[0], cf, 3, 1, 1, rng),
            Conv2d::new(store, "dec.lateral16", pyramid_channels[1], cf, 1, 1, 0, rng),
            Conv2d::new(store, "dec.lateral32", pyramid_channels[2], cf, 1, 1, 0, rng),
        ];
        let head1 = Conv2d::new(store, "dec.head1", cf, ch, 3, 1, 1, rng);
        let head2 = Conv2d::new(store, "dec.head2", ch, ch, 3, 1, 1, rng);
        let out = Conv2d::new(store, "dec.out", ch, cfg.layout().channels(), 1, 1, 0, rng);
        // Box rows start at zero (a stride-sized box on the cell center) so
        // growth of the shared features cannot throw them into the flat,
        // saturated part of the offset/size parameterisation.
        store.get_mut(out.weight).data_mut()[..4 * ch].fill(0.0);
        Ok(Self {
            lateral,
            head1,
            head2,
            out,
            cfg: cfg.clone(),
        })
    }

    pub fn layout(&self) -> MapLayout {
        self.cfg.layout()
    }

    /// Fuse a batch of pyramids into `[B, C_f, H/8, W/8]`: 3×3 conv on the
    /// stride-8 map, 1×1 convs plus nearest upsampling on the coarser two,
    /// then a sum.
    pub fn fuse_batch(&self, g: &mut Graph, pyramids: &[FeaturePyramid]) -> Result<Var> {
        let first = pyramids
            .first()
            .ok_or_else(|| invalid("fuse_scales", "empty batch"))?;
        let s = first.strides;
        if s[1] != 2 * s[0] || s[2] != 4 * s[0] {
            return Err(invalid("fuse_scales", format!("unsupported strides {s:?}")));
        }
        let mut fused = None;
        for (level, factor) in [(0, 1), (1, 2), (2, 4)] {
            let mut parts = Vec::with_capacity(pyramids.len());
            for p in pyramids {
                let m = p.maps[level];
                let shape = g.tape.shape(m).to_vec();
                if shape.len() != 3 {
                    return Err(invalid("fuse_scales", format!("feature map {shape:?} is not [C, H, W]")));
                }
                parts.push(g.tape.reshape(m, &[1, shape[0], shape[1], shape[2]])?);
            }
            let x = if parts.len() == 1 { parts[0] } else { g.tape.concat(&parts, 0)? };
            let mut y = self.lateral[level].forward(g, x)?;
            if factor > 1 {
                y = g.tape.upsample_nearest(y, factor)?;
            }
            fused = Some(match fused {
                None => y,
                Some(f) => {
                    if g.tape.shape(f) != g.tape.shape(y) {
                        return Err(TensorError::ShapeMismatch {
                            op: "fuse_scales",
                            lhs: g.tape.shape(f).to_vec(),
                            rhs: g.tape.shape(y).to_vec(),
                        });
                    }
                    g.tape.add(f, y)?
                }
            });
        }
        Ok(fused.expect("three levels"))
    }

    /// Single-pyramid fusion, `[C_f, H/8, W/8]`.
    pub fn fuse_scales(&self, g: &mut Graph, pyramid: &FeaturePyramid) -> Result<Var> {
        let f = self.fuse_batch(g, std::slice::from_ref(pyramid))?;
        let s = g.tape.shape(f)[1..].to_vec();
        g.tape.reshape(f, &s)
    }

    /// `[B, C_f, H, W]` (or `[C_f, H, W]`) → raw map logits with the same
    /// leading layout and `layout().channels()` channels.
    pub fn grasp_head(&self, g: &mut Graph, fused: Var) -> Result<Var> {
        let shape = g.tape.shape(fused).to_vec();
        let single = shape.len() == 3;
        let x = if single {
            g.tape.reshape(fused, &[1, shape[0], shape[1], shape[2]])?
        } else {
            fused
        };
        let h = self.head1.forward(g, x)?;
        let h = g.tape.gelu(h)?;
        let h = self.head2.forward(g, h)?;
        let h = g.tape.gelu(h)?;
        let y = self.out.forward(g, h)?;
        if single {
            let s = g.tape.shape(y)[1..].to_vec();
            g.tape.reshape(y, &s)
        } else {
            Ok(y)
        }
    }

    /// Fusion and head for a batch: `[B, channels, H/8, W/8]`.
    pub fn forward(&self, g: &mut Graph, pyramids: &[FeaturePyramid]) -> Result<Var> {
        let fused = self.fuse_batch(g, pyramids)?;
        self.grasp_head(g, fused)
    }

    /// Split a `[B, C, H, W]` head output into per-image maps.
    pub fn dense_maps(&self, value: &Tensor) -> Result<Vec<DenseGraspMap>> {
        let s = value.shape();
        if s.len() != 4 {
            return Err(invalid("dense_maps", format!("expected [B, C, H, W], got {s:?}")));
        }
        let per = s[1] * s[2] * s[3];
        value
            .data()
            .chunks(per)
            .map(|c| DenseGraspMap::new(self.layout(), Tensor::new(&s[1..], c.to_vec())?))
            .collect()
    }
}

/// Every cell whose graspability probability reaches `score_threshold`,
/// decoded into image coordinates and sorted by descending score.
pub fn decode_candidates(map: &DenseGraspMap, stride: f64, score_threshold: f64) -> Vec<GraspCandidate> {
    let l = map.layout;
    let mut out = Vec::new();
    for i in 0..map.height() {
        for j in 0..map.width() {
            let score = map.score(i, j);
            if score < score_threshold {
                continue;
            }
            let x = (j as f64 + 0.5 + map.at(MapLayout::DX, i, j).tanh()) * stride;
            let y = (i as f64 + 0.5 + map.at(MapLayout::DY, i, j).tanh()) * stride;
            let w = map.at(MapLayout::LOG_W, i, j).exp() * stride;
            let h = map.at(MapLayout::LOG_H, i, j).exp() * stride;
            let angle_class = map.argmax(MapLayout::ANGLE, l.angle_bins, i, j);
            let category = map.argmax(l.obj(), l.num_classes, i, j);
            let theta = bin_center(angle_class, l.angle_bins);
            let Ok(rect) = GraspRect::new(x, y, w, h, theta) else {
                log::debug!("skipping degenerate candidate at cell ({i}, {j})");
                continue;
            };
            out.push(GraspCandidate {
                rect: rect.with_category(category).with_confidence(score),
                angle_class,
                score,
            });
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out
}

/// Greedy suppression over score-sorted candidates. With `per_category` a
/// candidate is only suppressed by kept candidates of its own category.
pub fn nms_filter(cands: &[GraspCandidate], iou_threshold: f64, per_category: bool) -> Vec<GraspCandidate> {
    let mut kept: Vec<GraspCandidate> = Vec::new();
    for c in cands {
        let suppressed = kept.iter().any(|k| {
            (!per_category || k.rect.category == c.rect.category) && jaccard(&k.rect, &c.rect) > iou_threshold
        });
        if !suppressed {
            kept.push(*c);
        }
    }
    kept
}
