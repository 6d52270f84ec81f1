//! Hierarchical shifted-window transformer encoder.
//!
//! The image is cut into `P×P` patches, embedded, and pushed through four
//! stages of window-attention blocks with 2×2 patch merging in between.
//! Stages 2–4 are exported as a stride 8/16/32 feature pyramid.

mod window;

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use window::{attention_probs, qkv_project, window_attention, WindowLayout, MASK_VALUE};

use crate::nn::{Graph, Init, LayerNorm, Linear, ParamId, ParamStore, PROJ_INIT};
use crate::tensor::{invalid, Result, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depths: [usize; 4],
    pub num_heads: [usize; 4],
    pub window_size: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

fn default_mlp_ratio() -> usize {
    4
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderConfig {
    /// 224 px input, 7×7 windows.
    pub fn desk() -> Self {
        Self {
            image_size: 224,
            patch_size: 4,
            embed_dim: 32,
            depths: [2, 2, 2, 2],
            num_heads: [1, 2, 4, 8],
            window_size: 7,
            mlp_ratio: 4,
        }
    }

    /// 64 px input, 4×4 windows, one block per stage.
    pub fn micro() -> Self {
        Self {
            image_size: 64,
            patch_size: 4,
            embed_dim: 16,
            depths: [1, 1, 1, 1],
            num_heads: [1, 2, 4, 8],
            window_size: 4,
            mlp_ratio: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(invalid("encoder_config", msg));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        let grid = self.image_size / self.patch_size;
        if grid % 8 != 0 {
            return bad(format!(
                "patch grid {grid} must halve three times (multiple of 8)"
            ));
        }
        if self.window_size == 0 || self.embed_dim == 0 || self.mlp_ratio == 0 {
            return bad("window size, embed dim and mlp ratio must be positive".into());
        }
        for s in 0..4 {
            if self.depths[s] == 0 {
                return bad(format!("stage {} has no blocks", s + 1));
            }
            let dim = self.stage_dim(s);
            if self.num_heads[s] == 0 || dim % self.num_heads[s] != 0 {
                return bad(format!(
                    "stage {} width {dim} is not divisible by {} heads",
                    s + 1,
                    self.num_heads[s]
                ));
            }
            let g = self.stage_grid(s);
            if g > self.window_size && g % self.window_size != 0 {
                return bad(format!(
                    "stage {} grid {g} is not tiled by window {}",
                    s + 1,
                    self.window_size
                ));
            }
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        self.stage_grid(0).pow(2)
    }

    pub fn stage_dim(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    pub fn stage_grid(&self, stage: usize) -> usize {
        (self.image_size / self.patch_size) >> stage
    }

    /// Effective `(window, shift)` for a stage: once the grid fits inside a
    /// single window the window shrinks to the grid and shifting is off.
    pub fn stage_window(&self, stage: usize) -> (usize, usize) {
        let g = self.stage_grid(stage);
        if g <= self.window_size {
            (g, 0)
        } else {
            (self.window_size, self.window_size / 2)
        }
    }

    /// Strides of the exported pyramid relative to the input (8/16/32 for
    /// 4-pixel patches).
    pub fn pyramid_strides(&self) -> [usize; 3] {
        [2 * self.patch_size, 4 * self.patch_size, 8 * self.patch_size]
    }

    /// Channel counts of the exported pyramid.
    pub fn pyramid_channels(&self) -> [usize; 3] {
        [self.stage_dim(1), self.stage_dim(2), self.stage_dim(3)]
    }
}

/// Stage 2–4 features as `[C, H, W]` tape variables.
#[derive(Debug, Clone, Copy)]
pub struct FeaturePyramid {
    pub maps: [Var; 3],
    pub strides: [usize; 3],
}

/// Multi-head self-attention inside (shifted) windows.
#[derive(Debug, Clone)]
pub struct WindowAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub proj: Linear,
    /// `[(2M-1)², heads]`
    pub bias_table: ParamId,
    pub heads: usize,
}

impl WindowAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        table_window: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let rows = (2 * table_window - 1).pow(2);
        Self {
            wq: Linear::new(store, &format!("{name}.q"), dim, dim, true, PROJ_INIT, rng),
            wk: Linear::new(store, &format!("{name}.k"), dim, dim, true, PROJ_INIT, rng),
            wv: Linear::new(store, &format!("{name}.v"), dim, dim, true, PROJ_INIT, rng),
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, true, PROJ_INIT, rng),
            bias_table: store.add(
                format!("{name}.rel_bias"),
                Init::Zeros.tensor(&[rows, heads], rng),
            ),
            heads,
        }
    }

    /// `[N, C]` tokens in grid order → `[N, C]`.
    pub fn forward(&self, g: &mut Graph, x: Var, layout: &WindowLayout) -> Result<Var> {
        let (q, k, v) = qkv_project(g, x, &self.wq, &self.wk, &self.wv, self.heads)?;
        let table = g.param(self.bias_table);
        let out = window_attention(g, q, k, v, table, layout)?;
        let n = layout.n_tokens();
        let out = g.tape.permute(out, &[1, 0, 2])?;
        let out = g.tape.reshape(out, &[n, self.wq.out_dim])?;
        self.proj.forward(g, out)
    }
}

/// norm → (shifted) window attention → residual → norm → MLP → residual.
#[derive(Debug, Clone)]
pub struct SwinBlock {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub shifted: bool,
}

impl SwinBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        table_window: usize,
        mlp_ratio: usize,
        shifted: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let hidden = dim * mlp_ratio;
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: WindowAttention::new(store, &format!("{name}.attn"), dim, heads, table_window, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true, PROJ_INIT, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, true, PROJ_INIT, rng),
            shifted,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, layout: &WindowLayout) -> Result<Var> {
        let h = self.norm1.forward(g, x)?;
        let a = self.attn.forward(g, h, layout)?;
        let x = g.tape.add(x, a)?;
        let h = self.norm2.forward(g, x)?;
        let h = self.fc1.forward(g, h)?;
        let h = g.tape.gelu(h)?;
        let h = self.fc2.forward(g, h)?;
        g.tape.add(x, h)
    }
}

/// Concatenate every 2×2 neighbourhood and project `4C → 2C`.
#[derive(Debug, Clone)]
pub struct PatchMerge {
    pub reduction: Linear,
    pub in_dim: usize,
}

impl PatchMerge {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            reduction: Linear::new(store, &format!("{name}.reduction"), 4 * in_dim, 2 * in_dim, false, PROJ_INIT, rng),
            in_dim,
        }
    }

    /// `[H·W, C]` row-major grid → `[(H/2)·(W/2), 2C]`.
    pub fn forward(&self, g: &mut Graph, x: Var, h: usize, w: usize) -> Result<Var> {
        let cat = merge_gather(g, x, h, w)?;
        self.reduction.forward(g, cat)
    }
}

/// The 2×2 concatenation step of patch merging: `[H·W, C]` → `[(H/2)·(W/2), 4C]`
/// with neighbours ordered (0,0), (1,0), (0,1), (1,1) as (row, col) offsets.
pub fn merge_gather(g: &mut Graph, x: Var, h: usize, w: usize) -> Result<Var> {
    let shape = g.tape.shape(x).to_vec();
    let [n, c] = shape[..] else {
        return Err(invalid("patch_merge", format!("expected [N, C], got {shape:?}")));
    };
    if n != h * w {
        return Err(invalid("patch_merge", format!("{n} tokens do not form a {h}x{w} grid")));
    }
    if h % 2 != 0 || w % 2 != 0 {
        return Err(invalid("patch_merge", format!("grid {h}x{w} has an odd extent")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(n * c);
    for i in 0..oh {
        for j in 0..ow {
            for (dr, dc) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let base = ((2 * i + dr) * w + 2 * j + dc) * c;
                idx.extend(base..base + c);
            }
        }
    }
    g.tape.gather(x, idx.into(), &[oh * ow, 4 * c])
}

/// `[3, H, W]` image → `[N, 3·P·P]` patches in row-major grid order; each row
/// holds channel-major, then row, then column pixel values.
pub fn patch_partition(g: &mut Graph, image: Var, patch: usize) -> Result<Var> {
    let shape = g.tape.shape(image).to_vec();
    let [ch, h, w] = shape[..] else {
        return Err(invalid("patch_partition", format!("expected [3, H, W], got {shape:?}")));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(invalid(
            "patch_partition",
            format!("{h}x{w} image is not divisible into {patch}x{patch} patches"),
        ));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut idx = Vec::with_capacity(ch * h * w);
    for pr in 0..gh {
        for pc in 0..gw {
            for c in 0..ch {
                for py in 0..patch {
                    for px in 0..patch {
                        idx.push(c * h * w + (pr * patch + py) * w + pc * patch + px);
                    }
                }
            }
        }
    }
    let idx: Arc<[usize]> = idx.into();
    g.tape.gather(image, idx, &[gh * gw, ch * patch * patch])
}

#[derive(Debug, Clone)]
struct Stage {
    merge: Option<PatchMerge>,
    blocks: Vec<SwinBlock>,
    layouts: [WindowLayout; 2],
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub patch_embed: Linear,
    pub pos_embed: ParamId,
    stages: Vec<Stage>,
    out_norms: Vec<LayerNorm>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let p = cfg.patch_size;
        let patch_embed = Linear::new(store, "enc.patch_embed", 3 * p * p, cfg.embed_dim, true, PROJ_INIT, rng);
        let pos_embed = store.add("enc.pos_embed", PROJ_INIT.tensor(&[cfg.n_patches(), cfg.embed_dim], rng));
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            let dim = cfg.stage_dim(s);
            let merge = (s > 0).then(|| PatchMerge::new(store, &format!("enc.merge{s}"), cfg.stage_dim(s - 1), rng));
            let (window, shift) = cfg.stage_window(s);
            let grid = cfg.stage_grid(s);
            let blocks = (0..cfg.depths[s])
                .map(|b| {
                    SwinBlock::new(
                        store,
                        &format!("enc.stage{s}.block{b}"),
                        dim,
                        cfg.num_heads[s],
                        window,
                        cfg.mlp_ratio,
                        b % 2 == 1 && shift > 0,
                        rng,
                    )
                })
                .collect();
            let layouts = [
                WindowLayout::new(grid, grid, window, 0, window)?,
                WindowLayout::new(grid, grid, window, shift, window)?,
            ];
            stages.push(Stage { merge, blocks, layouts });
        }
        let out_norms = (1..4)
            .map(|s| LayerNorm::new(store, &format!("enc.out_norm{s}"), cfg.stage_dim(s)))
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            patch_embed,
            pos_embed,
            stages,
            out_norms,
        })
    }

    /// Patch tokens plus absolute position embedding: `[N, embed_dim]`.
    pub fn patch_partition_embed(&self, g: &mut Graph, image: Var) -> Result<Var> {
        let patches = patch_partition(g, image, self.cfg.patch_size)?;
        let tokens = self.patch_embed.forward(g, patches)?;
        let pos = g.param(self.pos_embed);
        if g.tape.shape(tokens) != g.tape.shape(pos) {
            return Err(TensorError::ShapeMismatch {
                op: "patch_partition_embed",
                lhs: g.tape.shape(tokens).to_vec(),
                rhs: g.tape.shape(pos).to_vec(),
            });
        }
        g.tape.add(tokens, pos)
    }

    pub fn forward(&self, g: &mut Graph, image: Var) -> Result<FeaturePyramid> {
        let want = [3, self.cfg.image_size, self.cfg.image_size];
        if g.tape.shape(image) != want {
            return Err(TensorError::ShapeMismatch {
                op: "encoder_forward",
                lhs: g.tape.shape(image).to_vec(),
                rhs: want.to_vec(),
            });
        }
        let mut x = self.patch_partition_embed(g, image)?;
        let mut maps = Vec::with_capacity(3);
        for (s, stage) in self.stages.iter().enumerate() {
            if let Some(m) = &stage.merge {
                let prev = self.cfg.stage_grid(s - 1);
                x = m.forward(g, x, prev, prev)?;
            }
            for block in &stage.blocks {
                x = block.forward(g, x, &stage.layouts[block.shifted as usize])?;
            }
            if s > 0 {
                let y = self.out_norms[s - 1].forward(g, x)?;
                let grid = self.cfg.stage_grid(s);
                let y = g.tape.transpose_last2(y)?;
                maps.push(g.tape.reshape(y, &[self.cfg.stage_dim(s), grid, grid])?);
            }
        }
        Ok(FeaturePyramid {
            maps: [maps[0], maps[1], maps[2]],
            strides: self.cfg.pyramid_strides(),
        })
    }

    pub fn forward_batch(&self, g: &mut Graph, images: &[Var]) -> Result<Vec<FeaturePyramid>> {
        images.iter().map(|&im| self.forward(g, im)).collect()
    }

    pub fn blocks(&self) -> impl Iterator<Item = &SwinBlock> {
        self.stages.iter().flat_map(|s| s.blocks.iter())
    }

    pub fn merges(&self) -> impl Iterator<Item = &PatchMerge> {
        self.stages.iter().filter_map(|s| s.merge.as_ref())
    }
}
