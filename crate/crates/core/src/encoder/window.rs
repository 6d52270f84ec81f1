//! Window partitioning, relative position bias and (shifted) window attention.

use std::sync::Arc;

use crate::nn::{Graph, Linear};
use crate::tensor::{invalid, Result, Tensor, Var};

/// Additive mask between tokens that were not neighbours before the cyclic
/// shift.
pub const MASK_VALUE: f64 = -1e9;

/// Precomputed token ↔ window bookkeeping for one grid / window / shift
/// combination.
#[derive(Debug, Clone)]
pub struct WindowLayout {
    pub grid_h: usize,
    pub grid_w: usize,
    pub window: usize,
    pub shift: usize,
    /// Window size the relative-bias table was built for (≥ `window`).
    pub table_window: usize,
    /// `token_of[w * T + t]`: grid token at slot `t` of window `w`.
    token_of: Vec<usize>,
    /// Inverse of `token_of`.
    slot_of: Vec<usize>,
    /// `rel_index[i * T + j]`: bias-table row for the slot pair `(i, j)`.
    rel_index: Vec<usize>,
    /// `[n_windows, T, T]` additive mask, present when `shift > 0`.
    mask: Option<Tensor>,
}

impl WindowLayout {
    pub fn new(
        grid_h: usize,
        grid_w: usize,
        window: usize,
        shift: usize,
        table_window: usize,
    ) -> Result<Self> {
        if window == 0 || grid_h % window != 0 || grid_w % window != 0 {
            return Err(invalid(
                "window_layout",
                format!("grid {grid_h}x{grid_w} is not tiled by {window}x{window} windows"),
            ));
        }
        if shift >= window {
            return Err(invalid(
                "window_layout",
                format!("shift {shift} must be smaller than the window size {window}"),
            ));
        }
        if table_window < window {
            return Err(invalid(
                "window_layout",
                format!("bias table for window {table_window} cannot serve window {window}"),
            ));
        }
        let (nwh, nww) = (grid_h / window, grid_w / window);
        let t_len = window * window;
        let n_windows = nwh * nww;
        let mut token_of = Vec::with_capacity(n_windows * t_len);
        for wr in 0..nwh {
            for wc in 0..nww {
                for tr in 0..window {
                    for tc in 0..window {
                        // rolled grid position → original position
                        let r = (wr * window + tr + shift) % grid_h;
                        let c = (wc * window + tc + shift) % grid_w;
                        token_of.push(r * grid_w + c);
                    }
                }
            }
        }
        let mut slot_of = vec![0; token_of.len()];
        for (slot, &tok) in token_of.iter().enumerate() {
            slot_of[tok] = slot;
        }
        let span = 2 * table_window - 1;
        let mut rel_index = Vec::with_capacity(t_len * t_len);
        for i in 0..t_len {
            for j in 0..t_len {
                let dr = (i / window) as isize - (j / window) as isize + table_window as isize - 1;
                let dc = (i % window) as isize - (j % window) as isize + table_window as isize - 1;
                rel_index.push(dr as usize * span + dc as usize);
            }
        }
        let mask = (shift > 0).then(|| {
            let region = |pos: usize, len: usize| {
                if pos < len - window {
                    0
                } else if pos < len - shift {
                    1
                } else {
                    2
                }
            };
            let mut data = Vec::with_capacity(n_windows * t_len * t_len);
            for wr in 0..nwh {
                for wc in 0..nww {
                    let label = |t: usize| {
                        (
                            region(wr * window + t / window, grid_h),
                            region(wc * window + t % window, grid_w),
                        )
                    };
                    for i in 0..t_len {
                        for j in 0..t_len {
                            data.push(if label(i) == label(j) { 0.0 } else { MASK_VALUE });
                        }
                    }
                }
            }
            Tensor::new(&[n_windows, t_len, t_len], data).expect("mask shape")
        });
        Ok(Self {
            grid_h,
            grid_w,
            window,
            shift,
            table_window,
            token_of,
            slot_of,
            rel_index,
            mask,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn n_windows(&self) -> usize {
        (self.grid_h / self.window) * (self.grid_w / self.window)
    }

    pub fn window_len(&self) -> usize {
        self.window * self.window
    }

    pub fn bias_table_rows(&self) -> usize {
        (2 * self.table_window - 1).pow(2)
    }

    /// Bias-table row used for slots `i`, `j` of any window.
    pub fn rel_index(&self, i: usize, j: usize) -> usize {
        self.rel_index[i * self.window_len() + j]
    }

    pub fn mask(&self) -> Option<&Tensor> {
        self.mask.as_ref()
    }

    /// `[heads, N, d]` → `[n_windows, heads, T, d]`.
    fn partition_index(&self, heads: usize, d: usize) -> Arc<[usize]> {
        let n = self.n_tokens();
        let t_len = self.window_len();
        let mut idx = Vec::with_capacity(heads * n * d);
        for w in 0..self.n_windows() {
            for h in 0..heads {
                for t in 0..t_len {
                    let base = h * n * d + self.token_of[w * t_len + t] * d;
                    idx.extend(base..base + d);
                }
            }
        }
        idx.into()
    }

    /// `[n_windows, heads, T, d]` → `[heads, N, d]`.
    fn merge_index(&self, heads: usize, d: usize) -> Arc<[usize]> {
        let n = self.n_tokens();
        let t_len = self.window_len();
        let mut idx = Vec::with_capacity(heads * n * d);
        for h in 0..heads {
            for tok in 0..n {
                let slot = self.slot_of[tok];
                let (w, t) = (slot / t_len, slot % t_len);
                let base = ((w * heads + h) * t_len + t) * d;
                idx.extend(base..base + d);
            }
        }
        idx.into()
    }

    /// Bias table `[(2M-1)², heads]` → `[heads, T, T]`.
    fn bias_index(&self, heads: usize) -> Arc<[usize]> {
        let tt = self.rel_index.len();
        let mut idx = Vec::with_capacity(heads * tt);
        for h in 0..heads {
            idx.extend(self.rel_index.iter().map(|&r| r * heads + h));
        }
        idx.into()
    }
}

/// `Q = X·W_Q`, `K = X·W_K`, `V = X·W_V`, each split into `[heads, N, C/heads]`.
pub fn qkv_project(
    g: &mut Graph,
    tokens: Var,
    wq: &Linear,
    wk: &Linear,
    wv: &Linear,
    heads: usize,
) -> Result<(Var, Var, Var)> {
    let shape = g.tape.shape(tokens).to_vec();
    let [n, c] = shape[..] else {
        return Err(invalid("qkv_project", format!("tokens must be [N, C], got {shape:?}")));
    };
    if heads == 0 || c % heads != 0 {
        return Err(invalid(
            "qkv_project",
            format!("{c} channels do not split into {heads} heads"),
        ));
    }
    let d = c / heads;
    let mut split = |lin: &Linear| -> Result<Var> {
        let p = lin.forward(g, tokens)?;
        if g.tape.shape(p) != [n, c] {
            return Err(invalid(
                "qkv_project",
                format!("projection gives {:?}, want [{n}, {c}]", g.tape.shape(p)),
            ));
        }
        let p = g.tape.reshape(p, &[n, heads, d])?;
        g.tape.permute(p, &[1, 0, 2])
    };
    Ok((split(wq)?, split(wk)?, split(wv)?))
}

fn check_qkv(g: &Graph, q: Var, k: Var, v: Var, layout: &WindowLayout) -> Result<(usize, usize)> {
    let s = g.tape.shape(q).to_vec();
    if s.len() != 3 || s[1] != layout.n_tokens() {
        return Err(invalid(
            "window_attention",
            format!(
                "Q has shape {s:?} but the layout covers {} tokens",
                layout.n_tokens()
            ),
        ));
    }
    for other in [k, v] {
        if g.tape.shape(other) != s.as_slice() {
            return Err(crate::tensor::TensorError::ShapeMismatch {
                op: "window_attention",
                lhs: s.clone(),
                rhs: g.tape.shape(other).to_vec(),
            });
        }
    }
    Ok((s[0], s[2]))
}

/// Softmax attention weights per window: `[n_windows, heads, T, T]`.
pub fn attention_probs(
    g: &mut Graph,
    q: Var,
    k: Var,
    bias_table: Var,
    layout: &WindowLayout,
) -> Result<Var> {
    let (heads, d) = check_qkv(g, q, k, k, layout)?;
    if g.tape.shape(bias_table) != [layout.bias_table_rows(), heads] {
        return Err(invalid(
            "window_attention",
            format!(
                "bias table {:?}, want [{}, {heads}]",
                g.tape.shape(bias_table),
                layout.bias_table_rows()
            ),
        ));
    }
    let (nw, t) = (layout.n_windows(), layout.window_len());
    let part = layout.partition_index(heads, d);
    let qw = g.tape.gather(q, part.clone(), &[nw, heads, t, d])?;
    let kw = g.tape.gather(k, part, &[nw, heads, t, d])?;
    let qw = g.tape.mul_scalar(qw, 1.0 / (d as f64).sqrt())?;
    let kt = g.tape.transpose_last2(kw)?;
    let scores = g.tape.matmul(qw, kt)?;
    let bias = g.tape.gather(bias_table, layout.bias_index(heads), &[heads, t, t])?;
    let mut scores = g.tape.add(scores, bias)?;
    if let Some(mask) = layout.mask() {
        let mut full = Vec::with_capacity(nw * heads * t * t);
        for win in mask.data().chunks(t * t) {
            for _ in 0..heads {
                full.extend_from_slice(win);
            }
        }
        let mask = g.tape.constant(Tensor::new(&[nw, heads, t, t], full)?);
        scores = g.tape.add(scores, mask)?;
    }
    g.tape.softmax_lastdim(scores)
}

/// `SoftMax(Q·Kᵀ/√d + B)·V` computed independently inside every window of
/// `layout` (cyclically shifted and masked when `layout.shift > 0`).
/// Inputs and output are `[heads, N, d]` in grid token order.
pub fn window_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    bias_table: Var,
    layout: &WindowLayout,
) -> Result<Var> {
    let (heads, d) = check_qkv(g, q, k, v, layout)?;
    let probs = attention_probs(g, q, k, bias_table, layout)?;
    let (nw, t) = (layout.n_windows(), layout.window_len());
    let vw = g
        .tape
        .gather(v, layout.partition_index(heads, d), &[nw, heads, t, d])?;
    let out = g.tape.matmul(probs, vw)?;
    g.tape
        .gather(out, layout.merge_index(heads, d), &[heads, layout.n_tokens(), d])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;

    #[test]
    fn layout_rejects_bad_shift_and_tiling() {
        assert!(WindowLayout::new(4, 4, 2, 2, 2).is_err());
        assert!(WindowLayout::new(5, 4, 2, 0, 2).is_err());
        assert!(WindowLayout::new(4, 4, 2, 1, 2).is_ok());
    }

    #[test]
    fn relative_index_is_translation_consistent() {
        let l = WindowLayout::new(8, 8, 4, 0, 4);
        let l = l.unwrap();
        let w = 4;
        for i in 0..16 {
            for j in 0..16 {
                for k in 0..16 {
                    for m in 0..16 {
                        let d1 = ((i / w) as isize - (j / w) as isize, (i % w) as isize - (j % w) as isize);
                        let d2 = ((k / w) as isize - (m / w) as isize, (k % w) as isize - (m % w) as isize);
                        if d1 == d2 {
                            assert_eq!(l.rel_index(i, j), l.rel_index(k, m));
                        } else {
                            assert_ne!(l.rel_index(i, j), l.rel_index(k, m));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn partition_then_merge_is_identity() {
        let l = WindowLayout::new(4, 6, 2, 1, 2).unwrap();
        let store = ParamStore::new();
        let mut g = Graph::inference(&store);
        let x = g
            .tape
            .constant(Tensor::from_fn(&[2, 24, 3], |i| i as f64));
        let p = g
            .tape
            .gather(x, l.partition_index(2, 3), &[6, 2, 4, 3])
            .unwrap();
        let back = g.tape.gather(p, l.merge_index(2, 3), &[2, 24, 3]).unwrap();
        assert_eq!(g.tape.value(back), g.tape.value(x));
    }
}
