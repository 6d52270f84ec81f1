use std::sync::Arc;

use super::tape::{BinaryKind, ConvGeom, Op, Tape, UnaryKind, Var};
use super::{invalid, permute_index, Result, Tensor, TensorError};

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_A: f64 = 0.044_715;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn unary_name(kind: UnaryKind) -> &'static str {
    match kind {
        UnaryKind::Neg => "neg",
        UnaryKind::Exp => "exp",
        UnaryKind::Ln => "ln",
        UnaryKind::Tanh => "tanh",
        UnaryKind::Sigmoid => "sigmoid",
        UnaryKind::Atan => "atan",
        UnaryKind::Gelu => "gelu",
        UnaryKind::Relu => "relu",
        UnaryKind::Softplus => "softplus",
        UnaryKind::Square => "square",
        UnaryKind::Sqrt => "sqrt",
    }
}

fn binary_name(kind: BinaryKind) -> &'static str {
    match kind {
        BinaryKind::Add => "add",
        BinaryKind::Sub => "sub",
        BinaryKind::Mul => "mul",
        BinaryKind::Div => "div",
        BinaryKind::Min => "minimum",
        BinaryKind::Max => "maximum",
    }
}

impl Tape {
    fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let name = binary_name(kind);
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let nb = vb.len().max(1);
        let f: fn(f64, f64) -> f64 = match kind {
            BinaryKind::Add => |x, y| x + y,
            BinaryKind::Sub => |x, y| x - y,
            BinaryKind::Mul => |x, y| x * y,
            BinaryKind::Div => |x, y| x / y,
            BinaryKind::Min => f64::min,
            BinaryKind::Max => f64::max,
        };
        let data: Vec<f64> = va
            .chunks(nb)
            .flat_map(|chunk| chunk.iter().zip(vb).map(move |(&x, &y)| f(x, y)))
            .collect();
        let value = Tensor::new(sa, data)?;
        self.push(name, value, Op::Binary { a, b, kind }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Div)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Min)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Max)
    }

    pub fn mul_scalar(&mut self, a: Var, factor: f64) -> Result<Var> {
        let t = self.value(a);
        let value = Tensor::new(t.shape(), t.data().iter().map(|x| x * factor).collect())?;
        self.push("mul_scalar", value, Op::Scale { a, factor }, &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let c = self.constant(Tensor::full(&shape, s));
        self.add(a, c)
    }

    fn unary(&mut self, a: Var, kind: UnaryKind) -> Result<Var> {
        let f: fn(f64) -> f64 = match kind {
            UnaryKind::Neg => |x| -x,
            UnaryKind::Exp => f64::exp,
            UnaryKind::Ln => f64::ln,
            UnaryKind::Tanh => f64::tanh,
            UnaryKind::Sigmoid => sigmoid,
            UnaryKind::Atan => f64::atan,
            UnaryKind::Gelu => gelu,
            UnaryKind::Relu => |x| x.max(0.0),
            UnaryKind::Softplus => softplus,
            UnaryKind::Square => |x| x * x,
            UnaryKind::Sqrt => f64::sqrt,
        };
        let t = self.value(a);
        let value = Tensor::new(t.shape(), t.data().iter().map(|&x| f(x)).collect())?;
        self.push(unary_name(kind), value, Op::Unary { a, kind }, &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Neg)
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Exp)
    }
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Ln)
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Tanh)
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Sigmoid)
    }
    pub fn atan(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Atan)
    }
    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Gelu)
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Relu)
    }
    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Softplus)
    }
    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Square)
    }
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Sqrt)
    }

    /// `a[..., m, k] @ b[..., k, n]`. `b` may also be a plain `[k, n]` matrix
    /// shared across the batch dimensions of `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let b_batched = !batch_b.is_empty();
        if b_batched && batch_a != batch_b {
            return Err(mismatch());
        }
        let batch: usize = batch_a.iter().product();
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let a_off = bi * m * k;
            let b_off = if b_batched { bi * k * n } else { 0 };
            let o_off = bi * m * n;
            matmul_into(
                &va[a_off..a_off + m * k],
                &vb[b_off..b_off + k * n],
                &mut out[o_off..o_off + m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = batch_a.to_vec();
        shape.extend([m, n]);
        let value = Tensor::new(&shape, out)?;
        self.push(
            "matmul",
            value,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                b_batched,
            },
            &[a, b],
        )
    }

    /// Softmax along the last dimension, max-shifted.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let d = last_dim(t.shape(), "softmax_lastdim")?;
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let value = Tensor::new(t.shape(), out)?;
        self.push("softmax_lastdim", value, Op::Softmax { a }, &[a])
    }

    pub fn log_softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let d = last_dim(t.shape(), "log_softmax_lastdim")?;
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor::new(t.shape(), out)?;
        self.push("log_softmax_lastdim", value, Op::LogSoftmax { a }, &[a])
    }

    /// Normalise over the last dimension, then apply `gain` and `bias`
    /// (both shaped like the last dimension).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let d = last_dim(t.shape(), "layer_norm")?;
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: t.shape().to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = t.numel() / d;
        let mut xhat = Vec::with_capacity(t.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let value = Tensor::new(t.shape(), out)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// Cross-correlation of `x[B,C,H,W]` with `kernel[O,C,kh,kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 4 || sk.len() != 4 || sx[1] != sk[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sk,
            });
        }
        if stride == 0 {
            return Err(invalid("conv2d", "stride must be at least 1"));
        }
        if let Some(b) = bias {
            if self.shape(b) != [sk[0]] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    lhs: sk,
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let (batch, in_ch, in_h, in_w) = (sx[0], sx[1], sx[2], sx[3]);
        let (out_ch, kh, kw) = (sk[0], sk[2], sk[3]);
        let extent = |len: usize, k: usize| -> Result<usize> {
            let padded = len + 2 * padding;
            if padded < k || (padded - k) % stride != 0 {
                return Err(invalid(
                    "conv2d",
                    format!(
                        "output extent ({len} + 2*{padding} - {k})/{stride} + 1 is not integral"
                    ),
                ));
            }
            Ok((padded - k) / stride + 1)
        };
        let geom = ConvGeom {
            batch,
            in_ch,
            in_h,
            in_w,
            out_ch,
            kh,
            kw,
            out_h: extent(in_h, kh)?,
            out_w: extent(in_w, kw)?,
            stride,
            padding,
        };
        let mut out = conv2d_forward(self.value(x).data(), self.value(kernel).data(), &geom);
        if let Some(b) = bias {
            let bv = self.value(b).data();
            let plane = geom.out_h * geom.out_w;
            for (i, chunk) in out.chunks_mut(plane).enumerate() {
                let bias = bv[i % out_ch];
                chunk.iter_mut().for_each(|v| *v += bias);
            }
        }
        let value = Tensor::new(&[batch, out_ch, geom.out_h, geom.out_w], out)?;
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                x,
                kernel,
                bias,
                geom,
            },
            &inputs,
        )
    }

    /// Nearest-neighbour upsampling of the two trailing dimensions.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(invalid("upsample_nearest", "factor must be at least 1"));
        }
        let t = self.value(x);
        let s = t.shape();
        if s.len() < 2 {
            return Err(invalid("upsample_nearest", format!("need rank >= 2, got {s:?}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let (oh, ow) = (h * factor, w * factor);
        let planes = t.numel() / (h * w).max(1);
        let mut out = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let src = &t.data()[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                let row = &src[(oy / factor) * w..(oy / factor + 1) * w];
                for ox in 0..ow {
                    out.push(row[ox / factor]);
                }
            }
        }
        let mut shape = s[..s.len() - 2].to_vec();
        shape.extend([oh, ow]);
        let value = Tensor::new(&shape, out)?;
        self.push("upsample_nearest", value, Op::Upsample { x, factor }, &[x])
    }

    /// Learned downsampling: a `factor`×`factor` convolution with stride `factor`.
    pub fn downsample(&mut self, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let ks = self.shape(kernel).to_vec();
        if ks.len() != 4 || ks[2] != ks[3] || ks[2] == 0 {
            return Err(invalid("downsample", format!("kernel must be square, got {ks:?}")));
        }
        self.conv2d(x, kernel, bias, ks[2], 0)
    }

    /// `out[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let n: usize = shape.iter().product();
        if n != index.len() {
            return Err(invalid(
                "gather",
                format!("shape {shape:?} needs {n} indices, got {}", index.len()),
            ));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= t.numel()) {
            return Err(invalid(
                "gather",
                format!("index {bad} out of range for {} elements", t.numel()),
            ));
        }
        let data = index.iter().map(|&i| t.data()[i]).collect();
        let value = Tensor::new(shape, data)?;
        self.push("gather", value, Op::Gather { x, index }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let n: usize = shape.iter().product();
        if n != t.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = Tensor::new(shape, t.data().to_vec())?;
        self.push("reshape", value, Op::Reshape { x }, &[x])
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let (shape, index) = permute_index(self.shape(x), axes)?;
        self.gather(x, index.into(), &shape)
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(invalid("transpose_last2", "need rank >= 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn concat(&mut self, parts: &[Var], dim: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| invalid("concat", "no inputs"))?)
            .to_vec();
        if dim >= first.len() {
            return Err(invalid("concat", format!("dim {dim} out of range for {first:?}")));
        }
        let outer: usize = first[..dim].iter().product();
        let inner: usize = first[dim + 1..].iter().product();
        let mut total = 0;
        let mut chunk = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s[..dim] != first[..dim]
                || s[dim + 1..] != first[dim + 1..]
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[dim];
            chunk.push(s[dim] * inner);
        }
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &c) in parts.iter().zip(&chunk) {
                data.extend_from_slice(&self.value(p).data()[o * c..(o + 1) * c]);
            }
        }
        let mut shape = first.clone();
        shape[dim] = total;
        let value = Tensor::new(&shape, data)?;
        self.push(
            "concat",
            value,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                chunk,
            },
            parts,
        )
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(invalid("mean", "empty tensor"));
        }
        let s = self.sum(x)?;
        self.mul_scalar(s, 1.0 / n as f64)
    }
}

fn last_dim(shape: &[usize], op: &'static str) -> Result<usize> {
    match shape.last() {
        Some(&d) if d >= 1 => Ok(d),
        _ => Err(invalid(op, format!("empty last dimension in {shape:?}"))),
    }
}

/// `out += a[m,k] @ b[k,n]`, i-k-j loop order.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, &bv)| *o += av * bv);
        }
    }
}

/// Accumulation order per output cell is channel, then kernel row, then
/// kernel column, matching a straightforward nested loop.
fn conv2d_forward(x: &[f64], k: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.batch * g.out_ch * g.out_h * g.out_w];
    let mut idx = 0;
    for b in 0..g.batch {
        let xb = &x[b * g.in_ch * g.in_h * g.in_w..];
        for o in 0..g.out_ch {
            let ko = &k[o * g.in_ch * g.kh * g.kw..];
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = 0.0;
                    for c in 0..g.in_ch {
                        let xc = &xb[c * g.in_h * g.in_w..];
                        let kc = &ko[c * g.kh * g.kw..];
                        for ky in 0..g.kh {
                            let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                            if iy < 0 || iy >= g.in_h as isize {
                                continue;
                            }
                            let xrow = &xc[iy as usize * g.in_w..];
                            let krow = &kc[ky * g.kw..];
                            for kx in 0..g.kw {
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if ix < 0 || ix >= g.in_w as isize {
                                    continue;
                                }
                                acc += xrow[ix as usize] * krow[kx];
                            }
                        }
                    }
                    out[idx] = acc;
                    idx += 1;
                }
            }
        }
    }
    out
}
