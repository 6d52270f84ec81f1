//! Vector-Jacobian products for every tape op.

use super::ops::{matmul_into, sigmoid, GELU_A, GELU_C};
use super::tape::{accumulate, grad_slot, BinaryKind, ConvGeom, Node, Op, Tape, UnaryKind};

pub(crate) fn propagate(tape: &Tape, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: super::Var| tape.value(v).data();
    match &node.op {
        Op::Leaf | Op::Constant => {}
        Op::Binary { a, b, kind } => {
            let (va, vb) = (val(*a), val(*b));
            let nb = vb.len().max(1);
            let out = node.value.data();
            let mut ga = vec![0.0; va.len()];
            let mut gb = vec![0.0; vb.len()];
            for (i, &gi) in g.iter().enumerate() {
                let j = i % nb;
                let (x, y) = (va[i], vb[j]);
                let (da, db) = match kind {
                    BinaryKind::Add => (1.0, 1.0),
                    BinaryKind::Sub => (1.0, -1.0),
                    BinaryKind::Mul => (y, x),
                    BinaryKind::Div => (1.0 / y, -out[i] / y),
                    // ties send the gradient to the first operand
                    BinaryKind::Min => {
                        if x <= y {
                            (1.0, 0.0)
                        } else {
                            (0.0, 1.0)
                        }
                    }
                    BinaryKind::Max => {
                        if x >= y {
                            (1.0, 0.0)
                        } else {
                            (0.0, 1.0)
                        }
                    }
                };
                ga[i] += gi * da;
                gb[j] += gi * db;
            }
            accumulate(tape, grads, *a, &ga);
            accumulate(tape, grads, *b, &gb);
        }
        Op::Scale { a, factor } => {
            let ga: Vec<f64> = g.iter().map(|v| v * factor).collect();
            accumulate(tape, grads, *a, &ga);
        }
        Op::Unary { a, kind } => {
            let x = val(*a);
            let y = node.value.data();
            let ga: Vec<f64> = g
                .iter()
                .zip(x.iter().zip(y))
                .map(|(&gi, (&x, &y))| gi * unary_derivative(*kind, x, y))
                .collect();
            accumulate(tape, grads, *a, &ga);
        }
        Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            b_batched,
        } => {
            let (m, k, n) = (*m, *k, *n);
            let (va, vb) = (val(*a), val(*b));
            if tape.needs_grad(*a) {
                // dA = G · Bᵀ
                let mut ga = vec![0.0; va.len()];
                let mut bt = vec![0.0; n * k];
                for bi in 0..*batch {
                    let b_off = if *b_batched { bi * k * n } else { 0 };
                    if bi == 0 || *b_batched {
                        transpose(&vb[b_off..b_off + k * n], &mut bt, k, n);
                    }
                    matmul_into(
                        &g[bi * m * n..(bi + 1) * m * n],
                        &bt,
                        &mut ga[bi * m * k..(bi + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
                accumulate(tape, grads, *a, &ga);
            }
            if tape.needs_grad(*b) {
                // dB = Aᵀ · G
                let mut gb = vec![0.0; vb.len()];
                let mut at = vec![0.0; k * m];
                for bi in 0..*batch {
                    transpose(&va[bi * m * k..(bi + 1) * m * k], &mut at, m, k);
                    let b_off = if *b_batched { bi * k * n } else { 0 };
                    matmul_into(
                        &at,
                        &g[bi * m * n..(bi + 1) * m * n],
                        &mut gb[b_off..b_off + k * n],
                        k,
                        m,
                        n,
                    );
                }
                accumulate(tape, grads, *b, &gb);
            }
        }
        Op::Softmax { a } => {
            let y = node.value.data();
            let d = *node.value.shape().last().unwrap();
            let mut ga = vec![0.0; y.len()];
            for ((yr, gr), out) in y.chunks(d).zip(g.chunks(d)).zip(ga.chunks_mut(d)) {
                let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                for ((o, &yi), &gi) in out.iter_mut().zip(yr).zip(gr) {
                    *o = yi * (gi - dot);
                }
            }
            accumulate(tape, grads, *a, &ga);
        }
        Op::LogSoftmax { a } => {
            let y = node.value.data();
            let d = *node.value.shape().last().unwrap();
            let mut ga = vec![0.0; y.len()];
            for ((yr, gr), out) in y.chunks(d).zip(g.chunks(d)).zip(ga.chunks_mut(d)) {
                let gsum: f64 = gr.iter().sum();
                for ((o, &yi), &gi) in out.iter_mut().zip(yr).zip(gr) {
                    *o = gi - yi.exp() * gsum;
                }
            }
            accumulate(tape, grads, *a, &ga);
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let d = *node.value.shape().last().unwrap();
            let gv = val(*gain);
            if tape.needs_grad(*x) {
                let mut gx = vec![0.0; xhat.len()];
                let mut dxhat = vec![0.0; d];
                for (r, &rs) in rstd.iter().enumerate() {
                    let rows = r * d..(r + 1) * d;
                    let (gr, hr) = (&g[rows.clone()], &xhat[rows.clone()]);
                    for j in 0..d {
                        dxhat[j] = gr[j] * gv[j];
                    }
                    let sum: f64 = dxhat.iter().sum();
                    let dot: f64 = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum();
                    let inv_d = 1.0 / d as f64;
                    for (j, out) in gx[rows].iter_mut().enumerate() {
                        *out = rs * (dxhat[j] - inv_d * sum - hr[j] * inv_d * dot);
                    }
                }
                accumulate(tape, grads, *x, &gx);
            }
            if let Some(slot) = grad_slot(tape, grads, *gain) {
                for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        slot[j] += gr[j] * hr[j];
                    }
                }
            }
            if let Some(slot) = grad_slot(tape, grads, *bias) {
                for gr in g.chunks(d) {
                    slot.iter_mut().zip(gr).for_each(|(s, v)| *s += v);
                }
            }
        }
        Op::Conv2d {
            x,
            kernel,
            bias,
            geom,
        } => {
            conv2d_backward(tape, grads, *x, *kernel, g, geom);
            if let Some(b) = bias {
                if let Some(slot) = grad_slot(tape, grads, *b) {
                    let plane = geom.out_h * geom.out_w;
                    for (i, chunk) in g.chunks(plane).enumerate() {
                        slot[i % geom.out_ch] += chunk.iter().sum::<f64>();
                    }
                }
            }
        }
        Op::Upsample { x, factor } => {
            let s = tape.shape(*x);
            let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
            let (oh, ow) = (h * factor, w * factor);
            if let Some(slot) = grad_slot(tape, grads, *x) {
                for (p, gp) in g.chunks(oh * ow).enumerate() {
                    let dst = &mut slot[p * h * w..(p + 1) * h * w];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            dst[(oy / factor) * w + ox / factor] += gp[oy * ow + ox];
                        }
                    }
                }
            }
        }
        Op::Gather { x, index } => {
            if let Some(slot) = grad_slot(tape, grads, *x) {
                for (&i, &gi) in index.iter().zip(g) {
                    slot[i] += gi;
                }
            }
        }
        Op::Reshape { x } => accumulate(tape, grads, *x, g),
        Op::Concat {
            parts,
            outer,
            chunk,
        } => {
            let row: usize = chunk.iter().sum();
            let mut offset = 0;
            for (&p, &c) in parts.iter().zip(chunk) {
                if let Some(slot) = grad_slot(tape, grads, p) {
                    for o in 0..*outer {
                        let src = &g[o * row + offset..o * row + offset + c];
                        slot[o * c..(o + 1) * c]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(s, v)| *s += v);
                    }
                }
                offset += c;
            }
        }
        Op::Sum { x } => {
            if let Some(slot) = grad_slot(tape, grads, *x) {
                slot.iter_mut().for_each(|s| *s += g[0]);
            }
        }
    }
}

fn unary_derivative(kind: UnaryKind, x: f64, y: f64) -> f64 {
    match kind {
        UnaryKind::Neg => -1.0,
        UnaryKind::Exp => y,
        UnaryKind::Ln => 1.0 / x,
        UnaryKind::Tanh => 1.0 - y * y,
        UnaryKind::Sigmoid => y * (1.0 - y),
        UnaryKind::Atan => 1.0 / (1.0 + x * x),
        UnaryKind::Gelu => {
            let inner = GELU_C * (x + GELU_A * x * x * x);
            let t = inner.tanh();
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
        }
        UnaryKind::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        UnaryKind::Softplus => sigmoid(x),
        UnaryKind::Square => 2.0 * x,
        UnaryKind::Sqrt => 0.5 / y,
    }
}

fn transpose(src: &[f64], dst: &mut [f64], rows: usize, cols: usize) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

fn conv2d_backward(
    tape: &Tape,
    grads: &mut [Option<Vec<f64>>],
    x: super::Var,
    kernel: super::Var,
    g: &[f64],
    geom: &ConvGeom,
) {
    let ConvGeom {
        batch,
        in_ch,
        in_h,
        in_w,
        out_ch,
        kh,
        kw,
        out_h,
        out_w,
        stride,
        padding,
    } = *geom;
    let xv = tape.value(x).data();
    let kv = tape.value(kernel).data();
    let want_x = tape.needs_grad(x);
    let want_k = tape.needs_grad(kernel);
    let mut gx = if want_x { vec![0.0; xv.len()] } else { Vec::new() };
    let mut gk = if want_k { vec![0.0; kv.len()] } else { Vec::new() };
    for b in 0..batch {
        let xb = b * in_ch * in_h * in_w;
        for o in 0..out_ch {
            let ko = o * in_ch * kh * kw;
            let go = (b * out_ch + o) * out_h * out_w;
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let gv = g[go + oy * out_w + ox];
                    if gv == 0.0 {
                        continue;
                    }
                    for c in 0..in_ch {
                        let xc = xb + c * in_h * in_w;
                        let kc = ko + c * kh * kw;
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= in_h as isize {
                                continue;
                            }
                            let xrow = xc + iy as usize * in_w;
                            let krow = kc + ky * kw;
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= in_w as isize {
                                    continue;
                                }
                                let xi = xrow + ix as usize;
                                if want_x {
                                    gx[xi] += gv * kv[krow + kx];
                                }
                                if want_k {
                                    gk[krow + kx] += gv * xv[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    if want_x {
        accumulate(tape, grads, x, &gx);
    }
    if want_k {
        accumulate(tape, grads, kernel, &gk);
    }
}
