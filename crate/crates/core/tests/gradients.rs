//! Finite-difference gradient checks for the tensor primitives.

mod common;

use common::{gradcheck, random, rng};
use graspkit::tensor::{Tape, Tensor};

const TOL: f64 = 1e-4;
const INSTANCES: u64 = 5;

fn check(name: &str, worst: f64) {
    assert!(worst <= TOL, "{name}: relative error {worst:e} exceeds {TOL:e}");
}

#[test]
fn matmul_grad() {
    for s in 0..INSTANCES {
        let mut r = rng(100 + s);
        let a = random(&[3, 3], &mut r, -1.0, 1.0);
        let b = random(&[3, 3], &mut r, -1.0, 1.0);
        check("matmul", gradcheck(&[a, b], s, |t, v| t.matmul(v[0], v[1])));
        let a = random(&[2, 3, 4], &mut r, -1.0, 1.0);
        let b = random(&[4, 2], &mut r, -1.0, 1.0);
        check("matmul shared", gradcheck(&[a, b], s, |t, v| t.matmul(v[0], v[1])));
        let a = random(&[2, 2, 3], &mut r, -1.0, 1.0);
        let b = random(&[2, 3, 2], &mut r, -1.0, 1.0);
        check("matmul batched", gradcheck(&[a, b], s, |t, v| t.matmul(v[0], v[1])));
    }
}

#[test]
fn matmul_sum_grad_is_row_sums() {
    // d sum(A·B) / dA = 1·Bᵀ
    let mut r = rng(7);
    let a = random(&[3, 3], &mut r, -1.0, 1.0);
    let b = random(&[3, 3], &mut r, -1.0, 1.0);
    let mut tape = Tape::new();
    let (va, vb) = (tape.leaf(a), tape.leaf(b.clone()));
    let p = tape.matmul(va, vb).unwrap();
    let s = tape.sum(p).unwrap();
    let g = tape.backward(s).unwrap();
    let ga = g.get(va).unwrap();
    for i in 0..3 {
        for k in 0..3 {
            let want: f64 = (0..3).map(|j| b.get(&[k, j])).sum();
            assert!((ga.get(&[i, k]) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_grad() {
    for s in 0..INSTANCES {
        let mut r = rng(200 + s);
        let x = random(&[3, 5], &mut r, -3.0, 3.0);
        check("softmax", gradcheck(&[x], s, |t, v| t.softmax_lastdim(v[0])));
        let x = random(&[4, 3], &mut r, -3.0, 3.0);
        check("log_softmax", gradcheck(&[x], s, |t, v| t.log_softmax_lastdim(v[0])));
    }
}

#[test]
fn conv2d_grad() {
    for s in 0..INSTANCES {
        let mut r = rng(300 + s);
        let x = random(&[2, 2, 5, 5], &mut r, -1.0, 1.0);
        let k = random(&[3, 2, 3, 3], &mut r, -1.0, 1.0);
        let b = random(&[3], &mut r, -1.0, 1.0);
        check(
            "conv2d pad",
            gradcheck(&[x.clone(), k, b], s, |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1)),
        );
        let k2 = random(&[2, 2, 3, 3], &mut r, -1.0, 1.0);
        check(
            "conv2d stride",
            gradcheck(&[x, k2], s, |t, v| t.conv2d(v[0], v[1], None, 2, 0)),
        );
    }
}

#[test]
fn layer_norm_grad() {
    for s in 0..INSTANCES {
        let mut r = rng(400 + s);
        let x = random(&[4, 6], &mut r, -2.0, 2.0);
        let g = random(&[6], &mut r, 0.5, 1.5);
        let b = random(&[6], &mut r, -0.5, 0.5);
        check(
            "layer_norm",
            gradcheck(&[x, g, b], s, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
        );
    }
}

#[test]
fn unary_grads() {
    for s in 0..INSTANCES {
        let mut r = rng(500 + s);
        let x = random(&[10], &mut r, -3.0, 3.0);
        let pos = random(&[10], &mut r, 0.2, 3.0);
        check("gelu", gradcheck(&[x.clone()], s, |t, v| t.gelu(v[0])));
        check("tanh", gradcheck(&[x.clone()], s, |t, v| t.tanh(v[0])));
        check("sigmoid", gradcheck(&[x.clone()], s, |t, v| t.sigmoid(v[0])));
        check("exp", gradcheck(&[x.clone()], s, |t, v| t.exp(v[0])));
        check("atan", gradcheck(&[x.clone()], s, |t, v| t.atan(v[0])));
        check("softplus", gradcheck(&[x.clone()], s, |t, v| t.softplus(v[0])));
        check("square", gradcheck(&[x.clone()], s, |t, v| t.square(v[0])));
        check("ln", gradcheck(&[pos.clone()], s, |t, v| t.ln(v[0])));
        check("sqrt", gradcheck(&[pos.clone()], s, |t, v| t.sqrt(v[0])));
        check("scale", gradcheck(&[x], s, |t, v| t.mul_scalar(v[0], -2.5)));
    }
}

#[test]
fn binary_grads() {
    for s in 0..INSTANCES {
        let mut r = rng(600 + s);
        let a = random(&[3, 4], &mut r, -2.0, 2.0);
        let b = random(&[3, 4], &mut r, -2.0, 2.0);
        let row = random(&[4], &mut r, 0.5, 2.0);
        check("add", gradcheck(&[a.clone(), row.clone()], s, |t, v| t.add(v[0], v[1])));
        check("sub", gradcheck(&[a.clone(), b.clone()], s, |t, v| t.sub(v[0], v[1])));
        check("mul", gradcheck(&[a.clone(), row.clone()], s, |t, v| t.mul(v[0], v[1])));
        check("div", gradcheck(&[a.clone(), row], s, |t, v| t.div(v[0], v[1])));
        check("min", gradcheck(&[a.clone(), b.clone()], s, |t, v| t.minimum(v[0], v[1])));
        check("max", gradcheck(&[a, b], s, |t, v| t.maximum(v[0], v[1])));
    }
}

#[test]
fn resampling_grads() {
    for s in 0..INSTANCES {
        let mut r = rng(700 + s);
        let x = random(&[1, 2, 3, 3], &mut r, -1.0, 1.0);
        check("upsample", gradcheck(&[x], s, |t, v| t.upsample_nearest(v[0], 2)));
        let x = random(&[1, 2, 4, 4], &mut r, -1.0, 1.0);
        let k = random(&[3, 2, 2, 2], &mut r, -1.0, 1.0);
        check("downsample", gradcheck(&[x, k], s, |t, v| t.downsample(v[0], v[1], None)));
    }
}

#[test]
fn upsample_sum_grad_is_factor_squared() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::ones(&[1, 1, 2, 3]));
    let u = tape.upsample_nearest(x, 3).unwrap();
    let s = tape.sum(u).unwrap();
    let g = tape.backward(s).unwrap();
    assert!(g.get(x).unwrap().data().iter().all(|&v| v == 9.0));
}

#[test]
fn view_grads() {
    for s in 0..INSTANCES {
        let mut r = rng(800 + s);
        let x = random(&[2, 3, 4], &mut r, -1.0, 1.0);
        let y = random(&[2, 1, 4], &mut r, -1.0, 1.0);
        check("permute", gradcheck(&[x.clone()], s, |t, v| t.permute(v[0], &[2, 0, 1])));
        check("concat", gradcheck(&[x.clone(), y], s, |t, v| t.concat(&[v[0], v[1]], 1)));
        check(
            "reshape",
            gradcheck(&[x.clone()], s, |t, v| {
                let r = t.reshape(v[0], &[6, 4])?;
                t.mul(r, r)
            }),
        );
        check("mean", gradcheck(&[x], s, |t, v| t.mean(v[0])));
    }
}
