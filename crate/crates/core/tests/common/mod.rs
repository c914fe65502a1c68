//! Brute-force references shared by the oracle and acceptance tests.
#![allow(dead_code)]

use mdgru::{Float, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Zero-padded strided cross-correlation, one output element at a time.
pub fn reference_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, strides: &[usize]) -> Tensor {
    let rank = x.ndim() - 1;
    let (in_c, out_c) = (x.shape()[0], w.shape()[0]);
    let ext = &x.shape()[1..];
    let k = &w.shape()[2..];
    let out_ext: Vec<usize> = ext.iter().zip(strides).map(|(e, s)| e / s).collect();
    let mut shape = vec![out_c];
    shape.extend(&out_ext);
    let mut out = Tensor::zeros(&shape);
    let n_out: usize = out_ext.iter().product();
    let n_k: usize = k.iter().product();
    for o in 0..out_c {
        for flat in 0..n_out {
            let mut p = vec![0; rank];
            let mut r = flat;
            for a in (0..rank).rev() {
                p[a] = r % out_ext[a];
                r /= out_ext[a];
            }
            let mut acc = b.map_or(0.0, |b| b.data()[o]);
            for i in 0..in_c {
                for tap in 0..n_k {
                    let mut q = vec![0; rank];
                    let mut r = tap;
                    for a in (0..rank).rev() {
                        q[a] = r % k[a];
                        r /= k[a];
                    }
                    let mut src = vec![i];
                    let mut inside = true;
                    for a in 0..rank {
                        let c = (p[a] * strides[a]) as i64 + q[a] as i64 - (k[a] / 2) as i64;
                        inside &= c >= 0 && c < ext[a] as i64;
                        src.push(c.max(0) as usize);
                    }
                    if inside {
                        let mut widx = vec![o, i];
                        widx.extend(&q);
                        acc += w.get(&widx) * x.get(&src);
                    }
                }
            }
            let mut idx = vec![o];
            idx.extend(&p);
            out.set(&idx, acc);
        }
    }
    out
}

/// Sum of each run of `s` consecutive elements along `axis`.
pub fn reference_pool_sum(x: &Tensor, axis: usize, s: usize) -> Tensor {
    let shape = x.shape().to_vec();
    let rank = shape.len();
    let mut out_shape = shape.clone();
    out_shape[axis] /= s;
    Tensor::from_fn(&out_shape, |flat| {
        let mut idx = vec![0; rank];
        let mut r = flat;
        for a in (0..rank).rev() {
            idx[a] = r % out_shape[a];
            r /= out_shape[a];
        }
        let mut acc = 0.0;
        for k in 0..s {
            let mut src = idx.clone();
            src[axis] = idx[axis] * s + k;
            acc += x.get(&src);
        }
        acc
    })
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

pub fn max_diff(a: &Tensor, b: &Tensor) -> Float {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Dense maximisation of the quadratic through (−1, l), (0, c), (1, r).
pub fn dense_vertex(l: Float, c: Float, r: Float) -> Float {
    let a = (l + r) / 2.0 - c;
    let b = (r - l) / 2.0;
    let q = |x: Float| a * x * x + b * x + c;
    let steps = 2000;
    let h = 1.0 / steps as Float;
    let best = (0..=steps)
        .map(|k| -0.5 + k as Float * h)
        .fold(-0.5, |best, x| if q(x) > q(best) { x } else { best });
    let (mut lo, mut hi) = ((best - h).max(-0.5), (best + h).min(0.5));
    // Values are flat at the peak, so finish by bisecting on the sign of the slope.
    let slope = |x: Float| 2.0 * a * x + b;
    for _ in 0..200 {
        let mid = (lo + hi) / 2.0;
        if slope(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo + hi) / 2.0
}
