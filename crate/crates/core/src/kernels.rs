//! Forward and backward numeric kernels.
//!
//! Convolutions operate on `(channels, spatial...)` tensors with one to three
//! spatial axes; lower-rank inputs are promoted to three spatial axes with unit
//! extents. Padding is always symmetric zero "same" padding, and output
//! position `p` along an axis is centred on input position `p * stride`.
//!
//! Every output element is accumulated in a fixed order (bias first, then input
//! channels ascending, then kernel taps in row-major order), independently of
//! how the work is split across threads.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{split_at_axis, Float, Tensor};

/// Multiply-accumulate count above which kernels split work across threads.
const PAR_WORK: usize = 1 << 18;

/// Guard added inside the logarithm of the cross-entropy.
pub const LOG_EPS: Float = 1e-12;

/// Slope of the leaky rectifier for negative inputs.
pub const LRELU_SLOPE: Float = 0.01;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub strides: Vec<usize>,
    pub kernel: Vec<usize>,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    pub fn new(
        strides: Vec<usize>,
        kernel: Vec<usize>,
        in_channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        let spec = ConvSpec {
            strides,
            kernel,
            in_channels,
            out_channels,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Same stride and kernel extent on each of `rank` spatial axes.
    pub fn uniform(
        rank: usize,
        stride: usize,
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        Self::new(vec![stride; rank], vec![kernel; rank], in_channels, out_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.strides.len() != self.kernel.len() || self.kernel.is_empty() || self.kernel.len() > 3 {
            return Err(Error::shape(format!(
                "conv spec needs 1-3 spatial axes with matching strides, got strides {:?} kernel {:?}",
                self.strides, self.kernel
            )));
        }
        if self.kernel.iter().any(|&k| k % 2 == 0) {
            return Err(Error::shape(format!(
                "kernel extents must be odd, got {:?}",
                self.kernel
            )));
        }
        if self.strides.iter().any(|&s| s == 0) {
            return Err(Error::shape("strides must be at least 1"));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::shape("channel counts must be positive"));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        let mut s = vec![self.out_channels, self.in_channels];
        s.extend_from_slice(&self.kernel);
        s
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Output spatial extents for the given input extents.
    pub fn output_extents(&self, input: &[usize]) -> Result<Vec<usize>> {
        output_extents(input, &self.strides)
    }
}

fn output_extents(input: &[usize], strides: &[usize]) -> Result<Vec<usize>> {
    if input.len() != strides.len() {
        return Err(Error::shape(format!(
            "{} spatial axes but {} strides",
            input.len(),
            strides.len()
        )));
    }
    input
        .iter()
        .zip(strides)
        .map(|(&d, &s)| {
            if d % s != 0 {
                Err(Error::dimension(format!(
                    "extent {d} is not divisible by stride {s}"
                )))
            } else {
                Ok(d / s)
            }
        })
        .collect()
}

/// Convolution geometry promoted to three spatial axes.
#[derive(Clone, Debug)]
struct Geometry {
    in_c: usize,
    out_c: usize,
    input: [usize; 3],
    output: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
}

fn promote(v: &[usize]) -> [usize; 3] {
    let mut out = [1; 3];
    out[3 - v.len()..].copy_from_slice(v);
    out
}

impl Geometry {
    fn new(input: &[usize], weight: &[usize], strides: &[usize]) -> Result<Self> {
        let rank = input.len().saturating_sub(1);
        if !(1..=3).contains(&rank) {
            return Err(Error::shape(format!(
                "convolution input must be (channels, 1-3 spatial axes), got {input:?}"
            )));
        }
        if weight.len() != rank + 2 {
            return Err(Error::shape(format!(
                "weights {weight:?} do not match input rank {input:?}"
            )));
        }
        let in_c = input[0];
        let out_c = weight[0];
        if weight[1] != in_c {
            return Err(Error::shape(format!(
                "weights {weight:?} expect {} input channels, input has {in_c}",
                weight[1]
            )));
        }
        let kernel = &weight[2..];
        if kernel.iter().any(|k| k % 2 == 0) {
            return Err(Error::shape(format!("kernel extents must be odd, got {kernel:?}")));
        }
        if strides.iter().any(|&s| s == 0) {
            return Err(Error::shape("strides must be at least 1"));
        }
        let out = output_extents(&input[1..], strides)?;
        Ok(Geometry {
            in_c,
            out_c,
            input: promote(&input[1..]),
            output: promote(&out),
            kernel: promote(kernel),
            stride: promote(strides),
        })
    }

    fn in_size(&self) -> usize {
        self.input.iter().product()
    }

    fn out_size(&self) -> usize {
        self.output.iter().product()
    }

    fn k_size(&self) -> usize {
        self.kernel.iter().product()
    }

    fn work(&self) -> usize {
        self.in_c * self.out_c * self.out_size() * self.k_size()
    }

    fn output_shape(&self, rank: usize) -> Vec<usize> {
        let mut s = vec![self.out_c];
        s.extend_from_slice(&self.output[3 - rank..]);
        s
    }

    /// Half-open range of output positions along `axis` whose tap `k` lands inside the input.
    fn valid(&self, axis: usize, k: usize) -> (usize, usize) {
        let r = (self.kernel[axis] / 2) as isize;
        let s = self.stride[axis] as isize;
        let n_in = self.input[axis] as isize;
        let k = k as isize;
        // need 0 <= p*s + k - r < n_in
        let lo = if r > k { (r - k + s - 1) / s } else { 0 };
        let hi_incl = (n_in - 1 + r - k).div_euclid(s);
        let hi = (hi_incl + 1).clamp(0, self.output[axis] as isize);
        (lo as usize, hi.max(lo as isize) as usize)
    }

    /// Visits every (kernel tap, output row) pair with the matching input row offset.
    ///
    /// Calls `f(tap, out_start, in_start, n)`: `n` consecutive outputs along the last
    /// axis starting at `out_start` read the input from `in_start` onwards with the
    /// last-axis stride.
    #[inline]
    fn for_each_row(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let [_, in1, in2] = self.input;
        let [_, out1, out2] = self.output;
        let [k0n, k1n, k2n] = self.kernel;
        let r = [self.kernel[0] / 2, self.kernel[1] / 2, self.kernel[2] / 2];
        let mut tap = 0;
        for k0 in 0..k0n {
            let (p0lo, p0hi) = self.valid(0, k0);
            for k1 in 0..k1n {
                let (p1lo, p1hi) = self.valid(1, k1);
                for k2 in 0..k2n {
                    let (p2lo, p2hi) = self.valid(2, k2);
                    if p2lo < p2hi {
                        for p0 in p0lo..p0hi {
                            let q0 = p0 * self.stride[0] + k0 - r[0];
                            for p1 in p1lo..p1hi {
                                let q1 = p1 * self.stride[1] + k1 - r[1];
                                let out_row = (p0 * out1 + p1) * out2;
                                let in_first =
                                    (q0 * in1 + q1) * in2 + p2lo * self.stride[2] + k2 - r[2];
                                f(tap, out_row + p2lo, in_first, p2hi - p2lo);
                            }
                        }
                    }
                    tap += 1;
                }
            }
        }
    }
}

/// `acc += a * x` elementwise.
#[inline]
fn axpy(acc: &mut [Float], a: Float, x: &[Float]) {
    for (d, &s) in acc.iter_mut().zip(x) {
        *d += a * s;
    }
}

/// `acc += Σ a_k * x_k`, adding the terms in order.
fn axpy_many(acc: &mut [Float], terms: &[(Float, &[Float])]) {
    let n = acc.len();
    let mut chunks = terms.chunks_exact(4);
    for c in &mut chunks {
        let (a0, x0) = (c[0].0, &c[0].1[..n]);
        let (a1, x1) = (c[1].0, &c[1].1[..n]);
        let (a2, x2) = (c[2].0, &c[2].1[..n]);
        let (a3, x3) = (c[3].0, &c[3].1[..n]);
        for ((((v, &y0), &y1), &y2), &y3) in acc.iter_mut().zip(x0).zip(x1).zip(x2).zip(x3) {
            let mut t = *v;
            t += a0 * y0;
            t += a1 * y1;
            t += a2 * y2;
            t += a3 * y3;
            *v = t;
        }
    }
    for &(a, x) in chunks.remainder() {
        axpy(acc, a, x);
    }
}

/// Dot product with four interleaved partial sums.
#[inline]
fn dot(a: &[Float], b: &[Float]) -> Float {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

impl Geometry {
    /// Fills `cols` (`taps x out_size`) with the input sample each tap reads
    /// for each output position. Entries where the tap falls into the padding
    /// are left alone, so a zeroed buffer can be reused across channels.
    fn im2col(&self, x_i: &[Float], cols: &mut [Float]) {
        let out_size = self.out_size();
        let s2 = self.stride[2];
        self.for_each_row(|tap, out_start, in_start, n| {
            let dst = &mut cols[tap * out_size + out_start..tap * out_size + out_start + n];
            if s2 == 1 {
                dst.copy_from_slice(&x_i[in_start..in_start + n]);
            } else {
                for (j, d) in dst.iter_mut().enumerate() {
                    *d = x_i[in_start + j * s2];
                }
            }
        });
    }

    /// Adds each tap row of `cols` back onto the input positions it was read from.
    fn col2im(&self, cols: &[Float], dx_i: &mut [Float]) {
        let out_size = self.out_size();
        let s2 = self.stride[2];
        self.for_each_row(|tap, out_start, in_start, n| {
            let src = &cols[tap * out_size + out_start..tap * out_size + out_start + n];
            if s2 == 1 {
                for (d, &v) in dx_i[in_start..in_start + n].iter_mut().zip(src) {
                    *d += v;
                }
            } else {
                for (j, &v) in src.iter().enumerate() {
                    dx_i[in_start + j * s2] += v;
                }
            }
        });
    }
}

fn for_chunks(data: &mut [Float], chunk: usize, parallel: bool, f: impl Fn(usize, &mut [Float]) + Sync) {
    if parallel {
        data.par_chunks_mut(chunk).enumerate().for_each(|(k, c)| f(k, c));
    } else {
        data.chunks_mut(chunk).enumerate().for_each(|(k, c)| f(k, c));
    }
}

/// Strided "same" convolution with optional per-output-channel bias.
pub fn conv_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    strides: &[usize],
) -> Result<Tensor> {
    let g = Geometry::new(input.shape(), weight.shape(), strides)?;
    if let Some(b) = bias {
        if b.len() != g.out_c {
            return Err(Error::shape(format!(
                "bias of length {} for {} output channels",
                b.len(),
                g.out_c
            )));
        }
    }
    let out_size = g.out_size();
    let in_size = g.in_size();
    let k_size = g.k_size();
    let x = input.data();
    let w = weight.data();
    let mut out = vec![0.0; g.out_c * out_size];
    if let Some(b) = bias {
        for (o, out_o) in out.chunks_mut(out_size).enumerate() {
            out_o.fill(b.data()[o]);
        }
    }
    let parallel = g.work() >= PAR_WORK;
    let mut cols = vec![0.0; k_size * out_size];
    for i in 0..g.in_c {
        g.im2col(&x[i * in_size..(i + 1) * in_size], &mut cols);
        let cols = &cols;
        for_chunks(&mut out, out_size, parallel, |o, out_o| {
            let w_oi = &w[(o * g.in_c + i) * k_size..(o * g.in_c + i + 1) * k_size];
            let terms: Vec<(Float, &[Float])> = w_oi
                .iter()
                .enumerate()
                .filter(|(_, &wv)| wv != 0.0)
                .map(|(tap, &wv)| (wv, &cols[tap * out_size..(tap + 1) * out_size]))
                .collect();
            axpy_many(out_o, &terms);
        });
    }
    Ok(Tensor::from_parts(g.output_shape(input.ndim() - 1), out))
}

/// Gradient of [`conv_forward`] with respect to its input.
pub fn conv_backward_input(
    input_shape: &[usize],
    weight: &Tensor,
    grad_out: &Tensor,
    strides: &[usize],
) -> Result<Tensor> {
    let g = Geometry::new(input_shape, weight.shape(), strides)?;
    let out_size = g.out_size();
    let in_size = g.in_size();
    let k_size = g.k_size();
    let dy = grad_out.data();
    let w = weight.data();
    let mut dx = vec![0.0; g.in_c * in_size];
    for_chunks(&mut dx, in_size, g.work() >= PAR_WORK, |i, dx_i| {
        let mut cols = vec![0.0; k_size * out_size];
        let mut terms: Vec<(Float, &[Float])> = Vec::with_capacity(g.out_c);
        for (tap, row) in cols.chunks_mut(out_size).enumerate() {
            terms.clear();
            for o in 0..g.out_c {
                let wv = w[(o * g.in_c + i) * k_size + tap];
                if wv != 0.0 {
                    terms.push((wv, &dy[o * out_size..(o + 1) * out_size]));
                }
            }
            axpy_many(row, &terms);
        }
        g.col2im(&cols, dx_i);
    });
    Ok(Tensor::from_parts(input_shape.to_vec(), dx))
}

/// Gradient of [`conv_forward`] with respect to its weights.
pub fn conv_backward_weight(
    input: &Tensor,
    weight_shape: &[usize],
    grad_out: &Tensor,
    strides: &[usize],
) -> Result<Tensor> {
    let g = Geometry::new(input.shape(), weight_shape, strides)?;
    let out_size = g.out_size();
    let in_size = g.in_size();
    let k_size = g.k_size();
    let x = input.data();
    let dy = grad_out.data();
    let mut dw = vec![0.0; g.out_c * g.in_c * k_size];
    let parallel = g.work() >= PAR_WORK;
    let mut cols = vec![0.0; k_size * out_size];
    for i in 0..g.in_c {
        g.im2col(&x[i * in_size..(i + 1) * in_size], &mut cols);
        let cols = &cols;
        for_chunks(&mut dw, g.in_c * k_size, parallel, |o, dw_o| {
            let dy_o = &dy[o * out_size..(o + 1) * out_size];
            for tap in 0..k_size {
                dw_o[i * k_size + tap] = dot(dy_o, &cols[tap * out_size..(tap + 1) * out_size]);
            }
        });
    }
    Ok(Tensor::from_parts(weight_shape.to_vec(), dw))
}

/// Gradient of [`conv_forward`] with respect to its bias: per-channel sums.
pub fn conv_backward_bias(grad_out: &Tensor) -> Tensor {
    let c = grad_out.shape()[0];
    let n = grad_out.len() / c;
    Tensor::from_vec(
        grad_out
            .data()
            .chunks(n)
            .map(|row| row.iter().sum())
            .collect(),
    )
}

/// Mean over non-overlapping groups of `stride` consecutive entries along `axis`.
pub fn avg_pool_axis(input: &Tensor, axis: usize, stride: usize) -> Result<Tensor> {
    if axis >= input.ndim() {
        return Err(Error::shape(format!("axis {axis} out of range for {:?}", input.shape())));
    }
    if stride == 0 {
        return Err(Error::shape("pooling stride must be at least 1"));
    }
    let (outer, t, inner) = split_at_axis(input.shape(), axis);
    if t % stride != 0 {
        return Err(Error::dimension(format!(
            "sequence length {t} is not divisible by stride {stride}"
        )));
    }
    let t_out = t / stride;
    let x = input.data();
    let mut out = vec![0.0; outer * t_out * inner];
    for o in 0..outer {
        for tp in 0..t_out {
            let dst = &mut out[(o * t_out + tp) * inner..(o * t_out + tp + 1) * inner];
            for s in 0..stride {
                let src = &x[(o * t + tp * stride + s) * inner..(o * t + tp * stride + s + 1) * inner];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d += v;
                }
            }
            let div = stride as Float;
            for d in dst.iter_mut() {
                *d /= div;
            }
        }
    }
    let mut shape = input.shape().to_vec();
    shape[axis] = t_out;
    Ok(Tensor::from_parts(shape, out))
}

pub fn avg_pool_axis_backward(
    input_shape: &[usize],
    grad_out: &Tensor,
    axis: usize,
    stride: usize,
) -> Tensor {
    let (outer, t, inner) = split_at_axis(input_shape, axis);
    let t_out = t / stride;
    let dy = grad_out.data();
    let mut dx = vec![0.0; outer * t * inner];
    let div = stride as Float;
    for o in 0..outer {
        for tp in 0..t_out {
            let src = &dy[(o * t_out + tp) * inner..(o * t_out + tp + 1) * inner];
            for s in 0..stride {
                let base = (o * t + tp * stride + s) * inner;
                for (d, &v) in dx[base..base + inner].iter_mut().zip(src) {
                    *d = v / div;
                }
            }
        }
    }
    Tensor::from_parts(input_shape.to_vec(), dx)
}

pub fn sigmoid(x: Float) -> Float {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn lrelu(x: Float) -> Float {
    if x >= 0.0 {
        x
    } else {
        LRELU_SLOPE * x
    }
}

/// Softmax of a vector with max-subtraction.
pub fn softmax(x: &[Float]) -> Vec<Float> {
    let m = x.iter().fold(Float::NEG_INFINITY, |m, &v| m.max(v));
    let e: Vec<Float> = x.iter().map(|&v| (v - m).exp()).collect();
    let s: Float = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `-ln(probs[target] + LOG_EPS)`.
pub fn cross_entropy(probs: &[Float], target: usize) -> Result<Float> {
    let p = probs.get(target).ok_or(Error::Index {
        index: target,
        len: probs.len(),
    })?;
    Ok(-(p + LOG_EPS).ln())
}

/// `y = W x + b` for a `(out, in)` weight matrix.
pub fn linear_forward(weight: &Tensor, x: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    if weight.ndim() != 2 || weight.shape()[1] != x.len() {
        return Err(Error::shape(format!(
            "linear weights {:?} cannot take an input of length {}",
            weight.shape(),
            x.len()
        )));
    }
    let (n_out, n_in) = (weight.shape()[0], weight.shape()[1]);
    if let Some(b) = bias {
        if b.len() != n_out {
            return Err(Error::shape(format!("bias length {} for {n_out} outputs", b.len())));
        }
    }
    let xv = x.data();
    let mut y = vec![0.0; n_out];
    let row = |j: usize| -> Float {
        let w = &weight.data()[j * n_in..(j + 1) * n_in];
        let dot: Float = w.iter().zip(xv).map(|(&a, &b)| a * b).sum();
        dot + bias.map_or(0.0, |b| b.data()[j])
    };
    if n_out * n_in >= PAR_WORK {
        y.par_iter_mut().enumerate().for_each(|(j, v)| *v = row(j));
    } else {
        y.iter_mut().enumerate().for_each(|(j, v)| *v = row(j));
    }
    Ok(Tensor::from_vec(y))
}

/// `(dW, dx)` for [`linear_forward`]; the bias gradient equals `dy`.
pub fn linear_backward(
    weight: &Tensor,
    x: &Tensor,
    dy: &Tensor,
    need_weight: bool,
    need_input: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (n_out, n_in) = (weight.shape()[0], weight.shape()[1]);
    let xv = x.data();
    let dyv = dy.data();
    let dw = need_weight.then(|| {
        let mut dw = vec![0.0; n_out * n_in];
        let fill = |(j, row): (usize, &mut [Float])| {
            let g = dyv[j];
            for (d, &xi) in row.iter_mut().zip(xv) {
                *d = g * xi;
            }
        };
        if n_out * n_in >= PAR_WORK {
            dw.par_chunks_mut(n_in).enumerate().for_each(fill);
        } else {
            dw.chunks_mut(n_in).enumerate().for_each(fill);
        }
        Tensor::from_parts(weight.shape().to_vec(), dw)
    });
    let dx = need_input.then(|| {
        let mut dx = vec![0.0; n_in];
        for (j, &g) in dyv.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let w = &weight.data()[j * n_in..(j + 1) * n_in];
            for (d, &wv) in dx.iter_mut().zip(w) {
                *d += g * wv;
            }
        }
        Tensor::from_parts(x.shape().to_vec(), dx)
    });
    (dw, dx)
}
