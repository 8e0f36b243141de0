//! Stateless forward/backward kernels for the conventional CNN layers.
//!
//! Convolutions are valid-padding, stride-1 cross-correlations with weights laid
//! out as `(filter, p, q, in_channel)`. Fully connected weights are
//! `(out, in)` row-major and consume their input flattened.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub fn conv_output_shape(input: Shape, filters: usize, size: usize) -> Result<Shape> {
    if size == 0 || filters == 0 {
        return Err(Error::InvalidConfig("conv needs filters >= 1 and size >= 1".into()));
    }
    if input.rows < size || input.cols < size {
        return Err(Error::ShapeMismatch(format!(
            "conv {size}x{size} does not fit input {input}"
        )));
    }
    Shape::new(input.rows - size + 1, input.cols - size + 1, filters)
}

pub fn conv2d_forward<S: Scalar>(
    x: &Tensor<S>,
    weight: &[S],
    bias: &[S],
    size: usize,
) -> Result<Tensor<S>> {
    let input = x.shape();
    let filters = bias.len();
    let out = conv_output_shape(input, filters, size)?;
    let span = size * input.channels;
    if weight.len() != filters * size * span {
        return Err(Error::ShapeMismatch(format!(
            "conv weight has {} values, expected {}",
            weight.len(),
            filters * size * span
        )));
    }
    let mut y = Tensor::zeros(out);
    let xd = x.data();
    let yd = y.data_mut();
    for i in 0..out.rows {
        for j in 0..out.cols {
            let o = (i * out.cols + j) * filters;
            for f in 0..filters {
                let mut s = bias[f];
                for p in 0..size {
                    let xs = ((i + p) * input.cols + j) * input.channels;
                    let ws = (f * size + p) * span;
                    s += dot(&xd[xs..xs + span], &weight[ws..ws + span]);
                }
                yd[o + f] = s;
            }
        }
    }
    Ok(y)
}

/// Returns `(d_weight, d_bias, d_input)`; the input gradient is skipped unless requested.
pub fn conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    weight: &[S],
    size: usize,
    d_out: &Tensor<S>,
    need_input_grad: bool,
) -> Result<(Vec<S>, Vec<S>, Option<Tensor<S>>)> {
    let input = x.shape();
    let out = d_out.shape();
    let filters = out.channels;
    if conv_output_shape(input, filters, size)? != out {
        return Err(Error::ShapeMismatch(format!("conv gradient shape {out} does not match")));
    }
    let span = size * input.channels;
    let mut dw = vec![S::zero(); weight.len()];
    let mut db = vec![S::zero(); filters];
    let mut dx = need_input_grad.then(|| Tensor::zeros(input));
    let xd = x.data();
    let gd = d_out.data();
    for i in 0..out.rows {
        for j in 0..out.cols {
            let o = (i * out.cols + j) * filters;
            for f in 0..filters {
                let g = gd[o + f];
                if g == S::zero() {
                    continue;
                }
                db[f] += g;
                for p in 0..size {
                    let xs = ((i + p) * input.cols + j) * input.channels;
                    let ws = (f * size + p) * span;
                    axpy(g, &xd[xs..xs + span], &mut dw[ws..ws + span]);
                    if let Some(dx) = dx.as_mut() {
                        axpy(g, &weight[ws..ws + span], &mut dx.data_mut()[xs..xs + span]);
                    }
                }
            }
        }
    }
    Ok((dw, db, dx))
}

pub fn maxpool_output_shape(input: Shape) -> Result<Shape> {
    if input.rows < 2 || input.cols < 2 {
        return Err(Error::ShapeMismatch(format!("2x2 max pooling needs at least 2x2, got {input}")));
    }
    Shape::new(input.rows / 2, input.cols / 2, input.channels)
}

/// 2x2 max pooling with stride 2; a trailing odd row or column is dropped.
/// Also returns, for every output, the flat index of the winning input.
pub fn maxpool_forward<S: Scalar>(x: &Tensor<S>) -> Result<(Tensor<S>, Vec<usize>)> {
    let input = x.shape();
    let out = maxpool_output_shape(input)?;
    let mut y = Tensor::zeros(out);
    let mut argmax = vec![0usize; out.len()];
    for i in 0..out.rows {
        for j in 0..out.cols {
            for k in 0..out.channels {
                let mut best = input.offset(2 * i, 2 * j, k);
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = input.offset(2 * i + di, 2 * j + dj, k);
                    if x.data()[idx] > x.data()[best] {
                        best = idx;
                    }
                }
                let o = out.offset(i, j, k);
                y.data_mut()[o] = x.data()[best];
                argmax[o] = best;
            }
        }
    }
    Ok((y, argmax))
}

pub fn maxpool_backward<S: Scalar>(d_out: &Tensor<S>, argmax: &[usize], input: Shape) -> Tensor<S> {
    let mut dx = Tensor::zeros(input);
    for (&g, &idx) in d_out.data().iter().zip(argmax) {
        dx.data_mut()[idx] += g;
    }
    dx
}

pub fn relu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| v.max(S::zero()))
}

pub fn relu_backward<S: Scalar>(x: &Tensor<S>, d_out: &Tensor<S>) -> Tensor<S> {
    let mut dx = d_out.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if v <= S::zero() {
            *d = S::zero();
        }
    }
    dx
}

pub fn sigmoid<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| S::one() / (S::one() + (-v).exp()))
}

/// Gradient through a sigmoid given its output `y`.
pub fn sigmoid_backward<S: Scalar>(y: &Tensor<S>, d_out: &Tensor<S>) -> Tensor<S> {
    let mut dx = d_out.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(y.data()) {
        *d *= v * (S::one() - v);
    }
    dx
}

pub fn fc_forward<S: Scalar>(x: &Tensor<S>, weight: &[S], bias: &[S]) -> Result<Tensor<S>> {
    let n_in = x.data().len();
    let n_out = bias.len();
    if weight.len() != n_in * n_out {
        return Err(Error::ShapeMismatch(format!(
            "fc weight has {} values, expected {n_out}x{n_in}",
            weight.len()
        )));
    }
    let out = weight
        .chunks_exact(n_in)
        .zip(bias)
        .map(|(row, &b)| b + dot(row, x.data()))
        .collect();
    Tensor::vector(out)
}

pub fn fc_backward<S: Scalar>(
    x: &Tensor<S>,
    weight: &[S],
    d_out: &Tensor<S>,
    need_input_grad: bool,
) -> (Vec<S>, Vec<S>, Option<Tensor<S>>) {
    let n_in = x.data().len();
    let mut dw = vec![S::zero(); weight.len()];
    let db = d_out.data().to_vec();
    let mut dx = need_input_grad.then(|| Tensor::zeros(x.shape()));
    for (o, &g) in d_out.data().iter().enumerate() {
        if g == S::zero() {
            continue;
        }
        let rows = o * n_in..(o + 1) * n_in;
        axpy(g, x.data(), &mut dw[rows.clone()]);
        if let Some(dx) = dx.as_mut() {
            axpy(g, &weight[rows], dx.data_mut());
        }
    }
    (dw, db, dx)
}

/// Inverted dropout: survivors are scaled by `1 / (1 - rate)`. Returns the
/// output and the per-element multiplier.
pub fn dropout_forward<S: Scalar, R: Rng + ?Sized>(
    x: &Tensor<S>,
    rate: f64,
    rng: &mut R,
) -> (Tensor<S>, Vec<S>) {
    let keep = S::of(1.0 / (1.0 - rate));
    let mask: Vec<S> = (0..x.data().len())
        .map(|_| if rng.gen::<f64>() >= rate { keep } else { S::zero() })
        .collect();
    let mut y = x.clone();
    for (v, &m) in y.data_mut().iter_mut().zip(&mask) {
        *v *= m;
    }
    (y, mask)
}

pub fn dropout_backward<S: Scalar>(d_out: &Tensor<S>, mask: &[S]) -> Tensor<S> {
    let mut dx = d_out.clone();
    for (d, &m) in dx.data_mut().iter_mut().zip(mask) {
        *d *= m;
    }
    dx
}

/// Global average pooling to a `1 x 1 x channels` vector.
pub fn gap_forward<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    Tensor::vector(x.reduce_mean(true)).expect("tensors have at least one channel")
}

pub fn gap_backward<S: Scalar>(d_out: &Tensor<S>, input: Shape) -> Tensor<S> {
    let scale = S::of(1.0 / input.area() as f64);
    let mut dx = Tensor::zeros(input);
    for px in dx.data_mut().chunks_exact_mut(input.channels) {
        for (d, &g) in px.iter_mut().zip(d_out.data()) {
            *d = g * scale;
        }
    }
    dx
}

/// Cross-entropy of the softmax of `logits` against the teacher distribution.
/// Returns the loss and its gradient `softmax(logits) - teacher`.
pub fn softmax_xent<S: Scalar>(logits: &[S], teacher: &[S]) -> Result<(S, Vec<S>)> {
    if logits.len() != teacher.len() || logits.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} logits against a teacher of length {}",
            logits.len(),
            teacher.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let exps: Vec<S> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: S = exps.iter().copied().sum();
    let log_sum = sum.ln() + max;
    let loss = teacher
        .iter()
        .zip(logits)
        .filter(|(&t, _)| t != S::zero())
        .map(|(&t, &z)| t * (log_sum - z))
        .sum();
    let grad = exps.iter().zip(teacher).map(|(&e, &t)| e / sum - t).collect();
    Ok((loss, grad))
}

pub fn argmax<S: Scalar>(v: &[S]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[inline]
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut s = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy<S: Scalar>(alpha: S, x: &[S], y: &mut [S]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}
