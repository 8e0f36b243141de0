//! Trainable multiplication layer.
//!
//! Each output is a product of input values raised to learned, nonnegative
//! exponents:
//!
//! ```text
//! y[i, j, m] = prod_{p, q, k} (x[i + p, j + q, k] + eps) ^ w[p, q, k, m]
//! ```
//!
//! evaluated as `exp(sum w * ln(x + eps))`. Kernels slide with stride 1 and no
//! padding, so an `N1 x N2 x K` input yields an `(N1 - H + 1) x (N2 - W + 1) x M`
//! output. A zero weight contributes a factor of exactly one, including when the
//! input is zero.
//!
//! Training keeps every kernel on the constraint set `sum(w_m) = c1`,
//! `0 <= w <= c2` by alternating gradient steps with [`project_kernels`]:
//! clip into `[0, c2]`, then rescale each kernel to sum `c1`. The rescale can
//! push a weight back above `c2`; the next clip removes it.

use std::io::{Read, Write};

use rand::Rng;

use crate::binio;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub const DEFAULT_EPS: f64 = 1e-6;

const KERNEL_MAGIC: &[u8; 4] = b"TMLK";
const KERNEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TmlConfig {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub in_channels: usize,
    pub num_kernels: usize,
    /// Sum every kernel is rescaled to.
    pub c1: f64,
    /// Upper clip bound for a single weight.
    pub c2: f64,
    pub eps: f64,
}

impl TmlConfig {
    pub fn new(
        kernel_h: usize,
        kernel_w: usize,
        in_channels: usize,
        num_kernels: usize,
        c1: f64,
        c2: f64,
    ) -> Result<Self> {
        let cfg = Self {
            kernel_h,
            kernel_w,
            in_channels,
            num_kernels,
            c1,
            c2,
            eps: DEFAULT_EPS,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_eps(mut self, eps: f64) -> Result<Self> {
        self.eps = eps;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.kernel_h == 0 || self.kernel_w == 0 || self.in_channels == 0 || self.num_kernels == 0
        {
            return bad(format!(
                "TML dimensions must be >= 1 (H={}, W={}, K={}, M={})",
                self.kernel_h, self.kernel_w, self.in_channels, self.num_kernels
            ));
        }
        if !(self.c1.is_finite() && self.c1 > 0.0 && self.c2.is_finite() && self.c2 > 0.0) {
            return bad(format!("c1 and c2 must be positive (c1={}, c2={})", self.c1, self.c2));
        }
        if self.c2 > self.c1 {
            return bad(format!("c2={} exceeds c1={}", self.c2, self.c1));
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        let cells = self
            .kernel_h
            .checked_mul(self.kernel_w)
            .and_then(|v| v.checked_mul(self.in_channels))
            .filter(|v| v.checked_mul(self.num_kernels).is_some())
            .ok_or_else(|| Error::InvalidConfig("kernel bank size overflows".into()))?;
        // c1 spread over cells each capped at c2 needs c1 / c2 <= cells.
        if self.c1 > self.c2 * cells as f64 {
            return bad(format!(
                "c1/c2 = {} exceeds the {cells} cells of a kernel; constraints are infeasible",
                self.c1 / self.c2
            ));
        }
        Ok(())
    }

    /// Cells per kernel (`H * W * K`).
    pub fn kernel_len(&self) -> usize {
        self.kernel_h * self.kernel_w * self.in_channels
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.channels != self.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "TML expects {} input channels, got {input}",
                self.in_channels
            )));
        }
        if input.rows < self.kernel_h || input.cols < self.kernel_w {
            return Err(Error::ShapeMismatch(format!(
                "input {input} smaller than {}x{} kernel",
                self.kernel_h, self.kernel_w
            )));
        }
        Shape::new(
            input.rows - self.kernel_h + 1,
            input.cols - self.kernel_w + 1,
            self.num_kernels,
        )
    }
}

/// Exponent bank `w[p, q, k, m]`, stored with `m` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct TmlKernels<S> {
    config: TmlConfig,
    weights: Vec<S>,
}

impl<S: Scalar> TmlKernels<S> {
    pub fn zeros(config: TmlConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            weights: vec![S::zero(); config.kernel_len() * config.num_kernels],
            config,
        })
    }

    pub fn from_weights(config: TmlConfig, weights: Vec<S>) -> Result<Self> {
        config.validate()?;
        let expected = config.kernel_len() * config.num_kernels;
        if weights.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "{} weights supplied, kernel bank holds {expected}",
                weights.len()
            )));
        }
        Ok(Self { config, weights })
    }

    /// Uniform draws in `[0, c2]`, projected repeatedly until every weight is
    /// also at most `c2`, so the result satisfies both constraints.
    pub fn random<R: Rng + ?Sized>(config: TmlConfig, rng: &mut R) -> Result<Self> {
        let mut kernels = Self::zeros(config)?;
        for w in &mut kernels.weights {
            *w = S::of(rng.gen_range(0.0..=config.c2));
        }
        let hi = S::of(config.c2);
        for _ in 0..1000 {
            kernels.project_or_reinit();
            if kernels.weights.iter().all(|&w| w <= hi) {
                return Ok(kernels);
            }
        }
        for m in 0..config.num_kernels {
            kernels.reinit_kernel(m);
        }
        Ok(kernels)
    }

    pub fn config(&self) -> &TmlConfig {
        &self.config
    }

    pub fn set_eps(&mut self, eps: f64) -> Result<()> {
        self.config = self.config.with_eps(eps)?;
        Ok(())
    }

    pub fn weights(&self) -> &[S] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [S] {
        &mut self.weights
    }

    #[inline]
    pub fn index(&self, p: usize, q: usize, k: usize, m: usize) -> usize {
        let c = &self.config;
        ((p * c.kernel_w + q) * c.in_channels + k) * c.num_kernels + m
    }

    #[inline]
    pub fn get(&self, p: usize, q: usize, k: usize, m: usize) -> S {
        self.weights[self.index(p, q, k, m)]
    }

    #[inline]
    pub fn set(&mut self, p: usize, q: usize, k: usize, m: usize, v: S) {
        let i = self.index(p, q, k, m);
        self.weights[i] = v;
    }

    /// The `m`-th kernel flattened in `(p, q, k)` order.
    pub fn kernel(&self, m: usize) -> Vec<S> {
        self.weights
            .iter()
            .skip(m)
            .step_by(self.config.num_kernels)
            .copied()
            .collect()
    }

    pub fn kernel_sum(&self, m: usize) -> S {
        self.weights
            .iter()
            .skip(m)
            .step_by(self.config.num_kernels)
            .copied()
            .sum()
    }

    /// First projection step: clip every weight into `[0, c2]`.
    pub fn clip_weights(&mut self) {
        let hi = S::of(self.config.c2);
        for w in &mut self.weights {
            *w = w.max(S::zero()).min(hi);
        }
    }

    /// Second projection step: rescale every kernel to sum `c1`.
    ///
    /// Kernels summing to zero cannot be rescaled; they are left untouched and
    /// reported through [`Error::DegenerateKernels`] after all others are done.
    pub fn rescale_kernels(&mut self) -> Result<()> {
        let m_count = self.config.num_kernels;
        let c1 = S::of(self.config.c1);
        let mut degenerate = Vec::new();
        for m in 0..m_count {
            let sum = self.kernel_sum(m);
            if !(sum > S::zero()) {
                degenerate.push(m);
                continue;
            }
            for w in self.weights.iter_mut().skip(m).step_by(m_count) {
                *w = c1 * *w / sum;
            }
        }
        if degenerate.is_empty() {
            Ok(())
        } else {
            Err(Error::DegenerateKernels(degenerate))
        }
    }

    /// Clip then rescale, in that order.
    pub fn project(&mut self) -> Result<()> {
        self.clip_weights();
        self.rescale_kernels()
    }

    /// Resets kernel `m` to the uniform feasible point `c1 / (H * W * K)`.
    pub fn reinit_kernel(&mut self, m: usize) {
        let m_count = self.config.num_kernels;
        let v = S::of(self.config.c1 / self.config.kernel_len() as f64);
        for w in self.weights.iter_mut().skip(m).step_by(m_count) {
            *w = v;
        }
    }

    /// [`Self::project`], reinitializing degenerate kernels. Returns their indices.
    pub fn project_or_reinit(&mut self) -> Vec<usize> {
        match self.project() {
            Ok(()) => Vec::new(),
            Err(Error::DegenerateKernels(ms)) => {
                for &m in &ms {
                    self.reinit_kernel(m);
                }
                ms
            }
            Err(_) => unreachable!("projection only reports degenerate kernels"),
        }
    }

    pub fn l1(&self) -> S {
        self.weights.iter().map(|w| w.abs()).sum()
    }

    /// Count of weights in kernel `m` strictly above `threshold`.
    pub fn active_count(&self, m: usize, threshold: f64) -> usize {
        let t = S::of(threshold);
        self.weights
            .iter()
            .skip(m)
            .step_by(self.config.num_kernels)
            .filter(|&&w| w > t)
            .count()
    }

    pub fn cast<T: Scalar>(&self) -> TmlKernels<T> {
        TmlKernels {
            config: self.config,
            weights: self.weights.iter().map(|w| T::of(w.to_f64_lossy())).collect(),
        }
    }

    /// Writes the `TMLK` binary format.
    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        let c = &self.config;
        out.write_all(KERNEL_MAGIC)?;
        binio::write_u32(out, KERNEL_VERSION)?;
        for (v, what) in [
            (c.kernel_h, "H"),
            (c.kernel_w, "W"),
            (c.in_channels, "K"),
            (c.num_kernels, "M"),
        ] {
            binio::write_u32(out, binio::to_u32(v, what)?)?;
        }
        for v in [c.c1, c.c2, c.eps] {
            binio::write_f64(out, v)?;
        }
        for w in &self.weights {
            binio::write_f64(out, w.to_f64_lossy())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(input: &mut R) -> Result<Self> {
        binio::read_magic(input, KERNEL_MAGIC)?;
        let version = binio::read_u32(input)?;
        if version != KERNEL_VERSION {
            return Err(Error::Format(format!("unsupported kernel format version {version}")));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = binio::read_u32(input)? as usize;
        }
        let config = TmlConfig {
            kernel_h: dims[0],
            kernel_w: dims[1],
            in_channels: dims[2],
            num_kernels: dims[3],
            c1: binio::read_f64(input)?,
            c2: binio::read_f64(input)?,
            eps: binio::read_f64(input)?,
        };
        config.validate()?;
        let n = config.kernel_len() * config.num_kernels;
        let mut weights = Vec::with_capacity(n);
        for _ in 0..n {
            weights.push(S::of(binio::read_f64(input)?));
        }
        Self::from_weights(config, weights)
    }
}

fn check_input<S: Scalar>(x: &Tensor<S>, kernels: &TmlKernels<S>) -> Result<Shape> {
    let out = kernels.config.output_shape(x.shape())?;
    if let Some(pos) = x.data().iter().position(|&v| !(v >= S::zero())) {
        let s = x.shape();
        let (i, rem) = (pos / (s.cols * s.channels), pos % (s.cols * s.channels));
        return Err(Error::NegativeInput {
            i,
            j: rem / s.channels,
            k: rem % s.channels,
            value: x.data()[pos].to_f64_lossy(),
        });
    }
    Ok(out)
}

fn log_input<S: Scalar>(x: &Tensor<S>, eps: S) -> Vec<S> {
    x.data().iter().map(|&v| (v + eps).ln()).collect()
}

/// Input offsets of every kernel cell relative to the window origin, in `(p, q, k)` order.
fn tap_offsets(cfg: &TmlConfig, input: Shape) -> Vec<usize> {
    let mut taps = Vec::with_capacity(cfg.kernel_len());
    for p in 0..cfg.kernel_h {
        for q in 0..cfg.kernel_w {
            for k in 0..cfg.in_channels {
                taps.push((p * input.cols + q) * input.channels + k);
            }
        }
    }
    taps
}

fn check_grad_shapes<S: Scalar>(
    x: &Tensor<S>,
    y: &Tensor<S>,
    d_y: &Tensor<S>,
    kernels: &TmlKernels<S>,
) -> Result<Shape> {
    let out = kernels.config.output_shape(x.shape())?;
    if y.shape() != out || d_y.shape() != out {
        return Err(Error::ShapeMismatch(format!(
            "TML output is {out}, got y {} and dy {}",
            y.shape(),
            d_y.shape()
        )));
    }
    Ok(out)
}

/// Forward pass, evaluated in the log domain.
pub fn tml_forward<S: Scalar>(x: &Tensor<S>, kernels: &TmlKernels<S>) -> Result<Tensor<S>> {
    let out = check_input(x, kernels)?;
    let cfg = kernels.config;
    let input = x.shape();
    let z = log_input(x, S::of(cfg.eps));
    let taps = tap_offsets(&cfg, input);
    let mut y = Tensor::zeros(out);
    let y_data = y.data_mut();

    for m in 0..cfg.num_kernels {
        let active: Vec<(usize, S)> = taps
            .iter()
            .enumerate()
            .map(|(t, &off)| (off, kernels.weights[t * cfg.num_kernels + m]))
            .filter(|&(_, w)| w != S::zero())
            .collect();
        for i in 0..out.rows {
            for j in 0..out.cols {
                let base = (i * input.cols + j) * input.channels;
                let s: S = active.iter().map(|&(off, w)| w * z[base + off]).sum();
                y_data[(i * out.cols + j) * out.channels + m] = s.exp();
            }
        }
    }
    Ok(y)
}

/// Gradient of the loss with respect to every exponent, accumulated over all
/// output positions: `dw[p,q,k,m] = sum_ij dy[i,j,m] * y[i,j,m] * ln(x[i+p,j+q,k] + eps)`.
pub fn tml_backward_weights<S: Scalar>(
    x: &Tensor<S>,
    y: &Tensor<S>,
    d_y: &Tensor<S>,
    kernels: &TmlKernels<S>,
) -> Result<Vec<S>> {
    let out = check_grad_shapes(x, y, d_y, kernels)?;
    let cfg = kernels.config;
    let input = x.shape();
    let z = log_input(x, S::of(cfg.eps));
    let taps = tap_offsets(&cfg, input);
    let m_count = cfg.num_kernels;
    let mut d_w = vec![S::zero(); kernels.weights.len()];

    for i in 0..out.rows {
        for j in 0..out.cols {
            let o = (i * out.cols + j) * m_count;
            let base = (i * input.cols + j) * input.channels;
            for m in 0..m_count {
                let g = d_y.data()[o + m] * y.data()[o + m];
                if g == S::zero() {
                    continue;
                }
                for (t, &off) in taps.iter().enumerate() {
                    d_w[t * m_count + m] += g * z[base + off];
                }
            }
        }
    }
    Ok(d_w)
}

/// Gradient of the loss with respect to the layer input.
pub fn tml_backward_input<S: Scalar>(
    x: &Tensor<S>,
    y: &Tensor<S>,
    d_y: &Tensor<S>,
    kernels: &TmlKernels<S>,
) -> Result<Tensor<S>> {
    let out = check_grad_shapes(x, y, d_y, kernels)?;
    let cfg = kernels.config;
    let input = x.shape();
    let taps = tap_offsets(&cfg, input);
    let m_count = cfg.num_kernels;
    let mut d_x = Tensor::zeros(input);
    let dx = d_x.data_mut();

    for m in 0..m_count {
        let active: Vec<(usize, S)> = taps
            .iter()
            .enumerate()
            .map(|(t, &off)| (off, kernels.weights[t * m_count + m]))
            .filter(|&(_, w)| w != S::zero())
            .collect();
        if active.is_empty() {
            continue;
        }
        for i in 0..out.rows {
            for j in 0..out.cols {
                let o = (i * out.cols + j) * m_count + m;
                let g = d_y.data()[o] * y.data()[o];
                let base = (i * input.cols + j) * input.channels;
                for &(off, w) in &active {
                    dx[base + off] += g * w;
                }
            }
        }
    }
    let eps = S::of(cfg.eps);
    for (d, &v) in dx.iter_mut().zip(x.data()) {
        *d /= v + eps;
    }
    Ok(d_x)
}

/// Returns a projected copy: clip into `[0, c2]`, then rescale each kernel to `c1`.
pub fn project_kernels<S: Scalar>(kernels: &TmlKernels<S>) -> Result<TmlKernels<S>> {
    let mut out = kernels.clone();
    out.project()?;
    Ok(out)
}

pub fn kernel_l1<S: Scalar>(kernels: &TmlKernels<S>) -> S {
    kernels.l1()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(h: usize, w: usize, k: usize, m: usize, c1: f64, c2: f64) -> TmlConfig {
        TmlConfig::new(h, w, k, m, c1, c2).unwrap()
    }

    fn vector_kernels(weights: &[f64], c1: f64, c2: f64) -> TmlKernels<f64> {
        TmlKernels::from_weights(cfg(1, weights.len(), 1, 1, c1, c2), weights.to_vec()).unwrap()
    }

    /// Direct product of powers, no logarithms.
    fn direct_forward(x: &Tensor<f64>, k: &TmlKernels<f64>) -> Tensor<f64> {
        let c = *k.config();
        let out = c.output_shape(x.shape()).unwrap();
        let mut y = Tensor::zeros(out);
        for i in 0..out.rows {
            for j in 0..out.cols {
                for m in 0..c.num_kernels {
                    let mut prod = 1.0;
                    for p in 0..c.kernel_h {
                        for q in 0..c.kernel_w {
                            for ch in 0..c.in_channels {
                                let w = k.get(p, q, ch, m);
                                if w != 0.0 {
                                    prod *= (x.get(i + p, j + q, ch) + c.eps).powf(w);
                                }
                            }
                        }
                    }
                    y.set(i, j, m, prod);
                }
            }
        }
        y
    }

    #[test]
    fn config_validation() {
        assert!(TmlConfig::new(3, 3, 1, 4, 1.0, 0.5).is_ok());
        assert!(TmlConfig::new(3, 3, 1, 4, 0.5, 1.0).is_err());
        assert!(TmlConfig::new(1, 2, 1, 1, 1.0, 0.25).is_err());
        assert!(TmlConfig::new(1, 4, 1, 1, 1.0, 0.25).is_ok());
        assert!(TmlConfig::new(3, 3, 1, 4, 1.0, 0.5).unwrap().with_eps(0.0).is_err());
        assert!(TmlConfig::new(0, 3, 1, 4, 1.0, 0.5).is_err());
    }

    #[test]
    fn zero_weights_give_one() {
        let x = Tensor::<f64>::from_rows(&[&[0.0, 2.0, 0.3], &[3.0, 0.0, 1.0]]).unwrap();
        let k = TmlKernels::zeros(cfg(2, 2, 1, 3, 1.0, 0.5)).unwrap();
        let y = tml_forward(&x, &k).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 2, 3).unwrap());
        assert!(y.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn single_unit_weight_is_shifted_identity() {
        let x = Tensor::<f64>::from_rows(&[&[0.0, 0.25], &[0.5, 1.0]]).unwrap();
        let mut k = TmlKernels::zeros(cfg(1, 1, 1, 1, 1.0, 1.0).with_eps(1e-8).unwrap()).unwrap();
        k.set(0, 0, 0, 0, 1.0);
        let y = tml_forward(&x, &k).unwrap();
        for (yv, xv) in y.data().iter().zip(x.data()) {
            assert!((yv - (xv + 1e-8)).abs() <= 1e-15, "{yv} vs {xv}");
        }
    }

    #[test]
    fn square_root_of_top_row() {
        let x = Tensor::<f64>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let config = cfg(2, 2, 1, 1, 1.0, 0.5).with_eps(1e-12).unwrap();
        let k = TmlKernels::from_weights(config, vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        let y = tml_forward(&x, &k).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 1).unwrap());
        // sqrt(1 * 2) computed without logarithms.
        let expected = (1.0f64 * 2.0).sqrt();
        assert!((y.data()[0] - expected).abs() < 1e-10);
        assert!((y.data()[0] - 1.414214).abs() < 1e-6);
    }

    #[test]
    fn forward_rejects_bad_input() {
        let k = TmlKernels::<f64>::zeros(cfg(2, 2, 1, 1, 1.0, 0.5)).unwrap();
        let neg = Tensor::<f64>::from_rows(&[&[1.0, -2.0], &[3.0, 4.0]]).unwrap();
        assert!(matches!(
            tml_forward(&neg, &k),
            Err(Error::NegativeInput { i: 0, j: 1, k: 0, .. })
        ));
        let two_ch = Tensor::<f64>::zeros(Shape::new(3, 3, 2).unwrap());
        assert!(matches!(tml_forward(&two_ch, &k), Err(Error::ShapeMismatch(_))));
        let small = Tensor::<f64>::zeros(Shape::new(1, 3, 1).unwrap());
        assert!(tml_forward(&small, &k).is_err());
    }

    #[test]
    fn weight_gradient_vanishes_when_log_is_zero() {
        let eps = DEFAULT_EPS;
        let x = Tensor::<f64>::new(Shape::new(4, 4, 1).unwrap(), 1.0 - eps).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = TmlKernels::random(cfg(2, 2, 1, 2, 1.0, 0.5), &mut rng).unwrap();
        let y = tml_forward(&x, &k).unwrap();
        let dy = y.map(|_| 1.0);
        let dw = tml_backward_weights(&x, &y, &dy, &k).unwrap();
        assert!(dw.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::from_vec(
            Shape::new(4, 4, 1).unwrap(),
            (0..16).map(|_| rng.gen_range(0.1..2.0)).collect(),
        )
        .unwrap();
        let k = TmlKernels::random(cfg(2, 2, 1, 2, 1.0, 0.5), &mut rng).unwrap();
        let y = tml_forward(&x, &k).unwrap();
        let dy = y.map(|_| 0.0);
        assert!(tml_backward_weights(&x, &y, &dy, &k).unwrap().iter().all(|&g| g == 0.0));
        assert!(tml_backward_input(&x, &y, &dy, &k).unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn input_gradient_zero_for_zero_kernels() {
        let x = Tensor::<f64>::new(Shape::new(3, 3, 1).unwrap(), 0.7).unwrap();
        let k = TmlKernels::zeros(cfg(2, 2, 1, 1, 1.0, 0.5)).unwrap();
        let y = tml_forward(&x, &k).unwrap();
        let dy = y.map(|_| 1.0);
        assert!(tml_backward_input(&x, &y, &dy, &k).unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn identity_layer_routes_gradient() {
        let x = Tensor::<f64>::from_rows(&[&[0.2, 0.4], &[0.6, 0.8]]).unwrap();
        let mut k = TmlKernels::zeros(cfg(1, 1, 1, 1, 1.0, 1.0).with_eps(1e-12).unwrap()).unwrap();
        k.set(0, 0, 0, 0, 1.0);
        let y = tml_forward(&x, &k).unwrap();
        let dy = Tensor::<f64>::from_rows(&[&[1.0, -2.0], &[3.0, 0.5]]).unwrap();
        let dx = tml_backward_input(&x, &y, &dy, &k).unwrap();
        for (a, b) in dx.data().iter().zip(dy.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn projection_examples() {
        let mut k = vector_kernels(&[0.5, 0.5], 1.0, 0.5);
        k.project().unwrap();
        assert_eq!(k.weights(), &[0.5, 0.5]);

        let mut k = vector_kernels(&[0.8, 0.6, 0.2], 1.0, 0.5);
        k.clip_weights();
        assert_eq!(k.weights(), &[0.5, 0.5, 0.2]);
        k.rescale_kernels().unwrap();
        let expected = [5.0 / 12.0, 5.0 / 12.0, 1.0 / 6.0];
        for (a, b) in k.weights().iter().zip(expected) {
            assert!((a - b).abs() <= 1e-15, "{a} vs {b}");
        }

        let mut k = vector_kernels(&[-0.3, 1.3], 1.0, 0.5);
        k.clip_weights();
        assert_eq!(k.weights(), &[0.0, 0.5]);
        k.rescale_kernels().unwrap();
        // Rescaling overshoots c2; the next clip deals with it.
        assert_eq!(k.weights(), &[0.0, 1.0]);
    }

    #[test]
    fn degenerate_kernel_reported_and_reinitialized() {
        let config = cfg(1, 2, 1, 2, 1.0, 0.5);
        let mut k = TmlKernels::from_weights(config, vec![-1.0, 0.3, -0.5, 0.9]).unwrap();
        let err = project_kernels(&k).unwrap_err();
        assert!(matches!(err, Error::DegenerateKernels(ref ms) if ms == &[0]));
        assert_eq!(k.project_or_reinit(), vec![0]);
        assert_eq!(k.kernel(0), vec![0.5, 0.5]);
        assert!((k.kernel_sum(1) - 1.0f64).abs() < 1e-12);
    }

    #[test]
    fn l1_examples() {
        assert_eq!(kernel_l1(&TmlKernels::<f64>::zeros(cfg(2, 2, 1, 3, 1.0, 0.5)).unwrap()), 0.0);
        assert!((kernel_l1(&vector_kernels(&[0.3, -0.2], 1.0, 0.5)) - 0.5).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let k = TmlKernels::<f64>::random(cfg(3, 3, 2, 5, 1.0, 0.5), &mut rng).unwrap();
        assert!((kernel_l1(&k) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn random_init_is_feasible_and_seeded() {
        let c = cfg(3, 3, 1, 8, 1.0, 0.5);
        let a = TmlKernels::<f64>::random(c, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = TmlKernels::<f64>::random(c, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        for m in 0..8 {
            assert!((a.kernel_sum(m) - 1.0).abs() < 1e-9);
            assert!(a.kernel(m).iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn binary_round_trip_and_layout() {
        let c = cfg(2, 1, 1, 2, 1.0, 0.5).with_eps(1e-4).unwrap();
        let k = TmlKernels::<f64>::from_weights(c, vec![0.25, 0.5, 0.75, 0.5]).unwrap();
        let mut buf = Vec::new();
        k.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 4 + 16 + 24 + 4 * 8);
        assert_eq!(&buf[..4], b"TMLK");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &2u32.to_le_bytes());
        assert_eq!(&buf[20..24], &2u32.to_le_bytes());
        assert_eq!(&buf[24..32], &1.0f64.to_le_bytes());
        assert_eq!(&buf[40..48], &1e-4f64.to_le_bytes());
        assert_eq!(&buf[48..56], &0.25f64.to_le_bytes());
        let back = TmlKernels::<f64>::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, k);
        assert!(TmlKernels::<f64>::read_from(&mut &buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(TmlKernels::<f64>::read_from(&mut bad.as_slice()).is_err());
    }

    #[test]
    fn forward_in_f32() {
        let x = Tensor::<f32>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let k = TmlKernels::<f32>::from_weights(cfg(2, 2, 1, 1, 1.0, 0.5), vec![0.5, 0.5, 0.0, 0.0])
            .unwrap();
        let y = tml_forward(&x, &k).unwrap();
        assert!((y.data()[0] - 2f32.sqrt()).abs() < 1e-5);
    }

    fn instance() -> impl Strategy<Value = (Tensor<f64>, TmlKernels<f64>)> {
        (2usize..6, 2usize..6, 1usize..3, 1usize..3, 1usize..3, 1usize..4, any::<u64>()).prop_map(
            |(r, c, k, h, w, m, seed)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (h, w) = (h.min(r), w.min(c));
                let shape = Shape::new(r, c, k).unwrap();
                let x = Tensor::from_vec(
                    shape,
                    (0..shape.len()).map(|_| rng.gen_range(1e-6..10.0)).collect(),
                )
                .unwrap();
                let c1 = 1.0;
                let c2 = (c1 / (h * w * k) as f64).max(0.5);
                let kernels = TmlKernels::random(cfg(h, w, k, m, c1, c2), &mut rng).unwrap();
                (x, kernels)
            },
        )
    }

    proptest! {
        #[test]
        fn log_domain_matches_direct_product((x, k) in instance()) {
            let y = tml_forward(&x, &k).unwrap();
            let d = direct_forward(&x, &k);
            for (a, b) in y.data().iter().zip(d.data()) {
                prop_assert!((a - b).abs() <= 1e-10 * b.abs(), "{} vs {}", a, b);
            }
        }

        #[test]
        fn projection_postconditions(ws in proptest::collection::vec(-2.0f64..2.0, 6), c2 in 0.34f64..1.0) {
            let c = cfg(1, 3, 1, 2, 1.0, c2);
            let mut k = TmlKernels::from_weights(c, ws).unwrap();
            k.project_or_reinit();
            for m in 0..2 {
                prop_assert!((k.kernel_sum(m) - 1.0).abs() < 1e-9);
                prop_assert!(k.kernel(m).iter().all(|&w| w >= 0.0));
            }
        }

        #[test]
        fn projection_idempotent_when_feasible(ws in proptest::collection::vec(0.0f64..1.0, 8)) {
            let c = cfg(2, 2, 1, 2, 1.0, 0.5);
            let once = project_kernels(&TmlKernels::from_weights(c, ws).unwrap());
            prop_assume!(once.is_ok());
            let once = once.unwrap();
            prop_assume!(once.weights().iter().all(|&w| w <= 0.5));
            let twice = project_kernels(&once).unwrap();
            for (a, b) in once.weights().iter().zip(twice.weights()) {
                prop_assert!((a - b).abs() <= 1e-15);
            }
        }
    }
}
