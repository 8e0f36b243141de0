//! Grayscale renderings written as binary PGM (`P5`, maxval 255).
//!
//! File layout: `"P5\n{width} {height}\n255\n"` followed by `width * height`
//! row-major bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Network, Params};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tml::TmlKernels;

/// Fraction of `c2` above which a kernel weight counts as active.
pub const ACTIVE_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || width.checked_mul(height) != Some(pixels.len()) {
            return Err(Error::InvalidShape(format!(
                "{width}x{height} image with {} pixels",
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }
}

/// `round(255 * clamp(v, 0, 1))`, halves rounded up.
pub fn to_gray(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0) + 0.5).floor() as u8
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn write_pgm(img: &GrayImage, path: &Path) -> Result<()> {
    fs::write(path, encode_pgm(img))?;
    Ok(())
}

/// Parses a binary PGM with maxval 255. Comments and any whitespace between
/// header tokens are accepted.
pub fn parse_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let bad = |m: &str| Error::Format(format!("PGM: {m}"));
    let mut pos = 0;
    let token = |pos: &mut usize| -> Result<String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(bad("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    if token(&mut pos)? != "P5" {
        return Err(bad("expected P5 magic"));
    }
    let num = |s: String| s.parse::<usize>().map_err(|_| bad("non-numeric header field"));
    let width = num(token(&mut pos)?)?;
    let height = num(token(&mut pos)?)?;
    if num(token(&mut pos)?)? != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let n = width.checked_mul(height).ok_or_else(|| bad("dimensions overflow"))?;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() != n {
        return Err(bad(&format!("expected {n} pixel bytes, found {}", raster.len())));
    }
    GrayImage::new(width, height, raster.to_vec())
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    parse_pgm(&fs::read(path)?)
}

/// Kernel `m` as `H x W` heatmaps, one per input channel, with white = `c2`.
pub fn render_kernel_heatmap<S: Scalar>(kernels: &TmlKernels<S>, m: usize) -> Result<Vec<GrayImage>> {
    let cfg = kernels.config();
    if m >= cfg.num_kernels {
        return Err(Error::IndexOutOfRange { index: m, limit: cfg.num_kernels });
    }
    (0..cfg.in_channels)
        .map(|k| {
            let mut px = Vec::with_capacity(cfg.kernel_h * cfg.kernel_w);
            for p in 0..cfg.kernel_h {
                for q in 0..cfg.kernel_w {
                    px.push(to_gray(kernels.get(p, q, k, m).to_f64_lossy() / cfg.c2));
                }
            }
            GrayImage::new(cfg.kernel_w, cfg.kernel_h, px)
        })
        .collect()
}

/// Channel `m` of a feature volume, values in `[0, 1]` mapped to black..white.
pub fn render_feature_map<S: Scalar>(y: &Tensor<S>, m: usize) -> Result<GrayImage> {
    let s = y.shape();
    if m >= s.channels {
        return Err(Error::IndexOutOfRange { index: m, limit: s.channels });
    }
    let px = y.channel(m)?.iter().map(|v| to_gray(v.to_f64_lossy())).collect();
    GrayImage::new(s.cols, s.rows, px)
}

/// Result of [`cooc_highlight`].
#[derive(Debug, Clone, PartialEq)]
pub struct Highlight {
    pub tml_layer: usize,
    /// Kernel with the largest classifier weight for the target class.
    pub kernel: usize,
    /// Active `(row, col, channel)` kernel cells.
    pub cells: Vec<(usize, usize, usize)>,
    /// Mean of the selected feature maps, max-normalized and upsampled to the
    /// input resolution (row-major, `rows * cols`).
    pub heat: Vec<f64>,
    pub overlay: GrayImage,
}

/// Highlights where the co-occurrence kernel most tied to `target` fires.
///
/// Requires a branch ending in `tml, gap` whose pooled responses feed the
/// first head layer, a dense layer producing the logits. The kernel with the
/// largest weight toward `target` is selected; the input-side feature maps at
/// its cells above `threshold_frac * c2`, shifted by the cell offset, are
/// averaged, normalized to a maximum of 1, upsampled by nearest neighbour and
/// blended as `clamp(0.5 * image + 0.5 * heat)`.
pub fn cooc_highlight<S: Scalar>(
    net: &Network<S>,
    image: &Tensor<S>,
    target: usize,
    threshold_frac: f64,
) -> Result<Highlight> {
    let topo = |m: String| Error::Topology(m);
    let head = net.head_range();
    let fc_idx = head.start;
    let (fc_w, classes) = match (&net.layers()[fc_idx].spec, &net.layers()[fc_idx].params) {
        (LayerSpec::Fc { units }, Params::Dense { weight, .. }) if head.len() == 2 => (weight, *units),
        _ => return Err(topo("head must be a single dense layer before the loss".into())),
    };
    if target >= classes {
        return Err(Error::IndexOutOfRange { index: target, limit: classes });
    }
    let branch = (0..net.spec().branches.len())
        .find(|&b| {
            let r = net.branch_range(b);
            r.len() >= 2
                && matches!(net.layers()[r.end - 2].spec, LayerSpec::Tml(_))
                && matches!(net.layers()[r.end - 1].spec, LayerSpec::Gap)
        })
        .ok_or_else(|| topo("no branch ends with tml followed by gap".into()))?;
    let tml_layer = net.branch_range(branch).end - 2;
    let kernels = net.tml_kernels(tml_layer).expect("tml layer");
    let cfg = *kernels.config();

    let fan_in = net.layers()[fc_idx].input.len();
    let offset = net.concat_offset(branch);
    let row = &fc_w[target * fan_in..(target + 1) * fan_in];
    let kernel = (0..cfg.num_kernels)
        .max_by(|&a, &b| {
            row[offset + a]
                .partial_cmp(&row[offset + b])
                .unwrap_or(std::cmp::Ordering::Equal)
        })
        .expect("at least one kernel");

    let trace = net.trace(image)?;
    let x = trace.layer_input(tml_layer);
    let out = net.layers()[tml_layer].output;
    let t = threshold_frac * cfg.c2;
    let mut cells = Vec::new();
    for p in 0..cfg.kernel_h {
        for q in 0..cfg.kernel_w {
            for k in 0..cfg.in_channels {
                if kernels.get(p, q, k, kernel).to_f64_lossy() > t {
                    cells.push((p, q, k));
                }
            }
        }
    }

    let mut small = vec![0.0; out.rows * out.cols];
    if !cells.is_empty() {
        for i in 0..out.rows {
            for j in 0..out.cols {
                let s: f64 = cells.iter().map(|&(p, q, k)| x.get(i + p, j + q, k).to_f64_lossy()).sum();
                small[i * out.cols + j] = s / cells.len() as f64;
            }
        }
        let max = small.iter().cloned().fold(0.0, f64::max);
        if max > 0.0 {
            small.iter_mut().for_each(|v| *v /= max);
        }
    }

    let shape = image.shape();
    let mut heat = Vec::with_capacity(shape.rows * shape.cols);
    let mut px = Vec::with_capacity(shape.rows * shape.cols);
    for i in 0..shape.rows {
        let si = i * out.rows / shape.rows;
        for j in 0..shape.cols {
            let sj = j * out.cols / shape.cols;
            let h = small[si * out.cols + sj];
            let base: f64 = (0..shape.channels)
                .map(|k| image.get(i, j, k).to_f64_lossy())
                .sum::<f64>()
                / shape.channels as f64;
            heat.push(h);
            px.push(to_gray(0.5 * base + 0.5 * h));
        }
    }
    Ok(Highlight {
        tml_layer,
        kernel,
        cells,
        heat,
        overlay: GrayImage::new(shape.cols, shape.rows, px)?,
    })
}
