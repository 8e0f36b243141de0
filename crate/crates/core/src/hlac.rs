//! Higher-order local auto-correlation (HLAC) features.
//!
//! For displacements `a_1 .. a_L` the feature is
//! `R = sum_r f(r) f(r + a_1) ... f(r + a_L)` over every position `r` for which
//! `r` and all displaced points lie inside the image.

use std::collections::BTreeSet;
use std::io::Write;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tml::{TmlConfig, TmlKernels};

/// Row/column offset from the reference pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Displacement {
    pub row: i32,
    pub col: i32,
}

impl Displacement {
    pub const ORIGIN: Self = Self { row: 0, col: 0 };

    pub const fn new(row: i32, col: i32) -> Self {
        Self { row, col }
    }
}

impl From<(i32, i32)> for Displacement {
    fn from((row, col): (i32, i32)) -> Self {
        Self { row, col }
    }
}

/// Offsets `a_1 .. a_L` of one autocorrelation term; the order is `L`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DisplacementSet {
    offsets: Vec<Displacement>,
    radius: u32,
}

/// Row and column bounding box of a displacement set, origin included.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Extent {
    pub min_row: i32,
    pub min_col: i32,
    pub max_row: i32,
    pub max_col: i32,
}

impl Extent {
    pub fn height(&self) -> usize {
        (self.max_row - self.min_row) as usize + 1
    }

    pub fn width(&self) -> usize {
        (self.max_col - self.min_col) as usize + 1
    }

    fn union(self, other: Self) -> Self {
        Self {
            min_row: self.min_row.min(other.min_row),
            min_col: self.min_col.min(other.min_col),
            max_row: self.max_row.max(other.max_row),
            max_col: self.max_col.max(other.max_col),
        }
    }
}

impl DisplacementSet {
    /// Offsets must satisfy `|row|, |col| <= radius`.
    pub fn new(offsets: Vec<Displacement>, radius: u32) -> Result<Self> {
        let r = radius as i64;
        if let Some(d) = offsets
            .iter()
            .find(|d| (d.row as i64).abs() > r || (d.col as i64).abs() > r)
        {
            return Err(Error::InvalidConfig(format!(
                "displacement ({}, {}) exceeds mask radius {radius}",
                d.row, d.col
            )));
        }
        Ok(Self { offsets, radius })
    }

    /// Radius is the smallest one containing every offset.
    pub fn from_offsets<I, D>(offsets: I) -> Self
    where
        I: IntoIterator<Item = D>,
        D: Into<Displacement>,
    {
        let offsets: Vec<Displacement> = offsets.into_iter().map(Into::into).collect();
        let radius = offsets
            .iter()
            .map(|d| d.row.unsigned_abs().max(d.col.unsigned_abs()))
            .max()
            .unwrap_or(0);
        Self { offsets, radius }
    }

    pub fn offsets(&self) -> &[Displacement] {
        &self.offsets
    }

    pub fn radius(&self) -> u32 {
        self.radius
    }

    pub fn order(&self) -> usize {
        self.offsets.len()
    }

    pub fn extent(&self) -> Extent {
        self.offsets.iter().fold(
            Extent {
                min_row: 0,
                min_col: 0,
                max_row: 0,
                max_col: 0,
            },
            |e, d| Extent {
                min_row: e.min_row.min(d.row),
                min_col: e.min_col.min(d.col),
                max_row: e.max_row.max(d.row),
                max_col: e.max_col.max(d.col),
            },
        )
    }

    fn sorted_offsets(&self) -> Vec<Displacement> {
        let mut v = self.offsets.clone();
        v.sort();
        v
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSet {
    masks: Vec<DisplacementSet>,
}

impl MaskSet {
    pub fn new(masks: Vec<DisplacementSet>) -> Result<Self> {
        if masks.is_empty() {
            return Err(Error::InvalidConfig("mask set is empty".into()));
        }
        let mut seen = BTreeSet::new();
        for (i, m) in masks.iter().enumerate() {
            if !seen.insert(m.sorted_offsets()) {
                return Err(Error::InvalidConfig(format!("mask {i} duplicates an earlier mask")));
            }
        }
        Ok(Self { masks })
    }

    pub fn masks(&self) -> &[DisplacementSet] {
        &self.masks
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn extent(&self) -> Extent {
        self.masks
            .iter()
            .map(DisplacementSet::extent)
            .reduce(Extent::union)
            .expect("mask sets are non-empty")
    }
}

/// The 25 translation-distinct point configurations of order 0 to 2 inside a
/// 3x3 window, each anchored at the origin.
///
/// Configurations are enumerated as subsets of the window containing the
/// centre, with distinct points; two configurations that differ only by a
/// translation count once (the first one enumerated is kept).
pub fn default_masks() -> MaskSet {
    let window: Vec<Displacement> = (-1..=1)
        .flat_map(|r| (-1..=1).map(move |c| Displacement::new(r, c)))
        .filter(|d| *d != Displacement::ORIGIN)
        .collect();

    let mut candidates: Vec<Vec<Displacement>> = vec![vec![]];
    candidates.extend(window.iter().map(|&a| vec![a]));
    for (i, &a) in window.iter().enumerate() {
        for &b in &window[i + 1..] {
            candidates.push(vec![a, b]);
        }
    }

    let mut seen = BTreeSet::new();
    let masks = candidates
        .into_iter()
        .filter(|offsets| seen.insert(translation_class(offsets)))
        .map(|offsets| DisplacementSet::new(offsets, 1).expect("offsets lie in the 3x3 window"))
        .collect();
    MaskSet::new(masks).expect("enumeration is duplicate free")
}

/// Point set (origin plus offsets) translated so its smallest point is the origin.
fn translation_class(offsets: &[Displacement]) -> Vec<(i32, i32)> {
    let mut pts: Vec<(i32, i32)> = std::iter::once((0, 0))
        .chain(offsets.iter().map(|d| (d.row, d.col)))
        .collect();
    pts.sort();
    let (r0, c0) = pts[0];
    pts.iter().map(|&(r, c)| (r - r0, c - c0)).collect()
}

/// `R_L` for one displacement set on a single-channel image. Returns zero when
/// no position keeps every displaced pixel inside the image.
pub fn hlac_feature<S: Scalar>(img: &Tensor<S>, d: &DisplacementSet) -> Result<S> {
    let shape = img.shape();
    if shape.channels != 1 {
        return Err(Error::ShapeMismatch(format!(
            "hlac_feature needs a single-channel image, got {shape}"
        )));
    }
    Ok(channel_feature(img, 0, d))
}

fn channel_feature<S: Scalar>(img: &Tensor<S>, k: usize, d: &DisplacementSet) -> S {
    let shape = img.shape();
    let e = d.extent();
    let (rows, cols) = (shape.rows as i64, shape.cols as i64);
    let (r_lo, r_hi) = (-(e.min_row as i64), rows - 1 - e.max_row as i64);
    let (c_lo, c_hi) = (-(e.min_col as i64), cols - 1 - e.max_col as i64);
    if r_lo > r_hi || c_lo > c_hi {
        return S::zero();
    }
    let mut total = S::zero();
    for i in r_lo..=r_hi {
        for j in c_lo..=c_hi {
            let mut prod = img.get(i as usize, j as usize, k);
            for a in d.offsets() {
                prod *= img.get((i + a.row as i64) as usize, (j + a.col as i64) as usize, k);
            }
            total += prod;
        }
    }
    total
}

/// Features for every mask, channel by channel: channel 0's masks first, then
/// channel 1's, and so on.
pub fn hlac_vector<S: Scalar>(img: &Tensor<S>, masks: &MaskSet) -> Result<Vec<S>> {
    let channels = img.shape().channels;
    let mut out = Vec::with_capacity(channels * masks.len());
    for k in 0..channels {
        out.extend(masks.masks().iter().map(|d| channel_feature(img, k, d)));
    }
    Ok(out)
}

/// Encodes each mask as a binary TML kernel: weight 1 on the origin cell and on
/// every displaced cell, with repeated displacements accumulating.
///
/// All masks share one placement: cells are shifted by the negated minimum
/// row/column over the whole set so every coordinate becomes nonnegative. The
/// returned bank is unprojected; its `c1`/`c2` are the largest kernel sum and
/// the largest weight, and `eps` is `1e-12`.
pub fn masks_to_binary_kernels<S: Scalar>(
    masks: &MaskSet,
    kernel_h: usize,
    kernel_w: usize,
) -> Result<TmlKernels<S>> {
    let e = masks.extent();
    let mut cells: Vec<Vec<(usize, usize)>> = Vec::with_capacity(masks.len());
    for m in masks.masks() {
        let mut v = Vec::with_capacity(m.order() + 1);
        for d in std::iter::once(&Displacement::ORIGIN).chain(m.offsets()) {
            let (p, q) = ((d.row - e.min_row) as usize, (d.col - e.min_col) as usize);
            if p >= kernel_h || q >= kernel_w {
                return Err(Error::DisplacementOutOfKernel {
                    row: d.row,
                    col: d.col,
                    kernel_h,
                    kernel_w,
                });
            }
            v.push((p, q));
        }
        cells.push(v);
    }

    let mut weights = vec![0.0f64; kernel_h * kernel_w * masks.len()];
    for (m, cs) in cells.iter().enumerate() {
        for &(p, q) in cs {
            weights[(p * kernel_w + q) * masks.len() + m] += 1.0;
        }
    }
    let c1 = cells.iter().map(Vec::len).max().unwrap_or(1) as f64;
    let c2 = weights.iter().copied().fold(1.0, f64::max);
    let config = TmlConfig::new(kernel_h, kernel_w, 1, masks.len(), c1, c2)?.with_eps(1e-12)?;
    TmlKernels::from_weights(config, weights.into_iter().map(S::of).collect())
}

/// Writes one CSV row per image: `label,f0,f1,...`, preceded by a header.
pub fn write_hlac_csv<W: Write, S: Scalar>(out: &mut W, rows: &[(usize, Vec<S>)]) -> Result<()> {
    let width = rows.first().map_or(0, |(_, v)| v.len());
    let mut header = String::from("label");
    for i in 0..width {
        header.push_str(&format!(",f{i}"));
    }
    writeln!(out, "{header}")?;
    for (label, feats) in rows {
        if feats.len() != width {
            return Err(Error::ShapeMismatch("ragged HLAC rows".into()));
        }
        let mut line = label.to_string();
        for v in feats {
            line.push_str(&format!(",{v}"));
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}
