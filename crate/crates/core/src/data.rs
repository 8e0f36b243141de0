//! Labelled image sets: IDX files (optionally gzip-compressed) and the
//! synthetic stripe-texture generator.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage<S> {
    pub pixels: Tensor<S>,
    pub label: usize,
}

/// Raw unsigned-byte IDX array: dimensions and payload, kept verbatim so that
/// encoding reproduces the parsed bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<u32>,
    pub data: Vec<u8>,
}

impl IdxArray {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let be = |i: usize| -> Result<u32> {
            bytes
                .get(i..i + 4)
                .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
                .ok_or_else(|| Error::Format("truncated IDX header".into()))
        };
        let magic = be(0)?;
        if magic >> 8 != 0x08 {
            return Err(Error::Format(format!("bad IDX magic {magic:#010x}, expected unsigned-byte data")));
        }
        let ndim = (magic & 0xff) as usize;
        if ndim == 0 {
            return Err(Error::Format("IDX file declares zero dimensions".into()));
        }
        let dims = (0..ndim).map(|d| be(4 + 4 * d)).collect::<Result<Vec<_>>>()?;
        let len = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
            .ok_or_else(|| Error::Format(format!("IDX dimensions {dims:?} overflow")))?;
        let start = 4 + 4 * ndim;
        let payload = &bytes[start.min(bytes.len())..];
        if payload.len() < len {
            return Err(Error::Format(format!(
                "truncated IDX payload: {} of {len} bytes",
                payload.len()
            )));
        }
        if payload.len() > len {
            return Err(Error::Format(format!("{} trailing bytes after IDX payload", payload.len() - len)));
        }
        Ok(Self {
            dims,
            data: payload.to_vec(),
        })
    }

    pub fn magic(&self) -> u32 {
        0x0800 | self.dims.len() as u32
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.dims.len() + self.data.len());
        out.extend_from_slice(&self.magic().to_be_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_be_bytes());
        }
        out.extend_from_slice(&self.data);
        out
    }
}

/// Reads a file, transparently inflating gzip content.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Parses an image file (`n x rows x cols`) into `[0, 1]` tensors (`byte / 255`).
pub fn parse_idx_images<S: Scalar>(bytes: &[u8]) -> Result<Vec<Tensor<S>>> {
    let arr = IdxArray::parse(bytes)?;
    if arr.magic() != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:#010x}, expected {IDX_IMAGES_MAGIC:#010x}",
            arr.magic()
        )));
    }
    let (n, rows, cols) = (arr.dims[0] as usize, arr.dims[1] as usize, arr.dims[2] as usize);
    if n == 0 {
        return Ok(Vec::new());
    }
    let shape = Shape::new(rows, cols, 1)?;
    let scale = S::of(255.0);
    Ok(arr
        .data
        .chunks_exact(rows * cols)
        .take(n)
        .map(|c| Tensor::from_vec(shape, c.iter().map(|&b| S::of(f64::from(b)) / scale).collect()).expect("sized chunk"))
        .collect())
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let arr = IdxArray::parse(bytes)?;
    if arr.magic() != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:#010x}, expected {IDX_LABELS_MAGIC:#010x}",
            arr.magic()
        )));
    }
    Ok(arr.data.iter().map(|&b| usize::from(b)).collect())
}

pub fn load_idx_images<S: Scalar>(path: &Path) -> Result<Vec<Tensor<S>>> {
    parse_idx_images(&read_maybe_gz(path)?)
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    parse_idx_labels(&read_maybe_gz(path)?)
}

/// Encodes single-channel images; pixels are mapped to `round(255 * clamp(v, 0, 1))`.
pub fn encode_idx_images<S: Scalar>(images: &[Tensor<S>]) -> Result<Vec<u8>> {
    let first = images.first().ok_or(Error::EmptyDataset)?.shape();
    let mut data = Vec::with_capacity(images.len() * first.len());
    for img in images {
        if img.shape() != first || first.channels != 1 {
            return Err(Error::ShapeMismatch(format!(
                "IDX images must share one single-channel shape, got {} and {}",
                first,
                img.shape()
            )));
        }
        data.extend(img.data().iter().map(|v| to_byte(v.to_f64_lossy())));
    }
    let dim = |v: usize| u32::try_from(v).map_err(|_| Error::Format(format!("dimension {v} exceeds u32")));
    Ok(IdxArray {
        dims: vec![dim(images.len())?, dim(first.rows)?, dim(first.cols)?],
        data,
    }
    .encode())
}

pub fn encode_idx_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let data = labels
        .iter()
        .map(|&l| u8::try_from(l).map_err(|_| Error::Format(format!("label {l} does not fit in a byte"))))
        .collect::<Result<Vec<_>>>()?;
    let n = u32::try_from(labels.len()).map_err(|_| Error::Format("too many labels".into()))?;
    Ok(IdxArray { dims: vec![n], data }.encode())
}

fn to_byte(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

/// Joins image and label files into labelled samples.
pub fn load_idx_pair<S: Scalar>(images: &Path, labels: &Path) -> Result<Vec<LabeledImage<S>>> {
    let imgs = load_idx_images(images)?;
    let labels = load_idx_labels(labels)?;
    if imgs.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} images but {} labels",
            imgs.len(),
            labels.len()
        )));
    }
    Ok(imgs
        .into_iter()
        .zip(labels)
        .map(|(pixels, label)| LabeledImage { pixels, label })
        .collect())
}

/// Writes `<prefix>-images-idx3-ubyte` and `<prefix>-labels-idx1-ubyte` into `dir`.
pub fn save_idx_pair<S: Scalar>(dir: &Path, prefix: &str, set: &[LabeledImage<S>]) -> Result<()> {
    let imgs: Vec<Tensor<S>> = set.iter().map(|s| s.pixels.clone()).collect();
    let labels: Vec<usize> = set.iter().map(|s| s.label).collect();
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), encode_idx_images(&imgs)?)?;
    fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), encode_idx_labels(&labels)?)?;
    Ok(())
}

fn find_idx(dir: &Path, stem: &str) -> Result<PathBuf> {
    for name in [stem.to_string(), format!("{stem}.gz")] {
        let p = dir.join(name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("{stem}[.gz] not found in {}", dir.display()),
    )))
}

/// Loads `train-*` and `t10k-*` (or `test-*`) IDX pairs from a directory, in
/// the MNIST file naming scheme.
pub fn load_idx_dir<S: Scalar>(dir: &Path) -> Result<(Vec<LabeledImage<S>>, Vec<LabeledImage<S>>)> {
    let pair = |prefix: &str| -> Result<Vec<LabeledImage<S>>> {
        load_idx_pair(
            &find_idx(dir, &format!("{prefix}-images-idx3-ubyte"))?,
            &find_idx(dir, &format!("{prefix}-labels-idx1-ubyte"))?,
        )
    };
    let train = pair("train")?;
    let test = pair("t10k").or_else(|_| pair("test"))?;
    Ok((train, test))
}

/// Synthetic stripe textures: each class is one orientation/period pair drawn
/// on a black canvas, overlaid with uniform noise and clamped to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StripeSpec {
    pub num_classes: usize,
    pub canvas: usize,
    pub crop: usize,
    pub noise_amplitude: f64,
    pub samples_per_class: usize,
    pub test_per_class: usize,
    pub intensity: f64,
    /// Stripe width in pixels, measured along the image axes.
    pub thickness: usize,
    pub rng_seed: u64,
}

impl Default for StripeSpec {
    fn default() -> Self {
        Self {
            num_classes: 6,
            canvas: 1024,
            crop: 32,
            noise_amplitude: 1.0,
            samples_per_class: 100,
            test_per_class: 100,
            intensity: 1.0,
            thickness: 2,
            rng_seed: 0,
        }
    }
}

/// Orientation in degrees and period in pixels for every class index.
pub const STRIPE_PATTERNS: [(u32, usize); 8] =
    [(0, 4), (45, 4), (90, 4), (135, 4), (0, 8), (45, 8), (90, 8), (135, 8)];

impl StripeSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.num_classes == 0 || self.num_classes > STRIPE_PATTERNS.len() {
            return bad(format!("stripe classes must be in 1..=8, got {}", self.num_classes));
        }
        if self.crop == 0 || self.crop > self.canvas {
            return bad(format!("crop {} must be in 1..=canvas {}", self.crop, self.canvas));
        }
        if self.thickness == 0 {
            return bad("stripe thickness must be positive".into());
        }
        if !(self.noise_amplitude >= 0.0 && self.intensity >= 0.0) {
            return bad("noise amplitude and intensity must be nonnegative".into());
        }
        Ok(())
    }

    /// Clean pattern value of class `class` at canvas position `(i, j)`.
    pub fn pattern(&self, class: usize, i: usize, j: usize) -> f64 {
        let (angle, period) = STRIPE_PATTERNS[class];
        let t = match angle {
            0 => i,
            90 => j,
            45 => i + j,
            _ => i + self.canvas - j,
        };
        if t % period < self.thickness {
            self.intensity
        } else {
            0.0
        }
    }

    fn canvas_for<R: Rng>(&self, class: usize, rng: &mut R) -> Vec<f64> {
        let n = self.canvas;
        let mut c = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let noise = if self.noise_amplitude > 0.0 {
                    self.noise_amplitude * rng.gen::<f64>()
                } else {
                    0.0
                };
                c.push((self.pattern(class, i, j) + noise).clamp(0.0, 1.0));
            }
        }
        c
    }

    fn crops<S: Scalar, R: Rng>(&self, per_class: usize, rng: &mut R) -> Vec<LabeledImage<S>> {
        let shape = Shape::new(self.crop, self.crop, 1).expect("validated crop");
        let mut out = Vec::with_capacity(per_class * self.num_classes);
        for class in 0..self.num_classes {
            let canvas = self.canvas_for(class, rng);
            for _ in 0..per_class {
                let top = rng.gen_range(0..=self.canvas - self.crop);
                let left = rng.gen_range(0..=self.canvas - self.crop);
                let mut px = Vec::with_capacity(shape.len());
                for i in 0..self.crop {
                    let row = (top + i) * self.canvas + left;
                    px.extend(canvas[row..row + self.crop].iter().map(|&v| S::of(v)));
                }
                out.push(LabeledImage {
                    pixels: Tensor::from_vec(shape, px).expect("sized crop"),
                    label: class,
                });
            }
        }
        out
    }
}

/// Training crops and test crops; test crops come from separately drawn canvases.
pub fn gen_stripe_dataset<S: Scalar>(spec: &StripeSpec) -> Result<(Vec<LabeledImage<S>>, Vec<LabeledImage<S>>)> {
    spec.validate()?;
    let mut train_rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let mut test_rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    test_rng.set_stream(1);
    Ok((
        spec.crops(spec.samples_per_class, &mut train_rng),
        spec.crops(spec.test_per_class, &mut test_rng),
    ))
}

/// Shuffled index batches covering `0..len`; the last batch may be short.
pub fn batches<R: Rng + ?Sized>(len: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Number of distinct classes, taken as `max label + 1`.
pub fn class_count<S>(set: &[LabeledImage<S>]) -> usize {
    set.iter().map(|s| s.label + 1).max().unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn one_image_file() -> Vec<u8> {
        let mut b = vec![0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2];
        b.extend([0, 255, 128, 64]);
        b
    }

    #[test]
    fn hand_encoded_images() {
        let imgs: Vec<Tensor<f64>> = parse_idx_images(&one_image_file()).unwrap();
        assert_eq!(imgs.len(), 1);
        assert_eq!(imgs[0].shape(), Shape::new(2, 2, 1).unwrap());
        let expect = [0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0];
        assert_eq!(imgs[0].data(), &expect);
        assert!((imgs[0].data()[2] - 0.50196).abs() < 1e-5);
        assert!((imgs[0].data()[3] - 0.25098).abs() < 1e-5);
        assert_eq!(encode_idx_images(&imgs).unwrap(), one_image_file());
    }

    #[test]
    fn hand_encoded_labels() {
        let bytes = [0, 0, 8, 1, 0, 0, 0, 1, 3];
        assert_eq!(parse_idx_labels(&bytes).unwrap(), vec![3]);
        assert_eq!(encode_idx_labels(&[3]).unwrap(), bytes);
    }

    #[test]
    fn idx_errors() {
        let mut wrong = one_image_file();
        wrong[3] = 1;
        assert!(parse_idx_images::<f64>(&wrong).is_err());
        assert!(parse_idx_labels(&one_image_file()).is_err());
        let mut short = one_image_file();
        short.pop();
        assert!(matches!(parse_idx_images::<f64>(&short), Err(Error::Format(_))));
        assert!(parse_idx_images::<f64>(&[0, 0, 8]).is_err());
        let huge = [0, 0, 8, 3, 255, 255, 255, 255, 255, 255, 255, 255, 255, 255, 255, 255];
        assert!(parse_idx_images::<f64>(&huge).is_err());
    }

    #[test]
    fn gz_is_inflated() {
        use flate2::{write::GzEncoder, Compression};
        use std::io::Write;
        let dir = std::env::temp_dir().join(format!("tml-gz-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("x.gz");
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&one_image_file()).unwrap();
        fs::write(&path, enc.finish().unwrap()).unwrap();
        let imgs: Vec<Tensor<f64>> = load_idx_images(&path).unwrap();
        assert_eq!(imgs[0].data()[1], 1.0);
        fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn stripe_counts_and_range() {
        let spec = StripeSpec {
            canvas: 128,
            ..StripeSpec::default()
        };
        let (train, test) = gen_stripe_dataset::<f64>(&spec).unwrap();
        assert_eq!(train.len(), 600);
        assert_eq!(test.len(), 600);
        for s in train.iter().chain(&test) {
            assert_eq!(s.pixels.shape(), Shape::new(32, 32, 1).unwrap());
            assert!(s.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert_eq!(class_count(&train), 6);
        assert_ne!(train[0].pixels, test[0].pixels);
    }

    #[test]
    fn clean_stripes_are_binary() {
        let spec = StripeSpec {
            canvas: 64,
            noise_amplitude: 0.0,
            samples_per_class: 3,
            test_per_class: 1,
            ..StripeSpec::default()
        };
        let (train, _) = gen_stripe_dataset::<f64>(&spec).unwrap();
        for s in &train {
            assert!(s.pixels.data().iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn stripes_are_seeded() {
        let spec = StripeSpec {
            canvas: 64,
            samples_per_class: 2,
            test_per_class: 2,
            rng_seed: 9,
            ..StripeSpec::default()
        };
        let a = gen_stripe_dataset::<f64>(&spec).unwrap();
        let b = gen_stripe_dataset::<f64>(&spec).unwrap();
        assert_eq!(a, b);
        let c = gen_stripe_dataset::<f64>(&StripeSpec { rng_seed: 10, ..spec }).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn stripe_spec_rejects_bad_crop() {
        let spec = StripeSpec {
            canvas: 16,
            ..StripeSpec::default()
        };
        assert!(gen_stripe_dataset::<f64>(&spec).is_err());
    }

    #[test]
    fn batch_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = batches(10, 4, &mut rng);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());

        let singles = batches(5, 1, &mut rng);
        assert!(singles.iter().all(|s| s.len() == 1));

        let a = batches(20, 3, &mut ChaCha8Rng::seed_from_u64(5));
        let b = batches(20, 3, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn idx_bytes_round_trip(n in 1usize..4, rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut bytes = IdxArray { dims: vec![n as u32, rows as u32, cols as u32], data: vec![] }.encode();
            bytes.extend((0..n * rows * cols).map(|_| rng.gen::<u8>()));
            let imgs: Vec<Tensor<f64>> = parse_idx_images(&bytes).unwrap();
            prop_assert_eq!(encode_idx_images(&imgs).unwrap(), bytes);
        }
    }
}
