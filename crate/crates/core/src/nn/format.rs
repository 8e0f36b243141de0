//! Plain-text network description and binary parameter blob.
//!
//! Text layout, one record per line:
//!
//! ```text
//! tml-network 1
//! input rows=28 cols=28 channels=1
//! layer segment=branch0 kind=tml h=3 w=3 k=1 m=8 c1=1.0 c2=0.5 eps=1e-6
//! layer segment=head kind=fc units=10
//! layer segment=head kind=softmax_xent
//! ```
//!
//! Blob layout (little-endian): `b"TMLP"`, version `u32 = 1`, array count
//! `u32`, then per array a `u32` length followed by that many `f64` values.
//! Arrays follow layer order; dense layers store weight then bias, TML layers
//! store their kernel weights in the kernel file ordering.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::binio::{read_f64, read_magic, read_u32, to_u32, write_f64, write_u32};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Shape;
use crate::tml::{TmlConfig, TmlKernels};

use super::network::{LayerSpec, Network, NetworkSpec, Params, Segment};

const SPEC_HEADER: &str = "tml-network 1";
const BLOB_MAGIC: &[u8; 4] = b"TMLP";
const BLOB_VERSION: u32 = 1;

pub fn spec_to_text(spec: &NetworkSpec) -> String {
    let mut s = format!(
        "{SPEC_HEADER}\ninput rows={} cols={} channels={}\n",
        spec.input.rows, spec.input.cols, spec.input.channels
    );
    let mut line = |seg: Segment, l: &LayerSpec| {
        s.push_str(&format!("layer segment={seg} kind={}", l.kind()));
        match l {
            LayerSpec::Conv { filters, size } => s.push_str(&format!(" filters={filters} size={size}")),
            LayerSpec::Fc { units } => s.push_str(&format!(" units={units}")),
            LayerSpec::Dropout { rate } => s.push_str(&format!(" rate={rate:?}")),
            LayerSpec::Tml(c) => s.push_str(&format!(
                " h={} w={} k={} m={} c1={:?} c2={:?} eps={:?}",
                c.kernel_h, c.kernel_w, c.in_channels, c.num_kernels, c.c1, c.c2, c.eps
            )),
            _ => {}
        }
        s.push('\n');
    };
    for (b, branch) in spec.branches.iter().enumerate() {
        for l in branch {
            line(Segment::Branch(b), l);
        }
    }
    for l in &spec.head {
        line(Segment::Head, l);
    }
    s
}

pub fn spec_from_text(text: &str) -> Result<NetworkSpec> {
    let bad = |n: usize, msg: String| Error::Format(format!("spec line {}: {msg}", n + 1));
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(n, l)| (n, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    match lines.next() {
        Some((_, SPEC_HEADER)) => {}
        Some((n, other)) => return Err(bad(n, format!("expected {SPEC_HEADER:?}, got {other:?}"))),
        None => return Err(Error::Format("empty spec".into())),
    }
    let (n, input_line) = lines.next().ok_or_else(|| Error::Format("missing input line".into()))?;
    let fields = parse_fields(input_line, "input").map_err(|e| bad(n, e))?;
    let dim = |k: &str| get_usize(&fields, k).map_err(|e| bad(n, e));
    let input = Shape::new(dim("rows")?, dim("cols")?, dim("channels")?)?;

    let mut branches: Vec<Vec<LayerSpec>> = Vec::new();
    let mut head = Vec::new();
    for (n, line) in lines {
        let f = parse_fields(line, "layer").map_err(|e| bad(n, e))?;
        let layer = parse_layer(&f).map_err(|e| bad(n, e))?;
        let seg = f.get("segment").ok_or_else(|| bad(n, "missing segment".into()))?;
        if *seg == "head" {
            head.push(layer);
        } else if let Some(idx) = seg.strip_prefix("branch").and_then(|v| v.parse::<usize>().ok()) {
            if !head.is_empty() {
                return Err(bad(n, "branch layer after head layers".into()));
            }
            if idx == branches.len() {
                branches.push(Vec::new());
            } else if idx + 1 != branches.len() {
                return Err(bad(n, format!("branch {idx} out of order")));
            }
            branches[idx].push(layer);
        } else {
            return Err(bad(n, format!("unknown segment {seg:?}")));
        }
    }
    let spec = NetworkSpec { input, branches, head };
    spec.resolve()?;
    Ok(spec)
}

fn parse_fields<'a>(line: &'a str, keyword: &str) -> std::result::Result<BTreeMap<&'a str, &'a str>, String> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some(keyword) {
        return Err(format!("expected a {keyword:?} record"));
    }
    let mut map = BTreeMap::new();
    for p in parts {
        let (k, v) = p.split_once('=').ok_or_else(|| format!("field {p:?} is not key=value"))?;
        if map.insert(k, v).is_some() {
            return Err(format!("duplicate field {k:?}"));
        }
    }
    Ok(map)
}

fn get_usize(f: &BTreeMap<&str, &str>, key: &str) -> std::result::Result<usize, String> {
    let v = f.get(key).ok_or_else(|| format!("missing field {key:?}"))?;
    v.parse().map_err(|_| format!("field {key:?} is not a count: {v:?}"))
}

fn get_f64(f: &BTreeMap<&str, &str>, key: &str) -> std::result::Result<f64, String> {
    let v = f.get(key).ok_or_else(|| format!("missing field {key:?}"))?;
    v.parse().map_err(|_| format!("field {key:?} is not a number: {v:?}"))
}

fn parse_layer(f: &BTreeMap<&str, &str>) -> std::result::Result<LayerSpec, String> {
    let kind = *f.get("kind").ok_or("missing kind")?;
    Ok(match kind {
        "conv" => LayerSpec::Conv {
            filters: get_usize(f, "filters")?,
            size: get_usize(f, "size")?,
        },
        "maxpool" => LayerSpec::MaxPool,
        "relu" => LayerSpec::Relu,
        "sigmoid" => LayerSpec::Sigmoid,
        "fc" => LayerSpec::Fc { units: get_usize(f, "units")? },
        "gap" => LayerSpec::Gap,
        "dropout" => LayerSpec::Dropout { rate: get_f64(f, "rate")? },
        "tml" => {
            let cfg = TmlConfig::new(
                get_usize(f, "h")?,
                get_usize(f, "w")?,
                get_usize(f, "k")?,
                get_usize(f, "m")?,
                get_f64(f, "c1")?,
                get_f64(f, "c2")?,
            )
            .and_then(|c| c.with_eps(get_f64(f, "eps").unwrap_or(c.eps)))
            .map_err(|e| e.to_string())?;
            LayerSpec::Tml(cfg)
        }
        "hlac" => LayerSpec::Hlac,
        "softmax_xent" => LayerSpec::SoftmaxXent,
        other => return Err(format!("unknown layer kind {other:?}")),
    })
}

/// Writes every parameter array of `net` as `f64`.
pub fn write_params<S: Scalar, W: Write>(net: &Network<S>, out: &mut W) -> Result<()> {
    let arrays: Vec<&[S]> = net.layers().iter().flat_map(|l| l.params.arrays()).collect();
    out.write_all(BLOB_MAGIC)?;
    write_u32(out, BLOB_VERSION)?;
    write_u32(out, to_u32(arrays.len(), "array count")?)?;
    for a in arrays {
        write_u32(out, to_u32(a.len(), "array length")?)?;
        for v in a {
            write_f64(out, v.to_f64_lossy())?;
        }
    }
    Ok(())
}

/// Reads a parameter blob into a network built from `spec`.
pub fn read_params<S: Scalar, R: Read>(spec: NetworkSpec, input: &mut R) -> Result<Network<S>> {
    read_magic(input, BLOB_MAGIC)?;
    let version = read_u32(input)?;
    if version != BLOB_VERSION {
        return Err(Error::Format(format!("unsupported parameter blob version {version}")));
    }
    let count = read_u32(input)? as usize;
    let mut arrays = Vec::new();
    for _ in 0..count {
        let len = read_u32(input)? as usize;
        let mut a = Vec::with_capacity(len.min(1 << 24));
        for _ in 0..len {
            a.push(S::of(read_f64(input)?));
        }
        arrays.push(a);
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after parameter blob".into()));
    }

    let resolved = spec.resolve()?;
    let mut it = arrays.into_iter();
    let mut next = |what: &str| {
        it.next()
            .ok_or_else(|| Error::Format(format!("parameter blob ends before {what}")))
    };
    let mut params = Vec::with_capacity(resolved.len());
    for l in &resolved {
        params.push(match &l.spec {
            LayerSpec::Conv { .. } | LayerSpec::Fc { .. } => Params::Dense {
                weight: next("a weight array")?,
                bias: next("a bias array")?,
            },
            LayerSpec::Tml(cfg) => Params::Tml(TmlKernels::from_weights(*cfg, next("TML weights")?)?),
            _ => Params::None,
        });
    }
    if next("end").is_ok() {
        return Err(Error::Format("parameter blob holds more arrays than the spec".into()));
    }
    Network::from_params(spec, params)
}

/// Path of the text description stored next to a parameter blob.
pub fn spec_path(blob: &Path) -> PathBuf {
    blob.with_extension("spec")
}

/// Writes `path` (parameter blob) and its sibling `.spec` text file.
pub fn save_checkpoint<S: Scalar>(net: &Network<S>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_params(net, &mut buf)?;
    fs::write(path, buf)?;
    fs::write(spec_path(path), spec_to_text(net.spec()))?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Network<S>> {
    let spec = spec_from_text(&fs::read_to_string(spec_path(path))?)?;
    let bytes = fs::read(path)?;
    read_params(spec, &mut bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::builders::{build_baseline_hlac_net, build_dhlac_net, ArchConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dhlac() -> NetworkSpec {
        build_dhlac_net(&ArchConfig::new(Shape::new(16, 16, 1).unwrap(), 3)).unwrap()
    }

    #[test]
    fn spec_text_round_trip() {
        for spec in [
            dhlac(),
            build_baseline_hlac_net(&ArchConfig::new(Shape::new(28, 28, 1).unwrap(), 10)).unwrap(),
        ] {
            let text = spec_to_text(&spec);
            assert_eq!(spec_from_text(&text).unwrap(), spec);
        }
    }

    #[test]
    fn spec_text_layout() {
        let text = spec_to_text(&dhlac());
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "tml-network 1");
        assert_eq!(lines[1], "input rows=16 cols=16 channels=1");
        assert_eq!(
            lines[2],
            "layer segment=branch0 kind=tml h=3 w=3 k=1 m=8 c1=1.0 c2=0.5 eps=1e-6"
        );
        assert_eq!(*lines.last().unwrap(), "layer segment=head kind=softmax_xent");
    }

    #[test]
    fn spec_text_errors() {
        assert!(spec_from_text("").is_err());
        assert!(spec_from_text("tml-network 2\n").is_err());
        let bad_kind = "tml-network 1\ninput rows=4 cols=4 channels=1\nlayer segment=head kind=lstm\n";
        assert!(spec_from_text(bad_kind).is_err());
        let no_head = "tml-network 1\ninput rows=4 cols=4 channels=1\nlayer segment=branch0 kind=gap\n";
        assert!(matches!(spec_from_text(no_head), Err(Error::Topology(_))));
    }

    #[test]
    fn params_round_trip_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Network::<f64>::new(dhlac(), &mut rng).unwrap();
        let mut buf = Vec::new();
        write_params(&net, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"TMLP");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        let back: Network<f64> = read_params(dhlac(), &mut buf.as_slice()).unwrap();
        assert_eq!(back, net);

        buf.pop();
        assert!(read_params::<f64, _>(dhlac(), &mut buf.as_slice()).is_err());
    }
}
