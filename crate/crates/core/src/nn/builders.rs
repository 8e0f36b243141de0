//! Ready-made topologies for the experiments.

use crate::error::{Error, Result};
use crate::tensor::Shape;
use crate::tml::{TmlConfig, DEFAULT_EPS};

use super::network::{LayerSpec, NetworkSpec};

/// Knobs shared by the builders below.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArchConfig {
    pub input: Shape,
    pub classes: usize,
    /// Side length of the square TML kernels.
    pub kernel_size: usize,
    pub num_kernels: usize,
    pub c1: f64,
    pub c2: f64,
    pub eps: f64,
    /// Dropout after the pooling stages of the baseline CNN.
    pub conv_dropout: f64,
    /// Dropout after the hidden dense layer of the baseline CNN.
    pub fc_dropout: f64,
}

impl ArchConfig {
    pub fn new(input: Shape, classes: usize) -> Self {
        Self {
            input,
            classes,
            kernel_size: 3,
            num_kernels: 8,
            c1: 1.0,
            c2: 0.5,
            eps: DEFAULT_EPS,
            conv_dropout: 0.25,
            fc_dropout: 0.5,
        }
    }

    fn tml(&self, in_channels: usize) -> Result<TmlConfig> {
        TmlConfig::new(
            self.kernel_size,
            self.kernel_size,
            in_channels,
            self.num_kernels,
            self.c1,
            self.c2,
        )?
        .with_eps(self.eps)
    }

    fn check_classes(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidConfig(format!("need at least 2 classes, got {}", self.classes)));
        }
        Ok(())
    }
}

/// conv(6,5)-relu-pool-conv(16,5)-relu-pool-fc(120)-sigmoid-fc(84)-sigmoid.
pub fn lenet_stack() -> Vec<LayerSpec> {
    use LayerSpec::*;
    vec![
        Conv { filters: 6, size: 5 },
        Relu,
        MaxPool,
        Conv { filters: 16, size: 5 },
        Relu,
        MaxPool,
        Fc { units: 120 },
        Sigmoid,
        Fc { units: 84 },
        Sigmoid,
    ]
}

/// TML right behind the input, globally pooled, concatenated with a LeNet-like
/// branch before the classifier.
pub fn build_dhlac_net(cfg: &ArchConfig) -> Result<NetworkSpec> {
    cfg.check_classes()?;
    let spec = NetworkSpec {
        input: cfg.input,
        branches: vec![vec![LayerSpec::Tml(cfg.tml(cfg.input.channels)?), LayerSpec::Gap], lenet_stack()],
        head: vec![LayerSpec::Fc { units: cfg.classes }, LayerSpec::SoftmaxXent],
    };
    spec.resolve()?;
    Ok(spec)
}

/// Two conv stages followed by a TML across their feature maps, GAP and the
/// classifier.
pub fn build_cooc_net(cfg: &ArchConfig) -> Result<NetworkSpec> {
    use LayerSpec::*;
    cfg.check_classes()?;
    let spec = NetworkSpec {
        input: cfg.input,
        branches: vec![vec![
            Conv { filters: 6, size: 5 },
            Relu,
            MaxPool,
            Conv { filters: 16, size: 5 },
            Relu,
            Tml(cfg.tml(16)?),
            Gap,
        ]],
        head: vec![Fc { units: cfg.classes }, SoftmaxXent],
    };
    spec.resolve()?;
    Ok(spec)
}

fn baseline_branch(cfg: &ArchConfig) -> Vec<LayerSpec> {
    use LayerSpec::*;
    vec![
        Conv { filters: 8, size: 3 },
        Relu,
        MaxPool,
        Dropout { rate: cfg.conv_dropout },
        Conv { filters: 16, size: 3 },
        Relu,
        MaxPool,
        Dropout { rate: cfg.conv_dropout },
        Conv { filters: 32, size: 3 },
        Relu,
        Fc { units: 64 },
        Relu,
        Dropout { rate: cfg.fc_dropout },
    ]
}

/// Small dropout CNN used as the reference baseline.
pub fn build_baseline_net(cfg: &ArchConfig) -> Result<NetworkSpec> {
    cfg.check_classes()?;
    let spec = NetworkSpec {
        input: cfg.input,
        branches: vec![baseline_branch(cfg)],
        head: vec![LayerSpec::Fc { units: cfg.classes }, LayerSpec::SoftmaxXent],
    };
    spec.resolve()?;
    Ok(spec)
}

/// Baseline CNN with fixed HLAC features of the input concatenated before the
/// classifier.
pub fn build_baseline_hlac_net(cfg: &ArchConfig) -> Result<NetworkSpec> {
    let mut spec = build_baseline_net(cfg)?;
    spec.branches.push(vec![LayerSpec::Hlac]);
    spec.resolve()?;
    Ok(spec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Dhlac,
    Cooc,
    Baseline,
    BaselineHlac,
}

impl Arch {
    pub fn build(self, cfg: &ArchConfig) -> Result<NetworkSpec> {
        match self {
            Self::Dhlac => build_dhlac_net(cfg),
            Self::Cooc => build_cooc_net(cfg),
            Self::Baseline => build_baseline_net(cfg),
            Self::BaselineHlac => build_baseline_hlac_net(cfg),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Dhlac => "dhlac",
            Self::Cooc => "cooc",
            Self::Baseline => "baseline",
            Self::BaselineHlac => "baseline+hlac",
        }
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dhlac" => Ok(Self::Dhlac),
            "cooc" => Ok(Self::Cooc),
            "baseline" => Ok(Self::Baseline),
            "baseline+hlac" => Ok(Self::BaselineHlac),
            _ => Err(Error::InvalidConfig(format!(
                "unknown architecture {s:?} (expected dhlac, cooc, baseline or baseline+hlac)"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shapes(spec: &NetworkSpec) -> Vec<(String, Shape)> {
        spec.resolve()
            .unwrap()
            .into_iter()
            .map(|l| (l.spec.kind().to_string(), l.output))
            .collect()
    }

    #[test]
    fn dhlac_mnist_shapes() {
        let mut cfg = ArchConfig::new(Shape::new(28, 28, 1).unwrap(), 10);
        cfg.num_kernels = 8;
        let s = shapes(&build_dhlac_net(&cfg).unwrap());
        assert_eq!(s[0], ("tml".into(), Shape::new(26, 26, 8).unwrap()));
        assert_eq!(s[1], ("gap".into(), Shape::vector(8).unwrap()));
        // 8 pooled TML responses + 84 LeNet features feed the classifier.
        let head = build_dhlac_net(&cfg).unwrap().resolve().unwrap();
        let fc = head.iter().find(|l| l.segment == super::super::Segment::Head).unwrap();
        assert_eq!(fc.input, Shape::vector(92).unwrap());
        assert_eq!(s.last().unwrap().1, Shape::vector(10).unwrap());
    }

    #[test]
    fn dhlac_stripes_shapes() {
        let mut cfg = ArchConfig::new(Shape::new(32, 32, 1).unwrap(), 6);
        cfg.kernel_size = 9;
        cfg.num_kernels = 4;
        let s = shapes(&build_dhlac_net(&cfg).unwrap());
        assert_eq!(s[0].1, Shape::new(24, 24, 4).unwrap());
    }

    #[test]
    fn minimal_dhlac_type_checks() {
        let mut cfg = ArchConfig::new(Shape::new(28, 28, 1).unwrap(), 2);
        cfg.num_kernels = 1;
        assert!(build_dhlac_net(&cfg).is_ok());
    }

    #[test]
    fn cooc_shapes() {
        let mut cfg = ArchConfig::new(Shape::new(28, 28, 1).unwrap(), 10);
        cfg.kernel_size = 1;
        let s = shapes(&build_cooc_net(&cfg).unwrap());
        let tml = s.iter().find(|(k, _)| k == "tml").unwrap();
        assert_eq!(tml.1, Shape::new(8, 8, 8).unwrap());
    }

    #[test]
    fn baseline_variants_type_check() {
        let cfg = ArchConfig::new(Shape::new(28, 28, 1).unwrap(), 10);
        assert!(build_baseline_net(&cfg).is_ok());
        let s = build_baseline_hlac_net(&cfg).unwrap();
        assert_eq!(s.branches.len(), 2);
    }

    #[test]
    fn infeasible_tml_rejected() {
        let mut cfg = ArchConfig::new(Shape::new(28, 28, 1).unwrap(), 10);
        cfg.kernel_size = 1;
        assert!(build_dhlac_net(&cfg).is_err());
    }

    #[test]
    fn arch_names_round_trip() {
        for a in [Arch::Dhlac, Arch::Cooc, Arch::Baseline, Arch::BaselineHlac] {
            assert_eq!(a.name().parse::<Arch>().unwrap(), a);
        }
        assert!("vgg".parse::<Arch>().is_err());
    }
}
