//! `key=value` run configuration shared by every subcommand.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use tml_core::data::StripeSpec;
use tml_core::nn::ArchConfig;
use tml_core::train::TrainConfig;
use tml_core::Shape;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub kernel_size: usize,
    pub num_kernels: usize,
    pub conv_dropout: f64,
    pub fc_dropout: f64,
    /// Use at most this many training / test samples (0 keeps all).
    pub train_limit: usize,
    pub test_limit: usize,
    pub stripe_canvas: usize,
    pub stripe_samples: usize,
    pub stripe_test: usize,
    pub stripe_noise: f64,
    pub threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let stripes = StripeSpec::default();
        Self {
            train: TrainConfig::default(),
            kernel_size: 3,
            num_kernels: 8,
            conv_dropout: 0.25,
            fc_dropout: 0.5,
            train_limit: 0,
            test_limit: 0,
            stripe_canvas: stripes.canvas,
            stripe_samples: stripes.samples_per_class,
            stripe_test: stripes.test_per_class,
            stripe_noise: stripes.noise_amplitude,
            threshold: tml_core::viz::ACTIVE_FRACTION,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| anyhow::anyhow!("invalid value {v:?} for {key}"))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "seed" => t.rng_seed = parse(key, v)?,
            "lambda" => t.lambda = parse(key, v)?,
            "learning_rate" => t.learning_rate = parse(key, v)?,
            "momentum" => t.momentum = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "c1" => t.c1 = parse(key, v)?,
            "c2" => t.c2 = parse(key, v)?,
            "eps" => t.eps = parse(key, v)?,
            "kernel_size" => self.kernel_size = parse(key, v)?,
            "num_kernels" => self.num_kernels = parse(key, v)?,
            "conv_dropout" => self.conv_dropout = parse(key, v)?,
            "fc_dropout" => self.fc_dropout = parse(key, v)?,
            "train_limit" => self.train_limit = parse(key, v)?,
            "test_limit" => self.test_limit = parse(key, v)?,
            "stripe_canvas" => self.stripe_canvas = parse(key, v)?,
            "stripe_samples" => self.stripe_samples = parse(key, v)?,
            "stripe_test" => self.stripe_test = parse(key, v)?,
            "stripe_noise" => self.stripe_noise = parse(key, v)?,
            "threshold" => self.threshold = parse(key, v)?,
            _ => bail!("unknown config key {key:?}"),
        }
        Ok(())
    }

    /// Applies a config file (`key=value` per line, `#` comments) and then
    /// command-line overrides.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = fs::read_to_string(path)
                .with_context(|| format!("cannot read config file {}", path.display()))?;
            for (n, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                cfg.apply(line)
                    .with_context(|| format!("{}:{}", path.display(), n + 1))?;
            }
        }
        for o in overrides {
            cfg.apply(o)?;
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, pair: &str) -> Result<()> {
        let Some((k, v)) = pair.split_once('=') else {
            bail!("expected key=value, got {pair:?}");
        };
        self.set(k.trim(), v.trim())
    }

    pub fn arch(&self, input: Shape, classes: usize) -> ArchConfig {
        ArchConfig {
            input,
            classes,
            kernel_size: self.kernel_size,
            num_kernels: self.num_kernels,
            c1: self.train.c1,
            c2: self.train.c2,
            eps: self.train.eps,
            conv_dropout: self.conv_dropout,
            fc_dropout: self.fc_dropout,
        }
    }

    pub fn stripes(&self) -> StripeSpec {
        StripeSpec {
            canvas: self.stripe_canvas,
            samples_per_class: self.stripe_samples,
            test_per_class: self.stripe_test,
            noise_amplitude: self.stripe_noise,
            rng_seed: self.train.rng_seed,
            ..StripeSpec::default()
        }
    }

    fn entries(&self) -> BTreeMap<&'static str, String> {
        let t = &self.train;
        BTreeMap::from([
            ("batch_size", t.batch_size.to_string()),
            ("c1", format!("{:?}", t.c1)),
            ("c2", format!("{:?}", t.c2)),
            ("conv_dropout", format!("{:?}", self.conv_dropout)),
            ("epochs", t.epochs.to_string()),
            ("eps", format!("{:?}", t.eps)),
            ("fc_dropout", format!("{:?}", self.fc_dropout)),
            ("kernel_size", self.kernel_size.to_string()),
            ("lambda", format!("{:?}", t.lambda)),
            ("learning_rate", format!("{:?}", t.learning_rate)),
            ("momentum", format!("{:?}", t.momentum)),
            ("num_kernels", self.num_kernels.to_string()),
            ("seed", t.rng_seed.to_string()),
            ("stripe_canvas", self.stripe_canvas.to_string()),
            ("stripe_noise", format!("{:?}", self.stripe_noise)),
            ("stripe_samples", self.stripe_samples.to_string()),
            ("stripe_test", self.stripe_test.to_string()),
            ("test_limit", self.test_limit.to_string()),
            ("threshold", format!("{:?}", self.threshold)),
            ("train_limit", self.train_limit.to_string()),
        ])
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.entries() {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}
