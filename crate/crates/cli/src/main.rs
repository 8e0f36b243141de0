mod config;

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tml_core::data::{self, LabeledImage};
use tml_core::gradcheck;
use tml_core::hlac::{default_masks, hlac_vector, write_hlac_csv};
use tml_core::nn::{load_checkpoint, save_checkpoint, Arch, Network};
use tml_core::train::{evaluate, train_loop, NoObserver};
use tml_core::viz::{cooc_highlight, render_feature_map, render_kernel_heatmap, write_pgm};
use tml_core::Network64;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "tml", version, about = "Trainable multiplication layer toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Plain-text key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable), e.g. `--set epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Clone)]
struct DatasetArgs {
    /// `stripes` for the synthetic textures, or a directory holding
    /// train-*/t10k-* IDX files (optionally .gz).
    #[arg(long)]
    dataset: String,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the stripe-texture dataset as IDX files.
    GenStripes {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a network and write a checkpoint.
    Train {
        /// dhlac, cooc, baseline or baseline+hlac.
        #[arg(long)]
        arch: String,
        #[command(flatten)]
        data: DatasetArgs,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint path; the network description is written next to it with a .spec extension.
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch metrics CSV.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Report test accuracy of a checkpoint.
    Eval {
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DatasetArgs,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Finite-difference gradient checks of the TML and a tiny network.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
    /// Write every TML kernel of a checkpoint as a heatmap.
    VizKernels {
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the TML output maps of one test image.
    VizFeatures {
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DatasetArgs,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Overlay the co-occurrence highlight of one test image.
    VizCooc {
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DatasetArgs,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Target class; defaults to the image label.
        #[arg(long)]
        class: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write HLAC features of a dataset split as CSV.
    HlacExtract {
        #[command(flatten)]
        data: DatasetArgs,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// train or test.
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
}

type Set = Vec<LabeledImage<f64>>;

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let cfg = RunConfig::load(args.config.as_deref(), &args.overrides)?;
    print!("{cfg}");
    Ok(cfg)
}

fn load_dataset(name: &str, cfg: &RunConfig) -> Result<(Set, Set)> {
    let (mut train, mut test) = if name == "stripes" {
        data::gen_stripe_dataset(&cfg.stripes())?
    } else {
        data::load_idx_dir(Path::new(name)).with_context(|| format!("loading dataset {name}"))?
    };
    if cfg.train_limit > 0 {
        train.truncate(cfg.train_limit);
    }
    if cfg.test_limit > 0 {
        test.truncate(cfg.test_limit);
    }
    if train.is_empty() {
        bail!("dataset {name} has no training samples");
    }
    Ok((train, test))
}

fn load_net(path: &Path) -> Result<Network64> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn pick<'a>(set: &'a Set, index: usize) -> Result<&'a LabeledImage<f64>> {
    set.get(index)
        .with_context(|| format!("index {index} out of range for {} test samples", set.len()))
}

fn first_tml(net: &Network64) -> Result<usize> {
    net.tml_layers()
        .first()
        .copied()
        .context("checkpoint has no TML layer")
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenStripes { out, cfg } => {
            let cfg = load_config(&cfg)?;
            let (train, test) = data::gen_stripe_dataset::<f64>(&cfg.stripes())?;
            data::save_idx_pair(&out, "train", &train)?;
            data::save_idx_pair(&out, "t10k", &test)?;
            println!("wrote {} training and {} test images to {}", train.len(), test.len(), out.display());
        }
        Command::Train {
            arch,
            data: d,
            cfg,
            out,
            metrics,
        } => {
            let arch: Arch = arch.parse()?;
            let cfg = load_config(&cfg)?;
            let (train, test) = load_dataset(&d.dataset, &cfg)?;
            let classes = data::class_count(&train).max(data::class_count(&test));
            let spec = arch.build(&cfg.arch(train[0].pixels.shape(), classes))?;
            let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.train.rng_seed);
            let mut net = Network::<f64>::new(spec, &mut init_rng)?;
            println!(
                "arch={} train={} test={} classes={classes} params={}",
                arch.name(),
                train.len(),
                test.len(),
                net.param_count()
            );
            let started = Instant::now();
            let mut sinks: Vec<Box<dyn Write>> = vec![Box::new(io::stdout())];
            if let Some(p) = &metrics {
                sinks.push(Box::new(BufWriter::new(
                    File::create(p).with_context(|| format!("creating {}", p.display()))?,
                )));
            }
            let mut tee = Tee(sinks);
            let rows = train_loop(&mut net, &train, &test, &cfg.train, &mut NoObserver, Some(&mut tee))?;
            tee.flush()?;
            save_checkpoint(&net, &out)?;
            let last = rows.last().expect("at least one epoch");
            println!(
                "test_acc={:.4} elapsed={:.1}s checkpoint={}",
                last.test_acc,
                started.elapsed().as_secs_f64(),
                out.display()
            );
        }
        Command::Eval {
            checkpoint,
            data: d,
            cfg,
        } => {
            let cfg = load_config(&cfg)?;
            let net = load_net(&checkpoint)?;
            let (_, test) = load_dataset(&d.dataset, &cfg)?;
            println!("accuracy={:.4} samples={}", evaluate(&net, &test)?, test.len());
        }
        Command::Gradcheck { seed, instances } => {
            println!("seed={seed}");
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = gradcheck::run_suite(&mut rng, instances)?;
            println!(
                "tml instances={} weight_rel={:.3e} input_rel={:.3e} network_rel={:.3e}",
                r.instances, r.tml_weight_rel, r.tml_input_rel, r.network_rel
            );
            if !r.passes(1e-5, 1e-4) {
                bail!("gradient check failed");
            }
            println!("gradcheck passed");
        }
        Command::VizKernels { checkpoint, out } => {
            let net = load_net(&checkpoint)?;
            let li = first_tml(&net)?;
            let k = net.tml_kernels(li).expect("tml layer");
            fs::create_dir_all(&out)?;
            let channels = k.config().in_channels;
            for m in 0..k.config().num_kernels {
                for (c, img) in render_kernel_heatmap(k, m)?.iter().enumerate() {
                    let name = if channels == 1 {
                        format!("kernel_{m}.pgm")
                    } else {
                        format!("kernel_{m}_ch{c}.pgm")
                    };
                    write_pgm(img, &out.join(name))?;
                }
            }
            println!("wrote {} kernels to {}", k.config().num_kernels, out.display());
        }
        Command::VizFeatures {
            checkpoint,
            data: d,
            cfg,
            index,
            out,
        } => {
            let cfg = load_config(&cfg)?;
            let net = load_net(&checkpoint)?;
            let (_, test) = load_dataset(&d.dataset, &cfg)?;
            let sample = pick(&test, index)?;
            let li = first_tml(&net)?;
            let trace = net.trace(&sample.pixels)?;
            let y = trace.layer_output(li).expect("tml layers cache their output");
            fs::create_dir_all(&out)?;
            for m in 0..y.shape().channels {
                write_pgm(&render_feature_map(y, m)?, &out.join(format!("feature_{m}.pgm")))?;
            }
            println!("wrote {} feature maps to {}", y.shape().channels, out.display());
        }
        Command::VizCooc {
            checkpoint,
            data: d,
            cfg,
            index,
            class,
            out,
        } => {
            let cfg = load_config(&cfg)?;
            let net = load_net(&checkpoint)?;
            let (_, test) = load_dataset(&d.dataset, &cfg)?;
            let sample = pick(&test, index)?;
            let target = class.unwrap_or(sample.label);
            let h = cooc_highlight(&net, &sample.pixels, target, cfg.threshold)?;
            write_pgm(&h.overlay, &out)?;
            println!(
                "class={target} kernel={} active_cells={} out={}",
                h.kernel,
                h.cells.len(),
                out.display()
            );
        }
        Command::HlacExtract {
            data: d,
            cfg,
            split,
            out,
        } => {
            let cfg = load_config(&cfg)?;
            let (train, test) = load_dataset(&d.dataset, &cfg)?;
            let set = match split.as_str() {
                "train" => train,
                "test" => test,
                other => bail!("unknown split {other:?} (expected train or test)"),
            };
            let masks = default_masks();
            let rows = set
                .iter()
                .map(|s| Ok((s.label, hlac_vector(&s.pixels, &masks)?)))
                .collect::<Result<Vec<_>>>()?;
            let mut w = BufWriter::new(File::create(&out)?);
            write_hlac_csv(&mut w, &rows)?;
            w.flush()?;
            println!("wrote {} rows to {}", rows.len(), out.display());
        }
    }
    Ok(())
}

/// Writes to several sinks at once.
struct Tee(Vec<Box<dyn Write>>);

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        for s in &mut self.0 {
            s.write_all(buf)?;
        }
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        self.0.iter_mut().try_for_each(|s| s.flush())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
