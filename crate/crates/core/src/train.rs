//! L1-regularized momentum SGD with kernel projection after every update.
//!
//! Energy of a batch is the mean softmax cross-entropy plus `lambda * sum |w|`
//! over TML weights only. Each step computes the gradient of that energy, takes
//! a momentum step on all parameters, then clips TML weights to `[0, c2]` and
//! rescales every kernel to sum `c1`.

use std::fmt::Write as _;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{batches, LabeledImage};
use crate::error::{Error, Result};
use crate::nn::{argmax, softmax_xent, Gradients, Mode, Network, Params};
use crate::scalar::Scalar;
use crate::tml::DEFAULT_EPS;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub rng_seed: u64,
    pub c1: f64,
    pub c2: f64,
    pub eps: f64,
    /// Clip and rescale TML kernels after every step. Disabling it turns a
    /// step into plain SGD; meant for tests.
    pub project: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 32,
            epochs: 10,
            rng_seed: 0,
            c1: 1.0,
            c2: 0.5,
            eps: DEFAULT_EPS,
            project: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be nonnegative, got {}", self.lambda));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyReport {
    pub mean_loss: f64,
    pub l1_term: f64,
    pub total: f64,
}

impl EnergyReport {
    fn new(mean_loss: f64, l1_term: f64) -> Self {
        Self {
            mean_loss,
            l1_term,
            total: mean_loss + l1_term,
        }
    }
}

/// One-hot class indicator.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherVector<S>(Vec<S>);

impl<S: Scalar> TeacherVector<S> {
    pub fn onehot(label: usize, classes: usize) -> Result<Self> {
        if label >= classes {
            return Err(Error::IndexOutOfRange { index: label, limit: classes });
        }
        let mut v = vec![S::zero(); classes];
        v[label] = S::one();
        Ok(Self(v))
    }

    pub fn as_slice(&self) -> &[S] {
        &self.0
    }
}

/// `lambda * sum |w|` over every TML layer.
pub fn l1_term<S: Scalar>(net: &Network<S>, lambda: f64) -> f64 {
    let sum: f64 = net
        .tml_layers()
        .into_iter()
        .filter_map(|i| net.tml_kernels(i))
        .map(|k| k.l1().to_f64_lossy())
        .sum();
    lambda * sum
}

/// Eval-mode energy of `batch`.
pub fn energy<S: Scalar>(net: &Network<S>, batch: &[&LabeledImage<S>], lambda: f64) -> Result<EnergyReport> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let classes = net.num_classes();
    let mut loss = 0.0;
    for s in batch {
        let t = TeacherVector::<S>::onehot(s.label, classes)?;
        loss += softmax_xent(&net.logits(&s.pixels)?, t.as_slice())?.0.to_f64_lossy();
    }
    let mean = loss / batch.len() as f64;
    if !mean.is_finite() {
        return Err(Error::NonFinite(format!("mean loss {mean}")));
    }
    Ok(EnergyReport::new(mean, l1_term(net, lambda)))
}

/// Fraction of samples whose eval-mode argmax equals the label.
pub fn evaluate<S: Scalar>(net: &Network<S>, set: &[LabeledImage<S>]) -> Result<f64> {
    if set.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for s in set {
        if net.predict(&s.pixels)? == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / set.len() as f64)
}

/// Momentum buffers, shaped like the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState<S> {
    velocity: Gradients<S>,
}

impl<S: Scalar> SgdState<S> {
    pub fn new(net: &Network<S>) -> Self {
        Self {
            velocity: Gradients::zeros_like(net),
        }
    }
}

/// Hooks into the training loop. All methods default to no-ops.
pub trait Observer<S: Scalar> {
    /// After TML weights were clipped, before they are rescaled.
    fn post_clip(&mut self, _net: &Network<S>) {}
    /// After the full update of one batch, projection included.
    fn post_step(&mut self, _net: &Network<S>, _step: &StepReport) {}
    fn epoch_end(&mut self, _net: &Network<S>, _metrics: &EpochMetrics) {}
}

/// Observer that ignores everything.
pub struct NoObserver;

impl<S: Scalar> Observer<S> for NoObserver {}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// Mean training-mode loss of the batch before the update.
    pub mean_loss: f64,
    pub correct: usize,
    pub samples: usize,
    /// `(layer, kernel)` pairs reset because clipping zeroed them.
    pub reinitialized: Vec<(usize, usize)>,
}

/// One update on `batch`: gradient of the energy, momentum step, projection.
pub fn train_step<S: Scalar>(
    net: &mut Network<S>,
    batch: &[&LabeledImage<S>],
    cfg: &TrainConfig,
    state: &mut SgdState<S>,
    rng: &mut ChaCha8Rng,
    observer: &mut dyn Observer<S>,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let classes = net.num_classes();
    let inputs: Vec<_> = batch.iter().map(|s| &s.pixels).collect();
    let (logits, trace) = net.forward(&inputs, Mode::Train(rng))?;

    let inv_n = S::of(1.0 / batch.len() as f64);
    let mut loss = 0.0;
    let mut correct = 0;
    let mut d_logits = Vec::with_capacity(batch.len());
    for (s, out) in batch.iter().zip(&logits) {
        let t = TeacherVector::<S>::onehot(s.label, classes)?;
        let (l, mut d) = softmax_xent(out, t.as_slice())?;
        loss += l.to_f64_lossy();
        if argmax(out) == s.label {
            correct += 1;
        }
        d.iter_mut().for_each(|v| *v *= inv_n);
        d_logits.push(d);
    }
    let mean_loss = loss / batch.len() as f64;
    if !mean_loss.is_finite() {
        return Err(Error::NonFinite(format!("training loss {mean_loss}")));
    }
    let mut grads = net.backward(trace, &d_logits)?;

    let lambda = S::of(cfg.lambda);
    let lr = S::of(cfg.learning_rate);
    let mu = S::of(cfg.momentum);
    for (li, layer) in net.layers_mut().iter_mut().enumerate() {
        let is_tml = matches!(layer.params, Params::Tml(_));
        for (ai, param) in layer.params.arrays_mut().into_iter().enumerate() {
            let g = &mut grads.layers[li][ai];
            if is_tml && cfg.lambda != 0.0 {
                for (gi, &w) in g.iter_mut().zip(param.iter()) {
                    *gi += lambda * sign(w);
                }
            }
            let v = &mut state.velocity.layers[li][ai];
            for ((p, vi), &gi) in param.iter_mut().zip(v.iter_mut()).zip(g.iter()) {
                *vi = mu * *vi + gi;
                *p -= lr * *vi;
            }
        }
    }

    let mut reinitialized = Vec::new();
    if cfg.project {
        let tml = net.tml_layers();
        for &li in &tml {
            net.tml_kernels_mut(li).expect("tml layer").clip_weights();
        }
        observer.post_clip(net);
        for &li in &tml {
            let k = net.tml_kernels_mut(li).expect("tml layer");
            if let Err(Error::DegenerateKernels(ms)) = k.rescale_kernels() {
                for m in ms {
                    k.reinit_kernel(m);
                    reinitialized.push((li, m));
                }
            }
        }
    }
    let report = StepReport {
        mean_loss,
        correct,
        samples: batch.len(),
        reinitialized,
    };
    observer.post_step(net, &report);
    Ok(report)
}

fn sign<S: Scalar>(w: S) -> S {
    if w > S::zero() {
        S::one()
    } else if w < S::zero() {
        -S::one()
    } else {
        S::zero()
    }
}

/// One CSV row of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean training-mode loss over the epoch's batches.
    pub mean_loss: f64,
    /// L1 term of the kernels at the end of the epoch.
    pub l1_term: f64,
    pub total: f64,
    /// Running training accuracy over the epoch's batches.
    pub train_acc: f64,
    pub test_acc: f64,
}

pub const METRICS_HEADER: &str = "epoch,mean_loss,l1_term,total,train_acc,test_acc";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{:?},{:?}",
            self.epoch, self.mean_loss, self.l1_term, self.total, self.train_acc, self.test_acc
        )
    }
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

/// Trains for `cfg.epochs` epochs, reshuffling every epoch from a generator
/// seeded with `cfg.rng_seed`. Metrics rows are also streamed to `log` when
/// given.
pub fn train_loop<S: Scalar>(
    net: &mut Network<S>,
    train: &[LabeledImage<S>],
    test: &[LabeledImage<S>],
    cfg: &TrainConfig,
    observer: &mut dyn Observer<S>,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut state = SgdState::new(net);
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "{METRICS_HEADER}")?;
    }
    let mut rows = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for idx in batches(train.len(), cfg.batch_size, &mut rng) {
            let batch: Vec<&LabeledImage<S>> = idx.iter().map(|&i| &train[i]).collect();
            let r = train_step(net, &batch, cfg, &mut state, &mut rng, observer)?;
            loss_sum += r.mean_loss * r.samples as f64;
            correct += r.correct;
        }
        let mean_loss = loss_sum / train.len() as f64;
        let l1 = l1_term(net, cfg.lambda);
        let row = EpochMetrics {
            epoch,
            mean_loss,
            l1_term: l1,
            total: mean_loss + l1,
            train_acc: correct as f64 / train.len() as f64,
            test_acc: evaluate(net, test)?,
        };
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", row.csv_row())?;
            w.flush()?;
        }
        observer.epoch_end(net, &row);
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LayerSpec, NetworkSpec};
    use crate::tensor::{Shape, Tensor};
    use crate::tml::TmlConfig;

    fn toy_set() -> Vec<LabeledImage<f64>> {
        let shape = Shape::new(4, 4, 1).unwrap();
        (0..8)
            .map(|i| {
                let label = i % 2;
                let v = if label == 0 { 0.2 } else { 0.9 };
                let px = (0..16).map(|j| v + 0.01 * ((i + j) % 3) as f64).collect();
                LabeledImage {
                    pixels: Tensor::from_vec(shape, px).unwrap(),
                    label,
                }
            })
            .collect()
    }

    fn toy_spec() -> NetworkSpec {
        NetworkSpec {
            input: Shape::new(4, 4, 1).unwrap(),
            branches: vec![vec![
                LayerSpec::Tml(TmlConfig::new(2, 2, 1, 2, 1.0, 0.5).unwrap()),
                LayerSpec::Gap,
            ]],
            head: vec![LayerSpec::Fc { units: 2 }, LayerSpec::SoftmaxXent],
        }
    }

    fn net(seed: u64) -> Network<f64> {
        Network::new(toy_spec(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn teacher_is_onehot() {
        let t = TeacherVector::<f64>::onehot(2, 4).unwrap();
        assert_eq!(t.as_slice(), &[0.0, 0.0, 1.0, 0.0]);
        assert!(TeacherVector::<f64>::onehot(4, 4).is_err());
    }

    #[test]
    fn energy_decomposes() {
        let n = net(0);
        let set = toy_set();
        let batch: Vec<_> = set.iter().collect();
        let e0 = energy(&n, &batch, 0.0).unwrap();
        assert_eq!(e0.total, e0.mean_loss);
        let e = energy(&n, &batch, 0.01).unwrap();
        // Two projected kernels each summing to 1.
        assert!((e.l1_term - 0.02).abs() < 1e-15);
        assert_eq!(e.total, e.mean_loss + e.l1_term);
        assert!(energy(&n, &[], 0.01).is_err());
    }

    #[test]
    fn energy_matches_hand_computation() {
        // Identity TML (single 1x1 kernel, weight 1), GAP, fc with known weights.
        let cfg = TmlConfig::new(1, 1, 1, 1, 1.0, 1.0).unwrap().with_eps(1e-12).unwrap();
        let spec = NetworkSpec {
            input: Shape::new(1, 2, 1).unwrap(),
            branches: vec![vec![LayerSpec::Tml(cfg), LayerSpec::Gap]],
            head: vec![LayerSpec::Fc { units: 2 }, LayerSpec::SoftmaxXent],
        };
        let params = vec![
            Params::Tml(crate::tml::TmlKernels::from_weights(cfg, vec![1.0]).unwrap()),
            Params::None,
            Params::Dense {
                weight: vec![2.0, -1.0],
                bias: vec![0.0, 0.5],
            },
            Params::None,
        ];
        let n = Network::from_params(spec, params).unwrap();
        let s = LabeledImage {
            pixels: Tensor::from_rows(&[&[0.2, 0.6]]).unwrap(),
            label: 1,
        };
        let e = energy(&n, &[&s], 0.1).unwrap();
        // mean 0.4 -> logits [0.8, 0.1]; loss = ln(e^0.8 + e^0.1) - 0.1
        let expect = ((0.8f64).exp() + (0.1f64).exp()).ln() - 0.1;
        assert!((e.mean_loss - expect).abs() < 1e-10, "{} vs {expect}", e.mean_loss);
        assert!((e.l1_term - 0.1).abs() < 1e-15);
    }

    #[test]
    fn zero_rate_keeps_feasible_network() {
        let mut n = net(1);
        let before = n.clone();
        let set = toy_set();
        let batch: Vec<_> = set.iter().collect();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let mut state = SgdState::new(&n);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        train_step(&mut n, &batch, &cfg, &mut state, &mut rng, &mut NoObserver).unwrap();
        for (a, b) in n.layers().iter().zip(before.layers()) {
            for (x, y) in a.params.arrays().iter().zip(b.params.arrays()) {
                for (u, v) in x.iter().zip(y) {
                    assert!((u - v).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn unprojected_step_is_plain_sgd() {
        let mut n = net(2);
        let set = toy_set();
        let batch: Vec<_> = set.iter().take(4).collect();
        let cfg = TrainConfig {
            lambda: 0.0,
            momentum: 0.0,
            learning_rate: 0.1,
            project: false,
            ..TrainConfig::default()
        };
        // Reference: manual gradient of the mean loss.
        let inputs: Vec<_> = batch.iter().map(|s| &s.pixels).collect();
        let (logits, trace) = n.forward(&inputs, Mode::Eval).unwrap();
        let d: Vec<Vec<f64>> = batch
            .iter()
            .zip(&logits)
            .map(|(s, o)| {
                let t = TeacherVector::onehot(s.label, 2).unwrap();
                softmax_xent(o, t.as_slice()).unwrap().1.iter().map(|v| v / 4.0).collect()
            })
            .collect();
        let g = n.backward(trace, &d).unwrap();
        let mut expect = n.clone();
        for (li, layer) in expect.layers_mut().iter_mut().enumerate() {
            for (ai, p) in layer.params.arrays_mut().into_iter().enumerate() {
                for (w, gi) in p.iter_mut().zip(&g.layers[li][ai]) {
                    *w -= 0.1 * gi;
                }
            }
        }
        let mut state = SgdState::new(&n);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        train_step(&mut n, &batch, &cfg, &mut state, &mut rng, &mut NoObserver).unwrap();
        assert_eq!(n, expect);
    }

    #[test]
    fn single_parameter_momentum_by_hand() {
        // Fc with one weight on a 1x1 input into a two-class softmax is not
        // one-parameter; instead check the update rule on the bias of a
        // network whose weights see a zero input.
        let spec = NetworkSpec {
            input: Shape::new(1, 1, 1).unwrap(),
            branches: vec![vec![LayerSpec::Fc { units: 2 }]],
            head: vec![LayerSpec::SoftmaxXent],
        };
        let params = vec![
            Params::Dense {
                weight: vec![0.0, 0.0],
                bias: vec![0.0, 0.0],
            },
            Params::None,
        ];
        let mut n = Network::<f64>::from_params(spec, params).unwrap();
        let s = LabeledImage {
            pixels: Tensor::from_rows(&[&[0.0]]).unwrap(),
            label: 0,
        };
        let cfg = TrainConfig {
            learning_rate: 0.5,
            momentum: 0.9,
            ..TrainConfig::default()
        };
        let mut state = SgdState::new(&n);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        train_step(&mut n, &[&s], &cfg, &mut state, &mut rng, &mut NoObserver).unwrap();
        // Uniform softmax: gradient [-0.5, 0.5]; bias -> [0.25, -0.25].
        let b = n.layers()[0].params.arrays()[1].to_vec();
        assert_eq!(b, vec![0.25, -0.25]);
        train_step(&mut n, &[&s], &cfg, &mut state, &mut rng, &mut NoObserver).unwrap();
        let p0 = 1.0 / (1.0 + (-0.5f64).exp());
        let g0 = p0 - 1.0;
        let v0 = 0.9 * -0.5 + g0;
        let b = n.layers()[0].params.arrays()[1].to_vec();
        assert!((b[0] - (0.25 - 0.5 * v0)).abs() < 1e-15);
        assert!((b[1] + b[0]).abs() < 1e-15);
    }

    struct Invariants {
        post_clip_max: f64,
        worst_sum_err: f64,
        min_weight: f64,
        steps: usize,
    }

    impl Observer<f64> for Invariants {
        fn post_clip(&mut self, net: &Network<f64>) {
            for li in net.tml_layers() {
                let k = net.tml_kernels(li).unwrap();
                let m = k.weights().iter().cloned().fold(f64::MIN, f64::max);
                self.post_clip_max = self.post_clip_max.max(m);
            }
        }

        fn post_step(&mut self, net: &Network<f64>, _: &StepReport) {
            self.steps += 1;
            for li in net.tml_layers() {
                let k = net.tml_kernels(li).unwrap();
                for m in 0..k.config().num_kernels {
                    self.worst_sum_err = self.worst_sum_err.max((k.kernel_sum(m) - 1.0).abs());
                }
                self.min_weight = k.weights().iter().cloned().fold(self.min_weight, f64::min);
            }
        }
    }

    #[test]
    fn loop_keeps_constraints_and_learns() {
        let mut n = net(3);
        let set = toy_set();
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 4,
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        let mut obs = Invariants {
            post_clip_max: 0.0,
            worst_sum_err: 0.0,
            min_weight: f64::MAX,
            steps: 0,
        };
        let mut log = Vec::new();
        let rows = train_loop(&mut n, &set, &set, &cfg, &mut obs, Some(&mut log)).unwrap();
        assert_eq!(rows.len(), 30);
        assert_eq!(obs.steps, 60);
        assert!(obs.post_clip_max <= 0.5);
        assert!(obs.worst_sum_err < 1e-9);
        assert!(obs.min_weight >= 0.0);
        assert_eq!(rows.last().unwrap().test_acc, 1.0);
        for r in &rows {
            assert!((r.l1_term - 0.02).abs() < 1e-12);
        }
        assert_eq!(String::from_utf8(log).unwrap(), metrics_csv(&rows));
    }

    #[test]
    fn loop_is_deterministic() {
        let set = toy_set();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 3,
            ..TrainConfig::default()
        };
        let mut a = net(4);
        let mut b = net(4);
        let ra = train_loop(&mut a, &set, &set, &cfg, &mut NoObserver, None).unwrap();
        let rb = train_loop(&mut b, &set, &set, &cfg, &mut NoObserver, None).unwrap();
        assert_eq!(metrics_csv(&ra), metrics_csv(&rb));
        assert_eq!(a, b);
    }

    #[test]
    fn single_class_constant_input_is_perfect_after_one_epoch() {
        let shape = Shape::new(4, 4, 1).unwrap();
        let set: Vec<_> = (0..4)
            .map(|_| LabeledImage {
                pixels: Tensor::new(shape, 0.5).unwrap(),
                label: 0,
            })
            .collect();
        let mut n = net(5);
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let rows = train_loop(&mut n, &set, &set, &cfg, &mut NoObserver, None).unwrap();
        assert_eq!(rows[0].test_acc, 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { epochs: 0, ..TrainConfig::default() },
            TrainConfig { lambda: -1.0, ..TrainConfig::default() },
            TrainConfig { learning_rate: 0.0, ..TrainConfig::default() },
            TrainConfig { momentum: 1.0, ..TrainConfig::default() },
        ] {
            assert!(bad.validate().is_err());
        }
        let mut n = net(0);
        assert!(train_loop(&mut n, &[], &[], &TrainConfig::default(), &mut NoObserver, None).is_err());
    }

    #[test]
    fn evaluate_counts_matches() {
        let n = net(0);
        let set = toy_set();
        let acc = evaluate(&n, &set).unwrap();
        assert!((0.0..=1.0).contains(&acc));
        let relabeled: Vec<_> = set
            .iter()
            .map(|s| LabeledImage {
                pixels: s.pixels.clone(),
                label: n.predict(&s.pixels).unwrap(),
            })
            .collect();
        assert_eq!(evaluate(&n, &relabeled).unwrap(), 1.0);
    }
}
