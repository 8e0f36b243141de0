//! Central finite-difference checks for the TML and for whole networks.
//!
//! Relative error is `|analytic - numeric| / max(|analytic|, |numeric|, floor)`;
//! the floor keeps near-zero gradients from turning round-off into large ratios.

use rand::Rng;

use crate::error::Result;
use crate::nn::{softmax_xent, Mode, Network, NetworkSpec};
use crate::tensor::{Shape, Tensor};
use crate::tml::{tml_backward_input, tml_backward_weights, tml_forward, TmlConfig, TmlKernels};

pub const DEFAULT_STEP: f64 = 1e-6;
pub const REL_FLOOR: f64 = 1e-3;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TmlCheck {
    pub weight_rel: f64,
    pub input_rel: f64,
}

/// Weighted-sum loss `sum(r * y)` used to probe the TML gradients.
fn probe_loss(x: &Tensor<f64>, k: &TmlKernels<f64>, r: &[f64]) -> Result<f64> {
    let y = tml_forward(x, k)?;
    Ok(y.data().iter().zip(r).map(|(a, b)| a * b).sum())
}

/// Compares both TML gradients with central differences on one instance.
pub fn check_tml(x: &Tensor<f64>, kernels: &TmlKernels<f64>, probe: &[f64], step: f64) -> Result<TmlCheck> {
    let y = tml_forward(x, kernels)?;
    let d = Tensor::from_vec(y.shape(), probe.to_vec())?;
    let dw = tml_backward_weights(x, &y, &d, kernels)?;
    let dx = tml_backward_input(x, &y, &d, kernels)?;

    let mut weight_rel = 0.0f64;
    let mut k = kernels.clone();
    for i in 0..k.weights().len() {
        let w0 = k.weights()[i];
        k.weights_mut()[i] = w0 + step;
        let lp = probe_loss(x, &k, probe)?;
        k.weights_mut()[i] = w0 - step;
        let lm = probe_loss(x, &k, probe)?;
        k.weights_mut()[i] = w0;
        weight_rel = weight_rel.max(rel_error(dw[i], (lp - lm) / (2.0 * step)));
    }

    let mut input_rel = 0.0f64;
    let mut xp = x.clone();
    for i in 0..xp.data().len() {
        let v0 = xp.data()[i];
        xp.data_mut()[i] = v0 + step;
        let lp = probe_loss(&xp, kernels, probe)?;
        xp.data_mut()[i] = v0 - step;
        let lm = probe_loss(&xp, kernels, probe)?;
        xp.data_mut()[i] = v0;
        input_rel = input_rel.max(rel_error(dx.data()[i], (lp - lm) / (2.0 * step)));
    }
    Ok(TmlCheck { weight_rel, input_rel })
}

/// Draws a small random instance: inputs in [0.1, 2], feasible projected
/// kernels, probe weights in [-1, 1].
pub fn random_tml_instance<R: Rng + ?Sized>(
    rng: &mut R,
) -> Result<(Tensor<f64>, TmlKernels<f64>, Vec<f64>)> {
    let kh = rng.gen_range(1..=3);
    let kw = rng.gen_range(1..=3);
    let k = rng.gen_range(1..=2);
    let m = rng.gen_range(1..=3);
    let rows = kh + rng.gen_range(0..=3);
    let cols = kw + rng.gen_range(0..=3);
    let cells = (kh * kw * k) as f64;
    let c1 = 1.0;
    let c2 = rng.gen_range((c1 / cells).max(0.25)..=1.0);
    let cfg = TmlConfig::new(kh, kw, k, m, c1, c2)?;
    let kernels = TmlKernels::random(cfg, rng)?;
    let shape = Shape::new(rows, cols, k)?;
    let x = Tensor::from_vec(shape, (0..shape.len()).map(|_| rng.gen_range(0.1..2.0)).collect())?;
    let out = cfg.output_shape(shape)?;
    let probe = (0..out.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Ok((x, kernels, probe))
}

/// Softmax cross-entropy loss of one eval-mode sample.
fn net_loss(net: &Network<f64>, x: &Tensor<f64>, teacher: &[f64]) -> Result<f64> {
    Ok(softmax_xent(&net.logits(x)?, teacher)?.0)
}

/// Max relative error between backprop and central differences over every
/// parameter of `net` for one labelled sample. Dropout is inactive.
pub fn check_network(net: &Network<f64>, x: &Tensor<f64>, label: usize, step: f64) -> Result<f64> {
    let mut teacher = vec![0.0; net.num_classes()];
    teacher[label] = 1.0;
    let (logits, trace) = net.forward(&[x], Mode::Eval)?;
    let (_, d) = softmax_xent(&logits[0], &teacher)?;
    let grads = net.backward(trace, &[d])?;

    let mut probe = net.clone();
    let mut worst = 0.0f64;
    for (li, layer_grads) in grads.layers.iter().enumerate() {
        for (ai, g) in layer_grads.iter().enumerate() {
            for i in 0..g.len() {
                let v0 = probe.layers()[li].params.arrays()[ai][i];
                probe.layers_mut()[li].params.arrays_mut()[ai][i] = v0 + step;
                let lp = net_loss(&probe, x, &teacher)?;
                probe.layers_mut()[li].params.arrays_mut()[ai][i] = v0 - step;
                let lm = net_loss(&probe, x, &teacher)?;
                probe.layers_mut()[li].params.arrays_mut()[ai][i] = v0;
                worst = worst.max(rel_error(g[i], (lp - lm) / (2.0 * step)));
            }
        }
    }
    Ok(worst)
}

/// Tiny two-branch network on a 4x4 input touching every trainable layer kind.
pub fn tiny_network_spec() -> Result<NetworkSpec> {
    use crate::nn::LayerSpec::*;
    Ok(NetworkSpec {
        input: Shape::new(4, 4, 1)?,
        branches: vec![
            vec![Tml(TmlConfig::new(2, 2, 1, 2, 1.0, 0.5)?), Gap],
            vec![
                Conv { filters: 2, size: 2 },
                Relu,
                MaxPool,
                Fc { units: 3 },
                Sigmoid,
            ],
        ],
        head: vec![Fc { units: 3 }, SoftmaxXent],
    })
}

/// Summary of [`run_suite`].
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub instances: usize,
    pub tml_weight_rel: f64,
    pub tml_input_rel: f64,
    pub network_rel: f64,
}

impl SuiteReport {
    pub fn passes(&self, tml_tol: f64, net_tol: f64) -> bool {
        self.tml_weight_rel < tml_tol && self.tml_input_rel < tml_tol && self.network_rel < net_tol
    }
}

/// Runs `instances` random TML checks plus tiny-network checks.
pub fn run_suite<R: Rng + ?Sized>(rng: &mut R, instances: usize) -> Result<SuiteReport> {
    let mut report = SuiteReport {
        instances,
        tml_weight_rel: 0.0,
        tml_input_rel: 0.0,
        network_rel: 0.0,
    };
    for _ in 0..instances {
        let (x, k, probe) = random_tml_instance(rng)?;
        let c = check_tml(&x, &k, &probe, DEFAULT_STEP)?;
        report.tml_weight_rel = report.tml_weight_rel.max(c.weight_rel);
        report.tml_input_rel = report.tml_input_rel.max(c.input_rel);
    }
    let spec = tiny_network_spec()?;
    for _ in 0..3 {
        let net = Network::<f64>::new(spec.clone(), rng)?;
        let shape = spec.input;
        let x = Tensor::from_vec(shape, (0..shape.len()).map(|_| rng.gen_range(0.1..2.0)).collect())?;
        let label = rng.gen_range(0..net.num_classes());
        report.network_rel = report.network_rel.max(check_network(&net, &x, label, DEFAULT_STEP)?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn suite_passes_at_stated_tolerances() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let r = run_suite(&mut rng, 20).unwrap();
        assert!(r.passes(1e-5, 1e-4), "{r:?}");
    }

    #[test]
    fn single_layer_network_equals_layer_op() {
        let cfg = TmlConfig::new(2, 2, 1, 1, 1.0, 0.5).unwrap();
        let spec = NetworkSpec {
            input: Shape::new(3, 3, 1).unwrap(),
            branches: vec![vec![crate::nn::LayerSpec::Tml(cfg)]],
            head: vec![crate::nn::LayerSpec::SoftmaxXent],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Network::<f64>::new(spec, &mut rng).unwrap();
        let x = Tensor::from_vec(Shape::new(3, 3, 1).unwrap(), (1..=9).map(|v| v as f64 / 9.0).collect()).unwrap();
        let direct = tml_forward(&x, net.tml_kernels(0).unwrap()).unwrap();
        assert_eq!(net.logits(&x).unwrap(), direct.into_vec());
    }
}
