//! Network description, parameter storage and batched forward/backward passes.
//!
//! A network is a set of parallel branches that all read the input image,
//! whose flattened outputs are concatenated and fed through a sequential head
//! ending in the softmax cross-entropy loss. A plain CNN is a single branch; the
//! auto-correlation topology runs a TML + GAP branch next to a CNN branch.

use std::fmt;
use std::ops::Range;

use rand::{Rng, RngCore};

use super::layers::{self, argmax};
use crate::error::{Error, Result};
use crate::hlac::{default_masks, hlac_vector, MaskSet};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};
use crate::tml::{tml_backward_input, tml_backward_weights, tml_forward, TmlConfig, TmlKernels};

/// Number of HLAC features emitted per input channel by [`LayerSpec::Hlac`].
pub const HLAC_FEATURES_PER_CHANNEL: usize = 25;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv { filters: usize, size: usize },
    MaxPool,
    Relu,
    Sigmoid,
    Fc { units: usize },
    Gap,
    Dropout { rate: f64 },
    Tml(TmlConfig),
    /// Fixed 25-mask HLAC features per channel, divided by the image area.
    /// Only valid as the first layer of a branch.
    Hlac,
    SoftmaxXent,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Conv { .. } => "conv",
            Self::MaxPool => "maxpool",
            Self::Relu => "relu",
            Self::Sigmoid => "sigmoid",
            Self::Fc { .. } => "fc",
            Self::Gap => "gap",
            Self::Dropout { .. } => "dropout",
            Self::Tml(_) => "tml",
            Self::Hlac => "hlac",
            Self::SoftmaxXent => "softmax_xent",
        }
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        match self {
            Self::Conv { filters, size } => layers::conv_output_shape(input, *filters, *size),
            Self::MaxPool => layers::maxpool_output_shape(input),
            Self::Relu | Self::Sigmoid | Self::SoftmaxXent => Ok(input),
            Self::Dropout { rate } => {
                if (0.0..1.0).contains(rate) {
                    Ok(input)
                } else {
                    Err(Error::InvalidConfig(format!("dropout rate {rate} outside [0, 1)")))
                }
            }
            Self::Fc { units } => Shape::vector(*units),
            Self::Gap => Shape::vector(input.channels),
            Self::Tml(cfg) => {
                cfg.validate()?;
                cfg.output_shape(input)
            }
            Self::Hlac => Shape::vector(input.channels * HLAC_FEATURES_PER_CHANNEL),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Branch(usize),
    Head,
}

impl fmt::Display for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Branch(b) => write!(f, "branch{b}"),
            Self::Head => f.write_str("head"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub input: Shape,
    pub branches: Vec<Vec<LayerSpec>>,
    pub head: Vec<LayerSpec>,
}

/// A layer with its position and resolved input/output shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedLayer {
    pub spec: LayerSpec,
    pub segment: Segment,
    pub input: Shape,
    pub output: Shape,
}

impl NetworkSpec {
    /// Checks the shape chain and structural rules; returns every layer in
    /// evaluation order (branches in order, then the head).
    pub fn resolve(&self) -> Result<Vec<ResolvedLayer>> {
        let topo = |msg: String| Err(Error::Topology(msg));
        if self.branches.is_empty() {
            return topo("network needs at least one branch".into());
        }
        match self.head.last() {
            Some(LayerSpec::SoftmaxXent) => {}
            _ => return topo("head must end with softmax_xent".into()),
        }
        let heads = self
            .branches
            .iter()
            .flatten()
            .chain(&self.head)
            .filter(|l| matches!(l, LayerSpec::SoftmaxXent))
            .count();
        if heads != 1 {
            return topo(format!("exactly one loss head expected, found {heads}"));
        }

        let mut out = Vec::new();
        let mut concat = 0usize;
        for (b, branch) in self.branches.iter().enumerate() {
            if branch.is_empty() {
                return topo(format!("branch {b} is empty"));
            }
            let mut shape = self.input;
            for (i, spec) in branch.iter().enumerate() {
                if matches!(spec, LayerSpec::Hlac) && i != 0 {
                    return topo(format!("hlac must be the first layer of branch {b}"));
                }
                let next = spec.output_shape(shape).map_err(|e| {
                    Error::Topology(format!("branch {b} layer {i} ({}): {e}", spec.kind()))
                })?;
                out.push(ResolvedLayer {
                    spec: spec.clone(),
                    segment: Segment::Branch(b),
                    input: shape,
                    output: next,
                });
                shape = next;
            }
            concat += shape.len();
        }
        let mut shape = Shape::vector(concat)?;
        for (i, spec) in self.head.iter().enumerate() {
            if matches!(spec, LayerSpec::Hlac) {
                return topo("hlac cannot appear in the head".into());
            }
            let next = spec
                .output_shape(shape)
                .map_err(|e| Error::Topology(format!("head layer {i} ({}): {e}", spec.kind())))?;
            out.push(ResolvedLayer {
                spec: spec.clone(),
                segment: Segment::Head,
                input: shape,
                output: next,
            });
            shape = next;
        }
        Ok(out)
    }

    pub fn num_classes(&self) -> Result<usize> {
        Ok(self.resolve()?.last().map(|l| l.output.len()).unwrap_or(0))
    }
}

/// Learnable arrays of one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum Params<S> {
    None,
    Dense { weight: Vec<S>, bias: Vec<S> },
    Tml(TmlKernels<S>),
}

impl<S: Scalar> Params<S> {
    pub fn arrays(&self) -> Vec<&[S]> {
        match self {
            Self::None => vec![],
            Self::Dense { weight, bias } => vec![weight, bias],
            Self::Tml(k) => vec![k.weights()],
        }
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut [S]> {
        match self {
            Self::None => vec![],
            Self::Dense { weight, bias } => vec![weight, bias],
            Self::Tml(k) => vec![k.weights_mut()],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<S> {
    pub spec: LayerSpec,
    pub segment: Segment,
    pub input: Shape,
    pub output: Shape,
    pub params: Params<S>,
}

/// Gradients for every parameter array, aligned with [`Network::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<S> {
    pub layers: Vec<Vec<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn zeros_like(net: &Network<S>) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| l.params.arrays().iter().map(|a| vec![S::zero(); a.len()]).collect())
                .collect(),
        }
    }

    pub fn scale(&mut self, factor: S) {
        self.layers.iter_mut().flatten().flatten().for_each(|g| *g *= factor);
    }

    fn accumulate(&mut self, layer: usize, grads: Vec<Vec<S>>) {
        for (acc, g) in self.layers[layer].iter_mut().zip(grads) {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Aux<S> {
    None,
    Argmax(Vec<usize>),
    Mask(Vec<S>),
    Output(Tensor<S>),
}

/// Cached activations of one sample.
#[derive(Debug, Clone)]
pub struct SampleTrace<S> {
    inputs: Vec<Tensor<S>>,
    aux: Vec<Aux<S>>,
    logits: Vec<S>,
}

impl<S: Scalar> SampleTrace<S> {
    /// Input seen by layer `idx`.
    pub fn layer_input(&self, idx: usize) -> &Tensor<S> {
        &self.inputs[idx]
    }

    /// Output of layer `idx` when it caches one (TML and sigmoid layers).
    pub fn layer_output(&self, idx: usize) -> Option<&Tensor<S>> {
        match &self.aux[idx] {
            Aux::Output(t) => Some(t),
            _ => None,
        }
    }

    pub fn logits(&self) -> &[S] {
        &self.logits
    }
}

/// Per-sample caches for one batch, consumed by [`Network::backward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace<S> {
    samples: Vec<SampleTrace<S>>,
}

impl<S: Scalar> ForwardTrace<S> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[SampleTrace<S>] {
        &self.samples
    }
}

/// Dropout is active only in `Train`.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<S> {
    spec: NetworkSpec,
    layers: Vec<Layer<S>>,
    branch_ranges: Vec<Range<usize>>,
    head_range: Range<usize>,
    hlac_masks: MaskSet,
}

impl<S: Scalar> Network<S> {
    /// Builds a network with freshly initialized parameters: He-uniform
    /// convolutions, Glorot-uniform dense layers, zero biases and projected
    /// uniform TML kernels.
    pub fn new<R: Rng + ?Sized>(spec: NetworkSpec, rng: &mut R) -> Result<Self> {
        let resolved = spec.resolve()?;
        let mut params = Vec::with_capacity(resolved.len());
        for l in &resolved {
            params.push(match &l.spec {
                LayerSpec::Conv { filters, size } => {
                    let fan_in = size * size * l.input.channels;
                    let bound = (6.0 / fan_in as f64).sqrt();
                    Params::Dense {
                        weight: uniform(rng, filters * fan_in, bound),
                        bias: vec![S::zero(); *filters],
                    }
                }
                LayerSpec::Fc { units } => {
                    let fan_in = l.input.len();
                    let bound = (6.0 / (fan_in + units) as f64).sqrt();
                    Params::Dense {
                        weight: uniform(rng, units * fan_in, bound),
                        bias: vec![S::zero(); *units],
                    }
                }
                LayerSpec::Tml(cfg) => Params::Tml(TmlKernels::random(*cfg, rng)?),
                _ => Params::None,
            });
        }
        Self::assemble(spec, resolved, params)
    }

    /// Builds a network from explicit parameters, in layer order.
    pub fn from_params(spec: NetworkSpec, params: Vec<Params<S>>) -> Result<Self> {
        let resolved = spec.resolve()?;
        if params.len() != resolved.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameter sets for {} layers",
                params.len(),
                resolved.len()
            )));
        }
        Self::assemble(spec, resolved, params)
    }

    fn assemble(spec: NetworkSpec, resolved: Vec<ResolvedLayer>, params: Vec<Params<S>>) -> Result<Self> {
        let mut layers = Vec::with_capacity(resolved.len());
        for (i, (l, p)) in resolved.into_iter().zip(params).enumerate() {
            check_params(i, &l, &p)?;
            layers.push(Layer {
                spec: l.spec,
                segment: l.segment,
                input: l.input,
                output: l.output,
                params: p,
            });
        }
        let mut branch_ranges = Vec::with_capacity(spec.branches.len());
        let mut start = 0;
        for b in &spec.branches {
            branch_ranges.push(start..start + b.len());
            start += b.len();
        }
        let head_range = start..layers.len();
        Ok(Self {
            spec,
            layers,
            branch_ranges,
            head_range,
            hlac_masks: default_masks(),
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer<S>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<S>] {
        &mut self.layers
    }

    pub fn branch_range(&self, b: usize) -> Range<usize> {
        self.branch_ranges[b].clone()
    }

    pub fn head_range(&self) -> Range<usize> {
        self.head_range.clone()
    }

    /// Offset of branch `b`'s flattened output inside the concatenated vector.
    pub fn concat_offset(&self, b: usize) -> usize {
        self.branch_ranges[..b]
            .iter()
            .map(|r| self.layers[r.end - 1].output.len())
            .sum()
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.head_range.end - 1].output.len()
    }

    /// Indices of TML layers.
    pub fn tml_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| matches!(self.layers[i].params, Params::Tml(_)))
            .collect()
    }

    pub fn tml_kernels(&self, layer: usize) -> Option<&TmlKernels<S>> {
        match &self.layers.get(layer)?.params {
            Params::Tml(k) => Some(k),
            _ => None,
        }
    }

    pub fn tml_kernels_mut(&mut self, layer: usize) -> Option<&mut TmlKernels<S>> {
        match &mut self.layers.get_mut(layer)?.params {
            Params::Tml(k) => Some(k),
            _ => None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.params.arrays())
            .map(<[S]>::len)
            .sum()
    }

    /// Runs a batch; returns the logits of every sample and the caches needed
    /// by [`Self::backward`].
    pub fn forward(&self, batch: &[&Tensor<S>], mut mode: Mode<'_>) -> Result<(Vec<Vec<S>>, ForwardTrace<S>)> {
        let mut samples = Vec::with_capacity(batch.len());
        for x in batch {
            let mut rng: Option<&mut dyn RngCore> = match &mut mode {
                Mode::Eval => None,
                Mode::Train(r) => Some(&mut **r),
            };
            samples.push(self.forward_sample(x, &mut rng)?);
        }
        let logits = samples.iter().map(|s| s.logits.clone()).collect();
        Ok((logits, ForwardTrace { samples }))
    }

    /// Eval-mode logits for one input.
    pub fn logits(&self, x: &Tensor<S>) -> Result<Vec<S>> {
        Ok(self.forward_sample(x, &mut None)?.logits)
    }

    /// Eval-mode trace for one input.
    pub fn trace(&self, x: &Tensor<S>) -> Result<SampleTrace<S>> {
        self.forward_sample(x, &mut None)
    }

    pub fn predict(&self, x: &Tensor<S>) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }

    fn forward_sample(&self, x: &Tensor<S>, rng: &mut Option<&mut dyn RngCore>) -> Result<SampleTrace<S>> {
        if x.shape() != self.spec.input {
            return Err(Error::ShapeMismatch(format!(
                "network expects {}, got {}",
                self.spec.input,
                x.shape()
            )));
        }
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut aux = Vec::with_capacity(n);
        let mut concat = Vec::new();
        for range in &self.branch_ranges {
            let mut cur = x.clone();
            for idx in range.clone() {
                let (next, a) = self.layer_forward(idx, &cur, rng)?;
                inputs.push(cur);
                aux.push(a);
                cur = next;
            }
            concat.extend_from_slice(cur.data());
        }
        let mut cur = Tensor::vector(concat)?;
        for idx in self.head_range.clone() {
            let (next, a) = self.layer_forward(idx, &cur, rng)?;
            inputs.push(cur);
            aux.push(a);
            cur = next;
        }
        Ok(SampleTrace {
            inputs,
            aux,
            logits: cur.into_vec(),
        })
    }

    fn layer_forward(
        &self,
        idx: usize,
        x: &Tensor<S>,
        rng: &mut Option<&mut dyn RngCore>,
    ) -> Result<(Tensor<S>, Aux<S>)> {
        let layer = &self.layers[idx];
        Ok(match (&layer.spec, &layer.params) {
            (LayerSpec::Conv { size, .. }, Params::Dense { weight, bias }) => {
                (layers::conv2d_forward(x, weight, bias, *size)?, Aux::None)
            }
            (LayerSpec::Fc { .. }, Params::Dense { weight, bias }) => {
                (layers::fc_forward(x, weight, bias)?, Aux::None)
            }
            (LayerSpec::MaxPool, _) => {
                let (y, arg) = layers::maxpool_forward(x)?;
                (y, Aux::Argmax(arg))
            }
            (LayerSpec::Relu, _) => (layers::relu(x), Aux::None),
            (LayerSpec::Sigmoid, _) => {
                let y = layers::sigmoid(x);
                (y.clone(), Aux::Output(y))
            }
            (LayerSpec::Gap, _) => (layers::gap_forward(x), Aux::None),
            (LayerSpec::Dropout { rate }, _) => match rng {
                Some(rng) if *rate > 0.0 => {
                    let (y, mask) = layers::dropout_forward(x, *rate, &mut **rng);
                    (y, Aux::Mask(mask))
                }
                _ => (x.clone(), Aux::None),
            },
            (LayerSpec::Tml(_), Params::Tml(k)) => {
                let y = tml_forward(x, k)?;
                (y.clone(), Aux::Output(y))
            }
            (LayerSpec::Hlac, _) => {
                let area = S::of(x.shape().area() as f64);
                let feats = hlac_vector(x, &self.hlac_masks)?;
                (Tensor::vector(feats.into_iter().map(|v| v / area).collect())?, Aux::None)
            }
            (LayerSpec::SoftmaxXent, _) => (x.clone(), Aux::None),
            (spec, _) => unreachable!("{} layer without matching parameters", spec.kind()),
        })
    }

    /// Sums parameter gradients over the batch given `dLoss/dlogits` per sample.
    pub fn backward(&self, trace: ForwardTrace<S>, d_logits: &[Vec<S>]) -> Result<Gradients<S>> {
        if trace.samples.len() != d_logits.len() {
            return Err(Error::ShapeMismatch(format!(
                "trace holds {} samples, {} output gradients given",
                trace.samples.len(),
                d_logits.len()
            )));
        }
        let mut grads = Gradients::zeros_like(self);
        for (sample, d) in trace.samples.iter().zip(d_logits) {
            self.backward_sample(sample, d, &mut grads)?;
        }
        Ok(grads)
    }

    fn backward_sample(&self, t: &SampleTrace<S>, d_logits: &[S], grads: &mut Gradients<S>) -> Result<()> {
        if t.inputs.len() != self.layers.len() {
            return Err(Error::ShapeMismatch("trace does not belong to this network".into()));
        }
        let mut d = Tensor::vector(d_logits.to_vec())?;
        if d.shape() != self.layers[self.head_range.end - 1].output {
            return Err(Error::ShapeMismatch(format!(
                "output gradient has {} entries, network emits {}",
                d_logits.len(),
                self.num_classes()
            )));
        }
        for idx in self.head_range.clone().rev() {
            let (g, dx) = self.layer_backward(idx, t, &d, true)?;
            grads.accumulate(idx, g);
            d = dx.expect("requested input gradient");
        }
        let concat = d.into_vec();
        let mut offset = 0;
        for range in &self.branch_ranges {
            let out = self.layers[range.end - 1].output;
            let mut d = Tensor::from_vec(out, concat[offset..offset + out.len()].to_vec())?;
            offset += out.len();
            for idx in range.clone().rev() {
                let need_dx = idx != range.start;
                let (g, dx) = self.layer_backward(idx, t, &d, need_dx)?;
                grads.accumulate(idx, g);
                match dx {
                    Some(dx) => d = dx,
                    None => break,
                }
            }
        }
        Ok(())
    }

    fn layer_backward(
        &self,
        idx: usize,
        t: &SampleTrace<S>,
        d_out: &Tensor<S>,
        need_dx: bool,
    ) -> Result<(Vec<Vec<S>>, Option<Tensor<S>>)> {
        let layer = &self.layers[idx];
        let x = &t.inputs[idx];
        Ok(match (&layer.spec, &layer.params, &t.aux[idx]) {
            (LayerSpec::Conv { size, .. }, Params::Dense { weight, .. }, _) => {
                let (dw, db, dx) = layers::conv2d_backward(x, weight, *size, d_out, need_dx)?;
                (vec![dw, db], dx)
            }
            (LayerSpec::Fc { .. }, Params::Dense { weight, .. }, _) => {
                let (dw, db, dx) = layers::fc_backward(x, weight, d_out, need_dx);
                (vec![dw, db], dx)
            }
            (LayerSpec::MaxPool, _, Aux::Argmax(arg)) => {
                (vec![], Some(layers::maxpool_backward(d_out, arg, layer.input)))
            }
            (LayerSpec::Relu, _, _) => (vec![], Some(layers::relu_backward(x, d_out))),
            (LayerSpec::Sigmoid, _, Aux::Output(y)) => {
                (vec![], Some(layers::sigmoid_backward(y, d_out)))
            }
            (LayerSpec::Gap, _, _) => (vec![], Some(layers::gap_backward(d_out, layer.input))),
            (LayerSpec::Dropout { .. }, _, Aux::Mask(mask)) => {
                (vec![], Some(layers::dropout_backward(d_out, mask)))
            }
            (LayerSpec::Dropout { .. }, _, _) => (vec![], Some(d_out.clone())),
            (LayerSpec::Tml(_), Params::Tml(k), Aux::Output(y)) => {
                let dw = tml_backward_weights(x, y, d_out, k)?;
                let dx = if need_dx {
                    Some(tml_backward_input(x, y, d_out, k)?)
                } else {
                    None
                };
                (vec![dw], dx)
            }
            (LayerSpec::Hlac, _, _) => (vec![], None),
            (LayerSpec::SoftmaxXent, _, _) => (vec![], Some(d_out.clone())),
            (spec, _, _) => {
                return Err(Error::ShapeMismatch(format!(
                    "trace entry for layer {idx} ({}) does not match the network",
                    spec.kind()
                )))
            }
        })
    }
}

fn uniform<S: Scalar, R: Rng + ?Sized>(rng: &mut R, n: usize, bound: f64) -> Vec<S> {
    (0..n).map(|_| S::of(rng.gen_range(-bound..bound))).collect()
}

fn check_params<S: Scalar>(idx: usize, l: &ResolvedLayer, p: &Params<S>) -> Result<()> {
    let mismatch = |what: String| Err(Error::ShapeMismatch(format!("layer {idx} ({}): {what}", l.spec.kind())));
    match (&l.spec, p) {
        (LayerSpec::Conv { filters, size }, Params::Dense { weight, bias }) => {
            let n = filters * size * size * l.input.channels;
            if weight.len() != n || bias.len() != *filters {
                return mismatch(format!("expected {n} weights and {filters} biases"));
            }
        }
        (LayerSpec::Fc { units }, Params::Dense { weight, bias }) => {
            let n = units * l.input.len();
            if weight.len() != n || bias.len() != *units {
                return mismatch(format!("expected {n} weights and {units} biases"));
            }
        }
        (LayerSpec::Tml(cfg), Params::Tml(k)) => {
            if k.config() != cfg {
                return mismatch("kernel configuration differs from the layer spec".into());
            }
        }
        (LayerSpec::Conv { .. } | LayerSpec::Fc { .. } | LayerSpec::Tml(_), _) => {
            return mismatch("missing parameters".into());
        }
        (_, Params::None) => {}
        (_, _) => return mismatch("unexpected parameters".into()),
    }
    Ok(())
}
