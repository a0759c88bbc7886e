//! Layers, parameters, and the per-step binding of parameters onto a tape.

use crate::conv;
use crate::tape::{Arr, Gradients, Tape, Var};
use ndarray::IxDyn;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(0);

/// A named-by-owner trainable array with a process-unique identity.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub value: Arr,
    id: u64,
}

impl Parameter {
    pub fn new(value: Arr) -> Self {
        Self {
            value,
            id: NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Forward-pass mode; batch norm normalizes with batch statistics in
/// `Train` and with running statistics in `Eval`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Anything that owns parameters (and possibly non-trainable buffers).
pub trait Module {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter));
    fn visit_buffers(&self, _prefix: &str, _f: &mut dyn FnMut(&str, &Arr)) {}
    fn visit_buffers_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut Arr)) {}

    /// Total number of trainable scalars.
    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.len());
        n
    }
}

/// Binds parameters to tape variables for one recorded step, so gradients
/// can be routed back to the owning [`Parameter`]s afterwards.
pub struct GraphCtx<'t> {
    tape: &'t Tape,
    trainable: bool,
    bound: HashMap<u64, usize>,
}

impl<'t> GraphCtx<'t> {
    /// Bindings created through this context are differentiable leaves.
    pub fn trainable(tape: &'t Tape) -> Self {
        Self {
            tape,
            trainable: true,
            bound: HashMap::new(),
        }
    }

    /// Bindings are constants: values flow, gradients are not computed
    /// for the parameters themselves (inputs still get gradients).
    pub fn frozen(tape: &'t Tape) -> Self {
        Self {
            tape,
            trainable: false,
            bound: HashMap::new(),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Bind (or re-use) the tape variable for a parameter.
    pub fn param(&mut self, p: &Parameter) -> Var<'t> {
        if let Some(&id) = self.bound.get(&p.id) {
            return Var { id, tape: self.tape };
        }
        let var = if self.trainable {
            self.tape.leaf(p.value.clone())
        } else {
            self.tape.constant(p.value.clone())
        };
        self.bound.insert(p.id, var.id);
        var
    }

    /// Gradient computed for `p` in this step, if any.
    pub fn grad<'g>(&self, grads: &'g Gradients, p: &Parameter) -> Option<&'g Arr> {
        self.bound.get(&p.id).and_then(|&id| grads.get_id(id))
    }
}

/// Normal(0, sqrt(2 / fan_in)) initialization.
pub fn he_normal<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Arr {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    Arr::from_shape_simple_fn(IxDyn(shape), || dist.sample(rng))
}

/// 2-D convolution layer with optional bias; batch-norm usually follows,
/// so bias defaults off in the networks built on top of this.
pub struct Conv2d {
    pub weight: Parameter,
    pub bias: Option<Parameter>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<R: Rng>(
        rng: &mut R,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        Self {
            weight: Parameter::new(he_normal(rng, &[cout, cin, k, k], cin * k * k)),
            bias: bias.then(|| Parameter::new(Arr::zeros(IxDyn(&[cout])))),
            stride,
            pad,
        }
    }

    pub fn forward<'t>(&self, ctx: &mut GraphCtx<'t>, x: Var<'t>) -> Var<'t> {
        let w = ctx.param(&self.weight);
        let mut y = conv::conv2d(x, w, self.stride, self.pad);
        if let Some(b) = &self.bias {
            y = conv::add_chan(y, ctx.param(b));
        }
        y
    }
}

impl Module for Conv2d {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter)) {
        f(&format!("{prefix}.weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&format!("{prefix}.bias"), b);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&format!("{prefix}.bias"), b);
        }
    }
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Batch statistics of a batch-norm layer's input, as tape variables so
/// losses can differentiate through them.
pub struct BnBatchStats<'t> {
    pub mean: Var<'t>,
    pub var: Var<'t>,
}

/// Batch normalization over `(n, h, w)` per channel.
///
/// Train mode normalizes with the current batch's mean and population
/// variance and updates the running statistics; eval mode normalizes
/// with the running statistics. Either mode can additionally report the
/// batch statistics of its input for statistic-alignment losses.
pub struct BatchNorm2d {
    pub gamma: Parameter,
    pub beta: Parameter,
    pub running_mean: Arr,
    pub running_var: Arr,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Parameter::new(Arr::ones(IxDyn(&[channels]))),
            beta: Parameter::new(Arr::zeros(IxDyn(&[channels]))),
            running_mean: Arr::zeros(IxDyn(&[channels])),
            running_var: Arr::ones(IxDyn(&[channels])),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn batch_stats<'t>(x: Var<'t>) -> (Var<'t>, Var<'t>) {
        let mean = conv::channel_mean(x);
        let centered = conv::sub_chan(x, mean);
        let var = conv::channel_mean(centered.sqr());
        (mean, var)
    }

    fn update_running(&mut self, mean: &Arr, var: &Arr, count: usize) {
        // unbiased correction for the running variance, matching the
        // usual framework convention; capture stays population-based
        let corr = if count > 1 {
            count as f64 / (count - 1) as f64
        } else {
            1.0
        };
        self.running_mean = (1.0 - BN_MOMENTUM) * &self.running_mean + BN_MOMENTUM * mean;
        self.running_var = (1.0 - BN_MOMENTUM) * &self.running_var + BN_MOMENTUM * &(var * corr);
    }

    fn affine<'t>(&self, ctx: &mut GraphCtx<'t>, xhat: Var<'t>) -> Var<'t> {
        let g = ctx.param(&self.gamma);
        let b = ctx.param(&self.beta);
        conv::add_chan(conv::mul_chan(xhat, g), b)
    }

    pub fn forward<'t>(
        &mut self,
        ctx: &mut GraphCtx<'t>,
        x: Var<'t>,
        mode: Mode,
        capture: bool,
    ) -> (Var<'t>, Option<BnBatchStats<'t>>) {
        let shape = x.shape();
        let count = shape[0] * shape[2] * shape[3];
        match mode {
            Mode::Train => {
                let (mean, var) = Self::batch_stats(x);
                self.update_running(&mean.value(), &var.value(), count);
                let inv = (var.add_scalar(BN_EPS)).sqrt().recip();
                let xhat = conv::mul_chan(conv::sub_chan(x, mean), inv);
                let stats = capture.then_some(BnBatchStats { mean, var });
                (self.affine(ctx, xhat), stats)
            }
            Mode::Eval => {
                let rm = ctx.tape.constant(self.running_mean.clone());
                let rv = ctx.tape.constant(self.running_var.clone());
                let inv = (rv.add_scalar(BN_EPS)).sqrt().recip();
                let xhat = conv::mul_chan(conv::sub_chan(x, rm), inv);
                let stats = capture.then(|| {
                    let (mean, var) = Self::batch_stats(x);
                    BnBatchStats { mean, var }
                });
                (self.affine(ctx, xhat), stats)
            }
        }
    }
}

impl Module for BatchNorm2d {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter)) {
        f(&format!("{prefix}.gamma"), &self.gamma);
        f(&format!("{prefix}.beta"), &self.beta);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        f(&format!("{prefix}.gamma"), &mut self.gamma);
        f(&format!("{prefix}.beta"), &mut self.beta);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &Arr)) {
        f(&format!("{prefix}.running_mean"), &self.running_mean);
        f(&format!("{prefix}.running_var"), &self.running_var);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Arr)) {
        f(&format!("{prefix}.running_mean"), &mut self.running_mean);
        f(&format!("{prefix}.running_var"), &mut self.running_var);
    }
}

/// Batch norm whose affine scale and shift are looked up per class label,
/// so one layer produces class-conditional feature statistics.
pub struct ConditionalBatchNorm2d {
    /// `(num_classes, channels)`; effective scale is `1 + gain`.
    pub gain: Parameter,
    pub bias: Parameter,
    pub running_mean: Arr,
    pub running_var: Arr,
}

impl ConditionalBatchNorm2d {
    pub fn new(num_classes: usize, channels: usize) -> Self {
        Self {
            gain: Parameter::new(Arr::zeros(IxDyn(&[num_classes, channels]))),
            bias: Parameter::new(Arr::zeros(IxDyn(&[num_classes, channels]))),
            running_mean: Arr::zeros(IxDyn(&[channels])),
            running_var: Arr::ones(IxDyn(&[channels])),
        }
    }

    pub fn forward<'t>(
        &mut self,
        ctx: &mut GraphCtx<'t>,
        x: Var<'t>,
        labels: &[usize],
        mode: Mode,
    ) -> Var<'t> {
        let shape = x.shape();
        assert_eq!(labels.len(), shape[0], "one label per sample");
        let count = shape[0] * shape[2] * shape[3];
        let xhat = match mode {
            Mode::Train => {
                let (mean, var) = BatchNorm2d::batch_stats(x);
                let corr = if count > 1 {
                    count as f64 / (count - 1) as f64
                } else {
                    1.0
                };
                self.running_mean =
                    (1.0 - BN_MOMENTUM) * &self.running_mean + BN_MOMENTUM * &*mean.value();
                self.running_var = (1.0 - BN_MOMENTUM) * &self.running_var
                    + BN_MOMENTUM * &(&*var.value() * corr);
                let inv = (var.add_scalar(BN_EPS)).sqrt().recip();
                conv::mul_chan(conv::sub_chan(x, mean), inv)
            }
            Mode::Eval => {
                let rm = ctx.tape.constant(self.running_mean.clone());
                let rv = ctx.tape.constant(self.running_var.clone());
                let inv = (rv.add_scalar(BN_EPS)).sqrt().recip();
                conv::mul_chan(conv::sub_chan(x, rm), inv)
            }
        };
        let gain = ctx.param(&self.gain).gather_rows(labels).add_scalar(1.0);
        let bias = ctx.param(&self.bias).gather_rows(labels);
        conv::add_nc(conv::mul_nc(xhat, gain), bias)
    }
}

impl Module for ConditionalBatchNorm2d {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter)) {
        f(&format!("{prefix}.gain"), &self.gain);
        f(&format!("{prefix}.bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        f(&format!("{prefix}.gain"), &mut self.gain);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &Arr)) {
        f(&format!("{prefix}.running_mean"), &self.running_mean);
        f(&format!("{prefix}.running_var"), &self.running_var);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Arr)) {
        f(&format!("{prefix}.running_mean"), &mut self.running_mean);
        f(&format!("{prefix}.running_var"), &mut self.running_var);
    }
}

/// Fully connected layer; weight is `(in, out)`.
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    pub fn new<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Parameter::new(he_normal(rng, &[fan_in, fan_out], fan_in)),
            bias: Parameter::new(Arr::zeros(IxDyn(&[fan_out]))),
        }
    }

    pub fn forward<'t>(&self, ctx: &mut GraphCtx<'t>, x: Var<'t>) -> Var<'t> {
        let w = ctx.param(&self.weight);
        let b = ctx.param(&self.bias);
        x.matmul(w).add_rowvec(b)
    }
}

impl Module for Linear {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter)) {
        f(&format!("{prefix}.weight"), &self.weight);
        f(&format!("{prefix}.bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

/// Checks that the values of a vector of batch-norm running statistics
/// stay nonnegative; used by snapshot validation.
pub fn all_nonnegative(a: &Arr) -> bool {
    a.iter().all(|&x| x >= 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_param_count_matches_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // 3x3 conv, 1 -> 8 channels, with bias: 3*3*1*8 + 8 = 80
        let conv = Conv2d::new(&mut rng, 1, 8, 3, 1, 1, true);
        assert_eq!(conv.num_params(), 80);
    }

    #[test]
    fn fresh_batchnorm_running_stats() {
        let bn = BatchNorm2d::new(4);
        assert!(bn.running_mean.iter().all(|&x| x == 0.0));
        assert!(bn.running_var.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn train_mode_normalizes_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut bn = BatchNorm2d::new(2);
        let t = Tape::new();
        let mut ctx = GraphCtx::trainable(&t);
        let x = t.constant(he_normal(&mut rng, &[8, 2, 4, 4], 1).mapv(|v| v * 3.0 + 1.0));
        let (y, stats) = bn.forward(&mut ctx, x, Mode::Train, true);
        let stats = stats.unwrap();
        // output per channel should be ~N(0,1) up to the affine (gamma=1, beta=0)
        let yv = y.value();
        let mean0: f64 = yv
            .index_axis(ndarray::Axis(1), 0)
            .iter()
            .sum::<f64>()
            / (8.0 * 16.0);
        assert!(mean0.abs() < 1e-10);
        assert!(stats.var.value()[[0]] > 0.0);
        // running stats moved toward the batch stats
        assert!(bn.running_mean[[0]] != 0.0);
    }

    #[test]
    fn single_sample_population_variance_is_zero() {
        let mut bn = BatchNorm2d::new(3);
        let t = Tape::new();
        let mut ctx = GraphCtx::trainable(&t);
        let x = t.constant(Arr::from_shape_fn(IxDyn(&[1, 3, 1, 1]), |d| d[1] as f64));
        let (_, stats) = bn.forward(&mut ctx, x, Mode::Train, true);
        let var = stats.unwrap().var.value();
        assert!(var.iter().all(|&v| v == 0.0));
    }
}
