//! The classifier / conditional-generator pair.
//!
//! The classifier is a residual conv net with batch norm after every
//! conv; its pooled last-conv activations are the "feature" vector the
//! statistics pipeline consumes, and all of its batch-norm running
//! statistics are exposed through [`BNSnapshot`]. The generator is a
//! class-conditional residual upsampling net with a tanh output, so
//! samples always land in `[-1, 1]`.
//!
//! Both come in two sizes: `full()` presets sized to the reference
//! parameter budgets (~19.6M / ~3.2M), and `desk()` presets small
//! enough for CPU-scale experiments with the same structure.

use dfgr_autograd::conv;
use dfgr_autograd::nn::{BatchNorm2d, BnBatchStats, Conv2d, ConditionalBatchNorm2d, Linear};
use dfgr_autograd::{Arr, GraphCtx, Mode, Module, Parameter, Tape, Var};
use ndarray::{Array1, Array2, Ix2, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("expected input shape {expected}, got {got}")]
    ShapeError { expected: String, got: String },
    #[error("label {0} outside the generator's trained classes")]
    UnknownClass(u8),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("checkpoint at {path} invalid: {reason}")]
    CheckpointFormat { path: PathBuf, reason: String },
    #[error("checkpoint is missing array {0}")]
    MissingArray(String),
    #[error("array {name}: checkpoint shape {found:?} does not match model shape {expected:?}")]
    ArrayShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

/// Deep copy of every batch-norm layer's running statistics, in the
/// same order the forward pass reports batch statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BNSnapshot {
    pub layers: Vec<(Array1<f64>, Array1<f64>)>,
}

impl BNSnapshot {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

// ---------------------------------------------------------------- classifier

/// Widths and depths of the classifier; all presets share the code path.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierConfig {
    pub num_classes: usize,
    pub stem_channels: usize,
    pub stem_stride: usize,
    pub stage_channels: [usize; 4],
    pub stage_strides: [usize; 4],
    pub blocks_per_stage: [usize; 4],
    pub feature_dim: usize,
}

impl ClassifierConfig {
    /// Reference-budget model: ~17M trainable scalars, feature dim 2048.
    pub fn full() -> Self {
        Self {
            num_classes: 10,
            stem_channels: 64,
            stem_stride: 1,
            stage_channels: [64, 128, 256, 512],
            stage_strides: [1, 2, 2, 2],
            blocks_per_stage: [2, 2, 2, 3],
            feature_dim: 2048,
        }
    }

    /// Small model for CPU-scale runs (~36K scalars, feature dim 64).
    pub fn desk() -> Self {
        Self {
            num_classes: 10,
            stem_channels: 8,
            stem_stride: 2,
            stage_channels: [12, 16, 24, 32],
            stage_strides: [2, 2, 2, 1],
            blocks_per_stage: [1, 1, 1, 1],
            feature_dim: 64,
        }
    }
}

struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    down: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    fn new<R: Rng>(rng: &mut R, cin: usize, cout: usize, stride: usize) -> Self {
        let down = (stride != 1 || cin != cout).then(|| {
            (
                Conv2d::new(rng, cin, cout, 1, stride, 0, false),
                BatchNorm2d::new(cout),
            )
        });
        Self {
            conv1: Conv2d::new(rng, cin, cout, 3, stride, 1, false),
            bn1: BatchNorm2d::new(cout),
            conv2: Conv2d::new(rng, cout, cout, 3, 1, 1, false),
            bn2: BatchNorm2d::new(cout),
            down,
        }
    }

    fn forward<'t>(
        &mut self,
        ctx: &mut GraphCtx<'t>,
        x: Var<'t>,
        mode: Mode,
        captures: &mut Option<Vec<BnBatchStats<'t>>>,
    ) -> Var<'t> {
        let capture = captures.is_some();
        let push = |captures: &mut Option<Vec<BnBatchStats<'t>>>,
                        stats: Option<BnBatchStats<'t>>| {
            if let (Some(c), Some(s)) = (captures.as_mut(), stats) {
                c.push(s);
            }
        };
        let h = self.conv1.forward(ctx, x);
        let (h, s) = self.bn1.forward(ctx, h, mode, capture);
        push(captures, s);
        let h = h.relu();
        let h = self.conv2.forward(ctx, h);
        let (h, s) = self.bn2.forward(ctx, h, mode, capture);
        push(captures, s);
        let shortcut = match &mut self.down {
            Some((conv, bn)) => {
                let d = conv.forward(ctx, x);
                let (d, s) = bn.forward(ctx, d, mode, capture);
                push(captures, s);
                d
            }
            None => x,
        };
        (h + shortcut).relu()
    }

    fn bn_layers(&self) -> Vec<&BatchNorm2d> {
        let mut v = vec![&self.bn1, &self.bn2];
        if let Some((_, bn)) = &self.down {
            v.push(bn);
        }
        v
    }
}

impl Module for BasicBlock {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter)) {
        self.conv1.visit_params(&join(prefix, "conv1"), f);
        self.bn1.visit_params(&join(prefix, "bn1"), f);
        self.conv2.visit_params(&join(prefix, "conv2"), f);
        self.bn2.visit_params(&join(prefix, "bn2"), f);
        if let Some((conv, bn)) = &self.down {
            conv.visit_params(&join(prefix, "down.conv"), f);
            bn.visit_params(&join(prefix, "down.bn"), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        self.conv1.visit_params_mut(&join(prefix, "conv1"), f);
        self.bn1.visit_params_mut(&join(prefix, "bn1"), f);
        self.conv2.visit_params_mut(&join(prefix, "conv2"), f);
        self.bn2.visit_params_mut(&join(prefix, "bn2"), f);
        if let Some((conv, bn)) = &mut self.down {
            conv.visit_params_mut(&join(prefix, "down.conv"), f);
            bn.visit_params_mut(&join(prefix, "down.bn"), f);
        }
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &Arr)) {
        self.bn1.visit_buffers(&join(prefix, "bn1"), f);
        self.bn2.visit_buffers(&join(prefix, "bn2"), f);
        if let Some((_, bn)) = &self.down {
            bn.visit_buffers(&join(prefix, "down.bn"), f);
        }
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Arr)) {
        self.bn1.visit_buffers_mut(&join(prefix, "bn1"), f);
        self.bn2.visit_buffers_mut(&join(prefix, "bn2"), f);
        if let Some((_, bn)) = &mut self.down {
            bn.visit_buffers_mut(&join(prefix, "down.bn"), f);
        }
    }
}

/// Everything a classifier forward pass produces.
pub struct ClassifierOutput<'t> {
    pub logits: Var<'t>,
    pub features: Var<'t>,
    /// Batch statistics of every batch-norm layer's input, present when
    /// capture was requested; order matches [`ClassifierNet::snapshot_bn`].
    pub bn_stats: Option<Vec<BnBatchStats<'t>>>,
}

/// Residual classifier with exposed features and batch-norm statistics.
pub struct ClassifierNet {
    pub config: ClassifierConfig,
    stem: Conv2d,
    stem_bn: BatchNorm2d,
    stages: Vec<Vec<BasicBlock>>,
    head_conv: Conv2d,
    head_bn: BatchNorm2d,
    fc: Linear,
}

impl ClassifierNet {
    pub fn new(config: ClassifierConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let stem = Conv2d::new(rng, 1, config.stem_channels, 3, config.stem_stride, 1, false);
        let stem_bn = BatchNorm2d::new(config.stem_channels);
        let mut stages = Vec::new();
        let mut cin = config.stem_channels;
        for s in 0..4 {
            let cout = config.stage_channels[s];
            let mut blocks = Vec::new();
            for b in 0..config.blocks_per_stage[s] {
                let stride = if b == 0 { config.stage_strides[s] } else { 1 };
                blocks.push(BasicBlock::new(rng, cin, cout, stride));
                cin = cout;
            }
            stages.push(blocks);
        }
        let head_conv = Conv2d::new(rng, cin, config.feature_dim, 1, 1, 0, false);
        let head_bn = BatchNorm2d::new(config.feature_dim);
        let fc = Linear::new(rng, config.feature_dim, config.num_classes);
        Self {
            config,
            stem,
            stem_bn,
            stages,
            head_conv,
            head_bn,
            fc,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Forward pass: logits, pooled features, and optionally the batch
    /// statistics at every batch-norm input.
    pub fn forward<'t>(
        &mut self,
        ctx: &mut GraphCtx<'t>,
        x: Var<'t>,
        mode: Mode,
        capture_bn: bool,
    ) -> Result<ClassifierOutput<'t>, ModelError> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(ModelError::ShapeError {
                expected: "(n, 1, h, w)".into(),
                got: format!("{shape:?}"),
            });
        }
        debug_assert!(
            x.value().iter().all(|&p| (-1.0001..=1.0001).contains(&p)),
            "classifier input must be in [-1, 1]"
        );
        let mut captures: Option<Vec<BnBatchStats<'t>>> = capture_bn.then(Vec::new);
        let h = self.stem.forward(ctx, x);
        let (h, s) = self.stem_bn.forward(ctx, h, mode, capture_bn);
        if let (Some(c), Some(s)) = (captures.as_mut(), s) {
            c.push(s);
        }
        let mut h = h.relu();
        for stage in &mut self.stages {
            for block in stage {
                h = block.forward(ctx, h, mode, &mut captures);
            }
        }
        let h = self.head_conv.forward(ctx, h);
        let (h, s) = self.head_bn.forward(ctx, h, mode, capture_bn);
        if let (Some(c), Some(s)) = (captures.as_mut(), s) {
            c.push(s);
        }
        let h = h.relu();
        let features = conv::pool_mean_hw(h);
        let logits = self.fc.forward(ctx, features);
        Ok(ClassifierOutput {
            logits,
            features,
            bn_stats: captures,
        })
    }

    /// Evaluation-mode forward over plain arrays; returns `(logits, features)`.
    pub fn infer(&mut self, pixels: &Arr) -> Result<(Array2<f64>, Array2<f64>), ModelError> {
        let tape = Tape::new();
        let mut ctx = GraphCtx::frozen(&tape);
        let x = tape.constant(pixels.clone());
        let out = self.forward(&mut ctx, x, Mode::Eval, false)?;
        let logits = out
            .logits
            .value()
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .to_owned();
        let features = out
            .features
            .value()
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .to_owned();
        Ok((logits, features))
    }

    fn bn_layers(&self) -> Vec<&BatchNorm2d> {
        let mut v = vec![&self.stem_bn];
        for stage in &self.stages {
            for block in stage {
                v.extend(block.bn_layers());
            }
        }
        v.push(&self.head_bn);
        v
    }

    /// Deep copy of all running batch-norm statistics.
    pub fn snapshot_bn(&self) -> BNSnapshot {
        let layers = self
            .bn_layers()
            .into_iter()
            .map(|bn| {
                (
                    bn.running_mean
                        .view()
                        .into_dimensionality::<ndarray::Ix1>()
                        .unwrap()
                        .to_owned(),
                    bn.running_var
                        .view()
                        .into_dimensionality::<ndarray::Ix1>()
                        .unwrap()
                        .to_owned(),
                )
            })
            .collect();
        BNSnapshot { layers }
    }
}

impl Module for ClassifierNet {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter)) {
        self.stem.visit_params(&join(prefix, "stem"), f);
        self.stem_bn.visit_params(&join(prefix, "stem_bn"), f);
        for (s, stage) in self.stages.iter().enumerate() {
            for (b, block) in stage.iter().enumerate() {
                block.visit_params(&join(prefix, &format!("stage{s}.block{b}")), f);
            }
        }
        self.head_conv.visit_params(&join(prefix, "head_conv"), f);
        self.head_bn.visit_params(&join(prefix, "head_bn"), f);
        self.fc.visit_params(&join(prefix, "fc"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        self.stem.visit_params_mut(&join(prefix, "stem"), f);
        self.stem_bn.visit_params_mut(&join(prefix, "stem_bn"), f);
        for (s, stage) in self.stages.iter_mut().enumerate() {
            for (b, block) in stage.iter_mut().enumerate() {
                block.visit_params_mut(&join(prefix, &format!("stage{s}.block{b}")), f);
            }
        }
        self.head_conv.visit_params_mut(&join(prefix, "head_conv"), f);
        self.head_bn.visit_params_mut(&join(prefix, "head_bn"), f);
        self.fc.visit_params_mut(&join(prefix, "fc"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &Arr)) {
        self.stem_bn.visit_buffers(&join(prefix, "stem_bn"), f);
        for (s, stage) in self.stages.iter().enumerate() {
            for (b, block) in stage.iter().enumerate() {
                block.visit_buffers(&join(prefix, &format!("stage{s}.block{b}")), f);
            }
        }
        self.head_bn.visit_buffers(&join(prefix, "head_bn"), f);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Arr)) {
        self.stem_bn.visit_buffers_mut(&join(prefix, "stem_bn"), f);
        for (s, stage) in self.stages.iter_mut().enumerate() {
            for (b, block) in stage.iter_mut().enumerate() {
                block.visit_buffers_mut(&join(prefix, &format!("stage{s}.block{b}")), f);
            }
        }
        self.head_bn.visit_buffers_mut(&join(prefix, "head_bn"), f);
    }
}

// ----------------------------------------------------------------- generator

/// Widths of the generator; all presets share the code path.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub num_classes: usize,
    pub noise_dim: usize,
    /// Channels at the initial 4x4 grid.
    pub base_channels: usize,
    /// Output channels of each upsampling block (4x4 -> 8 -> 16 -> 32).
    pub block_channels: [usize; 3],
    /// Two convs per block when set; one otherwise.
    pub double_conv: bool,
}

impl GeneratorConfig {
    /// Reference-budget model: ~3.7M trainable scalars.
    pub fn full() -> Self {
        Self {
            num_classes: 10,
            noise_dim: 128,
            base_channels: 512,
            block_channels: [256, 128, 64],
            double_conv: true,
        }
    }

    /// Small model for CPU-scale runs (~40K scalars).
    pub fn desk() -> Self {
        Self {
            num_classes: 10,
            noise_dim: 32,
            base_channels: 40,
            block_channels: [20, 10, 5],
            double_conv: false,
        }
    }
}

struct GenBlock {
    bn1: ConditionalBatchNorm2d,
    conv1: Conv2d,
    second: Option<(ConditionalBatchNorm2d, Conv2d)>,
    skip: Conv2d,
}

impl GenBlock {
    fn new<R: Rng>(rng: &mut R, classes: usize, cin: usize, cout: usize, double: bool) -> Self {
        Self {
            bn1: ConditionalBatchNorm2d::new(classes, cin),
            conv1: Conv2d::new(rng, cin, cout, 3, 1, 1, false),
            second: double.then(|| {
                (
                    ConditionalBatchNorm2d::new(classes, cout),
                    Conv2d::new(rng, cout, cout, 3, 1, 1, false),
                )
            }),
            skip: Conv2d::new(rng, cin, cout, 1, 1, 0, false),
        }
    }

    fn forward<'t>(
        &mut self,
        ctx: &mut GraphCtx<'t>,
        x: Var<'t>,
        labels: &[usize],
        mode: Mode,
    ) -> Var<'t> {
        let h = self.bn1.forward(ctx, x, labels, mode).relu();
        let h = conv::upsample2x(h);
        let mut h = self.conv1.forward(ctx, h);
        if let Some((bn2, conv2)) = &mut self.second {
            h = bn2.forward(ctx, h, labels, mode).relu();
            h = conv2.forward(ctx, h);
        }
        let shortcut = self.skip.forward(ctx, conv::upsample2x(x));
        h + shortcut
    }
}

impl Module for GenBlock {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter)) {
        self.bn1.visit_params(&join(prefix, "bn1"), f);
        self.conv1.visit_params(&join(prefix, "conv1"), f);
        if let Some((bn2, conv2)) = &self.second {
            bn2.visit_params(&join(prefix, "bn2"), f);
            conv2.visit_params(&join(prefix, "conv2"), f);
        }
        self.skip.visit_params(&join(prefix, "skip"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        self.bn1.visit_params_mut(&join(prefix, "bn1"), f);
        self.conv1.visit_params_mut(&join(prefix, "conv1"), f);
        if let Some((bn2, conv2)) = &mut self.second {
            bn2.visit_params_mut(&join(prefix, "bn2"), f);
            conv2.visit_params_mut(&join(prefix, "conv2"), f);
        }
        self.skip.visit_params_mut(&join(prefix, "skip"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &Arr)) {
        self.bn1.visit_buffers(&join(prefix, "bn1"), f);
        if let Some((bn2, _)) = &self.second {
            bn2.visit_buffers(&join(prefix, "bn2"), f);
        }
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Arr)) {
        self.bn1.visit_buffers_mut(&join(prefix, "bn1"), f);
        if let Some((bn2, _)) = &mut self.second {
            bn2.visit_buffers_mut(&join(prefix, "bn2"), f);
        }
    }
}

/// Class-conditional image generator; outputs 32x32 images in `[-1, 1]`.
pub struct GeneratorNet {
    pub config: GeneratorConfig,
    /// Classes the generator has been trained over; empty before training.
    pub trained_classes: Vec<u8>,
    input: Linear,
    blocks: Vec<GenBlock>,
    final_bn: BatchNorm2d,
    final_conv: Conv2d,
}

impl GeneratorNet {
    pub fn new(config: GeneratorConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let input = Linear::new(
            rng,
            config.noise_dim + config.num_classes,
            config.base_channels * 16,
        );
        let mut blocks = Vec::new();
        let mut cin = config.base_channels;
        for &cout in &config.block_channels {
            blocks.push(GenBlock::new(
                rng,
                config.num_classes,
                cin,
                cout,
                config.double_conv,
            ));
            cin = cout;
        }
        let final_bn = BatchNorm2d::new(cin);
        let final_conv = Conv2d::new(rng, cin, 1, 3, 1, 1, true);
        Self {
            config,
            trained_classes: Vec::new(),
            input,
            blocks,
            final_bn,
            final_conv,
        }
    }

    pub fn noise_dim(&self) -> usize {
        self.config.noise_dim
    }

    /// Differentiable forward from a noise constant; used in training.
    pub fn forward<'t>(
        &mut self,
        ctx: &mut GraphCtx<'t>,
        noise: Var<'t>,
        labels: &[usize],
        mode: Mode,
    ) -> Var<'t> {
        let n = labels.len();
        assert_eq!(noise.shape(), vec![n, self.config.noise_dim]);
        // noise with the one-hot class appended
        let mut z = Arr::zeros(IxDyn(&[n, self.config.noise_dim + self.config.num_classes]));
        {
            let nv = noise.value();
            for i in 0..n {
                for j in 0..self.config.noise_dim {
                    z[[i, j]] = nv[[i, j]];
                }
                z[[i, self.config.noise_dim + labels[i]]] = 1.0;
            }
        }
        let z = ctx.tape().constant(z);
        let h = self.input.forward(ctx, z);
        let mut h = h.reshape(&[n, self.config.base_channels, 4, 4]);
        for block in &mut self.blocks {
            h = block.forward(ctx, h, labels, mode);
        }
        let (h, _) = self.final_bn.forward(ctx, h, mode, false);
        let h = self.final_conv.forward(ctx, h.relu());
        h.tanh()
    }

    /// Deterministic sampling: noise is derived from the seed, the
    /// forward pass runs in evaluation mode, and no gradients are kept.
    pub fn generate(&mut self, labels: &[u8], seed: u64) -> Result<Arr, ModelError> {
        if !self.trained_classes.is_empty() {
            if let Some(&bad) = labels.iter().find(|l| !self.trained_classes.contains(l)) {
                return Err(ModelError::UnknownClass(bad));
            }
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= self.config.num_classes) {
            return Err(ModelError::UnknownClass(bad));
        }
        let n = labels.len();
        if n == 0 {
            return Ok(Arr::zeros(IxDyn(&[0, 1, 32, 32])));
        }
        let noise = sample_noise(n, self.config.noise_dim, seed);
        let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
        let tape = Tape::new();
        let mut ctx = GraphCtx::frozen(&tape);
        let z = tape.constant(noise);
        let out = self.forward(&mut ctx, z, &labels, Mode::Eval);
        Ok(out.value().as_ref().clone())
    }
}

/// Seeded standard-normal noise batch `(n, dim)`.
pub fn sample_noise(n: usize, dim: usize, seed: u64) -> Arr {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Arr::from_shape_simple_fn(IxDyn(&[n, dim]), || StandardNormal.sample(&mut rng))
}

impl Module for GeneratorNet {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter)) {
        self.input.visit_params(&join(prefix, "input"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit_params(&join(prefix, &format!("block{i}")), f);
        }
        self.final_bn.visit_params(&join(prefix, "final_bn"), f);
        self.final_conv.visit_params(&join(prefix, "final_conv"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        self.input.visit_params_mut(&join(prefix, "input"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params_mut(&join(prefix, &format!("block{i}")), f);
        }
        self.final_bn.visit_params_mut(&join(prefix, "final_bn"), f);
        self.final_conv.visit_params_mut(&join(prefix, "final_conv"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &Arr)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit_buffers(&join(prefix, &format!("block{i}")), f);
        }
        self.final_bn.visit_buffers(&join(prefix, "final_bn"), f);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Arr)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_buffers_mut(&join(prefix, &format!("block{i}")), f);
        }
        self.final_bn.visit_buffers_mut(&join(prefix, "final_bn"), f);
    }
}

/// Exact count of trainable scalars.
pub fn count_parameters(model: &dyn Module) -> usize {
    model.num_params()
}

/// Persist a batch-norm snapshot as `<stem>.bin` (little-endian f32
/// mean/variance vectors) plus `<stem>.txt` (layer sizes and offsets).
pub fn save_bn_snapshot(snapshot: &BNSnapshot, stem: &Path) -> Result<(), ModelError> {
    let mut blob: Vec<u8> = Vec::new();
    let mut manifest = format!("bn-snapshot v1\nlayers = {}\n", snapshot.layers.len());
    for (i, (mean, var)) in snapshot.layers.iter().enumerate() {
        let offset = blob.len();
        for &v in mean.iter().chain(var.iter()) {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
        manifest.push_str(&format!("layer {i} channels {} offset {offset}\n", mean.len()));
    }
    let bin = stem.with_extension("bin");
    fs::write(&bin, &blob).map_err(|source| ModelError::Io { path: bin, source })?;
    let txt = stem.with_extension("txt");
    fs::write(&txt, manifest.as_bytes()).map_err(|source| ModelError::Io { path: txt, source })
}

/// Load a snapshot written by [`save_bn_snapshot`].
pub fn load_bn_snapshot(stem: &Path) -> Result<BNSnapshot, ModelError> {
    let txt = stem.with_extension("txt");
    let manifest = fs::read_to_string(&txt).map_err(|source| ModelError::Io {
        path: txt.clone(),
        source,
    })?;
    let bin = stem.with_extension("bin");
    let blob = fs::read(&bin).map_err(|source| ModelError::Io {
        path: bin.clone(),
        source,
    })?;
    let mut lines = manifest.lines();
    if lines.next() != Some("bn-snapshot v1") {
        return Err(ModelError::CheckpointFormat {
            path: txt,
            reason: "missing header".into(),
        });
    }
    let count: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("layers = "))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| ModelError::CheckpointFormat {
            path: txt.clone(),
            reason: "missing layer count".into(),
        })?;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let line = lines.next().ok_or_else(|| ModelError::CheckpointFormat {
            path: txt.clone(),
            reason: "missing layer line".into(),
        })?;
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() != 6 || tok[0] != "layer" || tok[2] != "channels" || tok[4] != "offset" {
            return Err(ModelError::CheckpointFormat {
                path: txt.clone(),
                reason: format!("malformed layer line: {line}"),
            });
        }
        let channels: usize = tok[3].parse().map_err(|_| ModelError::CheckpointFormat {
            path: txt.clone(),
            reason: "bad channel count".into(),
        })?;
        let offset: usize = tok[5].parse().map_err(|_| ModelError::CheckpointFormat {
            path: txt.clone(),
            reason: "bad offset".into(),
        })?;
        if blob.len() < offset + 8 * channels {
            return Err(ModelError::CheckpointFormat {
                path: bin,
                reason: "blob too short".into(),
            });
        }
        let read_vec = |start: usize| -> Array1<f64> {
            Array1::from_iter(
                blob[start..start + channels * 4]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64),
            )
        };
        layers.push((read_vec(offset), read_vec(offset + channels * 4)));
    }
    Ok(BNSnapshot { layers })
}

// ---------------------------------------------------------------- checkpoints

/// Write a model as one little-endian f32 blob (`params.bin`) plus a
/// manifest (`manifest.txt`) of `name shape byte_offset` lines. Batch
/// norm running statistics are included as named arrays.
pub fn save_checkpoint(model: &dyn Module, dir: &Path) -> Result<(), ModelError> {
    fs::create_dir_all(dir).map_err(|source| ModelError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut blob: Vec<u8> = Vec::new();
    let mut manifest = String::from("checkpoint v1\n");
    {
        let mut write_array = |name: &str, arr: &Arr| {
            let offset = blob.len();
            for &v in arr.iter() {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
            let dims: Vec<String> = arr.shape().iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!("{name} {} {offset}\n", dims.join("x")));
        };
        model.visit_params("", &mut |name, p| write_array(name, &p.value));
        model.visit_buffers("", &mut |name, b| write_array(name, b));
    }
    let bin = dir.join("params.bin");
    fs::write(&bin, &blob).map_err(|source| ModelError::Io { path: bin, source })?;
    let man = dir.join("manifest.txt");
    fs::write(&man, manifest.as_bytes()).map_err(|source| ModelError::Io { path: man, source })
}

/// Load a checkpoint written by [`save_checkpoint`] into a model with
/// identical structure.
pub fn load_checkpoint(model: &mut dyn Module, dir: &Path) -> Result<(), ModelError> {
    let man_path = dir.join("manifest.txt");
    let manifest = fs::read_to_string(&man_path).map_err(|source| ModelError::Io {
        path: man_path.clone(),
        source,
    })?;
    let bin_path = dir.join("params.bin");
    let blob = fs::read(&bin_path).map_err(|source| ModelError::Io {
        path: bin_path.clone(),
        source,
    })?;
    let mut lines = manifest.lines();
    if lines.next() != Some("checkpoint v1") {
        return Err(ModelError::CheckpointFormat {
            path: man_path,
            reason: "missing header".into(),
        });
    }
    let mut index: std::collections::HashMap<String, (Vec<usize>, usize)> =
        std::collections::HashMap::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() != 3 {
            return Err(ModelError::CheckpointFormat {
                path: man_path.clone(),
                reason: format!("malformed line: {line}"),
            });
        }
        let shape: Vec<usize> = tok[1]
            .split('x')
            .map(|d| d.parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|_| ModelError::CheckpointFormat {
                path: man_path.clone(),
                reason: format!("bad shape: {}", tok[1]),
            })?;
        let offset: usize = tok[2].parse().map_err(|_| ModelError::CheckpointFormat {
            path: man_path.clone(),
            reason: format!("bad offset: {}", tok[2]),
        })?;
        index.insert(tok[0].to_string(), (shape, offset));
    }

    let mut failure: Option<ModelError> = None;
    {
        let mut read_array = |name: &str, target: &mut Arr| {
            if failure.is_some() {
                return;
            }
            let Some((shape, offset)) = index.get(name) else {
                failure = Some(ModelError::MissingArray(name.to_string()));
                return;
            };
            if target.shape() != shape.as_slice() {
                failure = Some(ModelError::ArrayShape {
                    name: name.to_string(),
                    expected: target.shape().to_vec(),
                    found: shape.clone(),
                });
                return;
            }
            let len: usize = shape.iter().product();
            let end = offset + 4 * len;
            if blob.len() < end {
                failure = Some(ModelError::CheckpointFormat {
                    path: bin_path.clone(),
                    reason: format!("blob too short for {name}"),
                });
                return;
            }
            for (dst, chunk) in target.iter_mut().zip(blob[*offset..end].chunks_exact(4)) {
                *dst = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
            }
        };
        model.visit_params_mut("", &mut |name, p| read_array(name, &mut p.value));
        model.visit_buffers_mut("", &mut |name, b| read_array(name, b));
    }
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use dfgr_autograd::Adam;

    fn desk_classifier(seed: u64) -> ClassifierNet {
        ClassifierNet::new(ClassifierConfig::desk(), seed)
    }

    #[test]
    fn classifier_logit_shape_and_determinism() {
        let mut net = desk_classifier(0);
        let x = Arr::zeros(IxDyn(&[3, 1, 32, 32]));
        let (logits, features) = net.infer(&x).unwrap();
        assert_eq!(logits.dim(), (3, 10));
        assert_eq!(features.dim(), (3, 64));
        // duplicated rows give identical logits in eval mode
        let (again, _) = net.infer(&x).unwrap();
        assert_eq!(logits, again);
    }

    #[test]
    fn classifier_rejects_bad_shape() {
        let mut net = desk_classifier(0);
        let tape = Tape::new();
        let mut ctx = GraphCtx::frozen(&tape);
        let x = tape.constant(Arr::zeros(IxDyn(&[3, 2, 32, 32])));
        assert!(net.forward(&mut ctx, x, Mode::Eval, false).is_err());
    }

    #[test]
    fn snapshot_is_a_deep_copy() {
        let mut net = desk_classifier(1);
        let snap = net.snapshot_bn();
        // fresh model: running means 0, running vars 1
        for (mean, var) in &snap.layers {
            assert!(mean.iter().all(|&m| m == 0.0));
            assert!(var.iter().all(|&v| v == 1.0));
        }
        // one training step mutates the model but not the snapshot
        let tape = Tape::new();
        let mut ctx = GraphCtx::trainable(&tape);
        let x = tape.constant(Arr::from_shape_simple_fn(IxDyn(&[4, 1, 32, 32]), || 0.3));
        let out = net.forward(&mut ctx, x, Mode::Train, false).unwrap();
        let loss = out.logits.sqr().sum_all();
        let grads = tape.backward(loss);
        let mut opt = Adam::new(1e-3, 0.5, 0.999, 1e-8);
        opt.step(&mut net, &ctx, &grads);
        let snap2 = net.snapshot_bn();
        assert_ne!(snap.layers[0].0, snap2.layers[0].0);
        assert!(snap.layers[0].0.iter().all(|&m| m == 0.0));
        // a snapshot equals the stats read back directly
        assert_eq!(snap2, net.snapshot_bn());
    }

    #[test]
    fn capture_order_matches_snapshot_order() {
        let mut net = desk_classifier(2);
        let snap = net.snapshot_bn();
        let tape = Tape::new();
        let mut ctx = GraphCtx::frozen(&tape);
        let x = tape.constant(Arr::from_shape_simple_fn(IxDyn(&[2, 1, 32, 32]), || 0.1));
        let out = net.forward(&mut ctx, x, Mode::Eval, true).unwrap();
        let stats = out.bn_stats.unwrap();
        assert_eq!(stats.len(), snap.num_layers());
        for (s, (mean, _)) in stats.iter().zip(&snap.layers) {
            assert_eq!(s.mean.shape(), vec![mean.len()]);
        }
    }

    #[test]
    fn full_scale_parameter_budgets() {
        let classifier = ClassifierNet::new(ClassifierConfig::full(), 0);
        let n = count_parameters(&classifier);
        assert!(
            (15_700_000..=23_500_000).contains(&n),
            "classifier params {n}"
        );
        let generator = GeneratorNet::new(GeneratorConfig::full(), 0);
        let g = count_parameters(&generator);
        assert!((2_560_000..=3_840_000).contains(&g), "generator params {g}");
    }

    #[test]
    fn generator_output_contract() {
        let mut gen = GeneratorNet::new(GeneratorConfig::desk(), 3);
        let imgs = gen.generate(&[3, 3, 9], 7).unwrap();
        assert_eq!(imgs.shape(), [3, 1, 32, 32]);
        assert!(imgs.iter().all(|&p| (-1.0..=1.0).contains(&p)));
        // deterministic given (parameters, labels, seed)
        let again = gen.generate(&[3, 3, 9], 7).unwrap();
        assert_eq!(imgs, again);
        let different = gen.generate(&[3, 3, 9], 8).unwrap();
        assert_ne!(imgs, different);
    }

    #[test]
    fn generator_empty_and_unknown_labels() {
        let mut gen = GeneratorNet::new(GeneratorConfig::desk(), 3);
        let empty = gen.generate(&[], 0).unwrap();
        assert_eq!(empty.shape(), [0, 1, 32, 32]);
        assert!(gen.generate(&[10], 0).is_err());
        gen.trained_classes = vec![3, 4, 9];
        assert!(gen.generate(&[5], 0).is_err());
        assert!(gen.generate(&[4], 0).is_ok());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = std::env::temp_dir().join(format!("ckpt-{}", std::process::id()));
        let mut net = desk_classifier(5);
        save_checkpoint(&net, &dir).unwrap();
        // perturb, reload, values come back (f32 precision)
        let before: Vec<f64> = {
            let mut v = Vec::new();
            net.visit_params("", &mut |_, p| v.extend(p.value.iter().copied()));
            v
        };
        net.visit_params_mut("", &mut |_, p| p.value += 1.0);
        load_checkpoint(&mut net, &dir).unwrap();
        let after: Vec<f64> = {
            let mut v = Vec::new();
            net.visit_params("", &mut |_, p| v.extend(p.value.iter().copied()));
            v
        };
        for (a, b) in before.iter().zip(&after) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
        }
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn checkpoint_shape_mismatch_detected() {
        let dir = std::env::temp_dir().join(format!("ckpt-mismatch-{}", std::process::id()));
        let net = desk_classifier(5);
        save_checkpoint(&net, &dir).unwrap();
        let mut other = GeneratorNet::new(GeneratorConfig::desk(), 0);
        assert!(load_checkpoint(&mut other, &dir).is_err());
        fs::remove_dir_all(&dir).ok();
    }
}
