//! Timing probe for the desk-scale profile: one classifier epoch step,
//! one replay step, and one generator step, on synthetic 32x32 batches.

use dfgr_core::losses::{self, GeneratorLossParts};
use dfgr_core::models::{sample_noise, ClassifierNet, GeneratorNet};
use dfgr_core::stats::{ClassFeatureStats, FeatureStatStore};
use dfgr_core::trainer::{ModelSizes, TrainConfig};
use dfgr_autograd::{Adam, GraphCtx, Mode, Module, Tape};
use ndarray::{Array1, ArrayD, IxDyn};
use std::time::Instant;

fn main() {
    let sizes = ModelSizes::desk();
    let config = TrainConfig::desk();
    let mut classifier = ClassifierNet::new(sizes.classifier.clone(), 0);
    let mut generator = GeneratorNet::new(sizes.generator.clone(), 0);
    println!(
        "desk classifier params: {}, generator params: {}",
        classifier.num_params(),
        generator.num_params()
    );

    let x = ArrayD::from_shape_simple_fn(IxDyn(&[config.classifier_batch, 1, 32, 32]), || 0.1);
    let labels: Vec<usize> = (0..config.classifier_batch).map(|i| i % 3).collect();
    let mut opt = Adam::new(1e-3, 0.5, 0.999, 1e-8);

    let t0 = Instant::now();
    let reps = 5;
    for _ in 0..reps {
        let tape = Tape::new();
        let mut ctx = GraphCtx::trainable(&tape);
        let xv = tape.constant(x.clone());
        let out = classifier.forward(&mut ctx, xv, Mode::Train, false).unwrap();
        let loss = losses::focal_loss(out.logits, &labels, 2.0).unwrap();
        let grads = tape.backward(loss);
        opt.step(&mut classifier, &ctx, &grads);
    }
    println!("classifier real step: {:.0} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let t0 = Instant::now();
    for i in 0..reps {
        let _ = generator.generate(&vec![3u8; config.classifier_batch], i as u64).unwrap();
    }
    println!("replay generation (batch 128): {:.0} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let mut store = FeatureStatStore::empty(classifier.feature_dim());
    for c in 0..10u8 {
        store
            .insert(ClassFeatureStats {
                label: c,
                mean: Array1::zeros(classifier.feature_dim()),
                variance: Array1::ones(classifier.feature_dim()),
                count: 100,
            })
            .unwrap();
    }
    let snapshot = classifier.snapshot_bn();
    let mut gopt = Adam::new(1e-3, 0.5, 0.999, 1e-8);
    let n = config.generator_batch;
    let glabels: Vec<usize> = (0..n).map(|i| i % 10).collect();
    let glabels_u8: Vec<u8> = glabels.iter().map(|&l| l as u8).collect();
    let batch_indices: Vec<usize> = (0..n).collect();
    let t0 = Instant::now();
    for i in 0..reps {
        let tape = Tape::new();
        let mut gen_ctx = GraphCtx::trainable(&tape);
        let mut cls_ctx = GraphCtx::frozen(&tape);
        let noise = tape.constant(sample_noise(n, generator.noise_dim(), i as u64));
        let images = generator.forward(&mut gen_ctx, noise, &glabels, Mode::Train);
        let out = classifier.forward(&mut cls_ctx, images, Mode::Eval, true).unwrap();
        let merged = dfgr_core::stats::merge_moments(&glabels_u8, &store).unwrap();
        let (ia, ib) = losses::split_for_diversity(&batch_indices, i as u64).unwrap();
        let probs = out.logits.log_softmax().exp();
        let parts = GeneratorLossParts {
            ce: losses::cross_entropy(out.logits, &glabels).unwrap(),
            feat: losses::feature_map_loss(out.features, &merged).unwrap(),
            bn: losses::bn_stat_loss(out.bn_stats.as_ref().unwrap(), &snapshot).unwrap(),
            div: losses::diversity_loss(probs.gather_rows(&ia), probs.gather_rows(&ib)).unwrap(),
            sm: losses::smoothing_loss(images).unwrap(),
        };
        let total = losses::total_generator_loss(&config.loss_weights, &parts).unwrap();
        let grads = tape.backward(total);
        gopt.step(&mut generator, &gen_ctx, &grads);
    }
    println!("generator step (batch 32): {:.0} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);
}
