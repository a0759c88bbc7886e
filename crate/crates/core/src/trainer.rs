//! Two-stage per-task training: classifier (re-)training with optional
//! generated replay, then generator training against the frozen
//! classifier's statistics. Also the naive fine-tuning baseline and
//! evaluation over seen classes.

use crate::dataset::{self, DataError, DatasetSplit, TaskSchedule};
use crate::losses::{self, GeneratorLossParts, LossError, LossWeights};
use crate::models::{
    load_checkpoint, save_bn_snapshot, save_checkpoint, BNSnapshot, ClassifierConfig,
    ClassifierNet, GeneratorConfig, GeneratorNet, ModelError,
};
use crate::replay::{mixing_ratio, ReplayError, ReplayState};
use crate::stats::{FeatureStatBuilder, FeatureStatStore, StatsError};
use dfgr_autograd::{Adam, GraphCtx, Mode, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("task {0} requires a generator and replay state")]
    MissingReplay(usize),
    #[error("the first task cannot use replay")]
    UnexpectedReplay,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Hyper-parameters of both training stages.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub classifier_batch: usize,
    pub generator_batch: usize,
    pub classifier_max_epochs: usize,
    pub generator_max_epochs: usize,
    pub patience_classifier: usize,
    pub patience_generator: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub min_delta: f64,
    pub focal_gamma: f64,
    pub loss_weights: LossWeights,
    pub replay_adjust: bool,
    pub seed: u64,
    /// The generator has no dataset; an "epoch" is this many steps.
    pub steps_per_generator_epoch: usize,
    pub eval_batch: usize,
}

impl TrainConfig {
    /// Reference hyper-parameters: batch 128/32, Adam(1e-4, beta1 0.5),
    /// up to 1000 epochs with patience 50/75.
    pub fn reference() -> Self {
        Self {
            classifier_batch: 128,
            generator_batch: 32,
            classifier_max_epochs: 1000,
            generator_max_epochs: 1000,
            patience_classifier: 50,
            patience_generator: 75,
            learning_rate: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            min_delta: 1e-4,
            focal_gamma: 2.0,
            loss_weights: LossWeights::full(),
            replay_adjust: true,
            seed: 0,
            steps_per_generator_epoch: 100,
            eval_batch: 256,
        }
    }

    /// CPU-scale profile: 30 classifier epochs (patience 10), 1500
    /// generator steps per task, and a learning rate tuned for the
    /// short budget.
    pub fn desk() -> Self {
        Self {
            classifier_max_epochs: 30,
            patience_classifier: 10,
            generator_max_epochs: 15,
            patience_generator: 75,
            learning_rate: 2e-3,
            ..Self::reference()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.classifier_batch == 0 || self.generator_batch == 0 || self.eval_batch == 0 {
            return Err(TrainError::Config("batch sizes must be >= 1".into()));
        }
        if self.generator_batch < 3 {
            return Err(TrainError::Config(
                "generator batch must be >= 3 for the diversity split".into(),
            ));
        }
        if self.patience_classifier == 0 || self.patience_generator == 0 {
            return Err(TrainError::Config("patience must be >= 1".into()));
        }
        if self.steps_per_generator_epoch == 0 {
            return Err(TrainError::Config(
                "steps_per_generator_epoch must be >= 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::Config("learning rate must be > 0".into()));
        }
        if self.focal_gamma < 0.0 {
            return Err(TrainError::Config("focal gamma must be >= 0".into()));
        }
        self.loss_weights.validate()?;
        Ok(())
    }

    fn adam(&self) -> Adam {
        Adam::new(
            self.learning_rate,
            self.adam_beta1,
            self.adam_beta2,
            self.adam_eps,
        )
    }
}

/// Model widths for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSizes {
    pub classifier: ClassifierConfig,
    pub generator: GeneratorConfig,
}

impl ModelSizes {
    pub fn full() -> Self {
        Self {
            classifier: ClassifierConfig::full(),
            generator: GeneratorConfig::full(),
        }
    }

    pub fn desk() -> Self {
        Self {
            classifier: ClassifierConfig::desk(),
            generator: GeneratorConfig::desk(),
        }
    }
}

/// Minimize-mode early stopping: stop after `patience` epochs without an
/// improvement of more than `min_delta`.
#[derive(Debug, Clone)]
pub struct EarlyStop {
    best: f64,
    since_best: usize,
    patience: usize,
    min_delta: f64,
}

impl EarlyStop {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self {
            best: f64::INFINITY,
            since_best: 0,
            patience,
            min_delta,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// Feed an epoch value; returns true when training should stop.
    pub fn update(&mut self, value: f64) -> bool {
        if value < self.best - self.min_delta {
            self.best = value;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        self.since_best >= self.patience
    }
}

/// Per-task outcome: accuracy over the classes seen so far.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskResult {
    pub task_index: usize,
    pub per_class_accuracy: BTreeMap<u8, f64>,
    pub average_accuracy: f64,
    pub wall_time: Duration,
    pub classifier_epochs: usize,
    pub generator_epochs: usize,
    pub checkpoints: Vec<PathBuf>,
}

/// Stable mix of a base seed with loop coordinates, so every sampling
/// site draws from its own stream.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut h = base ^ 0x9e3779b97f4a7c15;
    for &p in parts {
        h ^= p
            .wrapping_add(0x9e3779b97f4a7c15)
            .wrapping_add(h << 6)
            .wrapping_add(h >> 2);
        h = h.wrapping_mul(0xbf58476d1ce4e5b9);
        h ^= h >> 27;
    }
    h
}

/// Argmax over the seen classes only; other logits are ignored.
fn restricted_argmax(row: &[f64], seen: &[u8]) -> u8 {
    let mut best = seen[0];
    let mut best_v = f64::NEG_INFINITY;
    for &c in seen {
        let v = row[c as usize];
        if v > best_v {
            best_v = v;
            best = c;
        }
    }
    best
}

/// Per-class and average accuracy of the classifier on a test split,
/// with predictions restricted to the seen classes.
pub fn evaluate(
    classifier: &mut ClassifierNet,
    test_split: &DatasetSplit,
    seen_classes: &[u8],
    eval_batch: usize,
) -> Result<(BTreeMap<u8, f64>, f64), TrainError> {
    assert!(!seen_classes.is_empty(), "evaluate needs at least one class");
    let mut correct: BTreeMap<u8, usize> = BTreeMap::new();
    let mut total: BTreeMap<u8, usize> = BTreeMap::new();
    for batch in dataset::sequential_batches(test_split, eval_batch)? {
        let relevant: Vec<usize> = batch
            .labels
            .iter()
            .enumerate()
            .filter(|(_, l)| seen_classes.contains(l))
            .map(|(i, _)| i)
            .collect();
        if relevant.is_empty() {
            continue;
        }
        let (logits, _) = classifier.infer(&batch.pixels)?;
        for &i in &relevant {
            let label = batch.labels[i];
            let row = logits.row(i);
            let pred = restricted_argmax(row.as_slice().unwrap(), seen_classes);
            *total.entry(label).or_insert(0) += 1;
            if pred == label {
                *correct.entry(label).or_insert(0) += 1;
            }
        }
    }
    let mut per_class = BTreeMap::new();
    for (&label, &n) in &total {
        let c = correct.get(&label).copied().unwrap_or(0);
        per_class.insert(label, c as f64 / n as f64);
    }
    let average = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    };
    Ok((per_class, average))
}

/// Replay inputs for classifier re-training on tasks after the first.
pub struct ReplayContext<'a> {
    pub generator: &'a mut GeneratorNet,
    pub state: &'a mut ReplayState,
    pub previous_classes: &'a [u8],
    /// Per-update log lines (step, probabilities, EMA losses).
    pub log: Option<&'a mut String>,
}

/// Outcome of the classifier stage.
#[derive(Debug)]
pub struct ClassifierStageStats {
    pub epochs_run: usize,
    pub final_epoch_loss: f64,
}

/// Train (or re-train) the classifier on one task's real data, mixing
/// in generated replay when `replay` is provided. One optimization step
/// sees one real batch under focal loss and, when replaying, one
/// generated batch under cross-entropy, combined by the class-count
/// mixing ratio.
pub fn train_classifier_task(
    classifier: &mut ClassifierNet,
    task_split: &DatasetSplit,
    mut replay: Option<ReplayContext<'_>>,
    config: &TrainConfig,
    task_index: usize,
) -> Result<ClassifierStageStats, TrainError> {
    config.validate()?;
    if task_index > 0 && replay.is_none() {
        return Err(TrainError::MissingReplay(task_index));
    }
    if task_index == 0 && replay.is_some() {
        return Err(TrainError::UnexpectedReplay);
    }
    let current_classes = task_split.classes();
    let m = match &replay {
        Some(r) => mixing_ratio(r.previous_classes, &current_classes)?,
        None => 0.0,
    };
    let mut opt = config.adam();
    let mut stop = EarlyStop::new(config.patience_classifier, config.min_delta);
    let mut epochs_run = 0;
    let mut final_epoch_loss = f64::NAN;
    let mut global_step: u64 = 0;
    for epoch in 0..config.classifier_max_epochs {
        let shuffle_seed = derive_seed(config.seed, &[task_index as u64, epoch as u64, 1]);
        let mut epoch_loss = 0.0;
        let mut steps = 0;
        for batch in dataset::iterate_batches(task_split, config.classifier_batch, shuffle_seed)? {
            let tape = Tape::new();
            let mut ctx = GraphCtx::trainable(&tape);
            let x = tape.constant(batch.pixels.clone());
            let out = classifier.forward(&mut ctx, x, Mode::Train, false)?;
            let fl = losses::focal_loss(out.logits, &batch.labels_usize(), config.focal_gamma)?;

            let total;
            let mut replay_feedback: Option<(Vec<f64>, Vec<u8>)> = None;
            if let Some(r) = replay.as_mut() {
                let label_seed = derive_seed(config.seed, &[task_index as u64, global_step, 2]);
                let noise_seed = derive_seed(config.seed, &[task_index as u64, global_step, 3]);
                let labels = r.state.sample_labels(config.classifier_batch, label_seed);
                let images = r.generator.generate(&labels, noise_seed)?;
                let gx = tape.constant(images);
                let gout = classifier.forward(&mut ctx, gx, Mode::Train, false)?;
                let labels_usize: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
                let ce_vec = losses::cross_entropy_per_sample(gout.logits, &labels_usize)?;
                let ce = ce_vec.mean_all();
                total = losses::total_classifier_loss(fl, ce, m)?;
                if config.replay_adjust {
                    let per_sample: Vec<f64> = ce_vec.value().iter().copied().collect();
                    replay_feedback = Some((per_sample, labels));
                }
            } else {
                total = losses::total_classifier_loss(fl, fl.mul_scalar(0.0), m)?;
            }

            epoch_loss += total.scalar_value();
            steps += 1;
            let grads = tape.backward(total);
            opt.step(classifier, &ctx, &grads);

            if let Some((per_sample, labels)) = replay_feedback {
                let r = replay.as_mut().unwrap();
                r.state.update(&per_sample, &labels)?;
                if let Some(log) = r.log.as_mut() {
                    let probs: Vec<String> = r
                        .state
                        .classes()
                        .iter()
                        .map(|c| format!("{}:{:.6}", c, r.state.prob(*c).unwrap()))
                        .collect();
                    let emas: Vec<String> = r
                        .state
                        .classes()
                        .iter()
                        .map(|c| format!("{}:{:.6}", c, r.state.ema(*c).unwrap()))
                        .collect();
                    let _ = writeln!(
                        log,
                        "step {global_step} probs {} ema {}",
                        probs.join(" "),
                        emas.join(" ")
                    );
                }
            }
            global_step += 1;
        }
        epochs_run = epoch + 1;
        final_epoch_loss = epoch_loss / steps.max(1) as f64;
        if stop.update(final_epoch_loss) {
            break;
        }
    }
    Ok(ClassifierStageStats {
        epochs_run,
        final_epoch_loss,
    })
}

/// Outcome of the generator stage.
#[derive(Debug)]
pub struct GeneratorStageStats {
    pub epochs_run: usize,
    pub final_epoch_loss: f64,
}

/// Train the generator against the frozen classifier. Labels are drawn
/// uniformly over the seen classes; every step applies the weighted
/// total of cross-entropy, feature-map, batch-norm, diversity, and
/// smoothing terms. Only generator parameters are updated.
pub fn train_generator(
    generator: &mut GeneratorNet,
    classifier: &mut ClassifierNet,
    snapshot: &BNSnapshot,
    store: &FeatureStatStore,
    seen_classes: &[u8],
    config: &TrainConfig,
    task_index: usize,
) -> Result<GeneratorStageStats, TrainError> {
    config.validate()?;
    if seen_classes.is_empty() {
        return Err(TrainError::Config("no classes to generate".into()));
    }
    for &c in seen_classes {
        if store.get(c).is_none() {
            return Err(TrainError::Stats(StatsError::UnknownClass(c)));
        }
    }
    let mut opt = config.adam();
    let mut stop = EarlyStop::new(config.patience_generator, config.min_delta);
    let mut epochs_run = 0;
    let mut final_epoch_loss = f64::NAN;
    let n = config.generator_batch;
    let batch_indices: Vec<usize> = (0..n).collect();
    let mut global_step: u64 = 0;
    for epoch in 0..config.generator_max_epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..config.steps_per_generator_epoch {
            let label_seed = derive_seed(config.seed, &[task_index as u64, global_step, 10]);
            let noise_seed = derive_seed(config.seed, &[task_index as u64, global_step, 11]);
            let split_seed = derive_seed(config.seed, &[task_index as u64, global_step, 12]);
            let mut rng = ChaCha8Rng::seed_from_u64(label_seed);
            let labels: Vec<u8> = (0..n)
                .map(|_| seen_classes[rng.random_range(0..seen_classes.len())])
                .collect();
            let labels_usize: Vec<usize> = labels.iter().map(|&l| l as usize).collect();

            let tape = Tape::new();
            let mut gen_ctx = GraphCtx::trainable(&tape);
            let mut cls_ctx = GraphCtx::frozen(&tape);
            let noise = tape.constant(crate::models::sample_noise(
                n,
                generator.noise_dim(),
                noise_seed,
            ));
            let images = generator.forward(&mut gen_ctx, noise, &labels_usize, Mode::Train);
            let out = classifier.forward(&mut cls_ctx, images, Mode::Eval, true)?;

            let merged = crate::stats::merge_moments(&labels, store)?;
            let (idx_a, idx_b) = losses::split_for_diversity(&batch_indices, split_seed)?;
            let probs = out.logits.log_softmax().exp();
            let parts = GeneratorLossParts {
                ce: losses::cross_entropy(out.logits, &labels_usize)?,
                feat: losses::feature_map_loss(out.features, &merged)?,
                bn: losses::bn_stat_loss(out.bn_stats.as_ref().unwrap(), snapshot)?,
                div: losses::diversity_loss(probs.gather_rows(&idx_a), probs.gather_rows(&idx_b))?,
                sm: losses::smoothing_loss(images)?,
            };
            let total = losses::total_generator_loss(&config.loss_weights, &parts)?;
            epoch_loss += total.scalar_value();
            let grads = tape.backward(total);
            opt.step(generator, &gen_ctx, &grads);
            global_step += 1;
        }
        epochs_run = epoch + 1;
        final_epoch_loss = epoch_loss / config.steps_per_generator_epoch as f64;
        if stop.update(final_epoch_loss) {
            break;
        }
    }
    generator.trained_classes = seen_classes.to_vec();
    Ok(GeneratorStageStats {
        epochs_run,
        final_epoch_loss,
    })
}

/// Evaluation-mode pass over a split collecting per-class feature moments.
pub fn collect_feature_stats(
    classifier: &mut ClassifierNet,
    split: &DatasetSplit,
    batch: usize,
) -> Result<FeatureStatStore, TrainError> {
    let mut builder = FeatureStatBuilder::new(classifier.feature_dim());
    for batch in dataset::sequential_batches(split, batch)? {
        let (_, features) = classifier.infer(&batch.pixels)?;
        builder.accumulate(&features.view(), &batch.labels)?;
    }
    Ok(builder.finalize())
}

fn write_file(path: &Path, contents: &str) -> Result<(), TrainError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|source| TrainError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, contents).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Serialize a task result as a flat structured-text record.
pub fn save_task_result(
    result: &TaskResult,
    config_hash: u64,
    path: &Path,
) -> Result<(), TrainError> {
    let mut text = String::from("task_result v1\n");
    let _ = writeln!(text, "task_index = {}", result.task_index);
    let _ = writeln!(text, "config_hash = {config_hash:016x}");
    let _ = writeln!(text, "wall_time_secs = {:.3}", result.wall_time.as_secs_f64());
    let _ = writeln!(text, "classifier_epochs = {}", result.classifier_epochs);
    let _ = writeln!(text, "generator_epochs = {}", result.generator_epochs);
    let _ = writeln!(text, "average_accuracy = {:.6}", result.average_accuracy);
    for (label, acc) in &result.per_class_accuracy {
        let _ = writeln!(text, "class_{label} = {acc:.6}");
    }
    write_file(path, &text)
}

/// Parse a record written by [`save_task_result`].
pub fn load_task_result(path: &Path) -> Result<TaskResult, TrainError> {
    let text = fs::read_to_string(path).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut lines = text.lines();
    if lines.next() != Some("task_result v1") {
        return Err(TrainError::Config(format!(
            "{} is not a task result record",
            path.display()
        )));
    }
    let mut result = TaskResult {
        task_index: 0,
        per_class_accuracy: BTreeMap::new(),
        average_accuracy: 0.0,
        wall_time: Duration::ZERO,
        classifier_epochs: 0,
        generator_epochs: 0,
        checkpoints: Vec::new(),
    };
    for line in lines {
        let Some((key, value)) = line.split_once(" = ") else {
            continue;
        };
        match key {
            "task_index" => result.task_index = value.parse().unwrap_or(0),
            "wall_time_secs" => {
                result.wall_time = Duration::from_secs_f64(value.parse().unwrap_or(0.0))
            }
            "classifier_epochs" => result.classifier_epochs = value.parse().unwrap_or(0),
            "generator_epochs" => result.generator_epochs = value.parse().unwrap_or(0),
            "average_accuracy" => result.average_accuracy = value.parse().unwrap_or(0.0),
            _ => {
                if let Some(label) = key.strip_prefix("class_") {
                    if let (Ok(label), Ok(acc)) = (label.parse::<u8>(), value.parse::<f64>()) {
                        result.per_class_accuracy.insert(label, acc);
                    }
                }
            }
        }
    }
    Ok(result)
}

fn persist_task_artifacts(
    run_dir: &Path,
    task_index: usize,
    classifier: &ClassifierNet,
    generator: Option<&GeneratorNet>,
    store: &FeatureStatStore,
    snapshot: Option<&BNSnapshot>,
    replay_log: Option<&str>,
) -> Result<Vec<PathBuf>, TrainError> {
    let task_dir = run_dir.join(format!("task_{task_index}"));
    fs::create_dir_all(&task_dir).map_err(|source| TrainError::Io {
        path: task_dir.clone(),
        source,
    })?;
    let mut paths = Vec::new();
    let cls_dir = task_dir.join("classifier");
    save_checkpoint(classifier, &cls_dir)?;
    paths.push(cls_dir);
    if let Some(generator) = generator {
        let gen_dir = task_dir.join("generator");
        save_checkpoint(generator, &gen_dir)?;
        paths.push(gen_dir);
    }
    let stats_stem = task_dir.join("feature_stats");
    crate::stats::save_store(store, &stats_stem)?;
    paths.push(stats_stem);
    if let Some(snapshot) = snapshot {
        let snap_stem = task_dir.join("bn_snapshot");
        save_bn_snapshot(snapshot, &snap_stem)?;
        paths.push(snap_stem);
    }
    if let Some(log) = replay_log {
        let log_path = task_dir.join("replay_log.txt");
        write_file(&log_path, log)?;
        paths.push(log_path);
    }
    Ok(paths)
}

/// The full per-task loop: (re-)train the classifier, refresh feature
/// statistics for the current task's classes (older classes keep their
/// stored moments), snapshot batch-norm state, train a fresh generator
/// over all seen classes, and evaluate on the test split. Only the
/// generator, the snapshot, and the statistic store carry knowledge
/// across tasks besides the live classifier itself.
pub fn run_schedule(
    train_split: &DatasetSplit,
    test_split: &DatasetSplit,
    schedule: &TaskSchedule,
    sizes: &ModelSizes,
    config: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<Vec<TaskResult>, TrainError> {
    config.validate()?;
    let task_splits = dataset::apply_schedule(train_split, schedule, config.seed)?;
    let mut classifier = ClassifierNet::new(
        sizes.classifier.clone(),
        derive_seed(config.seed, &[0xC1A5]),
    );
    let mut store = FeatureStatStore::empty(classifier.feature_dim());
    let mut generator: Option<GeneratorNet> = None;
    let mut results = Vec::new();

    for (t, task_split) in task_splits.iter().enumerate() {
        let start = Instant::now();
        let current = schedule.classes_of_task(t);
        let seen = schedule.classes_up_to(t);
        let mut replay_log = String::new();

        let cls_stats = if t == 0 {
            train_classifier_task(&mut classifier, task_split, None, config, t)?
        } else {
            let previous = schedule.classes_up_to(t - 1);
            let mut state = ReplayState::new(&previous)?;
            let generator = generator.as_mut().ok_or(TrainError::MissingReplay(t))?;
            let ctx = ReplayContext {
                generator,
                state: &mut state,
                previous_classes: &previous,
                log: config.replay_adjust.then_some(&mut replay_log),
            };
            train_classifier_task(&mut classifier, task_split, Some(ctx), config, t)?
        };

        // refresh stats for the classes that have real data right now;
        // previous classes keep their stored moments
        let fresh = collect_feature_stats(&mut classifier, task_split, config.eval_batch)?;
        store = store.updated_with(&fresh);
        for &c in &current {
            debug_assert!(store.get(c).is_some());
        }

        let snapshot = classifier.snapshot_bn();
        let mut gen = GeneratorNet::new(
            sizes.generator.clone(),
            derive_seed(config.seed, &[0x6E4, t as u64]),
        );
        let gen_stats = train_generator(
            &mut gen,
            &mut classifier,
            &snapshot,
            &store,
            &seen,
            config,
            t,
        )?;
        generator = Some(gen);

        let (per_class, average) = evaluate(&mut classifier, test_split, &seen, config.eval_batch)?;
        let mut result = TaskResult {
            task_index: t,
            per_class_accuracy: per_class,
            average_accuracy: average,
            wall_time: start.elapsed(),
            classifier_epochs: cls_stats.epochs_run,
            generator_epochs: gen_stats.epochs_run,
            checkpoints: Vec::new(),
        };
        if let Some(dir) = run_dir {
            let mut paths = persist_task_artifacts(
                dir,
                t,
                &classifier,
                generator.as_ref(),
                &store,
                Some(&snapshot),
                (!replay_log.is_empty()).then_some(replay_log.as_str()),
            )?;
            let record = dir.join(format!("task_{t}")).join("result.txt");
            save_task_result(&result, config_hash(config), &record)?;
            paths.push(record);
            result.checkpoints = paths;
        }
        results.push(result);
    }
    Ok(results)
}

/// Plain cross-entropy fine-tuning over the same schedule: no generator,
/// no replay, no focal re-weighting. The catastrophic-forgetting floor.
pub fn naive_baseline(
    train_split: &DatasetSplit,
    test_split: &DatasetSplit,
    schedule: &TaskSchedule,
    classifier_config: &ClassifierConfig,
    config: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<Vec<TaskResult>, TrainError> {
    config.validate()?;
    let task_splits = dataset::apply_schedule(train_split, schedule, config.seed)?;
    let mut classifier = ClassifierNet::new(
        classifier_config.clone(),
        derive_seed(config.seed, &[0xC1A5]),
    );
    let mut results = Vec::new();
    for (t, task_split) in task_splits.iter().enumerate() {
        let start = Instant::now();
        let mut opt = config.adam();
        let mut stop = EarlyStop::new(config.patience_classifier, config.min_delta);
        let mut epochs_run = 0;
        for epoch in 0..config.classifier_max_epochs {
            let shuffle_seed = derive_seed(config.seed, &[t as u64, epoch as u64, 1]);
            let mut epoch_loss = 0.0;
            let mut steps = 0;
            for batch in
                dataset::iterate_batches(task_split, config.classifier_batch, shuffle_seed)?
            {
                let tape = Tape::new();
                let mut ctx = GraphCtx::trainable(&tape);
                let x = tape.constant(batch.pixels.clone());
                let out = classifier.forward(&mut ctx, x, Mode::Train, false)?;
                let loss = losses::cross_entropy(out.logits, &batch.labels_usize())?;
                epoch_loss += loss.scalar_value();
                steps += 1;
                let grads = tape.backward(loss);
                opt.step(&mut classifier, &ctx, &grads);
            }
            epochs_run = epoch + 1;
            if stop.update(epoch_loss / steps.max(1) as f64) {
                break;
            }
        }
        let seen = schedule.classes_up_to(t);
        let (per_class, average) = evaluate(&mut classifier, test_split, &seen, config.eval_batch)?;
        let mut result = TaskResult {
            task_index: t,
            per_class_accuracy: per_class,
            average_accuracy: average,
            wall_time: start.elapsed(),
            classifier_epochs: epochs_run,
            generator_epochs: 0,
            checkpoints: Vec::new(),
        };
        if let Some(dir) = run_dir {
            let task_dir = dir.join(format!("task_{t}"));
            let cls_dir = task_dir.join("classifier");
            save_checkpoint(&classifier, &cls_dir)?;
            let record = task_dir.join("result.txt");
            save_task_result(&result, config_hash(config), &record)?;
            result.checkpoints = vec![cls_dir, record];
        }
        results.push(result);
    }
    Ok(results)
}

/// FNV-style hash of the configuration for traceability in run records.
pub fn config_hash(config: &TrainConfig) -> u64 {
    let text = format!("{config:?}");
    let mut h: u64 = 0xcbf29ce484222325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Restore the classifier and generator persisted for one task of a run.
pub fn load_task_models(
    run_dir: &Path,
    task_index: usize,
    sizes: &ModelSizes,
) -> Result<(ClassifierNet, GeneratorNet), TrainError> {
    let task_dir = run_dir.join(format!("task_{task_index}"));
    let mut classifier = ClassifierNet::new(sizes.classifier.clone(), 0);
    load_checkpoint(&mut classifier, &task_dir.join("classifier"))?;
    let mut generator = GeneratorNet::new(sizes.generator.clone(), 0);
    load_checkpoint(&mut generator, &task_dir.join("generator"))?;
    Ok((classifier, generator))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ClassSpec;
    use dfgr_autograd::Module;
    use ndarray::Array4;

    fn toy_split(per_class: usize, classes: &[u8], side: usize) -> DatasetSplit {
        // class-dependent blobs: class c has a bright patch at a
        // c-dependent location, so even tiny models can separate them
        let n = per_class * classes.len();
        let mut images = Array4::<f32>::zeros((n, 1, side, side));
        let mut labels = Vec::with_capacity(n);
        let mut k = 0;
        for &c in classes {
            for i in 0..per_class {
                let cy = 4 + (c as usize * 5) % (side - 8);
                let cx = 4 + (c as usize * 3 + i % 2) % (side - 8);
                for dy in 0..4 {
                    for dx in 0..4 {
                        images[[k, 0, cy + dy, cx + dx]] = 1.0;
                    }
                }
                images[[k, 0, (cy + 7) % side, (cx + 11) % side]] = 0.5;
                labels.push(c);
                k += 1;
            }
        }
        let images = images.mapv(|v| v * 2.0 - 1.0);
        DatasetSplit::new(images, labels).unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            classifier_batch: 16,
            generator_batch: 8,
            classifier_max_epochs: 25,
            generator_max_epochs: 1,
            patience_classifier: 8,
            patience_generator: 4,
            learning_rate: 5e-3,
            steps_per_generator_epoch: 10,
            eval_batch: 64,
            seed: 7,
            ..TrainConfig::reference()
        }
    }

    fn tiny_sizes() -> ModelSizes {
        ModelSizes {
            classifier: ClassifierConfig {
                num_classes: 10,
                stem_channels: 4,
                stem_stride: 2,
                stage_channels: [4, 6, 8, 8],
                stage_strides: [2, 2, 2, 1],
                blocks_per_stage: [1, 1, 1, 1],
                feature_dim: 16,
            },
            generator: GeneratorConfig {
                num_classes: 10,
                noise_dim: 8,
                base_channels: 8,
                block_channels: [6, 4, 3],
                double_conv: false,
            },
        }
    }

    #[test]
    fn early_stop_patience_semantics() {
        let mut s = EarlyStop::new(2, 1e-4);
        assert!(!s.update(1.0));
        assert!(!s.update(0.5)); // improvement
        assert!(!s.update(0.5)); // no improvement (1)
        assert!(s.update(0.5)); // no improvement (2) -> stop
        assert_eq!(s.best(), 0.5);
    }

    #[test]
    fn early_stop_min_delta_counts_tiny_gains_as_stagnation() {
        let mut s = EarlyStop::new(1, 1e-2);
        assert!(!s.update(1.0));
        assert!(s.update(1.0 - 1e-3));
    }

    #[test]
    fn zero_epoch_budget_leaves_classifier_unchanged() {
        let split = toy_split(8, &[1, 2], 32);
        let mut net = ClassifierNet::new(tiny_sizes().classifier, 5);
        let before: Vec<f64> = {
            let mut v = Vec::new();
            net.visit_params("", &mut |_, p| v.extend(p.value.iter().copied()));
            v
        };
        let config = TrainConfig {
            classifier_max_epochs: 0,
            ..tiny_config()
        };
        let stats = train_classifier_task(&mut net, &split, None, &config, 0).unwrap();
        assert_eq!(stats.epochs_run, 0);
        let after: Vec<f64> = {
            let mut v = Vec::new();
            net.visit_params("", &mut |_, p| v.extend(p.value.iter().copied()));
            v
        };
        assert_eq!(before, after);
    }

    #[test]
    fn replay_is_required_after_first_task() {
        let split = toy_split(4, &[1], 32);
        let mut net = ClassifierNet::new(tiny_sizes().classifier, 5);
        let err = train_classifier_task(&mut net, &split, None, &tiny_config(), 1).unwrap_err();
        assert!(matches!(err, TrainError::MissingReplay(1)));
    }

    #[test]
    fn generator_training_freezes_classifier() {
        let sizes = tiny_sizes();
        let split = toy_split(6, &[0, 1], 32);
        let mut classifier = ClassifierNet::new(sizes.classifier.clone(), 2);
        let store = collect_feature_stats(&mut classifier, &split, 16).unwrap();
        let snapshot = classifier.snapshot_bn();
        let before: Vec<f64> = {
            let mut v = Vec::new();
            classifier.visit_params("", &mut |_, p| v.extend(p.value.iter().copied()));
            classifier.visit_buffers("", &mut |_, b| v.extend(b.iter().copied()));
            v
        };
        let mut generator = GeneratorNet::new(sizes.generator, 2);
        let gen_before: Vec<f64> = {
            let mut v = Vec::new();
            generator.visit_params("", &mut |_, p| v.extend(p.value.iter().copied()));
            v
        };
        train_generator(
            &mut generator,
            &mut classifier,
            &snapshot,
            &store,
            &[0, 1],
            &tiny_config(),
            0,
        )
        .unwrap();
        let after: Vec<f64> = {
            let mut v = Vec::new();
            classifier.visit_params("", &mut |_, p| v.extend(p.value.iter().copied()));
            classifier.visit_buffers("", &mut |_, b| v.extend(b.iter().copied()));
            v
        };
        // classifier parameters and buffers bitwise identical
        assert_eq!(before, after);
        // generator parameters moved
        let gen_after: Vec<f64> = {
            let mut v = Vec::new();
            generator.visit_params("", &mut |_, p| v.extend(p.value.iter().copied()));
            v
        };
        assert_ne!(gen_before, gen_after);
        assert_eq!(generator.trained_classes, vec![0, 1]);
    }

    #[test]
    fn schedule_run_produces_growing_results() {
        let schedule = TaskSchedule::new(vec![
            vec![ClassSpec::full(0), ClassSpec::full(1)],
            vec![ClassSpec::full(2)],
        ])
        .unwrap();
        let train = toy_split(12, &[0, 1, 2], 32);
        let test = toy_split(6, &[0, 1, 2], 32);
        let dir = std::env::temp_dir().join(format!("sched-run-{}", std::process::id()));
        let results = run_schedule(
            &train,
            &test,
            &schedule,
            &tiny_sizes(),
            &tiny_config(),
            Some(&dir),
        )
        .unwrap();
        assert_eq!(results.len(), 2);
        assert_eq!(results[0].per_class_accuracy.len(), 2);
        assert_eq!(results[1].per_class_accuracy.len(), 3);
        // persisted artifacts exist and records round-trip
        let rec = load_task_result(&dir.join("task_1").join("result.txt")).unwrap();
        assert_eq!(rec.task_index, 1);
        assert_eq!(rec.per_class_accuracy.len(), 3);
        assert!((rec.average_accuracy - results[1].average_accuracy).abs() < 1e-6);
        let (c, g) = load_task_models(&dir, 1, &tiny_sizes()).unwrap();
        assert_eq!(c.num_classes(), 10);
        assert_eq!(g.config.noise_dim, 8);
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn determinism_same_seed_same_results() {
        let schedule = TaskSchedule::new(vec![
            vec![ClassSpec::full(0)],
            vec![ClassSpec::full(1)],
        ])
        .unwrap();
        let train = toy_split(10, &[0, 1], 32);
        let test = toy_split(5, &[0, 1], 32);
        let run = || {
            run_schedule(
                &train,
                &test,
                &schedule,
                &tiny_sizes(),
                &tiny_config(),
                None,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.per_class_accuracy, y.per_class_accuracy);
            assert_eq!(x.average_accuracy, y.average_accuracy);
        }
    }

    #[test]
    fn single_task_schedule_is_supervised_training() {
        let schedule = TaskSchedule::new(vec![vec![
            ClassSpec::full(0),
            ClassSpec::full(1),
        ]])
        .unwrap();
        let train = toy_split(16, &[0, 1], 32);
        let test = toy_split(8, &[0, 1], 32);
        let results = run_schedule(
            &train,
            &test,
            &schedule,
            &tiny_sizes(),
            &tiny_config(),
            None,
        )
        .unwrap();
        assert_eq!(results.len(), 1);
        // separable toy data: supervised training should be near-perfect
        assert!(
            results[0].average_accuracy > 0.9,
            "accuracy {}",
            results[0].average_accuracy
        );
    }

    #[test]
    fn naive_baseline_runs_without_generator() {
        let schedule = TaskSchedule::new(vec![
            vec![ClassSpec::full(0)],
            vec![ClassSpec::full(1)],
        ])
        .unwrap();
        let train = toy_split(10, &[0, 1], 32);
        let test = toy_split(5, &[0, 1], 32);
        let results = naive_baseline(
            &train,
            &test,
            &schedule,
            &tiny_sizes().classifier,
            &tiny_config(),
            None,
        )
        .unwrap();
        assert_eq!(results.len(), 2);
        assert!(results.iter().all(|r| r.generator_epochs == 0));
    }

    #[test]
    fn task_result_record_round_trip() {
        let mut per_class = BTreeMap::new();
        per_class.insert(3u8, 0.9975);
        per_class.insert(4u8, 0.5);
        let result = TaskResult {
            task_index: 2,
            per_class_accuracy: per_class,
            average_accuracy: 0.74875,
            wall_time: Duration::from_secs_f64(12.5),
            classifier_epochs: 17,
            generator_epochs: 15,
            checkpoints: Vec::new(),
        };
        let path = std::env::temp_dir().join(format!("task-result-{}.txt", std::process::id()));
        save_task_result(&result, 0xabcd, &path).unwrap();
        let loaded = load_task_result(&path).unwrap();
        assert_eq!(loaded.task_index, 2);
        assert_eq!(loaded.per_class_accuracy[&3], 0.9975);
        assert!((loaded.average_accuracy - 0.74875).abs() < 1e-9);
        assert_eq!(loaded.classifier_epochs, 17);
        fs::remove_file(&path).ok();
    }
}
