//! Generator and classifier loss functions.
//!
//! All losses are pure functions of tape variables, so they are
//! differentiable end-to-end and reusable both for training and for
//! plain evaluation (wrap inputs as constants). Reductions over a batch
//! are means; norms are Euclidean.

use dfgr_autograd::nn::BnBatchStats;
use dfgr_autograd::{Arr, Var};
use dfgr_autograd::conv;
use ndarray::{Array1, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::models::BNSnapshot;

/// Probability floor applied inside KL terms so one-hot outputs stay finite.
pub const KL_CLAMP: f64 = 1e-8;

/// Row-sum slack accepted when validating probability inputs.
const PROB_SUM_TOL: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("probability row {row} sums to {sum}, not 1")]
    NotNormalized { row: usize, sum: f64 },
    #[error("batch of {n} is too small, need at least {min}")]
    BatchTooSmall { n: usize, min: usize },
    #[error("mixing ratio {0} outside [0, 1]")]
    InvalidMixingRatio(f64),
    #[error("loss weight {name} = {value} must be finite and >= 0")]
    InvalidWeight { name: &'static str, value: f64 },
}

/// Coefficients of the combined generator loss: cross-entropy, feature
/// map, batch-norm, diversity, and smoothing weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub delta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma_div: f64,
    pub epsilon: f64,
}

impl LossWeights {
    pub fn new(
        delta: f64,
        alpha: f64,
        beta: f64,
        gamma_div: f64,
        epsilon: f64,
    ) -> Result<Self, LossError> {
        let w = Self {
            delta,
            alpha,
            beta,
            gamma_div,
            epsilon,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), LossError> {
        for (name, value) in [
            ("delta", self.delta),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma_div", self.gamma_div),
            ("epsilon", self.epsilon),
        ] {
            if !value.is_finite() || value < 0.0 {
                return Err(LossError::InvalidWeight { name, value });
            }
        }
        Ok(())
    }

    /// Every term active: the strongest configuration.
    pub fn full() -> Self {
        Self {
            delta: 1.0,
            alpha: 1.0,
            beta: 1.0,
            gamma_div: 1.0,
            epsilon: 1.0,
        }
    }

    /// Only the label-independent terms (smoothing, diversity, batch-norm).
    pub fn standard_only() -> Self {
        Self {
            delta: 0.0,
            alpha: 0.0,
            ..Self::full()
        }
    }

    /// Ablation grid: toggle cross-entropy and feature-map terms, the
    /// standard terms stay at 1.
    pub fn ablation(with_ce: bool, with_feat: bool) -> Self {
        Self {
            delta: if with_ce { 1.0 } else { 0.0 },
            alpha: if with_feat { 1.0 } else { 0.0 },
            ..Self::full()
        }
    }
}

/// Mean and variance of a feature vector distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentPair {
    pub mean: Array1<f64>,
    pub variance: Array1<f64>,
}

impl MomentPair {
    pub fn new(mean: Array1<f64>, variance: Array1<f64>) -> Self {
        assert_eq!(mean.len(), variance.len(), "moment vectors must match");
        debug_assert!(variance.iter().all(|&v| v >= 0.0));
        Self { mean, variance }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn check_logits(logits: &Var<'_>, labels: &[usize]) -> Result<(usize, usize), LossError> {
    let shape = logits.shape();
    if shape.len() != 2 {
        return Err(LossError::ShapeMismatch {
            expected: "(n, classes)".into(),
            got: format!("{shape:?}"),
        });
    }
    let (n, classes) = (shape[0], shape[1]);
    if labels.len() != n {
        return Err(LossError::ShapeMismatch {
            expected: format!("{n} labels"),
            got: format!("{}", labels.len()),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(LossError::LabelOutOfRange {
            label: bad,
            classes,
        });
    }
    Ok((n, classes))
}

/// Per-sample negative log-likelihood of the softmax: `-log p_y`.
pub fn cross_entropy_per_sample<'t>(
    logits: Var<'t>,
    labels: &[usize],
) -> Result<Var<'t>, LossError> {
    check_logits(&logits, labels)?;
    Ok(logits.log_softmax().gather_label(labels).neg_v())
}

/// Mean softmax cross-entropy over a batch.
pub fn cross_entropy<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>, LossError> {
    Ok(cross_entropy_per_sample(logits, labels)?.mean_all())
}

/// Per-sample focal loss: `-(1 - p_y)^gamma * log p_y`.
pub fn focal_loss_per_sample<'t>(
    logits: Var<'t>,
    labels: &[usize],
    gamma_focal: f64,
) -> Result<Var<'t>, LossError> {
    check_logits(&logits, labels)?;
    assert!(gamma_focal >= 0.0, "focal exponent must be >= 0");
    let logp_y = logits.log_softmax().gather_label(labels);
    let p_y = logp_y.exp();
    let weight = p_y.rsub_scalar(1.0).pow_scalar(gamma_focal);
    Ok(weight.mul_v(logp_y.neg_v()))
}

/// Mean focal loss over a batch; `gamma_focal = 0` reduces to cross-entropy.
pub fn focal_loss<'t>(
    logits: Var<'t>,
    labels: &[usize],
    gamma_focal: f64,
) -> Result<Var<'t>, LossError> {
    Ok(focal_loss_per_sample(logits, labels, gamma_focal)?.mean_all())
}

fn l2_to_const<'t>(v: Var<'t>, target: &Array1<f64>) -> Var<'t> {
    let c = v.tape().constant(target.clone().into_dyn());
    (v - c).sqr().sum_all().sqrt()
}

/// Batch-norm statistics alignment: per layer, the Euclidean distance
/// between the batch statistics of the layer input and the running
/// statistics stored in the snapshot, summed over layers.
pub fn bn_stat_loss<'t>(
    batch_bn: &[BnBatchStats<'t>],
    snapshot: &BNSnapshot,
) -> Result<Var<'t>, LossError> {
    if batch_bn.len() != snapshot.layers.len() {
        return Err(LossError::ShapeMismatch {
            expected: format!("{} batch-norm layers", snapshot.layers.len()),
            got: format!("{}", batch_bn.len()),
        });
    }
    if batch_bn.is_empty() {
        return Err(LossError::ShapeMismatch {
            expected: "at least one batch-norm layer".into(),
            got: "0".into(),
        });
    }
    let mut total: Option<Var<'t>> = None;
    for (stats, (mean, var)) in batch_bn.iter().zip(&snapshot.layers) {
        if stats.mean.shape() != vec![mean.len()] {
            return Err(LossError::ShapeMismatch {
                expected: format!("({},)", mean.len()),
                got: format!("{:?}", stats.mean.shape()),
            });
        }
        let term = l2_to_const(stats.mean, mean) + l2_to_const(stats.var, var);
        total = Some(match total {
            Some(t) => t + term,
            None => term,
        });
    }
    Ok(total.unwrap())
}

/// Feature-map alignment: distance between the batch's feature moments
/// and the merged per-class target moments.
pub fn feature_map_loss<'t>(
    batch_features: Var<'t>,
    merged: &MomentPair,
) -> Result<Var<'t>, LossError> {
    let shape = batch_features.shape();
    if shape.len() != 2 || shape[1] != merged.dim() {
        return Err(LossError::ShapeMismatch {
            expected: format!("(n, {})", merged.dim()),
            got: format!("{shape:?}"),
        });
    }
    if shape[0] == 0 {
        return Err(LossError::BatchTooSmall { n: 0, min: 1 });
    }
    let mean = batch_features.mean_axis0();
    let centered = batch_features.add_rowvec(mean.neg_v());
    let variance = centered.sqr().mean_axis0();
    Ok(l2_to_const(mean, &merged.mean) + l2_to_const(variance, &merged.variance))
}

fn check_prob_rows(probs: &Var<'_>) -> Result<(), LossError> {
    let v = probs.value();
    let shape = v.shape();
    if shape.len() != 2 {
        return Err(LossError::ShapeMismatch {
            expected: "(k, classes)".into(),
            got: format!("{shape:?}"),
        });
    }
    for (i, row) in v
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
        .rows()
        .into_iter()
        .enumerate()
    {
        let sum: f64 = row.sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL || row.iter().any(|&p| p < 0.0) {
            return Err(LossError::NotNormalized { row: i, sum });
        }
    }
    Ok(())
}

fn kl<'t>(p: Var<'t>, q: Var<'t>) -> Var<'t> {
    let lp = p.clamp_min(KL_CLAMP).ln();
    let lq = q.clamp_min(KL_CLAMP).ln();
    p.mul_v(lp - lq).sum_all()
}

/// Sample-diversification loss: the negated symmetric KL divergence
/// between the mean probability vectors of two sub-samples. Always
/// non-positive; minimizing it pushes the two sub-samples apart.
pub fn diversity_loss<'t>(probs_a: Var<'t>, probs_b: Var<'t>) -> Result<Var<'t>, LossError> {
    check_prob_rows(&probs_a)?;
    check_prob_rows(&probs_b)?;
    if probs_a.shape()[1] != probs_b.shape()[1] {
        return Err(LossError::ShapeMismatch {
            expected: format!("(k, {})", probs_a.shape()[1]),
            got: format!("{:?}", probs_b.shape()),
        });
    }
    let s1 = probs_a.mean_axis0();
    let s2 = probs_b.mean_axis0();
    Ok((kl(s1, s2) + kl(s2, s1)).mul_scalar(-0.5))
}

/// Split a generated batch for the diversity loss: the batch is halved,
/// and two thirds of each half are drawn without replacement.
pub fn split_for_diversity(
    batch_indices: &[usize],
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), LossError> {
    let n = batch_indices.len();
    if n < 3 {
        return Err(LossError::BatchTooSmall { n, min: 3 });
    }
    let half = n / 2;
    let take = half * 2 / 3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pick = |rng: &mut ChaCha8Rng, part: &[usize]| -> Vec<usize> {
        let mut pool: Vec<usize> = part.to_vec();
        pool.shuffle(rng);
        pool.truncate(take);
        pool
    };
    let idx_a = pick(&mut rng, &batch_indices[..half]);
    let idx_b = pick(&mut rng, &batch_indices[half..]);
    Ok((idx_a, idx_b))
}

/// 3x3 Gaussian kernel with the given sigma, normalized to sum 1.
pub fn gaussian_kernel_3x3(sigma: f64) -> Arr {
    let mut k = Arr::zeros(IxDyn(&[1, 1, 3, 3]));
    let mut sum = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let (di, dj) = (i as f64 - 1.0, j as f64 - 1.0);
            let w = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            k[[0, 0, i, j]] = w;
            sum += w;
        }
    }
    k.mapv_inplace(|w| w / sum);
    k
}

/// Image-smoothing loss: mean squared difference between the images and
/// a Gaussian-blurred copy (3x3, sigma 1, reflect padding).
pub fn smoothing_loss(images: Var<'_>) -> Result<Var<'_>, LossError> {
    let shape = images.shape();
    if shape.len() != 4 || shape[1] != 1 {
        return Err(LossError::ShapeMismatch {
            expected: "(n, 1, h, w)".into(),
            got: format!("{shape:?}"),
        });
    }
    let kernel = images.tape().constant(gaussian_kernel_3x3(1.0));
    let blurred = conv::conv2d(conv::pad_reflect(images, 1), kernel, 1, 0);
    Ok((images - blurred).sqr().mean_all())
}

/// The always-active part of the generator loss: smoothing plus
/// diversity plus batch-norm alignment, unweighted.
pub fn standard_loss<'t>(
    images: Var<'t>,
    batch_bn: &[BnBatchStats<'t>],
    snapshot: &BNSnapshot,
    probs_a: Var<'t>,
    probs_b: Var<'t>,
) -> Result<Var<'t>, LossError> {
    let sm = smoothing_loss(images)?;
    let div = diversity_loss(probs_a, probs_b)?;
    let bn = bn_stat_loss(batch_bn, snapshot)?;
    Ok(sm + div + bn)
}

/// The five generator loss terms, kept separate for logging.
pub struct GeneratorLossParts<'t> {
    pub ce: Var<'t>,
    pub feat: Var<'t>,
    pub bn: Var<'t>,
    pub div: Var<'t>,
    pub sm: Var<'t>,
}

/// Weighted combination of the generator loss terms.
pub fn total_generator_loss<'t>(
    weights: &LossWeights,
    parts: &GeneratorLossParts<'t>,
) -> Result<Var<'t>, LossError> {
    weights.validate()?;
    Ok(parts.ce.mul_scalar(weights.delta)
        + parts.feat.mul_scalar(weights.alpha)
        + parts.bn.mul_scalar(weights.beta)
        + parts.div.mul_scalar(weights.gamma_div)
        + parts.sm.mul_scalar(weights.epsilon))
}

/// Classifier objective: `(1 - m) * focal(real) + m * ce(replay)`.
pub fn total_classifier_loss<'t>(
    fl_real: Var<'t>,
    ce_replay: Var<'t>,
    m: f64,
) -> Result<Var<'t>, LossError> {
    if !(0.0..=1.0).contains(&m) {
        return Err(LossError::InvalidMixingRatio(m));
    }
    Ok(fl_real.mul_scalar(1.0 - m) + ce_replay.mul_scalar(m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use dfgr_autograd::Tape;
    use ndarray::{arr1, arr2};

    fn tape_logits<'t>(tape: &'t Tape, rows: &[[f64; 3]]) -> Var<'t> {
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        tape.leaf(
            Arr::from_shape_vec(IxDyn(&[rows.len(), 3]), data).unwrap(),
        )
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let tape = Tape::new();
        let logits = tape.constant(Arr::zeros(IxDyn(&[4, 10])));
        let ce = cross_entropy(logits, &[0, 3, 7, 9]).unwrap();
        assert_relative_eq!(ce.scalar_value(), 10f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn cross_entropy_hand_value() {
        let tape = Tape::new();
        let logits = tape_logits(&tape, &[[1.0, 2.0, 3.0]]);
        let ce = cross_entropy(logits, &[2]).unwrap();
        assert_relative_eq!(ce.scalar_value(), 0.40760596444438, epsilon = 1e-10);
    }

    #[test]
    fn extreme_margin_drives_ce_to_zero() {
        let tape = Tape::new();
        let logits = tape_logits(&tape, &[[40.0, 0.0, 0.0]]);
        let ce = cross_entropy(logits, &[0]).unwrap();
        assert!(ce.scalar_value() < 1e-12);
    }

    #[test]
    fn label_out_of_range_is_error() {
        let tape = Tape::new();
        let logits = tape_logits(&tape, &[[0.0, 0.0, 0.0]]);
        assert!(matches!(
            cross_entropy(logits, &[3]),
            Err(LossError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn focal_gamma_zero_equals_cross_entropy() {
        let tape = Tape::new();
        let logits = tape_logits(&tape, &[[0.5, -1.0, 2.0], [3.0, 0.1, -0.4]]);
        let ce = cross_entropy(logits, &[1, 0]).unwrap().scalar_value();
        let fl = focal_loss(logits, &[1, 0], 0.0).unwrap().scalar_value();
        assert_relative_eq!(ce, fl, epsilon = 1e-6);
    }

    #[test]
    fn focal_half_probability_hand_value() {
        // two classes at p = (0.5, 0.5): -(1-0.5)^2 * ln 0.5 = 0.25 ln 2
        let tape = Tape::new();
        let logits = tape.constant(Arr::zeros(IxDyn(&[1, 2])));
        let fl = focal_loss(logits, &[0], 2.0).unwrap();
        assert_relative_eq!(fl.scalar_value(), 0.25 * 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn focal_certain_prediction_is_zero() {
        let tape = Tape::new();
        let logits = tape_logits(&tape, &[[60.0, 0.0, 0.0]]);
        let fl = focal_loss(logits, &[0], 2.0).unwrap();
        assert!(fl.scalar_value().abs() < 1e-12);
    }

    #[test]
    fn bn_loss_hand_case() {
        // one layer, mean diff (3, 4), variances equal -> norm 5
        let tape = Tape::new();
        let mean = tape.leaf(arr1(&[3.0, 4.0]).into_dyn());
        let var = tape.leaf(arr1(&[1.0, 1.0]).into_dyn());
        let snapshot = BNSnapshot {
            layers: vec![(arr1(&[0.0, 0.0]), arr1(&[1.0, 1.0]))],
        };
        let stats = vec![BnBatchStats { mean, var }];
        let loss = bn_stat_loss(&stats, &snapshot).unwrap();
        assert_relative_eq!(loss.scalar_value(), 5.0, epsilon = 1e-12);
    }

    #[test]
    fn bn_loss_zero_when_stats_match() {
        let tape = Tape::new();
        let mean = tape.leaf(arr1(&[0.3, -0.2]).into_dyn());
        let var = tape.leaf(arr1(&[1.5, 0.7]).into_dyn());
        let snapshot = BNSnapshot {
            layers: vec![(arr1(&[0.3, -0.2]), arr1(&[1.5, 0.7]))],
        };
        let loss = bn_stat_loss(&[BnBatchStats { mean, var }], &snapshot).unwrap();
        assert_relative_eq!(loss.scalar_value(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn bn_loss_is_homogeneous_in_deviation() {
        let snapshot = BNSnapshot {
            layers: vec![(arr1(&[0.0, 0.0]), arr1(&[0.0, 0.0]))],
        };
        let eval = |scale: f64| {
            let tape = Tape::new();
            let mean = tape.leaf(arr1(&[scale, 2.0 * scale]).into_dyn());
            let var = tape.leaf(arr1(&[3.0 * scale, 0.0]).into_dyn());
            bn_stat_loss(&[BnBatchStats { mean, var }], &snapshot)
                .unwrap()
                .scalar_value()
        };
        assert_relative_eq!(eval(2.0), 2.0 * eval(1.0), epsilon = 1e-9);
    }

    #[test]
    fn feature_loss_hand_case() {
        // batch mean (1, 1) vs target (0, 0), variances matching -> sqrt 2
        let tape = Tape::new();
        let feats = tape.leaf(arr2(&[[1.0, 1.0], [1.0, 1.0]]).into_dyn());
        let merged = MomentPair::new(arr1(&[0.0, 0.0]), arr1(&[0.0, 0.0]));
        let loss = feature_map_loss(feats, &merged).unwrap();
        assert_relative_eq!(loss.scalar_value(), 2f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn feature_loss_permutation_invariant() {
        let tape = Tape::new();
        let a = tape.leaf(arr2(&[[1.0, 2.0], [3.0, -1.0], [0.5, 0.0]]).into_dyn());
        let b = tape.leaf(arr2(&[[0.5, 0.0], [1.0, 2.0], [3.0, -1.0]]).into_dyn());
        let merged = MomentPair::new(arr1(&[0.2, 0.4]), arr1(&[1.0, 0.5]));
        let la = feature_map_loss(a, &merged).unwrap().scalar_value();
        let lb = feature_map_loss(b, &merged).unwrap().scalar_value();
        assert_relative_eq!(la, lb, epsilon = 1e-12);
    }

    #[test]
    fn diversity_zero_for_identical_samples() {
        let tape = Tape::new();
        let p = tape.leaf(arr2(&[[0.3, 0.7], [0.3, 0.7]]).into_dyn());
        let q = tape.leaf(arr2(&[[0.3, 0.7], [0.3, 0.7]]).into_dyn());
        let l = diversity_loss(p, q).unwrap();
        assert_relative_eq!(l.scalar_value(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn diversity_hand_value_with_clamp() {
        // s1 = (1, 0), s2 = (0.5, 0.5), probabilities floored at 1e-8
        let tape = Tape::new();
        let p = tape.leaf(arr2(&[[1.0, 0.0]]).into_dyn());
        let q = tape.leaf(arr2(&[[0.5, 0.5]]).into_dyn());
        let l = diversity_loss(p, q).unwrap().scalar_value();
        let kl12 = 1.0 * (1.0f64.ln() - 0.5f64.ln());
        let kl21 = 0.5 * (0.5f64.ln() - 1.0f64.ln())
            + 0.5 * (0.5f64.ln() - KL_CLAMP.ln());
        let expected = -0.5 * (kl12 + kl21);
        assert_relative_eq!(l, expected, epsilon = 1e-10);
        assert!(l <= 0.0);
    }

    #[test]
    fn diversity_is_symmetric() {
        let tape = Tape::new();
        let p = tape.leaf(arr2(&[[0.9, 0.1], [0.6, 0.4]]).into_dyn());
        let q = tape.leaf(arr2(&[[0.2, 0.8]]).into_dyn());
        let ab = diversity_loss(p, q).unwrap().scalar_value();
        let ba = diversity_loss(q, p).unwrap().scalar_value();
        assert_relative_eq!(ab, ba, epsilon = 1e-12);
    }

    #[test]
    fn diversity_rejects_unnormalized_rows() {
        let tape = Tape::new();
        let p = tape.leaf(arr2(&[[0.9, 0.3]]).into_dyn());
        let q = tape.leaf(arr2(&[[0.5, 0.5]]).into_dyn());
        assert!(matches!(
            diversity_loss(p, q),
            Err(LossError::NotNormalized { .. })
        ));
    }

    #[test]
    fn split_sizes_and_half_membership() {
        let indices: Vec<usize> = (0..32).collect();
        let (a, b) = split_for_diversity(&indices, 7).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(b.len(), 10);
        assert!(a.iter().all(|&i| i < 16));
        assert!(b.iter().all(|&i| (16..32).contains(&i)));
        let (a2, b2) = split_for_diversity(&indices, 7).unwrap();
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }

    #[test]
    fn split_too_small_is_error() {
        assert!(matches!(
            split_for_diversity(&[0, 1], 0),
            Err(LossError::BatchTooSmall { .. })
        ));
    }

    #[test]
    fn smoothing_zero_on_constant_image() {
        let tape = Tape::new();
        let img = tape.leaf(Arr::from_elem(IxDyn(&[2, 1, 8, 8]), 0.37));
        let l = smoothing_loss(img).unwrap();
        assert!(l.scalar_value().abs() < 1e-24);
    }

    #[test]
    fn smoothing_invariant_under_sign_flip() {
        let tape = Tape::new();
        let img = Arr::from_shape_fn(IxDyn(&[1, 1, 6, 6]), |d| {
            if (d[2] + d[3]) % 2 == 0 {
                1.0
            } else {
                -1.0
            }
        });
        let a = tape.leaf(img.clone());
        let b = tape.leaf(img.mapv(|x| -x));
        let la = smoothing_loss(a).unwrap().scalar_value();
        let lb = smoothing_loss(b).unwrap().scalar_value();
        assert_relative_eq!(la, lb, epsilon = 1e-12);
        assert!(la > 0.0);
    }

    #[test]
    fn total_generator_loss_arithmetic() {
        // weights (1,1,1,1,1) with parts (1, 2, 3, -1, 0.5) sum to 5.5
        let tape = Tape::new();
        let parts = GeneratorLossParts {
            ce: tape.scalar(1.0),
            feat: tape.scalar(2.0),
            bn: tape.scalar(3.0),
            div: tape.scalar(-1.0),
            sm: tape.scalar(0.5),
        };
        let total = total_generator_loss(&LossWeights::full(), &parts).unwrap();
        assert_relative_eq!(total.scalar_value(), 5.5, epsilon = 1e-12);
        let zero = LossWeights::new(0.0, 0.0, 0.0, 0.0, 0.0).unwrap();
        assert_eq!(
            total_generator_loss(&zero, &parts).unwrap().scalar_value(),
            0.0
        );
    }

    #[test]
    fn standard_restriction_matches_weighted_total() {
        let tape = Tape::new();
        let parts = GeneratorLossParts {
            ce: tape.scalar(9.0),
            feat: tape.scalar(7.0),
            bn: tape.scalar(3.0),
            div: tape.scalar(-0.25),
            sm: tape.scalar(0.125),
        };
        let restricted = total_generator_loss(&LossWeights::standard_only(), &parts).unwrap();
        assert_relative_eq!(
            restricted.scalar_value(),
            3.0 - 0.25 + 0.125,
            epsilon = 1e-12
        );
    }

    #[test]
    fn classifier_loss_mixes_linearly() {
        let tape = Tape::new();
        let fl = tape.scalar(2.0);
        let ce = tape.scalar(4.0);
        let l = total_classifier_loss(fl, ce, 0.5).unwrap();
        assert_relative_eq!(l.scalar_value(), 3.0, epsilon = 1e-12);
        let pure = total_classifier_loss(fl, ce, 0.0).unwrap();
        assert_relative_eq!(pure.scalar_value(), 2.0, epsilon = 1e-12);
        assert!(total_classifier_loss(fl, ce, 1.5).is_err());
    }

    #[test]
    fn negative_weight_rejected() {
        assert!(matches!(
            LossWeights::new(1.0, 1.0, 1.0, -1.0, 1.0),
            Err(LossError::InvalidWeight { .. })
        ));
    }
}
