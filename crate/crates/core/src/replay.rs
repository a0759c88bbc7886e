//! Loss-adaptive sampling of replay labels.
//!
//! During classifier re-training, each generated batch's per-class
//! cross-entropy feeds an exponential moving average; classes with
//! higher average loss get proportionally more probability in the next
//! batch, with a floor that keeps every class alive.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use thiserror::Error;

/// Default EMA decay for per-class replay losses.
pub const DEFAULT_DECAY: f64 = 0.9;

/// Guard used when all EMA losses are still zero.
const TINY: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("replay requires at least one previous class")]
    NoClasses,
    #[error("label {0} is not a replay class")]
    UnknownLabel(u8),
    #[error("losses ({losses}) and labels ({labels}) differ in length")]
    LengthMismatch { losses: usize, labels: usize },
    #[error("per-sample losses must be >= 0, got {0}")]
    NegativeLoss(f64),
    #[error("previous and current class sets overlap on {0}")]
    Overlap(u8),
    #[error("mixing ratio undefined: both class sets are empty")]
    BothEmpty,
}

/// Sampling state over previously-seen classes.
#[derive(Debug, Clone)]
pub struct ReplayState {
    classes: Vec<u8>,
    ema_loss: BTreeMap<u8, f64>,
    probs: BTreeMap<u8, f64>,
    pub decay: f64,
    pub floor: f64,
}

impl ReplayState {
    /// Uniform probabilities, zero EMA losses. The probability floor is
    /// half the uniform mass, so no class can starve.
    pub fn new(previous_classes: &[u8]) -> Result<Self, ReplayError> {
        Self::with_decay(previous_classes, DEFAULT_DECAY)
    }

    pub fn with_decay(previous_classes: &[u8], decay: f64) -> Result<Self, ReplayError> {
        if previous_classes.is_empty() {
            return Err(ReplayError::NoClasses);
        }
        assert!(decay > 0.0 && decay < 1.0, "decay must be in (0, 1)");
        let mut classes = previous_classes.to_vec();
        classes.sort_unstable();
        classes.dedup();
        let k = classes.len() as f64;
        let uniform = 1.0 / k;
        Ok(Self {
            ema_loss: classes.iter().map(|&c| (c, 0.0)).collect(),
            probs: classes.iter().map(|&c| (c, uniform)).collect(),
            floor: 0.5 / k,
            classes,
            decay,
        })
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    pub fn prob(&self, label: u8) -> Option<f64> {
        self.probs.get(&label).copied()
    }

    pub fn ema(&self, label: u8) -> Option<f64> {
        self.ema_loss.get(&label).copied()
    }

    /// Probabilities in class order.
    pub fn prob_vec(&self) -> Vec<f64> {
        self.classes.iter().map(|c| self.probs[c]).collect()
    }

    /// i.i.d. categorical draws from the current probabilities.
    pub fn sample_labels(&self, n: usize, seed: u64) -> Vec<u8> {
        assert!(n >= 1, "sample at least one label");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cumulative: Vec<f64> = self
            .classes
            .iter()
            .scan(0.0, |acc, c| {
                *acc += self.probs[c];
                Some(*acc)
            })
            .collect();
        (0..n)
            .map(|_| {
                let u: f64 = rng.random::<f64>();
                let pos = cumulative.iter().position(|&c| u < c);
                self.classes[pos.unwrap_or(self.classes.len() - 1)]
            })
            .collect()
    }

    /// Fold a replay batch's per-sample losses into the EMA of every
    /// class present in the batch, then recompute probabilities as the
    /// loss-proportional shares above the floor:
    /// `p_c = floor + (1 - k * floor) * ema_c / sum(ema)`.
    pub fn update(&mut self, per_sample_losses: &[f64], labels: &[u8]) -> Result<(), ReplayError> {
        if per_sample_losses.len() != labels.len() {
            return Err(ReplayError::LengthMismatch {
                losses: per_sample_losses.len(),
                labels: labels.len(),
            });
        }
        if let Some(&bad) = per_sample_losses.iter().find(|&&l| l < 0.0) {
            return Err(ReplayError::NegativeLoss(bad));
        }
        let mut sums: BTreeMap<u8, (f64, usize)> = BTreeMap::new();
        for (&loss, &label) in per_sample_losses.iter().zip(labels) {
            if !self.ema_loss.contains_key(&label) {
                return Err(ReplayError::UnknownLabel(label));
            }
            let e = sums.entry(label).or_insert((0.0, 0));
            e.0 += loss;
            e.1 += 1;
        }
        for (label, (sum, count)) in sums {
            let mean = sum / count as f64;
            let ema = self.ema_loss.get_mut(&label).unwrap();
            *ema = self.decay * *ema + (1.0 - self.decay) * mean;
        }
        self.renormalize();
        Ok(())
    }

    fn renormalize(&mut self) {
        let raw: Vec<f64> = self
            .classes
            .iter()
            .map(|c| self.ema_loss[c].max(TINY))
            .collect();
        let total: f64 = raw.iter().sum();
        let k = self.classes.len() as f64;
        let free = 1.0 - k * self.floor;
        debug_assert!(free >= 0.0, "floor leaves no probability mass");
        for (c, r) in self.classes.clone().into_iter().zip(raw) {
            self.probs.insert(c, self.floor + free * r / total);
        }
    }

    /// Distribution sanity: sums to one, respects the floor.
    pub fn is_valid_distribution(&self) -> bool {
        let sum: f64 = self.probs.values().sum();
        (sum - 1.0).abs() < 1e-6 && self.probs.values().all(|&p| p >= self.floor - 1e-12)
    }
}

/// Replay-vs-real weighting of the classifier loss:
/// `|previous| / (|previous| + |current|)`.
pub fn mixing_ratio(previous: &[u8], current: &[u8]) -> Result<f64, ReplayError> {
    if previous.is_empty() && current.is_empty() {
        return Err(ReplayError::BothEmpty);
    }
    for p in previous {
        if current.contains(p) {
            return Err(ReplayError::Overlap(*p));
        }
    }
    Ok(previous.len() as f64 / (previous.len() + current.len()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn init_is_uniform() {
        let s = ReplayState::new(&[3, 4, 9]).unwrap();
        for c in [3u8, 4, 9] {
            assert_relative_eq!(s.prob(c).unwrap(), 1.0 / 3.0, epsilon = 1e-12);
            assert_eq!(s.ema(c).unwrap(), 0.0);
        }
        assert!(s.is_valid_distribution());

        let one = ReplayState::new(&[5]).unwrap();
        assert_relative_eq!(one.prob(5).unwrap(), 1.0, epsilon = 1e-12);

        let six = ReplayState::new(&[0, 1, 2, 3, 4, 5]).unwrap();
        let sum: f64 = six.prob_vec().iter().sum();
        assert_relative_eq!(sum, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn empty_class_list_is_error() {
        assert!(matches!(ReplayState::new(&[]), Err(ReplayError::NoClasses)));
    }

    #[test]
    fn sampling_concentration_under_uniform() {
        let s = ReplayState::new(&[0, 1, 2]).unwrap();
        let labels = s.sample_labels(6000, 123);
        for c in [0u8, 1, 2] {
            let count = labels.iter().filter(|&&l| l == c).count() as f64;
            // binomial: mean 2000, sigma = sqrt(6000 * 1/3 * 2/3) ~ 36.5
            assert!((count - 2000.0).abs() < 3.0 * 36.6, "class {c}: {count}");
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let s = ReplayState::new(&[1, 2]).unwrap();
        assert_eq!(s.sample_labels(64, 9), s.sample_labels(64, 9));
    }

    #[test]
    fn degenerate_mass_samples_single_class() {
        let mut s = ReplayState::new(&[4, 7]).unwrap();
        s.floor = 0.0;
        s.update(&[5.0, 0.0], &[4, 7]).unwrap();
        // class 4 holds nearly all mass; with floor 0 class 7's share is ~0
        let labels = s.sample_labels(100, 3);
        assert!(labels.iter().filter(|&&l| l == 4).count() >= 99);
    }

    #[test]
    fn ema_ratio_drives_probabilities() {
        // emas (2, 1) with floor 0 normalize to (2/3, 1/3)
        let mut s = ReplayState::new(&[0, 1]).unwrap();
        s.floor = 0.0;
        s.decay = 0.5;
        s.update(&[4.0, 2.0], &[0, 1]).unwrap();
        // after one update emas are (2, 1)
        assert_relative_eq!(s.ema(0).unwrap(), 2.0, epsilon = 1e-12);
        assert_relative_eq!(s.ema(1).unwrap(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(s.prob(0).unwrap(), 2.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(s.prob(1).unwrap(), 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn equal_losses_return_to_uniform() {
        let mut s = ReplayState::new(&[2, 5, 8]).unwrap();
        for _ in 0..50 {
            s.update(&[1.0, 1.0, 1.0], &[2, 5, 8]).unwrap();
        }
        for c in [2u8, 5, 8] {
            assert_relative_eq!(s.prob(c).unwrap(), 1.0 / 3.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn absent_classes_keep_their_ema() {
        let mut s = ReplayState::new(&[1, 2]).unwrap();
        s.update(&[3.0], &[1]).unwrap();
        let ema2_before = s.ema(2).unwrap();
        s.update(&[5.0], &[1]).unwrap();
        assert_eq!(s.ema(2).unwrap(), ema2_before);
    }

    #[test]
    fn monotone_in_ema() {
        let mut s = ReplayState::new(&[0, 1, 2]).unwrap();
        s.update(&[3.0, 2.0, 1.0], &[0, 1, 2]).unwrap();
        assert!(s.prob(0).unwrap() >= s.prob(1).unwrap());
        assert!(s.prob(1).unwrap() >= s.prob(2).unwrap());
        assert!(s.is_valid_distribution());
    }

    #[test]
    fn unknown_label_is_error() {
        let mut s = ReplayState::new(&[0, 1]).unwrap();
        assert!(matches!(
            s.update(&[1.0], &[9]),
            Err(ReplayError::UnknownLabel(9))
        ));
    }

    #[test]
    fn mixing_ratio_cases() {
        assert_eq!(mixing_ratio(&[], &[3, 4, 9]).unwrap(), 0.0);
        assert_eq!(mixing_ratio(&[3, 4, 9], &[5, 6, 0]).unwrap(), 0.5);
        assert_relative_eq!(
            mixing_ratio(&[3, 4, 9, 5, 6, 0], &[1, 2, 8, 7]).unwrap(),
            0.6,
            epsilon = 1e-12
        );
        assert!(matches!(
            mixing_ratio(&[], &[]),
            Err(ReplayError::BothEmpty)
        ));
        assert!(matches!(
            mixing_ratio(&[1], &[1]),
            Err(ReplayError::Overlap(1))
        ));
    }
}
