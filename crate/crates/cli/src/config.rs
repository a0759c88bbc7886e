//! Flat `key = value` experiment configuration.
//!
//! The format is a plain-text file of one assignment per line, `#`
//! comments, and a closed key set. Unknown keys, type mismatches, and
//! invalid enum values are reported with their line number. Defaults
//! are the reference hyper-parameters (or the desk profile when
//! `desk_scale` is on).

use dfgr_core::losses::LossWeights;
use dfgr_core::trainer::{ModelSizes, TrainConfig};
use std::fmt;
use std::path::{Path, PathBuf};

#[derive(Debug)]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line == 0 {
            write!(f, "config: {}", self.message)
        } else {
            write!(f, "config line {}: {}", self.line, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dataset {
    Mnist,
    FashionMnist,
}

impl Dataset {
    pub fn as_str(&self) -> &'static str {
        match self {
            Dataset::Mnist => "mnist",
            Dataset::FashionMnist => "fashion_mnist",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Balance {
    Balanced,
    Imbalanced,
}

impl Balance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Balance::Balanced => "balanced",
            Balance::Imbalanced => "imbalanced",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Dfgr,
    Naive,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Dfgr => "dfgr",
            Method::Naive => "naive",
        }
    }
}

/// The ablation grid rows: which generator loss terms are active and
/// whether replay adjustment is on. The standard terms are always on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ablation {
    pub with_ce: bool,
    pub with_feat: bool,
    pub replay_adjust: bool,
}

impl Ablation {
    pub const ALL: [(&'static str, Ablation); 8] = [
        ("ls", Ablation { with_ce: false, with_feat: false, replay_adjust: false }),
        ("ls_feat", Ablation { with_ce: false, with_feat: true, replay_adjust: false }),
        ("ls_ce", Ablation { with_ce: true, with_feat: false, replay_adjust: false }),
        ("ls_ce_feat", Ablation { with_ce: true, with_feat: true, replay_adjust: false }),
        ("ls_ra", Ablation { with_ce: false, with_feat: false, replay_adjust: true }),
        ("ls_feat_ra", Ablation { with_ce: false, with_feat: true, replay_adjust: true }),
        ("ls_ce_ra", Ablation { with_ce: true, with_feat: false, replay_adjust: true }),
        ("ls_ce_feat_ra", Ablation { with_ce: true, with_feat: true, replay_adjust: true }),
    ];

    pub fn from_name(name: &str) -> Option<Ablation> {
        Self::ALL
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, a)| *a)
    }

    pub fn name(&self) -> &'static str {
        Self::ALL
            .iter()
            .find(|(_, a)| a == self)
            .map(|(n, _)| *n)
            .expect("every ablation combination is named")
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights::ablation(self.with_ce, self.with_feat)
    }
}

/// A fully resolved experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: Dataset,
    pub balance: Balance,
    pub method: Method,
    pub ablation: Ablation,
    pub train: TrainConfig,
    pub run_dir: PathBuf,
    pub data_dir: PathBuf,
    pub repeats: usize,
    pub desk_scale: bool,
    /// Cap on training images per class; 0 disables the cap.
    pub train_cap_per_class: usize,
}

impl ExperimentConfig {
    pub fn model_sizes(&self) -> ModelSizes {
        if self.desk_scale {
            ModelSizes::desk()
        } else {
            ModelSizes::full()
        }
    }

    fn defaults() -> Self {
        Self {
            dataset: Dataset::Mnist,
            balance: Balance::Balanced,
            method: Method::Dfgr,
            ablation: Ablation::from_name("ls_ce_feat_ra").unwrap(),
            train: TrainConfig::reference(),
            run_dir: PathBuf::from("runs/experiment"),
            data_dir: PathBuf::from("data/mnist"),
            repeats: 1,
            desk_scale: false,
            train_cap_per_class: 0,
        }
    }

    /// Push the ablation's weight restriction and replay flag into the
    /// training config (explicit weight keys may still override after).
    fn apply_ablation(&mut self) {
        self.train.loss_weights = self.ablation.weights();
        self.train.replay_adjust = self.ablation.replay_adjust;
    }
}

struct Assignment {
    line: usize,
    key: String,
    value: String,
}

fn tokenize(text: &str) -> Result<Vec<Assignment>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(ConfigError {
                line,
                message: format!("expected `key = value`, got `{content}`"),
            });
        };
        out.push(Assignment {
            line,
            key: key.trim().to_string(),
            value: value.trim().to_string(),
        });
    }
    Ok(out)
}

fn parse_as<T: std::str::FromStr>(a: &Assignment, what: &str) -> Result<T, ConfigError> {
    a.value.parse::<T>().map_err(|_| ConfigError {
        line: a.line,
        message: format!("`{}` expects {what}, got `{}`", a.key, a.value),
    })
}

fn parse_bool(a: &Assignment) -> Result<bool, ConfigError> {
    match a.value.as_str() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        other => Err(ConfigError {
            line: a.line,
            message: format!("`{}` expects a boolean, got `{other}`", a.key),
        }),
    }
}

/// Parse a config text into a validated experiment description.
pub fn parse_config_text(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let assignments = tokenize(text)?;
    let mut config = ExperimentConfig::defaults();

    // profile-level keys first: they reset dependent defaults
    for a in &assignments {
        match a.key.as_str() {
            "desk_scale" => {
                config.desk_scale = parse_bool(a)?;
                if config.desk_scale {
                    config.train = TrainConfig::desk();
                    config.train_cap_per_class = 1000;
                }
            }
            "ablation" => {
                config.ablation = Ablation::from_name(&a.value).ok_or_else(|| ConfigError {
                    line: a.line,
                    message: format!(
                        "unknown ablation `{}`; expected one of {}",
                        a.value,
                        Ablation::ALL.map(|(n, _)| n).join(", ")
                    ),
                })?;
            }
            _ => {}
        }
    }
    config.apply_ablation();

    for a in &assignments {
        match a.key.as_str() {
            "desk_scale" | "ablation" => {}
            "dataset" => {
                config.dataset = match a.value.as_str() {
                    "mnist" => Dataset::Mnist,
                    "fashion_mnist" => Dataset::FashionMnist,
                    other => {
                        return Err(ConfigError {
                            line: a.line,
                            message: format!(
                                "unknown dataset `{other}`; expected mnist or fashion_mnist"
                            ),
                        })
                    }
                }
            }
            "balance" => {
                config.balance = match a.value.as_str() {
                    "balanced" => Balance::Balanced,
                    "imbalanced" => Balance::Imbalanced,
                    other => {
                        return Err(ConfigError {
                            line: a.line,
                            message: format!(
                                "unknown balance `{other}`; expected balanced or imbalanced"
                            ),
                        })
                    }
                }
            }
            "method" => {
                config.method = match a.value.as_str() {
                    "dfgr" => Method::Dfgr,
                    "naive" => Method::Naive,
                    other => {
                        return Err(ConfigError {
                            line: a.line,
                            message: format!("unknown method `{other}`; expected dfgr or naive"),
                        })
                    }
                }
            }
            "run_dir" => config.run_dir = PathBuf::from(&a.value),
            "data_dir" => config.data_dir = PathBuf::from(&a.value),
            "seed" => config.train.seed = parse_as(a, "an unsigned integer")?,
            "repeats" => config.repeats = parse_as(a, "an unsigned integer")?,
            "train_cap_per_class" => config.train_cap_per_class = parse_as(a, "an unsigned integer")?,
            "classifier_batch" => config.train.classifier_batch = parse_as(a, "an unsigned integer")?,
            "generator_batch" => config.train.generator_batch = parse_as(a, "an unsigned integer")?,
            "classifier_max_epochs" => {
                config.train.classifier_max_epochs = parse_as(a, "an unsigned integer")?
            }
            "generator_max_epochs" => {
                config.train.generator_max_epochs = parse_as(a, "an unsigned integer")?
            }
            "patience_classifier" => {
                config.train.patience_classifier = parse_as(a, "an unsigned integer")?
            }
            "patience_generator" => {
                config.train.patience_generator = parse_as(a, "an unsigned integer")?
            }
            "steps_per_generator_epoch" => {
                config.train.steps_per_generator_epoch = parse_as(a, "an unsigned integer")?
            }
            "eval_batch" => config.train.eval_batch = parse_as(a, "an unsigned integer")?,
            "learning_rate" => config.train.learning_rate = parse_as(a, "a number")?,
            "adam_beta1" => config.train.adam_beta1 = parse_as(a, "a number")?,
            "adam_beta2" => config.train.adam_beta2 = parse_as(a, "a number")?,
            "adam_eps" => config.train.adam_eps = parse_as(a, "a number")?,
            "min_delta" => config.train.min_delta = parse_as(a, "a number")?,
            "focal_gamma" => config.train.focal_gamma = parse_as(a, "a number")?,
            "replay_adjust" => config.train.replay_adjust = parse_bool(a)?,
            "delta" => config.train.loss_weights.delta = parse_as(a, "a number")?,
            "alpha" => config.train.loss_weights.alpha = parse_as(a, "a number")?,
            "beta" => config.train.loss_weights.beta = parse_as(a, "a number")?,
            "gamma_div" => config.train.loss_weights.gamma_div = parse_as(a, "a number")?,
            "epsilon" => config.train.loss_weights.epsilon = parse_as(a, "a number")?,
            other => {
                return Err(ConfigError {
                    line: a.line,
                    message: format!("unknown key `{other}`"),
                })
            }
        }
    }

    if config.repeats == 0 {
        return Err(ConfigError {
            line: 0,
            message: "repeats must be >= 1".into(),
        });
    }
    config.train.validate().map_err(|e| ConfigError {
        line: 0,
        message: e.to_string(),
    })?;
    Ok(config)
}

/// Parse a config file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
        line: 0,
        message: format!("cannot read {}: {e}", path.display()),
    })?;
    parse_config_text(&text)
}

/// Render a config back to text; `parse(serialize(c)) == c`.
pub fn serialize_config(config: &ExperimentConfig) -> String {
    let t = &config.train;
    let w = &t.loss_weights;
    format!(
        "dataset = {}\nbalance = {}\nmethod = {}\nablation = {}\n\
         run_dir = {}\ndata_dir = {}\nseed = {}\nrepeats = {}\n\
         desk_scale = {}\ntrain_cap_per_class = {}\n\
         classifier_batch = {}\ngenerator_batch = {}\n\
         classifier_max_epochs = {}\ngenerator_max_epochs = {}\n\
         patience_classifier = {}\npatience_generator = {}\n\
         steps_per_generator_epoch = {}\neval_batch = {}\n\
         learning_rate = {}\nadam_beta1 = {}\nadam_beta2 = {}\nadam_eps = {}\n\
         min_delta = {}\nfocal_gamma = {}\nreplay_adjust = {}\n\
         delta = {}\nalpha = {}\nbeta = {}\ngamma_div = {}\nepsilon = {}\n",
        config.dataset.as_str(),
        config.balance.as_str(),
        config.method.as_str(),
        config.ablation.name(),
        config.run_dir.display(),
        config.data_dir.display(),
        t.seed,
        config.repeats,
        config.desk_scale,
        config.train_cap_per_class,
        t.classifier_batch,
        t.generator_batch,
        t.classifier_max_epochs,
        t.generator_max_epochs,
        t.patience_classifier,
        t.patience_generator,
        t.steps_per_generator_epoch,
        t.eval_batch,
        t.learning_rate,
        t.adam_beta1,
        t.adam_beta2,
        t.adam_eps,
        t.min_delta,
        t.focal_gamma,
        t.replay_adjust,
        w.delta,
        w.alpha,
        w.beta,
        w.gamma_div,
        w.epsilon,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_reference_defaults() {
        let c = parse_config_text("dataset = mnist\n").unwrap();
        assert_eq!(c.dataset, Dataset::Mnist);
        assert_eq!(c.train.classifier_batch, 128);
        assert_eq!(c.train.generator_batch, 32);
        assert_eq!(c.train.classifier_max_epochs, 1000);
        assert_eq!(c.train.patience_classifier, 50);
        assert_eq!(c.train.patience_generator, 75);
        assert_eq!(c.train.learning_rate, 1e-4);
        assert_eq!(c.train.adam_beta1, 0.5);
        assert_eq!(c.train.focal_gamma, 2.0);
    }

    #[test]
    fn ablation_preset_sets_weights_and_replay() {
        let c = parse_config_text("ablation = ls_ce_feat_ra\n").unwrap();
        assert_eq!(c.train.loss_weights.delta, 1.0);
        assert_eq!(c.train.loss_weights.alpha, 1.0);
        assert_eq!(c.train.loss_weights.beta, 1.0);
        assert_eq!(c.train.loss_weights.gamma_div, 1.0);
        assert_eq!(c.train.loss_weights.epsilon, 1.0);
        assert!(c.train.replay_adjust);

        let c = parse_config_text("ablation = ls\n").unwrap();
        assert_eq!(c.train.loss_weights.delta, 0.0);
        assert_eq!(c.train.loss_weights.alpha, 0.0);
        assert!(!c.train.replay_adjust);
    }

    #[test]
    fn negative_weight_is_a_validation_error() {
        let err = parse_config_text("gamma_div = -1\n").unwrap_err();
        assert!(err.message.contains("gamma_div"));
    }

    #[test]
    fn unknown_key_reports_line_number() {
        let err = parse_config_text("dataset = mnist\nnope = 3\n").unwrap_err();
        assert_eq!(err.line, 2);
        assert!(err.message.contains("nope"));
    }

    #[test]
    fn type_mismatch_reports_line_number() {
        let err = parse_config_text("seed = banana\n").unwrap_err();
        assert_eq!(err.line, 1);
    }

    #[test]
    fn bad_enum_is_an_error() {
        assert!(parse_config_text("dataset = cifar\n").is_err());
        assert!(parse_config_text("method = magic\n").is_err());
        assert!(parse_config_text("ablation = everything\n").is_err());
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let c = parse_config_text("# a comment\n\nseed = 9 # trailing\n").unwrap();
        assert_eq!(c.train.seed, 9);
    }

    #[test]
    fn round_trip_is_identity() {
        let text = "dataset = fashion_mnist\nbalance = imbalanced\nmethod = dfgr\n\
                    ablation = ls_ce_ra\nseed = 17\nrepeats = 3\ndesk_scale = true\n\
                    learning_rate = 0.003\n";
        let c = parse_config_text(text).unwrap();
        let again = parse_config_text(&serialize_config(&c)).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn desk_scale_switches_profile() {
        let c = parse_config_text("desk_scale = true\n").unwrap();
        assert_eq!(c.train.classifier_max_epochs, 30);
        assert_eq!(c.train.patience_classifier, 10);
        assert_eq!(c.train_cap_per_class, 1000);
        // explicit keys still override the profile
        let c = parse_config_text("desk_scale = true\nclassifier_max_epochs = 5\n").unwrap();
        assert_eq!(c.train.classifier_max_epochs, 5);
    }
}
