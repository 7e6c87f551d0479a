//! Experiment configuration, read from TOML.
//!
//! ```toml
//! seed = 1
//! output_dir = "runs/mnist-ii"
//!
//! [dataset]
//! format = "idx"                 # idx | csv | blobs
//! train_images = "data/mnist/train-images-idx3-ubyte"
//! train_labels = "data/mnist/train-labels-idx1-ubyte"
//! test_images = "data/mnist/t10k-images-idx3-ubyte"
//! test_labels = "data/mnist/t10k-labels-idx1-ubyte"
//!
//! [split]
//! known = 6                      # or known_ids = [0, 2, 4]
//! mode = "fixed-test"            # fixed-test | resplit
//!
//! [network]
//! hidden = [256, 128]
//! keep_prob = 0.9
//!
//! [train]
//! regime = "ii"                  # ii | ce | ii_ce
//! iterations = 5000
//! ```
//!
//! Unknown keys are rejected. Relative paths are resolved against the
//! directory holding the config file.

use std::fmt;
use std::path::{Path, PathBuf};

use iiloss::data::{LabelColumn, SplitMode};
use iiloss::rng::sub_seed;
use iiloss::training::TrainRegime;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ConfigError {
    Parse { path: PathBuf, message: String },
    Field { field: String, message: String },
}

impl ConfigError {
    pub fn field(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Field {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Parse { path, message } => write!(f, "{}: {}", path.display(), message.trim_end()),
            Self::Field { field, message } => write!(f, "{field}: {message}"),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Parent of every named sub-seed.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub split: SplitSpec,
    #[serde(default)]
    pub network: NetworkSpec,
    #[serde(default)]
    pub train: TrainSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_images: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_labels: Option<PathBuf>,
    },
    Csv {
        path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_path: Option<PathBuf>,
        #[serde(default = "default_label_column")]
        label_column: LabelColumn,
        #[serde(default)]
        has_header: bool,
        #[serde(default)]
        standardize: bool,
    },
    Blobs {
        classes: usize,
        n_per_class: usize,
        dim: usize,
        center_spacing: f64,
        sigma: f64,
        #[serde(default)]
        outlier_classes: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
}

fn default_label_column() -> LabelColumn {
    LabelColumn::Last
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    /// Number of known classes drawn at random.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub known: Option<usize>,
    /// Explicit known class ids.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub known_ids: Option<Vec<usize>>,
    /// Defaults to fixed-test when the dataset has a test part, else resplit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<SplitMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_fraction: Option<f64>,
}

fn default_train_fraction() -> f64 {
    0.75
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSpec {
    pub hidden: Vec<usize>,
    /// Defaults to the number of known classes.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z_dim: Option<usize>,
    pub batchnorm: bool,
    pub z_batchnorm: bool,
    pub keep_prob: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            hidden: vec![256, 128],
            z_dim: None,
            batchnorm: true,
            z_batchnorm: true,
            keep_prob: 0.9,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSpec {
    pub regime: TrainRegime,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub contamination_ratio: f64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        let t = iiloss::training::TrainConfig::default();
        Self {
            regime: t.regime,
            iterations: t.iterations,
            batch_size: t.batch_size,
            learning_rate: t.adam.learning_rate,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            epsilon: t.adam.epsilon,
            contamination_ratio: t.contamination_ratio,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Reads, rebases relative paths onto the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut config = Self::from_toml(&text, path)?;
        config.rebase(path.parent().unwrap_or(Path::new("")));
        Ok(config)
    }

    /// Prefixes every relative path with `base`.
    pub fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        match &mut self.dataset {
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                fix(train_images);
                fix(train_labels);
                test_images.iter_mut().for_each(fix);
                test_labels.iter_mut().for_each(fix);
            }
            DatasetSpec::Csv { path, test_path, .. } => {
                fix(path);
                test_path.iter_mut().for_each(fix);
            }
            DatasetSpec::Blobs { .. } => {}
        }
    }

    pub fn has_test_part(&self) -> bool {
        match &self.dataset {
            DatasetSpec::Idx { test_images, .. } => test_images.is_some(),
            DatasetSpec::Csv { test_path, .. } => test_path.is_some(),
            DatasetSpec::Blobs { .. } => false,
        }
    }

    pub fn split_mode(&self) -> SplitMode {
        self.split.mode.unwrap_or(if self.has_test_part() {
            SplitMode::FixedTest
        } else {
            SplitMode::Resplit
        })
    }

    pub fn split_seed(&self) -> u64 {
        self.split.seed.unwrap_or_else(|| sub_seed(self.seed, "split"))
    }

    pub fn init_seed(&self) -> u64 {
        self.network.seed.unwrap_or_else(|| sub_seed(self.seed, "init"))
    }

    pub fn data_seed(&self) -> u64 {
        match &self.dataset {
            DatasetSpec::Blobs { seed: Some(s), .. } => *s,
            _ => sub_seed(self.seed, "data"),
        }
    }

    /// Checks everything that does not need the data itself.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let exists = |field: &str, p: &Path| {
            if p.is_file() {
                Ok(())
            } else {
                Err(ConfigError::field(field, format!("{} does not exist", p.display())))
            }
        };
        match &self.dataset {
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                exists("dataset.train_images", train_images)?;
                exists("dataset.train_labels", train_labels)?;
                match (test_images, test_labels) {
                    (Some(i), Some(l)) => {
                        exists("dataset.test_images", i)?;
                        exists("dataset.test_labels", l)?;
                    }
                    (None, None) => {}
                    (Some(_), None) => {
                        return Err(ConfigError::field(
                            "dataset.test_labels",
                            "missing (test_images is set)",
                        ))
                    }
                    (None, Some(_)) => {
                        return Err(ConfigError::field(
                            "dataset.test_images",
                            "missing (test_labels is set)",
                        ))
                    }
                }
            }
            DatasetSpec::Csv { path, test_path, .. } => {
                exists("dataset.path", path)?;
                if let Some(p) = test_path {
                    exists("dataset.test_path", p)?;
                }
            }
            DatasetSpec::Blobs {
                classes,
                n_per_class,
                dim,
                sigma,
                center_spacing,
                ..
            } => {
                if *classes == 0 || *n_per_class == 0 || *dim == 0 {
                    return Err(ConfigError::field(
                        "dataset",
                        "classes, n_per_class and dim must be at least 1",
                    ));
                }
                if !(sigma.is_finite() && *sigma >= 0.0) {
                    return Err(ConfigError::field("dataset.sigma", "must be finite and non-negative"));
                }
                if !center_spacing.is_finite() {
                    return Err(ConfigError::field("dataset.center_spacing", "must be finite"));
                }
            }
        }

        let s = &self.split;
        match (&s.known, &s.known_ids) {
            (Some(0), None) => return Err(ConfigError::field("split.known", "must be at least 1")),
            (Some(_), None) => {}
            (None, Some(ids)) if ids.is_empty() => {
                return Err(ConfigError::field("split.known_ids", "must not be empty"))
            }
            (None, Some(_)) => {}
            (Some(_), Some(_)) => return Err(ConfigError::field("split", "set only one of known and known_ids")),
            (None, None) => return Err(ConfigError::field("split.known", "missing (or set known_ids)")),
        }
        if !(s.train_fraction > 0.0 && s.train_fraction < 1.0) {
            return Err(ConfigError::field("split.train_fraction", "must lie in (0, 1)"));
        }
        if let Some(v) = s.val_fraction {
            if !(0.0..1.0).contains(&v) {
                return Err(ConfigError::field("split.val_fraction", "must lie in [0, 1)"));
            }
        }
        match (self.split_mode(), self.has_test_part()) {
            (SplitMode::FixedTest, false) => {
                return Err(ConfigError::field("split.mode", "fixed-test needs a dataset test part"))
            }
            (SplitMode::Resplit, true) => {
                return Err(ConfigError::field(
                    "split.mode",
                    "resplit draws its own test set; remove the dataset test part or use fixed-test",
                ))
            }
            _ => {}
        }

        let n = &self.network;
        if n.hidden.contains(&0) {
            return Err(ConfigError::field("network.hidden", "widths must be at least 1"));
        }
        if n.z_dim == Some(0) {
            return Err(ConfigError::field("network.z_dim", "must be at least 1"));
        }
        if !(n.keep_prob > 0.0 && n.keep_prob <= 1.0) {
            return Err(ConfigError::field("network.keep_prob", "must lie in (0, 1]"));
        }

        let t = &self.train;
        let checks: [(&str, bool, &str); 7] = [
            ("train.iterations", t.iterations >= 1, "must be at least 1"),
            ("train.batch_size", t.batch_size >= 2, "must be at least 2"),
            (
                "train.learning_rate",
                t.learning_rate > 0.0 && t.learning_rate.is_finite(),
                "must be positive",
            ),
            ("train.beta1", (0.0..1.0).contains(&t.beta1), "must lie in [0, 1)"),
            ("train.beta2", (0.0..1.0).contains(&t.beta2), "must lie in [0, 1)"),
            ("train.epsilon", t.epsilon > 0.0, "must be positive"),
            (
                "train.contamination_ratio",
                (0.0..1.0).contains(&t.contamination_ratio),
                "must lie in [0, 1)",
            ),
        ];
        for (field, ok, message) in checks {
            if !ok {
                return Err(ConfigError::field(field, message));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3
output_dir = "out"

[dataset]
format = "blobs"
classes = 4
n_per_class = 20
dim = 2
center_spacing = 10.0
sigma = 0.3
outlier_classes = 2

[split]
known = 3
"#;

    fn parse(text: &str) -> Result<ExperimentConfig, ConfigError> {
        ExperimentConfig::from_toml(text, Path::new("test.toml"))
    }

    #[test]
    fn defaults_fill_in() {
        let c = parse(MINIMAL).unwrap();
        assert_eq!(c.network, NetworkSpec::default());
        assert_eq!(c.train.iterations, 5000);
        assert_eq!(c.train.regime, TrainRegime::Ii);
        assert_eq!(c.split_mode(), SplitMode::Resplit);
        c.validate().unwrap();
    }

    #[test]
    fn textual_round_trip() {
        let mut c = parse(MINIMAL).unwrap();
        c.train.learning_rate = 0.1 + 0.2;
        c.split.known_ids = None;
        c.network.z_dim = Some(7);
        let text = c.to_toml();
        assert_eq!(parse(&text).unwrap(), c);
        assert_eq!(parse(&text).unwrap().to_toml(), text);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = parse(&format!("{MINIMAL}\n[train]\niteration = 5\n")).unwrap_err();
        assert!(err.to_string().contains("iteration"), "{err}");
        let err = parse(&MINIMAL.replace("sigma = 0.3", "sigma = 0.3\nsgima = 1")).unwrap_err();
        assert!(err.to_string().contains("sgima"), "{err}");
    }

    #[test]
    fn field_paths_in_validation_errors() {
        let mut c = parse(MINIMAL).unwrap();
        c.train.contamination_ratio = 1.0;
        assert_eq!(
            c.validate().unwrap_err(),
            ConfigError::field("train.contamination_ratio", "must lie in [0, 1)")
        );
        let mut c = parse(MINIMAL).unwrap();
        c.split.mode = Some(SplitMode::FixedTest);
        assert!(c.validate().unwrap_err().to_string().starts_with("split.mode"));
        let c = parse(
            &MINIMAL
                .replace(
                    "format = \"blobs\"",
                    "format = \"idx\"\ntrain_images = \"nope\"\ntrain_labels = \"nope\"",
                )
                .replace(
                    "classes = 4\nn_per_class = 20\ndim = 2\ncenter_spacing = 10.0\nsigma = 0.3\noutlier_classes = 2\n",
                    "",
                ),
        )
        .unwrap();
        assert!(c
            .validate()
            .unwrap_err()
            .to_string()
            .starts_with("dataset.train_images"));
    }

    #[test]
    fn sub_seeds_are_named_and_distinct() {
        let c = parse(MINIMAL).unwrap();
        let seeds = [c.split_seed(), c.init_seed(), c.data_seed(), c.seed];
        let unique: std::collections::BTreeSet<_> = seeds.iter().collect();
        assert_eq!(unique.len(), 4);
    }

    #[test]
    fn rebase_relative_paths() {
        let mut c = parse(MINIMAL).unwrap();
        c.rebase(Path::new("/exp"));
        assert_eq!(c.output_dir, PathBuf::from("/exp/out"));
    }
}
