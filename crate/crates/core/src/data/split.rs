//! Simulated open-set datasets.
//!
//! `K` classes are designated known; only they appear in training and
//! validation data, relabeled `0..K` in ascending order of their original
//! ids. The test set keeps every unknown-class instance, whose evaluation
//! truth is [`OpenLabel::Unknown`].

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, Result};
use crate::openset::OpenLabel;
use crate::rng;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    /// One labeled pool: known classes are split train/test/val, every
    /// unknown-class instance goes to test.
    Resplit,
    /// A predefined train/test partition: unknown classes are dropped from
    /// train, the test set is kept intact.
    FixedTest,
}

/// Where the instances come from.
#[derive(Clone, Copy, Debug)]
pub enum SplitSource<'a, S> {
    Resplit(&'a Dataset<S>),
    FixedTest {
        train: &'a Dataset<S>,
        test: &'a Dataset<S>,
    },
}

impl<S> SplitSource<'_, S> {
    pub fn mode(&self) -> SplitMode {
        match self {
            Self::Resplit(_) => SplitMode::Resplit,
            Self::FixedTest { .. } => SplitMode::FixedTest,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnownClasses {
    /// Draw this many known classes uniformly at random.
    Random(usize),
    /// Use exactly these original class ids.
    Fixed(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitOptions {
    pub known: KnownClasses,
    /// Share of each known class used for training in resplit mode.
    pub train_fraction: f64,
    /// Share moved to validation: of the known-class test instances in
    /// resplit mode, of the known-class training instances in fixed-test mode.
    /// Defaults to 1/3 and 1/12 respectively.
    pub val_fraction: Option<f64>,
    pub seed: u64,
}

impl SplitOptions {
    pub fn random(k: usize, seed: u64) -> Self {
        Self {
            known: KnownClasses::Random(k),
            train_fraction: 0.75,
            val_fraction: None,
            seed,
        }
    }

    fn val_fraction(&self, mode: SplitMode) -> f64 {
        self.val_fraction.unwrap_or(match mode {
            SplitMode::Resplit => 1.0 / 3.0,
            SplitMode::FixedTest => 1.0 / 12.0,
        })
    }
}

/// Everything needed to rebuild a split from its source data.
///
/// Indices refer to rows of the source dataset; in fixed-test mode `test`
/// indexes the test source and `train`/`val` the train source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub mode: SplitMode,
    pub seed: u64,
    pub known_class_ids: Vec<usize>,
    pub unknown_class_ids: Vec<usize>,
    pub source_rows: Vec<usize>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitManifest {
    pub fn k(&self) -> usize {
        self.known_class_ids.len()
    }

    /// Maps an original class id to its known-class index or `Unknown`.
    pub fn open_label(&self, original: usize) -> OpenLabel {
        match self.known_class_ids.binary_search(&original) {
            Ok(i) => OpenLabel::Known(i),
            Err(_) => OpenLabel::Unknown,
        }
    }
}

/// Test instances with open-set ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct TestSet<S> {
    pub features: Array2<S>,
    pub truth: Vec<OpenLabel>,
    pub original_labels: Vec<usize>,
}

impl<S> TestSet<S> {
    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpenSetSplit<S> {
    pub manifest: SplitManifest,
    /// Known classes only, labels `0..K`.
    pub train: Dataset<S>,
    /// Known classes only, labels `0..K`.
    pub val: Dataset<S>,
    pub test: TestSet<S>,
}

fn share(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).round() as usize).min(n)
}

fn rows_by_class(data_labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut by: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in data_labels.iter().enumerate() {
        by.entry(l).or_default().push(i);
    }
    by
}

/// Builds an open-set split. Deterministic in `options.seed`.
pub fn open_split<S: Scalar>(source: SplitSource<'_, S>, options: &SplitOptions) -> Result<OpenSetSplit<S>> {
    let mode = source.mode();
    let pool = match source {
        SplitSource::Resplit(d) => d,
        SplitSource::FixedTest { train, .. } => train,
    };
    let mut classes: BTreeSet<usize> = pool.classes().into_iter().collect();
    if let SplitSource::FixedTest { test, .. } = source {
        classes.extend(test.classes());
    }
    let classes: Vec<usize> = classes.into_iter().collect();
    let mut rng = rng::stream(options.seed, "split");

    let known: Vec<usize> = match &options.known {
        KnownClasses::Random(k) => {
            if *k == 0 || *k >= classes.len() {
                return Err(DataError::Split(format!(
                    "K = {k} known classes needs 1 <= K < {} (the number of classes)",
                    classes.len()
                )));
            }
            let mut shuffled = classes.clone();
            shuffled.shuffle(&mut rng);
            let mut known = shuffled[..*k].to_vec();
            known.sort_unstable();
            known
        }
        KnownClasses::Fixed(ids) => {
            let mut known = ids.clone();
            known.sort_unstable();
            known.dedup();
            if known.is_empty() || known.len() >= classes.len() {
                return Err(DataError::Split(format!(
                    "{} known classes needs at least one and fewer than {}",
                    known.len(),
                    classes.len()
                )));
            }
            if let Some(missing) = known.iter().find(|c| classes.binary_search(c).is_err()) {
                return Err(DataError::Split(format!(
                    "known class {missing} does not occur in the data"
                )));
            }
            known
        }
    };
    let unknown: Vec<usize> = classes
        .iter()
        .copied()
        .filter(|c| known.binary_search(c).is_err())
        .collect();

    let by_class = rows_by_class(&pool.labels);
    let val_fraction = options.val_fraction(mode);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for &c in &known {
        let mut rows = by_class.get(&c).cloned().unwrap_or_default();
        if rows.is_empty() {
            return Err(DataError::Split(format!("known class {c} has no training instances")));
        }
        rows.shuffle(&mut rng);
        match mode {
            SplitMode::Resplit => {
                let n_train = share(rows.len(), options.train_fraction).max(1);
                let (tr, rest) = rows.split_at(n_train);
                let n_val = share(rest.len(), val_fraction);
                train.extend_from_slice(tr);
                val.extend_from_slice(&rest[..n_val]);
                test.extend_from_slice(&rest[n_val..]);
            }
            SplitMode::FixedTest => {
                let n_val = share(rows.len(), val_fraction).min(rows.len() - 1);
                val.extend_from_slice(&rows[..n_val]);
                train.extend_from_slice(&rows[n_val..]);
            }
        }
    }
    match source {
        SplitSource::Resplit(_) => {
            for &c in &unknown {
                test.extend(by_class.get(&c).into_iter().flatten().copied());
            }
        }
        SplitSource::FixedTest { test: t, .. } => test.extend(0..t.len()),
    }
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();

    let source_rows = match source {
        SplitSource::Resplit(d) => vec![d.len()],
        SplitSource::FixedTest { train, test } => vec![train.len(), test.len()],
    };
    let manifest = SplitManifest {
        mode,
        seed: options.seed,
        known_class_ids: known,
        unknown_class_ids: unknown,
        source_rows,
        train,
        val,
        test,
    };
    apply_manifest(source, manifest)
}

/// Rebuilds a split from a manifest, checking it against the source data.
pub fn apply_manifest<S: Scalar>(source: SplitSource<'_, S>, manifest: SplitManifest) -> Result<OpenSetSplit<S>> {
    if source.mode() != manifest.mode {
        return Err(DataError::Split(format!(
            "manifest is for {:?} mode, source is {:?}",
            manifest.mode,
            source.mode()
        )));
    }
    let (pool, test_pool) = match source {
        SplitSource::Resplit(d) => (d, d),
        SplitSource::FixedTest { train, test } => (train, test),
    };
    let rows = match source {
        SplitSource::Resplit(d) => vec![d.len()],
        SplitSource::FixedTest { train, test } => vec![train.len(), test.len()],
    };
    if rows != manifest.source_rows {
        return Err(DataError::Split(format!(
            "manifest expects source sizes {:?}, found {rows:?}",
            manifest.source_rows
        )));
    }
    let out_of_range = |idx: &[usize], n: usize| idx.iter().any(|&i| i >= n);
    if out_of_range(&manifest.train, pool.len())
        || out_of_range(&manifest.val, pool.len())
        || out_of_range(&manifest.test, test_pool.len())
    {
        return Err(DataError::Split("manifest index out of range".into()));
    }
    if manifest.mode == SplitMode::Resplit {
        let test: BTreeSet<usize> = manifest.test.iter().copied().collect();
        if manifest.train.iter().chain(&manifest.val).any(|i| test.contains(i)) {
            return Err(DataError::Split("train/val and test overlap".into()));
        }
    }
    let to_known = |original: usize| manifest.open_label(original);
    for &i in manifest.train.iter().chain(&manifest.val) {
        if to_known(pool.labels[i]) == OpenLabel::Unknown {
            return Err(DataError::Split(format!(
                "row {i} of unknown class {} selected for training",
                pool.labels[i]
            )));
        }
    }
    let remap = |d: Dataset<S>| {
        d.relabel(|l| match to_known(l) {
            OpenLabel::Known(k) => k,
            OpenLabel::Unknown => unreachable!("checked above"),
        })
    };
    let train = remap(pool.subset(&manifest.train));
    let val = remap(pool.subset(&manifest.val));
    let original_labels: Vec<usize> = manifest.test.iter().map(|&i| test_pool.labels[i]).collect();
    let test = TestSet {
        features: test_pool.features.select(Axis(0), &manifest.test),
        truth: original_labels.iter().map(|&l| to_known(l)).collect(),
        original_labels,
    };
    Ok(OpenSetSplit {
        manifest,
        train,
        val,
        test,
    })
}
