//! Subcommand implementations. Every command writes into the run directory
//! named by `output_dir`:
//!
//! | file             | written by     |
//! |------------------|----------------|
//! | `config.toml`    | split, train   |
//! | `split.json`     | split, train   |
//! | `model.iim`      | train          |
//! | `curves.csv`     | train          |
//! | `report.json`    | eval           |
//! | `report.csv`     | eval           |
//! | `roc_points.csv` | eval           |

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use iiloss::data::{
    apply_manifest, load_csv, load_idx, open_split, synth_blobs, BlobSpec, CsvOptions, DataError, KnownClasses,
    SplitManifest, SplitOptions, SplitSource,
};
use iiloss::eval::{evaluate, roc_points_csv, welch_t_test, EvalReport};
use iiloss::nn::{AdamConfig, MlpOptions, NetworkConfig};
use iiloss::training::{load_model, save_model, train, IterationRecord, TrainConfig, TrainError};
use iiloss::{Dataset, OpenSetSplit, TrainedModel};
use ndarray::Array1;
use thiserror::Error;

use crate::config::{ConfigError, DatasetSpec, ExperimentConfig};

pub const CONFIG_FILE: &str = "config.toml";
pub const SPLIT_FILE: &str = "split.json";
pub const MODEL_FILE: &str = "model.iim";
pub const CURVES_FILE: &str = "curves.csv";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const ROC_FILE: &str = "roc_points.csv";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Runtime(_) => 1,
        }
    }

    fn runtime(e: impl std::fmt::Display) -> Self {
        Self::Runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn read_file(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

struct Source {
    train: Dataset,
    test: Option<Dataset>,
}

impl Source {
    fn split_source(&self) -> SplitSource<'_, f64> {
        match &self.test {
            Some(test) => SplitSource::FixedTest {
                train: &self.train,
                test,
            },
            None => SplitSource::Resplit(&self.train),
        }
    }
}

fn load_source(config: &ExperimentConfig) -> CliResult<Source> {
    let data = |e: DataError| CliError::Runtime(format!("loading data: {e}"));
    let source = match &config.dataset {
        DatasetSpec::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => Source {
            train: load_idx(train_images, train_labels).map_err(data)?,
            test: match (test_images, test_labels) {
                (Some(i), Some(l)) => Some(load_idx(i, l).map_err(data)?),
                _ => None,
            },
        },
        DatasetSpec::Csv {
            path,
            test_path,
            label_column,
            has_header,
            standardize,
        } => {
            let options = CsvOptions {
                label_column: *label_column,
                has_header: *has_header,
                standardize: *standardize,
            };
            Source {
                train: load_csv(path, options).map_err(data)?,
                test: test_path
                    .as_ref()
                    .map(|p| load_csv(p, options))
                    .transpose()
                    .map_err(data)?,
            }
        }
        DatasetSpec::Blobs {
            classes,
            n_per_class,
            dim,
            center_spacing,
            sigma,
            outlier_classes,
            ..
        } => Source {
            train: synth_blobs(&BlobSpec {
                classes: *classes,
                n_per_class: *n_per_class,
                dim: *dim,
                center_spacing: *center_spacing,
                sigma: *sigma,
                outlier_classes: *outlier_classes,
                seed: config.data_seed(),
            })
            .map_err(data)?,
            test: None,
        },
    };
    if let Some(test) = &source.test {
        if test.num_features() != source.train.num_features() {
            return Err(CliError::Runtime(format!(
                "train data has {} features, test data {}",
                source.train.num_features(),
                test.num_features()
            )));
        }
    }
    Ok(source)
}

fn split_options(config: &ExperimentConfig) -> SplitOptions {
    let known = match (&config.split.known, &config.split.known_ids) {
        (_, Some(ids)) => KnownClasses::Fixed(ids.clone()),
        (Some(k), None) => KnownClasses::Random(*k),
        (None, None) => unreachable!("validated"),
    };
    SplitOptions {
        known,
        train_fraction: config.split.train_fraction,
        val_fraction: config.split.val_fraction,
        seed: config.split_seed(),
    }
}

/// Builds the split, reporting class-count problems as configuration errors.
fn build_split(config: &ExperimentConfig, source: &Source) -> CliResult<OpenSetSplit> {
    let classes = source.train.classes().len();
    if let Some(k) = config.split.known {
        if k >= classes {
            return Err(ConfigError::field(
                "split.known",
                format!("{k} known classes leave no unknown class among the {classes} classes of the data"),
            )
            .into());
        }
    }
    open_split(source.split_source(), &split_options(config)).map_err(|e| match e {
        DataError::Split(m) => ConfigError::field("split", m).into(),
        other => CliError::runtime(other),
    })
}

fn network_config(config: &ExperimentConfig, input_dim: usize, k: usize) -> NetworkConfig {
    let n = &config.network;
    let head = config.train.regime.uses_ce().then_some(k);
    NetworkConfig::mlp(
        input_dim,
        &n.hidden,
        n.z_dim.unwrap_or(k),
        head,
        MlpOptions {
            batchnorm: n.batchnorm,
            z_batchnorm: n.z_batchnorm,
            keep_prob: n.keep_prob,
        },
        config.init_seed(),
    )
}

fn train_config(config: &ExperimentConfig) -> TrainConfig {
    let t = &config.train;
    TrainConfig {
        regime: t.regime,
        iterations: t.iterations,
        batch_size: t.batch_size,
        adam: AdamConfig {
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
        },
        contamination_ratio: t.contamination_ratio,
        seed: config.seed,
    }
}

fn prepare_run_dir(config: &ExperimentConfig) -> CliResult<()> {
    fs::create_dir_all(&config.output_dir)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", config.output_dir.display())))?;
    write_file(&config.output_dir.join(CONFIG_FILE), config.to_toml())
}

fn manifest_json(m: &SplitManifest) -> String {
    serde_json::to_string_pretty(m).expect("manifest is plain data")
}

/// `iteration,intra,inter,ii,ce` with an empty `ce` column for the ii regime.
pub fn curves_csv(curve: &[IterationRecord]) -> String {
    let mut s = String::from("iteration,intra,inter,ii,ce\n");
    for (i, r) in curve.iter().enumerate() {
        let ce = r.ce_loss.map(|c| c.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{i},{},{},{},{ce}", r.intra_spread, r.inter_separation, r.ii_loss);
    }
    s
}

fn summarize_split(split: &OpenSetSplit) -> String {
    let m = &split.manifest;
    format!(
        "known classes {:?}, unknown classes {:?}; train {}, val {}, test {} ({} unknown)",
        m.known_class_ids,
        m.unknown_class_ids,
        split.train.len(),
        split.val.len(),
        split.test.len(),
        split.test.truth.iter().filter(|t| t.is_unknown()).count()
    )
}

pub fn split(config: &ExperimentConfig, out: &mut dyn Write) -> CliResult<()> {
    config.validate()?;
    let source = load_source(config)?;
    let split = build_split(config, &source)?;
    prepare_run_dir(config)?;
    write_file(&config.output_dir.join(SPLIT_FILE), manifest_json(&split.manifest))?;
    writeln!(out, "{}", summarize_split(&split)).map_err(CliError::runtime)?;
    Ok(())
}

pub fn train_run(config: &ExperimentConfig, out: &mut dyn Write) -> CliResult<()> {
    config.validate()?;
    let source = load_source(config)?;
    let split = build_split(config, &source)?;
    prepare_run_dir(config)?;
    let dir = &config.output_dir;
    write_file(&dir.join(SPLIT_FILE), manifest_json(&split.manifest))?;
    writeln!(out, "{}", summarize_split(&split)).map_err(CliError::runtime)?;

    let net = network_config(config, split.train.num_features(), split.manifest.k());
    match train(&split.train, &net, &train_config(config)) {
        Ok(model) => {
            write_file(&dir.join(CURVES_FILE), curves_csv(&model.metadata.curve))?;
            save_model(&model, dir.join(MODEL_FILE)).map_err(CliError::runtime)?;
            let last = model.metadata.curve.last().expect("at least one iteration");
            writeln!(
                out,
                "trained {} iterations ({} optimizer steps): intra {:.4}, inter {:.4}, threshold {:.4}",
                model.metadata.curve.len(),
                model.metadata.optimizer_steps,
                last.intra_spread,
                last.inter_separation,
                model.threshold
            )
            .map_err(CliError::runtime)?;
            Ok(())
        }
        Err(TrainError::Diverged {
            iteration,
            reason,
            curve,
        }) => {
            write_file(&dir.join(CURVES_FILE), curves_csv(&curve))?;
            Err(CliError::Runtime(format!(
                "training diverged at iteration {iteration}: {reason}; partial curves in {}",
                dir.join(CURVES_FILE).display()
            )))
        }
        Err(e) => Err(CliError::runtime(e)),
    }
}

/// Rebuilds the split from `split.json` when present, else from the config.
fn reload_split(config: &ExperimentConfig, source: &Source) -> CliResult<OpenSetSplit> {
    let path = config.output_dir.join(SPLIT_FILE);
    if !path.exists() {
        return build_split(config, source);
    }
    let manifest: SplitManifest =
        serde_json::from_str(&read_file(&path)?).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    if manifest.mode != source.split_source().mode() {
        return Err(CliError::Runtime(format!(
            "{} was written for {:?} mode but the dataset gives {:?}",
            path.display(),
            manifest.mode,
            config.split_mode()
        )));
    }
    apply_manifest(source.split_source(), manifest).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

pub fn eval_run(config: &ExperimentConfig, model_path: Option<&Path>, out: &mut dyn Write) -> CliResult<EvalReport> {
    config.validate()?;
    let dir = &config.output_dir;
    let model_path = model_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| dir.join(MODEL_FILE));
    let model: TrainedModel =
        load_model(&model_path).map_err(|e| CliError::Runtime(format!("{}: {e}", model_path.display())))?;
    let source = load_source(config)?;
    let split = reload_split(config, &source)?;
    if model.network.input_dim() != split.test.features.ncols() {
        return Err(CliError::Runtime(format!(
            "model expects {} features, data has {}",
            model.network.input_dim(),
            split.test.features.ncols()
        )));
    }
    let (report, roc) = evaluate(&model, &split.test).map_err(CliError::runtime)?;
    fs::create_dir_all(dir).map_err(CliError::runtime)?;
    write_file(&dir.join(REPORT_JSON), report.to_json())?;
    write_file(&dir.join(REPORT_CSV), report.to_csv())?;
    write_file(&dir.join(ROC_FILE), roc_points_csv(&roc))?;
    write!(out, "{}", report.to_table()).map_err(CliError::runtime)?;
    Ok(report)
}

/// Per-row outcome of `predict`.
#[derive(Debug, PartialEq)]
pub struct PredictSummary {
    pub predicted: usize,
    /// `(1-based row, message)` of every skipped row.
    pub malformed: Vec<(usize, String)>,
}

/// Reads raw feature rows (already in the model's feature space, one
/// instance per line, comma separated) and writes
/// `row,label,score,p_0,..,p_{K-1}`.
pub fn predict(
    model_path: &Path,
    input: &mut dyn BufRead,
    has_header: bool,
    out: &mut dyn Write,
    errors: &mut dyn Write,
) -> CliResult<PredictSummary> {
    let model: TrainedModel =
        load_model(model_path).map_err(|e| CliError::Runtime(format!("{}: {e}", model_path.display())))?;
    let width = model.network.input_dim();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut writer = csv::Writer::from_writer(out);
    let mut header = vec!["row".to_string(), "label".to_string(), "score".to_string()];
    header.extend(model.class_means.class_ids.iter().map(|c| format!("p_{c}")));
    writer.write_record(&header).map_err(CliError::runtime)?;

    let mut summary = PredictSummary {
        predicted: 0,
        malformed: Vec::new(),
    };
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let parsed = record.map_err(|e| e.to_string()).and_then(|r| {
            if r.len() != width {
                return Err(format!("expected {width} fields, found {}", r.len()));
            }
            r.iter()
                .enumerate()
                .map(|(col, f)| match f.parse::<f64>() {
                    Ok(v) if v.is_finite() => Ok(v),
                    _ => Err(format!("column {}: {f:?} is not a finite number", col + 1)),
                })
                .collect::<Result<Vec<f64>, String>>()
        });
        let features = match parsed {
            Ok(v) => Array1::from(v),
            Err(message) => {
                writeln!(errors, "row {row}: {message}").map_err(CliError::runtime)?;
                summary.malformed.push((row, message));
                continue;
            }
        };
        let p = model.predict_open(features.view()).map_err(CliError::runtime)?;
        let mut fields = vec![row.to_string(), p.label.to_string(), p.score.to_string()];
        fields.extend(p.probs.iter().map(f64::to_string));
        writer.write_record(&fields).map_err(CliError::runtime)?;
        summary.predicted += 1;
    }
    writer.flush().map_err(CliError::runtime)?;
    Ok(summary)
}

/// One row of a comparison table.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub metric: String,
    pub mean_a: f64,
    pub mean_b: f64,
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

fn load_report(path: &Path) -> CliResult<EvalReport> {
    let path = if path.is_dir() {
        path.join(REPORT_JSON)
    } else {
        path.to_path_buf()
    };
    EvalReport::from_json(&read_file(&path)?).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Welch t-test per metric shared by every report. Each path is a
/// `report.json` or a run directory holding one.
pub fn compare(a: &[PathBuf], b: &[PathBuf]) -> CliResult<Vec<Comparison>> {
    if a.len() < 2 || b.len() < 2 {
        return Err(ConfigError::field(
            "compare",
            format!("need at least 2 runs per side, got {} and {}", a.len(), b.len()),
        )
        .into());
    }
    let load = |paths: &[PathBuf]| {
        paths
            .iter()
            .map(|p| load_report(p).map(|r| r.record_map()))
            .collect::<CliResult<Vec<_>>>()
    };
    let (ra, rb) = (load(a)?, load(b)?);
    let mut keys: BTreeSet<&String> = ra[0].keys().collect();
    for r in ra.iter().chain(&rb) {
        keys.retain(|k| r.contains_key(*k));
    }
    if keys.is_empty() {
        return Err(ConfigError::field("compare", "the reports share no metric").into());
    }
    let mut rows = Vec::new();
    for key in keys {
        let xa: Vec<f64> = ra.iter().map(|r| r[key]).collect();
        let xb: Vec<f64> = rb.iter().map(|r| r[key]).collect();
        let (mean_a, mean_b) = (mean(&xa), mean(&xb));
        let (t, df, p) = match welch_t_test(&xa, &xb) {
            Ok(tt) => (tt.t, tt.df, tt.p),
            Err(_) if !(mean_a.is_finite() && mean_b.is_finite()) => (f64::NAN, f64::NAN, f64::NAN),
            Err(_) if mean_a == mean_b => (0.0, f64::NAN, 1.0),
            Err(_) => (
                if mean_a > mean_b {
                    f64::INFINITY
                } else {
                    f64::NEG_INFINITY
                },
                f64::NAN,
                0.0,
            ),
        };
        rows.push(Comparison {
            metric: key.clone(),
            mean_a,
            mean_b,
            t,
            df,
            p,
        });
    }
    Ok(rows)
}

pub fn comparison_csv(rows: &[Comparison]) -> String {
    let mut s = String::from("metric,mean_a,mean_b,t,df,p\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.metric, r.mean_a, r.mean_b, r.t, r.df, r.p);
    }
    s
}

pub fn comparison_table(rows: &[Comparison]) -> String {
    let mut s = format!(
        "{:<20} {:>10} {:>10} {:>9} {:>8} {:>8}\n",
        "metric", "mean a", "mean b", "t", "df", "p"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<20} {:>10.4} {:>10.4} {:>9.3} {:>8.2} {:>8.4}",
            r.metric, r.mean_a, r.mean_b, r.t, r.df, r.p
        );
    }
    s
}

pub fn stdin_reader() -> Box<dyn BufRead> {
    Box::new(io::BufReader::new(io::stdin()))
}
