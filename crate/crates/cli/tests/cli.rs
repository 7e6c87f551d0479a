use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use iiloss::data::idx::{encode_images, encode_labels, IdxImages};
use iiloss::eval::EvalReport;
use tempfile::TempDir;

const BLOBS: &str = r#"
seed = 11
output_dir = "run"

[dataset]
format = "blobs"
classes = 4
n_per_class = 120
dim = 2
center_spacing = 10.0
sigma = 0.3
outlier_classes = 2

[split]
known_ids = [0, 1, 2, 3]

[network]
hidden = [16]
keep_prob = 1.0

[train]
iterations = 300
batch_size = 64
learning_rate = 0.01
"#;

fn iiloss(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iiloss"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn run_ok(args: &[&str]) -> Output {
    let o = iiloss(args);
    assert!(o.status.success(), "{args:?} failed: {}", stderr(&o));
    o
}

#[test]
fn train_then_eval_writes_the_run_directory() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "exp.toml", BLOBS);
    let cfg = cfg.to_str().unwrap();
    run_ok(&["train", "--config", cfg]);
    let o = run_ok(&["eval", "--config", cfg]);
    assert!(stdout(&o).contains("AUC"));

    let run = dir.path().join("run");
    for f in [
        "config.toml",
        "split.json",
        "model.iim",
        "curves.csv",
        "report.json",
        "report.csv",
        "roc_points.csv",
    ] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    let curves = fs::read_to_string(run.join("curves.csv")).unwrap();
    assert_eq!(curves.lines().next(), Some("iteration,intra,inter,ii,ce"));
    assert_eq!(curves.lines().count(), 301);
    let report = EvalReport::from_json(&fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    assert!(report.auc_100 > 0.95, "{}", report.auc_100);
    assert_eq!(report.unknown_instances, 240);
    let csv = fs::read_to_string(run.join("report.csv")).unwrap();
    assert!(csv.starts_with("key,value\nauc_100,"));
    assert!(csv.contains("\nf1_unknown,"));

    let saved = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(saved.contains("known_ids = [0, 1, 2, 3]"));
}

#[test]
fn runs_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "exp.toml", &BLOBS.replace("\"ii\"", "\"ii_ce\""));
    let cfg = cfg.to_str().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        run_ok(&[
            "train",
            "--config",
            cfg,
            "--regime",
            "ii_ce",
            "--output-dir",
            out.to_str().unwrap(),
        ]);
        run_ok(&[
            "eval",
            "--config",
            cfg,
            "--regime",
            "ii_ce",
            "--output-dir",
            out.to_str().unwrap(),
        ]);
    }
    for f in ["split.json", "model.iim", "curves.csv", "report.json", "roc_points.csv"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
    let curves = fs::read_to_string(a.join("curves.csv")).unwrap();
    assert!(!curves.lines().nth(1).unwrap().ends_with(','), "ce column filled");
}

#[test]
fn overrides_change_the_run() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "exp.toml", BLOBS);
    run_ok(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--iterations",
        "20",
        "--seed",
        "5",
    ]);
    let run = dir.path().join("run");
    assert_eq!(fs::read_to_string(run.join("curves.csv")).unwrap().lines().count(), 21);
    let saved = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(saved.contains("seed = 5"));
    assert!(saved.contains("iterations = 20"));
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "exp.toml",
        &BLOBS.replace("iterations = 300", "iteratons = 300"),
    );
    let o = iiloss(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("iteratons"), "{}", stderr(&o));
}

#[test]
fn too_many_known_classes_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "exp.toml",
        &BLOBS.replace("known_ids = [0, 1, 2, 3]", "known = 6"),
    );
    let o = iiloss(&["split", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("split.known"), "{}", stderr(&o));
    assert!(!dir.path().join("run").exists());
}

#[test]
fn invalid_field_named_in_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "exp.toml",
        &BLOBS.replace("keep_prob = 1.0", "keep_prob = 0.0"),
    );
    let o = iiloss(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("network.keep_prob"), "{}", stderr(&o));

    let missing = BLOBS
        .replace("format = \"blobs\"", "format = \"csv\"\npath = \"nowhere.csv\"")
        .replace(
            "classes = 4\nn_per_class = 120\ndim = 2\ncenter_spacing = 10.0\nsigma = 0.3\noutlier_classes = 2\n",
            "",
        );
    let cfg = write_config(dir.path(), "missing.toml", &missing);
    let o = iiloss(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("dataset.path"), "{}", stderr(&o));
}

#[test]
fn divergence_exits_nonzero_with_partial_curves() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "exp.toml", BLOBS);
    let o = iiloss(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--learning-rate",
        "1e200",
        "--iterations",
        "200",
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"), "{}", stderr(&o));
    let curves = fs::read_to_string(dir.path().join("run/curves.csv")).unwrap();
    assert!(curves.starts_with("iteration,intra,inter,ii,ce\n"));
    assert!(!dir.path().join("run/model.iim").exists());
}

#[test]
fn eval_without_a_model_is_a_runtime_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "exp.toml", BLOBS);
    let o = iiloss(&["eval", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("model.iim"));
}

#[test]
fn predict_skips_malformed_rows() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "exp.toml", BLOBS);
    run_ok(&["train", "--config", cfg.to_str().unwrap()]);
    let input = dir.path().join("rows.csv");
    // Known centers sit at (0,0), (10,0), (0,10), (10,10).
    fs::write(&input, "0.1,0.0\n1.0,abc\n10.0,10.1\n1.0\n500.0,-500.0\n").unwrap();
    let model = dir.path().join("run/model.iim");
    let o = run_ok(&[
        "predict",
        "--model",
        model.to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
    ]);
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "row,label,score,p_0,p_1,p_2,p_3");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("1,0,"), "{}", lines[1]);
    assert!(lines[2].starts_with("3,3,"), "{}", lines[2]);
    assert!(lines[3].starts_with("5,unknown,"), "{}", lines[3]);
    let err = stderr(&o);
    assert!(err.contains("row 2:"), "{err}");
    assert!(err.contains("row 4:"), "{err}");

    let out_path = dir.path().join("pred.csv");
    run_ok(&[
        "predict",
        "--model",
        model.to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
        "--output",
        out_path.to_str().unwrap(),
    ]);
    assert_eq!(fs::read_to_string(out_path).unwrap(), out);
}

#[test]
fn compare_runs() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "exp.toml", BLOBS);
    let cfg = cfg.to_str().unwrap();
    let mut runs = Vec::new();
    for (regime, seed) in [("ii", "1"), ("ii", "2"), ("ce", "1"), ("ce", "2")] {
        let out = dir.path().join(format!("{regime}-{seed}"));
        let out_s = out.to_str().unwrap();
        let args = [
            "--config",
            cfg,
            "--regime",
            regime,
            "--seed",
            seed,
            "--iterations",
            "100",
            "--output-dir",
            out_s,
        ];
        run_ok(&[&["train"], &args[..]].concat());
        run_ok(&[&["eval"], &args[..]].concat());
        runs.push(out);
    }
    let r: Vec<&str> = runs.iter().map(|p| p.to_str().unwrap()).collect();
    let csv = dir.path().join("cmp.csv");
    let o = run_ok(&[
        "compare",
        "--a",
        r[0],
        r[1],
        "--b",
        r[2],
        r[3],
        "--output",
        csv.to_str().unwrap(),
    ]);
    assert!(stdout(&o).contains("auc_100"));
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next(), Some("metric,mean_a,mean_b,t,df,p"));
    let row = text.lines().find(|l| l.starts_with("test_instances,")).unwrap();
    assert!(row.ends_with(",0,NaN,1"), "{row}");

    let o = iiloss(&["compare", "--a", r[0], "--b", r[2], r[3]]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn compare_reads_report_files() {
    let dir = TempDir::new().unwrap();
    let report = |auc: f64| {
        format!(
            r#"{{"auc_100":{auc},"auc_10":0.05,"cap":0.1,"macro_precision":0.9,"macro_recall":0.9,"macro_f":0.9,
            "closed_accuracy":0.9,"threshold":1.0,"test_instances":10,"unknown_instances":2,"per_label":[],"confusion":[]}}"#
        )
    };
    let paths: Vec<PathBuf> = [0.90, 0.92, 0.80, 0.81]
        .iter()
        .enumerate()
        .map(|(i, auc)| write_config(dir.path(), &format!("r{i}.json"), &report(*auc)))
        .collect();
    let p: Vec<&str> = paths.iter().map(|p| p.to_str().unwrap()).collect();
    let o = run_ok(&["compare", "--a", p[0], p[1], "--b", p[2], p[3]]);
    let line = stdout(&o)
        .lines()
        .find(|l| l.starts_with("auc_100"))
        .unwrap()
        .to_string();
    assert!(line.contains("0.9100") && line.contains("0.8050"), "{line}");

    let bad = write_config(dir.path(), "bad.json", "{}");
    let o = iiloss(&["compare", "--a", p[0], bad.to_str().unwrap(), "--b", p[2], p[3]]);
    assert_eq!(o.status.code(), Some(1));
}

fn write_idx(dir: &Path, stem: &str, labels: &[u8]) -> (PathBuf, PathBuf) {
    let pixels: Vec<u8> = labels
        .iter()
        .enumerate()
        .flat_map(|(i, &l)| {
            (0..4).map(move |p| {
                if p == l as usize % 4 {
                    200 + (i % 50) as u8
                } else {
                    (i % 7) as u8
                }
            })
        })
        .collect();
    let images = IdxImages {
        count: labels.len(),
        rows: 2,
        cols: 2,
        pixels,
    };
    let img = dir.join(format!("{stem}-images"));
    let lab = dir.join(format!("{stem}-labels"));
    fs::write(&img, encode_images(&images)).unwrap();
    fs::write(&lab, encode_labels(labels)).unwrap();
    (img, lab)
}

#[test]
fn idx_fixed_test_split() {
    let dir = TempDir::new().unwrap();
    let train: Vec<u8> = (0..120).map(|i| (i % 4) as u8).collect();
    let test: Vec<u8> = (0..40).map(|i| (i % 4) as u8).collect();
    write_idx(dir.path(), "train", &train);
    write_idx(dir.path(), "test", &test);
    let cfg = r#"
seed = 2
output_dir = "run"

[dataset]
format = "idx"
train_images = "train-images"
train_labels = "train-labels"
test_images = "test-images"
test_labels = "test-labels"

[split]
known = 3
"#;
    let cfg = write_config(dir.path(), "idx.toml", cfg);
    let o = run_ok(&["split", "--config", cfg.to_str().unwrap()]);
    assert!(stdout(&o).contains("test 40 (10 unknown)"), "{}", stdout(&o));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("run/split.json")).unwrap()).unwrap();
    assert_eq!(manifest["mode"], "fixed-test");
    assert_eq!(manifest["test"].as_array().unwrap().len(), 40);
}

#[test]
fn bundled_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["mnist.toml", "blobs.toml"] {
        let c = iiloss_cli::config::ExperimentConfig::load(&root.join(name)).unwrap();
        assert!(c.output_dir.ends_with("runs/mnist-ii-0") || c.output_dir.ends_with("runs/blobs"));
    }
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("run");
    let o = run_ok(&[
        "split",
        "--config",
        root.join("blobs.toml").to_str().unwrap(),
        "--output-dir",
        out.to_str().unwrap(),
    ]);
    assert!(stdout(&o).contains("known classes [0, 1, 2, 3]"));
}
