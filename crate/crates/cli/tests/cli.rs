use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use due_cli::manifest::RunManifest;
use due_cli::modelfile::ModelFile;

fn due(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_due"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

const SMALL_MOONS: &str = r#"
seed = 7
[data]
kind = "two-moons"
n = 120
seed = 0
[model]
feature_dim = 32
depth = 2
[train]
epochs = 30
batch_size = 32
"#;

fn train(dir: &Path, cfg: &Path, out: &str) -> RunManifest {
    let out = dir.join(out);
    let o = due(&["train", "--config", s(cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    RunManifest::read(&out.join("manifest.json")).unwrap()
}

#[test]
fn train_writes_artifacts_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "moons.toml", SMALL_MOONS);
    let a = train(dir.path(), &cfg, "a");
    for f in ["model.due", "manifest.json", "train_log.csv"] {
        assert!(dir.path().join("a").join(f).exists(), "{f} missing");
    }
    assert!(a.metrics.contains_key("train_accuracy"));
    assert_eq!(a.datasets[0].generator, "two_moons");
    let b = train(dir.path(), &cfg, "b");
    assert_eq!(a.metrics, b.metrics);
    let bytes = |d: &str| std::fs::read(dir.path().join(d).join("model.due")).unwrap();
    assert_eq!(bytes("a"), bytes("b"));

    // The manifest alone reproduces the run.
    let c = train(dir.path(), &dir.path().join("a").join("manifest.json"), "c");
    assert_eq!(a.metrics, c.metrics);
    assert_eq!(bytes("a"), bytes("c"));
}

#[test]
fn config_errors_exit_2_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", "[data]\nkind = \"gap\"\n[model]\nfeature_dims = 3\n");
    let o = due(&["train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("model.feature_dims"), "{}", stderr(&o));

    let cfg = write_config(dir.path(), "bad2.toml", "[data]\nkind = \"gap\"\n[train]\nlr = 0.0\n");
    let o = due(&["train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.lr"), "{}", stderr(&o));
}

#[test]
fn eval_is_stable_and_survives_a_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "moons.toml", SMALL_MOONS);
    train(dir.path(), &cfg, "run");
    let model = dir.path().join("run").join("model.due");

    let copy = dir.path().join("copy.due");
    ModelFile::load(&model).unwrap().save(&copy).unwrap();
    assert_eq!(std::fs::read(&model).unwrap(), std::fs::read(&copy).unwrap());

    let mut outputs = Vec::new();
    for (m, name) in [(&model, "a.csv"), (&copy, "b.csv")] {
        let out = dir.path().join(name);
        let o = due(&["eval", "--model", s(m), "--grid", "-3,3,-3,3", "--resolution", "7", "--out", s(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        outputs.push(std::fs::read_to_string(out).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    let mut lines = outputs[0].lines();
    assert_eq!(lines.next(), Some("x0,x1,p0,p1,entropy,predicted"));
    assert_eq!(lines.count(), 49);

    let out = dir.path().join("train_pred.csv");
    let o = due(&["eval", "--model", s(&model), "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(out).unwrap().lines().count(), 121);
}

#[test]
fn eval_rejects_an_unknown_format_version() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "moons.toml", SMALL_MOONS);
    train(dir.path(), &cfg, "run");
    let mut bytes = std::fs::read(dir.path().join("run").join("model.due")).unwrap();
    bytes[8..12].copy_from_slice(&99u32.to_le_bytes());
    let bad = dir.path().join("bad.due");
    std::fs::write(&bad, bytes).unwrap();
    let o = due(&["eval", "--model", s(&bad), "--grid", "0,1,0,1", "--out", s(&dir.path().join("x.csv"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("version 99"), "{}", stderr(&o));
}

#[test]
fn csv_regression_with_treatment_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = due_core::datasets::gen_synthetic_cate(due_core::datasets::CateConfig::new(80), 3).unwrap();
    let schema = due_core::datasets::CsvSchema::default_for(&ds);
    due_core::datasets::write_csv(&ds, &schema, &dir.path().join("cate.csv")).unwrap();
    let features: Vec<String> = (0..8).map(|j| format!("\"x{j}\"")).collect();
    let cfg = write_config(
        dir.path(),
        "csv.toml",
        &format!(
            "[data]\nkind = \"csv\"\npath = \"cate.csv\"\nfeatures = [{}]\ntargets = [\"y0\"]\ntreatment = \"t\"\ncate = \"cate\"\ntask = \"regression\"\nstandardize = true\n[model]\nfeature_dim = 16\ndepth = 2\nnum_inducing = 8\n[train]\noptimizer = \"adam\"\nepochs = 5\n",
            features.join(", ")
        ),
    );
    let man = train(dir.path(), &cfg, "run");
    assert!(man.metrics["cate_rmse"].is_finite());
    let out = dir.path().join("pred.csv");
    let o = due(&[
        "eval",
        "--model",
        s(&dir.path().join("run").join("model.due")),
        "--csv",
        s(&dir.path().join("cate.csv")),
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(out).unwrap();
    let header = text.lines().next().unwrap();
    assert!(header.ends_with("t,mean,latent_var,noise_var,total_var,cate_mean,cate_var"), "{header}");
    assert_eq!(text.lines().count(), 81);
}

#[test]
fn check_passes_and_names_an_injected_fault() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.json");
    let o = due(&["check", "--report", s(&report)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    for name in ["grad/matmul", "grad/elbo_matern32_softmax", "oracle/elbo_gap", "lipschitz/layer_sigma"] {
        assert!(stdout.contains(&format!("PASS {name}")), "{name} missing");
    }
    let parsed: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
    assert!(parsed.as_array().unwrap().iter().all(|r| r["passed"] == true));

    let o = due(&["check", "--inject-fault", "softplus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("grad/softplus"), "{}", stderr(&o));

    let o = due(&["check", "--inject-fault", "frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_demo_lists_valid_names() {
    let o = due(&["demo", "three-moons"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    for name in ["two-moons", "gap-1d", "collapse", "rff-compare", "cate-deferral"] {
        assert!(err.contains(name), "{err}");
    }
}

fn header_of(path: &Path) -> Vec<String> {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines().next().unwrap().split(',').map(str::to_string).collect()
}

#[test]
fn quick_demos_emit_labeled_series() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = due(&["demo", name, "--quick", "--out", s(&out)]);
        assert!(o.status.success(), "{name}: {}", stderr(&o));
        let man = RunManifest::read(&out.join("manifest.json")).unwrap();
        assert_eq!(man.command, format!("demo {name}"));
        out
    };

    let out = run("rff-compare");
    let h = header_of(&out.join("series.csv"));
    assert_eq!(h[0], "x");
    assert_eq!(h.len(), 9, "{h:?}");
    for model in ["due", "rff"] {
        assert_eq!(h.iter().filter(|c| c.starts_with(model)).count(), 4);
    }

    let out = run("collapse");
    let h = header_of(&out.join("collapse_metrics.csv"));
    assert!(h.contains(&"star_distance_normalized".to_string()));
    let rows = std::fs::read_to_string(out.join("collapse_metrics.csv")).unwrap();
    assert!(rows.contains("\nconstrained,") && rows.contains("\nunconstrained,"));

    let out = run("cate-deferral");
    let table = std::fs::read_to_string(out.join("deferral_table.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "policy,rate,mean_rmse,std_err,trials");
    assert_eq!(lines.len(), 5);
    for prefix in ["random,0.1,", "random,0.5,", "uncertainty,0.1,", "uncertainty,0.5,"] {
        assert!(lines.iter().any(|l| l.starts_with(prefix)), "{prefix}");
    }

    let out = run("two-moons");
    let h = header_of(&out.join("uncertainty_grid.csv"));
    assert_eq!(h, ["x0", "x1", "softmax_p1", "softmax_entropy", "gpdnn_p1", "gpdnn_entropy", "due_p1", "due_entropy"]);

    let out = run("gap-1d");
    assert_eq!(header_of(&out.join("predictions.csv")).len(), 7);
}

#[test]
fn demo_reruns_reproduce_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let metrics = |sub: &str| {
        let out = dir.path().join(sub);
        let o = due(&["demo", "gap-1d", "--quick", "--out", s(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        RunManifest::read(&out.join("manifest.json")).unwrap().metrics
    };
    assert_eq!(metrics("a"), metrics("b"));
}
