use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dha_core::analysis::{head_similarity_matrix, layer_redundancy};
use dha_core::attention::HeadKind;
use dha_core::checkpoint::{load_checkpoint, TopologyVariant};
use serde_json::Value;

const TINY: &[&str] = &[
    "--vocab",
    "8",
    "--seq-len",
    "12",
    "--layers",
    "2",
    "--heads",
    "4",
    "--head-dim",
    "2",
    "--steps",
    "30",
    "--lr",
    "1e-2",
    "--eval-every",
    "10",
];

const FAST: &[&str] = &[
    "--search-steps",
    "6",
    "--fusion-steps",
    "20",
    "--warmup",
    "10",
    "--ct-steps",
    "12",
    "--eval-every",
    "4",
    "--lr-model",
    "1e-3",
];

fn dha(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dha"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("DHA_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn train(out: &Path, extra: &[&str]) -> String {
    let mut args = vec!["train-baseline"];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    ok(dha(out, &args))
}

fn pipeline(cmd: &str, out: &Path, ckpt: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--checkpoint", ckpt.to_str().unwrap()];
    args.extend_from_slice(FAST);
    args.extend_from_slice(extra);
    dha(out, &args)
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn csv_rows(path: &Path) -> (String, Vec<Vec<String>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().to_string();
    (
        header,
        lines
            .map(|l| l.split(',').map(String::from).collect())
            .collect(),
    )
}

#[test]
fn train_baseline_creates_dirs_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("nested/a");
    let b = dir.path().join("b");
    let stdout = train(&a, &["--seed", "5"]);
    assert!(stdout.contains("final validation loss"));
    train(&b, &["--seed", "5"]);
    let (ca, cb) = (
        fs::read(a.join("baseline.dha")).unwrap(),
        fs::read(b.join("baseline.dha")).unwrap(),
    );
    assert_eq!(ca, cb);
    let (header, rows) = csv_rows(&a.join("baseline_curve.csv"));
    assert_eq!(header, "step,train_loss,val_loss");
    assert_eq!(rows.last().unwrap()[0], "30");
    assert_eq!(json(&a.join("metrics.json"))[0]["phase"], "baseline");

    let c = dir.path().join("c");
    train(&c, &["--seed", "6"]);
    assert_ne!(ca, fs::read(c.join("baseline.dha")).unwrap());
}

#[test]
fn zero_vocab_fails_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    let res = dha(&out, &["train-baseline", "--vocab", "0"]);
    assert!(!res.status.success());
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("configuration error"), "{err}");
    assert!(!out.exists());
}

#[test]
fn out_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("from-env");
    let mut args = vec!["train-baseline"];
    args.extend_from_slice(TINY);
    let res = Command::new(env!("CARGO_BIN_EXE_dha"))
        .args(&args)
        .env("DHA_OUT_DIR", &out)
        .output()
        .unwrap();
    ok(res);
    assert!(out.join("baseline.dha").exists());
}

#[test]
fn analyze_writes_similarity_and_redundancy() {
    let dir = tempfile::tempdir().unwrap();
    train(dir.path(), &["--planted-groups", "1"]);
    let an = dir.path().join("an");
    let ckpt = dir.path().join("baseline.dha");
    ok(dha(
        &an,
        &["analyze", "--checkpoint", ckpt.to_str().unwrap()],
    ));

    let (header, rows) = csv_rows(&an.join("redundancy.csv"));
    assert_eq!(header, "layer,q,k,v");
    assert_eq!(rows.len(), 2);
    let model = load_checkpoint::<f64>(&ckpt).unwrap().model;
    for (l, row) in rows.iter().enumerate() {
        // one shared key/value head expanded to all query heads
        assert_eq!(row[2], "1.0");
        assert_eq!(row[3], "1.0");
        let q = layer_redundancy(&head_similarity_matrix(&model.attn, l, HeadKind::Query).unwrap())
            .unwrap();
        assert_eq!(row[1].parse::<f64>().unwrap(), q);
        for kind in ["q", "k", "v"] {
            let (h, m) = csv_rows(&an.join(format!("similarity/layer{l}_{kind}.csv")));
            assert_eq!(h, "head,0,1,2,3");
            assert_eq!(m.len(), 4);
        }
    }
}

#[test]
fn analyze_rejects_missing_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let res = dha(
        dir.path(),
        &["analyze", "--checkpoint", "does-not-exist.dha"],
    );
    assert!(!res.status.success());
}

#[test]
fn transform_halves_the_cache_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    train(dir.path(), &[]);
    let ckpt = dir.path().join("baseline.dha");
    let a = dir.path().join("ta");
    let b = dir.path().join("tb");
    ok(pipeline(
        "transform",
        &a,
        &ckpt,
        &["--kv-budget", "0.5", "--seed", "3"],
    ));
    ok(pipeline(
        "transform",
        &b,
        &ckpt,
        &["--kv-budget", "0.5", "--seed", "3"],
    ));

    let summary = json(&a.join("summary.json"));
    assert_eq!(summary["kv_ratio"], 0.5);
    assert_eq!(summary["kv_budget_total"], 8);
    assert_eq!(
        fs::read(a.join("summary.json")).unwrap(),
        fs::read(b.join("summary.json")).unwrap()
    );
    assert_eq!(
        fs::read(a.join("model.dha")).unwrap(),
        fs::read(b.join("model.dha")).unwrap()
    );

    let (header, _) = csv_rows(&a.join("fusion_trace.csv"));
    assert_eq!(header, "step,lm_loss,fusion_loss,margin,lambda");
    let (header, rows) = csv_rows(&a.join("layer_losses.csv"));
    assert_eq!(header, "layer,key_loss,value_loss,key_heads,value_heads");
    assert_eq!(rows.len(), 2);
    let report = json(&a.join("search_report.json"));
    let layers = report["layers"].as_array().unwrap();
    assert_eq!(layers.len(), 4);
    for entry in layers {
        assert!(a.join(entry["score_matrix"].as_str().unwrap()).exists());
    }
    let metrics = json(&a.join("metrics.json"));
    let phases: Vec<&str> = metrics
        .as_array()
        .unwrap()
        .iter()
        .map(|m| m["phase"].as_str().unwrap())
        .collect();
    assert_eq!(phases, ["mha", "fusion", "materialize", "ct"]);

    let model = load_checkpoint::<f64>(a.join("model.dha")).unwrap();
    let heads = model.model.topology.total_key_heads() + model.model.topology.total_value_heads();
    assert_eq!(heads, 8);
}

#[test]
fn transform_gqa_baseline_writes_grouped_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    train(dir.path(), &[]);
    let ckpt = dir.path().join("baseline.dha");
    let out = dir.path().join("gqa");
    ok(pipeline(
        "transform",
        &out,
        &ckpt,
        &["--kv-budget", "0.5", "--baseline", "gqa"],
    ));
    let loaded = load_checkpoint::<f64>(out.join("model.dha")).unwrap();
    assert_eq!(loaded.variant(), TopologyVariant::Gqa);
    assert_eq!(json(&out.join("summary.json"))["baseline"], "gqa");
    assert!(!out.join("fusion_trace.csv").exists());

    // a grouped checkpoint is not a valid transform input
    let res = pipeline(
        "transform",
        &dir.path().join("again"),
        &out.join("model.dha"),
        &[],
    );
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("load stage"));
}

#[test]
fn transform_rejects_bad_budgets() {
    let dir = tempfile::tempdir().unwrap();
    train(dir.path(), &[]);
    let ckpt = dir.path().join("baseline.dha");
    for budget in ["0.3", "0", "7", "17"] {
        let res = pipeline(
            "transform",
            &dir.path().join("bad"),
            &ckpt,
            &["--kv-budget", budget],
        );
        assert!(!res.status.success(), "budget {budget} accepted");
    }
}

#[test]
fn compare_writes_paired_curves() {
    let dir = tempfile::tempdir().unwrap();
    train(dir.path(), &[]);
    let ckpt = dir.path().join("baseline.dha");
    let out = dir.path().join("cmp");
    let stdout = ok(pipeline("compare", &out, &ckpt, &["--kv-budget", "0.5"]));
    let (header, rows) = csv_rows(&out.join("compare.csv"));
    assert_eq!(header, "step,dha_loss,gqa_loss");
    assert_eq!(rows.len(), 4);
    assert!(stdout.contains("checkpoints"));
    assert!(out.join("dha_summary.json").exists() && out.join("gqa_summary.json").exists());
}

#[test]
fn full_budget_arms_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    train(dir.path(), &[]);
    let ckpt = dir.path().join("baseline.dha");
    let out = dir.path().join("cmp");
    ok(pipeline("compare", &out, &ckpt, &["--kv-budget", "1"]));
    let (_, rows) = csv_rows(&out.join("compare.csv"));
    assert!(!rows.is_empty());
    for r in rows {
        assert_eq!(r[1], r[2], "arms diverged at step {}", r[0]);
    }
    let mha = json(&out.join("dha_summary.json"))["mha_val_loss"].clone();
    assert_eq!(json(&out.join("dha_summary.json"))["initial_val_loss"], mha);
}
