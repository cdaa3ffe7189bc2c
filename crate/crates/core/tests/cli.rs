use std::path::Path;
use std::process::{Command, Output};

use radlabel::corpus::{read_corpus, Report};
use radlabel::trainer::EpochRecord;
use serde_json::Value;

fn radlabel(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_radlabel"));
    cmd.current_dir(dir).args(args).env("RADLABEL_LOG_LEVEL", "warn");
    for (k, _) in std::env::vars() {
        if k.starts_with("RADLABEL_") && k != "RADLABEL_LOG_LEVEL" {
            cmd.env_remove(k);
        }
    }
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = radlabel(dir, args, &[]);
    assert!(
        out.status.success(),
        "{args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const SMALL: &[&str] = &["--d-model", "16", "--layers", "1", "--heads", "2", "--max-len", "48"];

fn prepare(dir: &Path, n: &str) {
    ok(dir, &["generate", "--n", n]);
    ok(dir, &["split"]);
}

#[test]
fn pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    prepare(dir, "240");
    let mut args = vec!["train", "--epochs", "3", "--lr", "1e-3"];
    args.extend_from_slice(SMALL);
    ok(dir, &args);
    for f in [
        "model.ckpt",
        "initial.ckpt",
        "vocab.txt",
        "history.jsonl",
        "train.manifest.json",
    ] {
        assert!(dir.join("runs/train").join(f).exists(), "missing {f}");
    }

    // Step decay: lr_e = lr_0 * 0.97^e.
    let history: Vec<EpochRecord> = radlabel::jsonl::read(&dir.join("runs/train/history.jsonl")).unwrap();
    assert_eq!(history.len(), 3);
    for (e, r) in history.iter().enumerate() {
        let expected = 1e-3 * 0.97f64.powi(e as i32);
        assert!(
            (r.learning_rate - expected).abs() <= 1e-15 * expected,
            "{e}: {}",
            r.learning_rate
        );
        assert_eq!(r.seed, 42);
    }

    let table = ok(dir, &["evaluate", "--name", "fine-tuned"]);
    assert!(table.contains("fine-tuned"));
    assert_eq!(std::fs::read_to_string(dir.join("runs/eval/table.txt")).unwrap(), table);
    let records: Vec<Value> = radlabel::jsonl::read(&dir.join("runs/eval/metrics.jsonl")).unwrap();
    assert_eq!(records.len(), 1);
    let c = &records[0]["counts"];
    let total = ["tp", "fp", "tn", "fn"]
        .iter()
        .map(|k| c[k].as_u64().unwrap())
        .sum::<u64>();
    let test = read_corpus(&dir.join("data/split/test.jsonl")).unwrap();
    assert_eq!(total as usize, test.len());

    ok(
        dir,
        &["baseline", "--kind", "linear", "--embedding-epochs", "2", "--dim", "16"],
    );
    for f in ["embeddings.ckpt", "linear.ckpt", "table.txt", "metrics.jsonl"] {
        assert!(dir.join("runs/baseline").join(f).exists(), "missing {f}");
    }

    for stage in ["pre-finetune", "post-finetune", "word2vec"] {
        ok(
            dir,
            &["project", "--stage", stage, "--perplexity", "5", "--iterations", "300"],
        );
        let pts: Vec<Value> = radlabel::jsonl::read(&dir.join(format!("runs/projections/{stage}.jsonl"))).unwrap();
        assert_eq!(pts.len(), test.len());
        assert_eq!(pts[0]["predicted_prob"].is_null(), stage == "word2vec");
    }

    ok(dir, &["export-attention"]);
    let att: Vec<Value> = radlabel::jsonl::read(&dir.join("runs/attention.jsonl")).unwrap();
    assert_eq!(att.len(), test.len());
    for a in &att {
        let alphas: Vec<f64> = serde_json::from_value(a["alphas"].clone()).unwrap();
        assert_eq!(alphas.len(), a["tokens"].as_array().unwrap().len());
        assert!((alphas.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    let m = json(&dir.join("runs/train/train.manifest.json"));
    assert_eq!(m["status"], "ok");
    assert_eq!(m["seeds"]["train"], 42);
    assert!(m["config_hash"].as_str().is_some_and(|h| !h.is_empty()));
    assert!(m["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .any(|o| o.as_str().unwrap().ends_with("model.ckpt")));
}

#[test]
fn per_category_models_combine_in_evaluation() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    prepare(dir, "120");
    let mut args = vec![
        "train",
        "--task",
        "granular",
        "--per-category",
        "--epochs",
        "1",
        "--lr",
        "1e-3",
    ];
    args.extend_from_slice(SMALL);
    ok(dir, &args);
    let models: Vec<String> = (0..5).map(|i| format!("runs/train/model-{i}.ckpt")).collect();
    let table = ok(dir, &["evaluate", "--model", &models.join(",")]);
    let header = table.lines().next().unwrap();
    for c in ["damage", "vascular", "mass", "acute stroke", "Fazekas"] {
        assert!(header.contains(c), "{header}");
    }
    assert!(table.contains("independent"));
}

#[test]
fn failures_still_write_a_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = radlabel(tmp.path(), &["split", "--corpus", "missing.jsonl", "--out", "s"], &[]);
    assert!(!out.status.success());
    let m = json(&tmp.path().join("s/split.manifest.json"));
    assert_eq!(m["status"], "error");
    assert!(m["error"].as_str().unwrap().contains("missing.jsonl"));

    let out = radlabel(tmp.path(), &["train", "--task", "fine"], &[]);
    assert!(!out.status.success());
}

#[test]
fn flags_override_env_override_config() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(
        dir.join("cfg.toml"),
        "seed = 3\n[generate]\nn = 30\nout = \"c.jsonl\"\n",
    )
    .unwrap();
    let count = |dir: &Path| read_corpus(&dir.join("c.jsonl")).unwrap().len();

    assert!(radlabel(dir, &["--config", "cfg.toml", "generate"], &[])
        .status
        .success());
    assert_eq!(count(dir), 30);
    let m = json(&dir.join("generate.manifest.json"));
    assert_eq!(m["seeds"]["generate"], 3);

    let env = [("RADLABEL_GENERATE_N", "20"), ("RADLABEL_SEED", "4")];
    assert!(radlabel(dir, &["--config", "cfg.toml", "generate"], &env)
        .status
        .success());
    assert_eq!(count(dir), 20);
    assert_eq!(json(&dir.join("generate.manifest.json"))["seeds"]["generate"], 4);

    assert!(radlabel(
        dir,
        &["--config", "cfg.toml", "generate", "--n", "10", "--seed", "5"],
        &env
    )
    .status
    .success());
    assert_eq!(count(dir), 10);
    assert_eq!(json(&dir.join("generate.manifest.json"))["seeds"]["generate"], 5);
}

#[test]
fn seeds_change_and_fix_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let gen = |seed: &str, out: &str| ok(dir, &["generate", "--n", "40", "--seed", seed, "--out", out]);
    gen("1", "a.jsonl");
    gen("1", "b.jsonl");
    gen("2", "c.jsonl");
    let read = |f: &str| std::fs::read(dir.join(f)).unwrap();
    assert_eq!(read("a.jsonl"), read("b.jsonl"));
    assert_ne!(read("a.jsonl"), read("c.jsonl"));
    let reports: Vec<Report> = read_corpus(&dir.join("a.jsonl")).unwrap();
    assert_eq!(reports.len(), 40);
}

#[test]
fn gradcheck_subcommand_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(tmp.path(), &["gradcheck", "--out", "g.json"]);
    assert!(out.contains("max relative error"));
    let report = json(&tmp.path().join("g.json"));
    assert!(report["max_relative_error"].as_f64().unwrap() < 1e-4);
}
