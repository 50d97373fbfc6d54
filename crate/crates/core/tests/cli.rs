use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[gen]
n_samples = 12
seed = 5
max_ref_tokens = 64

[model]
c_max = 64
layers = 1
heads = 4
ffn_dim = 64

[train]
epochs = 2
batch_size = 4
seed = 9
"#;

fn dysfl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dysfl"))
        .args(args)
        .env_remove("YS_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn gen_writes_one_line_and_one_tensor_per_sample() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[gen]\nn_samples = 100\n");
    let out = dir.path().join("corpus");
    let o = dysfl(&["gen", "--config", path(&cfg), "--out", path(&out), "--quiet"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("corpus.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 101);
    assert_eq!(fs::read_dir(out.join("align")).unwrap().count(), 100);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "gen");
    assert_eq!(manifest["config_digest"].as_str().unwrap().len(), 64);
}

#[test]
fn gen_is_byte_identical_across_runs_and_job_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[gen]\nn_samples = 30\nseed = 4\n");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(dysfl(&["gen", "--config", path(&cfg), "--out", path(&a), "--quiet"]).status.success());
    assert!(dysfl(&["gen", "--config", path(&cfg), "--out", path(&b), "--jobs", "3", "--quiet"]).status.success());
    assert_eq!(fs::read(a.join("corpus.jsonl")).unwrap(), fs::read(b.join("corpus.jsonl")).unwrap());
    for id in 0..30 {
        let name = format!("align/{id:06}.alnm");
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap());
    }
    let c = dir.path().join("c");
    assert!(dysfl(&["gen", "--config", path(&cfg), "--seed", "5", "--out", path(&c), "--quiet"]).status.success());
    assert_ne!(fs::read(a.join("corpus.jsonl")).unwrap(), fs::read(c.join("corpus.jsonl")).unwrap());
}

#[test]
fn weighted_proportions_are_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[gen]\nn_samples = 5\n[gen.proportions]\nrepetition = 1\nblock = 1\nmissing = 1.2\nreplacement = 1.2\nprolongation = 1\n",
    );
    let o = dysfl(&["gen", "--config", path(&cfg), "--out", path(&dir.path().join("c")), "--quiet"]);
    assert!(o.status.success());
}

#[test]
fn malformed_proportion_key_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[gen]\nn_samples = 5\n[gen.proportions]\nprolong = 1\n");
    let o = dysfl(&["gen", "--config", path(&cfg), "--out", path(&dir.path().join("c"))]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("prolong") && err.contains("line 4"), "{err}");
}

#[test]
fn out_defaults_to_data_dir() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[gen]\nn_samples = 2\n");
    let o = Command::new(env!("CARGO_BIN_EXE_dysfl"))
        .args(["gen", "--config", path(&cfg), "--quiet"])
        .env("YS_DATA_DIR", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(dir.path().join("corpus/corpus.jsonl").exists());
    let o = dysfl(&["gen", "--config", path(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_eval_and_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let corpus = dir.path().join("corpus");
    assert!(dysfl(&["gen", "--config", path(&cfg), "--out", path(&corpus), "--quiet"]).status.success());

    let run_a = dir.path().join("run_a");
    let run_b = dir.path().join("run_b");
    for run in [&run_a, &run_b] {
        let o = dysfl(&["train", "--config", path(&cfg), "--corpus", path(&corpus), "--out", path(run), "--quiet"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let log = fs::read(run_a.join("metrics.jsonl")).unwrap();
    assert_eq!(log, fs::read(run_b.join("metrics.jsonl")).unwrap());
    assert_eq!(fs::read(run_a.join("best.ckpt")).unwrap(), fs::read(run_b.join("best.ckpt")).unwrap());
    let lines: Vec<serde_json::Value> = String::from_utf8(log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    for key in ["epoch", "train_loss", "test_conf_acc", "test_type_acc", "test_bound_loss_ms", "test_time_f1"] {
        assert!(lines[0].get(key).is_some(), "{key}");
    }
    assert!(lines.iter().all(|l| l["train_loss"].as_f64().unwrap().is_finite()));

    let report = dir.path().join("report.json");
    let o = dysfl(&[
        "eval", "--checkpoint", path(&run_a.join("best.ckpt")), "--corpus", path(&corpus),
        "--config", path(&cfg), "--split", "test", "--out", path(&report),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("Acc") && table.contains("BL") && table.contains("Prolong"));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["n_samples"], 1);
    for key in ["per_type_acc", "conf_acc", "bound_loss_ms", "time_f1", "config_digest"] {
        assert!(r.get(key).is_some(), "{key}");
    }

    let o = dysfl(&["inspect", "--corpus", path(&corpus), "--id", "3"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    let rec: serde_json::Value =
        serde_json::from_str(fs::read_to_string(corpus.join("corpus.jsonl")).unwrap().lines().nth(4).unwrap()).unwrap();
    assert!(text.contains(rec["annotation"]["type"].as_str().unwrap()));
    let o = dysfl(&["inspect", "--corpus", path(&corpus), "--id", "999"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not found"));

    // a checkpoint for a different text width cannot read this corpus
    let wide = dir.path().join("wide.toml");
    fs::write(&wide, SMALL.replace("c_max = 64", "c_max = 128").replace("max_ref_tokens = 64", "max_ref_tokens = 128")).unwrap();
    let corpus_wide = dir.path().join("corpus_wide");
    assert!(dysfl(&["gen", "--config", path(&wide), "--out", path(&corpus_wide), "--quiet"]).status.success());
    let o = dysfl(&["eval", "--checkpoint", path(&run_a.join("best.ckpt")), "--corpus", path(&corpus_wide), "--out", path(&report)]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("64x1024") && err.contains("128x1024"), "{err}");
}

#[test]
fn eval_on_empty_corpus_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let corpus = dir.path().join("corpus");
    assert!(dysfl(&["gen", "--config", path(&cfg), "--out", path(&corpus), "--quiet"]).status.success());
    let run = dir.path().join("run");
    let cfg1 = write_config(dir.path(), &SMALL.replace("epochs = 2", "epochs = 1"));
    assert!(dysfl(&["train", "--config", path(&cfg1), "--corpus", path(&corpus), "--out", path(&run), "--quiet"]).status.success());
    let empty = dir.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let header = fs::read_to_string(corpus.join("corpus.jsonl")).unwrap().lines().next().unwrap().to_string();
    fs::write(empty.join("corpus.jsonl"), header + "\n").unwrap();
    let o = dysfl(&["eval", "--checkpoint", path(&run.join("best.ckpt")), "--corpus", path(&empty), "--out", path(&dir.path().join("r.json"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nothing to evaluate"));
}

#[test]
fn missing_corpus_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = dysfl(&["train", "--corpus", path(&dir.path().join("nope")), "--out", path(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("corpus.jsonl"));
}
