use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_recipe-retrieval"))
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin()
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = r#"{
  "seed": 3,
  "generator": { "num_classes": 4, "recipes_per_class": 20 },
  "skipgram": { "epochs": 1 },
  "train": { "switches": 2, "max_stage_epochs": 2, "patience": 1, "batch_size": 16 },
  "eval": { "subsets": 2, "subset_size": 20 }
}"#;

fn small_workspace() -> TempDir {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("small.json"), SMALL).unwrap();
    dir
}

#[test]
fn generate_is_deterministic_per_seed() {
    let dir = small_workspace();
    for out in ["a", "b"] {
        let o = run_in(
            dir.path(),
            &["--config", "small.json", "--out", out, "generate"],
        );
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["corpus.jsonl", "features.txt", "split.json"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between identical runs");
    }
    let o = run_in(
        dir.path(),
        &[
            "--config",
            "small.json",
            "--seed",
            "4",
            "--out",
            "c",
            "generate",
        ],
    );
    assert!(o.status.success());
    let a = std::fs::read(dir.path().join("a/corpus.jsonl")).unwrap();
    let c = std::fs::read(dir.path().join("c/corpus.jsonl")).unwrap();
    assert_ne!(a, c);
}

#[test]
fn generate_refuses_non_empty_directory_without_force() {
    let dir = small_workspace();
    let args = ["--config", "small.json", "--out", "d", "generate"];
    assert!(run_in(dir.path(), &args).status.success());
    let o = run_in(dir.path(), &args);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("not empty"), "{}", stderr(&o));
    let o = run_in(
        dir.path(),
        &[
            "--config",
            "small.json",
            "--out",
            "d",
            "--force",
            "generate",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn invalid_spec_is_rejected() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("spec.json"), r#"{ "num_classes": 0 }"#).unwrap();
    let o = run_in(
        dir.path(),
        &["--out", "d", "generate", "--spec", "spec.json"],
    );
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error:"), "{}", stderr(&o));
    assert!(!dir.path().join("d/corpus.jsonl").exists());

    std::fs::write(dir.path().join("typo.json"), r#"{ "num_clases": 3 }"#).unwrap();
    let o = run_in(
        dir.path(),
        &["--out", "d", "generate", "--spec", "typo.json"],
    );
    assert!(!o.status.success());
}

#[test]
fn missing_checkpoint_names_the_key() {
    let dir = small_workspace();
    let o = run_in(dir.path(), &["--config", "small.json", "generate"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run_in(dir.path(), &["--config", "small.json", "preprocess"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run_in(
        dir.path(),
        &[
            "--config",
            "small.json",
            "--checkpoint",
            "nope.json",
            "eval",
        ],
    );
    assert!(!o.status.success());
    assert!(stderr(&o).contains("paths.checkpoint"), "{}", stderr(&o));
}

#[test]
fn oracle_eval_is_perfect() {
    let dir = small_workspace();
    assert!(run_in(dir.path(), &["--config", "small.json", "generate"])
        .status
        .success());
    assert!(
        run_in(dir.path(), &["--config", "small.json", "preprocess"])
            .status
            .success()
    );
    let o = run_in(dir.path(), &["--config", "small.json", "eval", "--oracle"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("MedR 1.0"), "{}", stdout(&o));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run/report.json")).unwrap())
            .unwrap();
    assert_eq!(report["medr_mean"], 1.0);
    assert!(report["run_config"].is_object());
}

#[test]
fn full_pipeline_runs_end_to_end() {
    let dir = small_workspace();
    let cfg = ["--config", "small.json"];
    for step in [&["generate"][..], &["preprocess"], &["train"], &["eval"]] {
        let args: Vec<&str> = cfg.iter().chain(step).copied().collect();
        let o = run_in(dir.path(), &args);
        assert!(o.status.success(), "{step:?}: {}", stderr(&o));
    }
    let run = dir.path().join("run");
    assert!(run.join("model.json").is_file());
    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert!(log.lines().count() >= 3);
    for line in log.lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(rec["loss"].as_f64().unwrap().is_finite());
    }

    let tokenized = std::fs::read_to_string(dir.path().join("data/tokenized.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(tokenized.lines().next().unwrap()).unwrap();
    let id = first["id"].as_str().unwrap().to_owned();
    let o = run_in(
        dir.path(),
        &[
            "--config",
            "small.json",
            "export-attention",
            "--recipe",
            &id,
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let tsv = std::fs::read_to_string(run.join(format!("attention_{id}.tsv"))).unwrap();
    assert!(tsv.starts_with("position\ttoken\tq0"));

    let o = run_in(
        dir.path(),
        &[
            "--config",
            "small.json",
            "export-embeddings",
            "--split",
            "all",
            "--top-classes",
            "2",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let tsv = std::fs::read_to_string(run.join("embeddings_all.tsv")).unwrap();
    // two classes of 20 recipes, one text and one image row each
    assert_eq!(tsv.lines().count(), 1 + 2 * 40);

    let o = run_in(
        dir.path(),
        &[
            "--config",
            "small.json",
            "export-attention",
            "--recipe",
            "no-such-id",
        ],
    );
    assert!(!o.status.success());
}

#[test]
fn f32_training_and_eval_work() {
    let dir = small_workspace();
    let cfg = ["--config", "small.json", "--precision", "f32"];
    for step in [&["generate"][..], &["preprocess"], &["train"], &["eval"]] {
        let args: Vec<&str> = cfg.iter().chain(step).copied().collect();
        let o = run_in(dir.path(), &args);
        assert!(o.status.success(), "{step:?}: {}", stderr(&o));
    }
    let ckpt: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run/model.json")).unwrap())
            .unwrap();
    assert_eq!(ckpt["precision"], "f32");
}

#[test]
fn gradcheck_passes_by_default() {
    let dir = TempDir::new().unwrap();
    let o = run_in(dir.path(), &["gradcheck", "--out", "gc"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).starts_with("PASS"), "{}", stdout(&o));
    assert!(dir.path().join("gc/gradcheck.json").is_file());
}
