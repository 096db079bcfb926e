use std::path::Path;
use std::process::{Command, Output};

fn luna(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_luna"))
        .args(args)
        .env("LUNA_LOG", "error")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"{"d": 16, "heads": 2, "encoder_layers": 1, "schema_layers": 1, "slot_sa_layers": 1,
  "turn_sa_layers": 1, "max_seq_len": 96, "max_turns": 10, "schema_max_len": 8, "epochs": 2, "batch_size": 8}"#;

/// Generates a split corpus and a tiny config under `root`.
fn setup(root: &Path) {
    let o = luna(&[
        "gen-corpus",
        "--seed",
        "4",
        "--n",
        "14",
        "--out",
        s(&root.join("data")),
        "--split",
        "8,2,4",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    std::fs::write(root.join("tiny.json"), TINY).unwrap();
}

#[test]
fn gen_corpus_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        let o = luna(&[
            "gen-corpus",
            "--seed",
            "2",
            "--n",
            "12",
            "--out",
            s(&dir.path().join(name)),
        ]);
        assert_eq!(code(&o), 0);
    }
    for f in ["corpus.json", "ontology.json"] {
        assert_eq!(
            std::fs::read(dir.path().join("a").join(f)).unwrap(),
            std::fs::read(dir.path().join("b").join(f)).unwrap()
        );
    }
    assert!(dir.path().join("a/manifest.json").exists());
    // refuses to overwrite without --force
    let again = luna(&[
        "gen-corpus",
        "--seed",
        "3",
        "--n",
        "12",
        "--out",
        s(&dir.path().join("a")),
    ]);
    assert_eq!(code(&again), 1);
    let forced = luna(&[
        "gen-corpus",
        "--seed",
        "3",
        "--n",
        "12",
        "--out",
        s(&dir.path().join("a")),
        "--force",
    ]);
    assert_eq!(code(&forced), 0);
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&luna(&["gen-corpus"])), 1);
    assert_eq!(code(&luna(&["no-such-command"])), 1);
    assert_eq!(
        code(&luna(&["gen-corpus", "--out", "/tmp/x", "--split", "1,2"])),
        1
    );
    assert_eq!(code(&luna(&["--help"])), 0);
}

#[test]
fn train_eval_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    setup(root);
    let data = root.join("data");
    let run = root.join("run");
    let (cfg, train, dev) = (root.join("tiny.json"), data.join("train"), data.join("dev"));
    let base = [
        "train",
        "--config",
        s(&cfg),
        "--corpus",
        s(&train),
        "--dev",
        s(&dev),
        "--out",
        s(&run),
    ];
    let mut first = base.to_vec();
    first.extend(["--epoch-budget", "1"]);
    let o = luna(&first);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let line: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(line["epochs"], 1);

    let mut resume = base.to_vec();
    resume.push("--resume");
    let o = luna(&resume);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let line: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(line["epochs"], 2);
    for f in [
        "last.ckpt",
        "best.ckpt",
        "loss.csv",
        "epochs.csv",
        "manifest.json",
    ] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);

    let ckpt = run.join("best.ckpt");
    let att = root.join("att.jsonl");
    let preds = root.join("preds.jsonl");
    let out = root.join("eval");
    let o = luna(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--corpus",
        s(&data.join("test")),
        "--out",
        s(&out),
        "--dump-attention",
        s(&att),
        "--dump-predictions",
        s(&preds),
        "--threads",
        "2",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["dialogues"], 4);
    let a = report["joint_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&a));
    assert!(std::fs::read_to_string(out.join("per_turn.csv"))
        .unwrap()
        .starts_with("depth,n,joint_acc"));
    let first_line = std::fs::read_to_string(&att)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string();
    let v: serde_json::Value = serde_json::from_str(&first_line).unwrap();
    assert!(v["attention"].is_object());
    assert!(!std::fs::read_to_string(&preds).unwrap().is_empty());

    let soft = luna(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--corpus",
        s(&data.join("test")),
        "--soft",
    ]);
    assert_eq!(code(&soft), 0);
}

#[test]
fn bad_inputs_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    setup(root);
    let data = root.join("data");
    let missing = luna(&[
        "eval",
        "--checkpoint",
        s(&root.join("nope.ckpt")),
        "--corpus",
        s(&data.join("test")),
    ]);
    assert_eq!(code(&missing), 2);

    std::fs::write(root.join("junk.ckpt"), b"not a checkpoint").unwrap();
    let junk = luna(&[
        "eval",
        "--checkpoint",
        s(&root.join("junk.ckpt")),
        "--corpus",
        s(&data.join("test")),
    ]);
    assert_eq!(code(&junk), 2);

    std::fs::write(root.join("bad.json"), r#"{"heads": 5}"#).unwrap();
    let bad = luna(&[
        "train",
        "--config",
        s(&root.join("bad.json")),
        "--corpus",
        s(&data.join("train")),
        "--out",
        s(&root.join("r")),
    ]);
    assert_eq!(code(&bad), 1);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("heads"));

    std::fs::write(root.join("unknown.json"), r#"{"lr": 0.1}"#).unwrap();
    let unknown = luna(&[
        "train",
        "--config",
        s(&root.join("unknown.json")),
        "--corpus",
        s(&data.join("train")),
        "--out",
        s(&root.join("r")),
    ]);
    assert_eq!(code(&unknown), 1);

    let no_corpus = luna(&[
        "train",
        "--corpus",
        s(&root.join("absent")),
        "--out",
        s(&root.join("r")),
    ]);
    assert_eq!(code(&no_corpus), 2);
}

#[test]
fn grad_check_passes_and_detects_corruption() {
    let ok = luna(&["grad-check", "--samples", "8"]);
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stdout));
    let out = String::from_utf8_lossy(&ok.stdout).to_string();
    assert_eq!(out.lines().count(), 4);
    assert!(out.lines().all(|l| l.contains("PASS")));
    let bad = luna(&["grad-check", "--samples", "8", "--corrupt-grad"]);
    assert_eq!(code(&bad), 3);
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
}

#[test]
fn ablate_writes_table_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    setup(root);
    std::fs::write(
        root.join("tiny.json"),
        TINY.replace("\"epochs\": 2", "\"epochs\": 1"),
    )
    .unwrap();
    let data = root.join("data");
    let out = root.join("abl");
    let (cfg, train, test) = (
        root.join("tiny.json"),
        data.join("train"),
        data.join("test"),
    );
    let args = [
        "ablate",
        "--config",
        s(&cfg),
        "--corpus",
        s(&train),
        "--eval",
        s(&test),
        "--seeds",
        "1,2",
        "--out",
        s(&out),
    ];
    let o = luna(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 6);
    for v in [
        "full",
        "no_auxiliary_task",
        "no_overall_slot_to_turn",
        "no_alignment_module",
        "soft_alignment",
    ] {
        assert!(
            rows.iter().any(|r| r.starts_with(&format!("{v},2,"))),
            "{v} missing"
        );
        assert!(out.join(v).join("seed-2").join("report.json").exists());
    }
    // A second invocation reuses the stored reports.
    let report = out.join("full/seed-1/report.json");
    let before = std::fs::metadata(&report).unwrap().modified().unwrap();
    let o = luna(&args);
    assert_eq!(code(&o), 0);
    assert_eq!(
        std::fs::metadata(&report).unwrap().modified().unwrap(),
        before
    );
    assert_eq!(
        std::fs::read_to_string(out.join("ablation.csv")).unwrap(),
        table
    );
}
