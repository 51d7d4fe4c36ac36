use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use divan::corpus::{filter_corpus, load_corpus, AttributionStatus, Corpus};
use divan::synthetic::{generate, SyntheticConfig};

fn divan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_divan"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn divan")
}

fn ok(args: &[&str]) -> Output {
    let out = divan(args);
    assert!(
        out.status.success(),
        "divan {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_corpus(dir: &Path) -> PathBuf {
    let path = dir.join("raw.jsonl");
    ok(&["make-synthetic", "--out", s(&path), "--poets", "3", "--poems-per-poet", "20", "--seed", "4"]);
    path
}

/// Ingested and split working directory.
fn workdir(root: &Path) -> PathBuf {
    let raw = small_corpus(root);
    let w = root.join("w");
    ok(&["ingest", "--corpus", s(&raw), "--min-verses", "10", "--out", s(&w)]);
    ok(&["split", "--corpus", s(&w), "--seed", "3"]);
    w
}

fn trained(root: &Path) -> PathBuf {
    let w = workdir(root);
    ok(&["train-embeddings", "--workdir", s(&w), "--epochs", "1"]);
    ok(&["train", "--workdir", s(&w), "--max-epochs", "3"]);
    w
}

#[test]
fn missing_corpus_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = divan(&["ingest", "--corpus", s(&dir.path().join("absent.jsonl")), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("corpus not found"));
}

#[test]
fn same_seed_gives_identical_split_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let w = workdir(dir.path());
    let first = std::fs::read(w.join("split.csv")).unwrap();
    ok(&["split", "--corpus", s(&w), "--seed", "3"]);
    assert_eq!(std::fs::read(w.join("split.csv")).unwrap(), first);
    ok(&["split", "--corpus", s(&w), "--seed", "4"]);
    assert_ne!(std::fs::read(w.join("split.csv")).unwrap(), first);
    let text = String::from_utf8(first).unwrap();
    assert!(text.starts_with("poem_id,split,poet\n"));
    assert_eq!(text.lines().count(), 61);
}

#[test]
fn bad_ratios_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let w = workdir(dir.path());
    for bad in ["0.5,0.5", "0.5,0.5,0.5", "0.8,-0.1,0.3", "a,b,c"] {
        let out = divan(&["split", "--corpus", s(&w), "--ratios", bad]);
        assert_eq!(out.status.code(), Some(2), "ratios {bad}");
    }
}

#[test]
fn ingest_matches_library_filter() {
    let dir = tempfile::tempdir().unwrap();
    let base = generate(&SyntheticConfig {
        poets: 4,
        poems_per_poet: 12,
        seed: 8,
        ..Default::default()
    })
    .unwrap();
    // One poet shrinks below the threshold; some poems lose confirmed status.
    let poets = base.poet_index().labels().to_vec();
    let mut records = Vec::new();
    let mut kept_small = 0;
    for (i, r) in base.records().iter().enumerate() {
        let mut r = r.clone();
        if r.poet == poets[0] {
            if kept_small == 3 {
                continue;
            }
            kept_small += 1;
        }
        if i % 5 == 0 {
            r.attribution_status = AttributionStatus::Contested;
        }
        records.push(r);
    }
    let raw = Corpus::new(records).unwrap();
    let raw_path = dir.path().join("raw.jsonl");
    raw.save(&raw_path).unwrap();

    let out = dir.path().join("out");
    ok(&["ingest", "--corpus", s(&raw_path), "--min-verses", "50", "--out", s(&out)]);
    let expected = filter_corpus(&raw, 50).unwrap();
    let got = load_corpus(out.join("corpus.jsonl")).unwrap();
    assert_eq!(got.to_jsonl(), expected.to_jsonl());
    assert!(got.poet_index().id_of(&poets[0]).is_none());
    assert!(got.len() < raw.len());
    for f in ["stats.json", "stats.txt", "config.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["min_verses"], 50);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let w = workdir(dir.path());
    let cfg_path = dir.path().join("exp.json");
    std::fs::write(&cfg_path, r#"{"split_seed": 11, "ratios": [0.6, 0.2, 0.2]}"#).unwrap();
    ok(&["split", "--corpus", s(&w), "--config", s(&cfg_path), "--seed", "5"]);
    let side: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(w.join("split.json")).unwrap()).unwrap();
    assert_eq!(side["seed"], 5);
    assert_eq!(side["ratios"], serde_json::json!([0.6, 0.2, 0.2]));
    let out = divan(&["split", "--corpus", s(&w), "--config", s(&dir.path().join("absent.json"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn end_to_end_reports_sweep_and_prediction() {
    let dir = tempfile::tempdir().unwrap();
    let w = trained(dir.path());
    assert!(w.join("model.ckpt").exists());
    assert!(w.join("training_log.csv").exists());

    ok(&["evaluate", "--workdir", s(&w)]);
    let levels = ["verse", "poem_majority", "poem_weighted", "poem_thresholded"];
    for level in levels {
        let text = std::fs::read_to_string(w.join("reports").join(format!("{level}.json"))).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["level"], level);
        assert!(w.join("reports").join(format!("{level}.txt")).exists());
    }
    let preds = std::fs::read_to_string(w.join("predictions.csv")).unwrap();
    let test_poems = std::fs::read_to_string(w.join("split.csv"))
        .unwrap()
        .lines()
        .filter(|l| l.contains(",test,"))
        .count();
    assert_eq!(preds.lines().count(), 1 + 3 * test_poems);

    ok(&["sweep-thresholds", "--workdir", s(&w)]);
    let sweep = std::fs::read_to_string(w.join("sweep.csv")).unwrap();
    let rows: Vec<Vec<&str>> = sweep.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 5);
    let coverage: Vec<f64> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
    assert!(coverage.windows(2).all(|c| c[0] >= c[1]));
    for r in &rows {
        if r[4] != "0" && r[3] == "0" {
            assert_eq!(r[1], "undefined");
        }
    }

    let input = dir.path().join("verse.txt");
    std::fs::write(&input, "دل و جان\tگل و می\n").unwrap();
    let out = ok(&["predict", "--workdir", s(&w), "--input", s(&input)]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let mut blocks = stdout.split("\n\n");
    let verses: Vec<&str> = blocks.next().unwrap().lines().collect();
    assert_eq!(verses.len(), 2);
    let probs: Vec<f64> = verses[1].split(',').skip(3).map(|p| p.parse().unwrap()).collect();
    assert_eq!(probs.len(), 3);
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    assert!(probs.iter().all(|&p| (0.0..=1.0).contains(&p)));
    let poems: Vec<&str> = blocks.next().unwrap().lines().collect();
    assert_eq!(poems.len(), 4);

    let again = ok(&["predict", "--workdir", s(&w), "--input", s(&input)]);
    assert_eq!(String::from_utf8(again.stdout).unwrap(), stdout);
}

#[test]
fn changed_split_makes_model_stale() {
    let dir = tempfile::tempdir().unwrap();
    let w = trained(dir.path());
    ok(&["split", "--corpus", s(&w), "--seed", "99"]);
    for cmd in ["evaluate", "train", "sweep-thresholds"] {
        let out = divan(&[cmd, "--workdir", s(&w)]);
        assert_eq!(out.status.code(), Some(3), "{cmd}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("stale artifact"));
    }
}

#[test]
fn diverging_training_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let w = workdir(dir.path());
    ok(&["train-embeddings", "--workdir", s(&w), "--epochs", "1"]);
    let out = divan(&["train", "--workdir", s(&w), "--max-epochs", "1", "--lr", "1e300"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(!w.join("model.ckpt").exists());
}
