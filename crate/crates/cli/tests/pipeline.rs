use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tmclir_cli::artifacts::{parse_export, Calibration, HitsFile};

fn tmclir(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tmclir"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = tmclir(args);
    assert!(
        out.status.success(),
        "tmclir {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Runs a failing command and returns its JSON error object.
fn fails(args: &[&str]) -> Value {
    let out = tmclir(args);
    assert!(!out.status.success(), "tmclir {args:?} unexpectedly succeeded");
    let stderr = String::from_utf8(out.stderr).unwrap();
    let line = stderr.lines().last().expect("an error line");
    serde_json::from_str::<Value>(line).expect("error line is JSON")["error"].clone()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn synthetic() -> Workspace {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        ok(&[
            "generate-synthetic", "--out-dir", s(&root), "--train", "400", "--valid", "60", "--pool", "300",
        ]);
        Workspace { _dir: dir, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn p(&self, name: &str) -> String {
        s(&self.path(name)).to_owned()
    }

    fn train_baseline(&self) {
        fs::write(self.path("base.toml"), "objective = \"contrastive\"\nlr = 1.0\nmomentum = 0.9\nepochs = 2\nd = 16\n").unwrap();
        ok(&[
            "train", "--config", &self.p("base.toml"), "--train-corpus", &self.p("train.jsonl"),
            "--valid-corpus", &self.p("valid.jsonl"), "--out", &self.p("base.ckpt"), "--history", &self.p("history.json"),
        ]);
    }
}

#[test]
fn dense_pipeline_end_to_end() {
    let ws = Workspace::synthetic();
    ws.train_baseline();
    let history: Value = serde_json::from_str(&fs::read_to_string(ws.path("history.json")).unwrap()).unwrap();
    assert_eq!(history["epoch_ndcg"].as_array().unwrap().len(), 3);

    ok(&["build-dense-index", "--checkpoint", &ws.p("base.ckpt"), "--pool", &ws.p("pool.jsonl"), "--out", &ws.p("pool.vidx")]);
    // The training targets as a pool, for mining against the corpus itself.
    let train_text = fs::read_to_string(ws.path("train.jsonl")).unwrap();
    let targets: Vec<String> = train_text
        .lines()
        .map(|l| {
            let v: Value = serde_json::from_str(l).unwrap();
            serde_json::json!({"id": v["id"], "text": v["tgt"]}).to_string()
        })
        .collect();
    fs::write(ws.path("train-targets.jsonl"), targets.join("\n") + "\n").unwrap();
    ok(&[
        "mine-candidates", "--miner", "dense", "--corpus", &ws.p("train.jsonl"), "--pool", &ws.p("train-targets.jsonl"),
        "--checkpoint", &ws.p("base.ckpt"), "--out", &ws.p("cands.jsonl"), "--exclude-self",
    ]);
    ok(&[
        "mine-candidates", "--miner", "dense", "--corpus", &ws.p("valid.jsonl"), "--pool", &ws.p("pool.jsonl"),
        "--checkpoint", &ws.p("base.ckpt"), "--index", &ws.p("pool.vidx"), "--out", &ws.p("valid-cands.jsonl"),
    ]);

    fs::write(ws.path("ft.toml"), "objective = \"ft-MSE\"\nlr = 1.0\nlr_ab = 0.1\nepochs = 2\n").unwrap();
    ok(&[
        "train", "--config", &ws.p("ft.toml"), "--init", &ws.p("base.ckpt"), "--train-candidates", &ws.p("cands.jsonl"),
        "--valid-candidates", &ws.p("valid-cands.jsonl"), "--out", &ws.p("ft.ckpt"),
    ]);

    let dense = ["--retriever", "ft-MSE", "--queries", &ws.p("valid.jsonl"), "--pool", &ws.p("pool.jsonl"), "--checkpoint", &ws.p("ft.ckpt")];
    ok(&[&["calibrate"], &dense[..], &["--target-rate", "0.5", "--out", &ws.p("cal.json")]].concat());
    let cal = Calibration::read(&ws.path("cal.json")).unwrap();
    assert!((cal.achieved_rate - 0.5).abs() <= 1.0 / 60.0);

    ok(&[&["retrieve"], &dense[..], &["--calibration", &ws.p("cal.json"), "--out", &ws.p("hits.jsonl")]].concat());
    let hits = HitsFile::read(&ws.path("hits.jsonl")).unwrap();
    assert_eq!(hits.records.len(), 60);
    let retrieved = hits.records.iter().filter(|r| !r.hits.is_empty()).count() as f64 / 60.0;
    assert!((retrieved - 0.5).abs() <= 1.0 / 60.0);
    assert!(hits.records.iter().all(|r| r.hits.len() <= 3 && r.hits.iter().all(|h| h.score >= cal.threshold)));
    assert_eq!(hits.header.encoder["objective"], "ft-MSE");

    // Byte-identical reruns.
    ok(&[&["retrieve"], &dense[..], &["--calibration", &ws.p("cal.json"), "--out", &ws.p("hits2.jsonl")]].concat());
    assert_eq!(fs::read(ws.path("hits.jsonl")).unwrap(), fs::read(ws.path("hits2.jsonl")).unwrap());

    ok(&[
        "eval", "--hits", &ws.p("hits.jsonl"), "--queries", &ws.p("valid.jsonl"), "--pool", &ws.p("pool.jsonl"),
        "--checkpoint", &ws.p("ft.ckpt"), "--out", &ws.p("report.json"), "--csv", &ws.p("report.csv"),
    ]);
    let report: Value = serde_json::from_str(&fs::read_to_string(ws.path("report.json")).unwrap()).unwrap();
    assert_eq!(report["num_queries"], 60);
    assert!(report["xsim_error"].as_f64().is_some());
    assert_eq!(report["config"]["retriever"], "ft-MSE");
    assert_eq!(fs::read_to_string(ws.path("report.csv")).unwrap().lines().count(), 61);

    ok(&[
        "export-examples", "--hits", &ws.p("hits.jsonl"), "--queries", &ws.p("valid.jsonl"), "--pool", &ws.p("pool.jsonl"),
        "--out", &ws.p("examples.jsonl"),
    ]);
    let text = fs::read_to_string(ws.path("examples.jsonl")).unwrap();
    let (header, records) = parse_export(&text, &ws.path("examples.jsonl")).unwrap();
    assert_eq!(header["retriever"], "ft-MSE");
    for (r, h) in records.iter().zip(&hits.records) {
        assert_eq!(r.id, h.query);
        assert_eq!(r.examples.iter().map(|e| e.id).collect::<Vec<_>>(), h.hits.iter().map(|h| h.id).collect::<Vec<_>>());
    }
    assert!(records.iter().any(|r| r.examples.is_empty()));
    let rendered = tmclir::jsonl::render(&header, &records);
    assert_eq!(rendered, text);
}

#[test]
fn lexical_retrievers() {
    let ws = Workspace::synthetic();
    ok(&["build-lexical-index", "--pool", &ws.p("pool-src.jsonl"), "--out", &ws.p("src.bm25")]);
    for (kind, keys) in [("fuzzy-src", "pool-src.jsonl"), ("fuzzy-bt", "pool-bt.jsonl")] {
        let out = ws.p(&format!("{kind}.jsonl"));
        let (queries, pool, keys, idx) = (ws.p("valid.jsonl"), ws.p("pool.jsonl"), ws.p(keys), ws.p("src.bm25"));
        let mut args = vec![
            "retrieve", "--retriever", kind, "--queries", &queries, "--pool", &pool,
            "--key-pool", &keys, "--threshold", "0.3", "--prefilter-n", "50", "--out", &out,
        ];
        if kind == "fuzzy-src" {
            args.extend(["--lexical-index", &idx]);
        }
        ok(&args);
        let hits = HitsFile::read(Path::new(&out)).unwrap();
        assert!(hits.records.iter().flat_map(|r| &r.hits).all(|h| (0.3..=1.0).contains(&h.score)));
    }

    // A BM25 index over another collection is rejected.
    let err = fails(&[
        "retrieve", "--retriever", "fuzzy-bt", "--queries", &ws.p("valid.jsonl"), "--pool", &ws.p("pool.jsonl"),
        "--key-pool", &ws.p("pool-bt.jsonl"), "--lexical-index", &ws.p("src.bm25"), "--threshold", "0.3", "--out", &ws.p("x.jsonl"),
    ]);
    assert_eq!(err["kind"], "invalid_argument");
}

#[test]
fn fuzzy_gold_finds_exact_duplicates() {
    let dir = tempfile::tempdir().unwrap();
    let q = dir.path().join("q.tsv");
    let pool = dir.path().join("pool.tsv");
    fs::write(&q, "le chat\tthe cat sat\nun chien\ta dog barked\nrien\tnothing here\n").unwrap();
    fs::write(&pool, "the dog barked\nthe cat sat\nnothing here at all\n").unwrap();
    let out = dir.path().join("hits.jsonl");
    ok(&[
        "retrieve", "--retriever", "fuzzy-gold", "--queries", s(&q), "--pool", s(&pool), "--k", "2",
        "--threshold", "0", "--out", s(&out),
    ]);
    let hits = HitsFile::read(&out).unwrap();
    assert_eq!(hits.records[0].hits[0].score, 1.0);
    assert_eq!(hits.records[0].hits[0].id.0, 1);
    assert!(hits.records[1].hits[0].score < 1.0);
}

#[test]
fn ingest_splits_and_decontaminates() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("corpus.tsv");
    let lines: Vec<String> = (0..40).map(|i| format!("source {i} words\ttarget {i} words here")).collect();
    fs::write(&input, lines.join("\n") + "\n").unwrap();
    let pool = dir.path().join("extra.tsv");
    // Every held-out target has a copy in the pool; other lines differ by one token in four.
    let pool_lines: Vec<String> = (0..40).map(|i| format!("target {i} words here")).collect();
    fs::write(&pool, pool_lines.join("\n") + "\n").unwrap();
    let out = dir.path().join("out");
    ok(&[
        "ingest", "--input", s(&input), "--out-dir", s(&out), "--split", "0.8,0.1,0.1", "--seed", "3",
        "--pool", s(&pool),
    ]);
    let manifest: Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["corpora"]["train"]["pairs"], 32);
    assert_eq!(manifest["corpora"]["valid"]["pairs"], 4);
    assert_eq!(manifest["pool"]["segments"], 32);
    assert_eq!(manifest["pool"]["removed"], 8);

    // Without a pool the training pairs become pool and key pool.
    let out2 = dir.path().join("out2");
    ok(&["ingest", "--input", s(&input), "--out-dir", s(&out2)]);
    assert_eq!(fs::read_to_string(out2.join("pool.jsonl")).unwrap().lines().count(), 40);
    assert_eq!(fs::read_to_string(out2.join("pool-src.jsonl")).unwrap().lines().count(), 40);
}

#[test]
fn errors_are_json_lines() {
    let ws = Workspace::synthetic();
    let common = ["--queries", &ws.p("valid.jsonl"), "--pool", &ws.p("pool.jsonl")];

    let err = fails(&[&["retrieve", "--retriever", "fuzzy-gold"], &common[..], &["--k", "0", "--threshold", "0.5", "--out", &ws.p("h.jsonl")]].concat());
    assert_eq!(err["kind"], "invalid_argument");

    let err = fails(&[&["retrieve", "--retriever", "dense"], &common[..], &["--checkpoint", &ws.p("nope.ckpt"), "--threshold", "0.5", "--out", &ws.p("h.jsonl")]].concat());
    assert_eq!(err["kind"], "missing");
    assert!(err["message"].as_str().unwrap().contains("nope.ckpt"));

    let err = fails(&[&["retrieve", "--retriever", "fuzzy-src"], &common[..], &["--threshold", "0.5", "--out", &ws.p("h.jsonl")]].concat());
    assert_eq!(err["kind"], "missing");

    // ft objectives refuse corpora without mined candidates.
    fs::write(ws.path("ft.toml"), "objective = \"ft-MAE\"\n").unwrap();
    let err = fails(&[
        "train", "--config", &ws.p("ft.toml"), "--train-corpus", &ws.p("train.jsonl"), "--valid-corpus", &ws.p("valid.jsonl"),
        "--out", &ws.p("x.ckpt"),
    ]);
    assert_eq!(err["kind"], "missing");

    fs::write(ws.path("bad.toml"), "objective = \"contrastive\"\nlearning_rate = 3\n").unwrap();
    let err = fails(&[
        "train", "--config", &ws.p("bad.toml"), "--train-corpus", &ws.p("train.jsonl"), "--valid-corpus", &ws.p("valid.jsonl"),
        "--out", &ws.p("x.ckpt"),
    ]);
    assert_eq!(err["kind"], "format");

    let err = fails(&["retrieve", "--retriever", "fuzzy-gold", "--queries", "q", "--pool", "p", "--out", "o"]);
    assert_eq!(err["kind"], "usage");
}

#[test]
fn dimension_and_objective_mismatches() {
    let ws = Workspace::synthetic();
    ws.train_baseline();
    fs::write(ws.path("wide.toml"), "objective = \"contrastive\"\nlr = 1.0\nepochs = 1\nd = 8\n").unwrap();
    ok(&[
        "train", "--config", &ws.p("wide.toml"), "--train-corpus", &ws.p("train.jsonl"), "--valid-corpus", &ws.p("valid.jsonl"),
        "--out", &ws.p("narrow.ckpt"),
    ]);
    ok(&["build-dense-index", "--checkpoint", &ws.p("narrow.ckpt"), "--pool", &ws.p("pool.jsonl"), "--out", &ws.p("narrow.vidx")]);
    let base = [
        "retrieve", "--queries", &ws.p("valid.jsonl"), "--pool", &ws.p("pool.jsonl"), "--threshold", "0", "--out", &ws.p("h.jsonl"),
    ];
    let err = fails(&[&base[..], &["--retriever", "dense", "--checkpoint", &ws.p("base.ckpt"), "--index", &ws.p("narrow.vidx")]].concat());
    assert_eq!(err["kind"], "dimension_mismatch");

    let err = fails(&[&base[..], &["--retriever", "ft-Rank", "--checkpoint", &ws.p("base.ckpt")]].concat());
    assert!(err["message"].as_str().unwrap().contains("ft-Rank"));

    ok(&[&base[..], &["--retriever", "dense", "--checkpoint", &ws.p("base.ckpt")]].concat());
}
