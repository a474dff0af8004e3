use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const MODEL: &str = r#"{"layers": 2, "heads": 2, "head_dim": 8, "ffn_mult": 2, "seed": 3}"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chunkfuse"))
        .current_dir(dir)
        .args(["--model-config", "model.json", "--store-dir", "store"])
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("model.json"), MODEL).unwrap();
    ok(dir.path(), &["gen-corpus", "--out", "corpus", "--clusters", "2", "--chunks-per-cluster", "3", "--questions", "4"]);
    ok(dir.path(), &["preprocess", "corpus", "--top-n", "2", "--report", "prep.json"]);
    dir
}

fn first_question(dir: &Path) -> String {
    let line = fs::read_to_string(dir.join("corpus/qa.jsonl")).unwrap();
    let v: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    v["question"].as_str().unwrap().to_string()
}

#[test]
fn preprocess_query_and_stats() {
    let dir = setup();
    let d = dir.path();
    assert!(d.join("store/isolated").is_dir() && d.join("store/fused").is_dir());
    assert!(d.join("prep.json").is_file());
    let q = first_question(d);
    for mode in ["fa", "fr", "cacheblend", "fusionrag"] {
        ok(d, &["query", "corpus", "--question", &q, "--mode", mode, "--top-chunks", "2", "--max-new-tokens", "4"]);
    }
    ok(d, &[
        "query", "corpus", "--question", &q, "--top-chunks", "2", "--emit-deviation", "dev.csv", "--emit-timing", "t.json",
    ]);
    let dev = fs::read_to_string(d.join("dev.csv")).unwrap();
    assert!(dev.starts_with("token_index,chunk_id,layer,k_dev,v_dev"));
    let t: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("t.json")).unwrap()).unwrap();
    assert!(t.is_object());
    ok(d, &["cache-stats"]);
}

#[test]
fn store_from_another_model_is_rejected() {
    let dir = setup();
    let d = dir.path();
    fs::write(d.join("model.json"), MODEL.replace("\"seed\": 3", "\"seed\": 4")).unwrap();
    let out = run(d, &["query", "corpus", "--question", &first_question(d), "--top-chunks", "2"]);
    assert!(!out.status.success());
}

#[test]
fn bench_compares_schedulers() {
    let dir = setup();
    let d = dir.path();
    let qa = fs::read_to_string(d.join("corpus/qa.jsonl")).unwrap();
    let workload = |modes: &[&str]| -> String {
        qa.lines()
            .enumerate()
            .map(|(i, l)| {
                let v: serde_json::Value = serde_json::from_str(l).unwrap();
                let mode = modes[i % modes.len()];
                format!("{{\"arrival_tick\": {}, \"question\": {}, \"mode\": \"{mode}\", \"ratio\": 0.15}}\n", i * 300, v["question"])
            })
            .collect()
    };
    // isolated and fused records cannot share one store
    fs::write(d.join("mixed.jsonl"), workload(&["fr", "fusionrag"])).unwrap();
    assert!(!run(d, &["bench", "mixed.jsonl", "corpus", "--top-chunks", "2"]).status.success());
    fs::write(d.join("wl.jsonl"), workload(&["fr", "cacheblend", "fa"])).unwrap();
    ok(d, &[
        "bench", "wl.jsonl", "corpus", "--both", "--top-chunks", "2", "--tier-capacities", "80000,0", "--summary-out", "s.csv",
    ]);
    let s = fs::read_to_string(d.join("s.csv")).unwrap();
    assert_eq!(s.lines().count(), 1 + 2 * 4, "{s}");
}

#[test]
fn grid_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("model.json"), MODEL).unwrap();
    let grid = r#"{"seeds": [1], "ratios": [0.0, 0.15, 1.0], "top_chunks": 2, "top_n": 2, "max_new_tokens": 4,
        "corpus": {"clusters": 2, "chunks_per_cluster": 3, "questions": 3}}"#;
    fs::write(d.join("grid.json"), grid).unwrap();
    ok(d, &["grid", "--config", "grid.json", "--out", "res", "--no-sweeps"]);
    for f in ["grid.csv", "predictions.csv", "selection_hist.csv", "latency_stack.csv", "metadata.json"] {
        assert!(d.join("res").join(f).is_file(), "{f}");
    }
    let out = ok(d, &["cache-stats", "--replay", "--queries", "100"]);
    let rep: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!(rep["alt_hits"].as_u64().unwrap() >= rep["plain_hits"].as_u64().unwrap());
}
