use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sstag::ppr::push_ppr;
use sstag::store::load_binary;
use sstag::text::Vocabulary;
use tempfile::{tempdir, TempDir};

fn sstag(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sstag"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    o
}

const TRAIN: &[&str] = &["--set", "steps=12", "--set", "batch_size=4", "--set", "budgets=3,3", "--quiet"];

/// Workspace with a small synthetic graph `g.sstg`.
fn workspace() -> TempDir {
    let dir = tempdir().unwrap();
    ok(sstag(dir.path(), &["synth", "--out", "g.sstg", "--nodes", "60", "--seed", "3"]));
    dir
}

fn pretrain(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec!["pretrain", "--graph", "g.sstg", "--out-dir", out];
    args.extend_from_slice(TRAIN);
    args.extend_from_slice(extra);
    sstag(dir, &args)
}

#[test]
fn ingest_validates_and_is_idempotent() {
    let dir = tempdir().unwrap();
    let p = dir.path();
    fs::write(
        p.join("nodes.jsonl"),
        "{\"id\": 10, \"text\": \"graph neural nets\", \"label\": 1}\n{\"id\": 20, \"text\": \"text encoders\", \"label\": 0}\n{\"id\": 30, \"text\": \"pagerank\", \"label\": 1}\n",
    )
    .unwrap();
    fs::write(p.join("edges.jsonl"), "{\"src\": 10, \"dst\": 20}\n{\"src\": 20, \"dst\": 30}\n").unwrap();
    fs::write(p.join("dangling.jsonl"), "{\"src\": 10, \"dst\": 20}\n{\"src\": 20, \"dst\": 99}\n").unwrap();
    let args = ["ingest", "--nodes", "nodes.jsonl", "--edges", "edges.jsonl", "--out"];
    ok(sstag(p, &[&args[..], &["a.sstg"]].concat()));
    ok(sstag(p, &[&args[..], &["b.sstg"]].concat()));
    ok(sstag(p, &[&args[..], &["a.sstg"]].concat()));
    assert_eq!(fs::read(p.join("a.sstg")).unwrap(), fs::read(p.join("b.sstg")).unwrap());
    assert_eq!(load_binary(p.join("a.sstg")).unwrap().n_nodes(), 3);

    let bad = sstag(p, &["ingest", "--nodes", "nodes.jsonl", "--edges", "dangling.jsonl", "--out", "c.sstg"]);
    assert_eq!(code(&bad), 2);
    assert!(stderr(&bad).contains("line 2"), "{}", stderr(&bad));
}

#[test]
fn ppr_output_matches_the_library() {
    let dir = workspace();
    let p = dir.path();
    let out = ok(sstag(p, &["ppr", "--graph", "g.sstg", "--node", "5", "--top-k", "8"]));
    let text = String::from_utf8(out.stdout).unwrap();
    let g = load_binary(p.join("g.sstg")).unwrap();
    let pi = push_ppr(g.csr(), 5, 0.15, 1e-4).unwrap();
    let mut expected = String::from("node,score\n");
    for (u, s) in pi.top_k(8) {
        expected.push_str(&format!("{u},{s}\n"));
    }
    assert_eq!(text, expected);
    let scores: Vec<f64> = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));

    let one = ok(sstag(p, &["ppr", "--graph", "g.sstg", "--node", "5", "--alpha", "1"]));
    assert_eq!(String::from_utf8(one.stdout).unwrap(), "node,score\n5,1\n");
    assert_eq!(code(&sstag(p, &["ppr", "--graph", "g.sstg", "--node", "999"])), 2);
}

#[test]
fn sample_is_seeded_json() {
    let dir = workspace();
    let p = dir.path();
    let run = |seed: &str| {
        let o = ok(sstag(p, &["sample", "--graph", "g.sstg", "--node", "7", "--budgets", "2,2", "--seed", seed]));
        serde_json::from_slice::<serde_json::Value>(&o.stdout).unwrap()
    };
    let a = run("1");
    assert_eq!(a, run("1"));
    assert_eq!(a["node_ids"][0], 7);
    assert!(a["node_ids"].as_array().unwrap().len() <= 5);
}

#[test]
fn pretrain_is_reproducible_and_self_describing() {
    let dir = workspace();
    let p = dir.path();
    ok(pretrain(p, "a", &["--seed", "7"]));
    ok(pretrain(p, "b", &["--seed", "7"]));
    let curve = |d: &str| fs::read_to_string(p.join(d).join("loss_curve.csv")).unwrap();
    assert_eq!(curve("a"), curve("b"));
    assert_eq!(curve("a").lines().count(), 13);
    for f in ["ckpt.sstc", "config.txt", "run.json", "vocab.txt"] {
        assert!(p.join("a").join(f).exists(), "{f}");
    }
    let cfg = fs::read_to_string(p.join("a/config.txt")).unwrap();
    assert!(cfg.contains("seed = 7\n") && cfg.contains("steps = 12\n"));
    // the resolved config reproduces the run on its own
    ok(sstag(p, &["pretrain", "--graph", "g.sstg", "--out-dir", "c", "--config", "a/config.txt", "--quiet"]));
    assert_eq!(curve("a"), curve("c"));
}

#[test]
fn pretrain_ablation_flags_reach_the_config() {
    let dir = workspace();
    let p = dir.path();
    ok(pretrain(p, "ab", &["--ablate", "gnn", "--ablate", "ppr"]));
    let cfg = fs::read_to_string(p.join("ab/config.txt")).unwrap();
    assert!(cfg.contains("ablate.gnn = true\n") && cfg.contains("ablate.ppr = true\n"));
    assert!(cfg.contains("ablate.mask = false\n"));
}

#[test]
fn pretrain_error_codes() {
    let dir = workspace();
    let p = dir.path();
    assert_eq!(code(&pretrain(p, "x", &["--set", "lr="])), 2);
    assert_eq!(code(&pretrain(p, "x", &["--set", "learning_rate=1"])), 2);
    fs::write(p.join("partial.txt"), "steps = 4\nbatch_size\n").unwrap();
    assert_eq!(code(&pretrain(p, "x", &["--config", "partial.txt"])), 2);
    assert_eq!(code(&pretrain(p, "x", &["--config", "missing.txt"])), 2);
    let blowup = pretrain(p, "x", &["--set", "lr=1e300", "--set", "warmup_frac=0"]);
    assert_eq!(code(&blowup), 3);
    assert!(stderr(&blowup).contains("at step"), "{}", stderr(&blowup));

    fs::create_dir_all(p.join("busy")).unwrap();
    fs::write(p.join("busy/.sstag.lock"), "1").unwrap();
    assert_eq!(code(&pretrain(p, "busy", &[])), 2);
    assert!(!p.join("busy/loss_curve.csv").exists());
}

#[test]
fn embed_round_trip_subset_and_vocab_guard() {
    let dir = workspace();
    let p = dir.path();
    ok(pretrain(p, "run", &[]));
    let embed = |anchors: &str, out: &str| {
        sstag(
            p,
            &["embed", "--checkpoint", "run/ckpt.sstc", "--graph", "g.sstg", "--anchors", anchors, "--out", out],
        )
    };
    ok(embed("all", "all.csv"));
    ok(embed("all", "again.csv"));
    let all = fs::read_to_string(p.join("all.csv")).unwrap();
    assert_eq!(all, fs::read_to_string(p.join("again.csv")).unwrap());
    assert_eq!(all.lines().next().unwrap().split(',').count(), 65);
    assert_eq!(all.lines().count(), 61);

    fs::write(p.join("some.txt"), "12\n3\n40\n").unwrap();
    ok(embed("some.txt", "some.csv"));
    let rows = |s: &str| -> Vec<String> { s.lines().skip(1).map(String::from).collect() };
    let full = rows(&all);
    let sub = rows(&fs::read_to_string(p.join("some.csv")).unwrap());
    assert_eq!(sub, vec![full[12].clone(), full[3].clone(), full[40].clone()]);

    Vocabulary::build(["some other corpus"], 1).unwrap().save(p.join("other.txt")).unwrap();
    let o = sstag(
        p,
        &["embed", "--checkpoint", "run/ckpt.sstc", "--graph", "g.sstg", "--vocab", "other.txt", "--out", "x.csv"],
    );
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    ok(sstag(
        p,
        &["embed", "--checkpoint", "run/ckpt.sstc", "--graph", "g.sstg", "--vocab", "run/vocab.txt", "--out", "x.csv"],
    ));
    let mut bytes = fs::read(p.join("run/ckpt.sstc")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    fs::write(p.join("broken.sstc"), bytes).unwrap();
    let o = sstag(p, &["embed", "--checkpoint", "broken.sstc", "--graph", "g.sstg", "--out", "x.csv"]);
    assert_eq!(code(&o), 4);
}

#[test]
fn probe_reports_and_rejects_bad_metrics() {
    let dir = workspace();
    let p = dir.path();
    // cluster membership written straight into the first coordinate
    let g = load_binary(p.join("g.sstg")).unwrap();
    let labels = g.node_labels().unwrap();
    let mut csv = String::from("id,e0,e1\n");
    for (v, l) in labels.iter().enumerate() {
        let c = l.unwrap().as_class().unwrap() as f64;
        csv.push_str(&format!("{},{},{}\n", g.original_ids()[v], 2.0 * c - 1.0, (v % 7) as f64 / 7.0));
    }
    fs::write(p.join("e.csv"), csv).unwrap();
    let args = ["probe", "--embeddings", "e.csv", "--graph", "g.sstg", "--out", "r.jsonl", "--metric"];
    let out = ok(sstag(p, &[&args[..], &["accuracy"]].concat()));
    let line = String::from_utf8(out.stdout).unwrap();
    let mean: f64 = line.split_whitespace().nth(2).unwrap().parse().unwrap();
    assert!(mean >= 0.9, "{line}");
    let first = fs::read_to_string(p.join("r.jsonl")).unwrap();
    assert_eq!(first.lines().count(), 5);
    ok(sstag(p, &[&args[..], &["accuracy"]].concat()));
    assert_eq!(first, fs::read_to_string(p.join("r.jsonl")).unwrap());

    assert_eq!(code(&sstag(p, &[&args[..], &["f1"]].concat())), 2);
    assert_eq!(code(&sstag(p, &[&args[..], &["rmse"]].concat())), 2);
}

#[test]
fn eval_all_writes_tidy_metrics() {
    let dir = workspace();
    let p = dir.path();
    let mut args = vec!["eval-all", "--graph", "g.sstg", "--out-dir", "run"];
    args.extend_from_slice(&TRAIN[..TRAIN.len() - 1]);
    args.extend_from_slice(&["--set", "probe.seeds=0,1"]);
    ok(sstag(p, &args));
    let csv = fs::read_to_string(p.join("run/metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "task,metric,seed,value");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("node,accuracy,0,"));
    assert!(lines[3].starts_with("edge,roc_auc,0,"));
    assert!(!p.join("run/.sstag.lock").exists());
}

#[test]
fn thread_cap_is_validated() {
    let dir = workspace();
    let o = Command::new(env!("CARGO_BIN_EXE_sstag"))
        .current_dir(dir.path())
        .env("SSTAG_THREADS", "0")
        .args(["ppr", "--graph", "g.sstg", "--node", "1"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
    let o = Command::new(env!("CARGO_BIN_EXE_sstag"))
        .current_dir(dir.path())
        .env("SSTAG_THREADS", "1")
        .args(["ppr", "--graph", "g.sstg", "--node", "1"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
}
