use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn qanchor(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qanchor"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env("QANCHOR_THREADS", "2")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = qanchor(dir, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn read(dir: &Path, p: &str) -> Vec<u8> {
    std::fs::read(dir.join(p)).unwrap_or_else(|e| panic!("{p}: {e}"))
}

#[test]
fn synth_is_deterministic() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &["synth", "--users", "120", "--seed", "7", "--out", "a"]);
    ok(p, &["synth", "--users", "120", "--seed", "7", "--out", "b"]);
    ok(p, &["synth", "--users", "120", "--seed", "8", "--out", "c"]);
    assert_eq!(read(p, "a/corpus.sha256"), read(p, "b/corpus.sha256"));
    assert_ne!(read(p, "a/corpus.sha256"), read(p, "c/corpus.sha256"));
    let cfg = String::from_utf8(read(p, "a/config.toml")).unwrap();
    assert!(cfg.contains("users = 120"));
}

#[test]
fn missing_inputs_name_the_path() {
    let d = tempfile::tempdir().unwrap();
    let o = qanchor(d.path(), &["pretrain", "--corpus", "nowhere.jsonl"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("nowhere.jsonl"));
    let o = qanchor(d.path(), &["synth", "--set", "train.stepz=3"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.stepz"));
}

#[test]
fn config_file_and_overrides_combine() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    std::fs::write(p.join("run.toml"), "seed = 3\n[synth]\nusers = 50\n[train]\nsteps = 9\n").unwrap();
    ok(p, &["--config", "run.toml", "--set", "synth.users=60", "synth", "--out", "s"]);
    let cfg: String = String::from_utf8(read(p, "s/config.toml")).unwrap();
    assert!(cfg.contains("users = 60"));
    assert!(cfg.contains("steps = 9"));
    let corpus = String::from_utf8(read(p, "s/corpus.jsonl")).unwrap();
    assert_eq!(corpus.lines().filter(|l| l.contains("\"profile\"")).count(), 60);
}

#[test]
fn pipeline_runs_end_to_end_and_repeats_byte_for_byte() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    let small = ["--set", "train.batch_size=8", "--set", "tune.batch_size=8"];
    let with = |args: &[&str]| -> Vec<String> { small.iter().chain(args).map(|s| s.to_string()).collect() };
    let run = |args: &[&str]| ok(p, &with(args).iter().map(String::as_str).collect::<Vec<_>>());
    run(&["synth", "--users", "150", "--out", "s"]);
    run(&["pretrain", "--corpus", "s/corpus.jsonl", "--steps", "4", "--out", "m"]);
    run(&["pretrain", "--corpus", "s/corpus.jsonl", "--steps", "4", "--out", "m2"]);
    assert_eq!(read(p, "m/model.ckpt"), read(p, "m2/model.ckpt"));
    assert_eq!(read(p, "m/train_log.csv"), read(p, "m2/train_log.csv"));
    let log = String::from_utf8(read(p, "m/train_log.csv")).unwrap();
    assert!(log.starts_with("step,L_cl,L_ntp,L_total,grad_mean,grad_max"));

    run(&["tune", "--checkpoint", "m/model.ckpt", "--corpus", "s/corpus.jsonl", "--steps", "3", "--out", "t"]);
    run(&["embed", "--checkpoint", "m/model.ckpt", "--corpus", "s/corpus.jsonl", "--out", "e"]);
    run(&[
        "embed", "--checkpoint", "m/model.ckpt", "--prompt", "t/dining_offer.qpt", "--tuned", "--corpus",
        "s/corpus.jsonl", "--out", "e",
    ]);
    let out = run(&[
        "probe", "--input", "e/embeddings_base.csv", "--input", "e/embeddings_tuned.csv", "--attention",
        "--checkpoint", "m/model.ckpt", "--prompt", "t/dining_offer.qpt", "--corpus", "s/corpus.jsonl", "--out", "r",
    ]);
    assert!(out.contains("dining_offer base auc"));
    let results = String::from_utf8(read(p, "r/results.csv")).unwrap();
    assert!(results.starts_with("scenario,method,auc,ks,n_train,n_test,seed"));
    assert_eq!(results.lines().count(), 3);
    let att = String::from_utf8(read(p, "r/attention.csv")).unwrap();
    assert!(att.starts_with("group,mass_base,mass_tuned,delta"));
    let emb = String::from_utf8(read(p, "e/embeddings_base.csv")).unwrap();
    assert_eq!(emb.lines().count(), 151);
}

#[test]
fn bench_emits_the_amortization_csv() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    let out = ok(p, &["bench", "--lp", "40", "--lq", "6", "--queries", "3", "--runs", "2", "--out", "b"]);
    assert!(out.contains("speedup"));
    let csv = String::from_utf8(read(p, "b/bench.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "mode,run,l_p,l_q,queries,seconds,tokens_processed,attention_pairs");
    assert_eq!(rows.len(), 5);
    assert!(rows[1].starts_with("cached,0,40,6,3,"));
    assert!(rows[1].contains(",21,"));
    assert!(rows[3].starts_with("uncached,0,40,6,3,"));
    assert!(rows[3].contains(&format!(",{},", 3 * (40 + 7))));
}

#[test]
fn bench_talks_to_a_running_server() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    // A checkpoint for the server: a two-step pretraining run.
    ok(p, &["synth", "--users", "40", "--out", "s"]);
    ok(p, &["--set", "train.batch_size=4", "pretrain", "--corpus", "s/corpus.jsonl", "--steps", "2", "--out", "m"]);
    let mut child = Command::new(env!("CARGO_BIN_EXE_qanchor"))
        .current_dir(p)
        .env("RUST_LOG", "warn")
        .args(["serve", "--checkpoint", "m/model.ckpt", "--addr", "127.0.0.1:0", "--no-cache"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let url = line.trim().strip_prefix("listening on ").expect("listen line").to_string();
    let wrong = qanchor(p, &["bench", "--server", &url, "--cache", "on", "--runs", "1", "--out", "b1"]);
    let right = qanchor(p, &["bench", "--server", &url, "--cache", "off", "--runs", "1", "--out", "b2"]);
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(!wrong.status.success());
    assert!(String::from_utf8_lossy(&wrong.stderr).contains("cache_enabled=false"));
    assert!(right.status.success(), "{}", String::from_utf8_lossy(&right.stderr));
    let csv = String::from_utf8(read(p, "b2/bench.csv")).unwrap();
    // The default retention caps the served prefix below the requested 128.
    assert!(csv.lines().nth(1).unwrap().starts_with("uncached,0,48,8,8,"));
}
