mod common;

use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use vibrodiag::cli::format_diagnosis;
use vibrodiag::diagnose::Engine;
use vibrodiag::evalkit::MetricsReport;
use vibrodiag::optim::load_checkpoint;
use vibrodiag::sigproc::read_wav;

const BIN: &str = env!("CARGO_BIN_EXE_vibrodiag");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, common::small_run_config().to_toml()).unwrap();
    path
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn help_for_every_subcommand() {
    assert!(ok(&["--help"]).contains("Usage"));
    for cmd in ["synth", "corpus", "train", "diagnose", "ask", "eval", "gradcheck", "serve"] {
        let text = ok(&[cmd, "--help"]);
        assert!(text.contains("Usage"), "{cmd} help: {text}");
    }
}

#[test]
fn usage_errors_exit_1_and_runtime_errors_exit_2() {
    assert_eq!(run(&["synth", "--out", "x", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["train", "--stage", "sideways", "--data", "d", "--ckpt", "c"]).status.code(), Some(1));
    assert_eq!(run(&["diagnose", "--ckpt", "m.ck"]).status.code(), Some(1));
    let out = run(&["diagnose", "--ckpt", "/nonexistent/m.ck", "--wav", "/nonexistent/a.wav"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[gfc]\nepoch = 3\n").unwrap();
    assert_eq!(run(&["--config", p(&bad), "synth", "--out", p(dir.path())]).status.code(), Some(2));
}

#[test]
fn synth_writes_dataset_deterministically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let out = ok(&["synth", "--classes", "4", "--per-class", "5", "--duration-s", "0.25", "--out", p(d.path())]);
        assert!(out.contains("20 clips"));
    }
    let files = dir_bytes(a.path());
    assert_eq!(files.iter().filter(|(n, _)| n.ends_with(".wav")).count(), 20);
    assert!(files.iter().any(|(n, _)| n == "manifest.jsonl"));
    assert!(files.iter().any(|(n, _)| n == "config.toml"));
    assert_eq!(files, dir_bytes(b.path()));

    let c = tempfile::tempdir().unwrap();
    ok(&["synth", "--classes", "2", "--per-class", "5", "--duration-s", "0.25", "--seed", "99", "--out", p(c.path())]);
    let wavs = dir_bytes(c.path()).into_iter().filter(|(n, _)| n.ends_with(".wav")).count();
    assert_eq!(wavs, 10);
    assert_eq!(run(&["synth", "--classes", "9", "--out", p(c.path())]).status.code(), Some(2));
}

#[test]
fn train_eval_diagnose_ask_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let data = dir.path().join("data");
    let c = p(&cfg);
    ok(&["--config", c, "synth", "--out", p(&data)]);
    let corpus = ok(&["--config", c, "corpus", "--data", p(&data)]);
    assert!(corpus.contains("60 pairs"), "{corpus}");

    let vsa = dir.path().join("vsa.ck");
    let gfc = dir.path().join("gfc.ck");
    ok(&["--config", c, "train", "--stage", "vsa", "--data", p(&data), "--ckpt", p(&vsa)]);
    ok(&["--config", c, "train", "--stage", "gfc", "--data", p(&data), "--ckpt", p(&gfc), "--init", p(&vsa)]);
    assert!(dir.path().join("gfc.loss.csv").exists());
    assert!(dir.path().join("gfc.ck.config.toml").exists());
    let csv = std::fs::read_to_string(dir.path().join("gfc.loss.csv")).unwrap();
    assert!(csv.starts_with("step,lr,loss\n"));
    let ck = load_checkpoint(&gfc).unwrap();
    assert_eq!(ck.meta.stages, vec!["vsa".to_string(), "gfc".to_string()]);

    // identical flags give identical checkpoints
    let again = dir.path().join("gfc2.ck");
    ok(&["--config", c, "train", "--stage", "gfc", "--data", p(&data), "--ckpt", p(&again), "--init", p(&vsa)]);
    assert_eq!(std::fs::read(&gfc).unwrap(), std::fs::read(&again).unwrap());

    let report: MetricsReport = serde_json::from_str(&ok(&["eval", "--ckpt", p(&gfc), "--data", p(&data)])).unwrap();
    assert_eq!(report.samples, 4);
    assert_eq!(report.confusion.len(), 4);
    let text = ok(&["eval", "--ckpt", p(&gfc), "--data", p(&data), "--format", "text", "--split", "train"]);
    assert!(text.contains("unparseable"));

    let wav = std::fs::read_dir(&data)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|x| x == "wav"))
        .unwrap();
    let out = ok(&["diagnose", "--ckpt", p(&gfc), "--wav", p(&wav), "--max-len", "20"]);
    let mut engine = Engine::new(ck);
    engine.max_len = 20;
    let clip = read_wav(&wav).unwrap();
    let (d, mut session) = engine.open_session("t", &clip).unwrap();
    assert_eq!(out, format_diagnosis(&d));
    assert!(out.starts_with("raw_text: "));
    assert!(out.lines().nth(1).unwrap().starts_with("label: "));

    let mut child = Command::new(BIN)
        .args(["ask", "--ckpt", p(&gfc), "--wav", p(&wav), "--max-len", "20"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"how severe is the damage?\n\nwhat should be done?\n")
        .unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let mut want = format_diagnosis(&d);
    for (i, q) in ["how severe is the damage?", "what should be done?"].iter().enumerate() {
        let a = engine.follow_up(&mut session, q).unwrap();
        want.push_str(&format!("answer[{}]: {a}\n", i + 1));
    }
    assert_eq!(String::from_utf8(out.stdout).unwrap(), want);
}

#[test]
fn gradcheck_on_small_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let data = dir.path().join("data");
    ok(&["--config", p(&cfg), "synth", "--out", p(&data), "--classes", "2", "--per-class", "5"]);
    let out = ok(&["--config", p(&cfg), "gradcheck", "--data", p(&data), "--clips", "1"]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!(v["coordinates"].as_u64().unwrap() > 0);
    assert!(v["max_rel_error"].as_f64().unwrap() < 1e-3, "{out}");
}
