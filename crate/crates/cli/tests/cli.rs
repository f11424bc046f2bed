use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ctsae::io::{read_latents, read_partition, write_latents};
use ctsae::train::read_curve;

fn ctsae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctsae")).args(args).output().expect("binary runs")
}

fn ctsae_env(args: &[&str], key: &str, val: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctsae")).args(args).env(key, val).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert_eq!(code(&o), 0, "stdout:\n{}\nstderr:\n{}", stdout(&o), stderr(&o));
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Relative path to file bytes for every file under `dir`.
fn digest(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn synth_small(dir: &Path, per_class: usize) -> PathBuf {
    ok(ctsae(&["synth", "--out", s(dir), "--per-class", &per_class.to_string(), "--size", "16", "--seed", "1"]));
    dir.join("manifest.csv")
}

#[test]
fn synth_writes_the_requested_count_deterministically() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let args = |d: &Path| vec!["synth".to_string(), "--classes".into(), "4".into(), "--per-class".into(), "200".into(), "--size".into(), "64".into(), "--seed".into(), "7".into(), "--out".into(), s(d).into()];
    let run = |d: &Path, threads: &str| {
        let a = args(d);
        ok(ctsae_env(&a.iter().map(String::as_str).collect::<Vec<_>>(), "CTSAE_THREADS", threads))
    };
    let out = run(a.path(), "1");
    assert!(stdout(&out).contains("800 samples"));
    let manifest = std::fs::read_to_string(a.path().join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 801);
    run(b.path(), "2");
    let (mut da, mut db) = (digest(a.path()), digest(b.path()));
    assert_eq!(da.len(), 800 * 4 + 2);
    // The resolved config records its own output directory.
    da.remove(Path::new("run.conf"));
    db.remove(Path::new("run.conf"));
    let differing: Vec<_> = da.iter().filter(|(k, v)| db.get(*k) != Some(v)).map(|(k, _)| k).collect();
    assert!(differing.is_empty() && da.len() == db.len(), "{differing:?}");
    let conf = std::fs::read_to_string(a.path().join("run.conf")).unwrap();
    assert!(conf.contains("per_class = 200") && conf.contains("seed = 7"), "{conf}");
}

#[test]
fn unwritable_output_exits_with_io_status() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let o = ctsae(&["synth", "--out", s(&blocker.join("sub")), "--per-class", "1", "--size", "16"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("file"), "{}", stderr(&o));
}

#[test]
fn unknown_config_keys_are_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("run.conf");
    std::fs::write(&conf, "epochs = 2\nlearnig_rate = 0.1\n").unwrap();
    let o = ctsae(&["--config", s(&conf), "synth", "--out", s(&dir.path().join("d"))]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("learnig_rate"), "{}", stderr(&o));
    assert!(!dir.path().join("d").exists());

    let o = ctsae(&["--set", "colour=red", "gradcheck"]);
    assert_eq!(code(&o), 1);
    assert_eq!(code(&ctsae(&["train", "--no-such-flag"])), 1);
    assert_eq!(code(&ctsae(&["--set", "epochs=-1", "train", "--data", "x", "--out", "y"])), 1);
    assert_eq!(code(&ctsae(&["--help"])), 0);
}

#[test]
fn bad_thread_cap_is_a_config_error() {
    let o = ctsae_env(&["synth", "--out", "/nonexistent"], "CTSAE_THREADS", "lots");
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("CTSAE_THREADS"));
}

fn train_args<'a>(manifest: &'a str, out: &'a str, epochs: &'a str) -> Vec<&'a str> {
    vec!["train", "--data", manifest, "--out", out, "--preset", "tiny", "--epochs", epochs, "--batch-size", "4", "--seed", "2"]
}

#[test]
fn train_smoke_run_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_small(&dir.path().join("data"), 2);
    let run = dir.path().join("run");
    ok(ctsae(&train_args(s(&manifest), s(&run), "1")));
    assert!(run.join("best.ckpt").exists() && run.join("last.ckpt").exists());
    assert_eq!(read_curve(&run.join("loss_curve.csv")).unwrap().len(), 1);
    let conf = std::fs::read_to_string(run.join("run.conf")).unwrap();
    assert!(conf.contains("preset = tiny") && conf.contains("latent_dim = 6"), "{conf}");
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["steps"], 2);

    let mut resume = train_args(s(&manifest), s(&run), "3");
    resume.push("--resume");
    ok(ctsae(&resume));
    let epochs: Vec<usize> = read_curve(&run.join("loss_curve.csv")).unwrap().iter().map(|r| r.epoch).collect();
    assert_eq!(epochs, vec![1, 2, 3]);

    let straight = dir.path().join("straight");
    ok(ctsae(&train_args(s(&manifest), s(&straight), "3")));
    assert_eq!(std::fs::read(straight.join("last.ckpt")).unwrap(), std::fs::read(run.join("last.ckpt")).unwrap());
}

#[test]
fn resolved_config_reproduces_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_small(&dir.path().join("data"), 2);
    let first = dir.path().join("first");
    ok(ctsae(&train_args(s(&manifest), s(&first), "1")));
    let second = dir.path().join("second");
    ok(ctsae(&["--config", s(&first.join("run.conf")), "--deterministic", "train", "--out", s(&second)]));
    assert_eq!(std::fs::read(first.join("best.ckpt")).unwrap(), std::fs::read(second.join("best.ckpt")).unwrap());
    assert_eq!(std::fs::read(first.join("loss_curve.csv")).unwrap(), std::fs::read(second.join("loss_curve.csv")).unwrap());
}

#[test]
fn divergence_exits_with_numeric_status() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_small(&dir.path().join("data"), 2);
    let mut args = train_args(s(&manifest), s(dir.path().join("run").as_path()), "3").into_iter().map(String::from).collect::<Vec<_>>();
    args.splice(0..0, ["--set".to_string(), "learning_rate=1e30".to_string()]);
    let o = ctsae(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"), "{}", stderr(&o));
}

#[test]
fn encode_writes_deterministic_latents_in_manifest_order() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let manifest = synth_small(&data, 5);
    let run = dir.path().join("run");
    ok(ctsae(&train_args(s(&manifest), s(&run), "1")));
    let ckpt = run.join("best.ckpt");
    let (z1, z2) = (dir.path().join("z1.bin"), dir.path().join("z2.bin"));
    ok(ctsae(&["encode", "--checkpoint", s(&ckpt), "--data", s(&manifest), "--out", s(&z1)]));
    ok(ctsae(&["encode", "--checkpoint", s(&ckpt), "--data", s(&manifest), "--out", s(&z2)]));
    let (n, d, values) = read_latents(&z1).unwrap();
    assert_eq!((n, d, values.len()), (20, 6, 120));
    assert_eq!(std::fs::read(&z1).unwrap(), std::fs::read(&z2).unwrap());
    let ids = std::fs::read_to_string(dir.path().join("z1.ids")).unwrap();
    let want: Vec<String> = (0..20).map(|i| format!("syn{i:05}")).collect();
    assert_eq!(ids.lines().collect::<Vec<_>>(), want);
    assert!(dir.path().join("z1.bin.run.conf").exists());

    let o = ctsae(&["encode", "--checkpoint", s(&ckpt), "--data", s(&manifest), "--out", s(&z1), "--preset", "desk"]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert!(err.contains("checkpoint") && err.contains("requested") && err.contains("input_size: 16 vs 64"), "{err}");

    std::fs::remove_file(data.join("images/syn00003_2.0.pgm")).unwrap();
    let o = ctsae(&["encode", "--checkpoint", s(&ckpt), "--data", s(&manifest), "--out", s(&z1)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("syn00003_2.0.pgm"), "{}", stderr(&o));
}

#[test]
fn cluster_separates_the_toy_line() {
    let dir = tempfile::tempdir().unwrap();
    let (z, p) = (dir.path().join("z.bin"), dir.path().join("p.txt"));
    write_latents(&z, 4, 1, &[0.0, 0.1, 10.0, 10.1]).unwrap();
    ok(ctsae(&["cluster", "--latents", s(&z), "--k", "2", "--out", s(&p), "--seed", "3"]));
    let labels = read_partition(&p).unwrap();
    assert_eq!(labels.len(), 4);
    assert!(labels[0] == labels[1] && labels[2] == labels[3] && labels[0] != labels[2], "{labels:?}");
    assert_eq!(code(&ctsae(&["cluster", "--latents", s(&z), "--out", s(&p)])), 1, "k is required");
    assert_eq!(code(&ctsae(&["cluster", "--latents", s(&dir.path().join("none.bin")), "--k", "2", "--out", s(&p)])), 2);
}

fn write_labels(path: &Path, labels: &[usize]) {
    std::fs::write(path, labels.iter().map(|l| format!("{l}\n")).collect::<String>()).unwrap();
}

#[test]
fn evaluate_prints_four_decimals_and_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let (t, p) = (dir.path().join("truth.txt"), dir.path().join("pred.txt"));
    write_labels(&t, &[0, 0, 0, 1, 1, 1]);
    write_labels(&p, &[5, 5, 5, 2, 2, 2]);
    let o = ok(ctsae(&["evaluate", "--pred", s(&p), "--truth", s(&t)]));
    let out = stdout(&o);
    assert!(out.contains("NMI 1.0000") && out.contains("ARI 1.0000") && out.contains("RI  1.0000"), "{out}");

    write_labels(&p, &[0, 0, 1, 1, 2, 2]);
    let report = dir.path().join("r.json");
    let out = stdout(&ok(ctsae(&["evaluate", "--pred", s(&p), "--truth", s(&t), "--report", s(&report)])));
    let nmi = (2.0f64 / 3.0) * (2f64.ln() / 3f64.ln()).sqrt();
    assert!(out.contains(&format!("NMI {nmi:.4}")), "{out}");
    assert!(out.contains(&format!("RI  {:.4}", 2.0 / 3.0)) && out.contains(&format!("ARI {:.4}", 8.0 / 33.0)), "{out}");
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!((r["nmi"].as_f64().unwrap() - nmi).abs() < 1e-12);
    assert!((r["ari"].as_f64().unwrap() - 8.0 / 33.0).abs() < 1e-12);

    write_labels(&p, &[0, 1]);
    assert_eq!(code(&ctsae(&["evaluate", "--pred", s(&p), "--truth", s(&t)])), 1);
}

#[test]
fn evaluate_reads_labels_from_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_small(dir.path(), 2);
    let p = dir.path().join("pred.txt");
    write_labels(&p, &[0, 1, 2, 3, 0, 1, 2, 3]);
    let out = stdout(&ok(ctsae(&["evaluate", "--pred", s(&p), "--data", s(&manifest)])));
    assert!(out.contains("ARI 1.0000"), "{out}");
    assert!(dir.path().join("pred.eval.json").exists());
}

#[test]
fn gradcheck_passes_and_catches_an_injected_bug() {
    let o = ok(ctsae(&["gradcheck"]));
    let out = stdout(&o);
    assert!(out.contains("gradcheck passed"));
    assert!(out.lines().filter(|l| l.starts_with("ok")).count() > 25, "{out}");
    let o = ctsae(&["gradcheck", "--inject-bug"]);
    assert_eq!(code(&o), 3);
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn ablate_reports_six_variants() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_small(&dir.path().join("data"), 10);
    let out = dir.path().join("ablate");
    let o = ok(ctsae(&["ablate", "--data", s(&manifest), "--out", s(&out), "--preset", "tiny", "--epochs", "2", "--seeds", "0", "--set", "batch_size=8"]));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 7, "{text}");
    assert!(lines[0].split_whitespace().eq(["Model", "Branches", "Recon-MSE", "ARI", "NMI"]));

    let rows: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 6);
    let branches: Vec<u64> = rows.iter().map(|r| r["branches"].as_u64().unwrap()).collect();
    assert_eq!(branches, vec![1, 1, 1, 4, 4, 4]);
    for entry in std::fs::read_dir(&out).unwrap() {
        let dir = entry.unwrap().path();
        if !dir.is_dir() {
            continue;
        }
        let curve = read_curve(&dir.join("seed_0/loss_curve.csv")).unwrap();
        let best = curve.iter().map(|r| r.val).fold(f64::INFINITY, f64::min);
        let name = dir.file_name().unwrap().to_str().unwrap().to_string();
        let row = rows.iter().find(|r| r["model"].as_str().unwrap().to_lowercase().replace([' ', '-'], "_") == name).unwrap();
        assert!((row["recon_mse"].as_f64().unwrap() - best).abs() < 1e-6, "{name}");
    }
}
