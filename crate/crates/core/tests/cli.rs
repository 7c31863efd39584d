use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use softdrop::experiment::{CHECKPOINT_FILE, HISTORY_FILE, METRICS_FILE, METRICS_HEADER, REPORT_FILE, SUMMARIES_FILE};

fn softdrop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_softdrop"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn blob_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("run.cfg");
    let text = format!(
        "method=sdc\np=0.5\ndataset=blobs\narchitecture=mlp\nepochs=2\nbatch_size=8\nblob_per_class=30\n\
         val_passes=3\ntest_passes=5\noutput_dir={}\n{extra}",
        dir.join("out").display()
    );
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn selftest_and_gradcheck_succeed() {
    let out = softdrop(&["selftest"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let out = softdrop(&["gradcheck"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().count() >= 10);
    assert!(text.lines().all(|l| l.starts_with("PASS")));
}

#[test]
fn train_then_eval_writes_every_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = blob_config(dir.path(), "");
    let cfg = cfg.to_str().unwrap();
    let out = softdrop(&["train", "--config", cfg]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("out");
    let ckpt = run.join(CHECKPOINT_FILE);
    assert!(ckpt.is_file() && run.join(HISTORY_FILE).is_file());
    assert_eq!(fs::read_to_string(run.join(HISTORY_FILE)).unwrap().lines().count(), 3);

    let out = softdrop(&["eval", "--config", cfg, "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.starts_with(METRICS_HEADER));
    assert!(stdout.lines().nth(1).unwrap().starts_with("sdc,0.5,0,test,"));
    let metrics = fs::read_to_string(run.join(METRICS_FILE)).unwrap();
    assert_eq!(metrics.lines().next(), Some(METRICS_HEADER));
    assert_eq!(
        fs::read_to_string(run.join(SUMMARIES_FILE)).unwrap().lines().count(),
        90
    );
    let report: serde_json::Value = serde_json::from_slice(&fs::read(run.join(REPORT_FILE)).unwrap()).unwrap();
    assert_eq!(report["rejection"]["thresholds"].as_array().unwrap().len(), 101);
    assert_eq!(
        report["notes"]["accuracy"].as_str().map(|s| s.contains("popular")),
        Some(true)
    );
}

#[test]
fn retraining_reproduces_every_byte() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = blob_config(dir.path(), "");
    let text = fs::read_to_string(&cfg)
        .unwrap()
        .replace("method=sdc\np=0.5\n", "method=bbb\n");
    fs::write(&cfg, text).unwrap();
    let run = dir.path().join("out");
    let mut first = Vec::new();
    for attempt in 0..2 {
        let out = softdrop(&["train", "--config", cfg.to_str().unwrap()]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let bytes: Vec<Vec<u8>> = [CHECKPOINT_FILE, HISTORY_FILE]
            .iter()
            .map(|f| fs::read(run.join(f)).unwrap())
            .collect();
        if attempt == 0 {
            first = bytes;
        } else {
            assert_eq!(first, bytes);
        }
    }
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    for extra in ["bogus_key=1\n", "batch_size=0\n"] {
        let cfg = blob_config(dir.path(), extra);
        let out = softdrop(&["train", "--config", cfg.to_str().unwrap()]);
        assert_eq!(code(&out), 2, "{extra}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let path = dir.path().join("bbb.cfg");
    fs::write(&path, "method=bbb\np=0.5\n").unwrap();
    let out = softdrop(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("configuration error"));
}

#[test]
fn data_errors_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mnist.cfg");
    fs::write(
        &path,
        format!(
            "method=dropout\np=0.5\ndata_dir={}\n",
            dir.path().join("missing").display()
        ),
    )
    .unwrap();
    let out = softdrop(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));

    let cfg = blob_config(dir.path(), "");
    let bad = dir.path().join("bad.sdcn");
    fs::write(&bad, b"SDCN9 not a checkpoint").unwrap();
    let out = softdrop(&[
        "eval",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        bad.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn divergence_exits_with_four() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = blob_config(dir.path(), "learning_rate=1e300\n");
    let out = softdrop(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 4);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("numerical") && err.contains("batch"), "{err}");
}

#[test]
fn compare_tabulates_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let mut paths = Vec::new();
    for seed in 0..2 {
        let sub = dir.path().join(format!("s{seed}"));
        fs::create_dir_all(&sub).unwrap();
        paths.push(blob_config(&sub, &format!("seed={seed}\n")));
    }
    let out_dir = dir.path().join("cmp");
    let mut args = vec!["compare", "--out", out_dir.to_str().unwrap(), "--configs"];
    args.extend(paths.iter().map(|p| p.to_str().unwrap()));
    let out = softdrop(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(out_dir.join("comparison.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2, "{csv}");
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert!(row.iter().all(|f| !f.is_empty()), "{csv}");
    assert!(out_dir.join("comparison.json").is_file());
}
