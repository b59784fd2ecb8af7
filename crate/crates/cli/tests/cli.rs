use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn xag(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xag"))
        .args(args)
        .env("XAG_LOG", "quiet")
        .output()
        .expect("spawn xag")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn write_config(dir: &Path, extra: &[&str]) -> PathBuf {
    let mut text = format!("output_dir={}\n", dir.join("run").display());
    for line in [
        "num_ids=12",
        "baseline_iterations=20",
        "stage1_iterations=20",
        "stage2_iterations=10",
        "stage3_iterations=20",
    ]
    .iter()
    .chain(extra)
    {
        text.push_str(line);
        text.push('\n');
    }
    let path = dir.join("run.cfg");
    std::fs::write(&path, text).unwrap();
    path
}

fn run_ok(args: &[&str]) -> Output {
    let out = xag(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn staged_run(cfg: &Path) {
    let c = cfg.to_str().unwrap();
    run_ok(&["gen-data", "--config", c]);
    for stage in ["baseline", "1", "2", "3"] {
        run_ok(&["train", "--config", c, "--stage", stage]);
    }
    let root = cfg.parent().unwrap().join("run");
    for (ckpt, variant) in [("stage1", "clean"), ("stage2", "attacked"), ("stage3", "clean"), ("stage3", "attacked")] {
        let path = root.join("checkpoints").join(format!("{ckpt}.xagc"));
        run_ok(&["eval", "--config", c, "--checkpoint", path.to_str().unwrap(), "--variant", variant]);
    }
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for dir in ["data", "checkpoints", "history", "reports"] {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(root.join(dir))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        entries.sort();
        out.extend(entries.into_iter().map(|p| p.strip_prefix(root).unwrap().to_path_buf()));
    }
    out
}

#[test]
fn gradcheck_passes() {
    let out = run_ok(&["gradcheck", "--seed", "3"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().count() > 10);
    assert!(text.lines().all(|l| l.starts_with("pass")));
}

#[test]
fn bad_config_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &["not_a_key=1"]);
    assert_eq!(code(&xag(&["gen-data", "--config", cfg.to_str().unwrap()])), 2);
    let cfg = write_config(dir.path(), &["dim=0"]);
    assert_eq!(code(&xag(&["gen-data", "--config", cfg.to_str().unwrap()])), 2);
}

#[test]
fn missing_parent_exits_with_state_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &[]);
    let c = cfg.to_str().unwrap();
    run_ok(&["gen-data", "--config", c]);
    assert_eq!(code(&xag(&["train", "--config", c, "--stage", "2"])), 3);
    assert_eq!(code(&xag(&["train", "--config", c, "--stage", "3"])), 3);
}

#[test]
fn foreign_checkpoint_exits_with_integrity_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &[]);
    let c = cfg.to_str().unwrap();
    run_ok(&["gen-data", "--config", c]);
    run_ok(&["train", "--config", c, "--stage", "1"]);
    let ckpt = dir.path().join("run/checkpoints/stage1.xagc");

    let other = tempfile::tempdir().unwrap();
    let mut text = std::fs::read_to_string(&cfg).unwrap();
    text = text.replace(&dir.path().display().to_string(), &other.path().display().to_string());
    text.push_str("lambda1=0.5\n");
    let other_cfg = other.path().join("run.cfg");
    std::fs::write(&other_cfg, text).unwrap();
    let oc = other_cfg.to_str().unwrap();
    run_ok(&["gen-data", "--config", oc]);
    let out = xag(&["eval", "--config", oc, "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(code(&out), 4);

    let bytes = std::fs::read(&ckpt).unwrap();
    std::fs::write(&ckpt, &bytes[..bytes.len() / 2]).unwrap();
    let out = xag(&["eval", "--config", c, "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(code(&out), 4);
}

#[test]
fn identical_configs_give_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ca = write_config(a.path(), &[]);
    let cb = write_config(b.path(), &[]);
    staged_run(&ca);
    staged_run(&cb);
    let (ra, rb) = (a.path().join("run"), b.path().join("run"));
    let files = files_under(&ra);
    assert_eq!(files, files_under(&rb));
    assert!(files.len() >= 3 + 4 + 4 + 4);
    for f in &files {
        assert_eq!(std::fs::read(ra.join(f)).unwrap(), std::fs::read(rb.join(f)).unwrap(), "{} differs", f.display());
    }
}

#[test]
fn eval_report_lists_cmc_values() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &[]);
    let c = cfg.to_str().unwrap();
    run_ok(&["gen-data", "--config", c]);
    run_ok(&["train", "--config", c, "--stage", "baseline"]);
    let ckpt = dir.path().join("run/checkpoints/baseline.xagc");
    let out = run_ok(&["eval", "--config", c, "--checkpoint", ckpt.to_str().unwrap()]);
    let text = String::from_utf8(out.stdout).unwrap();
    for key in ["rank1=", "rank5=", "rank10="] {
        assert!(text.contains(key), "{text}");
    }
    assert!(dir.path().join("run/reports/baseline_clean.txt").exists());
}
