use std::path::Path;
use std::process::{Command, Output};

use regionedit::RunConfig;

fn regionedit(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_regionedit")).args(args).current_dir(cwd).output().unwrap()
}

fn micro_config(dir: &Path) -> String {
    let cfg = RunConfig { steps: 2, records: 2, ..RunConfig::micro() };
    let path = dir.join("micro.cfg");
    cfg.save(&path).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn generate_train_eval_sample_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro_config(dir.path());
    let out = regionedit(&["generate-data", "--config", &cfg, "--out", "data"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("data/dataset.bin").exists());

    let out = regionedit(&["train", "--config", &cfg, "--data", "data/dataset.bin", "--out", "run"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = std::fs::read_to_string(dir.path().join("run/train.log")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let out = regionedit(&["eval", "--checkpoint", "run/final.ckpt", "--data", "data/dataset.bin", "--out", "run"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = std::fs::read_to_string(dir.path().join("run/metrics.txt")).unwrap();
    assert!(report.lines().last().unwrap().starts_with("mean l1="));

    // an untrained model cannot pass the overfit gate
    let out = regionedit(
        &["eval", "--checkpoint", "run/final.ckpt", "--data", "data/dataset.bin", "--out", "run", "--gate"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));

    let out = regionedit(
        &["sample", "--checkpoint", "run/final.ckpt", "--data", "data/dataset.bin", "--index", "1", "--out", "img", "--s-txt", "2.0"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ppm = std::fs::read(dir.path().join("img/record001_edited.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n8 8\n255\n"));
    assert_eq!(ppm.len(), 11 + 8 * 8 * 3);
}

#[test]
fn ablation_switches_change_the_architecture() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro_config(dir.path());
    let out = regionedit(&["train", "--config", &cfg, "--no-hvca", "--no-tati", "--out", "run"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let saved = RunConfig::load(&dir.path().join("run/config.txt")).unwrap();
    assert!(!saved.use_hvca && !saved.use_tati && saved.use_region);
}

#[test]
fn config_errors_exit_with_status_one() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.cfg"), "steps = 3\nwarp_drive = true\n").unwrap();
    let out = regionedit(&["generate-data", "--config", "bad.cfg"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warp_drive"));

    let out = regionedit(&["generate-data", "--set", "image_size=15"], dir.path());
    assert_eq!(out.status.code(), Some(1));

    let out = regionedit(&["eval", "--checkpoint", "missing.ckpt", "--data", "missing.bin"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gradcheck_passes_on_the_micro_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = regionedit(&["gradcheck"], dir.path());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}");
    assert!(stdout.contains("passed=true"));
    let out = regionedit(&["gradcheck", "--set", "cond_width=16"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}
