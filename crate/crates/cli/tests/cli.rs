use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn alternet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_alternet"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn toy_run() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.run")
}

fn data_rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(str::to_string)
        .collect()
}

#[test]
fn pretrain_writes_one_row_per_epoch_and_learns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_run();
    let out = alternet(
        &["pretrain", "--config", cfg.to_str().unwrap(), "--epochs", "5", "--out", "run"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = dir.path().join("run/pretrain_metrics.csv");
    let text = fs::read_to_string(&metrics).unwrap();
    assert!(text.starts_with("# config_sha256 = "));
    assert!(text.contains("# seed = 0\n") && text.contains("# version = alternet "));
    let rows = data_rows(&metrics);
    assert_eq!(rows.len(), 5);
    let total = |row: &str| row.split(',').nth(4).unwrap().parse::<f64>().unwrap();
    assert!(total(&rows[4]) < total(&rows[0]));
    assert!(dir.path().join("run/final.ckpt").is_file());
}

#[test]
fn same_config_and_seed_give_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_run();
    let run = |out: &str, seed: &str| {
        let o = alternet(
            &["pretrain", "--config", cfg.to_str().unwrap(), "--epochs", "1", "--seed", seed, "--out", out],
            dir.path(),
        );
        assert!(o.status.success());
        fs::read(dir.path().join(out).join("pretrain_metrics.csv")).unwrap()
    };
    assert_eq!(run("a", "3"), run("b", "3"));
    assert_ne!(run("c", "4"), run("a", "3"));
}

#[test]
fn bad_config_names_key_and_line() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.run"), "seed = 1\n# comment\nmodel.widht = 3\n").unwrap();
    let out = alternet(&["pretrain", "--config", "bad.run", "--out", "x"], dir.path());
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3") && err.contains("model.widht"), "{err}");
    assert!(!dir.path().join("x").exists());
}

#[test]
fn generate_finetune_and_reconstruct() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_run();
    let cfg = cfg.to_str().unwrap();
    let ok = |args: &[&str]| {
        let o = alternet(args, dir.path());
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    };
    ok(&["generate", "--config", cfg, "--n-examples", "24", "--out", "corpus"]);
    assert_eq!(data_rows(&dir.path().join("corpus/manifest.csv")).len(), 24);
    ok(&["pretrain", "--config", cfg, "--epochs", "1", "--data", "corpus/manifest.csv", "--out", "pt"]);
    ok(&[
        "finetune", "--config", cfg, "--checkpoint", "pt/final.ckpt", "--train", "corpus/manifest.csv", "--val",
        "corpus/manifest.csv", "--epochs", "2", "--out", "ft",
    ]);
    let rows = data_rows(&dir.path().join("ft/finetune_metrics.csv"));
    assert!(rows.iter().any(|r| r.contains(",val,")));

    ok(&[
        "reconstruct", "--config", cfg, "--checkpoint", "pt/final.ckpt", "--input", "corpus/rec_00000.eegw", "--out",
        "recon.csv",
    ]);
    let rows = data_rows(&dir.path().join("recon.csv"));
    // 4 channels, 256 samples in patches of 16
    assert_eq!(rows.len(), 4 * 256);
    let masked = rows.iter().filter(|r| r.split(',').nth(3) == Some("1")).count();
    assert!(masked > 0 && masked < rows.len());
}

#[test]
fn bench_emits_one_row_per_mechanism_and_channel_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = alternet(
        &[
            "bench", "--mechanisms", "standard,alternating", "--config", "tiny", "--n-patches", "2", "--repetitions",
            "3", "--warmup", "0", "--no-load-check", "--out", "b",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = data_rows(&dir.path().join("b/bench.csv"));
    assert_eq!(rows.len(), 2 * 64);
    assert!(rows[0].starts_with("standard,tiny,1,"));
    assert!(rows[127].starts_with("alternating,tiny,64,"));
}

#[test]
fn verify_subset_prints_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = alternet(&["verify", "--only", "2,5,8"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().filter(|l| l.starts_with("[PASS]")).count(), 3);
    assert!(!alternet(&["verify", "--only", "99"], dir.path()).status.success());
}
