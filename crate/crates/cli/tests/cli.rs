use std::path::Path;
use std::process::{Command, Output};

fn cdanet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdanet"))
        .args(args)
        .current_dir(cwd)
        .env_remove("CDANET_DATA_ROOT")
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn text(out: &Output) -> (String, String) {
    (
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn volume_files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".nii.gz"))
        .collect();
    names.sort();
    names
}

const SMALL_CONFIG: &str = r#"
data_root = "data"
output_root = "runs"

[model]
variant = "base+CTN+DTTN+penalty"
base_channels = 4
depth = 2

[preprocess]
target_size = [16, 16, 16]

[training]
epochs = 1
n_folds = 1
augment = false
"#;

#[test]
fn no_arguments_prints_usage_and_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = cdanet(&[], dir.path());
    assert!(!out.status.success());
    let (_, err) = text(&out);
    assert!(err.contains("Usage"), "{err}");
}

#[test]
fn unknown_subcommand_and_flag_fail_with_usage() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["frobnicate"][..], &["phantom", "--bogus", "1"][..]] {
        let out = cdanet(args, dir.path());
        assert!(!out.status.success());
        assert!(text(&out).1.contains("Usage"));
    }
}

#[test]
fn help_lists_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let out = cdanet(&["--help"], dir.path());
    assert!(out.status.success());
    let (help, _) = text(&out);
    for sub in ["make-targets", "phantom", "train", "evaluate", "predict", "ablate", "export-attention"] {
        assert!(help.contains(sub), "missing {sub} in help");
    }
    let out = cdanet(&["train", "--help"], dir.path());
    let (help, _) = text(&out);
    for flag in ["--config", "--set", "--resume", "--variant", "--epochs", "--data-root"] {
        assert!(help.contains(flag), "missing {flag} in train help");
    }
}

#[test]
fn phantom_writes_two_volumes() {
    let dir = tempfile::tempdir().unwrap();
    let out = cdanet(&["phantom", "--seed", "0", "--size", "32", "--out", "d/"], dir.path());
    assert!(out.status.success(), "{:?}", text(&out));
    let d = dir.path().join("d");
    assert_eq!(volume_files(&d), vec!["phantom_000_image.nii.gz", "phantom_000_label.nii.gz"]);
    assert!(d.join("labels.toml").is_file());
}

#[test]
fn phantom_output_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for out_dir in ["a", "b"] {
        let out = cdanet(&["phantom", "--seed", "3", "--size", "16", "--out", out_dir], dir.path());
        assert!(out.status.success());
    }
    for f in volume_files(&dir.path().join("a")) {
        let a = std::fs::read(dir.path().join("a").join(&f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(&f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
}

#[test]
fn make_targets_then_train_hits_the_cache() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("exp.toml"), SMALL_CONFIG).unwrap();
    let out = cdanet(&["phantom", "--seed", "0", "--size", "16", "--count", "2", "--out", "data"], root);
    assert!(out.status.success());

    let out = cdanet(&["make-targets", "--config", "exp.toml"], root);
    let (_, err) = text(&out);
    assert!(out.status.success(), "{err}");
    assert!(err.contains("computing targets"), "{err}");
    assert!(!err.contains("cache hit"), "{err}");

    let out = cdanet(&["train", "--config", "exp.toml"], root);
    let (stdout, err) = text(&out);
    assert!(out.status.success(), "{err}");
    assert_eq!(err.matches("target cache hit").count(), 2, "{err}");
    assert!(!err.contains("computing targets"), "{err}");
    assert!(stdout.contains("trained 2 steps"), "{stdout}");
    let runs = root.join("runs");
    for f in ["checkpoint_best.json", "checkpoint_last.json", "train_log.csv", "val_log.csv"] {
        assert!(runs.join(f).is_file(), "missing {f}");
    }
    let log = std::fs::read_to_string(runs.join("train_log.csv")).unwrap();
    assert!(log.starts_with("step,epoch,case_id,L,L_O,L_C,L_DT,E_p"));
    assert_eq!(log.lines().count(), 3);

    let ck = runs.join("checkpoint_best.json");
    let ck = ck.to_str().unwrap();
    let out = cdanet(&["evaluate", "--config", "exp.toml", "--checkpoint", ck, "--out", "eval"], root);
    assert!(out.status.success(), "{:?}", text(&out));
    for f in ["metrics.csv", "metrics.json", "metrics_summary.csv", "metrics_summary.json"] {
        assert!(root.join("eval").join(f).is_file(), "missing {f}");
    }

    let out = cdanet(&["predict", "--config", "exp.toml", "--checkpoint", ck, "--cases", "phantom_001", "--out", "pred"], root);
    assert!(out.status.success(), "{:?}", text(&out));
    assert_eq!(volume_files(&root.join("pred")), vec!["phantom_001_pred.nii.gz"]);

    let out = cdanet(&["export-attention", "--config", "exp.toml", "--checkpoint", ck, "--out", "att"], root);
    assert!(out.status.success(), "{:?}", text(&out));
    assert_eq!(volume_files(&root.join("att")).len(), 2);

    let out = cdanet(
        &["evaluate", "--config", "exp.toml", "--checkpoint", ck, "--set", "model.variant=base"],
        root,
    );
    assert!(!out.status.success());
    assert!(text(&out).1.contains("checkpoint"));
}

#[test]
fn flags_and_environment_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("exp.toml"), SMALL_CONFIG).unwrap();
    let out = cdanet(&["phantom", "--seed", "5", "--size", "16", "--out", "elsewhere"], root);
    assert!(out.status.success());

    let out = cdanet(&["make-targets", "--config", "exp.toml"], root);
    assert!(!out.status.success());

    let out = Command::new(env!("CARGO_BIN_EXE_cdanet"))
        .args(["make-targets", "--config", "exp.toml"])
        .current_dir(root)
        .env("CDANET_DATA_ROOT", root.join("elsewhere"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{:?}", text(&out));

    let out = cdanet(&["make-targets", "--config", "exp.toml", "--data-root", "elsewhere", "--set", "preprocess.target_size=[8,8,8]"], root);
    assert!(out.status.success(), "{:?}", text(&out));
    assert!(text(&out).1.contains("computing targets"));

    let out = cdanet(&["make-targets", "--config", "exp.toml", "--set", "training.epochz=3"], root);
    assert!(!out.status.success());
}

#[test]
fn ablate_rejects_unknown_variants() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("exp.toml"), SMALL_CONFIG).unwrap();
    let out = cdanet(&["ablate", "--config", "exp.toml", "--variants", "base,unet"], root);
    assert!(!out.status.success());
    assert!(text(&out).1.contains("unet"));
}
