use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_backdoor-lab"));
    cmd.env("RUST_LOG", "warn");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn write_config(dir: &Path, kind: &str, extra: &str) -> String {
    let text = format!(
        r#"kind = "{kind}"
seed = 4
out_dir = "{out}"
{extra}
[dataset]
source = "synth"
train_count = 128
test_count = 32
height = 8
width = 8

[train]
epochs = 1
batch_size = 16

[eval]
n_samples = 70
extractor_min_accuracy = 0.0
grid = 2
"#,
        out = dir.join("run").display()
    );
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path.display().to_string()
}

#[test]
fn train_prints_metrics_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "ae_clean", "");
    let out = run(&["train", "--config", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(metrics["utility_metric"], "mse");
    for name in ["report.json", "model.ckpt", "samples.png"] {
        assert!(dir.path().join("run").join(name).exists(), "{name} missing");
    }

    let ckpt = dir.path().join("run/model.ckpt");
    let eval = run(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--config", &cfg]);
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    let evaluated: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert_eq!(evaluated["utility"], metrics["clean_utility"]);

    let png = dir.path().join("grid.png");
    let grid = run(&["grid", "--checkpoint", ckpt.to_str().unwrap(), "--out", png.to_str().unwrap()]);
    assert!(grid.status.success());
    assert_eq!(&fs::read(&png).unwrap()[1..4], b"PNG");
}

#[test]
fn seed_and_out_overrides_apply() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "ae_clean", "");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for (seed, out) in [("1", &a), ("2", &b)] {
        let status = run(&["train", "--config", &cfg, "--seed", seed, "--out", out.to_str().unwrap()]).status;
        assert!(status.success());
    }
    assert_ne!(fs::read(a.join("model.ckpt")).unwrap(), fs::read(b.join("model.ckpt")).unwrap());
    assert!(!dir.path().join("run").exists());
}

#[test]
fn invalid_config_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    // An image-patch trigger cannot be applied to GAN noise.
    let trigger = "\n[trigger]\nkind = \"image_patch\"\ncorner = \"top_left\"\nsize = 3\ncolor = [1.0]\n";
    let cfg = write_config(dir.path(), "gan_backdoor", trigger);
    let out = run(&["train", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn missing_files_exit_with_generic_code() {
    let out = run(&["compare", "--clean", "/nonexistent/a.json", "--backdoored", "/nonexistent/b.json"]);
    assert_eq!(out.status.code(), Some(1));
}
