use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[dataset]
kind = "synthetic"
classes = 2
items_per_class = 8

[pretrain]
clusters = 4
epochs = 2
batch = 8

[distill]
epochs = 2
batch = 8

[probe]
epochs = 5
"#;

fn unfused(args: &[&str], run_dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unfused"))
        .args(args)
        .arg("--run-dir")
        .arg(run_dir)
        .output()
        .expect("binary runs")
}

fn small_pipeline(root: &Path, name: &str) -> std::path::PathBuf {
    let config = root.join("small.toml");
    fs::write(&config, SMALL).unwrap();
    let dir = root.join(name);
    let out = unfused(
        &["pipeline", "--profile", "desk", "--seed", "7", "--config", config.to_str().unwrap()],
        &dir,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    dir
}

fn bytes(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn pipeline_is_deterministic_and_stages_rerun_bit_exactly() {
    let root = tempfile::tempdir().unwrap();
    let a = small_pipeline(root.path(), "a");
    let b = small_pipeline(root.path(), "b");
    for f in ["metrics.jsonl", "pretrain.ckpt", "pseudo_labels.txt", "distill.ckpt", "eval.json", "config.toml"] {
        assert_eq!(bytes(&a, f), bytes(&b, f), "{f} differs");
    }

    let distill = bytes(&a, "distill.ckpt");
    let eval = bytes(&a, "eval.json");
    fs::remove_file(a.join("distill.ckpt")).unwrap();
    fs::remove_file(a.join("eval.json")).unwrap();
    for stage in ["distill", "eval"] {
        let out = unfused(&[stage], &a);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(bytes(&a, "distill.ckpt"), distill);
    assert_eq!(bytes(&a, "eval.json"), eval);
}

#[test]
fn report_lists_every_distillation_component_per_epoch() {
    let root = tempfile::tempdir().unwrap();
    let dir = small_pipeline(root.path(), "run");
    let out = unfused(&["report"], &dir);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let section: Vec<&str> = text
        .split("== distill ==")
        .nth(1)
        .unwrap()
        .lines()
        .skip(1)
        .take_while(|l| !l.is_empty())
        .collect();
    let header: Vec<&str> = section[0].split_whitespace().collect();
    for c in ["L_ce", "L_ce_1", "L_ce_2", "L_ce_3", "L_kl_1", "L_kl_2", "L_kl_3", "L_mse_1", "L_mse_2", "L_mse_3"] {
        assert!(header.contains(&c), "missing {c}");
    }
    assert_eq!(section.len(), 1 + 2);
    for row in &section[1..] {
        assert_eq!(row.split_whitespace().count(), header.len());
    }
    assert_eq!(fs::read_to_string(dir.join("report.txt")).unwrap(), text);
}

#[test]
fn eval_without_checkpoint_exits_one_naming_the_artifact() {
    let root = tempfile::tempdir().unwrap();
    let out = unfused(&["eval"], &root.path().join("empty"));
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("distill.ckpt"), "{err}");
}

#[test]
fn distill_without_pseudo_labels_exits_one() {
    let root = tempfile::tempdir().unwrap();
    let config = root.path().join("c.toml");
    fs::write(&config, SMALL).unwrap();
    let out = unfused(&["distill", "--config", config.to_str().unwrap()], &root.path().join("r"));
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("pseudo_labels.txt"));
}

#[test]
fn usage_errors_exit_two() {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path().join("r");
    assert_eq!(unfused(&["pipeline", "--bogus"], &dir).status.code(), Some(2));
    assert_eq!(unfused(&["train"], &dir).status.code(), Some(2));
    assert_eq!(unfused(&["eval", "--profile", "huge"], &dir).status.code(), Some(2));
    assert_eq!(unfused(&["--help"], &dir).status.code(), Some(0));
}

#[test]
fn invalid_config_exits_one_with_the_violated_bound() {
    let root = tempfile::tempdir().unwrap();
    let config = root.path().join("bad.toml");
    fs::write(&config, "[distill]\nalpha = 1.5\n").unwrap();
    let out = unfused(&["pretrain", "--config", config.to_str().unwrap()], &root.path().join("r"));
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("alpha"));
}
