use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seeds = [3]
total_steps = 4
batch_size = 4
checkpoint_every = 2

[data]
synthetic_examples = 60
prepass_batches = 2

[teacher]
steps = 6
batch_size = 4

[teacher.model]
layers = 1
width = 16
heads = 2

[student]
layers = 1
width = 16
heads = 2

[eval]
max_examples = 3
max_new_tokens = 6
"#;

fn adakd(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adakd"))
        .args(args)
        .current_dir(cwd)
        .env_remove("ADAKD_RUNS_DIR")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

#[test]
fn selfcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = adakd(&["selfcheck"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stdout).contains("7 checks, 0 failed"));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(adakd(&["frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(adakd(&["distill", "--bogus"], dir.path()).status.code(), Some(2));
}

#[test]
fn config_errors_exit_3_with_one_line() {
    let dir = setup();
    let o = adakd(&["distill", "--config", "tiny.toml", "--set", "idts.c=-1.0", "--out", "r"], dir.path());
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    assert!(err.starts_with("error[config]:"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);

    let o = adakd(&["train-teacher", "--set", "nonsense.key=1", "--out", "r2"], dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn distill_writes_run_directory_and_respects_force() {
    let dir = setup();
    let args = ["distill", "--config", "tiny.toml", "--set", "idts.c=0.0", "--out", "run"];
    let o = adakd(&args, dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let run = dir.path().join("run");
    let snapshot = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(snapshot.contains("c = 0.0"), "{snapshot}");
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "completed");
    assert_eq!(manifest["seeds"], serde_json::json!([3]));
    assert!(manifest["finished_unix"].as_f64().unwrap() >= manifest["started_unix"].as_f64().unwrap());
    assert!(run.join("metrics.csv").exists());
    let per_seed = fs::read_to_string(run.join("seed_3/metrics.csv")).unwrap();
    assert_eq!(per_seed.lines().count(), 5);
    assert!(run.join("seed_3/checkpoints/step_2.ckpt").exists());
    assert!(run.join("teacher/teacher.ckpt").exists());

    let again = adakd(&args, dir.path());
    assert_eq!(again.status.code(), Some(2));
    assert!(stderr(&again).contains("--force"));
    let mut forced = args.to_vec();
    forced.push("--force");
    assert_eq!(adakd(&forced, dir.path()).status.code(), Some(0));
}

#[test]
fn seed_flag_replaces_seed_list() {
    let dir = setup();
    let o = adakd(&["distill", "--config", "tiny.toml", "--seed", "9", "--out", "s"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(dir.path().join("s/seed_9/metrics.csv").exists());
    assert!(fs::read_to_string(dir.path().join("s/config.toml")).unwrap().contains("seeds = [9]"));
}

#[test]
fn teacher_eval_and_analyze_pipeline() {
    let dir = setup();
    let o = adakd(&["train-teacher", "--config", "tiny.toml", "--out", "t"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(dir.path().join("t/metrics.csv").exists());

    let o = adakd(
        &["distill", "--config", "tiny.toml", "--teacher", "t/teacher.ckpt", "--out", "d"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(!dir.path().join("d/teacher").exists());

    let o = adakd(
        &["eval", "--config", "tiny.toml", "--checkpoint", "d/seed_3/checkpoints/final.ckpt", "--out", "e"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("e/eval.json")).unwrap()).unwrap();
    let mean = report["mean"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&mean));

    let o = adakd(
        &[
            "analyze", "--config", "tiny.toml", "--teacher", "t/teacher.ckpt", "--run", "d/seed_3", "--checkpoint",
            "step_2", "--report", "entropy", "--out", "a",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("a/entropy_histogram.csv")).unwrap();
    assert!(csv.starts_with("series,x,y\n"));
    assert!(csv.contains("entropy_after_hard"));
    assert!(!dir.path().join("a/gradient_alignment.csv").exists());

    let o = adakd(
        &[
            "analyze", "--config", "tiny.toml", "--teacher", "t/teacher.ckpt", "--run", "d/seed_3", "--checkpoint",
            "final", "--out", "all",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for name in ["entropy_histogram", "gradient_alignment", "difficulty_evolution"] {
        assert!(dir.path().join(format!("all/{name}.json")).exists(), "{name}");
    }
    let evo: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("all/difficulty_evolution.json")).unwrap()).unwrap();
    assert_eq!(evo["points"].as_array().unwrap().len(), 2);
    assert_eq!(evo["grouping"]["method"], "terciles");
}

#[test]
fn missing_checkpoint_is_a_config_error() {
    let dir = setup();
    let o = adakd(&["eval", "--config", "tiny.toml", "--checkpoint", "nope.ckpt", "--out", "e"], dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn runs_dir_env_sets_default_output_root() {
    let dir = setup();
    let o = Command::new(env!("CARGO_BIN_EXE_adakd"))
        .args(["train-teacher", "--config", "tiny.toml"])
        .current_dir(dir.path())
        .env("ADAKD_RUNS_DIR", dir.path().join("root"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(dir.path().join("root/train-teacher/teacher.ckpt").exists());
}
