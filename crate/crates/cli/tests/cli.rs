//! End-to-end behaviour of the `cpfas` binary: outputs, versioning and exit
//! codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn cpfas(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cpfas"))
        .args(args)
        .env("CPFAS_QUIET", "1")
        .env_remove("CPFAS_OUTPUT_ROOT")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, name: &str, out: &Path, extra: &str) -> PathBuf {
    let path = dir.join(name);
    let text = format!(
        r#"{{
  "experiment": "double_well",
  "seed": 4,
  "io": {{"out_dir": "{}"}},
  "data": {{"t_end": 1, "n_obs": 3}},
  "smoother": {{"n_particles": 16, "n_iterations": 10, "burn_in": 5, "n_chains": 1}},
  "network": {{"width": 8, "depth": 1, "n_freqs": 2}},
  "training": {{"learning_rate": 0.001, "batch_size": 64, "epochs": 1}},
  "sampling": {{"n_paths": 5}}{extra}
}}"#,
        out.display()
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn gen_writes_observations_and_spec() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_str().unwrap();
    let o = cpfas(&["gen", "two_circles", "--seed", "1", "--root", root]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let dir = tmp.path().join("data/two_circles");
    assert!(dir.join("observations.csv").is_file());
    assert!(dir.join("spec.json").is_file());
}

#[test]
fn gen_rejects_unknown_experiment() {
    let tmp = tempfile::tempdir().unwrap();
    let o = cpfas(&["gen", "lorenz", "--seed", "1", "--root", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn full_run_writes_every_stage_and_versions_count_up() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = write_config(tmp.path(), "c.json", &out, "");
    for _ in 0..2 {
        let o = cpfas(&["run", cfg.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    for stage in ["generate", "smooth", "train", "sample", "eval"] {
        for v in ["v001", "v002"] {
            assert!(out.join(stage).join(v).join("stage.json").is_file(), "{stage}/{v}");
        }
    }
    assert!(out.join("train/v001/model.json").is_file());
    assert!(out.join("sample/v001/samples.csv").is_file());
    assert!(out.join("manifests/run_002.json").is_file());
    assert!(out.join("manifest.json").is_file());
}

#[test]
fn generate_only_run_succeeds() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = write_config(tmp.path(), "c.json", &out, r#", "stages": ["generate"]"#);
    let o = cpfas(&["run", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(out.join("generate/v001/observations.csv").is_file());
    assert!(!out.join("smooth").exists());
}

#[test]
fn sample_without_checkpoint_is_invalid() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = write_config(tmp.path(), "c.json", &out, r#", "stages": ["sample"]"#);
    let o = cpfas(&["run", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train"), "{}", stderr(&o));
}

#[test]
fn bad_config_reports_its_line() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = write_config(tmp.path(), "c.json", &out, r#", "smoother_typo": 1"#);
    let o = cpfas(&["run", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr(&o);
    assert!(msg.contains("c.json:9: smoother_typo: unknown field"), "{msg}");

    let cfg = write_config(tmp.path(), "d.json", &out, r#", "stages": ["smooth", "generate"]"#);
    assert_eq!(cpfas(&["run", cfg.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn missing_config_file_is_invalid() {
    assert_eq!(cpfas(&["run", "/nonexistent/cfg.json"]).status.code(), Some(2));
}

#[test]
fn eval_subcommand_adds_a_version_and_rejects_missing_targets() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = write_config(tmp.path(), "c.json", &out, r#", "stages": ["generate", "smooth"]"#);
    assert_eq!(cpfas(&["run", cfg.to_str().unwrap()]).status.code(), Some(0));
    let run = out.to_str().unwrap();

    let o = cpfas(&["eval", run, "--against", "observations"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("mse_observations"));
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("eval/v001/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics[0]["source"], "smoother");

    // the double well has no terminal marginal
    let o = cpfas(&["eval", run, "--against", "terminal"]);
    assert_eq!(o.status.code(), Some(2));

    let o = cpfas(&["eval", tmp.path().join("nothing").to_str().unwrap(), "--against", "observations"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(cpfas(&["eval", "x"]).status.code(), Some(2));
    assert_eq!(cpfas(&["frobnicate"]).status.code(), Some(2));
}
