mod common;

use std::path::Path;
use std::process::{Command, Output};

fn fedsim(args: &[&str], data_dir: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fedsim"));
    cmd.args(args).env_remove("FEDSIM_DATA_DIR");
    if let Some(d) = data_dir {
        cmd.env("FEDSIM_DATA_DIR", d);
    }
    cmd.output().unwrap()
}

fn recipe(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("recipes").join(format!("{name}.toml")).display().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn version_prints_package_version() {
    let o = fedsim(&["version"], None);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), format!("fedsim {}", env!("CARGO_PKG_VERSION")));
}

#[test]
fn validate_accepts_every_bundled_recipe() {
    for name in ["fig2", "fig3", "fig4", "fig5", "fig6"] {
        let o = fedsim(&["validate", &recipe(name)], None);
        assert_eq!(o.status.code(), Some(0), "{name}: {}", stderr(&o));
    }
}

#[test]
fn validate_reports_field_paths() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "rounds = 0\n[attack]\nn_malicious = 99\n").unwrap();
    let o = fedsim(&["validate", path.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("`rounds`") && err.contains("`attack.n_malicious`"), "{err}");
}

#[test]
fn missing_dataset_is_a_config_error_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    std::fs::write(&path, common::small_config("m", &dir.path().join("nowhere"), "")).unwrap();
    let out = dir.path().join("out");
    let o = fedsim(&["run", path.to_str().unwrap(), "--out", out.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("data.train_images"), "{}", stderr(&o));
}

#[test]
fn unknown_figure_is_rejected() {
    let o = fedsim(&["figure", "fig9"], None);
    assert_eq!(o.status.code(), Some(2), "clap usage errors exit with 2");
}

#[test]
fn run_writes_outputs_deterministically() {
    let data = common::synthetic_dir();
    let work = tempfile::tempdir().unwrap();
    let cfg = work.path().join("two.toml");
    let extra = "\n[[arms]]\nlabel = \"plain\"\n\n[[arms]]\nlabel = \"noisy\"\nprivacy = { kind = \"gaussian\", std = 0.01 }\n";
    std::fs::write(&cfg, common::small_config("two", data.path(), extra)).unwrap();

    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = work.path().join(run);
        let o = fedsim(&["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()], None);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        outputs.push(out);
    }
    for file in ["two.csv", "two.svg", "two.resolved.toml", "two.summary.csv", "two-plain.csv", "two-noisy.csv"] {
        let a = std::fs::read(outputs[0].join(file)).unwrap();
        let b = std::fs::read(outputs[1].join(file)).unwrap();
        assert!(a == b, "{file} differs between runs");
    }
    let csv = std::fs::read_to_string(outputs[0].join("two-plain.csv")).unwrap();
    assert!(csv.starts_with("repeat,round,accuracy,loss,delay_s,abandoned,accepted,weights\n"));
    assert_eq!(csv.lines().count(), 1 + 2 * 4);

    // the snapshot reproduces the run
    let snap = outputs[0].join("two.resolved.toml");
    let out = work.path().join("c");
    let o = fedsim(&["run", snap.to_str().unwrap(), "--out", out.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(std::fs::read(out.join("two.csv")).unwrap(), std::fs::read(outputs[0].join("two.csv")).unwrap());
}

#[test]
fn unreached_stop_target_exits_3() {
    let data = common::synthetic_dir();
    let work = tempfile::tempdir().unwrap();
    let cfg = work.path().join("s.toml");
    let text = common::small_config("s", data.path(), "").replace("rounds = 4", "rounds = 1\nstop_accuracy = 1.0");
    std::fs::write(&cfg, text).unwrap();
    let o = fedsim(&["run", cfg.to_str().unwrap(), "--out", work.path().join("o").to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn data_dir_override_applies() {
    let data = common::synthetic_dir();
    let work = tempfile::tempdir().unwrap();
    let cfg = work.path().join("e.toml");
    let text = common::small_config("e", Path::new("/definitely/missing"), "").replace("rounds = 4", "rounds = 1");
    std::fs::write(&cfg, text).unwrap();
    let o = fedsim(&["run", cfg.to_str().unwrap(), "--out", work.path().join("o").to_str().unwrap()], Some(data.path()));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn figure_print_emits_a_parseable_snapshot() {
    let o = fedsim(&["figure", "fig5", "--scale", "paper", "--print"], None);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    let exp = fedsim::harness::config::Experiment::parse(&text).unwrap();
    assert_eq!(exp.base.rounds, 300);
    assert_eq!(exp.arms.len(), 2);
}
