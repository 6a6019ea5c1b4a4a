use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[experiment]
kind = "strategies"
n_seeds = 2
variants = ["baseline", "upsilon"]

[benchmark]
k_id = 3
k_ood = 2
d = 6
latent_dim = 3
n_labeled_per_class = 3
m_unlabeled = 60
n_test_per_class = 10
mismatch_ratio = 0.5

[train]
epochs = 6
pretrain_epochs = 2
batch_size = 16
hidden = 4
ema_decay = 0.5
tau = 0.6
gamma = 0.5
k_extra = 2
"#;

fn upsilon(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_upsilon"));
    cmd.args(args).env_remove("UPSILON_MAX_THREADS");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn manifest(out: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn invalid_config_exits_1_and_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", &TINY.replace("tau = 0.6", "tau = 1.5"));
    let out = dir.path().join("out");
    let o = upsilon(&["run", "--config", &cfg, "--out", out.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("tau"), "{}", stderr(&o));
    assert!(!out.join("results.csv").exists());
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", &TINY.replace("k_extra = 2", "k_extra = 2\nwidth = 3"));
    let o = upsilon(&["run", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("width"), "{}", stderr(&o));
}

#[test]
fn runtime_failure_exits_2_and_names_the_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "diverge.toml", &TINY.replace("k_extra = 2", "k_extra = 2\nlearning_rate = 1e308"));
    let o = upsilon(&["run", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap(), "--workers", "1"], &[]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let err = stderr(&o);
    assert!(err.contains("baseline") || err.contains("upsilon"), "{err}");
    assert!(err.contains("diverged"), "{err}");
}

#[test]
fn run_writes_artifacts_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", TINY);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for (out, workers) in [(&a, "1"), (&b, "3")] {
        let o = upsilon(&["run", "--config", &cfg, "--out", out.to_str().unwrap(), "--workers", workers], &[]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(out.join("results.csv").is_file());
        assert!(out.join("plots").read_dir().unwrap().next().is_some());
    }
    assert_eq!(fs::read(a.join("results.csv")).unwrap(), fs::read(b.join("results.csv")).unwrap());
    let (ma, mb) = (manifest(&a), manifest(&b));
    assert_eq!(ma["results_hash"], mb["results_hash"]);
    assert_eq!(ma["config_hash"], mb["config_hash"]);
    assert!(ma["config_hash"].is_string());
}

#[test]
fn thread_cap_env_var_limits_workers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", TINY);
    let out = dir.path().join("o");
    let o = upsilon(
        &["run", "--config", &cfg, "--out", out.to_str().unwrap(), "--workers", "8"],
        &[("UPSILON_MAX_THREADS", "2")],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(manifest(&out)["workers"], 2);

    let o = upsilon(&["run", "--config", &cfg, "--out", out.to_str().unwrap()], &[("UPSILON_MAX_THREADS", "none")]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("UPSILON_MAX_THREADS"));
}

#[test]
fn plot_renders_results_and_rejects_empty_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", TINY);
    let out = dir.path().join("o");
    assert!(upsilon(&["run", "--config", &cfg, "--out", out.to_str().unwrap()], &[]).status.success());
    let spec = write_config(dir.path(), "plot.toml", "x = \"x\"\ny = \"accuracy\"\nseries = \"setting\"\n");
    let svg = dir.path().join("acc.svg");
    let csv = out.join("results.csv");
    let o = upsilon(&["plot", "--csv", csv.to_str().unwrap(), "--spec", &spec, "--out", svg.to_str().unwrap()], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(fs::read_to_string(&svg).unwrap().starts_with("<svg"));

    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "").unwrap();
    let missing = dir.path().join("none.svg");
    let o = upsilon(&["plot", "--csv", empty.to_str().unwrap(), "--spec", &spec, "--out", missing.to_str().unwrap()], &[]);
    assert_ne!(o.status.code(), Some(0));
    assert!(!missing.exists());

    let bad_spec = write_config(dir.path(), "bad.toml", "x = \"x\"\ny = \"no_such_metric\"\n");
    let o = upsilon(&["plot", "--csv", csv.to_str().unwrap(), "--spec", &bad_spec, "--out", missing.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no_such_metric"), "{}", stderr(&o));
    assert!(!missing.exists());
}
