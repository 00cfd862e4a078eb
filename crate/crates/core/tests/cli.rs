//! End-to-end checks of the `lpf` binary on a tiny configuration.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[model]
d = 16
noise_modes = 5

[filter]
particles = 4

[observations]
d_obs = 4

[run]
assimilations = 3
burn_in_deterministic = 20
burn_in_stochastic = 5
sample_every = 5
snapshot_every = 1
"#;

fn lpf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lpf")).args(args).output().expect("binary runs")
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_owned()
}

fn run_into(cfg: &str, out: &Path, seed: &str) -> Output {
    lpf(&["run", "--config", cfg, "--seed", seed, "--out", out.to_str().unwrap()])
}

#[test]
fn seeded_runs_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    for (dir, seed) in [(&a, "7"), (&b, "7"), (&c, "8")] {
        let o = run_into(&cfg, dir, seed);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let read = |d: &Path| fs::read_to_string(d.join("metrics.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
    assert_eq!(read(&a).lines().count(), 4);
    for f in ["diagnostics.csv", "samples.csv", "observations.csv", "manifest.txt"] {
        assert!(a.join(f).exists(), "{f} missing");
    }
}

#[test]
fn metrics_subcommand_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let run = tmp.path().join("run");
    assert!(run_into(&cfg, &run, "3").status.success());
    let out = tmp.path().join("again.csv");
    let o = lpf(&["metrics", "--run", run.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(out).unwrap(), fs::read_to_string(run.join("metrics.csv")).unwrap());
}

#[test]
fn simulate_writes_a_signal_trace() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("sim");
    let o = lpf(&["simulate", "--config", &cfg, "--seed", "1", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("signal.csv")).unwrap();
    assert!(text.starts_with("k,mass,eta_min,eta_max,mean_speed"));
    assert_eq!(text.lines().count(), 5);
}

#[test]
fn usage_and_config_errors_exit_nonzero() {
    let o = lpf(&["run", "--no-such-flag"]);
    assert!(!o.status.success());

    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let o = lpf(&["run", "--config", &cfg, "--set", "filter.bogus=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error[config]"));
}
