use std::fs;
use std::path::Path;
use std::process::Command;

use nearfield::harness::{read_results, RESULTS_HEADER};

fn nearfield() -> Command {
    Command::new(env!("CARGO_BIN_EXE_nearfield"))
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, body).unwrap();
    path
}

const SMALL: &str = r#"
preset = "los_thz"
sweep = "snr_db"
values = [10, 30]
trials = 3
seed = 11
methods = ["cpd", "somp", "crb"]
n_antennas = 32
n_rf = 8
n_subcarriers = 16
n_users = 3
n_angle = 64
n_range = 8
"#;

#[test]
fn run_writes_results_timings_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("out");
    let status = nearfield()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let text = fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(text.lines().next(), Some(RESULTS_HEADER));
    let rows = read_results(&out.join("results.csv")).unwrap();
    assert_eq!(rows.len(), 2 * 3 * 3);
    assert!(rows.iter().all(|r| !r.failed));
    assert!(out.join("timings.csv").exists());

    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(
        summary.lines().filter(|l| !l.starts_with('#')).count(),
        1 + 2 * 3
    );

    let again = tmp.path().join("summary2.csv");
    let status = nearfield()
        .args(["summarize", "--in"])
        .arg(out.join("results.csv"))
        .arg("--out")
        .arg(&again)
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(
        fs::read(&again).unwrap(),
        fs::read(out.join("summary.csv")).unwrap()
    );
}

#[test]
fn same_seed_gives_identical_results() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let mut bytes = Vec::new();
    for (i, threads) in ["1", "3"].iter().enumerate() {
        let out = tmp.path().join(format!("out{i}"));
        let status = nearfield()
            .args(["run", "--threads", threads, "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success());
        bytes.push(fs::read(out.join("results.csv")).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let run = |seed: &str, name: &str| {
        let out = tmp.path().join(name);
        let status = nearfield()
            .args(["run", "--seed", seed, "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success());
        read_results(&out.join("results.csv")).unwrap()
    };
    let a = run("11", "a");
    let b = run("12", "b");
    assert!(a.iter().all(|r| r.seed != 0));
    assert_ne!(
        a.iter().map(|r| r.seed).collect::<Vec<_>>(),
        b.iter().map(|r| r.seed).collect::<Vec<_>>()
    );
}

#[test]
fn noiseless_cpd_trial_on_los_preset() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        r#"
preset = "los_thz"
sweep = "snr_db"
values = [inf]
trials = 1
seed = 3
methods = ["cpd"]
"#,
    );
    let out = tmp.path().join("out");
    let status = nearfield()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let rows = read_results(&out.join("results.csv")).unwrap();
    assert_eq!(rows.len(), 1);
    assert!(!rows[0].failed, "{}", rows[0].error);
    assert!(rows[0].nmse < 1e-6, "nmse {}", rows[0].nmse);
}

#[test]
fn config_errors_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = [
        SMALL.replace("trials = 3", "trials = 0"),
        SMALL.replace("values = [10, 30]", "values = []"),
        format!("{SMALL}\nunknown_key = 1\n"),
        SMALL.replace("\"somp\"", "\"sigw\""),
    ];
    for body in bad {
        let cfg = write_config(tmp.path(), &body);
        let out = nearfield()
            .args(["run", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(tmp.path().join("never"))
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(2), "{body}");
        assert!(!out.stderr.is_empty());
    }
    let missing = nearfield()
        .args(["run", "--config"])
        .arg(tmp.path().join("absent.toml"))
        .output()
        .unwrap();
    assert_ne!(missing.status.code(), Some(0));
}

#[test]
fn summarize_rejects_missing_input() {
    let tmp = tempfile::tempdir().unwrap();
    let out = nearfield()
        .args(["summarize", "--in"])
        .arg(tmp.path().join("nope.csv"))
        .arg("--out")
        .arg(tmp.path().join("s.csv"))
        .output()
        .unwrap();
    assert!(!out.status.success());
}
