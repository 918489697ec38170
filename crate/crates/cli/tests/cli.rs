use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_e3dapp"));
    c.env_remove("E3_ENDPOINT");
    c
}

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn validate_accepts_shipped_scenarios() {
    let o = bin().arg("list").arg(scenarios()).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let listing = stdout(&o);
    assert!(listing.contains("incumbent-with-dapp"));
    assert!(!listing.contains("INVALID"));

    let o = bin()
        .arg("validate")
        .arg(scenarios().join("ranging.toml"))
        .output()
        .unwrap();
    assert!(o.status.success());
}

#[test]
fn config_errors_exit_with_two_and_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(
        &bad,
        "duration_slots = 10\n[radio]\n[dapp]\nkind = \"radar\"\n",
    )
    .unwrap();
    let o = bin().arg("validate").arg(&bad).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("bad.toml:4"), "{err}");

    let o = bin()
        .arg("validate")
        .arg(dir.path().join("missing.toml"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));

    let o = bin()
        .args(["run", bad.to_str().unwrap(), "--out"])
        .arg(dir.path().join("o"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn override_that_breaks_the_scenario_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .arg("run")
        .arg(scenarios().join("ranging.toml"))
        .args(["--model-order", "0", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(
        o.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn repeated_runs_write_identical_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = scenarios().join("incumbent_burst.toml");
    for out in ["a", "b"] {
        let o = bin()
            .arg("run")
            .arg(&scenario)
            .arg("--out")
            .arg(dir.path().join(out))
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["timeline.csv", "summary.txt"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b, "{f} differs");
    }
}

#[test]
fn seed_override_changes_ranging_output() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = scenarios().join("ranging_low_snr.toml");
    for (out, seed) in [("a", "1"), ("b", "2")] {
        let o = bin()
            .arg("run")
            .arg(&scenario)
            .args(["--M", "20", "--seed", seed, "--out"])
            .arg(dir.path().join(out))
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = std::fs::read_to_string(dir.path().join("a/ranging.csv")).unwrap();
    let b = std::fs::read_to_string(dir.path().join("b/ranging.csv")).unwrap();
    assert!(a.lines().nth(1).unwrap().ends_with(",20"));
    assert_ne!(a, b);
}

#[test]
fn bench_single_config_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .args(["bench", "--config", "16", "--loops", "300", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 5);
    assert!(summary.contains("16,8192,424,cumulative"));
    let records = std::fs::read_to_string(dir.path().join("records_16.csv")).unwrap();
    assert_eq!(records.lines().count(), 1 + 300);
    let overhead = std::fs::read_to_string(dir.path().join("overhead.csv")).unwrap();
    assert!(overhead.contains("tcp,20.000"));

    let o = bin()
        .args(["bench", "--config", "17", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn agent_and_dapp_pair_across_processes() {
    let dir = tempfile::tempdir().unwrap();
    let ep = dir.path().join("e3.setup");
    // the environment variable wins over the flag
    let agent = bin()
        .env("E3_ENDPOINT", &ep)
        .args([
            "agent",
            "--endpoint",
            "/nonexistent/ignored.setup",
            "--slots",
            "300",
            "--incumbent-from",
            "50",
            "--wait-s",
            "10",
        ])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let dapp = bin()
        .args(["dapp", "--dapp", "spectrum", "--endpoint"])
        .arg(&ep)
        .output()
        .unwrap();
    let agent_out = agent.wait_with_output().unwrap();
    assert!(
        dapp.status.success(),
        "{}",
        String::from_utf8_lossy(&dapp.stderr)
    );
    assert!(agent_out.status.success());
    let log = stdout(&agent_out);
    assert!(log.contains("paired with dApp 1"), "{log}");
    assert!(log.contains("final mask [80,81,82]"), "{log}");
    assert!(stdout(&dapp).contains("RAN disconnected after"));
}

#[test]
fn dapp_without_agent_times_out() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .args(["dapp", "--endpoint"])
        .arg(dir.path().join("nobody.setup"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}
