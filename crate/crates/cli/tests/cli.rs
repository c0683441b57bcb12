use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn kubolab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kubolab"))
        .args(args)
        .env_remove("KUBOLAB_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &str = r#"{
  "lattice": { "d": 1, "L": 24, "boundary": "dirichlet" },
  "disorder": { "density": { "kind": "uniform", "W": 2.0 }, "lambda": 1.0, "master_seed": 11 },
  "fermi": { "mu": 0.1, "T": 0.0 },
  "realizations": 4
}"#;

fn small_config(dir: &Path) -> String {
    let p = dir.join("c.json");
    fs::write(&p, SMALL).unwrap();
    path(&p).to_string()
}

#[test]
fn free_oracle_prints_the_zero_energy_row() {
    let o = kubolab(&["free-oracle", "--d", "1", "--L", "8"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let row = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|x| x.parse::<f64>().unwrap()).collect::<Vec<_>>())
        .find(|r| r[0] == 0.0)
        .expect("row at energy 0");
    assert!((row[1] - std::f64::consts::PI).abs() < 1e-12);
}

#[test]
fn help_and_version_exit_zero() {
    assert!(kubolab(&["--help"]).status.success());
    assert!(kubolab(&["--version"]).status.success());
}

#[test]
fn unknown_flag_exits_one() {
    let o = kubolab(&["sigma", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn schema_violation_reports_the_field_path() {
    let o = kubolab(&["sigma", "--json", "--set", "lattice.L=abc"]);
    assert_eq!(o.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["kind"], "config");
    assert_eq!(err["path"], "lattice.L");
}

#[test]
fn malformed_config_file_exits_one_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    fs::write(&p, SMALL.replace("\"T\": 0.0", "\"T\": -1.0")).unwrap();
    let o = kubolab(&["sigma", "--json", "--config", path(&p)]);
    assert_eq!(o.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["path"], "fermi");
}

#[test]
fn set_override_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let a = kubolab(&["sigma", "--config", &cfg]);
    let b = kubolab(&["sigma", "--config", &cfg, "--set", "fermi.T=0.2"]);
    assert!(a.status.success() && b.status.success());
    assert_ne!(stdout(&a), stdout(&b));
    let c = kubolab(&["sigma", "--config", &cfg, "--set", "fermi.T=0.0"]);
    assert_eq!(stdout(&a), stdout(&c));
}

#[test]
fn seed_flag_replaces_the_master_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let a = kubolab(&["sigma", "--config", &cfg, "--seed", "11"]);
    let b = kubolab(&["sigma", "--config", &cfg]);
    let c = kubolab(&["sigma", "--config", &cfg, "--seed", "12"]);
    assert_eq!(stdout(&a), stdout(&b));
    assert_ne!(stdout(&a), stdout(&c));
}

#[test]
fn empty_override_set_matches_plain_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(kubolab(&["sigma", "--config", &cfg, "--out", path(&a)]).status.success());
    assert!(kubolab(&["sigma", "--config", &cfg, "--out", path(&b)]).status.success());
    assert_eq!(
        fs::read(a.join("result.json")).unwrap(),
        fs::read(b.join("result.json")).unwrap()
    );
}

#[test]
fn check_identities_passes() {
    let o = kubolab(&["check", "--suite", "identities"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("0 failed"));
}

#[test]
fn sweep_without_grid_exits_one() {
    let o = kubolab(&["sweep"]);
    assert_eq!(o.status.code(), Some(1));
    let o = kubolab(&["sweep", "--set", r#"sweep={"mu_grid":[],"T_grid":[]}"#]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn sweep_prints_one_block_per_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = kubolab(&["sweep", "--config", &cfg, "--set", r#"sweep.T_grid=[0.5,0.1,0.0]"#]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.starts_with("mu,T,quantity,mean,stderr\n"));
    let temps: std::collections::BTreeSet<&str> =
        text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(temps.len(), 3);
}

#[test]
fn worker_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let one = dir.path().join("one");
    let two = dir.path().join("two");
    assert!(kubolab(&["phi", "--config", &cfg, "--threads", "1", "--out", path(&one)]).status.success());
    assert!(kubolab(&["phi", "--config", &cfg, "--threads", "2", "--out", path(&two)]).status.success());
    assert_eq!(
        fs::read(one.join("result.json")).unwrap(),
        fs::read(two.join("result.json")).unwrap()
    );
}

#[test]
fn resume_keeps_finished_units_and_the_result() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let run = dir.path().join("run");
    assert!(kubolab(&["sigma", "--config", &cfg, "--out", path(&run)]).status.success());
    let before = fs::read(run.join("result.json")).unwrap();
    let unit = fs::read(run.join("units/0001.json")).unwrap();

    let again = kubolab(&["sigma", "--config", &cfg, "--out", path(&run)]);
    assert_eq!(again.status.code(), Some(1), "non-empty run directory needs --resume");

    fs::remove_file(run.join("units/0002.json")).unwrap();
    fs::remove_file(run.join("result.json")).unwrap();
    let resumed = kubolab(&["sigma", "--config", &cfg, "--out", path(&run), "--resume"]);
    assert!(resumed.status.success());
    assert_eq!(fs::read(run.join("units/0001.json")).unwrap(), unit);
    assert_eq!(fs::read(run.join("result.json")).unwrap(), before);

    let other = kubolab(&["sigma", "--config", &cfg, "--out", path(&run), "--resume", "--seed", "5"]);
    assert_eq!(other.status.code(), Some(1), "resume refuses a different config");
}

#[test]
fn svg_is_written_into_the_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let run = dir.path().join("run");
    let o = kubolab(&["current", "--config", &cfg, "--out", path(&run), "--svg"]);
    assert!(o.status.success());
    let svg = fs::read_to_string(run.join("plot.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("<path"));
    assert_eq!(kubolab(&["current", "--svg"]).status.code(), Some(1));
}

#[test]
fn diag_subcommands_emit_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let mott = kubolab(&["diag", "--kind", "mott", "--config", &cfg]);
    assert!(stdout(&mott).starts_with("nu,mass,ratio\n"));
    let trace = kubolab(&["diag", "--kind", "trace", "--config", &cfg, "--set", "diag.L_list=[8,16]"]);
    let text = stdout(&trace);
    assert!(text.starts_with("L,volume_trace,site_average,gap,center_value,fourier_value\n"));
    assert_eq!(text.lines().count(), 3);
    let decay = kubolab(&["diag", "--kind", "decay", "--config", &cfg]);
    assert!(decay.status.success());
    assert!(String::from_utf8_lossy(&decay.stderr).contains("decay fit"));
}
