use kubolab::ensemble::Task;
use kubolab_wasm::{default_config, run_task};
use serde_json::Value;

fn small() -> String {
    let mut cfg: Value = serde_json::from_str(&default_config()).unwrap();
    cfg["lattice"]["L"] = 32.into();
    cfg["realizations"] = 2.into();
    cfg.to_string()
}

#[test]
fn each_task_returns_its_series() {
    for (task, series) in [(Task::Sigma, "sigma"), (Task::Dos, "dos_density"), (Task::Current, "current")] {
        let out: Value = serde_json::from_str(&run_task(&small(), task).unwrap()).unwrap();
        assert_eq!(out["task"], task.name());
        let s = &out["series"][series];
        assert_eq!(s["mean"].as_array().unwrap().len(), s["x_lo"].as_array().unwrap().len());
    }
}

#[test]
fn dos_integrates_to_one() {
    let out: Value = serde_json::from_str(&run_task(&small(), Task::Dos).unwrap()).unwrap();
    let mass = out["scalars"]["dos_total_mass"]["mean"].as_f64().unwrap();
    assert!((mass - 1.0).abs() < 1e-12);
}

#[test]
fn config_errors_carry_the_field_path() {
    let err = run_task(r#"{"lattice": {"d": 1, "L": 0, "boundary": "dirichlet"}, "disorder": {"density": {"kind": "uniform", "W": 2.0}, "lambda": 1.0, "master_seed": 0}}"#, Task::Sigma)
        .unwrap_err();
    let v: Value = serde_json::from_str(&err).unwrap();
    assert_eq!(v["kind"], "config");
    assert!(v["path"].as_str().unwrap().starts_with("lattice"));
}
