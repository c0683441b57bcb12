//! wasm-bindgen entry points for the browser demo.
//!
//! Every function takes a run configuration as JSON (the CLI schema) and
//! returns the estimates as JSON. Runs are sequential: the core crate is
//! built without its thread pool.

use kubolab::ensemble::{run, RunConfig, RunOptions, Task};
use serde_json::json;
use wasm_bindgen::prelude::*;

fn error_json(e: &kubolab::Error) -> String {
    let path = match e {
        kubolab::Error::Config { path, .. } => Some(path.clone()),
        _ => None,
    };
    json!({ "kind": e.kind(), "message": e.to_string(), "path": path }).to_string()
}

/// Runs `task` on the configuration and serializes the estimates.
pub fn run_task(config: &str, task: Task) -> Result<String, String> {
    let mut cfg = RunConfig::from_json_str(config).map_err(|e| error_json(&e))?;
    cfg.task = task;
    cfg.sweep = None;
    cfg.out = None;
    let est = run(&cfg, &RunOptions::default()).map_err(|e| error_json(&e))?;
    let body = json!({
        "task": task.name(),
        "config_hash": est.meta.config_hash,
        "scalars": est.estimates.scalars,
        "series": est.estimates.series,
    });
    Ok(body.to_string())
}

fn bind(config: &str, task: Task) -> Result<String, JsValue> {
    run_task(config, task).map_err(|e| JsValue::from_str(&e))
}

/// `Σ_μ^T`: atom, total mass and the binned `Γ`.
#[wasm_bindgen]
pub fn conductivity(config: &str) -> Result<String, JsValue> {
    bind(config, Task::Sigma)
}

#[wasm_bindgen]
pub fn density_of_states(config: &str) -> Result<String, JsValue> {
    bind(config, Task::Dos)
}

/// In-phase current for the configured field on the configured time grid.
#[wasm_bindgen]
pub fn current(config: &str) -> Result<String, JsValue> {
    bind(config, Task::Current)
}

/// The built-in default configuration, as a starting point for the page.
#[wasm_bindgen]
pub fn default_config() -> String {
    RunConfig::default().canonical_json().unwrap_or_default()
}
