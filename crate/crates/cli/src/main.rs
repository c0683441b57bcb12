//! `kubolab`: runs the conductivity pipelines from a JSON config.

mod svg;

use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use kubolab::checks::{run_suite, Suite};
use kubolab::diagnostics::{free_oracle, mott_ratio};
use kubolab::ensemble::{
    run, trace_per_unit_volume_convergence, write_estimate_csv, write_sweep_csv, EnsembleEstimate,
    RunConfig, RunOptions, Task,
};
use kubolab::Error;

#[derive(Parser, Debug)]
#[command(name = "kubolab", version, about = "Finite-volume Kubo conductivity for the Anderson model")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration; built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. `fermi.T=0.2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Run directory for checkpoints and results.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed; replaces `disorder.master_seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker cap.
    #[arg(long, env = "KUBOLAB_THREADS", global = true)]
    threads: Option<usize>,
    /// Continue a run directory, reusing finished units.
    #[arg(long, global = true)]
    resume: bool,
    /// Report errors as JSON on stderr.
    #[arg(long, global = true)]
    json: bool,
    /// Also write plot.svg into the run directory.
    #[arg(long, global = true)]
    svg: bool,
    #[arg(long, short, global = true)]
    verbose: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Density of states.
    Dos,
    /// Φ marginals, Ψ and the DOS.
    Phi,
    /// Σ_μ^T: atom at zero and binned Γ.
    Sigma,
    /// In-phase adiabatic current for the configured field.
    Current,
    /// Σ summaries over the configured μ and T grids.
    Sweep,
    /// Localization diagnostics.
    Diag {
        #[arg(long, value_enum)]
        kind: DiagKind,
    },
    /// Exact Ψ of the periodic free Laplacian.
    FreeOracle {
        #[arg(long, default_value_t = 1)]
        d: usize,
        #[arg(long = "L", default_value_t = 8)]
        side: usize,
    },
    /// Identity and free-case check suites.
    Check {
        #[arg(long, value_enum, default_value_t = SuiteArg::Identities)]
        suite: SuiteArg,
        /// Realizations visited by the identity suite.
        #[arg(long, default_value_t = 2)]
        max_realizations: u64,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DiagKind {
    Decay,
    Ynorm,
    Mott,
    Trace,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SuiteArg {
    Identities,
    Free,
    All,
}

impl From<SuiteArg> for Suite {
    fn from(s: SuiteArg) -> Self {
        match s {
            SuiteArg::Identities => Suite::Identities,
            SuiteArg::Free => Suite::Free,
            SuiteArg::All => Suite::All,
        }
    }
}

enum Outcome {
    Ok,
    ChecksFailed,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numerical { .. } | Error::Partial { .. } => 2,
        _ => 1,
    }
}

fn report(e: &Error, as_json: bool) {
    if as_json {
        let path = match e {
            Error::Config { path, .. } => Some(path.as_str()),
            _ => None,
        };
        let message = match e {
            Error::Config { message, .. } => message.clone(),
            other => other.to_string(),
        };
        eprintln!("{}", json!({ "kind": e.kind(), "message": message, "path": path }));
    } else {
        eprintln!("error: {e}");
    }
}

fn main() -> ExitCode {
    let wants_json = std::env::args().any(|a| a == "--json");
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            if wants_json {
                let message = e.to_string();
                let first = message.lines().next().unwrap_or_default().trim_start_matches("error: ");
                eprintln!("{}", json!({ "kind": "usage", "message": first, "path": null }));
            } else {
                let _ = e.print();
            }
            return ExitCode::from(1);
        }
    };
    match dispatch(&cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::ChecksFailed) => ExitCode::from(3),
        // a closed stdout (e.g. piping into `head`) is not a failure
        Err(Error::Io(e)) if e.kind() == io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
        Err(e) => {
            report(&e, cli.common.json);
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(c: &Common) -> kubolab::Result<RunConfig> {
    let base = match &c.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
            RunConfig::from_json_str(&text)?
        }
        None => RunConfig::default(),
    };
    let mut overrides = c.overrides.clone();
    if let Some(seed) = c.seed {
        overrides.push(format!("disorder.master_seed={seed}"));
    }
    base.with_overrides(&overrides)
}

fn dispatch(cli: &Cli) -> kubolab::Result<Outcome> {
    let c = &cli.common;
    match &cli.command {
        Command::FreeOracle { d, side } => {
            let o = free_oracle(*d, *side)?;
            let mut out = io::stdout().lock();
            writeln!(out, "energy,psi")?;
            for r in &o.psi {
                writeln!(out, "{:?},{:?}", r.energy, r.weight)?;
            }
            if let Some(dir) = &c.out {
                fs::create_dir_all(dir)?;
                fs::write(dir.join("oracle.json"), serde_json::to_string_pretty(&o)? + "\n")?;
                if c.svg {
                    let x: Vec<f64> = o.smoothed.iter().map(|r| r.energy).collect();
                    let y: Vec<f64> = o.smoothed.iter().map(|r| r.weight).collect();
                    let s = svg::Series { x_lo: &x, x_hi: &x, y: &y };
                    fs::write(dir.join("plot.svg"), svg::chart("smoothed ψ", "energy", &s))?;
                }
            }
            Ok(Outcome::Ok)
        }
        Command::Check { suite, max_realizations } => {
            let cfg = load_config(c)?;
            let results = run_suite((*suite).into(), &cfg, *max_realizations)?;
            let mut out = io::stdout().lock();
            for r in &results {
                writeln!(
                    out,
                    "{} {}: {:e} (tol {:e}) {}",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.value,
                    r.tolerance,
                    r.detail
                )?;
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            writeln!(out, "{} checks, {failed} failed", results.len())?;
            if let Some(dir) = &c.out {
                fs::create_dir_all(dir)?;
                fs::write(dir.join("checks.json"), serde_json::to_string_pretty(&results)? + "\n")?;
            }
            Ok(if failed == 0 { Outcome::Ok } else { Outcome::ChecksFailed })
        }
        Command::Diag { kind: DiagKind::Trace } => {
            let cfg = load_config(c)?;
            let rows = trace_per_unit_volume_convergence(&cfg, &cfg.diag.l_list)?;
            let mut w = csv::Writer::from_writer(io::stdout().lock());
            for r in &rows {
                w.serialize(r)?;
            }
            w.flush()?;
            Ok(Outcome::Ok)
        }
        command => {
            let mut cfg = load_config(c)?;
            match command {
                Command::Dos => cfg.task = Task::Dos,
                Command::Phi => cfg.task = Task::Phi,
                Command::Sigma => cfg.task = Task::Sigma,
                Command::Current => cfg.task = Task::Current,
                Command::Diag { kind: DiagKind::Decay } => cfg.task = Task::DiagDecay,
                Command::Diag { kind: DiagKind::Ynorm } => cfg.task = Task::DiagYnorm,
                Command::Diag { kind: DiagKind::Mott } => cfg.task = Task::DiagMott,
                Command::Sweep => {
                    if cfg.sweep.is_none() {
                        return Err(Error::Config {
                            path: "sweep".into(),
                            message: "sweep needs a non-empty mu_grid or T_grid".into(),
                        });
                    }
                }
                _ => unreachable!(),
            }
            if !matches!(command, Command::Sweep) {
                cfg.sweep = None;
            }
            ensemble_command(c, &cfg, matches!(command, Command::Sweep))
        }
    }
}

fn ensemble_command(c: &Common, cfg: &RunConfig, sweep: bool) -> kubolab::Result<Outcome> {
    if c.svg && c.out.is_none() && cfg.out.is_none() {
        return Err(Error::Config {
            path: "out".into(),
            message: "--svg needs a run directory (--out)".into(),
        });
    }
    if c.verbose {
        eprintln!(
            "task {} on {} sites, {} realization(s), config {}",
            cfg.task.name(),
            cfg.lattice.sites(),
            cfg.realizations,
            cfg.hash()?
        );
    }
    let started = Instant::now();
    let opts = RunOptions {
        threads: c.threads,
        out_dir: c.out.clone(),
        resume: c.resume,
    };
    let est = run(cfg, &opts)?;
    if c.verbose {
        eprintln!("finished in {:.2} s", started.elapsed().as_secs_f64());
    }
    let stdout = io::stdout().lock();
    if sweep {
        write_sweep_csv(stdout, &est.sweep)?;
    } else if cfg.task == Task::DiagMott {
        let mut out = stdout;
        writeln!(out, "nu,mass,ratio")?;
        if let Some(s) = est.series("mott_mass") {
            for (nu, mass) in s.x_lo.iter().zip(&s.mean) {
                writeln!(out, "{nu:?},{mass:?},{:?}", mott_ratio(*mass, *nu, cfg.lattice.d))?;
            }
        }
    } else {
        write_estimate_csv(stdout, &est.estimates)?;
    }
    if cfg.task == Task::DiagDecay && !est.extra.is_null() {
        eprintln!("decay fit: {}", est.extra["fit"]);
    }
    if c.svg {
        let dir = c.out.clone().or_else(|| cfg.out.clone()).expect("checked above");
        fs::write(dir.join("plot.svg"), plot(cfg, &est, sweep))?;
    }
    Ok(Outcome::Ok)
}

fn plot(cfg: &RunConfig, est: &EnsembleEstimate, sweep: bool) -> String {
    if sweep {
        let by_t = cfg.sweep.as_ref().is_some_and(|s| s.mu_grid.is_empty());
        let x: Vec<f64> = est.sweep.iter().map(|p| if by_t { p.temperature } else { p.mu }).collect();
        let y: Vec<f64> = est
            .sweep
            .iter()
            .map(|p| p.estimates.scalars.get("total_mass").map_or(f64::NAN, |s| s.mean))
            .collect();
        let s = svg::Series { x_lo: &x, x_hi: &x, y: &y };
        return svg::chart("Σ total mass", if by_t { "T" } else { "μ" }, &s);
    }
    let (name, label) = match cfg.task {
        Task::Dos => ("dos_density", "energy"),
        Task::Phi => ("psi_density", "energy"),
        Task::Sigma => ("sigma", "ν"),
        Task::Current => ("current", "t"),
        Task::DiagDecay => ("decay", "r"),
        Task::DiagYnorm => ("ynorm", "L"),
        Task::DiagMott => ("mott_mass", "ν"),
    };
    match est.series(name) {
        Some(s) => svg::chart(
            name,
            label,
            &svg::Series {
                x_lo: &s.x_lo,
                x_hi: &s.x_hi,
                y: &s.mean,
            },
        ),
        None => svg::chart(name, label, &svg::Series { x_lo: &[], x_hi: &[], y: &[] }),
    }
}
