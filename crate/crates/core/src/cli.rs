//! Command-line front end: `simulate`, `fit`, `loglik` and `select`.
//!
//! Failures print one JSON record `{"error": {"code", "message"}}` to stderr
//! and exit with status 1; usage errors exit with status 2.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{parse_range, sim_design_from_kv, sim_resolved, FitSettings, KeyValues};
use crate::em::{fit, pairwise_loglik};
use crate::error::{Error, Result};
use crate::inference::{sandwich, select_grid};
use crate::io::{estimates_table, grid_csv, load_panel, write_latent, write_panel, FitReport};
use crate::model::{unflatten_parameters, validate_dataset};
use crate::simulate::simulate;

/// Environment fallback for `--threads`.
pub const THREADS_ENV: &str = "NESTED_HMM_THREADS";

#[derive(Debug, Parser)]
#[command(name = "nested-hmm", version, about = "Nested hidden Markov models for multilevel panels")]
struct Cli {
    /// Worker threads (0 = all cores); falls back to NESTED_HMM_THREADS.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw a panel from a simulation config.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the true latent states to this CSV.
        #[arg(long)]
        latent: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit one model and write fit.json.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Drop singleton clusters instead of pairing them with a masked partner.
        #[arg(long)]
        strict_pairs: bool,
    },
    /// Evaluate the pairwise log-likelihood at the parameters of a fit.json.
    Loglik {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        params: PathBuf,
    },
    /// Fit a grid of state counts and pick the CLIC maximizer.
    Select {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Range such as 1..3.
        #[arg(long)]
        k1: String,
        #[arg(long)]
        k2: String,
        /// Grid CSV destination.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        strict_pairs: bool,
    },
}

fn read_config(path: &Path) -> Result<KeyValues> {
    KeyValues::parse(&fs::read_to_string(path)?)
}

fn fit_settings(path: &Path, seed: Option<u64>, strict_pairs: bool) -> Result<FitSettings> {
    fit_settings_with(path, seed, strict_pairs, &[])
}

fn fit_settings_with(
    path: &Path,
    seed: Option<u64>,
    strict_pairs: bool,
    overrides: &[(&str, String)],
) -> Result<FitSettings> {
    let mut kv = read_config(path)?;
    for (k, v) in overrides {
        kv.set(k, v.clone());
    }
    if let Some(s) = seed {
        kv.set("seed", s.to_string());
    }
    if strict_pairs {
        kv.set("strict_pairs", "true");
    }
    FitSettings::from_kv(&kv)
}

fn run(command: Command) -> Result<String> {
    match command {
        Command::Simulate { config, out, latent, seed } => {
            let mut kv = read_config(&config)?;
            if let Some(s) = seed {
                kv.set("seed", s.to_string());
            }
            let design = sim_design_from_kv(&kv)?;
            let (data, states) = simulate(&design)?;
            write_panel(&out, &data)?;
            if let Some(path) = latent {
                write_latent(&path, &data, &states)?;
            }
            let mut msg = String::new();
            for (k, v) in sim_resolved(&design) {
                msg.push_str(&format!("{k} = {v}\n"));
            }
            msg.push_str(&format!("wrote {} units in {} clusters\n", data.n_units(), data.clusters.len()));
            Ok(msg)
        }
        Command::Fit { data, config, out, seed, strict_pairs } => {
            let settings = fit_settings(&config, seed, strict_pairs)?;
            let spec = &settings.spec;
            let panel = validate_dataset(&load_panel(&data, spec)?, spec)?;
            let result = fit(&panel, spec, &settings.em)?;
            let inference = sandwich(&panel, spec, &result.theta);
            let report = FitReport::new(settings.resolved(), spec, result, inference)?;
            report.save(&out)?;
            let mut msg = String::new();
            for (k, v) in &report.config {
                msg.push_str(&format!("{k} = {v}\n"));
            }
            match (&report.inference, &report.inference_error) {
                (Some(inf), _) => msg.push_str(&estimates_table(inf)),
                (None, Some(e)) => msg.push_str(&format!("pairwise log-likelihood {:.4}\ninference failed: {e}\n", report.ploglik)),
                (None, None) => {}
            }
            for w in &report.warnings {
                msg.push_str(&format!("warning: {w}\n"));
            }
            Ok(msg)
        }
        Command::Loglik { data, params } => {
            let report = FitReport::load(&params)?;
            let spec = &report.spec;
            let panel = validate_dataset(&load_panel(&data, spec)?, spec)?;
            let theta = unflatten_parameters(&report.flat_parameters, spec)?;
            Ok(format!("{}\n", pairwise_loglik(&panel, spec, &theta)?))
        }
        Command::Select { data, config, k1, k2, out, seed, strict_pairs } => {
            let (k1, k2) = (parse_range(&k1)?, parse_range(&k2)?);
            // the template carries the largest cell so its constraints validate
            let largest = |r: &[usize]| r.iter().max().copied().unwrap_or(1).to_string();
            let overrides = [("k1", largest(&k1)), ("k2", largest(&k2))];
            let settings = fit_settings_with(&config, seed, strict_pairs, &overrides)?;
            let spec = &settings.spec;
            let panel = validate_dataset(&load_panel(&data, spec)?, spec)?;
            let grid = select_grid(&panel, &k1, &k2, spec, &settings.em)?;
            let table = grid_csv(&grid);
            fs::write(&out, &table)?;
            let mut msg = table;
            for c in grid.cells.iter().filter(|c| c.error.is_some()) {
                msg.push_str(&format!("k1={} k2={}: {}\n", c.k1, c.k2, c.error.as_deref().unwrap_or_default()));
            }
            Ok(msg)
        }
    }
}

fn thread_count(flag: Option<usize>) -> Result<usize> {
    if let Some(n) = flag {
        return Ok(n);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| Error::Config(format!("{THREADS_ENV}='{v}' is not a thread count"))),
        Err(_) => Ok(0),
    }
}

fn error_record(e: &Error) -> String {
    serde_json::json!({ "error": { "code": e.code(), "message": e.to_string() } }).to_string()
}

/// Runs the CLI on `args` (program name first) and returns the exit status.
pub fn run_command<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let outcome = thread_count(cli.threads).and_then(|n| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| run(cli.command))
    });
    match outcome {
        Ok(msg) => {
            print!("{msg}");
            0
        }
        Err(e) => {
            eprintln!("{}", error_record(&e));
            1
        }
    }
}
