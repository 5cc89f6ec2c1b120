//! Command-line front end.
//!
//! ```text
//! spsa-perturb moments <bernoulli|segmented_uniform>
//! spsa-perturb check <config.json>
//! spsa-perturb run <config.json> --out <results.csv>
//! spsa-perturb reproduce <table2|table3> [--reps N] [--seed S] [--out PATH]
//! ```
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors, 2 for
//! runtime failures (I/O, diverged replicates).

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::CliConfig;
use crate::error::{Result, SpsaError};
use crate::experiments::{run_experiment, write_csv, ExperimentResult, PAIRING_MODE};
use crate::perturbations::{sample_moments, PerturbationDistribution, MOMENT_LABELS};
use crate::spsa::LossRegistry;

pub const TABLE2_CONFIG: &str = include_str!("../configs/table2.json");
pub const TABLE3_CONFIG: &str = include_str!("../configs/table3.json");

/// Draws used by the Monte Carlo column of `moments`.
pub const MOMENT_DRAWS: usize = 1_000_000;
const MOMENT_SEED: u64 = 0x5eed;

#[derive(Debug, Parser)]
#[command(name = "spsa-perturb", version, about = "SPSA perturbation-distribution comparison")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Exact and sampled perturbation moments.
    Moments { name: String },
    /// Evaluate the one-step superiority condition for a config.
    Check { config: PathBuf },
    /// Run the Monte Carlo experiment described by a config and write CSV.
    Run {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-run a bundled comparison table next to its reference values.
    Reproduce {
        table: Table,
        /// Replicates for every row (default: per-table desk-scale counts).
        #[arg(long)]
        reps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        /// CSV destination (default: `<table>.csv`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Table {
    Table2,
    Table3,
}

impl Table {
    pub fn name(self) -> &'static str {
        match self {
            Table::Table2 => "table2",
            Table::Table3 => "table3",
        }
    }
}

pub fn cmd_moments(name: &str, draws: usize, seed: u64) -> Result<String> {
    let dist: PerturbationDistribution = name.parse()?;
    let exact = dist.exact_moments();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sampled = sample_moments(&dist, draws, &mut rng);

    let mut out = String::new();
    writeln!(out, "distribution = {dist}").unwrap();
    writeln!(
        out,
        "{:<16} {:>8} {:>12} {:>14} {:>12}",
        "moment",
        "exact",
        "value",
        format!("mc({draws})"),
        "mc_se"
    )
    .unwrap();
    for m in 0..4 {
        writeln!(
            out,
            "{:<16} {:>8} {:>12.6} {:>14.6} {:>12.2e}",
            MOMENT_LABELS[m],
            exact[m].to_string(),
            exact[m].to_f64(),
            sampled.estimate[m],
            sampled.std_error[m]
        )
        .unwrap();
    }
    Ok(out)
}

pub fn cmd_check(config: &CliConfig, registry: &LossRegistry) -> Result<String> {
    let report = config.condition_report(registry)?;
    Ok(report.to_string())
}

/// Metadata echoed at the head of every results file.
pub fn csv_metadata(config: &CliConfig, registry: &LossRegistry) -> Result<Vec<String>> {
    let mut lines = vec![
        format!("config = {}", config.to_json_compact()),
        format!("master_seed = {}", config.master_seed),
        format!("pairing = {PAIRING_MODE}"),
        format!("noise = {}", config.noise.name()),
    ];
    let report = config.condition_report(registry)?;
    lines.extend(report.fields().into_iter().map(|(k, v)| format!("condition.{k} = {v}")));
    Ok(lines)
}

pub fn cmd_run(config: &CliConfig, out: &Path, registry: &LossRegistry) -> Result<ExperimentResult> {
    let spec = config.experiment_spec(registry)?;
    let metadata = csv_metadata(config, registry)?;
    let result = run_experiment(&spec)?;
    let mut w = BufWriter::new(File::create(out)?);
    write_csv(&result, &metadata, &mut w)?;
    w.flush()?;
    Ok(result)
}

/// Reference row of a comparison table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceRow {
    pub k: usize,
    pub mse_bernoulli: f64,
    pub mse_su: f64,
    /// Desk-scale replicate count for this row.
    pub desk_reps: u64,
}

// Reported MSEs for the quadratic problem (3e7 replicates each).
const TABLE2_REFERENCE: [ReferenceRow; 4] = [
    ReferenceRow {
        k: 1,
        mse_bernoulli: 0.1913,
        mse_su: 0.1798,
        desk_reps: 1_000_000,
    },
    ReferenceRow {
        k: 5,
        mse_bernoulli: 0.2094,
        mse_su: 0.1796,
        desk_reps: 1_000_000,
    },
    ReferenceRow {
        k: 10,
        mse_bernoulli: 0.1890,
        mse_su: 0.1786,
        desk_reps: 1_000_000,
    },
    ReferenceRow {
        k: 1000,
        mse_bernoulli: 0.0421,
        mse_su: 0.1403,
        desk_reps: 10_000,
    },
];

// Reported MSEs for the quartic problem (1e6 replicates each).
const TABLE3_REFERENCE: [ReferenceRow; 4] = [
    ReferenceRow {
        k: 1,
        mse_bernoulli: 1.7891,
        mse_su: 1.5255,
        desk_reps: 100_000,
    },
    ReferenceRow {
        k: 2,
        mse_bernoulli: 1.2811,
        mse_su: 1.2592,
        desk_reps: 100_000,
    },
    ReferenceRow {
        k: 5,
        mse_bernoulli: 0.6500,
        mse_su: 0.9122,
        desk_reps: 100_000,
    },
    ReferenceRow {
        k: 1000,
        mse_bernoulli: 0.0024,
        mse_su: 0.0049,
        desk_reps: 100_000,
    },
];

pub fn reference_rows(table: Table) -> &'static [ReferenceRow] {
    match table {
        Table::Table2 => &TABLE2_REFERENCE,
        Table::Table3 => &TABLE3_REFERENCE,
    }
}

/// Absolute agreement tolerance on a reproduced MSE.
pub fn reference_tolerance(table: Table) -> f64 {
    match table {
        Table::Table2 => 0.005,
        Table::Table3 => 0.05,
    }
}

pub fn bundled_config(table: Table) -> CliConfig {
    let text = match table {
        Table::Table2 => TABLE2_CONFIG,
        Table::Table3 => TABLE3_CONFIG,
    };
    CliConfig::from_json(text).expect("bundled config parses")
}

#[derive(Debug, Clone)]
pub struct Reproduction {
    pub table: Table,
    pub result: ExperimentResult,
    pub rendering: String,
}

/// Runs the bundled config row-block by row-block (rows sharing a replicate
/// count run together) and renders the comparison.
pub fn reproduce(table: Table, reps: Option<u64>, seed: Option<u64>, registry: &LossRegistry) -> Result<Reproduction> {
    let mut config = bundled_config(table);
    if let Some(seed) = seed {
        config.master_seed = seed;
    }
    let rows = reference_rows(table);
    let mut blocks: Vec<(u64, Vec<usize>)> = Vec::new();
    for row in rows {
        let n = reps.unwrap_or(row.desk_reps);
        match blocks.iter_mut().find(|(bn, _)| *bn == n) {
            Some((_, ks)) => ks.push(row.k),
            None => blocks.push((n, vec![row.k])),
        }
    }
    let mut parts = Vec::new();
    for (n, ks) in blocks {
        let mut block = config.clone();
        block.n_reps = n;
        block.k_values = ks;
        parts.push(run_experiment(&block.experiment_spec(registry)?)?);
    }
    let result = ExperimentResult::merge(parts);
    let rendering = render_reproduction(table, &result);
    Ok(Reproduction {
        table,
        result,
        rendering,
    })
}

fn agreement(reference: f64, got: f64, se: f64, tol: f64) -> &'static str {
    if (got - reference).abs() <= tol.max(4.0 * se) {
        "OK"
    } else {
        "DIFF"
    }
}

pub fn render_reproduction(table: Table, result: &ExperimentResult) -> String {
    use crate::perturbations::DistributionKind::{Bernoulli, SegmentedUniform};
    let tol = reference_tolerance(table);
    let mut out = String::new();
    writeln!(
        out,
        "{:>6} {:>9} | {:>10} {:>9} {:>10} {:>4} | {:>10} {:>9} {:>10} {:>4} | {:>10} {:>5} {:>9}",
        "k", "reps", "ref_B", "mse_B", "se_B", "", "ref_SU", "mse_SU", "se_SU", "", "p_value", "order", ""
    )
    .unwrap();
    for row in reference_rows(table) {
        let (Some(b), Some(s), Some(c)) = (
            result.estimate(Bernoulli, row.k),
            result.estimate(SegmentedUniform, row.k),
            result.comparison(row.k),
        ) else {
            continue;
        };
        let ref_su_better = row.mse_su < row.mse_bernoulli;
        let got_su_better = s.mse < b.mse;
        writeln!(
            out,
            "{:>6} {:>9} | {:>10.4} {:>9.4} {:>10.2e} {:>4} | {:>10.4} {:>9.4} {:>10.2e} {:>4} | {:>10.3e} {:>5} {:>9}",
            row.k,
            b.n_reps,
            row.mse_bernoulli,
            b.mse,
            b.std_error,
            agreement(row.mse_bernoulli, b.mse, b.std_error, tol),
            row.mse_su,
            s.mse,
            s.std_error,
            agreement(row.mse_su, s.mse, s.std_error, tol),
            c.p_value,
            if ref_su_better == got_su_better { "OK" } else { "FLIP" },
            if got_su_better { "SU better" } else { "B better" },
        )
        .unwrap();
    }
    writeln!(
        out,
        "tolerance = max({tol}, 4 se); p_value is one-sided for MSE_B > MSE_SU"
    )
    .unwrap();
    out
}

pub fn cmd_reproduce(
    table: Table,
    reps: Option<u64>,
    seed: Option<u64>,
    out: &Path,
    registry: &LossRegistry,
) -> Result<String> {
    let rep = reproduce(table, reps, seed, registry)?;
    let mut config = bundled_config(table);
    if let Some(seed) = seed {
        config.master_seed = seed;
    }
    let mut metadata = csv_metadata(&config, registry)?;
    metadata.insert(0, format!("reproduce = {}", table.name()));
    let mut w = BufWriter::new(File::create(out)?);
    write_csv(&rep.result, &metadata, &mut w)?;
    w.flush()?;
    Ok(rep.rendering)
}

/// Exit code for an error: 1 for usage/configuration problems, 2 for
/// runtime failures.
pub fn exit_code(err: &SpsaError) -> i32 {
    match err {
        SpsaError::Io(_) | SpsaError::Diverged { .. } => 2,
        _ => 1,
    }
}

fn execute(cli: Cli, registry: &LossRegistry) -> Result<()> {
    match cli.command {
        Command::Moments { name } => {
            print!("{}", cmd_moments(&name, MOMENT_DRAWS, MOMENT_SEED)?);
        }
        Command::Check { config } => {
            let cfg = load_config(&config)?;
            print!("{}", cmd_check(&cfg, registry)?);
        }
        Command::Run { config, out } => {
            let cfg = load_config(&config)?;
            let out = out
                .or_else(|| cfg.output.as_ref().map(PathBuf::from))
                .ok_or_else(|| SpsaError::InvalidExperiment("no output path: pass --out or set `output`".into()))?;
            let result = cmd_run(&cfg, &out, registry)?;
            eprintln!(
                "wrote {} ({} MSE rows, {} comparison rows)",
                out.display(),
                result.estimates.len(),
                result.comparisons.len()
            );
        }
        Command::Reproduce { table, reps, seed, out } => {
            let out = out.unwrap_or_else(|| PathBuf::from(format!("{}.csv", table.name())));
            print!("{}", cmd_reproduce(table, reps, seed, &out, registry)?);
            eprintln!("wrote {}", out.display());
        }
    }
    Ok(())
}

/// Reading the config file is a usage error, not a runtime one.
fn load_config(path: &Path) -> Result<CliConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| SpsaError::InvalidExperiment(format!("cannot read config {}: {e}", path.display())))?;
    CliConfig::from_json(&text).map_err(|e| SpsaError::InvalidExperiment(format!("{}: {e}", path.display())))
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli, &LossRegistry::with_builtins()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
