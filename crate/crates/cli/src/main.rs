use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ggpfr::simulate::Scenario;
use ggpfr::{Error, Result};
use ggpfr_cli::commands::{self, EvaluateArgs, FitArgs, PredictArgs, SimulateArgs};
use ggpfr_cli::config::{parse_assignment, parse_grid, KeyValues};
use ggpfr_cli::experiments::SplitMode;
use ggpfr_cli::reproduce::{self, ReproduceArgs, Table};

/// Generalized Gaussian process functional regression.
#[derive(Parser)]
#[command(name = "ggpfr", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Default)]
struct ModelOpts {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set basis.D=6` (repeatable).
    #[arg(long = "set", value_parser = parse_assignment)]
    sets: Vec<(String, String)>,
    #[arg(long)]
    family: Option<String>,
    #[arg(long)]
    kernel: Option<String>,
    /// Basis dimension, or `auto`.
    #[arg(long = "basis-dim")]
    basis_dim: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ModelOpts {
    fn key_values(&self) -> Result<KeyValues> {
        let mut kv = match &self.config {
            Some(p) => KeyValues::load(p)?,
            None => KeyValues::default(),
        };
        let flags = [("family", &self.family), ("kernel.kind", &self.kernel), ("basis.D", &self.basis_dim)];
        for (k, v) in flags {
            if let Some(v) = v {
                kv.set(k, v.clone());
            }
        }
        if let Some(s) = self.seed {
            kv.set("seed", s.to_string());
        }
        for (k, v) in &self.sets {
            kv.set(k, v.clone());
        }
        Ok(kv)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a simulated dataset.
    Simulate {
        /// binomial_se, chebyshev or ordinal.
        #[arg(long)]
        scenario: String,
        #[arg(long, short = 'm', default_value_t = 60)]
        batches: usize,
        #[arg(long, short = 'n', default_value_t = 40)]
        points: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, short)]
        out: PathBuf,
        /// Also write latent values and the true mean.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Fit a model to a dataset CSV.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        /// Write the report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Random effects by `cluster_id` with design columns `w1..`.
        #[arg(long)]
        clustered: bool,
        #[command(flatten)]
        model: ModelOpts,
    },
    /// Predict at test points.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Observations to condition on.
        #[arg(long)]
        observed: Option<PathBuf>,
        #[arg(long, short)]
        out: Option<PathBuf>,
        /// Laplace-ratio moments instead of quadrature.
        #[arg(long)]
        laplace: bool,
    },
    /// Score predictions on held-out points.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
        /// interpolate, extrapolate or new_batch.
        #[arg(long, default_value = "interpolate")]
        mode: String,
        /// Observed fraction per batch.
        #[arg(long, default_value_t = 2.0 / 3.0)]
        fraction: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Replicate a simulation study.
    Reproduce {
        /// T1, T2, T3, T_OP or ORDINAL.
        #[arg(long)]
        table: String,
        #[arg(long)]
        reps: Option<usize>,
        /// New curves scored per replication.
        #[arg(long)]
        curves: Option<usize>,
        /// Curve lengths, e.g. `40` or `20,40,60`.
        #[arg(long = "points")]
        points: Option<String>,
        /// Training curves.
        #[arg(long)]
        batches: Option<usize>,
        /// Kernels for T3 / T_OP, e.g. `se,matern32`.
        #[arg(long)]
        kernels: Option<String>,
        /// Basis grid for BIC selection, e.g. `4..12`.
        #[arg(long)]
        grid: Option<String>,
        #[arg(long)]
        restarts: Option<usize>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, short)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_parser = parse_assignment)]
        sets: Vec<(String, String)>,
    },
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Simulate { scenario, batches, points, seed, out, truth } => {
            let a = SimulateArgs { scenario: scenario.parse::<Scenario>()?, m: batches, n: points, seed, out, truth };
            print!("{}", commands::simulate(&a)?);
        }
        Cmd::Fit { data, out, report, clustered, model } => {
            let a = FitArgs { data, config: model.key_values()?, out, clustered };
            let (_, text) = commands::fit_command(&a)?;
            match report {
                Some(p) => std::fs::write(p, text)?,
                None => print!("{text}"),
            }
        }
        Cmd::Predict { model, test, observed, out, laplace } => {
            commands::predict_command(&PredictArgs { model, test, observed, out, laplace })?;
        }
        Cmd::Evaluate { model, data, truth, mode, fraction, seed, out } => {
            let a = EvaluateArgs { model, data, truth, mode: mode.parse::<SplitMode>()?, fraction, seed, out };
            let scores = commands::evaluate(&a)?;
            commands::write_scores(&scores, a.out.as_deref())?;
        }
        Cmd::Reproduce { table, reps, curves, points, batches, kernels, grid, restarts, seed, out, config, sets } => {
            let mut a = ReproduceArgs::new(table.parse::<Table>()?);
            a.reps = reps;
            a.curves = curves;
            a.m = batches;
            a.seed = seed;
            a.n = points.map(|s| parse_grid(&s)).transpose()?;
            a.kernels = kernels
                .map(|s| s.split(',').map(|k| k.parse::<ggpfr::KernelKind>()).collect::<Result<Vec<_>>>())
                .transpose()?;
            if let Some(p) = config {
                a.config = KeyValues::load(p)?;
            }
            if let Some(g) = grid {
                a.config.set("basis.grid", g);
            }
            if let Some(r) = restarts {
                a.config.set("restarts", r.to_string());
            }
            for (k, v) in sets {
                a.config.set(&k, v);
            }
            if a.reps == Some(0) {
                return Err(Error::InvalidParameter("--reps must be at least 1".into()));
            }
            reproduce::reproduce(&a, commands::open_output(out.as_deref())?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let class = e.class();
            eprintln!("error ({}): {e}", format!("{class:?}").to_lowercase());
            ExitCode::from(ggpfr_cli::exit_code(class) as u8)
        }
    }
}
