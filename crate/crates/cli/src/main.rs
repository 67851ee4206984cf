mod codec_check;
mod config;
mod output;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lqg_prefix::control::PlantModel;
use lqg_prefix::error::Error;
use lqg_prefix::invariant::{
    initial_marginal_kl, invariant_density_mc, invariant_density_series, kl_decay_curve, write_kl_csv, ChainParams,
    GRID_CELLS,
};
use lqg_prefix::rdf::{solve_rdf_mimo_with, solve_rdf_siso, BarrierOptions, RdfSolution};
use lqg_prefix::sim::{run_loop, CodecMode, LoopConfig};
use nalgebra::DMatrix;
use serde_json::{json, Value};

use config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "lqg-prefix", version, about = "Rate-limited LQG control with prefix-free dithered quantization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the control problem and the rate program; print a JSON report.
    Solve(Common),
    /// Run the quantized closed loop and print a JSON summary.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Write the per-step trace of trial 0 as CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Invariant density, Monte Carlo check and KL decay (scalar plants).
    /// With `--out DIR`, writes summary.json, density_series.csv,
    /// density_mc.csv and kl.csv into DIR.
    Invariant(Common),
    /// Run the codebook property checks on the bundled distributions.
    CodecCheck {
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed for the round-trip symbol streams.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output path (stdout if omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `sim.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug)]
pub enum Failure {
    Config(String),
    Core(Error),
    Scope(String),
    Io(String),
    Check(String),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) | Failure::Io(_) => 1,
            Failure::Core(Error::InvalidModel(_) | Error::InvalidConfig(_)) => 1,
            Failure::Core(Error::SyncLoss(_) | Error::MalformedStream(_) | Error::Unencodable(_)) => 3,
            Failure::Check(_) => 3,
            Failure::Core(_) | Failure::Scope(_) => 2,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration error: {m}"),
            Failure::Core(e) => write!(f, "{e}"),
            Failure::Scope(m) => write!(f, "{m}"),
            Failure::Io(m) => write!(f, "i/o error: {m}"),
            Failure::Check(m) => write!(f, "check failed: {m}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

fn rows(m: &DMatrix<f64>) -> Value {
    Value::Array((0..m.nrows()).map(|i| json!((0..m.ncols()).map(|j| m[(i, j)]).collect::<Vec<f64>>())).collect())
}

fn load(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.sim.seed = seed;
    }
    Ok(cfg)
}

fn solve(cfg: &ExperimentConfig, plant: &PlantModel) -> Result<RdfSolution, Failure> {
    let sol = if plant.state_dim() == 1 {
        solve_rdf_siso(plant, cfg.solver.v)?
    } else {
        let opts = BarrierOptions { gap_tol: cfg.solver.gap_tol, ..BarrierOptions::default() };
        solve_rdf_mimo_with(plant, cfg.solver.v, opts)?
    };
    Ok(sol)
}

fn emit(value: &Value, out: Option<&Path>) -> Result<(), Failure> {
    match out {
        Some(p) => output::write_json_file(value, p)?,
        None => {
            let stdout = std::io::stdout();
            output::write_json(value, &mut stdout.lock())?;
        }
    }
    Ok(())
}

fn cmd_solve(common: &Common) -> Result<(), Failure> {
    let cfg = load(common)?;
    let plant = cfg.plant()?;
    let sol = solve(&cfg, &plant)?;
    let (c, v) = match &sol.channel {
        Some(g) => (rows(&g.c), rows(&g.v_matrix())),
        None => (Value::Null, Value::Null),
    };
    let report = json!({
        "rate_bits": sol.rate_bits,
        "Phat": rows(&sol.phat),
        "PhatPlus": rows(&sol.phat_plus),
        "C": c,
        "V": v,
        "delta": sol.delta,
        "S": rows(&sol.control.s),
        "K": rows(&sol.control.k),
        "Theta": rows(&sol.control.theta),
        "min_cost": sol.control.min_cost,
        "gamma": sol.gamma,
        "expected_cost": sol.control_cost(),
    });
    emit(&report, common.out.as_deref())
}

fn cmd_simulate(common: &Common, trace: Option<&Path>) -> Result<(), Failure> {
    let cfg = load(common)?;
    let plant = cfg.plant()?;
    if cfg.sim.mode.time_invariant() && plant.state_dim() != 1 {
        return Err(Failure::Scope(format!(
            "{} codecs are defined for scalar plants only (state dimension {})",
            cfg.sim.mode,
            plant.state_dim()
        )));
    }
    let rdf = solve(&cfg, &plant)?;
    let mut lc = LoopConfig::new(plant, rdf, cfg.sim.mode);
    lc.kind = cfg.code_kind();
    lc.horizon = cfg.sim.horizon;
    lc.trials = cfg.sim.trials;
    lc.seed = cfg.sim.seed;
    lc.record_trace = trace.is_some();
    let (summary, tr) = run_loop(&lc)?;
    if !summary.sync_ok {
        return Err(Failure::Core(Error::SyncLoss(0)));
    }
    let mut value = serde_json::to_value(&summary).map_err(|e| Failure::Io(e.to_string()))?;
    let pass = summary.cost_pass && summary.bits_pass && summary.sync_ok;
    value["pass"] = json!(pass);
    value["seed"] = json!(lc.seed);
    if let (Some(path), Some(tr)) = (trace, tr) {
        let mut w = BufWriter::new(File::create(path)?);
        tr.write_csv(&mut w)?;
        w.flush()?;
    }
    emit(&value, common.out.as_deref())
}

fn cmd_invariant(common: &Common) -> Result<(), Failure> {
    let cfg = load(common)?;
    let plant = cfg.plant()?;
    if plant.state_dim() != 1 {
        return Err(Failure::Scope(format!(
            "invariant analysis covers scalar plants only (time-invariant coding is SISO); state dimension is {}",
            plant.state_dim()
        )));
    }
    if GRID_CELLS % cfg.sim.tv_bins != 0 {
        return Err(Failure::Config(format!("sim.tv_bins must divide {GRID_CELLS}")));
    }
    let rdf = solve(&cfg, &plant)?;
    let chain = ChainParams::from_solution(&plant, &rdf)?;
    let series = invariant_density_series(&chain, cfg.solver.series_tol)?;
    let mc = invariant_density_mc(&chain, cfg.sim.mc_steps, cfg.sim.burnin, cfg.sim.seed)?;
    let factor = series.n / cfg.sim.tv_bins;
    let tv = mc.grid.coarsen(factor).tv_distance(&series.coarsen(factor));
    let mut lc = LoopConfig::new(plant, rdf.clone(), CodecMode::TiNosi);
    lc.seed = cfg.sim.seed;
    let kl0 = initial_marginal_kl(&lc)?;
    let kl = kl_decay_curve(&lc, &cfg.sim.checkpoints, cfg.sim.rollouts)?;
    let summary = json!({
        "var_series": series.variance(),
        "var_mc": mc.variance,
        "mean_mc": mc.mean,
        "phat_plus": rdf.phat_plus[(0, 0)],
        "tv_distance": tv,
        "tv_bins": cfg.sim.tv_bins,
        "tv_distance_fine": mc.grid.tv_distance(&series),
        "grid_cells": series.n,
        "mc_steps": cfg.sim.mc_steps,
        "dither_ks": mc.dither_ks,
        "corr_e_d": mc.corr_e_d,
        "kl_initial": kl0,
        "kl": kl.iter().map(|p| json!({"t": p.t, "kl": p.kl, "err": p.err})).collect::<Vec<_>>(),
        "seed": cfg.sim.seed,
    });
    match &common.out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let csv = |name: &str| -> Result<BufWriter<File>, Failure> { Ok(BufWriter::new(File::create(dir.join(name))?)) };
            let mut w = csv("density_series.csv")?;
            series.write_csv(&mut w)?;
            w.flush()?;
            let mut w = csv("density_mc.csv")?;
            mc.grid.write_csv(&mut w)?;
            w.flush()?;
            let mut w = csv("kl.csv")?;
            write_kl_csv(&kl, &mut w)?;
            w.flush()?;
            output::write_json_file(&summary, &dir.join("summary.json"))?;
            emit(&summary, None)
        }
        None => emit(&summary, None),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Solve(c) => cmd_solve(&c),
        Command::Simulate { common, trace } => cmd_simulate(&common, trace.as_deref()),
        Command::Invariant(c) => cmd_invariant(&c),
        Command::CodecCheck { out, seed } => {
            let (report, ok) = codec_check::run(seed)?;
            emit(&report, out.as_deref())?;
            if ok {
                Ok(())
            } else {
                Err(Failure::Check("codebook property violated (see report)".into()))
            }
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
