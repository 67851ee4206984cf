use std::path::Path;

use lqg_prefix::codec::CodeKind;
use lqg_prefix::control::PlantModel;
use lqg_prefix::rdf::DEFAULT_V;
use lqg_prefix::sim::CodecMode;
use nalgebra::DMatrix;
use serde::Deserialize;

use crate::Failure;

/// Experiment description read from `--config`. See `config.schema.json`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub plant: PlantBlock,
    #[serde(default)]
    pub solver: SolverBlock,
    #[serde(default)]
    pub sim: SimBlock,
}

/// Matrices are arrays of rows.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantBlock {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    #[serde(rename = "W")]
    pub w: Vec<Vec<f64>>,
    #[serde(rename = "X0")]
    pub x0: Vec<Vec<f64>>,
    #[serde(rename = "Q")]
    pub q: Vec<Vec<f64>>,
    #[serde(rename = "R")]
    pub r: Vec<Vec<f64>>,
    pub gamma: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverBlock {
    pub v: f64,
    /// Duality-gap tolerance of the barrier solver (multi-state plants).
    pub gap_tol: f64,
    /// Truncation tolerance of the invariant-density series.
    pub series_tol: f64,
}

impl Default for SolverBlock {
    fn default() -> Self {
        Self { v: DEFAULT_V, gap_tol: 1e-9, series_tol: 1e-12 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
pub enum CodeChoice {
    #[serde(rename = "fano")]
    Fano,
    #[serde(rename = "shannon-sorted")]
    ShannonSorted,
}

impl From<CodeChoice> for CodeKind {
    fn from(c: CodeChoice) -> Self {
        match c {
            CodeChoice::Fano => CodeKind::Fano,
            CodeChoice::ShannonSorted => CodeKind::ShannonSorted,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimBlock {
    pub mode: CodecMode,
    /// Defaults to Fano for `ti-si`, Shannon-sorted otherwise.
    pub code: Option<CodeChoice>,
    pub horizon: usize,
    pub trials: usize,
    pub seed: u64,
    /// KL checkpoints for `invariant`.
    pub checkpoints: Vec<usize>,
    pub rollouts: usize,
    /// Recorded Monte Carlo steps after burn-in for `invariant`.
    pub mc_steps: usize,
    pub burnin: usize,
    /// Histogram bins for the reported TV distance.
    pub tv_bins: usize,
}

impl Default for SimBlock {
    fn default() -> Self {
        Self {
            mode: CodecMode::TvNosi,
            code: None,
            horizon: 1000,
            trials: 1,
            seed: 0,
            checkpoints: vec![1, 5, 20, 100],
            rollouts: 100_000,
            mc_steps: 10_000_000,
            burnin: 1000,
            tv_bins: 256,
        }
    }
}

fn matrix(field: &str, rows: &[Vec<f64>], nrows: usize, ncols: Option<usize>) -> Result<DMatrix<f64>, Failure> {
    let bad = |msg: String| Failure::Config(format!("plant.{field}: {msg}"));
    if rows.len() != nrows {
        return Err(bad(format!("expected {nrows} rows, got {}", rows.len())));
    }
    let ncols = ncols.unwrap_or_else(|| rows.first().map_or(0, Vec::len));
    if ncols == 0 {
        return Err(bad("empty matrix".into()));
    }
    for (i, r) in rows.iter().enumerate() {
        if r.len() != ncols {
            return Err(bad(format!("row {i} has {} entries, expected {ncols}", r.len())));
        }
        if r.iter().any(|x| !x.is_finite()) {
            return Err(bad(format!("row {i} has a non-finite entry")));
        }
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Failure::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    fn check(&self) -> Result<(), Failure> {
        let bad = |msg: &str| Err(Failure::Config(msg.into()));
        if !(self.solver.v > 0.0 && self.solver.v.is_finite()) {
            return bad("solver.v must be positive");
        }
        if !(self.solver.gap_tol > 0.0) {
            return bad("solver.gap_tol must be positive");
        }
        if !(self.solver.series_tol > 0.0) {
            return bad("solver.series_tol must be positive");
        }
        if self.sim.trials == 0 {
            return bad("sim.trials must be at least 1");
        }
        if self.sim.horizon == 0 {
            return bad("sim.horizon must be at least 1");
        }
        if self.sim.rollouts < 2 {
            return bad("sim.rollouts must be at least 2");
        }
        if self.sim.mc_steps == 0 {
            return bad("sim.mc_steps must be at least 1");
        }
        if self.sim.checkpoints.is_empty() || self.sim.checkpoints.windows(2).any(|w| w[0] >= w[1]) {
            return bad("sim.checkpoints must be a non-empty increasing list");
        }
        if self.sim.tv_bins == 0 {
            return bad("sim.tv_bins must be at least 1");
        }
        if !self.plant.gamma.is_finite() {
            return bad("plant.gamma must be finite");
        }
        Ok(())
    }

    pub fn plant(&self) -> Result<PlantModel, Failure> {
        let p = &self.plant;
        let m = p.a.len();
        let a = matrix("A", &p.a, m, Some(m))?;
        let b = matrix("B", &p.b, m, None)?;
        let n = b.ncols();
        let w = matrix("W", &p.w, m, Some(m))?;
        let x0 = matrix("X0", &p.x0, m, Some(m))?;
        let q = matrix("Q", &p.q, m, Some(m))?;
        let r = matrix("R", &p.r, n, Some(n))?;
        PlantModel::new(a, b, w, x0, q, r, p.gamma).map_err(Failure::Core)
    }

    pub fn code_kind(&self) -> CodeKind {
        self.sim.code.map(CodeKind::from).unwrap_or_else(|| self.sim.mode.default_kind())
    }
}
