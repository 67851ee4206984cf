//! Python bindings. Matrices are lists of rows; results are plain dicts.

use lqg_prefix::codec::{BitWriter, CodeKind, Codebook, FinitePmf, Slot};
use lqg_prefix::control::PlantModel;
use lqg_prefix::error::Error;
use lqg_prefix::invariant::{invariant_density_mc, invariant_density_series, ChainParams, DEFAULT_BURNIN, DEFAULT_SERIES_TOL};
use lqg_prefix::rdf::{solve_rdf_mimo, solve_rdf_siso, RdfSolution};
use lqg_prefix::sim::{run_loop, space_filling_loss, CodecMode, LoopConfig};
use nalgebra::DMatrix;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: Error) -> PyErr {
    match e {
        Error::InvalidModel(_) | Error::InvalidConfig(_) | Error::Unencodable(_) | Error::MalformedStream(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn matrix(name: &str, rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let n = rows.first().map_or(0, Vec::len);
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err(format!("{name} must be a non-empty list of equal-length rows")));
    }
    Ok(DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

#[allow(clippy::too_many_arguments)]
fn plant(
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    w: Vec<Vec<f64>>,
    x0: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
    r: Vec<Vec<f64>>,
    gamma: f64,
) -> PyResult<PlantModel> {
    PlantModel::new(
        matrix("A", &a)?,
        matrix("B", &b)?,
        matrix("W", &w)?,
        matrix("X0", &x0)?,
        matrix("Q", &q)?,
        matrix("R", &r)?,
        gamma,
    )
    .map_err(err)
}

fn rdf(p: &PlantModel, v: f64) -> PyResult<RdfSolution> {
    if p.state_dim() == 1 { solve_rdf_siso(p, v) } else { solve_rdf_mimo(p, v) }.map_err(err)
}

fn parse_kind(kind: &str) -> PyResult<CodeKind> {
    match kind {
        "fano" => Ok(CodeKind::Fano),
        "shannon-sorted" => Ok(CodeKind::ShannonSorted),
        _ => Err(PyValueError::new_err(format!("unknown code kind {kind:?}"))),
    }
}

fn book(cells: Vec<i64>, probs: Vec<f64>, escape: f64, kind: &str) -> PyResult<Codebook> {
    let pmf = FinitePmf::new(cells, probs, escape).map_err(err)?;
    Ok(Codebook::build(&pmf, parse_kind(kind)?))
}

/// Rate bound and test channel for an LQG budget.
#[pyfunction]
#[pyo3(signature = (a, b, w, x0, q, r, gamma, v = 1.0))]
#[allow(clippy::too_many_arguments)]
fn solve<'py>(
    py: Python<'py>,
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    w: Vec<Vec<f64>>,
    x0: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
    r: Vec<Vec<f64>>,
    gamma: f64,
    v: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let p = plant(a, b, w, x0, q, r, gamma)?;
    let s = rdf(&p, v)?;
    let d = PyDict::new(py);
    d.set_item("rate_bits", s.rate_bits)?;
    d.set_item("Phat", rows(&s.phat))?;
    d.set_item("PhatPlus", rows(&s.phat_plus))?;
    d.set_item("C", s.channel.as_ref().map(|g| rows(&g.c)))?;
    d.set_item("delta", s.delta)?;
    d.set_item("S", rows(&s.control.s))?;
    d.set_item("K", rows(&s.control.k))?;
    d.set_item("Theta", rows(&s.control.theta))?;
    d.set_item("min_cost", s.control.min_cost)?;
    d.set_item("expected_cost", s.control_cost())?;
    Ok(d)
}

/// Closed-loop simulation; returns the run summary.
#[pyfunction]
#[pyo3(signature = (a, b, w, x0, q, r, gamma, mode = "tv-nosi", horizon = 1000, trials = 1, seed = 0, v = 1.0))]
#[allow(clippy::too_many_arguments)]
fn simulate<'py>(
    py: Python<'py>,
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    w: Vec<Vec<f64>>,
    x0: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
    r: Vec<Vec<f64>>,
    gamma: f64,
    mode: &str,
    horizon: usize,
    trials: usize,
    seed: u64,
    v: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let mode: CodecMode = mode.parse().map_err(err)?;
    let p = plant(a, b, w, x0, q, r, gamma)?;
    let s = rdf(&p, v)?;
    let mut cfg = LoopConfig::new(p, s, mode);
    cfg.horizon = horizon;
    cfg.trials = trials;
    cfg.seed = seed;
    let (sum, _) = py.detach(|| run_loop(&cfg)).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("mode", sum.mode.as_str())?;
    d.set_item("code", sum.code)?;
    d.set_item("avg_cost", sum.avg_cost)?;
    d.set_item("avg_bits", sum.avg_bits)?;
    d.set_item("avg_model_bits", sum.avg_model_bits)?;
    d.set_item("bound_bits", sum.bound_bits)?;
    d.set_item("rate_lower", sum.rate_lower)?;
    d.set_item("expected_cost", sum.expected_cost)?;
    d.set_item("cost_stderr", sum.cost_stderr)?;
    d.set_item("cost_pass", sum.cost_pass)?;
    d.set_item("bits_pass", sum.bits_pass)?;
    d.set_item("sync_ok", sum.sync_ok)?;
    Ok(d)
}

/// Stationary prediction-error variance of a scalar loop: series density and
/// Monte Carlo estimate.
#[pyfunction]
#[pyo3(signature = (a, b, w, x0, q, r, gamma, mc_steps = 1_000_000, seed = 0, v = 1.0))]
#[allow(clippy::too_many_arguments)]
fn invariant<'py>(
    py: Python<'py>,
    a: f64,
    b: f64,
    w: f64,
    x0: f64,
    q: f64,
    r: f64,
    gamma: f64,
    mc_steps: usize,
    seed: u64,
    v: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let p = PlantModel::scalar(a, b, w, x0, q, r, gamma).map_err(err)?;
    let s = rdf(&p, v)?;
    let chain = ChainParams::from_solution(&p, &s).map_err(err)?;
    let (series, mc) = py
        .detach(|| {
            let g = invariant_density_series(&chain, DEFAULT_SERIES_TOL)?;
            let mc = invariant_density_mc(&chain, mc_steps, DEFAULT_BURNIN, seed)?;
            Ok::<_, Error>((g, mc))
        })
        .map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("var_series", series.variance())?;
    d.set_item("var_mc", mc.variance)?;
    d.set_item("phat_plus", s.phat_plus[(0, 0)])?;
    d.set_item("tv_distance", mc.grid.coarsen(64).tv_distance(&series.coarsen(64)))?;
    Ok(d)
}

/// Codeword table as `(symbol or None for the escape word, bit string)`.
#[pyfunction]
#[pyo3(signature = (cells, probs, kind = "shannon-sorted", escape = 0.0))]
fn codebook(cells: Vec<i64>, probs: Vec<f64>, kind: &str, escape: f64) -> PyResult<Vec<(Option<i64>, String)>> {
    let b = book(cells, probs, escape, kind)?;
    Ok(b.entries()
        .map(|(s, w)| {
            let sym = match s {
                Slot::Symbol(c) => Some(c),
                Slot::Escape => None,
            };
            (sym, w.to_string())
        })
        .collect())
}

/// Encode a symbol sequence; returns the bit string.
#[pyfunction]
#[pyo3(signature = (cells, probs, symbols, kind = "shannon-sorted", escape = 0.0))]
fn encode(cells: Vec<i64>, probs: Vec<f64>, symbols: Vec<i64>, kind: &str, escape: f64) -> PyResult<String> {
    let b = book(cells, probs, escape, kind)?;
    let mut w = BitWriter::new();
    for q in symbols {
        b.encode_into(q, &mut w).map_err(err)?;
    }
    Ok(w.to_bit_string())
}

/// Decode `count` symbols from a bit string.
#[pyfunction]
#[pyo3(signature = (cells, probs, bits, count, kind = "shannon-sorted", escape = 0.0))]
fn decode(cells: Vec<i64>, probs: Vec<f64>, bits: &str, count: usize, kind: &str, escape: f64) -> PyResult<Vec<i64>> {
    let b = book(cells, probs, escape, kind)?;
    let w = BitWriter::from_bit_string(bits).ok_or_else(|| PyValueError::new_err("bits must contain only 0 and 1"))?;
    let mut r = w.reader();
    (0..count).map(|_| b.decode(&mut r).map_err(err)).collect()
}

#[pyfunction(name = "space_filling_loss")]
fn space_filling() -> f64 {
    space_filling_loss()
}

#[pymodule]
pub fn lqg_prefix_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(invariant, m)?)?;
    m.add_function(wrap_pyfunction!(codebook, m)?)?;
    m.add_function(wrap_pyfunction!(encode, m)?)?;
    m.add_function(wrap_pyfunction!(decode, m)?)?;
    m.add_function(wrap_pyfunction!(space_filling, m)?)?;
    Ok(())
}
