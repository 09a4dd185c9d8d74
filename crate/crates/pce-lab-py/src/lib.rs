//! Python bindings (`import pcelab`).
//!
//! The plain-Rust helpers below hold the logic; the `#[pyfunction]`s and
//! `#[pymethods]` only convert arguments and errors.

#![allow(clippy::useless_conversion)] // emitted by the pyo3 macros

use std::path::Path;

use pce_lab::acceptance;
use pce_lab::config::{ConfigError, ConfigFile};
use pce_lab::engine::{solve_pce, PceSolution};
use pce_lab::limit::{classify_t1, run_study, Divergence, LimitSpec, StudyConfig, StudyRow};
use pce_lab::market::MarketScenario;
use pce_lab::output::{coefficient_rows, summary};
use pce_lab::sim::{double_jump_report, simulate, write_outputs, PathSample, SimConfig};
use pce_lab::{PceError, Vector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

/// Error text tagged by kind, converted to a Python exception at the boundary.
#[derive(Debug, Clone, PartialEq)]
pub enum BindingError {
    Config(String),
    Runtime(String),
}

impl From<ConfigError> for BindingError {
    fn from(e: ConfigError) -> Self {
        BindingError::Config(e.to_string())
    }
}

impl From<PceError> for BindingError {
    fn from(e: PceError) -> Self {
        BindingError::Runtime(e.to_string())
    }
}

impl From<BindingError> for PyErr {
    fn from(e: BindingError) -> Self {
        match e {
            BindingError::Config(m) => PyValueError::new_err(m),
            BindingError::Runtime(m) => PyRuntimeError::new_err(m),
        }
    }
}

pub type BResult<T> = std::result::Result<T, BindingError>;

/// `(stage, t, block, row, col, value)`.
type CoefTuple = (usize, f64, String, usize, usize, f64);
/// `(spec_id, N, t, metric, value)`.
type StudyTuple = (String, u32, f64, String, f64);

/// Scenario from a TOML file, or the built-in two-signal market for `None`.
pub fn load_scenario(path: Option<&str>) -> BResult<MarketScenario> {
    match path {
        Some(p) => Ok(ConfigFile::load(Path::new(p))?.scenario()?),
        None => Ok(MarketScenario::two_signal_example()),
    }
}

/// Limit spec and study settings from a TOML file, or the reference spec.
pub fn load_limit(path: Option<&str>) -> BResult<(LimitSpec, StudyConfig)> {
    match path {
        Some(p) => Ok(ConfigFile::load(Path::new(p))?.limit()?),
        None => Ok((LimitSpec::reference(), StudyConfig::default())),
    }
}

/// `(reveals_factor, q)` with `None` for inconclusive and `inf` for divergent.
pub fn classification(spec: &LimitSpec) -> BResult<(Option<bool>, Option<f64>)> {
    let c = classify_t1(spec)?;
    let q = match c.q.verdict {
        Divergence::Finite(v) => Some(v),
        Divergence::Infinite => Some(f64::INFINITY),
        Divergence::Inconclusive => None,
    };
    Ok((c.reveals_factor(), q))
}

fn vec_out(v: &Vector) -> Vec<f64> {
    v.iter().copied().collect()
}

fn vec_in(v: &[f64]) -> Vector {
    Vector::from_column_slice(v)
}

/// A solved equilibrium.
#[pyclass(name = "Solution", module = "pcelab")]
pub struct PySolution {
    inner: PceSolution,
}

#[pymethods]
impl PySolution {
    #[getter]
    fn n_stages(&self) -> usize {
        self.inner.n_stages()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    /// Entry times of the insiders.
    fn times(&self) -> Vec<f64> {
        self.inner.scenario.times()
    }

    fn summary(&self) -> String {
        summary(&self.inner)
    }

    /// Raises `RuntimeError` if a structural invariant fails.
    fn check_structure(&self) -> PyResult<()> {
        self.inner
            .check_structure()
            .map_err(|e| BindingError::from(e).into())
    }

    /// Coefficient table rows `(stage, t, block, row, col, value)`.
    #[pyo3(signature = (grid = 20))]
    fn coefficients(&self, grid: usize) -> PyResult<Vec<CoefTuple>> {
        let rows = coefficient_rows(&self.inner, grid).map_err(BindingError::from)?;
        Ok(rows
            .into_iter()
            .map(|r| (r.stage, r.t, r.block, r.row, r.col, r.value))
            .collect())
    }

    /// Price at time `t` in the stage containing `t`, given the factor and
    /// the public signals announced so far (one list per signal).
    fn price(&self, t: f64, x: Vec<f64>, h: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let st = self.inner.stage_at(t);
        let c = &st.continuous;
        if h.len() != c.index.n {
            return Err(PyValueError::new_err(format!(
                "time {t} lies in stage {} which needs {} signals, got {}",
                st.n(),
                c.index.n,
                h.len()
            )));
        }
        let hs: Vec<Vector> = h.iter().map(|v| vec_in(v)).collect();
        let z = c.index.stack(&vec_in(&x), &hs);
        Ok(vec_out(&c.price(t, &z).map_err(BindingError::from)?))
    }

    #[pyo3(signature = (seed = 42, paths = 100, grid = 500, threads = None))]
    fn simulate(
        &self,
        seed: u64,
        paths: usize,
        grid: usize,
        threads: Option<usize>,
    ) -> PyResult<Simulation> {
        let cfg = SimConfig {
            seed,
            n_paths: paths,
            grid,
            threads,
        };
        let samples = simulate(&self.inner, &cfg).map_err(BindingError::from)?;
        Ok(Simulation {
            samples,
            dim: self.inner.dim(),
            agents: self.inner.scenario.agents.len(),
        })
    }
}

/// Simulated paths.
#[pyclass(module = "pcelab")]
pub struct Simulation {
    samples: Vec<PathSample>,
    dim: usize,
    agents: usize,
}

impl Simulation {
    fn path(&self, i: usize) -> PyResult<&PathSample> {
        self.samples.get(i).ok_or_else(|| {
            PyValueError::new_err(format!(
                "path {i} out of range ({} paths)",
                self.samples.len()
            ))
        })
    }
}

#[pymethods]
impl Simulation {
    fn __len__(&self) -> usize {
        self.samples.len()
    }

    fn times(&self, path: usize) -> PyResult<Vec<f64>> {
        Ok(self.path(path)?.rows.iter().map(|r| r.t).collect())
    }

    fn stages(&self, path: usize) -> PyResult<Vec<usize>> {
        Ok(self.path(path)?.rows.iter().map(|r| r.stage).collect())
    }

    fn factor(&self, path: usize) -> PyResult<Vec<Vec<f64>>> {
        Ok(self
            .path(path)?
            .rows
            .iter()
            .map(|r| vec_out(&r.x))
            .collect())
    }

    fn prices(&self, path: usize) -> PyResult<Vec<Vec<f64>>> {
        Ok(self
            .path(path)?
            .rows
            .iter()
            .map(|r| vec_out(&r.price))
            .collect())
    }

    fn market_price_of_risk(&self, path: usize) -> PyResult<Vec<Vec<f64>>> {
        Ok(self
            .path(path)?
            .rows
            .iter()
            .map(|r| vec_out(&r.mpr))
            .collect())
    }

    /// Positions of `agent`; `None` before the agent's signal arrives.
    fn positions(&self, path: usize, agent: usize) -> PyResult<Vec<Option<Vec<f64>>>> {
        if agent >= self.agents {
            return Err(PyValueError::new_err(format!("agent {agent} out of range")));
        }
        Ok(self
            .path(path)?
            .rows
            .iter()
            .map(|r| r.positions[agent].as_ref().map(vec_out))
            .collect())
    }

    fn max_residual(&self) -> f64 {
        self.samples
            .iter()
            .flat_map(|s| s.rows.iter().map(|r| r.residual))
            .fold(0.0, f64::max)
    }

    /// `(path_id, stage, agent, |jump - pre|, |post - jump|)` per announcement.
    fn double_jumps(&self) -> Vec<(usize, usize, usize, f64, f64)> {
        double_jump_report(&self.samples)
            .into_iter()
            .map(|r| {
                (
                    r.path_id,
                    r.stage,
                    r.agent,
                    (&r.jump - &r.pre).amax(),
                    (&r.post - &r.jump).amax(),
                )
            })
            .collect()
    }

    /// Writes `paths.csv` and `jumps.csv` under `out_dir`.
    fn write_csv(&self, out_dir: &str) -> PyResult<()> {
        write_outputs(&self.samples, self.dim, self.agents, Path::new(out_dir))
            .map_err(|e| BindingError::from(e).into())
    }
}

/// Solves the scenario in `config` (TOML path), or the built-in two-signal market.
#[pyfunction]
#[pyo3(signature = (config = None))]
fn solve(config: Option<&str>) -> PyResult<PySolution> {
    let s = load_scenario(config)?;
    Ok(PySolution {
        inner: solve_pce(&s).map_err(BindingError::from)?,
    })
}

/// Runs a convergence study; returns rows `(spec_id, N, t, metric, value)`.
#[pyfunction]
#[pyo3(signature = (config = None, samples = None, seed = None, threads = None))]
fn limit_study(
    config: Option<&str>,
    samples: Option<usize>,
    seed: Option<u64>,
    threads: Option<usize>,
) -> PyResult<Vec<StudyTuple>> {
    let (spec, mut cfg) = load_limit(config)?;
    if let Some(n) = samples {
        cfg.samples = n;
        cfg.energy_samples = cfg.energy_samples.min(n);
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.threads = threads;
    let rows = run_study(&spec, &cfg).map_err(BindingError::from)?.rows();
    Ok(rows
        .into_iter()
        .map(
            |StudyRow {
                 spec_id,
                 n,
                 t,
                 metric,
                 value,
             }| (spec_id, n, t, metric, value),
        )
        .collect())
}

/// Behaviour at `t = 1` for `lambda(t) = (1 - t)^(-exponent)` on the
/// reference market: `(reveals_factor, Q)`, `None` where inconclusive.
#[pyfunction]
fn classify(exponent: f64) -> PyResult<(Option<bool>, Option<f64>)> {
    Ok(classification(&LimitSpec::power_law(exponent))?)
}

/// Names of the acceptance criteria.
#[pyfunction]
fn criteria() -> Vec<&'static str> {
    acceptance::names()
}

/// Runs one acceptance criterion: `(passed, detail)`.
#[pyfunction]
fn verify(name: &str) -> PyResult<(bool, String)> {
    acceptance::run_one(name, None)
        .map(|r| (r.passed, r.detail))
        .ok_or_else(|| PyValueError::new_err(format!("unknown criterion '{name}'")))
}

#[pymodule]
fn pcelab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySolution>()?;
    m.add_class::<Simulation>()?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(limit_study, m)?)?;
    m.add_function(wrap_pyfunction!(classify, m)?)?;
    m.add_function(wrap_pyfunction!(criteria, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}
