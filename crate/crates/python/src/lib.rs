//! Python bindings: configs, scoring, budgets, schedules, and simulation.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIndexError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyAny;

use heatkv_core::budget::{self, BudgetPlan};
use heatkv_core::commands::{self, PlanOptions};
use heatkv_core::formats::{self, ScheduleFile, ScoresFile, TraceLevel};
use heatkv_core::heatmap::GridSet;
use heatkv_core::importance::{self, ImportanceTable, ScaleOrders};
use heatkv_core::scheduler::{Accounting, Mode, Policy, ORACLE_CANDIDATE_LIMIT};
use heatkv_core::trace::{self, Archetype};
use heatkv_core::{Error, HeadId, ModelShape, ScaleSchedule};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Index(_) => PyIndexError::new_err(e.to_string()),
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::Schedule(_) | Error::Consistency(_) | Error::OracleGuard { .. } => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait OrPyErr<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPyErr<T> for Result<T, Error> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn json_loads<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

fn from_json<T: serde::de::DeserializeOwned>(text: &str, what: &str) -> PyResult<T> {
    serde_json::from_str(text).map_err(|e| PyValueError::new_err(format!("{what}: {e}")))
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().py()
}

/// Scale layout plus model shape.
#[pyclass(module = "heatkv", frozen)]
#[derive(Clone)]
struct Config {
    inner: heatkv_core::Config,
}

#[pymethods]
impl Config {
    #[new]
    #[pyo3(signature = (resolutions, sink_count, layers, heads, head_dim=128, bytes_per_element=2, prompt_tokens=0))]
    fn new(
        resolutions: Vec<(u32, u32)>,
        sink_count: usize,
        layers: usize,
        heads: usize,
        head_dim: usize,
        bytes_per_element: usize,
        prompt_tokens: u64,
    ) -> PyResult<Self> {
        let mut schedule = ScaleSchedule::new(resolutions, sink_count);
        schedule.prompt_tokens = prompt_tokens;
        let shape = ModelShape {
            head_dim,
            bytes_per_element,
            ..ModelShape::new(layers, heads)
        };
        let inner = heatkv_core::Config::new(schedule, shape);
        inner.validate().py()?;
        Ok(Self { inner })
    }

    /// A built-in config: `infinity` or `toy`.
    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        commands::preset(name)
            .map(|inner| Self { inner })
            .ok_or_else(|| PyValueError::new_err(format!("unknown preset `{name}`")))
    }

    /// Square scales with sides `1..=scales`.
    #[staticmethod]
    fn quadratic_ramp(scales: u32, sink_count: usize, layers: usize, heads: usize) -> PyResult<Self> {
        let inner = heatkv_core::Config::new(
            ScaleSchedule::quadratic_ramp(scales, sink_count),
            ModelShape::new(layers, heads),
        );
        inner.validate().py()?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: heatkv_core::Config = from_json(text, "config")?;
        inner.validate().py()?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        formats::to_json_string(&self.inner).py()
    }

    fn with_sinks(&self, sink_count: usize) -> PyResult<Self> {
        let inner = commands::with_sinks(self.inner.clone(), Some(sink_count));
        inner.validate().py()?;
        Ok(Self { inner })
    }

    #[getter]
    fn num_scales(&self) -> usize {
        self.inner.schedule.num_scales()
    }

    #[getter]
    fn sink_count(&self) -> usize {
        self.inner.schedule.sink_count
    }

    #[getter]
    fn layers(&self) -> usize {
        self.inner.shape.layers
    }

    #[getter]
    fn heads(&self) -> usize {
        self.inner.shape.heads_per_layer
    }

    /// `[t_1, …, t_K]`.
    fn token_counts(&self) -> PyResult<Vec<u64>> {
        Ok(self.inner.validate().py()?.tokens().to_vec())
    }

    /// `[c_1, …, c_K]`.
    fn cumulative_tokens(&self) -> PyResult<Vec<u64>> {
        let g = self.inner.validate().py()?;
        Ok((1..=g.num_scales()).map(|k| g.c(k)).collect())
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(K={}, s={}, L={}, H={})",
            self.inner.schedule.num_scales(),
            self.inner.schedule.sink_count,
            self.inner.shape.layers,
            self.inner.shape.heads_per_layer
        )
    }
}

/// Head scores and pruning orders.
#[pyclass(module = "heatkv", frozen)]
struct Scores {
    inner: ScoresFile,
}

fn head_pairs(heads: &[HeadId]) -> Vec<(usize, usize)> {
    heads.iter().map(|h| (h.layer, h.head)).collect()
}

#[pymethods]
impl Scores {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: ScoresFile = from_json(text, "scores")?;
        inner.geometry().py()?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        formats::to_json_string(&self.inner).py()
    }

    #[getter]
    fn config(&self) -> Config {
        Config {
            inner: self.inner.config.clone(),
        }
    }

    #[getter]
    fn calibration_samples(&self) -> usize {
        self.inner.calibration_samples
    }

    /// CAS as an L×H nested list.
    #[getter]
    fn cas(&self) -> Vec<Vec<f64>> {
        self.inner.cas.clone()
    }

    fn s_cas(&self, layer: usize, head: usize, k: usize) -> PyResult<f64> {
        self.inner.table().s_cas_at(HeadId::new(layer, head), k).py()
    }

    #[getter]
    fn binary_order(&self) -> Vec<(usize, usize)> {
        head_pairs(&self.inner.binary_order)
    }

    #[getter]
    fn scale_orders(&self) -> BTreeMap<usize, Vec<(usize, usize)>> {
        self.inner
            .scale_orders
            .iter()
            .map(|(k, v)| (*k, head_pairs(v)))
            .collect()
    }
}

/// A planned schedule with its budget header.
#[pyclass(module = "heatkv", frozen)]
struct Schedule {
    inner: ScheduleFile,
}

fn items(set: impl IntoIterator<Item = heatkv_core::PruneItem>) -> Vec<Vec<usize>> {
    set.into_iter()
        .map(|item| match item {
            heatkv_core::PruneItem::Head(h) => vec![h.layer, h.head],
            heatkv_core::PruneItem::HeadScale { source_scale, head } => {
                vec![source_scale, head.layer, head.head]
            }
        })
        .collect()
}

#[pymethods]
impl Schedule {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: ScheduleFile = from_json(text, "schedule")?;
        inner.load().py()?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        formats::to_json_string(&self.inner).py()
    }

    #[getter]
    fn config(&self) -> Config {
        Config {
            inner: self.inner.config.clone(),
        }
    }

    #[getter]
    fn mode(&self) -> &'static str {
        self.inner.mode.name()
    }

    #[getter]
    fn accounting(&self) -> &'static str {
        self.inner.accounting.name()
    }

    #[getter]
    fn token_cap(&self) -> u64 {
        self.inner.budget.token_cap
    }

    #[getter]
    fn prune_counts(&self) -> Vec<usize> {
        self.inner.budget.prune_counts.clone()
    }

    /// `G_k` as item lists (`[layer, head]` or `[source, layer, head]`).
    fn target(&self, k: usize) -> PyResult<Vec<Vec<usize>>> {
        let plan = self.inner.plan();
        let step = plan.step(k).ok_or_else(|| PyIndexError::new_err(format!("no scale {k}")))?;
        Ok(items(step.target.iter().copied()))
    }

    /// `E_k`.
    fn early(&self, k: usize) -> PyResult<Vec<Vec<usize>>> {
        let plan = self.inner.plan();
        let step = plan.step(k).ok_or_else(|| PyIndexError::new_err(format!("no scale {k}")))?;
        Ok(items(step.early.iter().copied()))
    }

    fn total_early(&self) -> usize {
        self.inner.plan().total_early()
    }

    /// Simulation report as a dict.
    fn simulate<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let report = commands::simulate(&self.inner).py()?;
        json_loads(py, &formats::report_json(&report).py()?)
    }

    fn simulate_csv(&self) -> PyResult<String> {
        Ok(formats::report_csv(&commands::simulate(&self.inner).py()?))
    }

    /// Oracle and simulator verification as a dict.
    #[pyo3(signature = (max_oracle_candidates=ORACLE_CANDIDATE_LIMIT))]
    fn verify<'py>(&self, py: Python<'py>, max_oracle_candidates: usize) -> PyResult<Bound<'py, PyAny>> {
        let report = commands::verify(&self.inner, max_oracle_candidates).py()?;
        json_loads(py, &formats::to_json_string(&report).py()?)
    }

    /// L×H grid of cell codes for scale `k`.
    #[pyo3(signature = (k, set="combined", source=None))]
    fn heatmap(&self, k: usize, set: &str, source: Option<usize>) -> PyResult<Vec<Vec<u32>>> {
        let (g, _, plan) = self.inner.load().py()?;
        let grid = heatkv_core::heatmap::heatmap_grid(&plan, &g, k, parse::<GridSet>(set)?, source).py()?;
        // u8 rows would convert to bytes
        Ok(grid.into_iter().map(|row| row.into_iter().map(u32::from).collect()).collect())
    }
}

/// Writes a synthetic trace directory.
#[pyfunction]
#[pyo3(signature = (config, pattern, out_dir, seed=0, samples=1, level="raw"))]
fn synth(config: &Config, pattern: &str, out_dir: PathBuf, seed: u64, samples: usize, level: &str) -> PyResult<()> {
    let level = match level {
        "raw" => TraceLevel::Raw,
        "beta" => TraceLevel::Beta,
        other => return Err(PyValueError::new_err(format!("unknown level `{other}`"))),
    };
    commands::synth(&config.inner, parse::<Archetype>(pattern)?, seed, samples, level, &out_dir).py()?;
    Ok(())
}

/// Flat `L·H·K·K` β tensor of one synthetic sample.
#[pyfunction]
#[pyo3(signature = (config, pattern, seed=0))]
fn synth_beta(config: &Config, pattern: &str, seed: u64) -> PyResult<Vec<f64>> {
    let g = config.inner.validate().py()?;
    let sample = trace::synth_trace(&g, parse::<Archetype>(pattern)?, seed).py()?;
    Ok(trace::aggregate_beta(&sample, &g).py()?.values().to_vec())
}

/// Element-wise mean of flat β tensors.
#[pyfunction]
fn mean_beta(config: &Config, samples: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    let g = config.inner.validate().py()?;
    let tensors = samples
        .into_iter()
        .map(|v| trace::BetaTensor::from_values(&g, v, trace::INPUT_ROW_TOLERANCE))
        .collect::<Result<Vec<_>, _>>()
        .py()?;
    Ok(trace::mean_beta(&tensors).py()?.values().to_vec())
}

/// Scores a flat β tensor directly.
#[pyfunction]
fn score_beta(config: &Config, beta: Vec<f64>) -> PyResult<Scores> {
    let g = config.inner.validate().py()?;
    let tensor = trace::BetaTensor::from_values(&g, beta, trace::INPUT_ROW_TOLERANCE).py()?;
    let table = ImportanceTable::from_beta(&tensor, &g).py()?;
    Ok(Scores {
        inner: ScoresFile::new(&g, 1, table),
    })
}

/// Averages and scores a trace directory.
#[pyfunction]
#[pyo3(signature = (traces_dir, config=None))]
fn calibrate(traces_dir: PathBuf, config: Option<&Config>) -> PyResult<Scores> {
    Ok(Scores {
        inner: commands::calibrate(&traces_dir, config.map(|c| &c.inner)).py()?,
    })
}

#[pyfunction]
fn max_tokens(config: &Config, fraction: f64) -> PyResult<u64> {
    budget::max_tokens(fraction, &config.inner.validate().py()?).py()
}

#[pyfunction]
fn heads_to_prune(config: &Config, fraction: f64, k: usize) -> PyResult<usize> {
    budget::heads_to_prune(fraction, &config.inner.validate().py()?, k).py()
}

#[pyfunction]
fn min_feasible_fraction(config: &Config) -> PyResult<f64> {
    Ok(budget::min_feasible_fraction(&config.inner.validate().py()?))
}

/// `[N_1, …, N_{K-1}]`.
#[pyfunction]
fn prune_counts(config: &Config, fraction: f64) -> PyResult<Vec<usize>> {
    Ok(BudgetPlan::new(fraction, &config.inner.validate().py()?).py()?.prune_counts)
}

#[pyfunction]
#[pyo3(signature = (scores, fraction, mode="binary", accounting="paper", policy="greedy"))]
fn plan(scores: &Scores, fraction: f64, mode: &str, accounting: &str, policy: &str) -> PyResult<Schedule> {
    let options = PlanOptions {
        mode: parse::<Mode>(mode)?,
        accounting: parse::<Accounting>(accounting)?,
        policy: parse::<Policy>(policy)?,
    };
    Ok(Schedule {
        inner: commands::plan(&scores.inner, None, fraction, options).py()?,
    })
}

/// Mean per-head rank standard deviation across runs, per source scale.
/// Each run maps a source scale to an ordered list of `(layer, head)`.
#[pyfunction]
fn rank_dispersion(runs: Vec<BTreeMap<usize, Vec<(usize, usize)>>>) -> PyResult<BTreeMap<usize, f64>> {
    let runs: Vec<ScaleOrders> = runs
        .into_iter()
        .map(|run| {
            run.into_iter()
                .map(|(k, heads)| (k, heads.into_iter().map(|(l, h)| HeadId::new(l, h)).collect()))
                .collect()
        })
        .collect();
    importance::rank_dispersion(&runs).py()
}

#[pymodule]
fn heatkv(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", formats::TOOL_VERSION)?;
    m.add_class::<Config>()?;
    m.add_class::<Scores>()?;
    m.add_class::<Schedule>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(synth_beta, m)?)?;
    m.add_function(wrap_pyfunction!(mean_beta, m)?)?;
    m.add_function(wrap_pyfunction!(score_beta, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(max_tokens, m)?)?;
    m.add_function(wrap_pyfunction!(heads_to_prune, m)?)?;
    m.add_function(wrap_pyfunction!(min_feasible_fraction, m)?)?;
    m.add_function(wrap_pyfunction!(prune_counts, m)?)?;
    m.add_function(wrap_pyfunction!(plan, m)?)?;
    m.add_function(wrap_pyfunction!(rank_dispersion, m)?)?;
    Ok(())
}
