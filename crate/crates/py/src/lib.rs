//! Python bindings for the loss tomography core.
//!
//! Loss models are passed as a default rate plus an optional `{link: theta}`
//! dict of overrides. Estimates come back as `{segment: theta}` dicts, where a
//! segment is named by its first physical link and `None` marks a rate that
//! could not be identified.

use std::collections::BTreeMap;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use losstomo::harness::{self, ExperimentConfig};
use losstomo::likelihood::{self, Likelihood, OracleConfig};
use losstomo::path::{PathEstimatorConfig, RootStrategy};
use losstomo::pipeline::run_pipeline;
use losstomo::sim::equal_counts;
use losstomo::{fixtures, LinkId, LossModel, StatTable};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(name = "Topology", module = "losstomo_py")]
struct PyTopology {
    inner: losstomo::Topology,
}

#[pymethods]
impl PyTopology {
    /// Parse a topology from its JSON form.
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner = losstomo::Topology::from_json(text).map_err(err)?;
        Ok(Self { inner })
    }

    /// One of the built-in fixtures: `F1`, `F2` or `F3`.
    #[staticmethod]
    fn builtin(name: &str) -> PyResult<Self> {
        fixtures::builtin(name)
            .map(|inner| Self { inner })
            .ok_or_else(|| PyValueError::new_err(format!("unknown topology {name}")))
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    /// Every broken rule, as text. Empty when the topology is usable.
    fn validate(&self) -> Vec<String> {
        self.inner.validate().iter().map(ToString::to_string).collect()
    }

    #[getter]
    fn links(&self) -> Vec<(LinkId, u32, u32)> {
        self.inner.links().map(|l| (l.id, l.parent, l.child)).collect()
    }

    #[getter]
    fn sources(&self) -> Vec<(u32, u32)> {
        self.inner.sources().map(|s| (s.id, s.root)).collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Topology(nodes={}, links={}, sources={})",
            self.inner.nodes().count(),
            self.inner.num_links(),
            self.inner.sources().count()
        )
    }
}

fn loss_model(
    topology: &losstomo::Topology,
    loss: f64,
    overrides: Option<BTreeMap<LinkId, f64>>,
) -> PyResult<LossModel> {
    LossModel::with_overrides(topology, loss, &overrides.unwrap_or_default()).map_err(err)
}

/// Sufficient statistics for one batch of probes.
#[pyclass(name = "Stats", module = "losstomo_py")]
struct PyStats {
    inner: StatTable,
}

#[pymethods]
impl PyStats {
    /// Simulate `probes` probes from every source and reduce them.
    #[staticmethod]
    #[pyo3(signature = (topology, probes, seed, loss = 0.01, overrides = None))]
    fn simulate(
        topology: &PyTopology,
        probes: u64,
        seed: u64,
        loss: f64,
        overrides: Option<BTreeMap<LinkId, f64>>,
    ) -> PyResult<Self> {
        let t = &topology.inner;
        let model = loss_model(t, loss, overrides)?;
        let (obs, _) = losstomo::simulate(t, &model, &equal_counts(t, probes), seed).map_err(err)?;
        let inner = losstomo::build_stats(t, &obs).map_err(err)?;
        Ok(Self { inner })
    }

    /// Noise-free statistics: every count at its expected value.
    #[staticmethod]
    #[pyo3(signature = (topology, probes, loss = 0.01, overrides = None))]
    fn expected(
        topology: &PyTopology,
        probes: f64,
        loss: f64,
        overrides: Option<BTreeMap<LinkId, f64>>,
    ) -> PyResult<Self> {
        let t = &topology.inner;
        let model = loss_model(t, loss, overrides)?;
        let counts = t.source_ids().map(|s| (s, probes)).collect();
        let inner = StatTable::expected(t, &model, &counts).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_csv(topology: &PyTopology, text: &str) -> PyResult<Self> {
        let inner = StatTable::read_csv(&topology.inner, text.as_bytes()).map_err(err)?;
        Ok(Self { inner })
    }

    fn to_csv(&self, topology: &PyTopology) -> PyResult<String> {
        let mut buf = Vec::new();
        self.inner.write_csv(&topology.inner, &mut buf).map_err(err)?;
        String::from_utf8(buf).map_err(err)
    }

    /// Probes sent by `source`.
    fn probes(&self, source: u32) -> PyResult<f64> {
        self.inner.probes(source).map_err(err)
    }
}

/// Estimate segment loss rates with the path estimator or the decomposition
/// pipeline (`estimator="decompose"`).
#[pyfunction]
#[pyo3(signature = (topology, stats, estimator = "path", binary_merge = false))]
fn estimate(
    topology: &PyTopology,
    stats: &PyStats,
    estimator: &str,
    binary_merge: bool,
) -> PyResult<BTreeMap<LinkId, Option<f64>>> {
    let cfg = PathEstimatorConfig {
        strategy: if binary_merge {
            RootStrategy::BinaryMerge
        } else {
            RootStrategy::Polynomial
        },
        ..Default::default()
    };
    let report = match estimator {
        "path" => losstomo::estimate_all_paths(&topology.inner, &stats.inner, &cfg).map_err(err)?,
        "decompose" => {
            run_pipeline(&topology.inner, &stats.inner, &cfg)
                .map_err(err)?
                .estimate
        }
        other => return Err(PyValueError::new_err(format!("unknown estimator {other}"))),
    };
    Ok(report.links.iter().map(|(&id, e)| (id, e.theta())).collect())
}

/// Numerically maximize the likelihood. Returns `(theta, loglik)`.
#[pyfunction]
#[pyo3(signature = (topology, stats, max_links = 16))]
fn oracle(
    topology: &PyTopology,
    stats: &PyStats,
    max_links: usize,
) -> PyResult<(BTreeMap<LinkId, f64>, f64)> {
    let cfg = OracleConfig {
        max_links,
        ..Default::default()
    };
    let r = likelihood::maximize(&topology.inner, &stats.inner, None, &cfg).map_err(err)?;
    Ok((r.theta, r.loglik))
}

/// Log-likelihood at a `{segment: theta}` point.
#[pyfunction]
fn log_likelihood(topology: &PyTopology, stats: &PyStats, theta: BTreeMap<LinkId, f64>) -> PyResult<f64> {
    let lik = Likelihood::new(&topology.inner, &stats.inner).map_err(err)?;
    let x = lik.vector(&theta).map_err(err)?;
    lik.loglik(&x).map_err(err)
}

/// Run a replicated experiment from its JSON config and return the median
/// relative errors as `(group_size, link, median)` rows.
#[pyfunction]
fn run_experiment(py: Python<'_>, config: &str) -> PyResult<Vec<(u64, LinkId, Option<f64>)>> {
    let config = ExperimentConfig::from_json(config).map_err(err)?;
    let report = py.detach(|| harness::run_experiment(&config)).map_err(err)?;
    Ok(report
        .medians
        .iter()
        .map(|m| (m.group_size, m.link, m.median))
        .collect())
}

#[pymodule]
fn losstomo_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTopology>()?;
    m.add_class::<PyStats>()?;
    m.add_function(wrap_pyfunction!(estimate, m)?)?;
    m.add_function(wrap_pyfunction!(oracle, m)?)?;
    m.add_function(wrap_pyfunction!(log_likelihood, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
