//! Python bindings. Matrices cross the boundary as lists of rows.

use std::path::PathBuf;

use assocda::data::{self, DomainDataset};
use assocda::harness::{self, ExperimentOutcome, Regime};
use assocda::network::{self, Activation, MlpParams, MlpSpec};
use assocda::{AssocConfig, EmbeddingBatch, Estimator, LabelVector, Matrix, MmdConfig};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: assocda::Error) -> PyErr {
    match e {
        assocda::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(to_py)
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

#[pyclass(frozen, get_all)]
struct AssocLoss {
    total: f64,
    walker: f64,
    visit: f64,
    grad_source: Vec<Vec<f64>>,
    grad_target: Vec<Vec<f64>>,
}

/// Walker and visit losses with gradients for source embeddings `source`,
/// their labels, and target embeddings `target`.
#[pyfunction]
#[pyo3(signature = (source, labels, target, num_classes=None, walker_weight=1.0, visit_weight=0.5))]
fn assoc_loss(
    source: Vec<Vec<f64>>,
    labels: Vec<usize>,
    target: Vec<Vec<f64>>,
    num_classes: Option<usize>,
    walker_weight: f64,
    visit_weight: f64,
) -> PyResult<AssocLoss> {
    let classes = num_classes.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
    let a = EmbeddingBatch::new(matrix(source)?).map_err(to_py)?;
    let b = EmbeddingBatch::new(matrix(target)?).map_err(to_py)?;
    let labels = LabelVector::new(labels, classes).map_err(to_py)?;
    let cfg = AssocConfig {
        walker_weight,
        visit_weight,
        ..AssocConfig::default()
    };
    let r = assocda::assoc_forward_backward(&a, &b, &labels, &cfg).map_err(to_py)?;
    Ok(AssocLoss {
        total: r.total,
        walker: r.walker,
        visit: r.visit,
        grad_source: r.grad_source.to_rows(),
        grad_target: r.grad_target.to_rows(),
    })
}

/// Squared MMD between two samples. Without `bandwidth` the kernel is the
/// median-heuristic mixture.
#[pyfunction]
#[pyo3(signature = (x, y, bandwidth=None, estimator="biased"))]
fn mmd2(
    x: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    bandwidth: Option<f64>,
    estimator: &str,
) -> PyResult<f64> {
    let mut cfg = bandwidth.map_or_else(MmdConfig::default, MmdConfig::single);
    cfg.estimator = estimator.parse::<Estimator>().map_err(to_py)?;
    assocda::mmd2(&matrix(x)?, &matrix(y)?, &cfg, false)
        .map(|r| r.mmd_squared)
        .map_err(to_py)
}

/// `(da - so) / (to - so)`, or `None` when source-only and target-only tie.
#[pyfunction]
fn coverage(so: f64, to: f64, da: f64) -> Option<f64> {
    harness::coverage(so, to, da)
}

/// Maximum relative gradient error per component.
#[pyfunction]
#[pyo3(signature = (seed=0, instances=20))]
fn gradcheck(seed: u64, instances: usize) -> PyResult<Vec<(String, f64)>> {
    let reports =
        assocda::gradcheck::check_all(seed, instances, Default::default()).map_err(to_py)?;
    Ok(reports
        .into_iter()
        .map(|r| (r.component.as_str().to_string(), r.max_relative_error))
        .collect())
}

#[pyclass]
struct Config {
    inner: assocda::ExperimentConfig,
}

#[pymethods]
impl Config {
    #[new]
    #[pyo3(signature = (text=""))]
    fn new(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: assocda::ExperimentConfig::parse(text).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: assocda::ExperimentConfig::load(&path).map_err(to_py)?,
        })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(to_py)
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(to_py)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn regimes(&self) -> Vec<&'static str> {
        self.inner.regimes.iter().map(|r| r.as_str()).collect()
    }

    /// The four splits of the configured domain pair, each as
    /// `(inputs, labels)`.
    fn generate<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let pair = data::gen_pair(&self.inner.pair_spec()).map_err(to_py)?;
        let out = PyDict::new(py);
        for (name, ds) in [
            ("source", &pair.source),
            ("target", &pair.target),
            ("source_test", &pair.source_test),
            ("target_test", &pair.target_test),
        ] {
            let labels = ds.eval_labels().map(|l| l.labels().to_vec());
            out.set_item(name, (ds.inputs().to_rows(), labels))?;
        }
        Ok(out)
    }
}

#[pyclass(frozen)]
struct Network {
    params: MlpParams,
}

#[pymethods]
impl Network {
    /// Freshly initialized network.
    #[new]
    #[pyo3(signature = (input_dim, hidden_dims, embedding_dim, num_classes, activation="relu", seed=0))]
    fn new(
        input_dim: usize,
        hidden_dims: Vec<usize>,
        embedding_dim: usize,
        num_classes: usize,
        activation: &str,
        seed: u64,
    ) -> PyResult<Self> {
        let spec = MlpSpec {
            input_dim,
            hidden_dims,
            embedding_dim,
            num_classes,
            activation: activation.parse::<Activation>().map_err(to_py)?,
            seed,
        };
        Ok(Self {
            params: network::init_params(&spec).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            params: network::load_checkpoint(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        network::save_checkpoint(&self.params, &path).map_err(to_py)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.params.num_params()
    }

    fn embed(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let trace = network::forward(&self.params, &matrix(x)?).map_err(to_py)?;
        Ok(trace.embeddings.into_matrix().to_rows())
    }

    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        network::predict(&self.params, &matrix(x)?).map_err(to_py)
    }
}

#[pyclass(frozen)]
struct Experiment {
    outcome: ExperimentOutcome,
    source_test: DomainDataset,
    target_test: DomainDataset,
}

#[pymethods]
impl Experiment {
    /// Errors, coverage and the embedding MMD table as plain Python objects.
    fn report<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let text = serde_json::to_string(&self.outcome.report)
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        json_to_py(py, &text)
    }

    /// Trained network for `regime`.
    fn network(&self, regime: &str) -> PyResult<Network> {
        let r: Regime = regime.parse().map_err(to_py)?;
        self.outcome
            .models
            .get(&r)
            .map(|p| Network { params: p.clone() })
            .ok_or_else(|| PyValueError::new_err(format!("regime {regime} was not trained")))
    }

    /// Per-step loss trace CSV for `regime`.
    fn trace_csv(&self, regime: &str) -> PyResult<String> {
        let r: Regime = regime.parse().map_err(to_py)?;
        self.outcome
            .run(r)
            .map(|run| harness::trace_csv(&run.loss_trace))
            .ok_or_else(|| PyValueError::new_err(format!("regime {regime} was not trained")))
    }

    /// Embedding CSV of both test splits for `regime`.
    fn embeddings_csv(&self, regime: &str) -> PyResult<String> {
        let net = self.network(regime)?;
        harness::embeddings_csv(&net.params, &[&self.source_test, &self.target_test]).map_err(to_py)
    }
}

/// Trains every regime of `config`. Releases the GIL while training.
#[pyfunction]
fn run_experiment(py: Python<'_>, config: &Config) -> PyResult<Experiment> {
    let cfg = config.inner.clone();
    cfg.validate().map_err(to_py)?;
    py.detach(move || {
        let pair = data::gen_pair(&cfg.pair_spec())?;
        let outcome = harness::run_experiment(
            &pair,
            &cfg.mlp_spec(),
            &cfg.train_config(),
            &cfg.regimes,
            &cfg.mmd,
        )?;
        Ok(Experiment {
            outcome,
            source_test: pair.source_test,
            target_test: pair.target_test,
        })
    })
    .map_err(to_py)
}

#[pymodule]
fn assocda_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(assoc_loss, m)?)?;
    m.add_function(wrap_pyfunction!(mmd2, m)?)?;
    m.add_function(wrap_pyfunction!(coverage, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_class::<AssocLoss>()?;
    m.add_class::<Config>()?;
    m.add_class::<Network>()?;
    m.add_class::<Experiment>()?;
    Ok(())
}
