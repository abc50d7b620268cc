//! Python bindings: `import rptm`.

use std::collections::HashMap;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;

use rptm_core::evalrank::{evaluate_embeddings, RerankConfig};
use rptm_core::learn::{forward, EmbeddingModel as CoreModel};
use rptm_core::relational::{build_relational_matrix, load_matrix, save_matrix, DatasetManifest, TauPolicy};
use rptm_core::synth::{generate_dataset, SynthSpec};
use rptm_core::{mining, pipeline, relational, Error};

create_exception!(rptm, RptmError, PyException);

fn err(e: Error) -> PyErr {
    match e {
        Error::Config(msg) => PyValueError::new_err(msg),
        other => RptmError::new_err(other.to_string()),
    }
}

fn policy(name: &str) -> PyResult<TauPolicy> {
    name.parse().map_err(err)
}

fn run_config(json: Option<&str>) -> PyResult<rptm_core::RunConfig> {
    json.map_or_else(|| Ok(rptm_core::RunConfig::default()), |j| rptm_core::RunConfig::from_json(j).map_err(err))
}

/// Default run configuration as pretty JSON.
#[pyfunction]
fn default_config() -> String {
    rptm_core::RunConfig::default().to_json()
}

/// Renders a synthetic dataset; returns the image count.
#[pyfunction]
fn generate_synth(spec_json: &str, out_dir: &str) -> PyResult<usize> {
    let spec = SynthSpec::from_json(spec_json).map_err(err)?;
    Ok(generate_dataset(&spec, out_dir).map_err(err)?.manifest.len())
}

/// Same-identity GMS match counts between images of a manifest.
#[pyclass(module = "rptm")]
struct RelationalMatrix {
    inner: relational::RelationalMatrix,
}

#[pymethods]
impl RelationalMatrix {
    #[staticmethod]
    #[pyo3(signature = (manifest, config_json=None))]
    fn build(py: Python<'_>, manifest: &str, config_json: Option<&str>) -> PyResult<Self> {
        let cfg = run_config(config_json)?;
        let manifest = DatasetManifest::load(manifest).map_err(err)?;
        let inner = py
            .detach(|| build_relational_matrix(&manifest, &cfg.features, &cfg.gms))
            .map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: load_matrix(path).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_matrix(&self.inner, path).map_err(err)
    }

    #[getter]
    fn m(&self) -> usize {
        self.inner.m()
    }

    fn get(&self, i: usize, j: usize) -> PyResult<u32> {
        self.inner.get(i, j).map_err(err)
    }

    fn row(&self, i: usize) -> PyResult<Vec<u32>> {
        Ok(self.inner.row(i).map_err(err)?.to_vec())
    }

    /// Positive index for `anchor`, or None when its row is all zero.
    #[pyo3(signature = (anchor, policy="mean", tau_min=10.0))]
    fn select_positive(&self, anchor: usize, policy: &str, tau_min: f64) -> PyResult<Option<usize>> {
        mining::select_positive(&self.inner, anchor, self::policy(policy)?, tau_min).map_err(err)
    }

    /// `(anchor, positive, count, tau)` for every anchor with a positive.
    #[pyo3(signature = (policy="mean", tau_min=10.0))]
    fn positive_choices(&self, policy: &str, tau_min: f64) -> PyResult<Vec<(usize, usize, u32, f64)>> {
        let c = mining::positive_choices(&self.inner, self::policy(policy)?, tau_min).map_err(err)?;
        Ok(c.into_iter().map(|c| (c.anchor, c.positive, c.count, c.tau)).collect())
    }

    fn __len__(&self) -> usize {
        self.inner.m()
    }
}

/// Threshold for one count row, or None when the row is all zero.
#[pyfunction]
#[pyo3(signature = (row, policy="mean", tau_min=10.0))]
fn tau(row: Vec<u32>, policy: &str, tau_min: f64) -> PyResult<Option<f64>> {
    Ok(relational::tau(&row, self::policy(policy)?, tau_min))
}

/// Trained embedding network.
#[pyclass(module = "rptm")]
struct EmbeddingModel {
    inner: CoreModel,
}

#[pymethods]
impl EmbeddingModel {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: CoreModel::load(path).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    /// `(input_dim, hidden_dim, embedding_dim, classes)`.
    #[getter]
    fn dims(&self) -> (usize, usize, usize, usize) {
        self.inner.dims()
    }

    /// `(embedding, logits)` for one input vector.
    fn forward(&self, x: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        forward(&self.inner, &x).map_err(err)
    }

    /// Embeddings of every manifest image, in manifest order.
    #[pyo3(signature = (manifest, input_size=224))]
    fn embed_manifest(&self, py: Python<'_>, manifest: &str, input_size: usize) -> PyResult<Vec<Vec<f64>>> {
        let manifest = DatasetManifest::load(manifest).map_err(err)?;
        py.detach(|| pipeline::embed_manifest(&self.inner, &manifest, input_size)).map_err(err)
    }
}

/// Trains on a manifest; returns the model and per-epoch loss records.
#[pyfunction]
#[pyo3(signature = (manifest, matrix, config_json=None))]
fn train(
    py: Python<'_>,
    manifest: &str,
    matrix: &RelationalMatrix,
    config_json: Option<&str>,
) -> PyResult<(EmbeddingModel, Vec<HashMap<&'static str, f64>>)> {
    let cfg = run_config(config_json)?;
    let manifest = DatasetManifest::load(manifest).map_err(err)?;
    let out = py
        .detach(|| rptm_core::learn::train(&manifest, &matrix.inner, &cfg.mining, &cfg.train, |_| {}))
        .map_err(err)?;
    let history = out
        .history
        .iter()
        .map(|r| {
            HashMap::from([
                ("epoch", r.epoch as f64),
                ("e_tri", r.report.e_tri),
                ("e_ent", r.report.e_ent),
                ("total", r.report.total),
                ("active_triplets", r.report.active_triplets as f64),
                ("lr", r.lr),
            ])
        })
        .collect();
    Ok((EmbeddingModel { inner: out.model }, history))
}

/// mAP and CMC@1/5/10 for query/gallery embeddings, optionally re-ranked.
#[pyfunction]
#[pyo3(signature = (query, query_ids, gallery, gallery_ids, rerank=false, k1=60, k2=15, eta=0.2))]
#[allow(clippy::too_many_arguments)]
fn evaluate(
    query: Vec<Vec<f64>>,
    query_ids: Vec<String>,
    gallery: Vec<Vec<f64>>,
    gallery_ids: Vec<String>,
    rerank: bool,
    k1: usize,
    k2: usize,
    eta: f64,
) -> PyResult<HashMap<&'static str, f64>> {
    let cfg = RerankConfig { k1, k2, eta };
    let m = evaluate_embeddings(&query, &query_ids, &gallery, &gallery_ids, rerank.then_some(&cfg)).map_err(err)?;
    Ok(HashMap::from([
        ("mAP", m.map),
        ("cmc@1", m.cmc1),
        ("cmc@5", m.cmc5),
        ("cmc@10", m.cmc10),
    ]))
}

/// Average precision of one ranked list of hit flags.
#[pyfunction]
fn average_precision(flags: Vec<bool>) -> f64 {
    rptm_core::evalrank::average_precision(&flags)
}

#[pymodule]
fn rptm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("RptmError", m.py().get_type::<RptmError>())?;
    m.add_class::<RelationalMatrix>()?;
    m.add_class::<EmbeddingModel>()?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synth, m)?)?;
    m.add_function(wrap_pyfunction!(tau, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    Ok(())
}
