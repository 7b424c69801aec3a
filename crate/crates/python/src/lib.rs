//! Python bindings. Matrices cross the boundary as lists of rows.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use mimrefine::cluster::{self, KmeansConfig};
use mimrefine::data::{self, BlobDatasetConfig, BlobMode};
use mimrefine::encoder::relative_improvement as rel_impr;
use mimrefine::gradcheck::run_suite;
use mimrefine::harness::io;
use mimrefine::harness::{Experiment as RsExperiment, ExperimentConfig, Stage};
use mimrefine::heads::{schedule_weight as rs_schedule_weight, ScheduleKind, ScheduleSpec};
use mimrefine::nna::{nna_loss as rs_nna_loss, ContrastiveBatch};
use mimrefine::numerics::{Matrix, RngStream};
use mimrefine::probe::{self, KnnConfig, LinearProbeConfig, ProbeDataset};
use mimrefine::queue::SupportQueue as RsQueue;
use mimrefine::trainer::layerwise_lr as rs_layerwise_lr;

type Rows = Vec<Vec<f64>>;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: &Rows) -> PyResult<Matrix> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Matrix::from_vec(rows.len(), cols, rows.concat()).map_err(value_err)
}

fn rows(m: &Matrix) -> Rows {
    m.iter_rows().map(<[f64]>::to_vec).collect()
}

/// Mean alignment loss and its gradient with respect to the anchors.
/// `exclude` is a flat row-major N×N mask; the diagonal when omitted.
#[pyfunction]
#[pyo3(signature = (anchors, positives, negatives, temperature, exclude=None))]
fn nna_loss(
    anchors: Rows,
    positives: Rows,
    negatives: Rows,
    temperature: f64,
    exclude: Option<Vec<bool>>,
) -> PyResult<(f64, Rows)> {
    let n = anchors.len();
    let batch = ContrastiveBatch::new(
        matrix(&anchors)?,
        matrix(&positives)?,
        matrix(&negatives)?,
        temperature,
        exclude.unwrap_or_else(|| ContrastiveBatch::diagonal_mask(n)),
    )
    .map_err(value_err)?;
    let out = rs_nna_loss(&batch).map_err(value_err)?;
    Ok((out.loss, rows(&out.grad_anchors)))
}

fn schedule_kind(name: &str) -> PyResult<ScheduleKind> {
    let kind = match name {
        "constant" => ScheduleKind::Constant,
        "uniform_decay" => ScheduleKind::UniformDecay,
        "staggered_decay" => ScheduleKind::StaggeredDecay,
        "staggered_step" => ScheduleKind::StaggeredStep,
        "one_hot" => ScheduleKind::OneHot,
        _ => return Err(PyValueError::new_err(format!("unknown schedule {name:?}"))),
    };
    Ok(kind)
}

#[pyfunction]
fn schedule_weight(kind: &str, head_count: usize, head_index: usize, progress: f64) -> PyResult<f64> {
    let spec = ScheduleSpec { kind: schedule_kind(kind)?, head_count };
    rs_schedule_weight(&spec, head_index, progress).map_err(value_err)
}

#[pyfunction]
fn layerwise_lr(peak: f64, decay: f64, block: usize, depth: usize) -> PyResult<f64> {
    rs_layerwise_lr(peak, decay, block, depth).map_err(value_err)
}

#[pyfunction]
fn relative_improvement(metric_per_block: Vec<f64>) -> PyResult<Vec<f64>> {
    rel_impr(&metric_per_block).map_err(value_err)
}

/// FIFO memory of unit vectors with nearest-neighbor retrieval.
#[pyclass]
struct SupportQueue {
    inner: RsQueue,
    rng: RngStream,
}

#[pymethods]
impl SupportQueue {
    #[new]
    #[pyo3(signature = (capacity, dim, seed=0))]
    fn new(capacity: usize, dim: usize, seed: u64) -> PyResult<Self> {
        Ok(Self { inner: RsQueue::new(capacity, dim).map_err(value_err)?, rng: RngStream::new(seed) })
    }

    #[pyo3(signature = (embeddings, labels=None))]
    fn enqueue(&mut self, embeddings: Rows, labels: Option<Vec<u32>>) -> PyResult<()> {
        self.inner.enqueue_batch(&matrix(&embeddings)?, labels.as_deref()).map_err(value_err)
    }

    /// One of the `k` most similar entries per anchor, chosen at random.
    fn retrieve(&mut self, anchors: Rows, k: usize) -> PyResult<(Rows, Vec<usize>)> {
        let (m, idx) = self.inner.retrieve_nn(&matrix(&anchors)?, k, &mut self.rng).map_err(value_err)?;
        Ok((rows(&m), idx))
    }

    fn top_k(&self, anchor: Vec<f64>, k: usize) -> PyResult<Vec<usize>> {
        self.inner.top_k(&anchor, k).map_err(value_err)
    }

    fn nn_swap_accuracy(&self, anchors: Rows, labels: Vec<u32>) -> PyResult<f64> {
        self.inner.nn_swap_accuracy(&matrix(&anchors)?, &labels).map_err(value_err)
    }

    /// Stored entries, oldest first.
    fn entries(&self) -> (Rows, Vec<Option<u32>>) {
        let (m, labels) = self.inner.snapshot();
        (rows(&m), labels)
    }

    #[getter]
    fn filled(&self) -> usize {
        self.inner.filled()
    }

    fn __len__(&self) -> usize {
        self.inner.filled()
    }
}

/// Synthetic dataset as `(samples, labels)`.
#[pyfunction]
#[pyo3(signature = (n_classes=8, n_per_class=200, noise=0.5, seed=0, image=true))]
fn generate_blobs(n_classes: usize, n_per_class: usize, noise: f64, seed: u64, image: bool) -> PyResult<(Rows, Vec<u32>)> {
    let cfg = BlobDatasetConfig {
        mode: if image { BlobMode::Image } else { BlobMode::Vector },
        n_classes,
        n_per_class,
        noise,
        seed,
        ..Default::default()
    };
    let d = data::generate_blobs(&cfg).map_err(value_err)?;
    Ok((rows(&d.samples), d.labels))
}

fn probe_dataset(train_x: Rows, train_y: Vec<u32>, test_x: Rows, test_y: Vec<u32>) -> PyResult<ProbeDataset> {
    ProbeDataset::new(matrix(&train_x)?, train_y, matrix(&test_x)?, test_y).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (train_x, train_y, test_x, test_y, k=10, temperature=0.07))]
fn knn_probe(train_x: Rows, train_y: Vec<u32>, test_x: Rows, test_y: Vec<u32>, k: usize, temperature: f64) -> PyResult<f64> {
    let ds = probe_dataset(train_x, train_y, test_x, test_y)?;
    probe::knn_probe(&ds, &KnnConfig { k, temperature }).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (train_x, train_y, test_x, test_y, epochs=300, lr=1.0, weight_decay=1e-4))]
fn linear_probe(
    train_x: Rows,
    train_y: Vec<u32>,
    test_x: Rows,
    test_y: Vec<u32>,
    epochs: usize,
    lr: f64,
    weight_decay: f64,
) -> PyResult<f64> {
    let ds = probe_dataset(train_x, train_y, test_x, test_y)?;
    probe::linear_probe(&ds, &LinearProbeConfig { epochs, lr, weight_decay }).map_err(value_err)
}

/// Best-of-restarts mini-batch k-means: `(labels, inertia)`.
#[pyfunction]
#[pyo3(signature = (x, k, restarts=10, iterations=100, batch_size=256, seed=0))]
fn kmeans(x: Rows, k: usize, restarts: usize, iterations: usize, batch_size: usize, seed: u64) -> PyResult<(Vec<usize>, f64)> {
    let cfg = KmeansConfig { k, batch_size, iterations, restarts, seed };
    let c = cluster::minibatch_kmeans(&matrix(&x)?, &cfg).map_err(value_err)?;
    Ok((c.labels, c.inertia))
}

#[pyfunction]
fn cluster_accuracy(pred: Vec<usize>, truth: Vec<usize>) -> PyResult<f64> {
    cluster::cluster_accuracy(&pred, &truth).map_err(value_err)
}

#[pyfunction]
fn nmi(a: Vec<usize>, b: Vec<usize>) -> PyResult<f64> {
    cluster::nmi(&a, &b).map_err(value_err)
}

#[pyfunction]
fn ami(a: Vec<usize>, b: Vec<usize>) -> PyResult<f64> {
    cluster::ami(&a, &b).map_err(value_err)
}

#[pyfunction]
fn ari(a: Vec<usize>, b: Vec<usize>) -> PyResult<f64> {
    cluster::ari(&a, &b).map_err(value_err)
}

#[pyfunction]
fn silhouette(x: Rows, labels: Vec<usize>) -> PyResult<f64> {
    cluster::silhouette(&matrix(&x)?, &labels).map_err(value_err)
}

#[pyfunction]
fn davies_bouldin(x: Rows, labels: Vec<usize>) -> PyResult<f64> {
    cluster::davies_bouldin(&matrix(&x)?, &labels).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (path, x, labels=None))]
fn export_embeddings(path: PathBuf, x: Rows, labels: Option<Vec<i32>>) -> PyResult<()> {
    io::export_embeddings(&path, &matrix(&x)?, labels.as_deref()).map_err(value_err)
}

#[pyfunction]
fn import_embeddings(path: PathBuf) -> PyResult<(Rows, Option<Vec<i32>>)> {
    let (m, labels) = io::import_embeddings(&path).map_err(value_err)?;
    Ok((rows(&m), labels))
}

/// `(name, worst mismatch, passed)` for every finite-difference check.
#[pyfunction]
#[pyo3(signature = (seed=0, instances=5))]
fn gradcheck(py: Python<'_>, seed: u64, instances: usize) -> Vec<(String, f64, bool)> {
    py.detach(|| run_suite(seed, instances))
        .into_iter()
        .map(|r| {
            let passed = r.passed();
            (r.name, r.worst, passed)
        })
        .collect()
}

/// Staged pipeline writing artifacts under `out_dir`. Reports are returned
/// as JSON text.
#[pyclass]
struct Experiment {
    inner: RsExperiment,
}

fn harness_err(e: mimrefine::harness::HarnessError) -> PyErr {
    if e.exit_code() == 2 {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

#[pymethods]
impl Experiment {
    /// `config` is TOML text; omitted keys take the defaults.
    #[new]
    #[pyo3(signature = (out_dir, config=None, seed=None))]
    fn new(out_dir: PathBuf, config: Option<&str>, seed: Option<u64>) -> PyResult<Self> {
        let mut cfg = match config {
            Some(text) => ExperimentConfig::from_toml(text).map_err(PyValueError::new_err)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.out_dir = out_dir.clone();
        Ok(Self { inner: RsExperiment::new(cfg, out_dir).map_err(harness_err)? })
    }

    #[pyo3(signature = (through=None))]
    fn run(&self, py: Python<'_>, through: Option<&str>) -> PyResult<String> {
        let through = through.map(parse_stage).transpose()?;
        let report = py.detach(|| self.inner.run(through)).map_err(harness_err)?;
        Ok(report.to_string())
    }

    fn run_stage(&self, py: Python<'_>, stage: &str) -> PyResult<String> {
        let stage = parse_stage(stage)?;
        let fragment = py.detach(|| self.inner.run_stage(stage)).map_err(harness_err)?;
        Ok(fragment.to_string())
    }

    fn is_complete(&self, stage: &str) -> PyResult<bool> {
        Ok(self.inner.is_complete(parse_stage(stage)?))
    }
}

fn parse_stage(name: &str) -> PyResult<Stage> {
    Stage::parse(name).ok_or_else(|| PyValueError::new_err(format!("unknown stage {name:?}")))
}

#[pymodule]
#[pyo3(name = "mimrefine")]
fn mimrefine_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(nna_loss, m)?)?;
    m.add_function(wrap_pyfunction!(schedule_weight, m)?)?;
    m.add_function(wrap_pyfunction!(layerwise_lr, m)?)?;
    m.add_function(wrap_pyfunction!(relative_improvement, m)?)?;
    m.add_function(wrap_pyfunction!(generate_blobs, m)?)?;
    m.add_function(wrap_pyfunction!(knn_probe, m)?)?;
    m.add_function(wrap_pyfunction!(linear_probe, m)?)?;
    m.add_function(wrap_pyfunction!(kmeans, m)?)?;
    m.add_function(wrap_pyfunction!(cluster_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(nmi, m)?)?;
    m.add_function(wrap_pyfunction!(ami, m)?)?;
    m.add_function(wrap_pyfunction!(ari, m)?)?;
    m.add_function(wrap_pyfunction!(silhouette, m)?)?;
    m.add_function(wrap_pyfunction!(davies_bouldin, m)?)?;
    m.add_function(wrap_pyfunction!(export_embeddings, m)?)?;
    m.add_function(wrap_pyfunction!(import_embeddings, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_class::<SupportQueue>()?;
    m.add_class::<Experiment>()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_round_trip() {
        let r = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]];
        assert_eq!(rows(&matrix(&r).unwrap()), r);
    }

    #[test]
    fn schedule_names() {
        for name in ["constant", "uniform_decay", "staggered_decay", "staggered_step", "one_hot"] {
            assert!(schedule_kind(name).is_ok());
        }
    }
}
