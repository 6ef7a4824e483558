//! Python bindings. Matrices cross the boundary as lists of rows.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use epcontrast_core::bench::{self, BenchConfig, BenchMode};
use epcontrast_core::encoder::{self, MlpParams, INPUT_DIM};
use epcontrast_core::losses::{self, LossConfig as CoreLossConfig, LossKind, Reduction};
use epcontrast_core::pointcloud::{self, AugmentParams};
use epcontrast_core::superpoint::{self, KMeansConfig};
use epcontrast_core::trainer::{self, ProbeConfig, SyntheticSceneConfig, TrainConfig};
use epcontrast_core::{verify, Error, Matrix, RngStream, SegmentAssignment};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

type Rows = Vec<Vec<f64>>;
type HistoryRows = Vec<(usize, usize, f64, f64)>;

fn to_matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(py_err)
}

fn kind(name: &str) -> PyResult<LossKind> {
    name.parse().map_err(py_err)
}

fn segments(ids: Option<Vec<usize>>) -> PyResult<Option<SegmentAssignment>> {
    ids.map(|ids| {
        let m = ids.iter().max().map_or(0, |m| m + 1);
        SegmentAssignment::new(ids, m).map_err(py_err)
    })
    .transpose()
}

#[pyclass(name = "PointCloud", module = "epcontrast", from_py_object)]
#[derive(Clone)]
struct PyPointCloud {
    inner: pointcloud::PointCloud,
}

#[pymethods]
impl PyPointCloud {
    #[new]
    #[pyo3(signature = (positions, colors, labels=None))]
    fn new(positions: Vec<Vec<f64>>, colors: Vec<Vec<f64>>, labels: Option<Vec<u32>>) -> PyResult<Self> {
        let inner = pointcloud::PointCloud::new(to_matrix(positions)?, to_matrix(colors)?, labels)
            .map_err(py_err)?;
        Ok(Self { inner })
    }

    /// Reads `.epcc` binary or whitespace-separated text by extension.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let inner = if path.ends_with(".epcc") {
            pointcloud::load_binary(path)
        } else {
            pointcloud::load_ascii(path)
        }
        .map_err(py_err)?;
        Ok(Self { inner })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        if path.ends_with(".epcc") {
            pointcloud::save_binary(&self.inner, path)
        } else {
            pointcloud::save_ascii(&self.inner, path)
        }
        .map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "PointCloud(n={}, labeled={})",
            self.inner.len(),
            self.inner.labels().is_some()
        )
    }

    #[getter]
    fn positions(&self) -> Vec<Vec<f64>> {
        self.inner.positions().to_rows()
    }

    #[getter]
    fn colors(&self) -> Vec<Vec<f64>> {
        self.inner.colors().to_rows()
    }

    #[getter]
    fn labels(&self) -> Option<Vec<u32>> {
        self.inner.labels().map(<[u32]>::to_vec)
    }

    /// Two independently augmented views with default augmentation ranges.
    #[pyo3(signature = (seed, jitter_sigma=0.01))]
    fn view_pair(&self, seed: u64, jitter_sigma: f64) -> PyResult<(Self, Self)> {
        let params = AugmentParams {
            jitter_sigma,
            seed,
            ..AugmentParams::default()
        };
        params.validate().map_err(py_err)?;
        let pair = pointcloud::make_view_pair(&self.inner, &params, seed);
        Ok((Self { inner: pair.view1 }, Self { inner: pair.view2 }))
    }
}

#[pyclass(name = "LossConfig", module = "epcontrast", from_py_object)]
#[derive(Clone)]
struct PyLossConfig {
    inner: CoreLossConfig,
}

#[pymethods]
impl PyLossConfig {
    #[new]
    #[pyo3(signature = (
        tau=1.0, lambda_=0.1, normalize_rows=true, normalize_channels=true,
        include_positive=false, reduction="mean", neg_samples=None, symmetric_ag=false
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        tau: f64,
        lambda_: f64,
        normalize_rows: bool,
        normalize_channels: bool,
        include_positive: bool,
        reduction: &str,
        neg_samples: Option<usize>,
        symmetric_ag: bool,
    ) -> PyResult<Self> {
        let inner = CoreLossConfig {
            tau,
            lambda: lambda_,
            normalize_rows,
            normalize_channels,
            include_positive_in_denominator: include_positive,
            reduction: reduction.parse::<Reduction>().map_err(py_err)?,
            neg_sample_count: neg_samples,
            symmetric_ag,
        };
        inner.validate().map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn tau(&self) -> f64 {
        self.inner.tau
    }

    #[getter]
    fn lambda_(&self) -> f64 {
        self.inner.lambda
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

fn config_or_default(config: Option<PyLossConfig>) -> CoreLossConfig {
    config.map(|c| c.inner).unwrap_or_default()
}

/// `(value, grad_f1, grad_f2)` of the loss `kind` in {pc, ag, cc, ep}.
#[pyfunction]
#[pyo3(signature = (kind_name, f1, f2, segment_ids=None, config=None, seed=0))]
fn loss(
    kind_name: &str,
    f1: Vec<Vec<f64>>,
    f2: Vec<Vec<f64>>,
    segment_ids: Option<Vec<usize>>,
    config: Option<PyLossConfig>,
    seed: u64,
) -> PyResult<(f64, Rows, Rows)> {
    let seg = segments(segment_ids)?;
    let out = losses::evaluate(
        kind(kind_name)?,
        &to_matrix(f1)?,
        &to_matrix(f2)?,
        seg.as_ref(),
        &config_or_default(config),
        &mut RngStream::new(seed),
    )
    .map_err(py_err)?;
    Ok((out.value, out.grad_f1.to_rows(), out.grad_f2.to_rows()))
}

/// Explicit-loop reference value of the same loss.
#[pyfunction]
#[pyo3(signature = (kind_name, f1, f2, segment_ids=None, config=None))]
fn brute_force_loss(
    kind_name: &str,
    f1: Vec<Vec<f64>>,
    f2: Vec<Vec<f64>>,
    segment_ids: Option<Vec<usize>>,
    config: Option<PyLossConfig>,
) -> PyResult<f64> {
    let seg = segments(segment_ids)?;
    losses::brute_force_loss(
        kind(kind_name)?,
        &to_matrix(f1)?,
        &to_matrix(f2)?,
        seg.as_ref(),
        &config_or_default(config),
    )
    .map_err(py_err)
}

/// `(positives, negatives)`.
#[pyfunction]
fn count_pairs(kind_name: &str, n: usize, m: usize, c: usize) -> PyResult<(u64, u64)> {
    let p = losses::count_pairs(kind(kind_name)?, n, m, c);
    Ok((p.positives, p.negatives))
}

#[pyfunction]
#[pyo3(signature = (cloud, segments=32, seed=0, max_iters=100, color_weight=1.0))]
fn kmeans_segments(
    cloud: &PyPointCloud,
    segments: usize,
    seed: u64,
    max_iters: usize,
    color_weight: f64,
) -> PyResult<Vec<usize>> {
    let cfg = KMeansConfig {
        target_segments: segments,
        max_iters,
        color_weight,
        seed,
        ..KMeansConfig::default()
    };
    cfg.validate().map_err(py_err)?;
    Ok(superpoint::kmeans_segments(&cloud.inner, &cfg).segment_of().to_vec())
}

#[pyfunction]
#[pyo3(signature = (count, clusters=8, points_per_cluster=128, seed=0))]
fn generate_scenes(count: usize, clusters: usize, points_per_cluster: usize, seed: u64) -> PyResult<Vec<PyPointCloud>> {
    let cfg = SyntheticSceneConfig {
        num_clusters: clusters,
        points_per_cluster,
        seed,
        ..SyntheticSceneConfig::default()
    };
    Ok(trainer::generate_scenes(&cfg, count)
        .map_err(py_err)?
        .into_iter()
        .map(|inner| PyPointCloud { inner })
        .collect())
}

#[pyclass(name = "Encoder", module = "epcontrast", from_py_object)]
#[derive(Clone)]
struct PyEncoder {
    inner: MlpParams,
}

#[pymethods]
impl PyEncoder {
    #[new]
    #[pyo3(signature = (hidden=64, channels=32, seed=0))]
    fn new(hidden: usize, channels: usize, seed: u64) -> PyResult<Self> {
        let inner = encoder::encoder_init(INPUT_DIM, hidden, channels, seed).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: encoder::load_checkpoint(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        encoder::save_checkpoint(&self.inner, path).map_err(py_err)
    }

    fn embed(&self, cloud: &PyPointCloud) -> PyResult<Vec<Vec<f64>>> {
        let (e, _) = encoder::encoder_forward(&self.inner, &cloud.inner).map_err(py_err)?;
        Ok(e.to_rows())
    }

    /// SHA-256 of the checkpoint bytes.
    fn digest(&self) -> String {
        encoder::checkpoint_digest(&self.inner)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.output_dim()
    }
}

fn unwrap_scenes(scenes: Vec<PyPointCloud>) -> Vec<pointcloud::PointCloud> {
    scenes.into_iter().map(|s| s.inner).collect()
}

/// Returns `(encoder, history)` with history rows `(step, epoch, loss, lr)`.
#[pyfunction]
#[pyo3(signature = (scenes, loss="ep", epochs=20, lr=0.01, segments=32, hidden=64, channels=32, seed=0, config=None))]
#[allow(clippy::too_many_arguments)]
fn pretrain(
    py: Python<'_>,
    scenes: Vec<PyPointCloud>,
    loss: &str,
    epochs: usize,
    lr: f64,
    segments: usize,
    hidden: usize,
    channels: usize,
    seed: u64,
    config: Option<PyLossConfig>,
) -> PyResult<(PyEncoder, HistoryRows)> {
    let cfg = TrainConfig {
        epochs,
        base_lr: lr,
        loss_kind: kind(loss)?,
        loss: config_or_default(config),
        augment: AugmentParams {
            seed,
            ..AugmentParams::default()
        },
        hidden,
        channels,
        seed,
        ..TrainConfig::default()
    };
    let km = KMeansConfig {
        target_segments: segments,
        seed,
        ..KMeansConfig::default()
    };
    let scenes = unwrap_scenes(scenes);
    let result = py
        .detach(|| trainer::pretrain(&scenes, &cfg, &km))
        .map_err(py_err)?;
    let history = result
        .history
        .iter()
        .map(|h| (h.step, h.epoch, h.loss, h.lr))
        .collect();
    Ok((
        PyEncoder {
            inner: result.state.params,
        },
        history,
    ))
}

#[pyfunction]
#[pyo3(signature = (encoder, train, test, label_fraction=1.0, seed=0))]
fn linear_probe(
    py: Python<'_>,
    encoder: &PyEncoder,
    train: Vec<PyPointCloud>,
    test: Vec<PyPointCloud>,
    label_fraction: f64,
    seed: u64,
) -> PyResult<f64> {
    let cfg = ProbeConfig {
        label_fraction,
        seed,
        ..ProbeConfig::default()
    };
    let (train, test) = (unwrap_scenes(train), unwrap_scenes(test));
    let params = &encoder.inner;
    py.detach(|| trainer::linear_probe(params, &train, &test, &cfg))
        .map(|r| r.accuracy)
        .map_err(py_err)
}

/// Mean absolute cosine between distinct channel maps.
#[pyfunction]
fn channel_redundancy(embedding: Vec<Vec<f64>>) -> PyResult<f64> {
    Ok(trainer::channel_redundancy(&to_matrix(embedding)?))
}

#[pyfunction]
fn fit_exponent(sizes: Vec<f64>, measurements: Vec<f64>) -> PyResult<f64> {
    bench::fit_exponent(&sizes, &measurements).map_err(py_err)
}

/// Benchmark report as CSV text.
#[pyfunction]
#[pyo3(signature = (kind_name, sizes, m=32, c=32, repeats=3, budget_mb=None, count_only=false))]
#[allow(clippy::too_many_arguments)]
fn bench_loss(
    py: Python<'_>,
    kind_name: &str,
    sizes: Vec<usize>,
    m: usize,
    c: usize,
    repeats: usize,
    budget_mb: Option<u64>,
    count_only: bool,
) -> PyResult<String> {
    let cfg = BenchConfig {
        m,
        c,
        repeats,
        budget: budget_mb.map(|mb| mb * bench::MIB),
        mode: if count_only {
            BenchMode::CountOnly
        } else {
            BenchMode::Timed
        },
        ..BenchConfig::new(kind(kind_name)?, sizes)
    };
    py.detach(|| bench::bench_loss(&cfg))
        .map(|r| r.to_csv())
        .map_err(py_err)
}

/// Runs the oracle and gradient suites; returns whether both passed.
#[pyfunction]
#[pyo3(signature = (instances=100, grad_instances=20, seed=0))]
fn check(py: Python<'_>, instances: usize, grad_instances: usize, seed: u64) -> PyResult<bool> {
    py.detach(|| -> epcontrast_core::Result<bool> {
        Ok(verify::oracle_suite(instances, seed)?.passed()
            && verify::gradient_suite(grad_instances, seed)?.passed())
    })
    .map_err(py_err)
}

#[pymodule]
fn epcontrast(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPointCloud>()?;
    m.add_class::<PyLossConfig>()?;
    m.add_class::<PyEncoder>()?;
    m.add_function(wrap_pyfunction!(loss, m)?)?;
    m.add_function(wrap_pyfunction!(brute_force_loss, m)?)?;
    m.add_function(wrap_pyfunction!(count_pairs, m)?)?;
    m.add_function(wrap_pyfunction!(kmeans_segments, m)?)?;
    m.add_function(wrap_pyfunction!(generate_scenes, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(linear_probe, m)?)?;
    m.add_function(wrap_pyfunction!(channel_redundancy, m)?)?;
    m.add_function(wrap_pyfunction!(fit_exponent, m)?)?;
    m.add_function(wrap_pyfunction!(bench_loss, m)?)?;
    m.add_function(wrap_pyfunction!(check, m)?)?;
    Ok(())
}
