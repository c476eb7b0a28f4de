//! Python bindings for the correspondence learner.
//!
//! Arrays cross the boundary as flat row-major lists of floats; shapes are
//! passed alongside.

use liir::affinity::{intra_affinity, intra_inter_affinity, NegativeSet};
use liir::checkpoint::Checkpoint;
use liir::compactness;
use liir::config::RunConfig;
use liir::data::{generate_clip, Scenario};
use liir::encoder::{encode_frame, EncoderParams, FeatureMap};
use liir::experiment;
use liir::metrics::{self, Mask};
use liir::propagation;
use liir::{ColorSpace, Frame};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: liir::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Flat run configuration; keys match the config-file keys.
#[pyclass(name = "Config", module = "liir_py", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (text=None))]
    fn new(text: Option<&str>) -> PyResult<Self> {
        let inner = match text {
            Some(t) => RunConfig::parse_str(t).map_err(err)?,
            None => RunConfig::default(),
        };
        Ok(Self { inner })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(err)
    }

    fn get(&self, key: &str) -> PyResult<String> {
        self.inner.get(key).map_err(err)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn __repr__(&self) -> String {
        format!("Config(<{} lines>)", self.inner.to_text().lines().count())
    }
}

/// Trained (or freshly initialised) encoder weights.
#[pyclass(name = "Model", module = "liir_py", skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    params: EncoderParams,
    temperature: f64,
}

#[pymethods]
impl PyModel {
    /// Randomly initialised encoder for `config`.
    #[staticmethod]
    fn initial(config: &PyConfig) -> PyResult<Self> {
        Ok(Self {
            params: experiment::initial_params(&config.inner).map_err(err)?,
            temperature: config.inner.train.temperature,
        })
    }

    /// Trains on the configured synthetic scenarios; returns the model and
    /// per-epoch `(epoch, phase, l_res, l_com)` tuples.
    #[staticmethod]
    fn train(py: Python<'_>, config: &PyConfig) -> PyResult<(Self, Vec<(usize, String, f64, f64)>)> {
        let cfg = config.inner.clone();
        let (params, epochs) = py.detach(|| experiment::train(&cfg, |_| {})).map_err(err)?;
        let log = epochs
            .iter()
            .map(|e| (e.epoch, e.phase.to_string(), e.losses.l_res, e.losses.l_com))
            .collect();
        Ok((
            Self {
                params,
                temperature: cfg.train.temperature,
            },
            log,
        ))
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ck = Checkpoint::load(path).map_err(err)?;
        Ok(Self {
            params: ck.params,
            temperature: ck.temperature,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        Checkpoint {
            params: self.params.clone(),
            temperature: self.temperature,
        }
        .save(path)
        .map_err(err)
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.params.parameter_count()
    }

    #[getter]
    fn temperature(&self) -> f64 {
        self.temperature
    }

    /// Encodes an RGB frame given as `[h, w, 3]` row-major values in 0..1.
    /// Returns `(features, h', w', c)`.
    fn encode(&self, rgb: Vec<f64>, height: usize, width: usize) -> PyResult<(Vec<f64>, usize, usize, usize)> {
        let frame = Frame::from_pixel_rows(height, width, ColorSpace::Rgb, &rgb).map_err(err)?;
        let f = encode_frame(&frame, &self.params, self.temperature).map_err(err)?;
        Ok((f.rows(), f.height, f.width, f.channels))
    }

    /// Propagates frame-0 masks over held-out clips; returns a dict with
    /// `accuracy`, `mean_j` and per-clip `j`.
    fn evaluate<'py>(&self, py: Python<'py>, config: &PyConfig) -> PyResult<Bound<'py, PyDict>> {
        let cfg = config.inner.clone();
        let params = self.params.clone();
        let report = py
            .detach(|| {
                let clips = experiment::evaluation_clips(&cfg)?;
                experiment::evaluate(&params, &cfg, &clips)
            })
            .map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("accuracy", report.accuracy)?;
        d.set_item("mean_j", report.mean_j)?;
        d.set_item("j", report.per_clip.iter().map(|j| j.mean).collect::<Vec<_>>())?;
        Ok(d)
    }
}

fn feature_map(rows: &[f64], height: usize, width: usize, channels: usize) -> PyResult<FeatureMap> {
    FeatureMap::from_rows(height, width, channels, rows).map_err(err)
}

/// Intra-video affinity between two `[h·w, c]` feature sets; returns the
/// `[h·w, h·w]` row-stochastic matrix.
#[pyfunction]
#[pyo3(signature = (query, reference, height, width, channels, window=None))]
fn affinity(
    query: Vec<f64>,
    reference: Vec<f64>,
    height: usize,
    width: usize,
    channels: usize,
    window: Option<usize>,
) -> PyResult<Vec<f64>> {
    let q = feature_map(&query, height, width, channels)?;
    let r = feature_map(&reference, height, width, channels)?;
    Ok(intra_affinity(&q, &r, window).map_err(err)?.values)
}

/// Affinity with extra `[n, c]` negatives in the denominator; rows sum to
/// less than one.
#[pyfunction]
fn affinity_with_negatives(
    query: Vec<f64>,
    reference: Vec<f64>,
    negatives: Vec<Vec<f64>>,
    height: usize,
    width: usize,
    channels: usize,
) -> PyResult<Vec<f64>> {
    let q = feature_map(&query, height, width, channels)?;
    let r = feature_map(&reference, height, width, channels)?;
    let mut n = NegativeSet::new(channels);
    for (k, v) in negatives.iter().enumerate() {
        n.push(v, k + 1).map_err(err)?;
    }
    Ok(intra_inter_affinity(&q, &r, &n).map_err(err)?.values)
}

/// Replaces one affinity row (an `h×w` heatmap) by its compact
/// `components`-Gaussian fit.
#[pyfunction]
#[pyo3(signature = (row, height, width, components=2, min_variance=0.5))]
fn compact_row(row: Vec<f64>, height: usize, width: usize, components: usize, min_variance: f64) -> PyResult<Vec<f64>> {
    if row.len() != height * width {
        return Err(PyValueError::new_err(format!("row has {} entries, expected {}", row.len(), height * width)));
    }
    Ok(compactness::compact_row(&row, height, width, components, min_variance))
}

/// Reference frame indices used when propagating into frame `t`.
#[pyfunction]
fn reference_schedule(t: usize) -> Vec<usize> {
    propagation::reference_schedule(t)
}

/// Mean per-object Jaccard index of two label masks.
#[pyfunction]
fn region_similarity(pred: Vec<u8>, gt: Vec<u8>, height: usize, width: usize) -> PyResult<Option<f64>> {
    let p = Mask::new(height, width, pred).map_err(err)?;
    let g = Mask::new(height, width, gt).map_err(err)?;
    Ok(metrics::region_similarity(&p, &g).mean())
}

/// Renders a synthetic clip; returns `(frames, masks)` with frames as flat
/// `[h, w, 3]` RGB lists and masks as flat `[h, w]` label lists.
#[pyfunction]
fn synthetic_clip(
    scenario: &str,
    height: usize,
    width: usize,
    frames: usize,
    seed: u64,
) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<u8>>)> {
    let scenario: Scenario = scenario.parse().map_err(err)?;
    let clip = generate_clip(scenario, height, width, frames, seed).map_err(err)?;
    Ok((
        clip.frames.iter().map(|f| f.to_pixel_rows()).collect(),
        clip.masks.iter().map(|m| m.labels.clone()).collect(),
    ))
}

#[pymodule]
fn liir_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(affinity, m)?)?;
    m.add_function(wrap_pyfunction!(affinity_with_negatives, m)?)?;
    m.add_function(wrap_pyfunction!(compact_row, m)?)?;
    m.add_function(wrap_pyfunction!(reference_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(region_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_clip, m)?)?;
    Ok(())
}
