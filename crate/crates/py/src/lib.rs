//! Python bindings. Functions work on the same files as the command-line
//! tool; results come back as plain lists, tuples and JSON strings.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use wetsam_core::checkpoint::Checkpoint;
use wetsam_core::config::Config;
use wetsam_core::data::{read_points, LabelMap, TimeSeriesCube};
use wetsam_core::grow::seeds_from_points;
use wetsam_core::metrics::Truth;
use wetsam_core::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Value,
    Os,
    Runtime,
}

fn kind(e: &Error) -> Kind {
    match e {
        Error::Config(_) | Error::Parse { .. } | Error::DuplicatePoint { .. } | Error::Dimension { .. } => Kind::Value,
        Error::Io { .. } | Error::Format(_) | Error::Length { .. } => Kind::Os,
        _ => Kind::Runtime,
    }
}

fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match kind(&e) {
        Kind::Value => PyValueError::new_err(msg),
        Kind::Os => PyOSError::new_err(msg),
        Kind::Runtime => PyRuntimeError::new_err(msg),
    }
}

fn config_from(text: Option<&str>) -> Result<Config, Error> {
    text.map_or_else(|| Ok(Config::default()), Config::from_toml)
}

fn map_from(labels: Vec<u8>, height: usize, width: usize) -> Result<LabelMap, Error> {
    LabelMap::from_labels(height, width, labels)
}

#[pyfunction]
fn version() -> &'static str {
    env!("CARGO_PKG_VERSION")
}

/// Writes `cube.wstc`, `truth.wstc` and `points.csv` into `out_dir` and
/// returns their paths.
#[pyfunction]
#[pyo3(signature = (out_dir, config=None, seed=None))]
fn synth(out_dir: PathBuf, config: Option<&str>, seed: Option<u64>) -> PyResult<Vec<PathBuf>> {
    let mut cfg = config_from(config).map_err(py_err)?;
    if let Some(s) = seed {
        cfg.scene.seed = s;
    }
    let scene = wetsam_core::synth::generate_scene(&cfg.scene).map_err(py_err)?;
    std::fs::create_dir_all(&out_dir).map_err(|e| py_err(Error::io(&out_dir, e)))?;
    let paths: Vec<PathBuf> = ["cube.wstc", "truth.wstc", "points.csv"].iter().map(|n| out_dir.join(n)).collect();
    scene.cube.write(&paths[0]).map_err(py_err)?;
    scene.truth.write(&paths[1], 0).map_err(py_err)?;
    scene.points.write(&paths[2]).map_err(py_err)?;
    Ok(paths)
}

/// Region growing from the points; returns `(height, width, labels)` with
/// 255 for unlabeled pixels.
#[pyfunction]
#[pyo3(signature = (cube, points, tau=0.9, num_classes=4))]
fn grow(cube: PathBuf, points: PathBuf, tau: f64, num_classes: usize) -> PyResult<(usize, usize, Vec<u8>)> {
    let data = TimeSeriesCube::read(&cube).map_err(py_err)?;
    let pts = read_points(&points, data.height(), data.width(), num_classes).map_err(py_err)?;
    let seeds = seeds_from_points(&pts, &data).map_err(py_err)?;
    let map = wetsam_core::grow::grow(&seeds, &data, tau).map_err(py_err)?;
    Ok((map.height(), map.width(), map.labels().to_vec()))
}

/// Trains and writes `model.wsck` and `manifest.json` into `out_dir`;
/// returns the manifest as JSON.
#[pyfunction]
#[pyo3(signature = (cube, points, out_dir, config=None, truth=None))]
fn train(
    py: Python<'_>,
    cube: PathBuf,
    points: PathBuf,
    out_dir: PathBuf,
    config: Option<&str>,
    truth: Option<PathBuf>,
) -> PyResult<String> {
    let cfg = config_from(config).map_err(py_err)?;
    py.detach(move || -> Result<String, Error> {
        let data = TimeSeriesCube::read(&cube)?;
        let pts = read_points(&points, data.height(), data.width(), cfg.model.num_classes)?;
        let truth_map = truth.map(|p| LabelMap::read(p).map(|(m, _)| m)).transpose()?;
        let out = wetsam_core::train::train(&cfg, &data, &pts, truth_map.as_ref())?;
        std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
        Checkpoint::from_model(&out.model, &cfg, data.len_t()).write(out_dir.join("model.wsck"))?;
        let json = out.manifest.to_json();
        let path = out_dir.join("manifest.json");
        std::fs::write(&path, &json).map_err(|e| Error::io(&path, e))?;
        Ok(json)
    })
    .map_err(py_err)
}

/// Returns `(height, width, labels, probabilities)`; probabilities are
/// row-major `H × W × classes`.
#[pyfunction]
fn predict(py: Python<'_>, checkpoint: PathBuf, cube: PathBuf) -> PyResult<(usize, usize, Vec<u8>, Vec<f32>)> {
    py.detach(move || -> Result<_, Error> {
        let ck = Checkpoint::read(&checkpoint)?;
        let model = ck.to_model()?;
        let data = TimeSeriesCube::read(&cube)?;
        let (labels, probs) = wetsam_core::train::predict(&model, &data, &[], ck.config.train.patch_size)?;
        Ok((data.height(), data.width(), labels.labels().to_vec(), probs))
    })
    .map_err(py_err)
}

/// Scores a predicted map against a dense truth map of the same shape;
/// returns the report as JSON.
#[pyfunction]
fn evaluate(pred: Vec<u8>, truth: Vec<u8>, height: usize, width: usize, num_classes: usize) -> PyResult<String> {
    let p = map_from(pred, height, width).map_err(py_err)?;
    let t = map_from(truth, height, width).map_err(py_err)?;
    let report = wetsam_core::metrics::evaluate(&p, Truth::Dense(&t), num_classes).map_err(py_err)?;
    Ok(report.to_json())
}

#[pyfunction]
fn cosine_similarity(a: Vec<f32>, b: Vec<f32>) -> PyResult<f64> {
    if a.len() != b.len() {
        return Err(PyValueError::new_err(format!("lengths differ: {} vs {}", a.len(), b.len())));
    }
    Ok(wetsam_core::grow::cosine_similarity(&a, &b))
}

#[pymodule]
fn wetsam(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(version, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(grow, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(predict, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    Ok(())
}
