//! Python bindings for the fourierflow crate.
//!
//! Fields cross the boundary as nested lists or `(shape, flat)` pairs so the
//! module has no numpy dependency.

use std::path::PathBuf;

use ndarray::Array2;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use fourierflow::biaslab::{self, DiffusionCoeff, PowerLawSpectrum};
use fourierflow::fields::{self, fieldpack_read, fieldpack_write, PackHeader};
use fourierflow::interpolant::Schedule;
use fourierflow::shearflow::{generate_dataset, DatasetConfig};
use fourierflow::train::{sample_windows, Model};

fn err(e: fourierflow::Error) -> PyErr {
    match e {
        fourierflow::Error::Io(_) | fourierflow::Error::NanLoss { .. } | fourierflow::Error::Diverged { .. } => {
            PyRuntimeError::new_err(e.to_string())
        }
        other => PyValueError::new_err(other.to_string()),
    }
}

#[pyfunction]
fn version() -> &'static str {
    env!("CARGO_PKG_VERSION")
}

/// `(alpha_t, sigma_t, d alpha_t, d sigma_t)` for "linear" or "vp".
#[pyfunction]
fn schedule_eval(kind: &str, t: f64) -> PyResult<(f64, f64, f64, f64)> {
    let s = match kind {
        "linear" => Schedule::Linear,
        "vp" | "variance_preserving" => Schedule::VariancePreserving,
        _ => return Err(PyValueError::new_err(format!("unknown schedule {kind:?}"))),
    };
    fourierflow::interpolant::schedule_eval(s, t).map_err(err)
}

/// Accumulated forward-noise variance for constant `g`.
#[pyfunction]
fn accumulated_noise_variance(g0: f64, t: f64) -> PyResult<f64> {
    biaslab::accumulated_noise_variance(&DiffusionCoeff::Constant { g0 }, t).map_err(err)
}

/// Time at which a power-law mode of frequency `omega` drops to SNR `gamma`.
#[pyfunction]
#[pyo3(signature = (alpha, omega, gamma=1.0, g0=1.0, amplitude=1.0))]
fn threshold_time(alpha: f64, omega: f64, gamma: f64, g0: f64, amplitude: f64) -> PyResult<f64> {
    let spec = PowerLawSpectrum::new(alpha, amplitude).map_err(err)?;
    biaslab::threshold_time(&spec, &DiffusionCoeff::Constant { g0 }, gamma, omega).map_err(err)
}

/// Radially binned `|FFT|^2` of a 2D field given as rows.
#[pyfunction]
fn radial_energy_spectrum(field: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    let h = field.len();
    let w = field.first().map_or(0, |r| r.len());
    if field.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("ragged field rows"));
    }
    let a = Array2::from_shape_vec((h, w), field.into_iter().flatten().collect()).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(fields::radial_energy_spectrum(a.view()).map_err(err)?.energy)
}

/// `(shape, flat values)` of a FieldPack file.
#[pyfunction]
fn read_fieldpack(path: PathBuf) -> PyResult<(Vec<usize>, Vec<f32>)> {
    let (s, _) = fieldpack_read(&path).map_err(err)?;
    Ok((s.shape().to_vec(), s.values().iter().copied().collect()))
}

/// `(mse, nrmse, max_err)` between two FieldPack files; `nrmse` is NaN when
/// some truth sample is identically zero.
#[pyfunction]
fn metrics(pred: PathBuf, truth: PathBuf) -> PyResult<(f64, f64, f64)> {
    let (p, _) = fieldpack_read(&pred).map_err(err)?;
    let (t, _) = fieldpack_read(&truth).map_err(err)?;
    let m = fields::compute_metrics(&p, &t).map_err(err)?;
    Ok((m.mse, m.nrmse_or_nan(), m.max_err))
}

/// Generates a shear-flow dataset from a JSON `DatasetConfig` into `out_dir`;
/// returns the `[train, val, test]` window counts.
#[pyfunction]
#[pyo3(signature = (out_dir, config_json="{}"))]
fn gen_data(py: Python<'_>, out_dir: PathBuf, config_json: &str) -> PyResult<Vec<usize>> {
    let cfg: DatasetConfig = serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.allow_threads(|| {
        let ds = generate_dataset(&cfg)?;
        ds.save(&out_dir)?;
        Ok(ds.manifest.windows.to_vec())
    })
    .map_err(err)
}

/// Samples target windows for the context frames of `input` and writes them
/// to `out`; returns the output shape.
#[pyfunction]
#[pyo3(signature = (checkpoint, input, out, steps=16, seed=0))]
fn sample(py: Python<'_>, checkpoint: PathBuf, input: PathBuf, out: PathBuf, steps: usize, seed: u64) -> PyResult<Vec<usize>> {
    py.allow_threads(|| {
        let (model, _) = Model::load(&checkpoint)?;
        let (windows, _) = fieldpack_read(&input)?;
        let ctx = windows.frame_range(0, model.backbone.cfg.frames)?;
        let pred = sample_windows(&model, &ctx, steps, seed)?;
        fieldpack_write(&out, &pred, &PackHeader::for_series(&pred).with_seed(seed))?;
        Ok(pred.shape().to_vec())
    })
    .map_err(err)
}

#[pymodule]
fn fourierflow_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(version, m)?)?;
    m.add_function(wrap_pyfunction!(schedule_eval, m)?)?;
    m.add_function(wrap_pyfunction!(accumulated_noise_variance, m)?)?;
    m.add_function(wrap_pyfunction!(threshold_time, m)?)?;
    m.add_function(wrap_pyfunction!(radial_energy_spectrum, m)?)?;
    m.add_function(wrap_pyfunction!(read_fieldpack, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(sample, m)?)?;
    Ok(())
}
