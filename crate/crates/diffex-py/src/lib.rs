//! Python bindings for the diffex core: dataset rendering, the noise
//! schedule, the loss/metric primitives, and the full pipeline driver.
//!
//! Build as a cdylib and import as `diffex_py` (see python/smoke_test.py).

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use diffex_core::datagen::{DatagenConfig, SyntheticFactors};
use diffex_core::diffusion::NoiseSchedule;
use diffex_core::imageio::Pixels;

fn to_py_err(e: diffex_core::Error) -> PyErr {
    match e {
        diffex_core::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn pixels_from_flat(flat: Vec<f64>, side: usize) -> PyResult<Pixels> {
    if flat.len() != 3 * side * side {
        return Err(PyValueError::new_err(format!(
            "expected {} values for a 3x{side}x{side} image, got {}",
            3 * side * side,
            flat.len()
        )));
    }
    ndarray::Array3::from_shape_vec((3, side, side), flat)
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Ground-truth phenotype parameters for one synthetic image.
#[pyclass(name = "Factors")]
#[derive(Clone)]
struct PyFactors {
    inner: SyntheticFactors,
}

#[pymethods]
impl PyFactors {
    #[getter]
    fn nucleus_count(&self) -> u32 {
        self.inner.nucleus_count
    }
    #[getter]
    fn nucleus_spacing(&self) -> f64 {
        self.inner.nucleus_spacing
    }
    #[getter]
    fn cytoplasm_intensity(&self) -> f64 {
        self.inner.cytoplasm_intensity
    }
    #[getter]
    fn organelle_scatter(&self) -> f64 {
        self.inner.organelle_scatter
    }
    #[getter]
    fn jitter_seed(&self) -> u64 {
        self.inner.jitter_seed
    }
    fn __repr__(&self) -> String {
        format!(
            "Factors(nucleus_count={}, nucleus_spacing={:.3}, cytoplasm_intensity={:.3}, organelle_scatter={:.3}, jitter_seed={})",
            self.inner.nucleus_count,
            self.inner.nucleus_spacing,
            self.inner.cytoplasm_intensity,
            self.inner.organelle_scatter,
            self.inner.jitter_seed
        )
    }
}

/// Draw class-conditional factors (class 0 or 1) with the default ranges.
#[pyfunction]
fn sample_factors(class_label: usize, seed: u64) -> PyResult<PyFactors> {
    let cfg = DatagenConfig::default();
    diffex_core::datagen::sample_factors(&cfg, class_label, seed)
        .map(|inner| PyFactors { inner })
        .map_err(to_py_err)
}

/// Render one image; returns a flat row-major [3, side, side] list in [0,1].
#[pyfunction]
fn render_image(factors: PyFactors, side: usize) -> PyResult<Vec<f64>> {
    let px = diffex_core::datagen::render_image(&factors.inner, side).map_err(to_py_err)?;
    Ok(px.into_raw_vec_and_offset().0)
}

/// Linear beta schedule with cumulative alpha products.
#[pyclass(name = "Schedule")]
struct PySchedule {
    inner: NoiseSchedule,
}

#[pymethods]
impl PySchedule {
    #[getter]
    fn t_max(&self) -> usize {
        self.inner.t_max
    }
    fn betas(&self) -> Vec<f64> {
        self.inner.betas.clone()
    }
    /// alpha_bar(t) with alpha_bar(0) = 1.
    fn alpha_bar(&self, t: usize) -> PyResult<f64> {
        self.inner.validate_t(t).map_err(to_py_err)?;
        Ok(self.inner.alpha_bar(t))
    }
    /// Forward noising of a flat image at step t with caller-supplied noise.
    fn q_sample(&self, x0: Vec<f64>, t: usize, eps: Vec<f64>, side: usize) -> PyResult<Vec<f64>> {
        let x0 = pixels_from_flat(x0, side)?;
        let eps = pixels_from_flat(eps, side)?;
        let xt = diffex_core::diffusion::q_sample(&x0, t, &eps, &self.inner).map_err(to_py_err)?;
        Ok(xt.into_raw_vec_and_offset().0)
    }
    /// One-step clean-image estimate, the left inverse of q_sample.
    fn predict_x0(&self, xt: Vec<f64>, t: usize, eps_hat: Vec<f64>, side: usize) -> PyResult<Vec<f64>> {
        let xt = pixels_from_flat(xt, side)?;
        let eps_hat = pixels_from_flat(eps_hat, side)?;
        let x0 =
            diffex_core::diffusion::predict_x0(&xt, t, &eps_hat, &self.inner).map_err(to_py_err)?;
        Ok(x0.into_raw_vec_and_offset().0)
    }
}

#[pyfunction]
fn make_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> PyResult<PySchedule> {
    diffex_core::diffusion::make_schedule(t_max, beta_start, beta_end)
        .map(|inner| PySchedule { inner })
        .map_err(to_py_err)
}

/// Structural similarity between two flat [3, side, side] images.
#[pyfunction]
fn ssim(a: Vec<f64>, b: Vec<f64>, side: usize) -> PyResult<f64> {
    let a = pixels_from_flat(a, side)?;
    let b = pixels_from_flat(b, side)?;
    diffex_core::explain::ssim(&a, &b).map_err(to_py_err)
}

/// Mean squared error between two flat [3, side, side] images.
#[pyfunction]
fn mse(a: Vec<f64>, b: Vec<f64>, side: usize) -> PyResult<f64> {
    let a = pixels_from_flat(a, side)?;
    let b = pixels_from_flat(b, side)?;
    diffex_core::explain::mse(&a, &b).map_err(to_py_err)
}

/// Unbiased kernel (MMD^2) distance between two feature sets.
#[pyfunction]
fn kid(features_a: Vec<Vec<f64>>, features_b: Vec<Vec<f64>>) -> PyResult<f64> {
    let to_mat = |rows: Vec<Vec<f64>>| -> PyResult<ndarray::Array2<f64>> {
        let n = rows.len();
        let d = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != d) {
            return Err(PyValueError::new_err("ragged feature rows"));
        }
        ndarray::Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect())
            .map_err(|e| PyValueError::new_err(e.to_string()))
    };
    let a = to_mat(features_a)?;
    let b = to_mat(features_b)?;
    diffex_core::explain::kid(a.view(), b.view()).map_err(to_py_err)
}

/// Contrastive loss over feature divergences f[sample][direction][feature].
#[pyfunction]
fn contrastive_loss(divergences: Vec<Vec<Vec<f64>>>, tau: f64) -> PyResult<f64> {
    let b = divergences.len();
    let k = divergences.first().map(Vec::len).unwrap_or(0);
    let d = divergences
        .first()
        .and_then(|r| r.first())
        .map(Vec::len)
        .unwrap_or(0);
    let mut f = ndarray::Array3::zeros((b, k, d));
    for (i, row) in divergences.iter().enumerate() {
        if row.len() != k {
            return Err(PyValueError::new_err("ragged direction axis"));
        }
        for (j, feat) in row.iter().enumerate() {
            if feat.len() != d {
                return Err(PyValueError::new_err("ragged feature axis"));
            }
            for (l, &v) in feat.iter().enumerate() {
                f[[i, j, l]] = v;
            }
        }
    }
    diffex_core::directions::contrastive_loss(&diffex_core::directions::FeatureDivergence { f }, tau)
        .map_err(to_py_err)
}

/// KL divergence D[p || q] with the crate's probability floor.
#[pyfunction]
fn kl_div(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    if p.len() != q.len() {
        return Err(PyValueError::new_err("length mismatch"));
    }
    Ok(diffex_core::semantic_ae::kl_div(&p, &q))
}

/// Parse and validate a config file; raises with every violation on failure.
#[pyfunction]
fn validate_config(path: &str) -> PyResult<u64> {
    let cfg = diffex_core::config::parse_config(std::path::Path::new(path)).map_err(to_py_err)?;
    Ok(cfg.seed)
}

/// Run the full pipeline (identical to `diffex run-all`).
#[pyfunction]
fn run_pipeline(config_path: &str, artifacts: &str) -> PyResult<()> {
    let cfg = diffex_core::config::parse_config(std::path::Path::new(config_path))
        .map_err(to_py_err)?;
    let paths = diffex_core::pipeline::ArtifactPaths::new(artifacts);
    diffex_core::pipeline::run_all(&cfg, &paths).map_err(to_py_err)
}

#[pymodule]
fn diffex_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyFactors>()?;
    m.add_class::<PySchedule>()?;
    m.add_function(wrap_pyfunction!(sample_factors, m)?)?;
    m.add_function(wrap_pyfunction!(render_image, m)?)?;
    m.add_function(wrap_pyfunction!(make_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(mse, m)?)?;
    m.add_function(wrap_pyfunction!(kid, m)?)?;
    m.add_function(wrap_pyfunction!(contrastive_loss, m)?)?;
    m.add_function(wrap_pyfunction!(kl_div, m)?)?;
    m.add_function(wrap_pyfunction!(validate_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
