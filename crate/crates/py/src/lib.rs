//! Python bindings for the main lorawm types and operations.
//!
//! Tensors cross the boundary as a `Tensor` object holding a shape and a
//! flat row-major `list[float]`.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use lorawm::attacks::{apply_attack as core_apply_attack, AttackSpec};
use lorawm::checkpoint::{self, StoredAdapters};
use lorawm::codec::{SoftBits, WatermarkDecoder, WatermarkMessage};
use lorawm::decoder::{make_latents as core_make_latents, DecoderConfig, ToyDecoder};
use lorawm::dlwt::{dlwt_step as core_dlwt_step, DlwtConfig, DlwtState};
use lorawm::trainer::{train as core_train, TrainConfig};
use lorawm::verify::{detection_threshold as core_threshold, verify as core_verify};
use lorawm::{Error, Rng};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

#[pyclass(name = "Tensor", module = "lorawm_py", from_py_object)]
#[derive(Clone)]
pub struct PyTensor {
    inner: lorawm::Tensor<f32>,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f32>) -> PyResult<Self> {
        Ok(PyTensor { inner: lorawm::Tensor::new(shape, data).map_err(py_err)? })
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    #[getter]
    fn data(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

#[pyclass(name = "Decoder", module = "lorawm_py", from_py_object)]
#[derive(Clone)]
pub struct PyDecoder {
    inner: ToyDecoder<f32>,
}

#[pymethods]
impl PyDecoder {
    /// Randomly initialized decoder; `mid_width=0` gives the minimal layout.
    #[new]
    #[pyo3(signature = (seed=0, mid_width=256))]
    fn new(seed: u64, mid_width: usize) -> PyResult<Self> {
        let cfg = DecoderConfig { mid_width, ..DecoderConfig::default() };
        Ok(PyDecoder { inner: ToyDecoder::new(cfg, &mut Rng::new(seed)).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyDecoder { inner: checkpoint::load_decoder(&path).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save_decoder(&self.inner, &path).map_err(py_err)
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn injection_points(&self) -> Vec<(String, usize, usize)> {
        self.inner.list_injection_points().into_iter().map(|p| (p.id, p.d, p.k)).collect()
    }

    fn make_latents(&self, count: usize, seed: u64) -> PyResult<PyTensor> {
        let z = core_make_latents(count, &self.inner.config, &mut Rng::new(seed)).map_err(py_err)?;
        Ok(PyTensor { inner: z })
    }

    #[pyo3(signature = (latents, adapters=None))]
    fn decode(&self, latents: &PyTensor, adapters: Option<&PyAdapters>) -> PyResult<PyTensor> {
        let out = self.inner.decode(&latents.inner, adapters.map(|a| &a.inner.adapters)).map_err(py_err)?;
        Ok(PyTensor { inner: out })
    }

    /// Decoder with the adapters folded into its weights.
    fn merge(&self, adapters: &PyAdapters) -> PyResult<PyDecoder> {
        Ok(PyDecoder { inner: self.inner.merged(&adapters.inner.adapters).map_err(py_err)? })
    }

    fn fingerprint(&self) -> u64 {
        self.inner.fingerprint()
    }
}

#[pyclass(name = "Codec", module = "lorawm_py", from_py_object)]
#[derive(Clone)]
pub struct PyCodec {
    inner: WatermarkDecoder<f32>,
}

#[pymethods]
impl PyCodec {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyCodec { inner: checkpoint::load_codec(&path).map_err(py_err)? })
    }

    #[getter]
    fn n_bits(&self) -> usize {
        self.inner.n_bits()
    }

    #[getter]
    fn frozen(&self) -> bool {
        self.inner.is_frozen()
    }

    /// Soft bits in `(0, 1)` for each image of a `[n, 3, h, w]` batch.
    fn extract(&self, images: &PyTensor) -> PyResult<Vec<Vec<f64>>> {
        let soft = self.inner.extract(&images.inner).map_err(py_err)?;
        Ok(soft.into_iter().map(|s| s.values().to_vec()).collect())
    }
}

#[pyclass(name = "Adapters", module = "lorawm_py", from_py_object)]
#[derive(Clone)]
pub struct PyAdapters {
    inner: StoredAdapters,
}

#[pymethods]
impl PyAdapters {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyAdapters { inner: checkpoint::load_adapters(&path).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save_adapters(&self.inner, &path).map_err(py_err)
    }

    fn param_count(&self) -> usize {
        self.inner.adapters.param_count()
    }

    fn targets(&self) -> Vec<String> {
        self.inner.adapters.adapters.iter().map(|a| a.target_id.clone()).collect()
    }

    #[getter]
    fn payload(&self) -> Option<String> {
        self.inner.payload.clone()
    }
}

/// Trains adapters with the default configuration overridden by keyword
/// arguments; returns the adapters and the trace as a JSON string.
#[pyfunction]
#[pyo3(signature = (decoder, codec, payload=None, steps=2000, seed=0, lr=1e-3, rank=8, alpha=8.0))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    decoder: &PyDecoder,
    codec: &PyCodec,
    payload: Option<String>,
    steps: usize,
    seed: u64,
    lr: f64,
    rank: usize,
    alpha: f64,
) -> PyResult<(PyAdapters, String)> {
    let cfg = TrainConfig { payload, steps, seed, lr, rank, alpha, ..TrainConfig::default() };
    let (dec, cod) = (decoder.inner.clone(), codec.inner.clone());
    let out = py.detach(move || core_train(&dec, &cod, &cfg)).map_err(py_err)?;
    let trace = serde_json::to_string(&out.trace).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let stored = StoredAdapters {
        adapters: out.adapters,
        base_fingerprint: Some(decoder.inner.fingerprint()),
        payload: Some(out.message.to_hex()),
    };
    Ok((PyAdapters { inner: stored }, trace))
}

#[pyfunction]
fn detection_threshold(n: usize, fpr: f64) -> PyResult<usize> {
    core_threshold(n, fpr).map_err(py_err)
}

/// Returns `(detected, matched_bits, threshold_k, p_value)`.
#[pyfunction]
#[pyo3(signature = (soft_bits, payload, fpr=0.005))]
fn verify(soft_bits: Vec<f64>, payload: &str, fpr: f64) -> PyResult<(bool, usize, usize, f64)> {
    let w = WatermarkMessage::from_hex(payload, soft_bits.len()).map_err(py_err)?;
    let soft = SoftBits::new(soft_bits).map_err(py_err)?;
    let r = core_verify(&soft, &w, fpr).map_err(py_err)?;
    Ok((r.detected, r.matched_bits, r.threshold_k, r.p_value))
}

/// One controller update; returns `(lambda_i, lambda_w, branch)`.
#[pyfunction]
#[pyo3(signature = (lambda_i, lambda_w, rho_t, mu_t, rho=30.0, mu=0.95, gamma=0.1, eta=1.0))]
#[allow(clippy::too_many_arguments)]
fn dlwt_step(lambda_i: f64, lambda_w: f64, rho_t: f64, mu_t: f64, rho: f64, mu: f64, gamma: f64, eta: f64) -> PyResult<(f64, f64, u8)> {
    let cfg = DlwtConfig { rho, mu, gamma, eta };
    let (s, b) = core_dlwt_step(DlwtState { lambda_i, lambda_w }, rho_t, mu_t, &cfg).map_err(py_err)?;
    Ok((s.lambda_i, s.lambda_w, b.id()))
}

#[pyfunction]
#[pyo3(signature = (images, spec, seed=0))]
fn apply_attack(images: &PyTensor, spec: &str, seed: u64) -> PyResult<PyTensor> {
    let spec: AttackSpec = spec.parse().map_err(py_err)?;
    let out = core_apply_attack(&images.inner, &spec, &mut Rng::new(seed)).map_err(py_err)?;
    Ok(PyTensor { inner: out })
}

#[pymodule]
fn lorawm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyDecoder>()?;
    m.add_class::<PyCodec>()?;
    m.add_class::<PyAdapters>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(detection_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(dlwt_step, m)?)?;
    m.add_function(wrap_pyfunction!(apply_attack, m)?)?;
    Ok(())
}
