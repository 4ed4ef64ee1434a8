//! Python bindings: model construction and inference, checkpoints, the
//! chunker, STFT and losses, SI-SNR and WAV input/output.
//!
//! Signals cross the boundary as flat sequences of floats (lists or 1-D
//! NumPy arrays).

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use manner::loss::{weighted_total_loss, LossConfig, StftConfig};
use manner::{Checkpoint, Error, ParameterTree, Tape, Tensor, Var, Variant};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::Wav(_) | Error::Audio(_) | Error::Checkpoint(_) => PyIOError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

/// Architecture hyperparameters.
#[pyclass(name = "ModelConfig", module = "manner", from_py_object)]
#[derive(Clone)]
pub struct PyModelConfig {
    inner: manner::ModelConfig,
}

#[pymethods]
impl PyModelConfig {
    #[new]
    #[pyo3(signature = (variant="full", channels=60, depth=4, chunk=64, kernel=8, stride=4, channel_attention=true, global_attention=true, local_attention=true))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        variant: &str,
        channels: usize,
        depth: usize,
        chunk: usize,
        kernel: usize,
        stride: usize,
        channel_attention: bool,
        global_attention: bool,
        local_attention: bool,
    ) -> PyResult<Self> {
        let inner = manner::ModelConfig {
            variant: variant.parse::<Variant>().map_err(py_err)?,
            channels,
            depth,
            chunk,
            kernel,
            stride,
            channel_attention,
            global_attention,
            local_attention,
            ..manner::ModelConfig::default()
        };
        inner.validate().map_err(py_err)?;
        Ok(PyModelConfig { inner })
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.variant.to_string()
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels
    }

    #[getter]
    fn depth(&self) -> usize {
        self.inner.depth
    }

    #[getter]
    fn chunk(&self) -> usize {
        self.inner.chunk
    }

    fn __repr__(&self) -> String {
        let c = &self.inner;
        format!(
            "ModelConfig(variant='{}', channels={}, depth={}, chunk={}, kernel={}, stride={})",
            c.variant, c.channels, c.depth, c.chunk, c.kernel, c.stride
        )
    }
}

/// A model with its parameters, ready for inference.
#[pyclass(name = "Model", module = "manner")]
pub struct PyModel {
    model: manner::Manner,
    params: ParameterTree<f32>,
}

#[pymethods]
impl PyModel {
    /// Freshly initialized weights.
    #[new]
    #[pyo3(signature = (config=None, seed=0))]
    fn new(config: Option<PyModelConfig>, seed: u64) -> PyResult<Self> {
        let cfg = config.map(|c| c.inner).unwrap_or_default();
        let (model, params) = manner::build_model::<f32>(&cfg, seed).map_err(py_err)?;
        Ok(PyModel { model, params })
    }

    /// Weights from a training checkpoint.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ck = Checkpoint::load(path).map_err(py_err)?;
        let model = ck.model().map_err(py_err)?;
        Ok(PyModel { model, params: ck.params })
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.params.num_parameters()
    }

    #[getter]
    fn config(&self) -> PyModelConfig {
        PyModelConfig { inner: self.model.config.clone() }
    }

    /// Enhanced signal, same length as `noisy`.
    fn enhance(&self, py: Python<'_>, noisy: Vec<f32>) -> PyResult<Vec<f32>> {
        if noisy.is_empty() {
            return Err(PyValueError::new_err("empty signal"));
        }
        py.detach(|| {
            let x = Tensor::new(&[1, 1, noisy.len()], noisy)?;
            Ok(self.model.enhance(&self.params, &x)?.to_vec())
        })
        .map_err(py_err)
    }

    /// `(channels, length)` after each encoder layer for an input of `length` samples.
    fn encoder_shapes(&self, length: usize) -> PyResult<Vec<(usize, usize)>> {
        let tape = Tape::new();
        let ctx = manner::Ctx::eval(&tape, &self.params);
        let x = Var::constant(Tensor::zeros(&[1, 1, length]));
        let (_, trace) = self.model.forward_traced(&ctx, &x).map_err(py_err)?;
        Ok(trace.encoder.iter().map(|s| (s[1], s[2])).collect())
    }
}

/// Overlapping chunks `[channels][chunks][size]` with hop `size / 2`.
#[pyfunction]
fn chunk(x: Vec<Vec<f32>>, size: usize) -> PyResult<Vec<Vec<Vec<f32>>>> {
    let ch = x.len();
    let t = x.first().map_or(0, Vec::len);
    if x.iter().any(|row| row.len() != t) {
        return Err(PyValueError::new_err("all channels must have the same length"));
    }
    let flat: Vec<f32> = x.into_iter().flatten().collect();
    let view = manner::chunker::chunk(&Tensor::new(&[ch, t], flat).map_err(py_err)?, size).map_err(py_err)?;
    let p = view.num_chunks();
    Ok(view
        .data
        .data()
        .chunks(p * size)
        .map(|c| c.chunks(size).map(<[f32]>::to_vec).collect())
        .collect())
}

/// Overlap-add average of chunks back to `length` samples per channel.
#[pyfunction]
fn merge(chunks: Vec<Vec<Vec<f32>>>, length: usize) -> PyResult<Vec<Vec<f32>>> {
    let ch = chunks.len();
    let p = chunks.first().map_or(0, Vec::len);
    let c = chunks.first().and_then(|x| x.first()).map_or(0, Vec::len);
    if chunks.iter().any(|x| x.len() != p || x.iter().any(|r| r.len() != c)) {
        return Err(PyValueError::new_err("ragged chunk array"));
    }
    let flat: Vec<f32> = chunks.into_iter().flatten().flatten().collect();
    let view = manner::chunker::ChunkedView {
        data: Tensor::new(&[ch, p, c], flat).map_err(py_err)?,
        original_length: length,
        hop: c / 2,
    };
    let y = manner::chunker::merge(&view).map_err(py_err)?;
    Ok(y.data().chunks(length.max(1)).map(<[f32]>::to_vec).collect())
}

/// STFT magnitudes `[frames][bins]` of a periodic-Hann, non-centered STFT.
#[pyfunction]
#[pyo3(signature = (x, fft_size=512, hop=50, window_length=240))]
fn stft_magnitude(x: Vec<f32>, fft_size: usize, hop: usize, window_length: usize) -> PyResult<Vec<Vec<f32>>> {
    let cfg = StftConfig::new(fft_size, hop, window_length);
    let tape = Tape::new();
    let n = x.len();
    let v = Var::constant(Tensor::new(&[n], x).map_err(py_err)?);
    let m = manner::loss::stft_magnitude(&tape, &v, &cfg).map_err(py_err)?.into_value();
    Ok(m.data().chunks(cfg.bins()).map(<[f32]>::to_vec).collect())
}

/// Weighted total loss of one example and its terms, as a dict.
#[pyfunction]
#[pyo3(signature = (noisy, clean, estimate, weighted=true))]
fn loss<'py>(py: Python<'py>, noisy: Vec<f32>, clean: Vec<f32>, estimate: Vec<f32>, weighted: bool) -> PyResult<Bound<'py, PyDict>> {
    let cfg = LossConfig { weighted, ..LossConfig::default() };
    let as_var = |s: Vec<f32>| -> PyResult<Var<f32>> {
        let n = s.len();
        Ok(Var::constant(Tensor::new(&[1, 1, n], s).map_err(py_err)?))
    };
    let (x, y, h) = (as_var(noisy)?, as_var(clean)?, as_var(estimate)?);
    let tape = Tape::new();
    let (_, r) = weighted_total_loss(&tape, &x, &y, &h, &cfg).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("total", r.total)?;
    d.set_item("l1", r.l1)?;
    d.set_item("alpha", r.alpha)?;
    d.set_item("clean", r.clean)?;
    d.set_item("noise", r.noise)?;
    d.set_item("resolutions", r.resolutions)?;
    Ok(d)
}

#[pyfunction]
fn si_snr(estimate: Vec<f32>, reference: Vec<f32>) -> PyResult<f64> {
    manner::metrics::si_snr(&estimate, &reference).map_err(py_err)
}

/// `(samples, sample_rate)` of a mono WAV.
#[pyfunction]
fn read_wav(path: &str) -> PyResult<(Vec<f32>, u32)> {
    let clip = manner::audio::read_wav(path).map_err(py_err)?;
    Ok((clip.samples, clip.sample_rate))
}

/// Writes 16-bit PCM.
#[pyfunction]
#[pyo3(signature = (path, samples, sample_rate=16000))]
fn write_wav(path: &str, samples: Vec<f32>, sample_rate: u32) -> PyResult<()> {
    let clip = manner::audio::AudioClip::new(samples, sample_rate).map_err(py_err)?;
    manner::audio::write_wav(path, &clip).map_err(py_err)
}

#[pymodule]
#[pyo3(name = "manner")]
fn manner_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(chunk, m)?)?;
    m.add_function(wrap_pyfunction!(merge, m)?)?;
    m.add_function(wrap_pyfunction!(stft_magnitude, m)?)?;
    m.add_function(wrap_pyfunction!(loss, m)?)?;
    m.add_function(wrap_pyfunction!(si_snr, m)?)?;
    m.add_function(wrap_pyfunction!(read_wav, m)?)?;
    m.add_function(wrap_pyfunction!(write_wav, m)?)?;
    m.add("SAMPLE_RATE", manner::audio::SAMPLE_RATE)?;
    Ok(())
}
