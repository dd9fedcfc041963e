//! Python bindings: configs, models, training, features and scoring.

use std::path::PathBuf;

use avsk::checkpoint::Checkpoint;
use avsk::features::{self, SynthExample};
use avsk::metrics::{self, SpeakerSegment, WordHyp};
use avsk::model::{self, Inputs};
use avsk::robustness::{self, DropSpec, Suite};
use avsk::train;
use avsk::transducer::{self, JointLattice};
use avsk::{Error, Tensor};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Input(_) | Error::Contract(_) | Error::Shape { .. } | Error::Vocab { .. } => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

#[pyclass(name = "ModelConfig", from_py_object)]
#[derive(Clone)]
struct PyModelConfig(model::ModelConfig);

#[pymethods]
impl PyModelConfig {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        model::ModelConfig::from_json(text).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        model::ModelConfig::load(&path).map(Self).map_err(py_err)
    }

    fn canonical_json(&self) -> PyResult<String> {
        self.0.canonical_json().map_err(py_err)
    }

    fn hash(&self) -> PyResult<String> {
        self.0.hash().map_err(py_err)
    }

    fn count_params(&self) -> PyResult<usize> {
        self.0.count_params().map_err(py_err)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.0.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.0.seed = seed;
    }

    #[getter]
    fn steps(&self) -> usize {
        self.0.train.steps
    }

    #[setter]
    fn set_steps(&mut self, steps: usize) {
        self.0.train.steps = steps;
    }
}

#[pyclass(name = "Example", from_py_object)]
#[derive(Clone)]
struct PyExample(SynthExample);

#[pymethods]
impl PyExample {
    #[getter]
    fn frames(&self) -> usize {
        self.0.frames()
    }

    #[getter]
    fn transcript(&self) -> PyResult<String> {
        transducer::Vocab::alphabet(26).and_then(|v| v.decode(&self.0.transcript)).map_err(py_err)
    }

    #[getter]
    fn audio(&self) -> Vec<f64> {
        self.0.audio.clone()
    }

    /// `(T, H, W, 3)`
    #[getter]
    fn video_shape(&self) -> Vec<usize> {
        self.0.video.frames().shape().to_vec()
    }

    /// Row-major pixel values.
    fn video(&self) -> Vec<f64> {
        self.0.video.frames().data().to_vec()
    }

    /// `(speaker, start_s, end_s)` triples.
    #[getter]
    fn speaker_spans(&self) -> Vec<(String, f64, f64)> {
        self.0.speaker_spans.iter().map(|s| (s.speaker.clone(), s.start_s, s.end_s)).collect()
    }

    #[getter]
    fn face_tracks(&self) -> usize {
        self.0.face_tracks.len()
    }
}

#[pyclass(name = "Model")]
struct PyModel(model::Model);

#[pymethods]
impl PyModel {
    #[new]
    fn new(config: &PyModelConfig) -> PyResult<Self> {
        model::Model::new(config.0.clone()).map(Self).map_err(py_err)
    }

    /// Loads a checkpoint written for `config`.
    #[staticmethod]
    fn load(checkpoint: PathBuf, config: &PyModelConfig) -> PyResult<Self> {
        Checkpoint::load(&checkpoint)
            .and_then(|c| c.into_model(config.0.clone()))
            .map(Self)
            .map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::new(&self.0, None, 0).and_then(|c| c.save(&path)).map_err(py_err)
    }

    fn num_params(&self) -> usize {
        self.0.params.numel()
    }

    #[pyo3(signature = (example, beam=4))]
    fn transcribe(&self, example: &PyExample, beam: usize) -> PyResult<String> {
        let p = model::prepare(&example.0, &self.0.cfg).map_err(py_err)?;
        let (d, _) = self.0.transcribe(Inputs::of(&p), beam).map_err(py_err)?;
        self.0.vocab().decode(&d.tokens).map_err(py_err)
    }

    /// Corpus WER; `mode` is "vsr", "avsr" or "ao".
    #[pyo3(signature = (examples, mode, beam=4))]
    fn evaluate(&self, examples: Vec<PyExample>, mode: &str, beam: usize) -> PyResult<f64> {
        let raw: Vec<SynthExample> = examples.into_iter().map(|e| e.0).collect();
        let data = model::prepare_all(&raw, &self.0.cfg).map_err(py_err)?;
        let mode = mode.parse().map_err(py_err)?;
        train::evaluate(&self.0, &data, mode, beam).map(|r| r.wer).map_err(py_err)
    }
}

#[pyclass(name = "Trainer", unsendable)]
struct PyTrainer(train::Trainer);

#[pymethods]
impl PyTrainer {
    #[new]
    fn new(config: &PyModelConfig) -> PyResult<Self> {
        train::Trainer::new(config.0.clone()).map(Self).map_err(py_err)
    }

    /// One optimizer step; returns the batch loss.
    fn step(&mut self) -> PyResult<f64> {
        self.0.train_step().map(|l| l.loss).map_err(py_err)
    }

    #[getter]
    fn steps_done(&self) -> usize {
        self.0.step
    }

    fn model(&self) -> PyModel {
        PyModel(self.0.model.clone())
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::new(&self.0.model, Some(&self.0.opt), self.0.step as u64)
            .and_then(|c| c.save(&path))
            .map_err(py_err)
    }
}

#[pyfunction]
#[pyo3(signature = (seed, n, speakers=1, charset=10))]
fn synth_generate(seed: u64, n: usize, speakers: usize, charset: usize) -> PyResult<Vec<PyExample>> {
    features::synth_generate(seed, n, speakers, charset)
        .map(|v| v.into_iter().map(PyExample).collect())
        .map_err(py_err)
}

#[pyfunction]
fn save_shard(path: PathBuf, examples: Vec<PyExample>) -> PyResult<()> {
    let raw: Vec<SynthExample> = examples.into_iter().map(|e| e.0).collect();
    features::save_shard(&path, &raw).map_err(py_err)
}

#[pyfunction]
fn load_shard(path: PathBuf) -> PyResult<Vec<PyExample>> {
    features::load_shard(&path).map(|v| v.into_iter().map(PyExample).collect()).map_err(py_err)
}

/// `[N×80]` log-mel frames of a 16 kHz waveform.
#[pyfunction]
fn logmel(wave: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
    features::logmel(&wave).map(|t| rows(&t)).map_err(py_err)
}

/// `[ceil(N/3)×240]` stacked acoustic frames.
#[pyfunction]
fn audio_features(wave: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
    features::audio_features(&wave).map(|a| rows(a.frames())).map_err(py_err)
}

#[pyfunction]
fn wer(reference: Vec<String>, hypothesis: Vec<String>) -> PyResult<f64> {
    metrics::wer(&reference, &hypothesis).map_err(py_err)
}

fn segments(v: Vec<(String, f64, f64)>) -> PyResult<Vec<SpeakerSegment>> {
    v.into_iter().map(|(s, a, b)| SpeakerSegment::new(s, a, b).map_err(py_err)).collect()
}

/// Returns `(der, false_alarm_s, missed_s, confusion_s, total_s)`.
#[pyfunction]
#[pyo3(signature = (reference, hypothesis, resolution=0.01))]
fn der(
    reference: Vec<(String, f64, f64)>,
    hypothesis: Vec<(String, f64, f64)>,
    resolution: f64,
) -> PyResult<(f64, f64, f64, f64, f64)> {
    let r = metrics::der(&segments(reference)?, &segments(hypothesis)?, resolution).map_err(py_err)?;
    Ok((r.der, r.false_alarm, r.missed, r.confusion, r.total))
}

/// Words are `(word, speaker)` pairs.
#[pyfunction]
fn wder(reference: Vec<(String, String)>, hypothesis: Vec<(String, String)>) -> PyResult<f64> {
    let mut hyp: Vec<WordHyp> = hypothesis.into_iter().map(|(w, s)| WordHyp::new(w, s)).collect();
    metrics::wder(&reference, &mut hyp).map(|r| r.wder).map_err(py_err)
}

/// Transducer loss for a normalized `[T][U+1][V]` log-probability lattice.
#[pyfunction]
fn rnnt_loss(log_probs: Vec<Vec<Vec<f64>>>, labels: Vec<usize>) -> PyResult<f64> {
    let t = log_probs.len();
    let u1 = log_probs.first().map_or(0, Vec::len);
    let v = log_probs.first().and_then(|r| r.first()).map_or(0, Vec::len);
    let data: Vec<f64> = log_probs.into_iter().flatten().flatten().collect();
    let lattice = Tensor::new(&[t, u1, v], data).and_then(JointLattice::new).map_err(py_err)?;
    transducer::rnnt_loss(&lattice, &labels).map_err(py_err)
}

#[pyfunction]
fn bytes_per_param(memory_bytes: f64, params: f64) -> PyResult<f64> {
    avsk::bench::bytes_per_param(memory_bytes, params).map_err(py_err)
}

/// `True` marks a kept frame.
#[pyfunction]
fn make_drop_mask(frames: usize, suite: &str, fraction: f64, seed: u64) -> PyResult<Vec<bool>> {
    let suite: Suite = suite.parse().map_err(py_err)?;
    let spec = DropSpec::new(suite, fraction, seed).map_err(py_err)?;
    Ok(robustness::make_drop_mask(frames, &spec))
}

#[pyfunction]
fn lp_params(input_h: usize, input_w: usize, out_dim: usize) -> PyResult<usize> {
    avsk::frontends::count_params(&avsk::frontends::FrontEndConfig::lp([input_h, input_w], out_dim)).map_err(py_err)
}

#[pymodule]
fn avsk_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyExample>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(synth_generate, m)?)?;
    m.add_function(wrap_pyfunction!(save_shard, m)?)?;
    m.add_function(wrap_pyfunction!(load_shard, m)?)?;
    m.add_function(wrap_pyfunction!(logmel, m)?)?;
    m.add_function(wrap_pyfunction!(audio_features, m)?)?;
    m.add_function(wrap_pyfunction!(wer, m)?)?;
    m.add_function(wrap_pyfunction!(der, m)?)?;
    m.add_function(wrap_pyfunction!(wder, m)?)?;
    m.add_function(wrap_pyfunction!(rnnt_loss, m)?)?;
    m.add_function(wrap_pyfunction!(bytes_per_param, m)?)?;
    m.add_function(wrap_pyfunction!(make_drop_mask, m)?)?;
    m.add_function(wrap_pyfunction!(lp_params, m)?)?;
    Ok(())
}
