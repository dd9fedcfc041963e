//! Adam with warmup and cosine annealing, global-norm clipping, and the
//! deterministic training loop.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::conformer::Dropout;
use crate::error::{Error, Result};
use crate::features::{self, SynthExample};
use crate::metrics;
use crate::model::{self, FusionMode, Inputs, Model, ModelConfig, Prepared, Schedule};
use crate::nn::Params;
use crate::tensor::{DType, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-9;

/// Separates the held-out split from the training split.
const TEST_SEED_OFFSET: u64 = 0x7e57_5eed;

/// Linear warmup to `peak`, then cosine decay to `peak / 10` at `total`.
pub fn learning_rate(step: usize, total: usize, warmup: usize, peak: f64, schedule: Schedule) -> f64 {
    if step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    match schedule {
        Schedule::Constant => peak,
        Schedule::Cosine => {
            let span = total.saturating_sub(warmup).max(1);
            let progress = ((step - warmup) as f64 / span as f64).min(1.0);
            let floor = peak / 10.0;
            floor + 0.5 * (peak - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

/// Scales every gradient so the global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads.values().map(|g| g.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Params,
    pub v: Params,
    /// Updates applied so far.
    pub t: usize,
}

impl Adam {
    pub fn new(params: &Params) -> Result<Self> {
        let mut m = Params::new();
        for (k, p) in params.iter() {
            m.insert(k.clone(), Tensor::zeros(p.shape())?);
        }
        Ok(Adam { v: m.clone(), m, t: 0 })
    }

    /// Params and moments are rounded to the training dtype after the update.
    pub fn step(&mut self, params: &mut Params, grads: &BTreeMap<String, Tensor>, lr: f64, dtype: DType) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            let m = self.m.get_mut(name)?;
            if m.shape() != g.shape() || p.shape() != g.shape() {
                return Err(Error::shape("adam", p.shape(), g.shape()));
            }
            let v = self.v.get_mut(name)?;
            for (((p, m), v), &g) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *m = dtype.round(ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g);
                *v = dtype.round(ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g);
                *p = dtype.round(*p - lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS));
            }
        }
        Ok(())
    }
}

/// Training and held-out synthetic splits for a config.
pub fn datasets(cfg: &ModelConfig) -> Result<(Vec<SynthExample>, Vec<SynthExample>)> {
    let d = &cfg.data;
    let train = features::synth_generate_with(&d.synth, cfg.seed, d.train_examples, d.n_speakers, d.charset_size)?;
    let test = features::synth_generate_with(&d.synth, cfg.seed ^ TEST_SEED_OFFSET, d.test_examples, d.n_speakers, d.charset_size)?;
    Ok((train, test))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub batch: usize,
    /// Clips whose whole video stream was dropped.
    pub masked_clips: usize,
}

pub const LOSS_CSV_HEADER: &str = "step,lr,loss,grad_norm,batch,masked_clips";

impl StepLog {
    pub fn csv_row(&self) -> String {
        format!("{},{:e},{:.9},{:.6},{},{}", self.step, self.lr, self.loss, self.grad_norm, self.batch, self.masked_clips)
    }
}

/// A model plus optimizer state and the cached training split.
pub struct Trainer {
    pub model: Model,
    pub opt: Adam,
    /// Completed steps.
    pub step: usize,
    raw: Vec<SynthExample>,
    prepared: Vec<Prepared>,
}

impl Trainer {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        let model = Model::new(cfg)?;
        let opt = Adam::new(&model.params)?;
        Self::resume(model, opt, 0)
    }

    pub fn resume(model: Model, opt: Adam, step: usize) -> Result<Self> {
        let (raw, _) = datasets(&model.cfg)?;
        let prepared = model::prepare_all(&raw, &model.cfg)?;
        Ok(Trainer { model, opt, step, raw, prepared })
    }

    pub fn train_set(&self) -> &[Prepared] {
        &self.prepared
    }

    /// Every random choice in a step is derived from (seed, step), so a
    /// resumed run replays exactly.
    fn step_rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.model.cfg.seed);
        rng.set_stream(((self.step as u64) << 8) | stream);
        rng
    }

    pub fn train_step(&mut self) -> Result<StepLog> {
        let cfg = self.model.cfg.clone();
        let tc = &cfg.train;
        let n = self.prepared.len();
        let mut rng = self.step_rng(1);
        let idx: Vec<usize> = (0..tc.batch).map(|_| rng.random_range(0..n)).collect();

        let mut batch: Vec<Prepared> = idx.iter().map(|&i| self.prepared[i].clone()).collect();
        if cfg.diar.is_some() && tc.distractor_prob > 0.0 && batch.len() >= 2 && rng.random_bool(tc.distractor_prob) {
            let raw: Vec<SynthExample> = idx.iter().map(|&i| self.raw[i].clone()).collect();
            let mixed = metrics::batch_distractor_mix(&raw, rng.random())?;
            let [h, w] = cfg.frontend.input_hw;
            for (p, ex) in batch.iter_mut().zip(&mixed) {
                p.faces = ex.face_tracks.iter().map(|c| features::downsample_clip(c, (h, w))).collect::<Result<_>>()?;
            }
        }
        if let Some([lo, hi]) = tc.noise_snr_db {
            if cfg.fusion.mode == FusionMode::Avsr {
                for p in &mut batch {
                    let snr = rng.random_range(lo..=hi);
                    let wave = features::add_white_noise(&p.wave, snr, &mut rng);
                    p.audio = features::audio_features(&wave)?;
                }
            }
        }
        let mut masked_clips = 0;
        if cfg.fusion.mode == FusionMode::Avsr && tc.video_drop_prob > 0.0 {
            for p in &mut batch {
                if rng.random_bool(tc.video_drop_prob) {
                    masked_clips += 1;
                    let none = vec![false; p.video.len()];
                    p.video.apply_mask(&none)?;
                    for f in &mut p.faces {
                        let none = vec![false; f.len()];
                        f.apply_mask(&none)?;
                    }
                }
            }
        }

        let drop_rng = RefCell::new(self.step_rng(2));
        let dropout = Dropout { rate: cfg.encoder.dropout, rng: &drop_rng };
        let g = Graph::with_dtype(DType::F32);
        let bound = self.model.params.bind(&g);
        let scope = bound.scope("");
        let mut total = None;
        for p in &batch {
            let active = cfg.diar.as_ref().map(|_| p.active_track.as_slice());
            let l = self.model.loss(&g, &scope, Inputs::of(p), &p.transcript, active, Some(&dropout))?;
            total = Some(match total {
                None => l,
                Some(t) => l.add(t)?,
            });
        }
        let loss = total.ok_or_else(|| Error::Contract("empty batch".into()))?.scale(1.0 / batch.len() as f64)?;
        let loss_value = loss.item();
        if !loss_value.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        let mut grads = g.backward(loss)?;
        let mut named = BTreeMap::new();
        for (name, v) in bound.iter() {
            let gr = match grads.take(*v) {
                Some(t) => t,
                None => Tensor::zeros(&v.shape())?,
            };
            named.insert(name.clone(), gr);
        }
        let grad_norm = clip_global_norm(&mut named, tc.clip_norm);
        let lr = learning_rate(self.step, tc.steps, tc.warmup_steps, tc.peak_lr, tc.schedule);
        self.opt.step(&mut self.model.params, &named, lr, DType::F32)?;
        let log = StepLog { step: self.step, lr, loss: loss_value, grad_norm, batch: batch.len(), masked_clips };
        self.step += 1;
        Ok(log)
    }

    /// Runs until `cfg.train.steps`, calling `on_step` after each update.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepLog, &Trainer) -> Result<()>) -> Result<Vec<StepLog>> {
        let mut logs = Vec::new();
        while self.step < self.model.cfg.train.steps {
            let log = self.train_step()?;
            on_step(&log, self)?;
            logs.push(log);
        }
        Ok(logs)
    }
}

/// How the video stream is presented at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Vsr,
    Avsr,
    /// Audio only: every video frame dropped.
    Ao,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vsr" => Ok(EvalMode::Vsr),
            "avsr" => Ok(EvalMode::Avsr),
            "ao" => Ok(EvalMode::Ao),
            other => Err(Error::Config(format!("mode: unknown {other:?} (expected vsr, avsr or ao)"))),
        }
    }
}

impl EvalMode {
    pub fn tag(self) -> &'static str {
        match self {
            EvalMode::Vsr => "vsr",
            EvalMode::Avsr => "avsr",
            EvalMode::Ao => "ao",
        }
    }

    pub fn check(self, cfg: &ModelConfig) -> Result<()> {
        let ok = matches!(
            (self, cfg.fusion.mode),
            (EvalMode::Vsr, FusionMode::Vsr) | (EvalMode::Avsr | EvalMode::Ao, FusionMode::Avsr)
        );
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "mode: {} does not apply to a {} model",
                self.tag(),
                format!("{:?}", cfg.fusion.mode).to_lowercase()
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceResult {
    pub index: usize,
    pub reference: String,
    pub hypothesis: String,
    pub errors: usize,
    pub ref_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub utterances: Vec<UtteranceResult>,
    /// Corpus-level: total errors over total reference length.
    pub wer: f64,
}

pub const EVAL_CSV_HEADER: &str = "index,reference,hypothesis,errors,ref_len";

impl EvalReport {
    pub fn from_utterances(utterances: Vec<UtteranceResult>) -> Result<Self> {
        let refs: usize = utterances.iter().map(|u| u.ref_len).sum();
        if refs == 0 {
            return Err(Error::Contract("evaluation needs at least one non-empty reference".into()));
        }
        let errs: usize = utterances.iter().map(|u| u.errors).sum();
        Ok(EvalReport { wer: errs as f64 / refs as f64, utterances })
    }

    pub fn csv(&self) -> String {
        let mut s = String::from(EVAL_CSV_HEADER);
        s.push('\n');
        for u in &self.utterances {
            s.push_str(&format!("{},{},{},{},{}\n", u.index, u.reference, u.hypothesis, u.errors, u.ref_len));
        }
        s
    }
}

/// Drops every frame of the video and of each face track.
pub fn audio_only(p: &Prepared) -> Result<Prepared> {
    let mut p = p.clone();
    let none = vec![false; p.video.len()];
    p.video.apply_mask(&none)?;
    for f in &mut p.faces {
        let none = vec![false; f.len()];
        f.apply_mask(&none)?;
    }
    Ok(p)
}

/// Corpus WER with beam search.
pub fn evaluate(model: &Model, data: &[Prepared], mode: EvalMode, beam: usize) -> Result<EvalReport> {
    mode.check(&model.cfg)?;
    if data.is_empty() {
        return Err(Error::Contract("empty evaluation set".into()));
    }
    let vocab = model.vocab();
    let mut rows = Vec::with_capacity(data.len());
    for (i, p) in data.iter().enumerate() {
        let owned;
        let p = if mode == EvalMode::Ao {
            owned = audio_only(p)?;
            &owned
        } else {
            p
        };
        let (d, _) = model.transcribe(Inputs::of(p), beam)?;
        let (_, c) = metrics::wer_counts(&p.transcript, &d.tokens)?;
        rows.push(UtteranceResult {
            index: i,
            reference: vocab.decode(&p.transcript)?,
            hypothesis: vocab.decode(&d.tokens)?,
            errors: c.errors(),
            ref_len: p.transcript.len(),
        });
    }
    EvalReport::from_utterances(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiarUtterance {
    pub index: usize,
    pub wer: f64,
    pub der: f64,
    /// `None` when nothing was decoded.
    pub wder: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiarReport {
    pub utterances: Vec<DiarUtterance>,
    /// Corpus-level rates: summed errors over summed totals.
    pub wer: f64,
    pub der: f64,
    pub wder: f64,
}

pub const DIAR_CSV_HEADER: &str = "wer,der,wder";

impl DiarReport {
    pub fn csv(&self) -> String {
        format!("{DIAR_CSV_HEADER}\n{:.6},{:.6},{:.6}\n", self.wer, self.der, self.wder)
    }

    pub fn utterance_csv(&self) -> String {
        let mut s = String::from("index,wer,der,wder\n");
        for u in &self.utterances {
            let w = u.wder.map_or_else(String::new, |w| format!("{w:.6}"));
            s.push_str(&format!("{},{:.6},{:.6},{}\n", u.index, u.wer, u.der, w));
        }
        s
    }
}

/// Transcribes each clip and attributes speakers from the selected face:
/// per frame for DER, at each token's emission frame for WDER.
pub fn diarize_eval(model: &Model, data: &[Prepared], beam: usize) -> Result<DiarReport> {
    if model.cfg.diar.is_none() {
        return Err(Error::Config("diarize: model has no diar section".into()));
    }
    if data.is_empty() {
        return Err(Error::Contract("empty evaluation set".into()));
    }
    let vocab = model.vocab();
    let frame_s = 1.0 / features::VIDEO_FPS;
    let (mut errs, mut refs) = (0usize, 0usize);
    let (mut der_err, mut der_total) = (0.0, 0.0);
    let (mut wd_wrong, mut wd_total) = (0usize, 0usize);
    let mut rows = Vec::with_capacity(data.len());
    for (i, p) in data.iter().enumerate() {
        let (d, faces) = model.transcribe(Inputs::of(p), beam)?;
        let faces = faces.ok_or_else(|| Error::State("diarization model returned no face selection".into()))?;
        let label = |f: usize| features::speaker_label(p.track_speakers[f]);
        let (wer, c) = metrics::wer_counts(&p.transcript, &d.tokens)?;
        errs += c.errors();
        refs += p.transcript.len();

        let labels: Vec<Option<String>> = faces.iter().map(|&f| Some(label(f))).collect();
        let hyp_segments = metrics::frames_to_segments(&labels, frame_s);
        let dr = metrics::der_exact(&p.speaker_spans, &hyp_segments)?;
        der_err += dr.false_alarm + dr.missed + dr.confusion;
        der_total += dr.total;

        let ref_words: Vec<(String, String)> = p
            .transcript
            .iter()
            .zip(&p.token_speakers)
            .map(|(&t, &s)| Ok((vocab.decode(&[t])?, features::speaker_label(s))))
            .collect::<Result<_>>()?;
        let wder = if d.tokens.is_empty() {
            None
        } else {
            let mut hyp: Vec<metrics::WordHyp> = d
                .tokens
                .iter()
                .zip(&d.frames)
                .map(|(&t, &f)| Ok(metrics::WordHyp::new(vocab.decode(&[t])?, label(faces[f.min(faces.len() - 1)]))))
                .collect::<Result<_>>()?;
            let w = metrics::wder(&ref_words, &mut hyp)?;
            wd_wrong += w.correct_wrong_speaker + w.substituted_wrong_speaker + w.inserted_wrong_speaker;
            wd_total += w.correct + w.substituted + w.inserted;
            Some(w.wder)
        };
        rows.push(DiarUtterance { index: i, wer, der: dr.der, wder });
    }
    Ok(DiarReport {
        utterances: rows,
        wer: errs as f64 / refs as f64,
        der: if der_total > 0.0 { der_err / der_total } else { 0.0 },
        wder: if wd_total > 0 { wd_wrong as f64 / wd_total as f64 } else { 0.0 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let lr = |s| learning_rate(s, 100, 10, 1.0, Schedule::Cosine);
        assert!((lr(0) - 0.1).abs() < 1e-12);
        assert!((lr(9) - 1.0).abs() < 1e-12);
        assert!((lr(10) - 1.0).abs() < 1e-12);
        assert!((lr(100) - 0.1).abs() < 1e-12);
        assert!(lr(55) < lr(30));
        assert_eq!(learning_rate(50, 100, 10, 0.5, Schedule::Constant), 0.5);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = BTreeMap::new();
        g.insert("a".to_string(), Tensor::new(&[2], vec![3.0, 4.0]).unwrap());
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g["a"].data()[0] - 0.6).abs() < 1e-12);
        assert_eq!(clip_global_norm(&mut g, 10.0), 1.0);
    }

    #[test]
    fn adam_first_step_is_sign_times_lr() {
        let mut p = Params::new();
        p.insert("w", Tensor::new(&[2], vec![1.0, 1.0]).unwrap());
        let mut opt = Adam::new(&p).unwrap();
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::new(&[2], vec![0.5, -2.0]).unwrap());
        opt.step(&mut p, &g, 0.1, DType::F64).unwrap();
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] - 1.1).abs() < 1e-6);
    }
}
