//! Full recognizer: configuration, parameter layout, forward pass, loss and
//! decoding for VSR, AVSR and audio-visual diarization.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::conformer::{self, ConformerConfig, Dropout, LN_EPS};
use crate::error::{Error, Result};
use crate::features::{self, AudioFeatures, SynthConfig, SynthExample, STACKED_DIM};
use crate::frontends::{FrontEndConfig, FrontEndKind, VideoClip};
use crate::metrics::{self, FaceAttentionConfig, FaceSelection};
use crate::nn::{self, Init, ParamSpec, Params, Scope, SpecBuilder};
use crate::tensor::{DType, Tensor};
use crate::transducer::{self, Decoded, DecoderConfig, DecoderRuntime, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Vsr,
    Avsr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub mode: FusionMode,
    /// Conformer layers on the video stream before fusion (AVSR only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video_layers: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    #[serde(default = "d_schedule")]
    pub schedule: Schedule,
    /// Probability of dropping a clip's entire video stream.
    #[serde(default)]
    pub video_drop_prob: f64,
    #[serde(default = "d_clip")]
    pub clip_norm: f64,
    /// Weight of the face-selection loss (diarization models).
    #[serde(default = "d_face_weight")]
    pub face_loss_weight: f64,
    /// Probability that a diarization training example gains distractor faces.
    #[serde(default)]
    pub distractor_prob: f64,
    /// Per-clip white-noise SNR range in dB for training audio; clean if absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_snr_db: Option<[f64; 2]>,
}

fn d_schedule() -> Schedule {
    Schedule::Cosine
}
fn d_clip() -> f64 {
    5.0
}
fn d_face_weight() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub charset_size: usize,
    pub train_examples: usize,
    pub test_examples: usize,
    /// Speakers per example; above 1 produces diarization data.
    #[serde(default = "d_speakers")]
    pub n_speakers: usize,
    #[serde(default)]
    pub synth: SynthConfig,
}

fn d_speakers() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiarConfig {
    pub attn_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub frontend: FrontEndConfig,
    pub encoder: ConformerConfig,
    pub decoder: DecoderConfig,
    pub fusion: FusionConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diar: Option<DiarConfig>,
    pub seed: u64,
}

fn field(path: &str, e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("{path}: {m}")),
        other => other,
    }
}

impl ModelConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.frontend.validate().map_err(|e| field("frontend", e))?;
        self.encoder.validate().map_err(|e| field("encoder", e))?;
        self.decoder.validate()?;
        let d = self.encoder.model_dim;
        if self.frontend.out_dim != d {
            return Err(Error::Config(format!(
                "frontend.out_dim: {} must equal encoder.model_dim {d}",
                self.frontend.out_dim
            )));
        }
        match self.fusion.mode {
            FusionMode::Vsr => {
                if self.fusion.video_layers.is_some() {
                    return Err(Error::Config("fusion.video_layers: not allowed for vsr".into()));
                }
                if self.diar.is_some() {
                    return Err(Error::Config("diar: requires avsr fusion".into()));
                }
            }
            FusionMode::Avsr => {
                if self.frontend.kind != FrontEndKind::Lp {
                    return Err(Error::Config("frontend.kind: avsr fusion uses the lp front-end".into()));
                }
                if self.fusion.video_layers.is_none() {
                    return Err(Error::Config("fusion.video_layers: required for avsr".into()));
                }
            }
        }
        let t = &self.train;
        if t.batch == 0 {
            return Err(Error::Config("train.batch: must be positive".into()));
        }
        if !(t.peak_lr > 0.0) || !t.peak_lr.is_finite() {
            return Err(Error::Config("train.peak_lr: must be positive".into()));
        }
        for (name, p) in [("video_drop_prob", t.video_drop_prob), ("distractor_prob", t.distractor_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("train.{name}: {p} outside [0, 1]")));
            }
        }
        if let Some([lo, hi]) = t.noise_snr_db {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Config("train.noise_snr_db: need finite [low, high]".into()));
            }
        }
        if !(t.clip_norm > 0.0) {
            return Err(Error::Config("train.clip_norm: must be positive".into()));
        }
        let dc = &self.data;
        if dc.charset_size == 0 || dc.charset_size > 26 {
            return Err(Error::Config("data.charset_size: must be in 1..=26".into()));
        }
        if dc.train_examples == 0 {
            return Err(Error::Config("data.train_examples: must be positive".into()));
        }
        dc.synth.validate().map_err(|e| field("data.synth", e))?;
        let [h, w] = self.frontend.input_hw;
        if dc.synth.frame_size % h != 0 || dc.synth.frame_size % w != 0 {
            return Err(Error::Config(format!(
                "frontend.input_hw: {h}×{w} does not divide the {0}×{0} synthetic frames",
                dc.synth.frame_size
            )));
        }
        if let Some(dz) = &self.diar {
            if dz.attn_dim == 0 {
                return Err(Error::Config("diar.attn_dim: must be positive".into()));
            }
        }
        if dc.n_speakers > 1 && self.diar.is_none() {
            return Err(Error::Config("data.n_speakers: multi-speaker data needs a diar section".into()));
        }
        Ok(())
    }

    /// Canonical JSON: defaults filled in, keys sorted, no whitespace.
    pub fn canonical_json(&self) -> Result<String> {
        let v = serde_json::to_value(self)?;
        Ok(serde_json::to_string(&v)?)
    }

    /// SHA-256 of the canonical JSON, hex encoded.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.canonical_json()?.as_bytes())))
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::alphabet(self.data.charset_size)
    }

    pub fn video_encoder(&self) -> Option<ConformerConfig> {
        self.fusion.video_layers.map(|depth| ConformerConfig { depth, ..self.encoder.clone() })
    }

    pub fn specs(&self) -> Result<Vec<ParamSpec>> {
        let d = self.encoder.model_dim;
        let mut b = SpecBuilder::new("");
        b.scope("frontend", |s| {
            let _ = self.frontend.specs(s);
        });
        self.frontend.validate()?;
        b.scope("encoder", |s| self.encoder.specs(s));
        b.scope("decoder", |s| self.decoder.specs(s, self.data.charset_size + 1, d));
        if let Some(v) = self.video_encoder() {
            b.scope("video_enc", |s| v.specs(s));
            b.add("mask_emb", &[d], Init::Normal(0.1))
                .layer_norm("audio_ln", STACKED_DIM)
                .linear("fuse", d + STACKED_DIM, d, true);
        }
        if let Some(dz) = &self.diar {
            let fa = FaceAttentionConfig { audio_dim: STACKED_DIM, face_dim: d, attn_dim: dz.attn_dim };
            b.scope("diar", |s| fa.specs(s));
        }
        Ok(b.finish())
    }

    pub fn count_params(&self) -> Result<usize> {
        Ok(nn::count(&self.specs()?))
    }
}

/// An example converted to model inputs.
#[derive(Debug, Clone)]
pub struct Prepared {
    /// Downsampled to the front-end resolution.
    pub video: VideoClip,
    pub wave: Vec<f64>,
    pub audio: AudioFeatures,
    pub faces: Vec<VideoClip>,
    pub transcript: Vec<usize>,
    pub token_speakers: Vec<usize>,
    pub track_speakers: Vec<usize>,
    pub active_track: Vec<usize>,
    pub speaker_spans: Vec<metrics::SpeakerSegment>,
}

pub fn prepare(ex: &SynthExample, cfg: &ModelConfig) -> Result<Prepared> {
    let [h, w] = cfg.frontend.input_hw;
    let faces = if cfg.diar.is_some() {
        ex.face_tracks.iter().map(|c| features::downsample_clip(c, (h, w))).collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    Ok(Prepared {
        video: features::downsample_clip(&ex.video, (h, w))?,
        wave: ex.audio.clone(),
        audio: features::audio_features(&ex.audio)?,
        faces,
        transcript: ex.transcript.clone(),
        token_speakers: ex.token_speakers.clone(),
        track_speakers: ex.track_speakers.clone(),
        active_track: ex.active_track.clone(),
        speaker_spans: ex.speaker_spans.clone(),
    })
}

pub fn prepare_all(data: &[SynthExample], cfg: &ModelConfig) -> Result<Vec<Prepared>> {
    data.iter().map(|e| prepare(e, cfg)).collect()
}

/// What the network sees for one utterance.
#[derive(Clone, Copy)]
pub struct Inputs<'a> {
    pub video: &'a VideoClip,
    pub audio: &'a AudioFeatures,
    pub faces: &'a [VideoClip],
}

impl<'a> Inputs<'a> {
    pub fn of(p: &'a Prepared) -> Self {
        Inputs { video: &p.video, audio: &p.audio, faces: &p.faces }
    }
}

pub struct Encoded<'g> {
    pub enc: Var<'g>,
    pub faces: Option<FaceSelection<'g>>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: Params,
    vocab: Vocab,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cfg.seed);
        let mut params = Params::init(&cfg.specs()?, &mut rng)?;
        for (_, t) in params.iter_mut() {
            *t = t.to_dtype(DType::F32)?;
        }
        let vocab = cfg.vocab()?;
        Ok(Model { cfg, params, vocab })
    }

    pub fn with_params(cfg: ModelConfig, params: Params) -> Result<Self> {
        cfg.validate()?;
        params.matches(&cfg.specs()?)?;
        let vocab = cfg.vocab()?;
        Ok(Model { cfg, params, vocab })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    /// Encoder output `[T×D]` for one utterance.
    pub fn encode<'g>(
        &self,
        g: &'g Graph,
        p: &Scope<'_, 'g>,
        x: Inputs<'_>,
        dropout: Option<&Dropout<'_>>,
    ) -> Result<Encoded<'g>> {
        let cfg = &self.cfg;
        let fe = p.sub("frontend");
        match cfg.fusion.mode {
            FusionMode::Vsr => {
                let emb = cfg.frontend.forward(g, x.video, &fe)?;
                let enc = conformer::encode(emb, &cfg.encoder, &p.sub("encoder"), dropout)?;
                Ok(Encoded { enc, faces: None })
            }
            FusionMode::Avsr => {
                let vcfg = cfg.video_encoder().ok_or_else(|| Error::Config("fusion.video_layers missing".into()))?;
                let ta = x.audio.len();
                let audio = g.constant(x.audio.frames().clone());
                let (video, faces) = if cfg.diar.is_some() {
                    if x.faces.is_empty() {
                        return Err(Error::Input("diarization model needs face tracks".into()));
                    }
                    let embs = x
                        .faces
                        .iter()
                        .map(|c| {
                            let e = cfg.frontend.forward(g, c, &fe)?;
                            e.gather_rows(&features::nearest_video_index(c.len(), ta))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let sel = metrics::face_attention_select(audio, &embs, &p.sub("diar"))?;
                    let v = conformer::encode(sel.fused, &vcfg, &p.sub("video_enc"), dropout)?;
                    (v, Some(sel))
                } else {
                    let tv = x.video.len();
                    let v = cfg.frontend.forward(g, x.video, &fe)?;
                    let v = conformer::encode(v, &vcfg, &p.sub("video_enc"), dropout)?;
                    let keep: Vec<f64> = x.video.mask().iter().map(|&m| f64::from(u8::from(m))).collect();
                    let v = if keep.iter().all(|&k| k == 1.0) {
                        v
                    } else {
                        let d = cfg.encoder.model_dim;
                        let drop: Vec<f64> = keep.iter().map(|k| 1.0 - k).collect();
                        let mask_rows = p.get("mask_emb")?.reshape(&[1, d])?.gather_rows(&vec![0; tv])?;
                        let keep = g.constant(Tensor::new(&[tv], keep)?);
                        let drop = g.constant(Tensor::new(&[tv], drop)?);
                        v.scale_rows(keep)?.add(mask_rows.scale_rows(drop)?)?
                    };
                    (v.gather_rows(&features::nearest_video_index(tv, ta))?, None)
                };
                let a = p.layer_norm("audio_ln", audio, LN_EPS)?;
                let fused = p.linear("fuse", Var::concat_cols(&[video, a])?)?;
                let enc = conformer::encode(fused, &cfg.encoder, &p.sub("encoder"), dropout)?;
                Ok(Encoded { enc, faces })
            }
        }
    }

    /// Transducer loss plus, for diarization models, the weighted
    /// face-selection cross-entropy.
    pub fn loss<'g>(
        &self,
        g: &'g Graph,
        p: &Scope<'_, 'g>,
        x: Inputs<'_>,
        transcript: &[usize],
        active_track: Option<&[usize]>,
        dropout: Option<&Dropout<'_>>,
    ) -> Result<Var<'g>> {
        let e = self.encode(g, p, x, dropout)?;
        let pred = transducer::prediction_network(&p.sub("decoder"), &self.cfg.decoder, transcript)?;
        let lp = transducer::joint_log_probs(e.enc, pred, &p.sub("decoder").sub("joint"))?;
        let t = e.enc.shape()[0];
        let mut loss = transducer::rnnt_loss_var(lp, t, transcript)?;
        if let (Some(sel), Some(active)) = (&e.faces, active_track) {
            let idx = features::nearest_video_index(active.len(), t);
            let target: Vec<usize> = idx.iter().map(|&j| active[j]).collect();
            let ce = sel.log_weights.pick(&target)?.mean()?.scale(-self.cfg.train.face_loss_weight)?;
            loss = loss.add(ce)?;
        }
        Ok(loss)
    }

    /// Inference encoder output, plus per-frame selected face for
    /// diarization models.
    pub fn encode_eval(&self, x: Inputs<'_>) -> Result<(Tensor, Option<Vec<usize>>)> {
        let g = Graph::inference(DType::F64);
        let bound = self.params.bind(&g);
        let e = self.encode(&g, &bound.scope(""), x, None)?;
        let faces = e.faces.as_ref().map(FaceSelection::speaker_ids);
        Ok((e.enc.to_tensor()?, faces))
    }

    pub fn transcribe(&self, x: Inputs<'_>, beam_width: usize) -> Result<(Decoded, Option<Vec<usize>>)> {
        let (enc, faces) = self.encode_eval(x)?;
        let rt = DecoderRuntime::new(&self.params, "decoder", &self.cfg.decoder)?;
        let d = if beam_width <= 1 {
            transducer::greedy_decode(&rt, &enc)?
        } else {
            transducer::beam_decode(&rt, &enc, beam_width)?
        };
        Ok((d, faces))
    }
}
