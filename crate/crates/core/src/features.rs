//! Acoustic features, frame stacking, video downsampling, audio-visual
//! fusion and the synthetic audio-visual dataset with its shard format.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::{Arc, OnceLock};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontends::{VideoClip, CHANNELS};
use crate::metrics::SpeakerSegment;
use crate::tensor::Tensor;

pub const SAMPLE_RATE: usize = 16_000;
pub const WIN: usize = 400;
pub const HOP: usize = 160;
pub const N_FFT: usize = 512;
pub const N_MELS: usize = 80;
pub const LOG_FLOOR: f64 = 1e-10;
pub const STACK: usize = 3;
pub const STACKED_DIM: usize = N_MELS * STACK;
/// Video rate that puts one frame on each 30 ms stacked acoustic frame.
pub const VIDEO_FPS: f64 = 100.0 / 3.0;
/// Audio samples per video frame.
pub const SAMPLES_PER_FRAME: usize = 480;

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Center frequencies of the 80 triangular filters, evenly spaced on the
/// mel scale over 0–8 kHz.
pub fn mel_centers() -> Vec<f64> {
    mel_points()[1..=N_MELS].to_vec()
}

fn mel_points() -> Vec<f64> {
    let top = hz_to_mel(SAMPLE_RATE as f64 / 2.0);
    (0..N_MELS + 2)
        .map(|i| mel_to_hz(top * i as f64 / (N_MELS + 1) as f64))
        .collect()
}

struct MelBank {
    window: Vec<f64>,
    /// `[N_MELS × (N_FFT/2+1)]`
    filters: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

fn mel_bank() -> &'static MelBank {
    static BANK: OnceLock<MelBank> = OnceLock::new();
    BANK.get_or_init(|| {
        let window = (0..WIN)
            .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / WIN as f64).cos())
            .collect();
        let bins = N_FFT / 2 + 1;
        let pts = mel_points();
        let mut filters = vec![0.0; N_MELS * bins];
        for m in 0..N_MELS {
            let (lo, mid, hi) = (pts[m], pts[m + 1], pts[m + 2]);
            for k in 0..bins {
                let f = k as f64 * SAMPLE_RATE as f64 / N_FFT as f64;
                let w = if f > lo && f <= mid {
                    (f - lo) / (mid - lo)
                } else if f > mid && f < hi {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                filters[m * bins + k] = w;
            }
        }
        let fft = FftPlanner::new().plan_fft_forward(N_FFT);
        MelBank { window, filters, fft }
    })
}

/// Number of 10 ms frames produced for `len` samples.
pub fn logmel_frames(len: usize) -> usize {
    if len < WIN {
        0
    } else {
        1 + (len - WIN) / HOP
    }
}

/// 80-dim log-mel filterbank: 25 ms Hann window, 10 ms hop, 512-point FFT,
/// magnitude spectrum, natural log with a `1e-10` floor.
pub fn logmel(wave: &[f64]) -> Result<Tensor> {
    if wave.len() < WIN {
        return Err(Error::Contract(format!(
            "logmel needs at least {WIN} samples, got {}",
            wave.len()
        )));
    }
    let bank = mel_bank();
    let n = logmel_frames(wave.len());
    let bins = N_FFT / 2 + 1;
    let mut out = Vec::with_capacity(n * N_MELS);
    let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
    let mut mag = vec![0.0; bins];
    for i in 0..n {
        let seg = &wave[i * HOP..i * HOP + WIN];
        for (k, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(if k < WIN { seg[k] * bank.window[k] } else { 0.0 }, 0.0);
        }
        bank.fft.process(&mut buf);
        for (m, b) in mag.iter_mut().zip(&buf) {
            *m = b.norm();
        }
        for m in 0..N_MELS {
            let e: f64 = bank.filters[m * bins..(m + 1) * bins]
                .iter()
                .zip(&mag)
                .map(|(w, x)| w * x)
                .sum();
            out.push(e.max(LOG_FLOOR).ln());
        }
    }
    Tensor::new(&[n, N_MELS], out)
}

/// Stacked acoustic frames `[T_a × 240]` at a 30 ms hop.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioFeatures {
    frames: Tensor,
    pub hop_ms: f64,
}

impl AudioFeatures {
    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }
}

/// Concatenates groups of `factor` consecutive frames; the final group is
/// padded by repeating the last frame.
pub fn stack_frames(x: &Tensor, factor: usize) -> Result<AudioFeatures> {
    if factor == 0 {
        return Err(Error::Config("stacking factor must be at least 1".into()));
    }
    if x.shape().len() != 2 || x.rows() == 0 {
        return Err(Error::Contract("stack_frames needs a non-empty N×D matrix".into()));
    }
    let (n, d) = (x.rows(), x.cols());
    let groups = n.div_ceil(factor);
    let mut out = Vec::with_capacity(groups * factor * d);
    for g in 0..groups {
        for j in 0..factor {
            out.extend_from_slice(x.row((g * factor + j).min(n - 1)));
        }
    }
    Ok(AudioFeatures {
        frames: Tensor::new(&[groups, factor * d], out)?,
        hop_ms: 10.0 * factor as f64,
    })
}

pub fn unstack(a: &AudioFeatures, factor: usize) -> Result<Tensor> {
    let d = a.dim();
    if factor == 0 || d % factor != 0 {
        return Err(Error::Config(format!("cannot unstack dim {d} by {factor}")));
    }
    a.frames.clone().reshape(&[a.len() * factor, d / factor])
}

/// Log-mel followed by 3-frame stacking.
pub fn audio_features(wave: &[f64]) -> Result<AudioFeatures> {
    stack_frames(&logmel(wave)?, STACK)
}

/// Non-overlapping block-mean pooling of one `H×W×C` frame.
pub fn downsample_frame(frame: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let s = frame.shape();
    if s.len() != 3 {
        return Err(Error::Input(format!("frame must be H×W×C, got {s:?}")));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let (th, tw) = target;
    if th == 0 || tw == 0 || h % th != 0 || w % tw != 0 {
        return Err(Error::Config(format!("cannot pool {h}×{w} down to {th}×{tw}")));
    }
    Tensor::new(&[th, tw, c], pool(frame.data(), h, w, c, th, tw))
}

fn pool(x: &[f64], h: usize, w: usize, c: usize, th: usize, tw: usize) -> Vec<f64> {
    let (bh, bw) = (h / th, w / tw);
    let norm = 1.0 / (bh * bw) as f64;
    let mut out = vec![0.0; th * tw * c];
    for y in 0..h {
        for x_ in 0..w {
            let o = ((y / bh) * tw + x_ / bw) * c;
            let i = (y * w + x_) * c;
            for k in 0..c {
                out[o + k] += x[i + k];
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= norm);
    out
}

/// Downsamples every frame of a clip, keeping its mask.
pub fn downsample_clip(clip: &VideoClip, target: (usize, usize)) -> Result<VideoClip> {
    let (h, w) = clip.hw();
    if target == (h, w) {
        return Ok(clip.clone());
    }
    let (th, tw) = target;
    if th == 0 || tw == 0 || h % th != 0 || w % tw != 0 {
        return Err(Error::Config(format!("cannot pool {h}×{w} down to {th}×{tw}")));
    }
    let mut data = Vec::with_capacity(clip.len() * th * tw * CHANNELS);
    for t in 0..clip.len() {
        data.extend(pool(clip.frame(t), h, w, CHANNELS, th, tw));
    }
    VideoClip::with_mask(
        Tensor::new(&[clip.len(), th, tw, CHANNELS], data)?,
        clip.frame_rate_hz,
        clip.mask().to_vec(),
    )
}

/// Video frame nearest in time to each of `ta` acoustic frames, assuming
/// both streams span the same duration. Ties go to the earlier frame.
pub fn nearest_video_index(tv: usize, ta: usize) -> Vec<usize> {
    // Frame centers: video (j+½)/tv, audio (k+½)/ta. The nearest j is
    // ceil(x − ½) with x = (k+½)·tv/ta − ½, evaluated in integers.
    let (tv_i, ta_i) = (tv as i64, ta as i64);
    (0..ta_i)
        .map(|k| {
            let num = (2 * k + 1) * tv_i - 2 * ta_i;
            let den = 2 * ta_i;
            let j = num.div_euclid(den) + i64::from(num.rem_euclid(den) != 0);
            j.clamp(0, tv_i - 1) as usize
        })
        .collect()
}

/// Resamples video embeddings onto the acoustic timeline, substitutes
/// `mask_embedding` for dropped frames, and concatenates per frame.
pub fn fuse_av(video_emb: &Tensor, video_mask: &[bool], mask_embedding: &[f64], audio: &AudioFeatures) -> Result<Tensor> {
    if audio.is_empty() {
        return Err(Error::Contract("fuse_av needs audio frames".into()));
    }
    let (tv, dv) = (video_emb.rows(), video_emb.cols());
    if video_mask.len() != tv || mask_embedding.len() != dv {
        return Err(Error::shape("fuse_av", video_emb.shape(), &[video_mask.len(), mask_embedding.len()]));
    }
    let idx = nearest_video_index(tv, audio.len());
    let mut out = Vec::with_capacity(audio.len() * (dv + audio.dim()));
    for (k, &j) in idx.iter().enumerate() {
        out.extend_from_slice(if video_mask[j] { video_emb.row(j) } else { mask_embedding });
        out.extend_from_slice(audio.frames.row(k));
    }
    Tensor::new(&[audio.len(), dv + audio.dim()], out)
}

// ---------------------------------------------------------------------------
// Synthetic data

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    /// Side of the square generated frames; a multiple of 4.
    #[serde(default = "d_frame")]
    pub frame_size: usize,
    #[serde(default = "d_fpc")]
    pub frames_per_char: usize,
    #[serde(default = "d_gap")]
    pub gap_frames: usize,
    #[serde(default = "d_min")]
    pub min_chars: usize,
    #[serde(default = "d_max")]
    pub max_chars: usize,
    /// Speaker identities available across the dataset.
    #[serde(default = "d_pool")]
    pub speaker_pool: usize,
    /// Amplitude of the white noise floor under every waveform.
    #[serde(default = "d_dither")]
    pub dither: f64,
}

fn d_frame() -> usize {
    16
}
fn d_fpc() -> usize {
    2
}
fn d_gap() -> usize {
    1
}
fn d_min() -> usize {
    2
}
fn d_max() -> usize {
    5
}
fn d_pool() -> usize {
    8
}
fn d_dither() -> f64 {
    1e-3
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            frame_size: d_frame(),
            frames_per_char: d_fpc(),
            gap_frames: d_gap(),
            min_chars: d_min(),
            max_chars: d_max(),
            speaker_pool: d_pool(),
            dither: d_dither(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_size == 0 || self.frame_size % 4 != 0 {
            return Err(Error::Config("synth.frame_size must be a positive multiple of 4".into()));
        }
        if self.frames_per_char == 0 || self.min_chars == 0 || self.min_chars > self.max_chars {
            return Err(Error::Config("synth character timing/length range invalid".into()));
        }
        if self.speaker_pool == 0 {
            return Err(Error::Config("synth.speaker_pool must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthExample {
    /// Mouth track of whoever is speaking at each frame.
    pub video: VideoClip,
    /// 16 kHz waveform, `SAMPLES_PER_FRAME` samples per video frame.
    pub audio: Vec<f64>,
    /// Vocabulary ids (blank excluded).
    pub transcript: Vec<usize>,
    /// Speaker of each transcript token.
    pub token_speakers: Vec<usize>,
    pub speaker_spans: Vec<SpeakerSegment>,
    pub face_tracks: Vec<VideoClip>,
    /// Speaker identity of each face track.
    pub track_speakers: Vec<usize>,
    /// Index into `face_tracks` of the active track at each frame.
    pub active_track: Vec<usize>,
}

impl SynthExample {
    pub fn frames(&self) -> usize {
        self.video.len()
    }
}

pub fn speaker_label(s: usize) -> String {
    format!("spk{s}")
}

/// Tone frequency for vocabulary id `id` (1-based).
pub fn tone_hz(id: usize) -> f64 {
    250.0 + 250.0 * id as f64
}

fn tint(speaker: usize) -> [f64; 3] {
    let mut t = [0.0; 3];
    t[speaker % 3] = 0.04 * (1 + speaker % 4) as f64;
    t
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mouth {
    /// Not speaking.
    Closed,
    /// Speaking, between characters.
    Pause,
    /// Showing vocabulary id (1-based).
    Glyph(usize),
}

/// Renders one `n×n×3` frame.
///
/// Glyph `id` lights cell `(id−1) mod 16` of a 4×4 grid, white for the first
/// sixteen ids and red beyond; a pause is a bar along the bottom row of
/// cells; a closed mouth is background only.
/// `speaker: None` renders on a black background.
pub fn render_frame(n: usize, mouth: Mouth, speaker: Option<usize>) -> Vec<f64> {
    let bg = speaker.map_or([0.0; 3], tint);
    let mut px = Vec::with_capacity(n * n * 3);
    for _ in 0..n * n {
        px.extend_from_slice(&bg);
    }
    let cell = n / 4;
    let mut light = |cy: usize, cx0: usize, cx1: usize, rows: std::ops::Range<usize>, color: [f64; 3]| {
        for y in rows.map(|r| cy * cell + r) {
            for x in cx0 * cell..cx1 * cell {
                px[(y * n + x) * 3..(y * n + x) * 3 + 3].copy_from_slice(&color);
            }
        }
    };
    match mouth {
        Mouth::Closed => {}
        Mouth::Pause => light(3, 0, 4, cell / 2..cell, [0.6, 0.6, 0.6]),
        Mouth::Glyph(id) => {
            let k = (id - 1) % 16;
            let color = if id <= 16 { [1.0, 1.0, 1.0] } else { [1.0, 0.2, 0.2] };
            light(k / 4, k % 4, k % 4 + 1, 0..cell, color);
        }
    }
    px
}

fn tone(out: &mut [f64], start: usize, hz: f64) {
    for (i, s) in out.iter_mut().enumerate() {
        *s += 0.5 * (2.0 * PI * hz * (start + i) as f64 / SAMPLE_RATE as f64).sin();
    }
}

struct Utterance {
    mouths: Vec<Mouth>,
    tokens: Vec<usize>,
}

fn utterance(rng: &mut ChaCha8Rng, cfg: &SynthConfig, charset: usize, lead: bool) -> Utterance {
    let len = rng.random_range(cfg.min_chars..=cfg.max_chars);
    let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(1..=charset)).collect();
    let mut mouths = Vec::new();
    if lead {
        mouths.extend(std::iter::repeat_n(Mouth::Pause, cfg.gap_frames.max(1)));
    }
    for &c in &tokens {
        mouths.extend(std::iter::repeat_n(Mouth::Glyph(c), cfg.frames_per_char));
        mouths.extend(std::iter::repeat_n(Mouth::Pause, cfg.gap_frames));
    }
    Utterance { mouths, tokens }
}

/// Generates `n_examples` examples as a pure function of `seed`.
///
/// With `n_speakers == 1` each example is a single utterance; otherwise it
/// is 2–4 segments alternating among `n_speakers` distinct speakers, each
/// with its own face track.
pub fn synth_generate(seed: u64, n_examples: usize, n_speakers: usize, charset_size: usize) -> Result<Vec<SynthExample>> {
    synth_generate_with(&SynthConfig::default(), seed, n_examples, n_speakers, charset_size)
}

pub fn synth_generate_with(
    cfg: &SynthConfig,
    seed: u64,
    n_examples: usize,
    n_speakers: usize,
    charset_size: usize,
) -> Result<Vec<SynthExample>> {
    cfg.validate()?;
    if charset_size == 0 || charset_size > 26 {
        return Err(Error::Config(format!("charset size {charset_size} outside 1..=26")));
    }
    if n_speakers == 0 || n_speakers > cfg.speaker_pool {
        return Err(Error::Config(format!(
            "{n_speakers} speakers per example exceeds the pool of {}",
            cfg.speaker_pool
        )));
    }
    (0..n_examples)
        .map(|i| synth_example(cfg, seed, i as u64, n_speakers, charset_size))
        .collect()
}

fn synth_example(cfg: &SynthConfig, seed: u64, index: u64, n_speakers: usize, charset: usize) -> Result<SynthExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index + 1);
    let mut pool: Vec<usize> = (0..cfg.speaker_pool).collect();
    for i in 0..n_speakers {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    let speakers = pool[..n_speakers].to_vec();

    let n_segments = if n_speakers == 1 { 1 } else { rng.random_range(2..=4) };
    let mut seg_track = Vec::with_capacity(n_segments);
    for s in 0..n_segments {
        let mut k = rng.random_range(0..n_speakers);
        if s > 0 && n_speakers > 1 && k == seg_track[s - 1] {
            k = (k + 1 + rng.random_range(0..n_speakers - 1)) % n_speakers;
        }
        if s == 1 && n_segments == 2 && k == seg_track[0] {
            k = (k + 1) % n_speakers;
        }
        seg_track.push(k);
    }

    let mut mouths: Vec<Mouth> = Vec::new();
    let mut active = Vec::new();
    let mut transcript = Vec::new();
    let mut token_speakers = Vec::new();
    let mut spans = Vec::new();
    for (s, &k) in seg_track.iter().enumerate() {
        let u = utterance(&mut rng, cfg, charset, s == 0);
        let start = mouths.len();
        mouths.extend(&u.mouths);
        active.extend(std::iter::repeat_n(k, u.mouths.len()));
        token_speakers.extend(std::iter::repeat_n(speakers[k], u.tokens.len()));
        transcript.extend(u.tokens);
        spans.push(SpeakerSegment::new(
            speaker_label(speakers[k]),
            start as f64 / VIDEO_FPS,
            mouths.len() as f64 / VIDEO_FPS,
        )?);
    }
    // Merge adjacent spans of the same speaker.
    spans.dedup_by(|b, a| {
        if a.speaker == b.speaker && (a.end_s - b.start_s).abs() < 1e-12 {
            a.end_s = b.end_s;
            true
        } else {
            false
        }
    });

    let t = mouths.len();
    let n = cfg.frame_size;
    let mut tracks = Vec::with_capacity(n_speakers);
    for (k, &spk) in speakers.iter().enumerate() {
        let mut data = Vec::with_capacity(t * n * n * 3);
        for (f, &m) in mouths.iter().enumerate() {
            let m = if active[f] == k { m } else { Mouth::Closed };
            data.extend(render_frame(n, m, Some(spk)));
        }
        tracks.push(VideoClip::new(Tensor::new(&[t, n, n, 3], data)?, VIDEO_FPS)?);
    }
    let mut video = Vec::with_capacity(t * n * n * 3);
    for f in 0..t {
        video.extend_from_slice(tracks[active[f]].frame(f));
    }
    let video = VideoClip::new(Tensor::new(&[t, n, n, 3], video)?, VIDEO_FPS)?;

    let mut audio = vec![0.0; t * SAMPLES_PER_FRAME];
    for (f, m) in mouths.iter().enumerate() {
        if let Mouth::Glyph(id) = m {
            let s = f * SAMPLES_PER_FRAME;
            tone(&mut audio[s..s + SAMPLES_PER_FRAME], s, tone_hz(*id));
        }
    }
    if cfg.dither > 0.0 {
        for s in audio.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *s += cfg.dither * z;
        }
    }

    Ok(SynthExample {
        video,
        audio,
        transcript,
        token_speakers,
        speaker_spans: spans,
        face_tracks: tracks,
        track_speakers: speakers,
        active_track: active,
    })
}

/// Adds white noise at `snr_db` relative to the signal's mean power.
pub fn add_white_noise<R: Rng + ?Sized>(wave: &[f64], snr_db: f64, rng: &mut R) -> Vec<f64> {
    let power = wave.iter().map(|x| x * x).sum::<f64>() / wave.len().max(1) as f64;
    let sigma = (power / 10f64.powf(snr_db / 10.0)).sqrt();
    wave.iter()
        .map(|&x| {
            let z: f64 = StandardNormal.sample(rng);
            x + sigma * z
        })
        .collect()
}

/// Per-frame nearest-template classifier over clean glyph renderings.
/// Returns `Some(id)` for glyph frames and `None` otherwise.
pub fn classify_frames(clip: &VideoClip, charset_size: usize) -> Vec<Option<usize>> {
    let (n, _) = clip.hw();
    let mut templates: Vec<(Option<usize>, Vec<f64>)> = (1..=charset_size)
        .map(|id| (Some(id), render_frame(n, Mouth::Glyph(id), None)))
        .collect();
    templates.push((None, render_frame(n, Mouth::Pause, None)));
    templates.push((None, render_frame(n, Mouth::Closed, None)));
    (0..clip.len())
        .map(|f| {
            let frame = clip.frame(f);
            let dist = |t: &[f64]| frame.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            templates
                .iter()
                .min_by(|a, b| dist(&a.1).total_cmp(&dist(&b.1)))
                .map(|(l, _)| *l)
                .unwrap_or(None)
        })
        .collect()
}

/// Transcribes a clean clip by classifying frames and collapsing runs.
pub fn oracle_transcribe(clip: &VideoClip, charset_size: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for label in classify_frames(clip, charset_size) {
        if let Some(id) = label {
            if prev != Some(id) {
                out.push(id);
            }
        }
        prev = label;
    }
    out
}

// ---------------------------------------------------------------------------
// Shards

pub const SHARD_MAGIC: &[u8; 5] = b"AVSK1";
pub const SHARD_VERSION: u32 = 1;

fn write_clip(w: &mut Vec<u8>, c: &VideoClip) -> Result<()> {
    let (h, wd) = c.hw();
    for v in [c.len(), h, wd] {
        w.write_u32::<LittleEndian>(v as u32)?;
    }
    w.write_f64::<LittleEndian>(c.frame_rate_hz)?;
    for &m in c.mask() {
        w.write_u8(m as u8)?;
    }
    for &x in c.frames().data() {
        w.write_f32::<LittleEndian>(x as f32)?;
    }
    Ok(())
}

fn read_clip(r: &mut &[u8]) -> Result<VideoClip> {
    let t = r.read_u32::<LittleEndian>()? as usize;
    let h = r.read_u32::<LittleEndian>()? as usize;
    let w = r.read_u32::<LittleEndian>()? as usize;
    let fps = r.read_f64::<LittleEndian>()?;
    let mask = (0..t).map(|_| r.read_u8().map(|b| b != 0)).collect::<std::io::Result<Vec<_>>>()?;
    let n = t * h * w * 3;
    let data = (0..n).map(|_| r.read_f32::<LittleEndian>().map(f64::from)).collect::<std::io::Result<Vec<_>>>()?;
    VideoClip::with_mask(Tensor::new(&[t, h, w, 3], data)?, fps, mask)
}

fn write_ids(w: &mut Vec<u8>, ids: &[usize]) -> Result<()> {
    w.write_u32::<LittleEndian>(ids.len() as u32)?;
    for &i in ids {
        w.write_u32::<LittleEndian>(i as u32)?;
    }
    Ok(())
}

fn read_ids(r: &mut &[u8]) -> Result<Vec<usize>> {
    let n = r.read_u32::<LittleEndian>()? as usize;
    (0..n).map(|_| Ok(r.read_u32::<LittleEndian>()? as usize)).collect()
}

fn encode_example(e: &SynthExample) -> Result<Vec<u8>> {
    let mut w = Vec::new();
    write_clip(&mut w, &e.video)?;
    w.write_u32::<LittleEndian>(e.audio.len() as u32)?;
    for &s in &e.audio {
        w.write_f32::<LittleEndian>(s as f32)?;
    }
    write_ids(&mut w, &e.transcript)?;
    write_ids(&mut w, &e.token_speakers)?;
    w.write_u32::<LittleEndian>(e.speaker_spans.len() as u32)?;
    for s in &e.speaker_spans {
        let b = s.speaker.as_bytes();
        w.write_u32::<LittleEndian>(b.len() as u32)?;
        w.extend_from_slice(b);
        w.write_f64::<LittleEndian>(s.start_s)?;
        w.write_f64::<LittleEndian>(s.end_s)?;
    }
    w.write_u32::<LittleEndian>(e.face_tracks.len() as u32)?;
    for c in &e.face_tracks {
        write_clip(&mut w, c)?;
    }
    write_ids(&mut w, &e.track_speakers)?;
    write_ids(&mut w, &e.active_track)?;
    Ok(w)
}

fn decode_example(mut r: &[u8]) -> Result<SynthExample> {
    let r = &mut r;
    let video = read_clip(r)?;
    let n = r.read_u32::<LittleEndian>()? as usize;
    let audio = (0..n).map(|_| r.read_f32::<LittleEndian>().map(f64::from)).collect::<std::io::Result<Vec<_>>>()?;
    let transcript = read_ids(r)?;
    let token_speakers = read_ids(r)?;
    let ns = r.read_u32::<LittleEndian>()? as usize;
    let mut spans = Vec::with_capacity(ns);
    for _ in 0..ns {
        let len = r.read_u32::<LittleEndian>()? as usize;
        let mut b = vec![0; len];
        r.read_exact(&mut b)?;
        let speaker = String::from_utf8(b).map_err(|e| Error::Format(e.to_string()))?;
        let start = r.read_f64::<LittleEndian>()?;
        let end = r.read_f64::<LittleEndian>()?;
        spans.push(SpeakerSegment::new(speaker, start, end)?);
    }
    let nt = r.read_u32::<LittleEndian>()? as usize;
    let face_tracks = (0..nt).map(|_| read_clip(r)).collect::<Result<Vec<_>>>()?;
    let track_speakers = read_ids(r)?;
    let active_track = read_ids(r)?;
    if !r.is_empty() {
        return Err(Error::Format("trailing bytes in shard example".into()));
    }
    Ok(SynthExample {
        video,
        audio,
        transcript,
        token_speakers,
        speaker_spans: spans,
        face_tracks,
        track_speakers,
        active_track,
    })
}

/// Header (`AVSK1`, version, count) then `u64`-length-prefixed examples,
/// all little-endian. Pixels and samples are stored as f32.
pub fn write_shard<W: Write>(mut w: W, examples: &[SynthExample]) -> Result<()> {
    w.write_all(SHARD_MAGIC)?;
    w.write_u32::<LittleEndian>(SHARD_VERSION)?;
    w.write_u32::<LittleEndian>(examples.len() as u32)?;
    for e in examples {
        let b = encode_example(e)?;
        w.write_u64::<LittleEndian>(b.len() as u64)?;
        w.write_all(&b)?;
    }
    Ok(())
}

pub fn read_shard<R: Read>(mut r: R) -> Result<Vec<SynthExample>> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != SHARD_MAGIC {
        return Err(Error::Format("not an AVSK1 shard".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != SHARD_VERSION {
        return Err(Error::Format(format!("unsupported shard version {version}")));
    }
    let n = r.read_u32::<LittleEndian>()? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.read_u64::<LittleEndian>()? as usize;
        let mut b = vec![0; len];
        r.read_exact(&mut b)?;
        out.push(decode_example(&b)?);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Format("trailing bytes after last example".into()));
    }
    Ok(out)
}

pub fn save_shard(path: &Path, examples: &[SynthExample]) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_shard(f, examples)
}

pub fn load_shard(path: &Path) -> Result<Vec<SynthExample>> {
    read_shard(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_counts() {
        assert_eq!(logmel_frames(16_000), 98);
        assert_eq!(logmel_frames(399), 0);
        assert!(matches!(logmel(&[0.0; 399]), Err(Error::Contract(_))));
        let x = logmel(&vec![0.0; 16_000]).unwrap();
        assert_eq!(x.shape(), &[98, 80]);
        assert!(x.data().iter().all(|&v| v == LOG_FLOOR.ln()));
        // One video frame of audio per stacked acoustic frame.
        for t in 1..20 {
            let n = logmel_frames(t * SAMPLES_PER_FRAME);
            assert_eq!(n.div_ceil(STACK), t);
        }
    }

    #[test]
    fn tone_peaks_at_nearest_center() {
        let wave: Vec<f64> = (0..16_000)
            .map(|n| (2.0 * PI * 1000.0 * n as f64 / 16_000.0).sin())
            .collect();
        let x = logmel(&wave).unwrap();
        let centers = mel_centers();
        let nearest = (0..N_MELS)
            .min_by(|&a, &b| (centers[a] - 1000.0).abs().total_cmp(&(centers[b] - 1000.0).abs()))
            .unwrap();
        for r in 0..x.rows() {
            let row = x.row(r);
            let arg = (0..N_MELS).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(arg, nearest, "frame {r}");
        }
    }

    #[test]
    fn stacking() {
        let x = Tensor::new(&[6, 80], (0..480).map(f64::from).collect()).unwrap();
        let a = stack_frames(&x, 3).unwrap();
        assert_eq!(a.frames().shape(), &[2, 240]);
        assert_eq!(a.frames().row(0), &x.data()[..240]);
        assert_eq!(a.hop_ms, 30.0);
        assert_eq!(unstack(&a, 3).unwrap(), x);
        let y = Tensor::zeros(&[98, 80]).unwrap();
        assert_eq!(stack_frames(&y, 3).unwrap().len(), 33);
        let z = Tensor::new(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(stack_frames(&z, 3).unwrap().frames().row(1), &[4.0, 4.0, 4.0]);
    }

    #[test]
    fn downsampling() {
        let c = Tensor::full(&[8, 8, 3], 0.3).unwrap();
        let d = downsample_frame(&c, (2, 4)).unwrap();
        assert_eq!(d.shape(), &[2, 4, 3]);
        assert!(d.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
        let checker = Tensor::new(&[2, 2, 1], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(downsample_frame(&checker, (1, 1)).unwrap().data(), &[0.5]);
        assert!(matches!(downsample_frame(&c, (3, 3)), Err(Error::Config(_))));
    }

    #[test]
    fn nearest_index_oracle() {
        for tv in 1..12 {
            for ta in 1..12 {
                let idx = nearest_video_index(tv, ta);
                for (k, &j) in idx.iter().enumerate() {
                    // Exact argmin over |(j+½)/tv − (k+½)/ta|, scaled by 2·tv·ta.
                    let d = |j: usize| ((2 * j + 1) as i64 * ta as i64 - (2 * k + 1) as i64 * tv as i64).abs();
                    let best = (0..tv).min_by_key(|&j| (d(j), j)).unwrap();
                    assert_eq!(j, best, "tv {tv} ta {ta} k {k}");
                }
            }
        }
        assert_eq!(nearest_video_index(4, 4), vec![0, 1, 2, 3]);
    }

    #[test]
    fn glyphs_are_distinct() {
        for a in 1..=26 {
            for b in a + 1..=26 {
                let d: f64 = render_frame(16, Mouth::Glyph(a), Some(0))
                    .iter()
                    .zip(render_frame(16, Mouth::Glyph(b), Some(0)))
                    .map(|(x, y)| (x - y).powi(2))
                    .sum();
                assert!(d > 0.0);
            }
        }
    }
}
