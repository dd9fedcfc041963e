//! Missing-video test suites and the train-time / test-time robustness
//! checks.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features;
use crate::metrics;
use crate::model::{Inputs, Model, Prepared};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Utterance,
    Frame,
    Start,
    Middle,
    End,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Utterance, Suite::Frame, Suite::Start, Suite::Middle, Suite::End];

    pub fn tag(self) -> &'static str {
        match self {
            Suite::Utterance => "utterance",
            Suite::Frame => "frame",
            Suite::Start => "start",
            Suite::Middle => "middle",
            Suite::End => "end",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.tag() == s)
            .ok_or_else(|| Error::Config(format!("suite: unknown {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropSpec {
    pub suite: Suite,
    pub fraction: f64,
    pub seed: u64,
}

impl DropSpec {
    pub fn new(suite: Suite, fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::Config(format!("fraction: {fraction} outside [0, 1]")));
        }
        Ok(DropSpec { suite, fraction, seed })
    }
}

/// `true` marks a kept frame.
pub fn make_drop_mask(t: usize, spec: &DropSpec) -> Vec<bool> {
    let p = spec.fraction;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = ((p * t as f64).round() as usize).min(t);
    match spec.suite {
        Suite::Utterance => vec![!rng.random_bool(p); t],
        Suite::Frame => (0..t).map(|_| !rng.random_bool(p)).collect(),
        Suite::Start => (0..t).map(|i| i >= k).collect(),
        Suite::End => (0..t).map(|i| i < t - k).collect(),
        Suite::Middle => {
            let start = (t - k) / 2;
            (0..t).map(|i| i < start || i >= start + k).collect()
        }
    }
}

/// Derives an independent stream seed for item `i`.
pub fn mix_seed(seed: u64, i: u64) -> u64 {
    let mut z = seed ^ i.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WerRow {
    pub fraction: f64,
    pub wer: f64,
    /// 95% half-width.
    pub ci: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WerTable {
    pub suite: Suite,
    pub model: String,
    pub rows: Vec<WerRow>,
}

pub const CSV_HEADER: &str = "suite,fraction,model,wer,ci";

impl WerTable {
    pub fn csv_rows(&self) -> String {
        self.rows
            .iter()
            .map(|r| format!("{},{},{},{:.6},{:.6}\n", self.suite, r.fraction, self.model, r.wer, r.ci))
            .collect()
    }
}

pub fn tables_csv(tables: &[WerTable]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for t in tables {
        s.push_str(&t.csv_rows());
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub pass: bool,
    /// Human-readable description of each failing point or pair.
    pub violations: Vec<String>,
}

impl Verdict {
    fn from(violations: Vec<String>) -> Self {
        Verdict { pass: violations.is_empty(), violations }
    }
}

/// The AV model must be no worse than its audio-only twin at every point,
/// within the combined confidence half-widths.
pub fn check_train_time_robustness(av: &WerTable, ao: &WerTable) -> Result<Verdict> {
    let same = av.rows.len() == ao.rows.len() && av.rows.iter().zip(&ao.rows).all(|(a, b)| a.fraction == b.fraction);
    if !same {
        return Err(Error::Input("train-time check needs tables over identical fractions".into()));
    }
    let v = av
        .rows
        .iter()
        .zip(&ao.rows)
        .filter(|(a, o)| a.wer > o.wer + a.ci + o.ci)
        .map(|(a, o)| format!("p={}: av {:.4} > ao {:.4}", a.fraction, a.wer, o.wer))
        .collect();
    Ok(Verdict::from(v))
}

/// WER must not decrease as more video is dropped, within the combined
/// confidence half-widths, for every pair of fractions.
pub fn check_test_time_robustness(av: &WerTable) -> Result<Verdict> {
    let r = &av.rows;
    if r.windows(2).any(|w| !(w[0].fraction < w[1].fraction)) {
        return Err(Error::Input("test-time check needs strictly ascending fractions".into()));
    }
    let mut v = Vec::new();
    for i in 0..r.len() {
        for j in i + 1..r.len() {
            if r[i].wer > r[j].wer + r[i].ci + r[j].ci {
                v.push(format!("p={} ({:.4}) > p={} ({:.4})", r[i].fraction, r[i].wer, r[j].fraction, r[j].wer));
            }
        }
    }
    Ok(Verdict::from(v))
}

/// Mean and 1.96·stderr over seeds.
pub fn mean_ci(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessConfig {
    pub suites: Vec<Suite>,
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Additive white noise on the test audio; `None` leaves it clean.
    pub snr_db: Option<f64>,
    pub beam: usize,
    /// Drop all video regardless of suite, for audio-only twins.
    pub audio_only: bool,
}

impl RobustnessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.suites.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("robustness: need at least one suite and one seed".into()));
        }
        if !self.fractions.contains(&0.0) {
            return Err(Error::Config("fractions: must include 0".into()));
        }
        if self.fractions.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("fractions: values must lie in [0, 1]".into()));
        }
        if self.fractions.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config("fractions: must be strictly ascending".into()));
        }
        Ok(())
    }
}

/// Same data with noisy audio; the noise depends only on (seed, example).
pub fn with_noise(data: &[Prepared], snr_db: f64, seed: u64) -> Result<Vec<Prepared>> {
    data.iter()
        .enumerate()
        .map(|(i, p)| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, i as u64));
            let wave = features::add_white_noise(&p.wave, snr_db, &mut rng);
            let mut q = p.clone();
            q.audio = features::audio_features(&wave)?;
            q.wave = wave;
            Ok(q)
        })
        .collect()
}

fn apply_drop(p: &Prepared, spec: &DropSpec) -> Result<Prepared> {
    let mut q = p.clone();
    if spec.fraction == 0.0 {
        return Ok(q);
    }
    let mask = make_drop_mask(q.video.len(), spec);
    let keep: Vec<bool> = q.video.mask().iter().zip(&mask).map(|(a, b)| *a && *b).collect();
    q.video.apply_mask(&keep)?;
    for f in &mut q.faces {
        let m = make_drop_mask(f.len(), spec);
        let keep: Vec<bool> = f.mask().iter().zip(&m).map(|(a, b)| *a && *b).collect();
        f.apply_mask(&keep)?;
    }
    Ok(q)
}

/// Corpus WER for every (suite, fraction), averaged over seeds.
pub fn run_robustness_eval(model: &Model, tag: &str, data: &[Prepared], rc: &RobustnessConfig) -> Result<Vec<WerTable>> {
    rc.validate()?;
    if data.is_empty() {
        return Err(Error::Contract("robustness evaluation needs a non-empty dataset".into()));
    }
    // wer[suite][fraction][seed]
    let mut wer = vec![vec![Vec::with_capacity(rc.seeds.len()); rc.fractions.len()]; rc.suites.len()];
    for &seed in &rc.seeds {
        let noisy;
        let base = match rc.snr_db {
            Some(snr) => {
                noisy = with_noise(data, snr, seed)?;
                &noisy
            }
            None => data,
        };
        // Identical inputs give identical transcripts; decode each once.
        let mut cache: std::collections::HashMap<(usize, Vec<bool>), Vec<usize>> = Default::default();
        for (si, &suite) in rc.suites.iter().enumerate() {
            for (fi, &p) in rc.fractions.iter().enumerate() {
                let (mut errors, mut total) = (0usize, 0usize);
                for (i, ex) in base.iter().enumerate() {
                    let p = if rc.audio_only { 1.0 } else { p };
                    let spec = DropSpec::new(suite, p, mix_seed(seed, i as u64))?;
                    let q = apply_drop(ex, &spec)?;
                    let key = (i, q.video.mask().iter().chain(q.faces.iter().flat_map(|f| f.mask())).copied().collect());
                    let hyp = match cache.get(&key) {
                        Some(h) => h.clone(),
                        None => {
                            let (d, _) = model.transcribe(Inputs::of(&q), rc.beam)?;
                            cache.insert(key, d.tokens.clone());
                            d.tokens
                        }
                    };
                    errors += metrics::wer_counts(&q.transcript, &hyp)?.1.errors();
                    total += q.transcript.len();
                }
                wer[si][fi].push(errors as f64 / total as f64);
            }
        }
    }
    Ok(rc
        .suites
        .iter()
        .zip(wer)
        .map(|(&suite, per_fraction)| WerTable {
            suite,
            model: tag.to_string(),
            rows: rc
                .fractions
                .iter()
                .zip(per_fraction)
                .map(|(&fraction, xs)| {
                    let (wer, ci) = mean_ci(&xs);
                    WerRow { fraction, wer, ci }
                })
                .collect(),
        })
        .collect())
}
