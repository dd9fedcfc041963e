//! Forward-pass profiling: latency against batch size, relative-latency
//! curves, parameter counts and peak tensor memory.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alloc;
use crate::autodiff::Graph;
use crate::conformer::{self, ConformerConfig};
use crate::error::{Error, Result};
use crate::features::VIDEO_FPS;
use crate::frontends::{FrontEndConfig, VideoClip};
use crate::nn::{self, Params, SpecBuilder};
use crate::tensor::{DType, Tensor};

pub const MIN_TRIALS: usize = 5;
pub const MIN_WARMUP: usize = 2;
pub const GIB: f64 = (1u64 << 30) as f64;

/// One measurement. `wall_ns` and `peak_bytes` are absent when the run hit
/// the memory cap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub arch: String,
    pub batch: usize,
    pub wall_ns: Option<u64>,
    pub trials: usize,
    pub peak_bytes: Option<u64>,
    pub params: usize,
}

impl BenchRecord {
    pub fn is_capacity(&self) -> bool {
        self.wall_ns.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyCurve {
    pub arch: String,
    pub batches: Vec<usize>,
    /// `None` for batches that did not fit.
    pub relative: Vec<Option<f64>>,
}

/// What is being profiled.
#[derive(Debug, Clone, PartialEq)]
pub enum BenchArch {
    FrontEnd(FrontEndConfig),
    /// A front-end followed by a Conformer encoder.
    Conformer { frontend: FrontEndConfig, encoder: ConformerConfig },
}

#[derive(Debug, Clone)]
pub struct BenchSubject {
    pub tag: String,
    pub arch: BenchArch,
    pub params: Params,
}

impl BenchSubject {
    pub fn new(tag: &str, arch: BenchArch, seed: u64) -> Result<Self> {
        let mut b = SpecBuilder::new("");
        match &arch {
            BenchArch::FrontEnd(fe) => {
                fe.validate()?;
                fe.specs(&mut b)?;
            }
            BenchArch::Conformer { frontend, encoder } => {
                frontend.validate()?;
                encoder.validate()?;
                if frontend.out_dim != encoder.model_dim {
                    return Err(Error::Config("conformer bench: front-end width must equal model_dim".into()));
                }
                b.scope("frontend", |s| {
                    let _ = frontend.specs(s);
                });
                b.scope("encoder", |s| encoder.specs(s));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = Params::init(&b.finish(), &mut rng)?;
        Ok(BenchSubject { tag: tag.to_string(), arch, params })
    }

    pub fn input_hw(&self) -> [usize; 2] {
        match &self.arch {
            BenchArch::FrontEnd(fe) | BenchArch::Conformer { frontend: fe, .. } => fe.input_hw,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// One inference pass over the batch on a fresh graph.
    pub fn forward(&self, batch: &[VideoClip]) -> Result<()> {
        let g = Graph::inference(DType::F32);
        let bound = self.params.bind(&g);
        let mut outs = Vec::with_capacity(batch.len());
        for clip in batch {
            let y = match &self.arch {
                BenchArch::FrontEnd(fe) => fe.forward(&g, clip, &bound.scope(""))?,
                BenchArch::Conformer { frontend, encoder } => {
                    let x = frontend.forward(&g, clip, &bound.scope("frontend"))?;
                    conformer::encode(x, encoder, &bound.scope("encoder"), None)?
                }
            };
            outs.push(y);
        }
        Ok(())
    }
}

/// Random clips of `t` frames, generated before any timing.
pub fn make_inputs(hw: [usize; 2], batch: usize, t: usize, seed: u64) -> Result<Vec<VideoClip>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..batch)
        .map(|_| VideoClip::new(Tensor::uniform(&[t, hw[0], hw[1], 3], 0.0, 1.0, &mut rng)?, VIDEO_FPS))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingConfig {
    pub trials: usize,
    pub warmup: usize,
    pub clip_frames: usize,
    /// Tensor bytes allowed above the pre-run baseline.
    pub memory_limit: Option<usize>,
    pub seed: u64,
}

impl Default for TimingConfig {
    fn default() -> Self {
        TimingConfig { trials: MIN_TRIALS, warmup: MIN_WARMUP, clip_frames: 12, memory_limit: None, seed: 0 }
    }
}

impl TimingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials < MIN_TRIALS {
            return Err(Error::Config(format!("trials: {} is below the minimum of {MIN_TRIALS}", self.trials)));
        }
        if self.warmup < MIN_WARMUP {
            return Err(Error::Config(format!("warmup: {} is below the minimum of {MIN_WARMUP}", self.warmup)));
        }
        if self.clip_frames == 0 {
            return Err(Error::Config("clip_frames: must be positive".into()));
        }
        Ok(())
    }
}

fn median(mut xs: Vec<u64>) -> u64 {
    xs.sort_unstable();
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2
    }
}

/// Median wall time over `trials` after `warmup` discarded runs.
pub fn time_forward(subject: &BenchSubject, batch: usize, tc: &TimingConfig) -> Result<BenchRecord> {
    tc.validate()?;
    if batch == 0 {
        return Err(Error::Config("batch: must be positive".into()));
    }
    let inputs = make_inputs(subject.input_hw(), batch, tc.clip_frames, tc.seed)?;
    let params = subject.param_count();
    let capacity = BenchRecord { arch: subject.tag.clone(), batch, wall_ns: None, trials: tc.trials, peak_bytes: None, params };
    let baseline = alloc::in_use();
    let _guard = tc.memory_limit.map(|m| alloc::cap_scope(baseline.saturating_add(m)));
    let mut walls = Vec::with_capacity(tc.trials);
    let mut peak = 0;
    for run in 0..tc.warmup + tc.trials {
        alloc::reset_peak();
        let start = Instant::now();
        match subject.forward(&inputs) {
            Ok(()) => {}
            Err(Error::Capacity { .. }) => return Ok(capacity),
            Err(e) => return Err(e),
        }
        let ns = start.elapsed().as_nanos().max(1) as u64;
        peak = peak.max(alloc::peak().saturating_sub(baseline));
        if run >= tc.warmup {
            walls.push(ns);
        }
    }
    Ok(BenchRecord { wall_ns: Some(median(walls)), peak_bytes: Some(peak as u64), ..capacity })
}

/// Amortized per-example latency relative to batch 1: `(wall(b)/b)/wall(1)`.
pub fn relative_latency_curve(records: &[BenchRecord]) -> Result<LatencyCurve> {
    let arch = records.first().map(|r| r.arch.clone()).unwrap_or_default();
    // A batch-1 capacity row leaves every relative value undefined.
    let base = records
        .iter()
        .find(|r| r.batch == 1)
        .ok_or_else(|| Error::Input(format!("{arch}: no batch-1 record")))?
        .wall_ns;
    let mut rs: Vec<&BenchRecord> = records.iter().collect();
    rs.sort_by_key(|r| r.batch);
    Ok(LatencyCurve {
        arch,
        batches: rs.iter().map(|r| r.batch).collect(),
        relative: rs
            .iter()
            .map(|r| Some((r.wall_ns? as f64 / r.batch as f64) / base? as f64))
            .collect(),
    })
}

pub fn bytes_per_param(memory_bytes: f64, params: f64) -> Result<f64> {
    if !(params > 0.0) {
        return Err(Error::Contract("bytes_per_param needs a positive parameter count".into()));
    }
    Ok(memory_bytes / params)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    /// Sorted by (arch, batch).
    pub records: Vec<BenchRecord>,
    pub curves: Vec<LatencyCurve>,
}

pub const CSV_HEADER: &str = "arch,batch,wall_ns,relative,peak_bytes,params,bytes_per_param";

impl BenchReport {
    pub fn from_records(mut records: Vec<BenchRecord>) -> Result<Self> {
        records.sort_by(|a, b| (&a.arch, a.batch).cmp(&(&b.arch, b.batch)));
        let mut curves = Vec::new();
        for chunk in records.chunk_by(|a, b| a.arch == b.arch) {
            curves.push(relative_latency_curve(chunk)?);
        }
        Ok(BenchReport { records, curves })
    }

    fn relative(&self, r: &BenchRecord) -> Option<f64> {
        let c = self.curves.iter().find(|c| c.arch == r.arch)?;
        let i = c.batches.iter().position(|&b| b == r.batch)?;
        c.relative[i]
    }

    fn cells(&self) -> Vec<[String; 7]> {
        self.records
            .iter()
            .map(|r| {
                let opt = |x: Option<String>| x.unwrap_or_else(|| "capacity".to_string());
                [
                    r.arch.clone(),
                    r.batch.to_string(),
                    opt(r.wall_ns.map(|w| w.to_string())),
                    opt(self.relative(r).map(|x| format!("{x:.6}"))),
                    opt(r.peak_bytes.map(|b| b.to_string())),
                    r.params.to_string(),
                    opt(r.peak_bytes.map(|b| format!("{:.3}", b as f64 / r.params as f64))),
                ]
            })
            .collect()
    }

    pub fn csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for row in self.cells() {
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }

    /// Column-aligned table of the same cells as the CSV.
    pub fn text(&self) -> String {
        let header: Vec<String> = CSV_HEADER.split(',').map(str::to_string).collect();
        let rows = self.cells();
        let widths: Vec<usize> = (0..7)
            .map(|i| rows.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap_or(0))
            .collect();
        let mut s = String::new();
        let line = |s: &mut String, cells: &[String]| {
            let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
            let _ = writeln!(s, "{}", parts.join("  ").trim_end());
        };
        line(&mut s, &header);
        for r in &rows {
            line(&mut s, r);
        }
        s
    }

    pub fn jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect::<Result<Vec<BenchRecord>>>()?;
        Self::from_records(records)
    }
}

/// Times every subject at every batch size, strictly sequentially.
pub fn compare_frontends(subjects: &[BenchSubject], batches: &[usize], tc: &TimingConfig) -> Result<BenchReport> {
    if !batches.contains(&1) {
        return Err(Error::Config("batches: must include 1".into()));
    }
    let mut records = Vec::new();
    for s in subjects {
        for &b in batches {
            records.push(time_forward(s, b, tc)?);
        }
    }
    BenchReport::from_records(records)
}

/// Small configurations for each architecture under comparison.
pub fn toy_subject(arch: &str, input_hw: [usize; 2], out_dim: usize, seed: u64) -> Result<BenchSubject> {
    use crate::frontends::{VggConfig, VitConfig};
    let a = match arch {
        "lp" => BenchArch::FrontEnd(FrontEndConfig::lp(input_hw, out_dim)),
        "vit" => BenchArch::FrontEnd(FrontEndConfig::vit(
            input_hw,
            out_dim,
            VitConfig { patch: [2, input_hw[0] / 4, input_hw[1] / 4], depth: 2, heads: 4, ffn_expansion: 4 },
        )),
        "vgg" | "vgg21d" => BenchArch::FrontEnd(FrontEndConfig::vgg21d(
            input_hw,
            out_dim,
            VggConfig { channels: vec![16, 32], spatial_kernel: 3, temporal_kernel: 3 },
        )),
        "conformer" => BenchArch::Conformer {
            frontend: FrontEndConfig::lp(input_hw, out_dim),
            encoder: ConformerConfig::new(2, out_dim, 4, 7),
        },
        other => return Err(Error::Config(format!("arch: unknown {other:?} (expected lp, vit, vgg or conformer)"))),
    };
    BenchSubject::new(arch, a, seed)
}

/// Parameter count without instantiating.
pub fn count_subject_params(arch: &BenchArch) -> Result<usize> {
    match arch {
        BenchArch::FrontEnd(fe) => crate::frontends::count_params(fe),
        BenchArch::Conformer { frontend, encoder } => {
            let mut b = SpecBuilder::new("");
            encoder.specs(&mut b);
            Ok(crate::frontends::count_params(frontend)? + nn::count(&b.finish()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(arch: &str, batch: usize, wall: Option<u64>) -> BenchRecord {
        BenchRecord { arch: arch.into(), batch, wall_ns: wall, trials: 5, peak_bytes: wall.map(|_| 100), params: 10 }
    }

    #[test]
    fn relative_latency_examples() {
        let rs: Vec<_> = [(1, 10), (2, 12), (4, 16), (8, 24)].iter().map(|&(b, w)| rec("x", b, Some(w))).collect();
        let c = relative_latency_curve(&rs).unwrap();
        let want = [1.0, 0.6, 0.4, 0.3];
        for (got, w) in c.relative.iter().zip(want) {
            assert!((got.unwrap() - w).abs() < 1e-12);
        }
        assert_eq!(c.relative[0], Some(1.0));
        let flat = relative_latency_curve(&[rec("x", 1, Some(7)), rec("x", 8, Some(7))]).unwrap();
        assert_eq!(flat.relative[1], Some(0.125));
        assert!(matches!(relative_latency_curve(&[rec("x", 2, Some(3))]), Err(Error::Input(_))));
    }

    #[test]
    fn bytes_per_param_examples() {
        assert_eq!(bytes_per_param(100.0, 10.0).unwrap(), 10.0);
        assert!(bytes_per_param(1.0, 0.0).is_err());
    }

    #[test]
    fn render_round_trip() {
        let r = BenchReport::from_records(vec![rec("b", 1, Some(5)), rec("a", 2, None), rec("a", 1, Some(3))]).unwrap();
        let all_capped = BenchReport::from_records(vec![rec("c", 1, None), rec("c", 2, None)]).unwrap();
        assert_eq!(all_capped.curves[0].relative, [None, None]);
        assert_eq!(r.records[0].arch, "a");
        let again = BenchReport::from_jsonl(&r.jsonl().unwrap()).unwrap();
        assert_eq!(again.csv(), r.csv());
        assert_eq!(again.text(), r.text());
        assert!(r.csv().contains("a,2,capacity,capacity,capacity,10,capacity"));
    }

    #[test]
    fn rejects_too_few_trials() {
        let s = toy_subject("lp", [8, 8], 8, 0).unwrap();
        let tc = TimingConfig { trials: 1, ..Default::default() };
        assert!(matches!(time_forward(&s, 1, &tc), Err(Error::Config(_))));
    }
}
