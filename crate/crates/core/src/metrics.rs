//! Error rates and diarization scoring: WER, DER, WDER, the face-selection
//! attention head, and batch distractor mixing.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::features::SynthExample;
use crate::frontends::VideoClip;
use crate::nn::{Init, Scope, SpecBuilder};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerSegment {
    pub speaker: String,
    pub start_s: f64,
    pub end_s: f64,
}

impl SpeakerSegment {
    pub fn new(speaker: impl Into<String>, start_s: f64, end_s: f64) -> Result<Self> {
        if !(start_s < end_s) || !start_s.is_finite() || !end_s.is_finite() {
            return Err(Error::Input(format!("segment [{start_s}, {end_s}) is empty or invalid")));
        }
        Ok(SpeakerSegment {
            speaker: speaker.into(),
            start_s,
            end_s,
        })
    }

    pub fn duration(&self) -> f64 {
        self.end_s - self.start_s
    }
}

// ---------------------------------------------------------------------------
// Alignment and WER

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Align {
    Correct,
    Substituted,
    Inserted,
}

/// One step of a Levenshtein alignment. Indices refer to the reference and
/// hypothesis sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Edit {
    Match(usize, usize),
    Sub(usize, usize),
    Ins(usize),
    Del(usize),
}

/// Minimum-edit alignment. On cost ties the backtrace prefers a diagonal
/// step (match or substitution), then a deletion, then an insertion.
pub fn align<T: PartialEq>(reference: &[T], hyp: &[T]) -> Vec<Edit> {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            d[i * w + j] = sub.min(d[(i - 1) * w + j] + 1).min(d[i * w + j - 1] + 1);
        }
    }
    let mut out = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hyp[j - 1];
            if here == d[(i - 1) * w + j - 1] + usize::from(!same) {
                out.push(if same { Edit::Match(i - 1, j - 1) } else { Edit::Sub(i - 1, j - 1) });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && here == d[(i - 1) * w + j] + 1 {
            out.push(Edit::Del(i - 1));
            i -= 1;
        } else {
            out.push(Edit::Ins(j - 1));
            j -= 1;
        }
    }
    out.reverse();
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EditCounts {
    pub correct: usize,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

impl EditCounts {
    pub fn from_edits(edits: &[Edit]) -> Self {
        let mut c = EditCounts::default();
        for e in edits {
            match e {
                Edit::Match(..) => c.correct += 1,
                Edit::Sub(..) => c.substitutions += 1,
                Edit::Del(_) => c.deletions += 1,
                Edit::Ins(_) => c.insertions += 1,
            }
        }
        c
    }

    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

/// `(S + D + I) / len(ref)`.
pub fn wer<T: PartialEq>(reference: &[T], hyp: &[T]) -> Result<f64> {
    Ok(wer_counts(reference, hyp)?.0)
}

pub fn wer_counts<T: PartialEq>(reference: &[T], hyp: &[T]) -> Result<(f64, EditCounts)> {
    if reference.is_empty() {
        return Err(Error::Contract("WER needs a non-empty reference".into()));
    }
    let c = EditCounts::from_edits(&align(reference, hyp));
    Ok((c.errors() as f64 / reference.len() as f64, c))
}

/// Whitespace tokenization.
pub fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

// ---------------------------------------------------------------------------
// Speaker mapping

/// One-to-one assignment of hypothesis labels (rows) to reference labels
/// (columns) maximizing total overlap, by exhaustive search. Unassigned
/// rows map to `None`.
pub fn best_mapping(overlap: &[Vec<f64>]) -> Result<(Vec<Option<usize>>, f64)> {
    const MAX_SPEAKERS: usize = 8;
    let rows = overlap.len();
    let cols = overlap.first().map_or(0, Vec::len);
    if rows > MAX_SPEAKERS || cols > MAX_SPEAKERS {
        return Err(Error::Input(format!("speaker mapping limited to {MAX_SPEAKERS} speakers per side")));
    }
    fn search(
        r: usize,
        overlap: &[Vec<f64>],
        used: &mut [bool],
        cur: &mut Vec<Option<usize>>,
        acc: f64,
        best: &mut (Vec<Option<usize>>, f64),
    ) {
        if r == overlap.len() {
            if acc > best.1 {
                *best = (cur.clone(), acc);
            }
            return;
        }
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                cur.push(Some(c));
                search(r + 1, overlap, used, cur, acc + overlap[r][c], best);
                cur.pop();
                used[c] = false;
            }
        }
        cur.push(None);
        search(r + 1, overlap, used, cur, acc, best);
        cur.pop();
    }
    let mut best = (vec![None; rows], 0.0);
    search(0, overlap, &mut vec![false; cols], &mut Vec::new(), 0.0, &mut best);
    Ok(best)
}

fn label_index<'a>(labels: impl Iterator<Item = &'a str>) -> BTreeMap<&'a str, usize> {
    let mut m = BTreeMap::new();
    for l in labels {
        let n = m.len();
        m.entry(l).or_insert(n);
    }
    m
}

// ---------------------------------------------------------------------------
// DER

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerResult {
    pub false_alarm: f64,
    pub missed: f64,
    pub confusion: f64,
    /// Total reference speech, seconds.
    pub total: f64,
    pub der: f64,
}

fn check_no_overlap(segs: &[SpeakerSegment], what: &str) -> Result<()> {
    let mut s: Vec<&SpeakerSegment> = segs.iter().collect();
    s.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
    for w in s.windows(2) {
        if w[1].start_s < w[0].end_s {
            let kind = if w[0].speaker == w[1].speaker { "same-speaker" } else { "overlapping-speech" };
            return Err(Error::Input(format!(
                "{kind} overlap in {what} segments at {:.3}s ({} / {})",
                w[1].start_s, w[0].speaker, w[1].speaker
            )));
        }
    }
    for seg in segs {
        SpeakerSegment::new(seg.speaker.clone(), seg.start_s, seg.end_s)?;
    }
    Ok(())
}

fn der_from(
    overlap: Vec<Vec<f64>>,
    ref_speech: f64,
    hyp_speech: f64,
    both_speech: f64,
) -> Result<DerResult> {
    if ref_speech <= 0.0 {
        return Err(Error::Input("reference contains no speech".into()));
    }
    let (_, matched) = best_mapping(&overlap)?;
    let missed = ref_speech - both_speech;
    let false_alarm = hyp_speech - both_speech;
    let confusion = both_speech - matched;
    Ok(DerResult {
        false_alarm,
        missed,
        confusion,
        total: ref_speech,
        der: (false_alarm + missed + confusion) / ref_speech,
    })
}

/// Frame-level DER: both streams are sampled at the midpoint of each
/// `resolution_s` frame, speakers are mapped one-to-one to maximize
/// agreement, and no collar is applied.
pub fn der(reference: &[SpeakerSegment], hyp: &[SpeakerSegment], resolution_s: f64) -> Result<DerResult> {
    if !(resolution_s > 0.0) {
        return Err(Error::Input("DER resolution must be positive".into()));
    }
    check_no_overlap(reference, "reference")?;
    check_no_overlap(hyp, "hypothesis")?;
    let rl = label_index(reference.iter().map(|s| s.speaker.as_str()));
    let hl = label_index(hyp.iter().map(|s| s.speaker.as_str()));
    let end = reference.iter().chain(hyp).map(|s| s.end_s).fold(0.0, f64::max);
    let frames = (end / resolution_s).ceil() as usize;
    let at = |segs: &[SpeakerSegment], labels: &BTreeMap<&str, usize>, t: f64| {
        segs.iter()
            .find(|s| s.start_s <= t && t < s.end_s)
            .map(|s| labels[s.speaker.as_str()])
    };
    let mut overlap = vec![vec![0.0; rl.len()]; hl.len()];
    let (mut r_n, mut h_n, mut both_n) = (0usize, 0usize, 0usize);
    for f in 0..frames {
        let t = (f as f64 + 0.5) * resolution_s;
        let r = at(reference, &rl, t);
        let h = at(hyp, &hl, t);
        r_n += usize::from(r.is_some());
        h_n += usize::from(h.is_some());
        if let (Some(r), Some(h)) = (r, h) {
            both_n += 1;
            overlap[h][r] += 1.0;
        }
    }
    let q = resolution_s;
    let overlap = overlap.into_iter().map(|row| row.into_iter().map(|n| n * q).collect()).collect();
    der_from(overlap, r_n as f64 * q, h_n as f64 * q, both_n as f64 * q)
}

/// DER computed on exact segment boundaries.
pub fn der_exact(reference: &[SpeakerSegment], hyp: &[SpeakerSegment]) -> Result<DerResult> {
    check_no_overlap(reference, "reference")?;
    check_no_overlap(hyp, "hypothesis")?;
    let rl = label_index(reference.iter().map(|s| s.speaker.as_str()));
    let hl = label_index(hyp.iter().map(|s| s.speaker.as_str()));
    let mut cuts: Vec<f64> = reference.iter().chain(hyp).flat_map(|s| [s.start_s, s.end_s]).collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let at = |segs: &[SpeakerSegment], labels: &BTreeMap<&str, usize>, t: f64| {
        segs.iter()
            .find(|s| s.start_s <= t && t < s.end_s)
            .map(|s| labels[s.speaker.as_str()])
    };
    let mut overlap = vec![vec![0.0; rl.len()]; hl.len()];
    let ref_speech: f64 = reference.iter().map(SpeakerSegment::duration).sum();
    let hyp_speech: f64 = hyp.iter().map(SpeakerSegment::duration).sum();
    let mut both = 0.0;
    for w in cuts.windows(2) {
        let mid = 0.5 * (w[0] + w[1]);
        if let (Some(r), Some(h)) = (at(reference, &rl, mid), at(hyp, &hl, mid)) {
            both += w[1] - w[0];
            overlap[h][r] += w[1] - w[0];
        }
    }
    der_from(overlap, ref_speech, hyp_speech, both)
}

// ---------------------------------------------------------------------------
// WDER

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordHyp {
    pub word: String,
    pub speaker: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub align: Option<Align>,
}

impl WordHyp {
    pub fn new(word: impl Into<String>, speaker: impl Into<String>) -> Self {
        WordHyp {
            word: word.into(),
            speaker: speaker.into(),
            align: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WderResult {
    pub correct_wrong_speaker: usize,
    pub substituted_wrong_speaker: usize,
    pub inserted_wrong_speaker: usize,
    pub correct: usize,
    pub substituted: usize,
    pub inserted: usize,
    pub wder: f64,
    /// Hypothesis speaker label → reference speaker label.
    pub mapping: BTreeMap<String, String>,
}

/// Word diarization error rate. Hypothesis words are aligned to the
/// reference with the WER alignment; each correct or substituted word is
/// scored against its aligned reference word's speaker, and each inserted
/// word against the nearest preceding aligned reference word (the following
/// one at the start). Deleted words are not counted.
pub fn wder(ref_words: &[(String, String)], hyp_words: &mut [WordHyp]) -> Result<WderResult> {
    if hyp_words.is_empty() {
        return Err(Error::Contract("WDER needs a non-empty hypothesis".into()));
    }
    if ref_words.is_empty() {
        return Err(Error::Contract("WDER needs a non-empty reference".into()));
    }
    let r: Vec<&str> = ref_words.iter().map(|w| w.0.as_str()).collect();
    let h: Vec<&str> = hyp_words.iter().map(|w| w.word.as_str()).collect();
    let edits = align(&r, &h);
    // Reference speaker attributed to each hypothesis word.
    let mut target: Vec<Option<usize>> = vec![None; h.len()];
    let mut last_ref: Option<usize> = None;
    let mut pending: Vec<usize> = Vec::new();
    for e in &edits {
        match *e {
            Edit::Match(ri, hi) | Edit::Sub(ri, hi) => {
                hyp_words[hi].align = Some(if matches!(e, Edit::Match(..)) { Align::Correct } else { Align::Substituted });
                target[hi] = Some(ri);
                for p in pending.drain(..) {
                    target[p] = Some(ri);
                }
                last_ref = Some(ri);
            }
            Edit::Del(ri) => {
                for p in pending.drain(..) {
                    target[p] = Some(ri);
                }
                last_ref = Some(ri);
            }
            Edit::Ins(hi) => {
                hyp_words[hi].align = Some(Align::Inserted);
                match last_ref {
                    Some(ri) => target[hi] = Some(ri),
                    None => pending.push(hi),
                }
            }
        }
    }
    let rl = label_index(ref_words.iter().map(|w| w.1.as_str()));
    let hl = label_index(hyp_words.iter().map(|w| w.speaker.as_str()));
    let mut overlap = vec![vec![0.0; rl.len()]; hl.len()];
    for (hi, w) in hyp_words.iter().enumerate() {
        if let Some(ri) = target[hi] {
            overlap[hl[w.speaker.as_str()]][rl[ref_words[ri].1.as_str()]] += 1.0;
        }
    }
    let (map, _) = best_mapping(&overlap)?;
    let ref_names: Vec<&str> = {
        let mut v = vec![""; rl.len()];
        for (k, &i) in &rl {
            v[i] = k;
        }
        v
    };
    let mut mapping = BTreeMap::new();
    for (&name, &i) in &hl {
        if let Some(c) = map[i] {
            mapping.insert(name.to_string(), ref_names[c].to_string());
        }
    }
    let mut res = WderResult {
        correct_wrong_speaker: 0,
        substituted_wrong_speaker: 0,
        inserted_wrong_speaker: 0,
        correct: 0,
        substituted: 0,
        inserted: 0,
        wder: 0.0,
        mapping,
    };
    for (hi, w) in hyp_words.iter().enumerate() {
        let wrong = match target[hi] {
            Some(ri) => map[hl[w.speaker.as_str()]] != Some(rl[ref_words[ri].1.as_str()]),
            None => true,
        };
        match w.align {
            Some(Align::Correct) => {
                res.correct += 1;
                res.correct_wrong_speaker += usize::from(wrong);
            }
            Some(Align::Substituted) => {
                res.substituted += 1;
                res.substituted_wrong_speaker += usize::from(wrong);
            }
            _ => {
                res.inserted += 1;
                res.inserted_wrong_speaker += usize::from(wrong);
            }
        }
    }
    let num = res.correct_wrong_speaker + res.substituted_wrong_speaker + res.inserted_wrong_speaker;
    res.wder = num as f64 / (res.correct + res.substituted + res.inserted) as f64;
    Ok(res)
}

// ---------------------------------------------------------------------------
// Face-selection attention

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaceAttentionConfig {
    pub audio_dim: usize,
    pub face_dim: usize,
    pub attn_dim: usize,
}

impl FaceAttentionConfig {
    pub fn specs(&self, b: &mut SpecBuilder) {
        b.add("proj_a.w", &[self.audio_dim, self.attn_dim], Init::Xavier)
            .add("proj_v.w", &[self.face_dim, self.attn_dim], Init::Xavier);
    }
}

pub struct FaceSelection<'g> {
    /// `[T×F]`, rows sum to 1.
    pub weights: Var<'g>,
    /// Log of `weights`, for a cross-entropy on the active track.
    pub log_weights: Var<'g>,
    /// `Σ_f weights[t,f]·face_f[t]`, `[T×Dv]`.
    pub fused: Var<'g>,
}

impl FaceSelection<'_> {
    /// Per-frame argmax face (lowest index on ties).
    pub fn speaker_ids(&self) -> Vec<usize> {
        let w = self.weights.value();
        (0..w.rows())
            .map(|r| {
                let row = w.row(r);
                (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b })
            })
            .collect()
    }
}

/// Scaled dot-product attention over face tracks, per frame.
pub fn face_attention_select<'g>(audio_emb: Var<'g>, face_embs: &[Var<'g>], p: &Scope<'_, 'g>) -> Result<FaceSelection<'g>> {
    if face_embs.is_empty() {
        return Err(Error::Contract("face selection needs at least one face track".into()));
    }
    let t = audio_emb.shape()[0];
    for f in face_embs {
        if f.shape()[0] != t {
            return Err(Error::shape("face_attention_select", &audio_emb.shape(), &f.shape()));
        }
    }
    let qa = audio_emb.matmul(p.get("proj_a.w")?)?;
    let d = qa.shape()[1];
    let pv = p.get("proj_v.w")?;
    let scores = face_embs
        .iter()
        .map(|f| qa.mul(f.matmul(pv)?)?.sum_cols())
        .collect::<Result<Vec<_>>>()?;
    let scores = Var::concat_cols(&scores)?.scale(1.0 / (d as f64).sqrt())?;
    let log_weights = scores.log_softmax()?;
    let weights = scores.softmax()?;
    let mut fused = face_embs[0].scale_rows(weights.slice_cols(0, 1)?)?;
    for (i, f) in face_embs.iter().enumerate().skip(1) {
        fused = fused.add(f.scale_rows(weights.slice_cols(i, i + 1)?)?)?;
    }
    Ok(FaceSelection { weights, log_weights, fused })
}

// ---------------------------------------------------------------------------
// Distractor mixing

fn fit_clip(c: &VideoClip, t: usize) -> Result<VideoClip> {
    let (h, w) = c.hw();
    let n = c.frame_len();
    let mut data = vec![0.0; t * n];
    let mut mask = vec![false; t];
    for f in 0..t.min(c.len()) {
        data[f * n..(f + 1) * n].copy_from_slice(c.frame(f));
        mask[f] = c.mask()[f];
    }
    VideoClip::with_mask(Tensor::new(&[t, h, w, 3], data)?, c.frame_rate_hz, mask)
}

/// Appends 1–3 face tracks from other examples in the batch to each
/// example, never reusing one of the example's own speakers. Tracks are
/// cropped or zero-padded (masked) to the example's length. Active-track
/// labels are unchanged since new tracks go at the end.
pub fn batch_distractor_mix(batch: &[SynthExample], seed: u64) -> Result<Vec<SynthExample>> {
    if batch.len() < 2 {
        return Err(Error::Contract("distractor mixing needs a batch of at least 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(batch.len());
    for (i, ex) in batch.iter().enumerate() {
        let mut donors: Vec<usize> = (0..batch.len()).filter(|&j| j != i).collect();
        let want = rng.random_range(1..=3usize).min(donors.len());
        let mut e = ex.clone();
        let mut added = 0;
        while added < want && !donors.is_empty() {
            let d = donors.swap_remove(rng.random_range(0..donors.len()));
            let options: Vec<usize> = (0..batch[d].face_tracks.len())
                .filter(|&k| !e.track_speakers.contains(&batch[d].track_speakers[k]))
                .collect();
            if options.is_empty() {
                continue;
            }
            let k = options[rng.random_range(0..options.len())];
            e.face_tracks.push(fit_clip(&batch[d].face_tracks[k], ex.frames())?);
            e.track_speakers.push(batch[d].track_speakers[k]);
            added += 1;
        }
        out.push(e);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// CSV

pub fn read_segments_csv(path: &Path) -> Result<Vec<SpeakerSegment>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        let s: SpeakerSegment = row.map_err(|e| Error::Format(e.to_string()))?;
        out.push(SpeakerSegment::new(s.speaker, s.start_s, s.end_s)?);
    }
    Ok(out)
}

pub fn write_segments_csv(path: &Path, segs: &[SpeakerSegment]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    for s in segs {
        w.serialize(s).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct WordRow {
    word: String,
    speaker: String,
}

pub fn read_words_csv(path: &Path) -> Result<Vec<(String, String)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    r.deserialize::<WordRow>()
        .map(|row| row.map(|w| (w.word, w.speaker)).map_err(|e| Error::Format(e.to_string())))
        .collect()
}

pub fn write_words_csv(path: &Path, words: &[(String, String)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    for (word, speaker) in words {
        w.serialize(WordRow { word: word.clone(), speaker: speaker.clone() })
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Collapses per-frame speaker labels into segments of `frame_s` seconds.
pub fn frames_to_segments(labels: &[Option<String>], frame_s: f64) -> Vec<SpeakerSegment> {
    let mut out: Vec<SpeakerSegment> = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        let Some(l) = l else { continue };
        let (s, e) = (i as f64 * frame_s, (i + 1) as f64 * frame_s);
        match out.last_mut() {
            Some(last) if &last.speaker == l && (last.end_s - s).abs() < 1e-9 => last.end_s = e,
            _ => out.push(SpeakerSegment { speaker: l.clone(), start_s: s, end_s: e }),
        }
    }
    out
}
