//! RNN-T decoder: character vocabulary, LSTM prediction network, tanh joint
//! network, the transducer loss with its exact gradient, a brute-force
//! alignment oracle, and greedy / beam decoding.
//!
//! Lattice convention: `log_probs[t, u, v]` is the log-probability of
//! emitting `v` at encoder frame `t` after `u` labels. Blank advances `t`,
//! a label advances `u`, and every alignment ends with a blank on the last
//! frame.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::kernels;
use crate::nn::{Init, Params, Scope, SpecBuilder};
use crate::tensor::Tensor;

pub const BLANK: usize = 0;

/// Character vocabulary. Id 0 is blank; characters take ids `1..V`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<char>,
}

impl Vocab {
    pub fn new(tokens: Vec<char>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for &c in &tokens {
            if !seen.insert(c) {
                return Err(Error::Config(format!("duplicate vocabulary character {c:?}")));
            }
        }
        if tokens.is_empty() {
            return Err(Error::Config("vocabulary needs at least one character".into()));
        }
        Ok(Vocab { tokens })
    }

    /// The first `n` lowercase letters.
    pub fn alphabet(n: usize) -> Result<Self> {
        if n == 0 || n > 26 {
            return Err(Error::Config(format!("alphabet size {n} outside 1..=26")));
        }
        Self::new((b'a'..b'a' + n as u8).map(char::from).collect())
    }

    /// Size including blank.
    pub fn len(&self) -> usize {
        self.tokens.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn chars(&self) -> &[char] {
        &self.tokens
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.tokens.iter().position(|&t| t == c).map(|i| i + 1)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| self.id(c).ok_or_else(|| Error::Input(format!("character {c:?} not in vocabulary"))))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        ids.iter()
            .map(|&i| {
                if i == BLANK || i >= self.len() {
                    Err(Error::Vocab { id: i, vocab: self.len() })
                } else {
                    Ok(self.tokens[i - 1])
                }
            })
            .collect()
    }

    pub fn check_labels(&self, labels: &[usize]) -> Result<()> {
        check_labels(labels, self.len())
    }
}

fn check_labels(labels: &[usize], vocab: usize) -> Result<()> {
    match labels.iter().find(|&&l| l == BLANK || l >= vocab) {
        Some(&id) => Err(Error::Vocab { id, vocab }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub lstm_layers: usize,
    pub cell_size: usize,
    pub embedding_dim: usize,
    pub beam_width: usize,
    /// Hidden width of the joint network; defaults to `cell_size`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint_dim: Option<usize>,
    #[serde(default = "default_max_symbols")]
    pub max_symbols_per_step: usize,
}

fn default_max_symbols() -> usize {
    3
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            lstm_layers: 2,
            cell_size: 64,
            embedding_dim: 16,
            beam_width: 8,
            joint_dim: None,
            max_symbols_per_step: default_max_symbols(),
        }
    }
}

impl DecoderConfig {
    pub fn joint_dim(&self) -> usize {
        self.joint_dim.unwrap_or(self.cell_size)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("lstm_layers", self.lstm_layers),
            ("cell_size", self.cell_size),
            ("embedding_dim", self.embedding_dim),
            ("beam_width", self.beam_width),
            ("joint_dim", self.joint_dim()),
            ("max_symbols_per_step", self.max_symbols_per_step),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("decoder.{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Parameters for a decoder over `vocab` symbols fed by `enc_dim`-wide
    /// encoder frames.
    pub fn specs(&self, b: &mut SpecBuilder, vocab: usize, enc_dim: usize) {
        let h = self.cell_size;
        b.add("embed", &[vocab, self.embedding_dim], Init::Normal(0.1));
        for l in 0..self.lstm_layers {
            let input = if l == 0 { self.embedding_dim } else { h };
            b.scope(&format!("lstm{l}"), |s| {
                s.add("wx", &[input, 4 * h], Init::Xavier)
                    .add("wh", &[h, 4 * h], Init::Xavier)
                    .add("b", &[4 * h], Init::LstmBias);
            });
        }
        let j = self.joint_dim();
        b.scope("joint", |s| {
            s.add("enc.w", &[enc_dim, j], Init::Xavier)
                .linear("pred", h, j, true)
                .add("out.w", &[j, vocab], Init::Xavier);
        });
    }
}

// ---------------------------------------------------------------------------
// LSTM

/// One LSTM cell step on graph values. `x: [1×In]`, `h, c: [1×H]`,
/// `wx: [In×4H]`, `wh: [H×4H]`, `b: [4H]`; gates in `(i, f, g, o)` order.
pub fn lstm_step<'g>(
    x: Var<'g>,
    state: (Var<'g>, Var<'g>),
    wx: Var<'g>,
    wh: Var<'g>,
    b: Var<'g>,
) -> Result<(Var<'g>, (Var<'g>, Var<'g>))> {
    let gates = x.matmul(wx)?.add(state.0.matmul(wh)?)?.add_bias(b)?;
    lstm_gates(gates, state.1)
}

fn lstm_gates<'g>(gates: Var<'g>, c: Var<'g>) -> Result<(Var<'g>, (Var<'g>, Var<'g>))> {
    let h4 = gates.shape()[1];
    if h4 % 4 != 0 || c.shape()[1] * 4 != h4 {
        return Err(Error::shape("lstm_step", &gates.shape(), &c.shape()));
    }
    let hd = h4 / 4;
    let i = gates.slice_cols(0, hd)?.sigmoid()?;
    let f = gates.slice_cols(hd, 2 * hd)?.sigmoid()?;
    let g = gates.slice_cols(2 * hd, 3 * hd)?.tanh()?;
    let o = gates.slice_cols(3 * hd, 4 * hd)?.sigmoid()?;
    let c2 = f.mul(c)?.add(i.mul(g)?)?;
    let h2 = o.mul(c2.tanh()?)?;
    Ok((h2, (h2, c2)))
}

/// Prediction-network outputs for every label prefix: row `u` summarizes
/// `[blank, labels[..u]]`. Returns `[(U+1)×H]`.
pub fn prediction_network<'g>(p: &Scope<'_, 'g>, cfg: &DecoderConfig, labels: &[usize]) -> Result<Var<'g>> {
    let embed = p.get("embed")?;
    let vocab = embed.shape()[0];
    check_labels(labels, vocab)?;
    let ids: Vec<usize> = std::iter::once(BLANK).chain(labels.iter().copied()).collect();
    let g = embed.graph();
    let mut seq = embed.gather_rows(&ids)?;
    let hd = cfg.cell_size;
    for l in 0..cfg.lstm_layers {
        let lp = p.sub(&format!("lstm{l}"));
        let xw = seq.matmul(lp.get("wx")?)?.add_bias(lp.get("b")?)?;
        let wh = lp.get("wh")?;
        let mut h = g.constant(Tensor::zeros(&[1, hd])?);
        let mut c = g.constant(Tensor::zeros(&[1, hd])?);
        let mut outs = Vec::with_capacity(ids.len());
        for s in 0..ids.len() {
            let gates = xw.gather_rows(&[s])?.add(h.matmul(wh)?)?;
            let (y, (h2, c2)) = lstm_gates(gates, c)?;
            outs.push(y);
            h = h2;
            c = c2;
        }
        seq = Var::concat_rows(&outs)?;
    }
    Ok(seq)
}

/// Joint network on graph values: `log_softmax(W·tanh(A·enc[t] + B·pred[u] + b))`
/// laid out as `[(T·(U+1))×V]`, row `t·(U+1) + u`.
pub fn joint_log_probs<'g>(enc: Var<'g>, pred: Var<'g>, p: &Scope<'_, 'g>) -> Result<Var<'g>> {
    let a = enc.matmul(p.get("enc.w")?)?;
    let b = p.linear("pred", pred)?;
    a.joint_add(b)?.tanh()?.matmul(p.get("out.w")?)?.log_softmax()
}

// ---------------------------------------------------------------------------
// Lattice and loss

/// Normalized log-probabilities `[T×(U+1)×V]`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointLattice {
    log_probs: Tensor,
}

impl JointLattice {
    pub const NORM_TOL: f64 = 1e-6;

    pub fn new(log_probs: Tensor) -> Result<Self> {
        let s = log_probs.shape();
        if s.len() != 3 {
            return Err(Error::Input(format!("lattice must be T×(U+1)×V, got {s:?}")));
        }
        let v = s[2];
        for cell in log_probs.data().chunks_exact(v) {
            let z = kernels::logsumexp(cell);
            if !(z.abs() <= Self::NORM_TOL) {
                return Err(Error::Input(format!("lattice cell not normalized (logsumexp {z})")));
            }
        }
        Ok(JointLattice { log_probs })
    }

    /// Normalizes raw logits with a log-softmax over the last axis.
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        let s = logits.shape().to_vec();
        if s.len() != 3 {
            return Err(Error::Input(format!("lattice must be T×(U+1)×V, got {s:?}")));
        }
        let mut out = vec![0.0; logits.len()];
        kernels::log_softmax_rows(logits.data(), s[2], &mut out);
        Self::new(Tensor::new(&s, out)?)
    }

    pub fn uniform(t: usize, u1: usize, v: usize) -> Result<Self> {
        Self::new(Tensor::full(&[t, u1, v], -(v as f64).ln())?)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.log_probs.shape();
        (s[0], s[1], s[2])
    }

    pub fn tensor(&self) -> &Tensor {
        &self.log_probs
    }

    pub fn cell(&self, t: usize, u: usize) -> &[f64] {
        let (_, u1, v) = self.dims();
        let o = (t * u1 + u) * v;
        &self.log_probs.data()[o..o + v]
    }
}

fn check_lattice(lp: &[f64], t: usize, u1: usize, v: usize, labels: &[usize]) -> Result<()> {
    if t == 0 {
        return Err(Error::Contract("transducer loss needs at least one frame".into()));
    }
    if labels.len() + 1 != u1 || lp.len() != t * u1 * v {
        return Err(Error::shape("rnnt_loss", &[t, u1, v], &[labels.len()]));
    }
    check_labels(labels, v)
}

/// `−log P(labels | lattice)` and its gradient with respect to every
/// lattice entry, by forward-backward in log space.
pub fn rnnt_loss_and_grad(lp: &[f64], t_len: usize, u1: usize, v: usize, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    check_lattice(lp, t_len, u1, v, labels)?;
    let u_len = u1 - 1;
    let at = |t: usize, u: usize, k: usize| lp[(t * u1 + u) * v + k];
    let blank = |t: usize, u: usize| at(t, u, BLANK);
    let label = |t: usize, u: usize| at(t, u, labels[u]);
    let idx = |t: usize, u: usize| t * u1 + u;

    let mut alpha = vec![f64::NEG_INFINITY; t_len * u1];
    alpha[0] = 0.0;
    for t in 0..t_len {
        for u in 0..u1 {
            if t == 0 && u == 0 {
                continue;
            }
            let from_t = if t > 0 { alpha[idx(t - 1, u)] + blank(t - 1, u) } else { f64::NEG_INFINITY };
            let from_u = if u > 0 { alpha[idx(t, u - 1)] + label(t, u - 1) } else { f64::NEG_INFINITY };
            alpha[idx(t, u)] = kernels::logaddexp(from_t, from_u);
        }
    }
    let log_p = alpha[idx(t_len - 1, u_len)] + blank(t_len - 1, u_len);

    let mut beta = vec![f64::NEG_INFINITY; t_len * u1];
    for t in (0..t_len).rev() {
        for u in (0..u1).rev() {
            beta[idx(t, u)] = if t == t_len - 1 && u == u_len {
                blank(t, u)
            } else {
                let via_t = if t + 1 < t_len { beta[idx(t + 1, u)] + blank(t, u) } else { f64::NEG_INFINITY };
                let via_u = if u < u_len { beta[idx(t, u + 1)] + label(t, u) } else { f64::NEG_INFINITY };
                kernels::logaddexp(via_t, via_u)
            };
        }
    }

    let mut grad = vec![0.0; lp.len()];
    for t in 0..t_len {
        for u in 0..u1 {
            let a = alpha[idx(t, u)];
            let next_t = if t + 1 < t_len {
                beta[idx(t + 1, u)]
            } else if u == u_len {
                0.0
            } else {
                f64::NEG_INFINITY
            };
            grad[idx(t, u) * v + BLANK] = -(a + blank(t, u) + next_t - log_p).exp();
            if u < u_len {
                grad[idx(t, u) * v + labels[u]] = -(a + label(t, u) + beta[idx(t, u + 1)] - log_p).exp();
            }
        }
    }
    Ok((-log_p, grad))
}

pub fn rnnt_loss(lattice: &JointLattice, labels: &[usize]) -> Result<f64> {
    let (t, u1, v) = lattice.dims();
    Ok(rnnt_loss_and_grad(lattice.tensor().data(), t, u1, v, labels)?.0)
}

/// Number of alignments the brute-force oracle enumerates:
/// `C(T−1+U, U)` (the final symbol is always a blank on the last frame).
pub fn alignment_count(t: usize, u: usize) -> u64 {
    let (n, k) = ((t + u - 1) as u64, u as u64);
    (0..k).fold(1u64, |acc, i| acc * (n - i) / (i + 1))
}

pub const BRUTEFORCE_LIMIT: usize = 12;

/// Explicit sum over every monotone alignment. Returns `(loss, paths)`.
pub fn rnnt_loss_bruteforce(lattice: &JointLattice, labels: &[usize]) -> Result<(f64, u64)> {
    let (t_len, u1, v) = lattice.dims();
    check_lattice(lattice.tensor().data(), t_len, u1, v, labels)?;
    if t_len + labels.len() > BRUTEFORCE_LIMIT {
        return Err(Error::Contract(format!(
            "brute force limited to T+U <= {BRUTEFORCE_LIMIT}"
        )));
    }
    let u_len = labels.len();
    let mut total = 0.0;
    let mut paths = 0u64;
    let mut stack = vec![(0usize, 0usize, 0.0f64)];
    while let Some((t, u, logp)) = stack.pop() {
        let cell = lattice.cell(t, u);
        if t == t_len - 1 && u == u_len {
            total += (logp + cell[BLANK]).exp();
            paths += 1;
            continue;
        }
        if u < u_len {
            stack.push((t, u + 1, logp + cell[labels[u]]));
        }
        if t + 1 < t_len {
            stack.push((t + 1, u, logp + cell[BLANK]));
        }
    }
    Ok((-total.ln(), paths))
}

/// Transducer loss as a graph node over a `[(T·(U+1))×V]` log-prob matrix.
pub fn rnnt_loss_var<'g>(log_probs: Var<'g>, t_len: usize, labels: &[usize]) -> Result<Var<'g>> {
    let s = log_probs.shape();
    let (loss, grad) = {
        let lp = log_probs.value();
        rnnt_loss_and_grad(lp.data(), t_len, labels.len() + 1, s[1], labels)?
    };
    log_probs.scalar_with_grad(loss, grad)
}

// ---------------------------------------------------------------------------
// Inference

/// Graph-free view of decoder parameters for decoding.
pub struct DecoderRuntime<'p> {
    cfg: &'p DecoderConfig,
    embed: &'p Tensor,
    lstm: Vec<(&'p Tensor, &'p Tensor, &'p Tensor)>,
    enc_w: &'p Tensor,
    pred_w: &'p Tensor,
    pred_b: &'p Tensor,
    out_w: &'p Tensor,
}

/// Per-layer `(h, c)` and the top-layer output.
#[derive(Debug, Clone, PartialEq)]
pub struct PredState {
    h: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
    out: Vec<f64>,
}

/// Scalar LSTM recurrence, shared by decoding and tests.
pub fn lstm_cell(x: &[f64], h: &[f64], c: &[f64], wx: &Tensor, wh: &Tensor, b: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let hd = h.len();
    if c.len() != hd || wh.shape() != [hd, 4 * hd] || wx.shape() != [x.len(), 4 * hd] || b.len() != 4 * hd {
        return Err(Error::shape("lstm_cell", &[x.len(), hd], wx.shape()));
    }
    let mut z = vec![0.0; 4 * hd];
    kernels::affine_row(x, wx.data(), Some(b.data()), &mut z);
    let mut zh = vec![0.0; 4 * hd];
    kernels::affine_row(h, wh.data(), None, &mut zh);
    let mut h2 = vec![0.0; hd];
    let mut c2 = vec![0.0; hd];
    for j in 0..hd {
        let i = kernels::sigmoid(z[j] + zh[j]);
        let f = kernels::sigmoid(z[hd + j] + zh[hd + j]);
        let g = (z[2 * hd + j] + zh[2 * hd + j]).tanh();
        let o = kernels::sigmoid(z[3 * hd + j] + zh[3 * hd + j]);
        c2[j] = f * c[j] + i * g;
        h2[j] = o * c2[j].tanh();
    }
    Ok((h2, c2))
}

impl<'p> DecoderRuntime<'p> {
    pub fn new(params: &'p Params, prefix: &str, cfg: &'p DecoderConfig) -> Result<Self> {
        let name = |n: &str| crate::nn::join(prefix, n);
        let mut lstm = Vec::with_capacity(cfg.lstm_layers);
        for l in 0..cfg.lstm_layers {
            lstm.push((
                params.get(&name(&format!("lstm{l}.wx")))?,
                params.get(&name(&format!("lstm{l}.wh")))?,
                params.get(&name(&format!("lstm{l}.b")))?,
            ));
        }
        Ok(DecoderRuntime {
            cfg,
            embed: params.get(&name("embed"))?,
            lstm,
            enc_w: params.get(&name("joint.enc.w"))?,
            pred_w: params.get(&name("joint.pred.w"))?,
            pred_b: params.get(&name("joint.pred.b"))?,
            out_w: params.get(&name("joint.out.w"))?,
        })
    }

    pub fn vocab(&self) -> usize {
        self.embed.rows()
    }

    /// State after consuming the start symbol.
    pub fn initial(&self) -> Result<PredState> {
        let hd = self.cfg.cell_size;
        let zero = PredState {
            h: vec![vec![0.0; hd]; self.cfg.lstm_layers],
            c: vec![vec![0.0; hd]; self.cfg.lstm_layers],
            out: Vec::new(),
        };
        self.step(&zero, BLANK)
    }

    pub fn step(&self, state: &PredState, token: usize) -> Result<PredState> {
        if token >= self.vocab() {
            return Err(Error::Vocab { id: token, vocab: self.vocab() });
        }
        let mut x = self.embed.row(token).to_vec();
        let mut next = state.clone();
        for (l, &(wx, wh, b)) in self.lstm.iter().enumerate() {
            let (h, c) = lstm_cell(&x, &state.h[l], &state.c[l], wx, wh, b)?;
            next.h[l] = h.clone();
            next.c[l] = c;
            x = h;
        }
        next.out = x;
        Ok(next)
    }

    /// `A·enc[t]` for every frame.
    pub fn project_encoder(&self, enc: &Tensor) -> Result<Vec<Vec<f64>>> {
        if enc.shape().len() != 2 || enc.cols() != self.enc_w.rows() {
            return Err(Error::shape("decode", enc.shape(), self.enc_w.shape()));
        }
        let j = self.enc_w.cols();
        Ok((0..enc.rows())
            .map(|t| {
                let mut o = vec![0.0; j];
                kernels::affine_row(enc.row(t), self.enc_w.data(), None, &mut o);
                o
            })
            .collect())
    }

    pub fn log_probs(&self, enc_proj: &[f64], state: &PredState) -> Vec<f64> {
        let j = enc_proj.len();
        let mut z = vec![0.0; j];
        kernels::affine_row(&state.out, self.pred_w.data(), Some(self.pred_b.data()), &mut z);
        for (zi, e) in z.iter_mut().zip(enc_proj) {
            *zi = (*zi + e).tanh();
        }
        let mut logits = vec![0.0; self.vocab()];
        kernels::affine_row(&z, self.out_w.data(), None, &mut logits);
        let mut out = vec![0.0; logits.len()];
        kernels::log_softmax_rows(&logits, logits.len(), &mut out);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<usize>,
    /// Encoder frame at which each token was emitted.
    pub frames: Vec<usize>,
    /// Log-probability of the single alignment that produced `tokens`.
    pub score: f64,
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Per frame, emit the argmax symbol (lowest id on ties) until blank or the
/// per-frame symbol cap; at the cap only blank is taken.
pub fn greedy_decode(rt: &DecoderRuntime<'_>, enc: &Tensor) -> Result<Decoded> {
    let proj = rt.project_encoder(enc)?;
    let mut state = rt.initial()?;
    let mut tokens = Vec::new();
    let mut frames = Vec::new();
    let mut score = 0.0;
    for (t, e) in proj.iter().enumerate() {
        for emitted in 0..=rt.cfg.max_symbols_per_step {
            let lp = rt.log_probs(e, &state);
            let k = if emitted == rt.cfg.max_symbols_per_step { BLANK } else { argmax(&lp) };
            score += lp[k];
            if k == BLANK {
                break;
            }
            tokens.push(k);
            frames.push(t);
            state = rt.step(&state, k)?;
        }
    }
    Ok(Decoded { tokens, frames, score })
}

#[derive(Clone)]
struct Hyp {
    tokens: Vec<usize>,
    frames: Vec<usize>,
    score: f64,
    state: PredState,
}

/// Descending score, then ascending token sequence.
fn rank(a: &(Vec<usize>, f64), b: &(Vec<usize>, f64)) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(&b.0))
}

/// Time-synchronous beam search.
///
/// Within a frame, each round extends every open hypothesis by blank
/// (closing it for this frame) and by every label, then keeps the best
/// `beam − closed` extensions under the total order (score descending, then
/// token ids ascending). Identical token sequences merge by max score. With
/// `beam_width = 1` this is exactly [`greedy_decode`].
pub fn beam_decode(rt: &DecoderRuntime<'_>, enc: &Tensor, beam_width: usize) -> Result<Decoded> {
    if beam_width == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    let proj = rt.project_encoder(enc)?;
    let max_sym = rt.cfg.max_symbols_per_step;
    let mut beam = vec![Hyp { tokens: Vec::new(), frames: Vec::new(), score: 0.0, state: rt.initial()? }];
    for (t, e) in proj.iter().enumerate() {
        let mut closed: Vec<Hyp> = Vec::new();
        let mut open = beam;
        for round in 0..=max_sym {
            if open.is_empty() || closed.len() >= beam_width {
                break;
            }
            // (tokens, score, source index, emitted symbol)
            let mut pool: Vec<(Vec<usize>, f64, usize, usize)> = Vec::new();
            for (i, h) in open.iter().enumerate() {
                let lp = rt.log_probs(e, &h.state);
                pool.push((h.tokens.clone(), h.score + lp[BLANK], i, BLANK));
                if round < max_sym {
                    for (k, &l) in lp.iter().enumerate().skip(1) {
                        let mut t = h.tokens.clone();
                        t.push(k);
                        pool.push((t, h.score + l, i, k));
                    }
                }
            }
            // Merge duplicates: a closed hypothesis absorbs a blank extension
            // with the same tokens; otherwise keep the better of equal keys.
            pool.sort_by(|a, b| {
                (a.3 == BLANK).cmp(&(b.3 == BLANK)).reverse().then_with(|| rank(&(a.0.clone(), a.1), &(b.0.clone(), b.1)))
            });
            let mut kept: Vec<(Vec<usize>, f64, usize, usize)> = Vec::new();
            for c in pool {
                let is_blank = c.3 == BLANK;
                if is_blank {
                    if let Some(h) = closed.iter_mut().find(|h| h.tokens == c.0) {
                        h.score = h.score.max(c.1);
                        continue;
                    }
                }
                if kept.iter().any(|k| (k.3 == BLANK) == is_blank && k.0 == c.0) {
                    continue;
                }
                kept.push(c);
            }
            kept.sort_by(|a, b| rank(&(a.0.clone(), a.1), &(b.0.clone(), b.1)));
            kept.truncate(beam_width - closed.len());
            let mut next_open = Vec::new();
            for (tokens, score, i, k) in kept {
                if k == BLANK {
                    closed.push(Hyp { tokens, frames: open[i].frames.clone(), score, state: open[i].state.clone() });
                } else {
                    let state = rt.step(&open[i].state, k)?;
                    let mut frames = open[i].frames.clone();
                    frames.push(t);
                    next_open.push(Hyp { tokens, frames, score, state });
                }
            }
            open = next_open;
        }
        closed.sort_by(|a, b| rank(&(a.tokens.clone(), a.score), &(b.tokens.clone(), b.score)));
        beam = closed;
    }
    let best = beam
        .into_iter()
        .next()
        .ok_or_else(|| Error::State("beam search produced no hypothesis".into()))?;
    Ok(Decoded { tokens: best.tokens, frames: best.frames, score: best.score })
}
