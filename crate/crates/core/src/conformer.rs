//! Conformer encoder: half-step FFN, multi-head self-attention, convolution
//! module, second half-step FFN, final LayerNorm.

use std::cell::RefCell;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::kernels;
use crate::nn::{Scope, SpecBuilder};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConformerConfig {
    pub depth: usize,
    pub model_dim: usize,
    #[serde(default = "default_expansion")]
    pub ffn_expansion: usize,
    pub heads: usize,
    #[serde(default = "default_kernel")]
    pub conv_kernel: usize,
    #[serde(default)]
    pub dropout: f64,
}

fn default_expansion() -> usize {
    4
}

fn default_kernel() -> usize {
    15
}

impl ConformerConfig {
    pub fn new(depth: usize, model_dim: usize, heads: usize, conv_kernel: usize) -> Self {
        ConformerConfig {
            depth,
            model_dim,
            ffn_expansion: 4,
            heads,
            conv_kernel,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.heads == 0 || self.ffn_expansion == 0 {
            return Err(Error::Config("model_dim, heads and ffn_expansion must be positive".into()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        kernels::check_odd_kernel(self.conv_kernel)?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn block_specs(&self, b: &mut SpecBuilder) {
        let d = self.model_dim;
        let e = d * self.ffn_expansion;
        for ffn in ["ffn1", "ffn2"] {
            b.scope(ffn, |s| {
                s.layer_norm("ln", d).linear("l1", d, e, true).linear("l2", e, d, true);
            });
        }
        b.scope("mhsa", |s| mhsa_specs(s, d));
        b.scope("conv", |s| {
            s.layer_norm("ln", d)
                .linear("pw1", d, 2 * d, true)
                .add("dw", &[self.conv_kernel, d], crate::nn::Init::Xavier)
                .layer_norm("ln2", d)
                .linear("pw2", d, d, true);
        });
        b.layer_norm("ln_out", d);
    }

    pub fn specs(&self, b: &mut SpecBuilder) {
        for i in 0..self.depth {
            b.scope(&format!("block{i}"), |s| self.block_specs(s));
        }
    }
}

pub(crate) fn mhsa_specs(s: &mut SpecBuilder, d: usize) {
    s.layer_norm("ln", d)
        .linear("q", d, d, true)
        .linear("k", d, d, true)
        .linear("v", d, d, true)
        .linear("o", d, d, true);
}

/// Training-time dropout source.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a RefCell<ChaCha8Rng>,
}

fn drop<'g>(x: Var<'g>, d: Option<&Dropout<'_>>) -> Result<Var<'g>> {
    match d {
        Some(d) if d.rate > 0.0 => x.dropout(d.rate, &mut *d.rng.borrow_mut()),
        _ => Ok(x),
    }
}

/// Pre-norm feed-forward network without the residual:
/// LayerNorm → linear D→eD → swish → linear eD→D.
pub fn feed_forward<'g>(x: Var<'g>, p: &Scope<'_, 'g>, pre_norm: bool) -> Result<Var<'g>> {
    let h = if pre_norm { p.layer_norm("ln", x, LN_EPS)? } else { x };
    let h = p.linear("l1", h)?.swish()?;
    p.linear("l2", h)
}

/// `x + ½·FFN(x)`
pub fn ffn_half_step<'g>(x: Var<'g>, p: &Scope<'_, 'g>) -> Result<Var<'g>> {
    ffn_half_step_with(x, p, true, None)
}

pub fn ffn_half_step_with<'g>(
    x: Var<'g>,
    p: &Scope<'_, 'g>,
    pre_norm: bool,
    dropout: Option<&Dropout<'_>>,
) -> Result<Var<'g>> {
    let f = drop(feed_forward(x, p, pre_norm)?, dropout)?;
    x.add(f.scale(0.5)?)
}

/// Output of a self-attention layer with the per-head attention matrices.
pub struct Attention<'g> {
    pub out: Var<'g>,
    pub weights: Vec<Var<'g>>,
}

/// Full-context multi-head self-attention on `LN(x)`, without the residual.
pub fn self_attention<'g>(x: Var<'g>, p: &Scope<'_, 'g>, heads: usize) -> Result<Attention<'g>> {
    let d = *x.shape().last().unwrap();
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("model dim {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let h = p.layer_norm("ln", x, LN_EPS)?;
    let q = p.linear("q", h)?;
    let k = p.linear("k", h)?;
    let v = p.linear("v", h)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for i in 0..heads {
        let (a, b) = (i * dh, (i + 1) * dh);
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (q.slice_cols(a, b)?, k.slice_cols(a, b)?, v.slice_cols(a, b)?)
        };
        let w = qh.matmul(kh.transpose()?)?.scale(scale)?.softmax()?;
        outs.push(w.matmul(vh)?);
        weights.push(w);
    }
    let cat = if heads == 1 { outs[0] } else { Var::concat_cols(&outs)? };
    Ok(Attention {
        out: p.linear("o", cat)?,
        weights,
    })
}

/// `x + MHSA(x)`
pub fn mhsa<'g>(x: Var<'g>, p: &Scope<'_, 'g>, heads: usize) -> Result<Var<'g>> {
    x.add(self_attention(x, p, heads)?.out)
}

/// Convolution module body without the residual:
/// LayerNorm → pointwise D→2D → GLU → depthwise conv → LayerNorm → swish → pointwise D→D.
pub fn conv_body<'g>(x: Var<'g>, p: &Scope<'_, 'g>) -> Result<Var<'g>> {
    let h = p.layer_norm("ln", x, LN_EPS)?;
    let h = p.linear("pw1", h)?.glu()?;
    let h = h.depthwise_conv1d(p.get("dw")?)?;
    let h = p.layer_norm("ln2", h, LN_EPS)?.swish()?;
    p.linear("pw2", h)
}

/// `x + Conv(x)`
pub fn conv_module<'g>(x: Var<'g>, p: &Scope<'_, 'g>) -> Result<Var<'g>> {
    x.add(conv_body(x, p)?)
}

/// Intermediate values of one block, named after the residual stages.
pub struct BlockTrace<'g> {
    /// `x + ½FFN(x)`
    pub after_ffn1: Var<'g>,
    /// `x̃ + MHSA(x̃)`
    pub after_mhsa: Var<'g>,
    /// `x' + Conv(x')`
    pub after_conv: Var<'g>,
    /// `LayerNorm(x'' + ½FFN(x''))`
    pub out: Var<'g>,
    pub attention: Vec<Var<'g>>,
}

pub fn conformer_block_traced<'g>(
    x: Var<'g>,
    p: &Scope<'_, 'g>,
    heads: usize,
    dropout: Option<&Dropout<'_>>,
) -> Result<BlockTrace<'g>> {
    let after_ffn1 = ffn_half_step_with(x, &p.sub("ffn1"), true, dropout)?;
    let att = self_attention(after_ffn1, &p.sub("mhsa"), heads)?;
    let after_mhsa = after_ffn1.add(drop(att.out, dropout)?)?;
    let after_conv = after_mhsa.add(drop(conv_body(after_mhsa, &p.sub("conv"))?, dropout)?)?;
    let pre_out = ffn_half_step_with(after_conv, &p.sub("ffn2"), true, dropout)?;
    let out = p.layer_norm("ln_out", pre_out, LN_EPS)?;
    Ok(BlockTrace {
        after_ffn1,
        after_mhsa,
        after_conv,
        out,
        attention: att.weights,
    })
}

pub fn conformer_block<'g>(x: Var<'g>, p: &Scope<'_, 'g>, heads: usize) -> Result<Var<'g>> {
    Ok(conformer_block_traced(x, p, heads, None)?.out)
}

/// Sinusoidal absolute positions: `pe[t, 2i] = sin(t / 10000^(2i/D))`,
/// `pe[t, 2i+1] = cos(·)`.
pub fn positional_encoding(t: usize, d: usize) -> Result<Tensor> {
    let mut data = vec![0.0; t * d];
    for pos in 0..t {
        for i in (0..d).step_by(2) {
            let freq = 1.0 / 10000f64.powf(i as f64 / d as f64);
            let angle = pos as f64 * freq;
            data[pos * d + i] = angle.sin();
            if i + 1 < d {
                data[pos * d + i + 1] = angle.cos();
            }
        }
    }
    Tensor::new(&[t, d], data)
}

/// Adds positional encoding once, then applies `cfg.depth` blocks named
/// `block{i}` under `p`.
pub fn encode<'g>(
    x: Var<'g>,
    cfg: &ConformerConfig,
    p: &Scope<'_, 'g>,
    dropout: Option<&Dropout<'_>>,
) -> Result<Var<'g>> {
    let shape = x.shape();
    if shape.len() != 2 || shape[1] != cfg.model_dim {
        return Err(Error::shape("encode", &shape, &[cfg.model_dim]));
    }
    let pe = x.graph().constant(positional_encoding(shape[0], shape[1])?);
    let mut h = x.add(pe)?;
    for i in 0..cfg.depth {
        h = conformer_block_traced(h, &p.sub(&format!("block{i}")), cfg.heads, dropout)?.out;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::nn::Params;
    use rand::SeedableRng;

    fn block_params(d: usize, heads: usize, k: usize, seed: u64) -> (ConformerConfig, Params) {
        let cfg = ConformerConfig::new(1, d, heads, k);
        let mut b = SpecBuilder::new("");
        cfg.block_specs(&mut b);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (cfg, Params::init(&b.finish(), &mut rng).unwrap())
    }

    fn zero_all(p: &mut Params, prefix: &str) {
        for (k, t) in p.iter_mut() {
            if k.starts_with(prefix) && !k.ends_with(".g") {
                t.data_mut().fill(0.0);
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(ConformerConfig::new(2, 8, 3, 5).validate().is_err());
        assert!(ConformerConfig::new(2, 8, 2, 4).validate().is_err());
        ConformerConfig::new(2, 8, 2, 5).validate().unwrap();
    }

    #[test]
    fn ffn_zero_weights_is_identity() {
        let (_, mut p) = block_params(4, 1, 3, 0);
        zero_all(&mut p, "ffn1.l");
        let g = Graph::new();
        let b = p.bind(&g);
        let x = Tensor::randn(&[3, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let xv = g.leaf(x.clone());
        let y = ffn_half_step(xv, &b.scope("ffn1")).unwrap();
        assert_eq!(y.value().data(), x.data());
    }

    #[test]
    fn ffn_scalar_closed_form() {
        let mut p = Params::new();
        p.insert("l1.w", Tensor::new(&[1, 1], vec![1.0]).unwrap());
        p.insert("l1.b", Tensor::new(&[1], vec![0.0]).unwrap());
        p.insert("l2.w", Tensor::new(&[1, 1], vec![2.0]).unwrap());
        p.insert("l2.b", Tensor::new(&[1], vec![0.0]).unwrap());
        let g = Graph::new();
        let b = p.bind(&g);
        let x = g.leaf(Tensor::new(&[1, 1], vec![1.0]).unwrap());
        let y = ffn_half_step_with(x, &b.scope(""), false, None).unwrap();
        let swish1 = 1.0 / (1.0 + (-1f64).exp());
        assert!((y.item() - (1.0 + swish1)).abs() < 1e-15);
        assert!((y.item() - 1.7311).abs() < 1e-4);
    }

    #[test]
    fn ffn_residual_is_linear_in_output_scale() {
        let (_, mut p) = block_params(4, 1, 3, 2);
        let x = Tensor::randn(&[3, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let delta = |p: &Params| {
            let g = Graph::new();
            let b = p.bind(&g);
            let xv = g.leaf(x.clone());
            let y = ffn_half_step(xv, &b.scope("ffn1")).unwrap().to_tensor().unwrap();
            y.data().iter().zip(x.data()).map(|(a, b)| a - b).collect::<Vec<_>>()
        };
        let d1 = delta(&p);
        for name in ["ffn1.l2.w", "ffn1.l2.b"] {
            p.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v *= 2.0);
        }
        let d2 = delta(&p);
        for (a, b) in d1.iter().zip(&d2) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mhsa_zero_output_projection_is_identity() {
        let (_, mut p) = block_params(4, 2, 3, 4);
        zero_all(&mut p, "mhsa.o");
        let g = Graph::new();
        let b = p.bind(&g);
        let x = Tensor::randn(&[5, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let y = mhsa(g.leaf(x.clone()), &b.scope("mhsa"), 2).unwrap();
        assert_eq!(y.value().data(), x.data());
        assert!(matches!(
            mhsa(g.leaf(x), &b.scope("mhsa"), 3),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn mhsa_identical_rows_attend_uniformly() {
        let (_, p) = block_params(4, 2, 3, 6);
        let g = Graph::new();
        let b = p.bind(&g);
        let x = g.leaf(Tensor::new(&[2, 4], vec![0.3, -1.0, 2.0, 0.5, 0.3, -1.0, 2.0, 0.5]).unwrap());
        let att = self_attention(x, &b.scope("mhsa"), 2).unwrap();
        for w in att.weights {
            for v in w.value().data() {
                assert!((v - 0.5).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn mhsa_matches_naive_attention() {
        // T=3, D=2, one head, identity layer norm affine and hand-set projections.
        let mut p = Params::new();
        p.insert("ln.g", Tensor::full(&[2], 1.0).unwrap());
        p.insert("ln.b", Tensor::zeros(&[2]).unwrap());
        let wq = [0.5, -0.2, 0.3, 0.8];
        let wk = [1.0, 0.4, -0.6, 0.2];
        let wv = [0.7, 0.1, -0.3, 0.9];
        for (n, w) in [("q", wq), ("k", wk), ("v", wv), ("o", [1.0, 0.0, 0.0, 1.0])] {
            p.insert(format!("{n}.w"), Tensor::new(&[2, 2], w.to_vec()).unwrap());
            p.insert(format!("{n}.b"), Tensor::zeros(&[2]).unwrap());
        }
        let x = [[0.2, 1.5], [-0.7, 0.4], [2.0, -1.0]];
        let g = Graph::new();
        let b = p.bind(&g);
        let xv = g.leaf(Tensor::new(&[3, 2], x.concat()).unwrap());
        let y = mhsa(xv, &b.scope(""), 1).unwrap();

        // Oracle: layer norm by hand, then softmax(QKᵀ/√d)·V.
        let ln: Vec<[f64; 2]> = x
            .iter()
            .map(|r| {
                let m = (r[0] + r[1]) / 2.0;
                let v = ((r[0] - m).powi(2) + (r[1] - m).powi(2)) / 2.0;
                let s = (v + LN_EPS).sqrt();
                [(r[0] - m) / s, (r[1] - m) / s]
            })
            .collect();
        let proj = |r: &[f64; 2], w: &[f64; 4]| [r[0] * w[0] + r[1] * w[2], r[0] * w[1] + r[1] * w[3]];
        let q: Vec<_> = ln.iter().map(|r| proj(r, &wq)).collect();
        let k: Vec<_> = ln.iter().map(|r| proj(r, &wk)).collect();
        let v: Vec<_> = ln.iter().map(|r| proj(r, &wv)).collect();
        for i in 0..3 {
            let s: Vec<f64> = (0..3)
                .map(|j| (q[i][0] * k[j][0] + q[i][1] * k[j][1]) / 2f64.sqrt())
                .collect();
            let z: f64 = s.iter().map(|v| v.exp()).sum();
            for c in 0..2 {
                let att: f64 = (0..3).map(|j| s[j].exp() / z * v[j][c]).sum();
                let want = x[i][c] + att;
                assert!((y.value().at(&[i, c]) - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn conv_module_zero_output_is_identity_and_local() {
        let (_, mut p) = block_params(4, 1, 3, 7);
        let x = Tensor::randn(&[8, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let run = |p: &Params, x: &Tensor| {
            let g = Graph::new();
            let b = p.bind(&g);
            conv_module(g.leaf(x.clone()), &b.scope("conv")).unwrap().to_tensor().unwrap()
        };
        // Perturbing frame 4 changes outputs only within (K−1)/2 = 1 frame.
        let base = run(&p, &x);
        let mut x2 = x.clone();
        x2.data_mut()[4 * 4 + 1] += 0.5;
        let pert = run(&p, &x2);
        for t in 0..8 {
            let changed = base.row(t) != pert.row(t);
            assert_eq!(changed, (3..=5).contains(&t), "frame {t}");
        }
        zero_all(&mut p, "conv.pw2");
        assert_eq!(run(&p, &x).data(), x.data());
    }

    #[test]
    fn block_with_zero_weights_is_layer_norm() {
        let (_, mut p) = block_params(4, 2, 3, 9);
        zero_all(&mut p, "");
        let x = Tensor::randn(&[3, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        let g = Graph::new();
        let b = p.bind(&g);
        let xv = g.leaf(x.clone());
        let y = conformer_block(xv, &b.scope(""), 2).unwrap();
        let gain = g.constant(Tensor::full(&[4], 1.0).unwrap());
        let bias = g.constant(Tensor::zeros(&[4]).unwrap());
        let want = xv.layer_norm(gain, bias, LN_EPS).unwrap();
        assert!(y.value().max_abs_diff(&want.value()) < 1e-12);
    }

    #[test]
    fn block_preserves_shape() {
        let (_, p) = block_params(8, 2, 5, 11);
        for t in [1, 2, 7] {
            let g = Graph::new();
            let b = p.bind(&g);
            let x = g.leaf(Tensor::randn(&[t, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(t as u64)).unwrap());
            assert_eq!(conformer_block(x, &b.scope(""), 2).unwrap().shape(), vec![t, 8]);
        }
    }

    #[test]
    fn encode_depth_zero_adds_positions_only() {
        let cfg = ConformerConfig::new(0, 6, 2, 3);
        let p = Params::new();
        let g = Graph::new();
        let b = p.bind(&g);
        let x = Tensor::randn(&[4, 6], 1.0, &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
        let y = encode(g.leaf(x.clone()), &cfg, &b.scope("enc"), None).unwrap();
        let pe = positional_encoding(4, 6).unwrap();
        for i in 0..24 {
            assert_eq!(y.value().data()[i], x.data()[i] + pe.data()[i]);
        }
        assert_eq!(pe.at(&[0, 1]), 1.0);
        assert_eq!(pe.at(&[1, 0]), 1f64.sin());
    }
}
