#![allow(dead_code)]
//! Independent reference implementations shared by the integration suites.

use avsk::autodiff::{grad_check_many, Graph};
use avsk::conformer::{conformer_block_traced, ConformerConfig, LN_EPS};
use avsk::kernels::Padding;
use avsk::metrics::SpeakerSegment;
use avsk::nn::{Bound, Params, SpecBuilder};
use avsk::transducer::JointLattice;
use avsk::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

// Conformer block, written against plain nested vectors.

pub type M = Vec<Vec<f64>>;

pub fn block_params(d: usize, heads: usize, k: usize, seed: u64) -> Params {
    let cfg = ConformerConfig::new(1, d, heads, k);
    let mut b = SpecBuilder::new("");
    cfg.block_specs(&mut b);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Params::init(&b.finish(), &mut rng).unwrap();
    // Non-trivial norms and biases so every term is exercised.
    for (_, t) in p.iter_mut() {
        if t.shape().len() == 1 {
            for v in t.data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }
    p
}

pub fn mat(t: &Tensor) -> M {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn vecp(p: &Params, name: &str) -> Vec<f64> {
    p.get(name).unwrap().data().to_vec()
}

pub fn lin(p: &Params, name: &str, x: &M) -> M {
    let w = p.get(&format!("{name}.w")).unwrap();
    let b = vecp(p, &format!("{name}.b"));
    let (fi, fo) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|r| (0..fo).map(|j| b[j] + (0..fi).map(|i| r[i] * w.at(&[i, j])).sum::<f64>()).collect())
        .collect()
}

pub fn ln(p: &Params, name: &str, x: &M) -> M {
    let g = vecp(p, &format!("{name}.g"));
    let b = vecp(p, &format!("{name}.b"));
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let m = r.iter().sum::<f64>() / n;
            let v = r.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n;
            r.iter().enumerate().map(|(j, a)| (a - m) / (v + LN_EPS).sqrt() * g[j] + b[j]).collect()
        })
        .collect()
}

pub fn sig(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

pub fn swish(x: &M) -> M {
    x.iter().map(|r| r.iter().map(|a| a * sig(*a)).collect()).collect()
}

pub fn add(a: &M, b: &M, s: f64) -> M {
    a.iter().zip(b).map(|(r, q)| r.iter().zip(q).map(|(x, y)| x + s * y).collect()).collect()
}

pub fn ffn(p: &Params, s: &str, x: &M) -> M {
    lin(p, &format!("{s}.l2"), &swish(&lin(p, &format!("{s}.l1"), &ln(p, &format!("{s}.ln"), x))))
}

pub fn attention(p: &Params, x: &M, heads: usize) -> (M, Vec<M>) {
    let h = ln(p, "mhsa.ln", x);
    let (q, k, v) = (lin(p, "mhsa.q", &h), lin(p, "mhsa.k", &h), lin(p, "mhsa.v", &h));
    let (t, d) = (x.len(), x[0].len());
    let dh = d / heads;
    let mut cat = vec![vec![0.0; d]; t];
    let mut ws = Vec::new();
    for hd in 0..heads {
        let cols = hd * dh..(hd + 1) * dh;
        let mut w = vec![vec![0.0; t]; t];
        for i in 0..t {
            let s: Vec<f64> = (0..t)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|a| (a - mx).exp()).sum();
            for j in 0..t {
                w[i][j] = (s[j] - mx).exp() / z;
            }
            for c in cols.clone() {
                cat[i][c] = (0..t).map(|j| w[i][j] * v[j][c]).sum();
            }
        }
        ws.push(w);
    }
    (lin(p, "mhsa.o", &cat), ws)
}

pub fn conv(p: &Params, x: &M) -> M {
    let h = lin(p, "conv.pw1", &ln(p, "conv.ln", x));
    let d = x[0].len();
    let glu: M = h.iter().map(|r| (0..d).map(|j| r[j] * sig(r[d + j])).collect()).collect();
    let w = p.get("conv.dw").unwrap();
    let k = w.shape()[0];
    let t = x.len() as isize;
    let pad = (k as isize - 1) / 2;
    let dw: M = (0..t)
        .map(|i| {
            (0..d)
                .map(|c| {
                    (0..k)
                        .filter_map(|ki| {
                            let s = i + ki as isize - pad;
                            (0..t).contains(&s).then(|| glu[s as usize][c] * w.at(&[ki, c]))
                        })
                        .sum()
                })
                .collect()
        })
        .collect();
    lin(p, "conv.pw2", &swish(&ln(p, "conv.ln2", &dw)))
}

pub fn max_diff(a: &Tensor, b: &M) -> f64 {
    a.data().iter().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Random block config and input for `seed`, and the worst stage deviation from the oracle.
pub fn block_stage_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let heads = [1, 2][rng.random_range(0..2)];
    let d = 2 * rng.random_range(1..=4usize);
    let k = [1, 3, 5][rng.random_range(0..3)];
    let t = rng.random_range(1..=8usize);
    let p = block_params(d, heads, k, seed);
    let x = Tensor::randn(&[t, d], 1.0, &mut rng).unwrap();

    let g = Graph::new();
    let b = p.bind(&g);
    let tr = conformer_block_traced(g.leaf(x.clone()), &b.scope(""), heads, None).unwrap();

    let x0 = mat(&x);
    let x1 = add(&x0, &ffn(&p, "ffn1", &x0), 0.5);
    let mut err = max_diff(&tr.after_ffn1.value(), &x1);
    let (att, ws) = attention(&p, &x1, heads);
    let x2 = add(&x1, &att, 1.0);
    err = err.max(max_diff(&tr.after_mhsa.value(), &x2));
    for (got, want) in tr.attention.iter().zip(&ws) {
        err = err.max(max_diff(&got.value(), want));
    }
    let x3 = add(&x2, &conv(&p, &x2), 1.0);
    err = err.max(max_diff(&tr.after_conv.value(), &x3));
    let y = ln(&p, "ln_out", &add(&x3, &ffn(&p, "ffn2", &x3), 0.5));
    err = err.max(max_diff(&tr.out.value(), &y));
    err
}

/// Finite-difference check of a whole block with respect to its input and parameters.
pub fn block_grad_error() -> f64 {
    let p = block_params(4, 2, 3, 42);
    // The key bias cancels inside the softmax; its gradient is zero and is left out.
    let names: Vec<String> = p.iter().map(|(k, _)| k.clone()).filter(|k| k != "mhsa.k.b").collect();
    let kb = p.get("mhsa.k.b").unwrap().clone();
    let mut xs = vec![rand_t(&[3, 4], 43)];
    xs.extend(names.iter().map(|n| p.get(n).unwrap().clone()));
    grad_check_many(
        |g, vs| {
            let bound: Bound = names
                .iter()
                .cloned()
                .zip(vs[1..].iter().copied())
                .chain([("mhsa.k.b".to_string(), g.constant(kb.clone()))])
                .collect();
            let out = conformer_block_traced(vs[0], &bound.scope(""), 2, None)?.out;
            out.mul(g.constant(rand_t(&[3, 4], 44)))?.sum()
        },
        &xs,
        1e-5,
    )
    .unwrap()
}

// Autodiff primitives.

/// Reduces an arbitrary tensor to a scalar with non-uniform weights so every
/// output coordinate contributes a distinct gradient.
pub fn weighted<'g>(y: avsk::Var<'g>) -> avsk::Result<avsk::Var<'g>> {
    let n = y.value().len();
    let w: Vec<f64> = (0..n).map(|i| 0.5 + (i * 7 % 11) as f64 / 3.0).collect();
    let wv = y.graph().constant(Tensor::new(&y.shape(), w)?);
    y.mul(wv)?.sum()
}

macro_rules! prim_check {
    ($name:expr, $shapes:expr, |$v:ident| $body:expr) => {{
        let shapes: Vec<Vec<usize>> = $shapes;
        let mut worst: f64 = 0.0;
        for seed in 0..5u64 {
            let xs: Vec<Tensor> = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| rand_t(s, seed * 31 + i as u64))
                .collect();
            let err = grad_check_many(|_, $v| weighted($body?), &xs, 1e-6).unwrap();
            worst = worst.max(err);
        }
        ($name, worst)
    }};
}

/// Worst relative gradient error per primitive over five random inputs each.
pub fn primitive_grad_errors() -> Vec<(&'static str, f64)> {
    vec![
        prim_check!("add", vec![vec![3, 4], vec![3, 4]], |v| v[0].add(v[1])),
        prim_check!("sub", vec![vec![3, 4], vec![3, 4]], |v| v[0].sub(v[1])),
        prim_check!("mul", vec![vec![3, 4], vec![3, 4]], |v| v[0].mul(v[1])),
        prim_check!("scale", vec![vec![5]], |v| v[0].scale(-1.7)),
        prim_check!("add_bias", vec![vec![3, 4], vec![4]], |v| v[0].add_bias(v[1])),
        prim_check!("matmul", vec![vec![3, 5], vec![5, 2]], |v| v[0].matmul(v[1])),
        prim_check!("transpose", vec![vec![3, 5]], |v| v[0].transpose()),
        prim_check!("sigmoid", vec![vec![4, 4]], |v| v[0].sigmoid()),
        prim_check!("tanh", vec![vec![4, 4]], |v| v[0].tanh()),
        prim_check!("swish", vec![vec![4, 4]], |v| v[0].swish()),
        prim_check!("softmax", vec![vec![3, 6]], |v| v[0].softmax()),
        prim_check!("log_softmax", vec![vec![3, 6]], |v| v[0].log_softmax()),
        prim_check!("layer_norm", vec![vec![4, 8], vec![8], vec![8]], |v| v[0].layer_norm(v[1], v[2], 1e-5)),
        prim_check!("sum", vec![vec![2, 3]], |v| v[0].sum()),
        prim_check!("reshape", vec![vec![2, 6]], |v| v[0].reshape(&[3, 4])),
        prim_check!("concat_cols", vec![vec![3, 2], vec![3, 4]], |v| avsk::Var::concat_cols(&[v[0], v[1]])),
        prim_check!("slice_cols", vec![vec![3, 6]], |v| v[0].slice_cols(1, 4)),
        prim_check!("concat_rows", vec![vec![2, 3], vec![4, 3]], |v| avsk::Var::concat_rows(&[v[0], v[1]])),
        prim_check!("gather_rows", vec![vec![4, 3]], |v| v[0].gather_rows(&[2, 0, 2, 3])),
        prim_check!("tile_cols", vec![vec![3, 2]], |v| v[0].tile_cols(3)),
        prim_check!("depthwise_conv1d", vec![vec![7, 3], vec![5, 3]], |v| v[0].depthwise_conv1d(v[1])),
        prim_check!("conv2d_same", vec![vec![2, 5, 4, 2], vec![3, 3, 2, 3]], |v| v[0].conv2d(v[1], 1, Padding::Same)),
        prim_check!("conv2d_stride2", vec![vec![6, 5, 2], vec![3, 3, 2, 2]], |v| v[0].conv2d(v[1], 2, Padding::Same)),
        prim_check!("conv2d_valid", vec![vec![5, 5, 2], vec![3, 2, 2, 2]], |v| v[0].conv2d(v[1], 1, Padding::Valid)),
        prim_check!("max_pool2", vec![vec![2, 4, 6, 3]], |v| v[0].max_pool2()),
        prim_check!("mean_mid", vec![vec![2, 5, 3]], |v| v[0].mean_mid(2, 5)),
        prim_check!("glu", vec![vec![3, 8]], |v| v[0].glu()),
        prim_check!("joint_add", vec![vec![3, 4], vec![2, 4]], |v| v[0].joint_add(v[1])),
        prim_check!("scale_rows", vec![vec![3, 4], vec![3, 1]], |v| v[0].scale_rows(v[1])),
        prim_check!("sum_cols", vec![vec![3, 4]], |v| v[0].sum_cols()),
        prim_check!("pick", vec![vec![3, 4]], |v| v[0].pick(&[3, 0, 1])),
    ]
}

// Transducer.

pub fn random_instance(seed: u64) -> (JointLattice, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = rng.random_range(1..=4);
    let u = rng.random_range(0..=3);
    let v = rng.random_range(2..=4);
    let logits = Tensor::randn(&[t, u + 1, v], 1.5, &mut rng).unwrap();
    let labels = (0..u).map(|_| rng.random_range(1..v)).collect();
    (JointLattice::from_logits(&logits).unwrap(), labels)
}

// Diarization.

pub fn seg(s: &str, a: f64, b: f64) -> SpeakerSegment {
    SpeakerSegment::new(s, a, b).unwrap()
}

/// Non-overlapping segments on a 10 ms grid over `[0, len_cs)` centiseconds.
pub fn random_segments(rng: &mut ChaCha8Rng, len_cs: u32, speakers: usize, prefix: &str) -> Vec<SpeakerSegment> {
    let mut out = Vec::new();
    let mut t = 0;
    while t < len_cs {
        let gap = rng.random_range(0..40);
        let dur = rng.random_range(1..200);
        let (a, b) = (t + gap, (t + gap + dur).min(len_cs));
        if a >= b {
            break;
        }
        let s = rng.random_range(0..speakers);
        out.push(seg(&format!("{prefix}{s}"), a as f64 / 100.0, b as f64 / 100.0));
        t = b;
    }
    out
}

pub fn label_at(segs: &[SpeakerSegment], t: f64) -> Option<&str> {
    segs.iter().find(|s| s.start_s <= t && t < s.end_s).map(|s| s.speaker.as_str())
}

pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

/// Brute-force DER on 10 ms frames, trying every one-to-one speaker map.
pub fn der_oracle(r: &[SpeakerSegment], h: &[SpeakerSegment]) -> f64 {
    let end = r.iter().chain(h).map(|s| s.end_s).fold(0.0, f64::max);
    let frames = (end * 100.0).round() as usize;
    let labels = |s: &[SpeakerSegment]| {
        let mut v: Vec<String> = s.iter().map(|x| x.speaker.clone()).collect();
        v.sort();
        v.dedup();
        v
    };
    let (rl, hl) = (labels(r), labels(h));
    let n = rl.len().max(hl.len());
    let (mut ref_n, mut miss, mut fa) = (0.0, 0.0, 0.0);
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for f in 0..frames {
        let t = (f as f64 + 0.5) / 100.0;
        let (a, b) = (label_at(r, t), label_at(h, t));
        ref_n += f64::from(a.is_some());
        match (a, b) {
            (Some(_), None) => miss += 1.0,
            (None, Some(_)) => fa += 1.0,
            (Some(a), Some(b)) => pairs.push((
                rl.iter().position(|x| x == a).unwrap(),
                hl.iter().position(|x| x == b).unwrap(),
            )),
            (None, None) => {}
        }
    }
    // Hypothesis label j maps to reference label perm[j] (indices ≥ len are unused slots).
    let best_conf = permutations(n)
        .iter()
        .map(|perm| pairs.iter().filter(|(ri, hi)| perm[*hi] != *ri).count() as f64)
        .fold(f64::INFINITY, f64::min);
    (miss + fa + best_conf) / ref_n
}

