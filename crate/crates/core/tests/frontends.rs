use avsk::autodiff::{grad_check_many, Graph};
use avsk::frontends::{
    count_params, lp_forward, FrontEndConfig, VggConfig, VideoClip, VitConfig,
};
use avsk::nn::{self, Bound, Params, SpecBuilder};
use avsk::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn clip(t: usize, h: usize, w: usize, seed: u64) -> VideoClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    VideoClip::new(Tensor::uniform(&[t, h, w, 3], 0.0, 1.0, &mut rng).unwrap(), 25.0).unwrap()
}

fn params(cfg: &FrontEndConfig, seed: u64) -> Params {
    Params::init(&cfg.param_specs("").unwrap(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn forward(cfg: &FrontEndConfig, p: &Params, c: &VideoClip) -> Tensor {
    let g = Graph::new();
    let b = p.bind(&g);
    cfg.forward(&g, c, &b.scope("")).unwrap().to_tensor().unwrap()
}

#[test]
fn single_patch_vit_equals_linear_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for case in 0..10u64 {
        let (h, w) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let (t, d) = (rng.random_range(1..=7), rng.random_range(1..=9));
        let vit = FrontEndConfig::vit([h, w], d, VitConfig { patch: [1, h, w], depth: 0, heads: 1, ffn_expansion: 4 });
        let p = params(&vit, case);
        let c = clip(t, h, w, 100 + case);
        let via_vit = forward(&vit, &p, &c);

        let g = Graph::new();
        let lp = lp_forward(&g, &c, g.leaf(p.get("proj.w").unwrap().clone()), g.leaf(p.get("proj.b").unwrap().clone()))
            .unwrap()
            .to_tensor()
            .unwrap();
        assert_eq!(via_vit.shape(), lp.shape(), "case {case}");
        assert_eq!(via_vit.data(), lp.data(), "case {case}: not bit-identical");
    }
}

#[test]
fn lp_dimensions_at_reference_resolution() {
    let cfg = FrontEndConfig::lp([32, 32], 512);
    let specs = cfg.param_specs("").unwrap();
    assert_eq!(specs[0].shape, vec![3072, 512]);
    assert_eq!(count_params(&cfg).unwrap(), 3072 * 512 + 512);
}

#[test]
fn count_params_matches_instantiation() {
    let cfgs = [
        FrontEndConfig::lp([8, 8], 16),
        FrontEndConfig::vit([8, 8], 16, VitConfig { patch: [2, 4, 4], depth: 2, heads: 4, ffn_expansion: 4 }),
        FrontEndConfig::vgg21d([8, 8], 16, VggConfig { channels: vec![4, 8], spatial_kernel: 3, temporal_kernel: 3 }),
    ];
    for cfg in &cfgs {
        let p = params(cfg, 1);
        assert_eq!(count_params(cfg).unwrap(), p.numel(), "{:?}", cfg.kind);
        let mut b = SpecBuilder::new("");
        cfg.specs(&mut b).unwrap();
        assert_eq!(nn::count(&b.finish()), p.numel());
    }
}

#[test]
fn vgg_is_temporally_local() {
    let cfg = FrontEndConfig::vgg21d([8, 8], 8, VggConfig { channels: vec![4, 4], spatial_kernel: 3, temporal_kernel: 3 });
    let radius = cfg.temporal_radius().unwrap();
    assert_eq!(radius, 2);
    let p = params(&cfg, 2);
    let c = clip(12, 8, 8, 3);
    let base = forward(&cfg, &p, &c);
    let mut frames = c.frames().clone();
    let per = 8 * 8 * 3;
    frames.data_mut()[5 * per..6 * per].iter_mut().for_each(|v| *v = 1.0 - *v);
    let pert = forward(&cfg, &p, &VideoClip::new(frames, 25.0).unwrap());
    for t in 0..12 {
        let changed = base.row(t) != pert.row(t);
        assert_eq!(changed, t.abs_diff(5) <= radius, "frame {t}");
    }
}

#[test]
fn vit_gradients_match_finite_differences() {
    let cfg = FrontEndConfig::vit([4, 4], 4, VitConfig { patch: [2, 2, 2], depth: 1, heads: 2, ffn_expansion: 2 });
    let p = params(&cfg, 4);
    let c = clip(3, 4, 4, 5);
    // Softmax is shift invariant, so the key bias has an identically zero gradient.
    let is_key_bias = |n: &str| n.ends_with("mhsa.k.b");
    {
        let g = Graph::new();
        let b = p.bind(&g);
        let y = cfg.forward(&g, &c, &b.scope("")).unwrap().sum().unwrap();
        let grads = g.backward(y).unwrap();
        let kb = b.get("layer0.mhsa.k.b").unwrap();
        assert!(grads.get(kb).unwrap().data().iter().all(|v| v.abs() < 1e-12));
    }
    let names: Vec<String> = p.iter().map(|(k, _)| k.clone()).filter(|k| !is_key_bias(k)).collect();
    let fixed: Vec<(String, Tensor)> =
        p.iter().filter(|(k, _)| is_key_bias(k)).map(|(k, t)| (k.clone(), t.clone())).collect();
    let xs: Vec<Tensor> = names.iter().map(|n| p.get(n).unwrap().clone()).collect();
    let err = grad_check_many(
        |g, vs| {
            let bound: Bound = names
                .iter()
                .cloned()
                .zip(vs.iter().copied())
                .chain(fixed.iter().map(|(k, t)| (k.clone(), g.constant(t.clone()))))
                .collect();
            let y = cfg.forward(g, &c, &bound.scope(""))?;
            let w = g.constant(Tensor::randn(&y.shape(), 1.0, &mut ChaCha8Rng::seed_from_u64(6))?);
            y.mul(w)?.sum()
        },
        &xs,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn vgg_gradients_match_finite_differences() {
    let cfg = FrontEndConfig::vgg21d([4, 4], 3, VggConfig { channels: vec![2, 2], spatial_kernel: 3, temporal_kernel: 3 });
    let p = params(&cfg, 7);
    let c = clip(3, 4, 4, 8);
    let names: Vec<String> = p.iter().map(|(k, _)| k.clone()).collect();
    let xs: Vec<Tensor> = names.iter().map(|n| p.get(n).unwrap().clone()).collect();
    let err = grad_check_many(
        |g, vs| {
            let bound: Bound = names.iter().cloned().zip(vs.iter().copied()).collect();
            let y = cfg.forward(g, &c, &bound.scope(""))?;
            let w = g.constant(Tensor::randn(&y.shape(), 1.0, &mut ChaCha8Rng::seed_from_u64(9))?);
            y.mul(w)?.sum()
        },
        &xs,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn wrong_input_size_is_rejected() {
    let cfg = FrontEndConfig::lp([8, 8], 4);
    let p = params(&cfg, 0);
    let g = Graph::new();
    let b = p.bind(&g);
    assert!(cfg.forward(&g, &clip(2, 4, 4, 0), &b.scope("")).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn lp_is_affine_in_the_frames(seed in 0u64..10_000, t in 1usize..6, a in -2.0f64..2.0) {
        // f(a·x + (1−a)·y) = a·f(x) + (1−a)·f(y)
        let cfg = FrontEndConfig::lp([3, 4], 5);
        let p = params(&cfg, seed);
        let (x, y) = (clip(t, 3, 4, seed), clip(t, 3, 4, seed + 1));
        let mix: Vec<f64> = x.frames().data().iter().zip(y.frames().data()).map(|(u, v)| a * u + (1.0 - a) * v).collect();
        let z = VideoClip::new(Tensor::new(x.frames().shape(), mix).unwrap(), 25.0).unwrap();
        let (fx, fy, fz) = (forward(&cfg, &p, &x), forward(&cfg, &p, &y), forward(&cfg, &p, &z));
        for i in 0..fz.len() {
            let want = a * fx.data()[i] + (1.0 - a) * fy.data()[i];
            prop_assert!((fz.data()[i] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn lp_outputs_depend_only_on_their_own_frame(seed in 0u64..10_000, t in 2usize..8) {
        let cfg = FrontEndConfig::lp([2, 2], 3);
        let p = params(&cfg, seed);
        let c = clip(t, 2, 2, seed);
        let base = forward(&cfg, &p, &c);
        let k = (seed as usize) % t;
        let mut frames = c.frames().clone();
        frames.data_mut()[k * 12] += 1.0;
        let pert = forward(&cfg, &p, &VideoClip::new(frames, 25.0).unwrap());
        for r in 0..t {
            prop_assert_eq!(base.row(r) != pert.row(r), r == k);
        }
    }
}
