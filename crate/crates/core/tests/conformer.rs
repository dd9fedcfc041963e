mod oracles;

use avsk::autodiff::Graph;
use avsk::conformer::{conformer_block_traced, encode, self_attention, ConformerConfig};
use avsk::nn::{Params, SpecBuilder};
use avsk::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use oracles::*;

#[test]
fn block_stages_match_plain_oracle_over_seeds() {
    for seed in 0..20u64 {
        let err = block_stage_error(seed);
        assert!(err < 1e-10, "seed {seed}: max abs diff {err}");
    }
}

#[test]
fn block_gradients_match_finite_differences() {
    let err = block_grad_error();
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn attention_is_full_context() {
    // Perturbing the first frame changes every output frame.
    let p = block_params(8, 2, 3, 5);
    let run = |x: &Tensor| {
        let g = Graph::new();
        let b = p.bind(&g);
        conformer_block_traced(g.leaf(x.clone()), &b.scope(""), 2, None).unwrap().out.to_tensor().unwrap()
    };
    let x = Tensor::randn(&[12, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let base = run(&x);
    let mut x2 = x.clone();
    x2.data_mut()[0] += 1.0;
    let pert = run(&x2);
    for t in 0..12 {
        assert!(base.row(t) != pert.row(t), "frame {t} unaffected");
    }
}

#[test]
fn deep_encoder_stays_finite_and_normalized() {
    let cfg = ConformerConfig::new(6, 8, 2, 5);
    let mut b = SpecBuilder::new("enc");
    cfg.specs(&mut b);
    let p = Params::init(&b.finish(), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let g = Graph::new();
    let bound = p.bind(&g);
    let x = Tensor::randn(&[40, 8], 10.0, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let y = encode(g.leaf(x), &cfg, &bound.scope("enc"), None).unwrap().to_tensor().unwrap();
    for r in 0..y.rows() {
        let row = y.row(r);
        assert!(row.iter().all(|v| v.is_finite()));
        let m = row.iter().sum::<f64>() / 8.0;
        assert!(m.abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn attention_rows_sum_to_one(seed in 0u64..1000, t in 1usize..10, scale in 0.1f64..50.0) {
        let p = block_params(8, 4, 3, seed);
        let g = Graph::new();
        let b = p.bind(&g);
        let x = Tensor::randn(&[t, 8], scale, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let att = self_attention(g.leaf(x), &b.scope("mhsa"), 4).unwrap();
        prop_assert_eq!(att.weights.len(), 4);
        for w in &att.weights {
            let w = w.value();
            for r in 0..t {
                let s: f64 = w.row(r).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
                prop_assert!(w.row(r).iter().all(|v| *v >= 0.0));
            }
        }
    }
}
