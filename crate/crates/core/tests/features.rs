use avsk::features::{
    add_white_noise, audio_features, downsample_clip, hz_to_mel, load_shard, logmel, logmel_frames, mel_to_hz,
    nearest_video_index, oracle_transcribe, read_shard, save_shard, stack_frames, synth_generate, unstack,
    write_shard, SynthExample, HOP, N_MELS, SAMPLES_PER_FRAME, STACKED_DIM, VIDEO_FPS,
};
use avsk::metrics::wer;
use avsk::{Error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[test]
fn one_second_gives_98_mel_frames_and_33_stacked() {
    assert_eq!(logmel_frames(16_000), 98);
    let a = audio_features(&noise(16_000, 0)).unwrap();
    assert_eq!((a.len(), a.dim()), (33, STACKED_DIM));
    assert_eq!(STACKED_DIM, 3 * N_MELS);
    assert_eq!(a.hop_ms, 30.0);
    assert!(matches!(logmel(&[0.0; 399]), Err(Error::Contract(_))));
}

#[test]
fn mel_scale_round_trips() {
    assert!((hz_to_mel(1000.0) - 1000.0).abs() < 0.1);
    for f in [0.0, 100.0, 440.0, 4000.0, 8000.0] {
        assert!((mel_to_hz(hz_to_mel(f)) - f).abs() < 1e-9);
    }
}

#[test]
fn video_rate_matches_audio_hop() {
    // Three 10 ms acoustic hops per video frame.
    assert_eq!(SAMPLES_PER_FRAME, 3 * HOP);
    assert!((VIDEO_FPS * SAMPLES_PER_FRAME as f64 - 16_000.0).abs() < 1e-9);
}

#[test]
fn synthetic_data_is_deterministic_and_prefix_stable() {
    let a = synth_generate(11, 5, 2, 8).unwrap();
    assert_eq!(a, synth_generate(11, 5, 2, 8).unwrap());
    assert_eq!(&a[..3], &synth_generate(11, 3, 2, 8).unwrap()[..]);
    assert_ne!(a, synth_generate(12, 5, 2, 8).unwrap());
}

#[test]
fn synthetic_examples_are_consistent() {
    for e in synth_generate(3, 30, 2, 10).unwrap() {
        let t = e.frames();
        assert_eq!(e.audio.len(), t * SAMPLES_PER_FRAME);
        assert_eq!(e.transcript.len(), e.token_speakers.len());
        assert_eq!(e.active_track.len(), t);
        assert_eq!(e.face_tracks.len(), 2);
        assert!(e.face_tracks.iter().all(|c| c.len() == t));
        for w in e.speaker_spans.windows(2) {
            assert!(w[0].end_s <= w[1].start_s + 1e-12);
            assert_ne!(w[0].speaker, w[1].speaker);
        }
        let end = e.speaker_spans.last().unwrap().end_s;
        assert!((end - t as f64 / VIDEO_FPS).abs() < 1e-9);
        // The composite video shows the active speaker's track.
        for f in 0..t {
            assert_eq!(e.video.frame(f), e.face_tracks[e.active_track[f]].frame(f));
        }
    }
}

#[test]
fn oracle_reads_clean_video_perfectly() {
    let data = synth_generate(21, 50, 1, 26).unwrap();
    let (mut errs, mut total) = (0.0, 0.0);
    for e in &data {
        let hyp = oracle_transcribe(&e.video, 26);
        errs += wer(&e.transcript, &hyp).unwrap() * e.transcript.len() as f64;
        total += e.transcript.len() as f64;
    }
    assert_eq!(errs / total, 0.0);
}

#[test]
fn shard_round_trip() {
    let data = synth_generate(4, 6, 2, 10).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.avsk");
    save_shard(&path, &data).unwrap();
    let back = load_shard(&path).unwrap();
    assert_eq!(back.len(), data.len());
    for (a, b) in data.iter().zip(&back) {
        assert_eq!(a.transcript, b.transcript);
        assert_eq!(a.token_speakers, b.token_speakers);
        assert_eq!(a.speaker_spans, b.speaker_spans);
        assert_eq!(a.track_speakers, b.track_speakers);
        assert_eq!(a.active_track, b.active_track);
        assert_eq!(a.video.mask(), b.video.mask());
        for (x, y) in a.audio.iter().zip(&b.audio) {
            assert_eq!(*x as f32, *y as f32);
        }
        assert!(a.video.frames().max_abs_diff(b.video.frames()) < 1e-6);
    }
    // A second pass is lossless.
    let mut buf = Vec::new();
    write_shard(&mut buf, &back).unwrap();
    assert_eq!(read_shard(&buf[..]).unwrap(), back);
    let mut bad = buf.clone();
    bad[0] = b'Z';
    assert!(matches!(read_shard(&bad[..]), Err(Error::Format(_))));
    buf.push(1);
    assert!(matches!(read_shard(&buf[..]), Err(Error::Format(_))));
    let empty: Vec<SynthExample> = Vec::new();
    let mut b2 = Vec::new();
    write_shard(&mut b2, &empty).unwrap();
    assert!(read_shard(&b2[..]).unwrap().is_empty());
}

#[test]
fn white_noise_hits_the_requested_snr() {
    let wave: Vec<f64> = (0..200_000).map(|i| (i as f64 * 0.05).sin()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for snr in [-20.0, 0.0, 10.0] {
        let noisy = add_white_noise(&wave, snr, &mut rng);
        let ps: f64 = wave.iter().map(|x| x * x).sum();
        let pn: f64 = noisy.iter().zip(&wave).map(|(a, b)| (a - b).powi(2)).sum();
        let got = 10.0 * (ps / pn).log10();
        assert!((got - snr).abs() < 0.1, "{got} vs {snr}");
    }
}

#[test]
fn downsampling_keeps_mask_and_mean() {
    let e = &synth_generate(6, 1, 1, 5).unwrap()[0];
    let mut clip = e.video.clone();
    let mut mask = vec![true; clip.len()];
    mask[0] = false;
    clip.apply_mask(&mask).unwrap();
    let small = downsample_clip(&clip, (4, 4)).unwrap();
    assert_eq!(small.mask(), clip.mask());
    assert_eq!(small.hw(), (4, 4));
    for f in 0..clip.len() {
        let m = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
        assert!((m(small.frame(f)) - m(clip.frame(f))).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn logmel_is_shift_covariant(seed in 0u64..10_000, k in 1usize..5, len in 400usize..3000) {
        let w = noise(len, seed);
        let mut shifted = noise(k * HOP, seed + 1);
        shifted.extend(&w);
        let (a, b) = (logmel(&w).unwrap(), logmel(&shifted).unwrap());
        prop_assert_eq!(b.rows(), a.rows() + k);
        for i in 0..a.rows() {
            prop_assert_eq!(a.row(i), b.row(i + k));
        }
    }

    #[test]
    fn stacking_round_trips(n in 1usize..20, d in 1usize..6, factor in 1usize..5) {
        let x = Tensor::randn(&[n, d], 1.0, &mut ChaCha8Rng::seed_from_u64(n as u64)).unwrap();
        let s = stack_frames(&x, factor).unwrap();
        prop_assert_eq!(s.len(), n.div_ceil(factor));
        let back = unstack(&s, factor).unwrap();
        prop_assert_eq!(&back.data()[..n * d], x.data());
        for r in n..back.rows() {
            prop_assert_eq!(back.row(r), x.row(n - 1));
        }
    }

    #[test]
    fn nearest_index_is_monotone_and_near(tv in 1usize..60, ta in 1usize..200) {
        let idx = nearest_video_index(tv, ta);
        prop_assert_eq!(idx.len(), ta);
        prop_assert!(idx.windows(2).all(|w| w[0] <= w[1]));
        for (k, &j) in idx.iter().enumerate() {
            let ca = (k as f64 + 0.5) / ta as f64;
            let best = (0..tv).map(|i| ((i as f64 + 0.5) / tv as f64 - ca).abs()).fold(f64::INFINITY, f64::min);
            prop_assert!(((j as f64 + 0.5) / tv as f64 - ca).abs() <= best + 1e-12);
        }
    }
}
