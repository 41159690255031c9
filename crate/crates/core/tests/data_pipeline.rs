mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sefgan::config::RunConfig;
use sefgan::data::audio::energy;
use sefgan::data::desk::synth_noise;
use sefgan::data::mixing::crop_looped;
use sefgan::data::*;

fn tone(n: usize, f: f64, amp: f64) -> Vec<f32> {
    (0..n).map(|i| (amp * (i as f64 * f).sin()) as f32).collect()
}

fn noise(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    synth_noise(&mut rng, n)
}

#[test]
fn gain_examples() {
    let c = tone(4000, 0.05, 0.5);
    let n = tone(4000, 0.31, 0.5);
    let (ec, en) = (energy(&c), energy(&n));
    // Rescale so the energies match exactly.
    let n: Vec<f32> = n.iter().map(|v| (*v as f64 * (ec / en).sqrt()) as f32).collect();
    assert!((scale_noise_for_snr(&c, &n, 0.0).unwrap() - 1.0).abs() < 1e-6);
    let g20 = scale_noise_for_snr(&c, &n, 20.0).unwrap();
    assert!((g20 - 0.1).abs() < 1e-6);
    let scaled: Vec<f32> = n.iter().map(|v| v * g20 as f32).collect();
    assert!((10.0 * (energy(&c) / energy(&scaled)).log10() - 20.0).abs() < 1e-4);
    let c2: Vec<f32> = c.iter().map(|v| v * 2.0).collect();
    assert!((scale_noise_for_snr(&c2, &n, 0.0).unwrap() - 2.0).abs() < 1e-5);
    assert!(matches!(scale_noise_for_snr(&vec![0.0; 4000], &n, 0.0), Err(sefgan::Error::Degenerate(_))));
}

#[test]
fn equal_energy_mixture_at_zero_db() {
    let c = tone(3000, 0.07, 0.3);
    let n = noise(3000, 4);
    let (cc, y) = mix_signals(&c, &n, 0, 0.0, DEFAULT_TARGET_PEAK).unwrap();
    assert!(measured_snr_db(&cc, &y).abs() < 0.01);
    let peak = cc.iter().chain(&y).fold(0f32, |m, v| m.max(v.abs()));
    assert!((peak as f64 - DEFAULT_TARGET_PEAK).abs() < 1e-6);
}

#[test]
fn short_noise_is_looped() {
    let c = tone(1000, 0.1, 0.4);
    let n = noise(300, 5);
    let (cc, y) = mix_signals(&c, &n, 250, 5.0, 0.9).unwrap();
    assert_eq!(cc.len(), 1000);
    assert_eq!(y.len(), 1000);
    let looped = crop_looped(&n, 250, 1000);
    assert_eq!(looped[50], n[0]);
    assert_eq!(looped[350], n[0]);
    assert!((measured_snr_db(&cc, &y) - 5.0).abs() < 0.01);
}

#[test]
fn snr_draws_are_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut draws: Vec<f64> = (0..100_000).map(|_| sample_snr(&mut rng)).collect();
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    assert!((mean - 10.0).abs() < 0.1, "mean {mean}");
    assert!(draws.iter().all(|&v| (0.0..=20.0).contains(&v)));
    draws.sort_by(f64::total_cmp);
    let n = draws.len() as f64;
    let ks = draws
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let cdf = v / 20.0;
            (cdf - i as f64 / n).abs().max(((i + 1) as f64 / n - cdf).abs())
        })
        .fold(0.0, f64::max);
    assert!(ks < 0.01, "KS statistic {ks}");
    let mut again = ChaCha8Rng::seed_from_u64(2024);
    assert_eq!(sample_snr(&mut again), {
        let mut r = ChaCha8Rng::seed_from_u64(2024);
        sample_snr(&mut r)
    });
}

#[test]
fn segmentation_contract() {
    let spec = SegmentSpec { segment_samples: 48, hop: 48 };
    let w: Vec<f32> = (0..100).map(|i| i as f32 + 1.0).collect();
    assert_eq!(segment_eval(&w[..96], &spec).len(), 2);
    let one = segment_eval(&w[..48], &spec);
    assert_eq!(one.len(), 1);
    assert!(!one[0].padded());
    let plus = segment_eval(&w[..49], &spec);
    assert_eq!(plus.len(), 2);
    assert_eq!(plus[1].valid, 1);
    assert_eq!(plus[1].samples[0], 49.0);
    assert!(plus[1].samples[1..].iter().all(|&v| v == 0.0));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let train = segment_train(&w, &spec, &mut rng);
    assert_eq!(train.len(), 2);
    assert!(train.iter().all(|s| s.samples.len() == 48 && !s.padded()));
}

#[test]
fn desk_corpus_mixtures_hit_their_snr_and_replay_identically() {
    let rc = RunConfig::desk();
    let d = common::desk_data(&rc);
    for e in &d.manifest.entries {
        let (c, y) = synthesize_mixture(&d.manifest, e, rc.data.target_peak).unwrap();
        let (c2, y2) = synthesize_mixture(&d.manifest, e, rc.data.target_peak).unwrap();
        assert_eq!(c.samples, c2.samples);
        assert_eq!(y.samples, y2.samples);
        let got = measured_snr_db(&c.samples, &y.samples);
        assert!((got - e.snr_db).abs() <= 0.01, "{}: {got} vs {}", e.id, e.snr_db);
    }
    let path = d.dir.path().join("copy.jsonl");
    d.manifest.save(&path).unwrap();
    let back = Manifest::load(&path).unwrap();
    assert_eq!(back.entries, d.manifest.entries);
}

#[test]
fn low_snr_selector_is_the_lower_third_of_test() {
    let rc = RunConfig::desk();
    let d = common::desk_data(&rc);
    let low = d.manifest.select(SplitSelector::TestLow);
    assert!(low.iter().all(|e| e.split == Split::Test && e.snr_db <= 20.0 / 3.0));
    let test = d.manifest.select(SplitSelector::Test);
    assert_eq!(test.iter().filter(|e| e.snr_db <= 20.0 / 3.0).count(), low.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mixtures_hit_requested_snr(snr in 0.0f64..20.0, seed in 0u64..1000, offset in 0usize..5000, peak in 0.1f64..1.0) {
        let c = tone(2000, 0.03 + (seed % 7) as f64 * 0.01, 0.4);
        let n = noise(1500, seed);
        let (cc, y) = mix_signals(&c, &n, offset, snr, peak).unwrap();
        prop_assert!((measured_snr_db(&cc, &y) - snr).abs() <= 0.01);
        let top = cc.iter().chain(&y).fold(0f32, |m, v| m.max(v.abs()));
        prop_assert!((top as f64 - peak).abs() < 1e-5);
    }
}
