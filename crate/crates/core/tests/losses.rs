mod common;

use candle_core::{DType, Device, Tensor};
use common::{direct_mrstft, t2, val};
use proptest::prelude::*;
use sefgan::discriminators::DiscOutput;
use sefgan::losses::*;

const TOL: f64 = 1e-6;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

fn full(shape: &[usize], v: f64) -> Tensor {
    Tensor::full(v, shape, &Device::Cpu).unwrap()
}

fn output(score: f64, feature: f64) -> DiscOutput {
    DiscOutput { scores: full(&[2, 5], score), features: vec![full(&[2, 3, 4], feature), full(&[2, 6], feature)] }
}

fn signal(n: usize, seed: u64) -> Vec<f64> {
    (0..n).map(|i| (i as f64 * 0.37 + seed as f64).sin() * 0.5 + ((i * 7 + seed as usize) % 5) as f64 * 0.05).collect()
}

#[test]
fn nll_examples() {
    let n = 24;
    let z0 = full(&[1, 4, 6], 0.0);
    let ld0 = full(&[1], 0.0);
    assert!((val(&nll_loss(&z0, &ld0).unwrap()) - HALF_LN_2PI).abs() < TOL);
    let ld_n = full(&[1], n as f64);
    assert!((val(&nll_loss(&z0, &ld_n).unwrap()) - (HALF_LN_2PI - 1.0)).abs() < TOL);
    let z = Tensor::arange(0f64, n as f64, &Device::Cpu).unwrap().reshape((1, 4, 6)).unwrap();
    let quad = |z: &Tensor| val(&nll_loss(z, &ld0).unwrap()) - HALF_LN_2PI;
    assert!((quad(&(&z * 2.0).unwrap()) - 4.0 * quad(&z)).abs() < TOL);
}

#[test]
fn lsgan_examples() {
    let (d, _) = lsgan_losses(&full(&[3], 1.0), &full(&[3], 0.0)).unwrap();
    assert!(val(&d).abs() < TOL);
    let (_, g) = lsgan_losses(&full(&[3], 0.2), &full(&[3], 1.0)).unwrap();
    assert!(val(&g).abs() < TOL);
    let (d, g) = lsgan_losses(&full(&[3], 0.5), &full(&[3], 0.5)).unwrap();
    assert!((val(&d) - 0.5).abs() < TOL);
    assert!((val(&g) - 0.25).abs() < TOL);
}

#[test]
fn feature_matching_examples() {
    let a: Vec<DiscOutput> = (0..3).map(|_| output(0.0, 0.3)).collect();
    let b: Vec<DiscOutput> = (0..3).map(|_| output(0.0, 0.3 + 0.125)).collect();
    assert!(val(&feature_matching(&a, &a).unwrap()).abs() < TOL);
    assert!((val(&feature_matching(&a, &b).unwrap()) - 0.125).abs() < TOL);
    assert_eq!(val(&feature_matching(&a, &b).unwrap()), val(&feature_matching(&b, &a).unwrap()));
    assert!(feature_matching(&a, &b[..2]).is_err());
}

#[test]
fn mrstft_examples() {
    let m = MrStft::new(&MrStftConfig::default()).unwrap();
    let r = t2(&[signal(128, 1), signal(128, 2)]);
    assert!(val(&m.loss(&r, &r).unwrap()).abs() < TOL);
    for &(n, h, w) in &MrStftConfig::default().resolutions {
        let (sc, _) = stft_terms(&Stft::new(n, h, w), &r, &r.zeros_like().unwrap()).unwrap();
        assert!((val(&sc) - 1.0).abs() < TOL);
    }
    let silent = r.zeros_like().unwrap();
    assert!(matches!(m.loss(&silent, &r), Err(sefgan::Error::Degenerate(_))));
}

#[test]
fn mrstft_matches_direct_dft() {
    let cfg = MrStftConfig::default();
    let m = MrStft::new(&cfg).unwrap();
    for n in [64, 100, 128] {
        let r = vec![signal(n, 3), signal(n, 4)];
        let e = vec![signal(n, 5), signal(n, 9).iter().map(|v| v * 0.3).collect()];
        let got = val(&m.loss(&t2(&r), &t2(&e)).unwrap());
        let want = direct_mrstft(&r, &e, &cfg.resolutions, MAG_EPS);
        assert!((got - want).abs() <= TOL, "n={n}: {got} vs {want}");
    }
    // Small resolutions exercise many frames on short inputs.
    let small = MrStftConfig { resolutions: vec![(16, 4, 12), (32, 8, 32), (8, 3, 6)] };
    let m = MrStft::new(&small).unwrap();
    let r = vec![signal(64, 11)];
    let e = vec![signal(64, 12)];
    let got = val(&m.loss(&t2(&r), &t2(&e)).unwrap());
    let want = direct_mrstft(&r, &e, &small.resolutions, MAG_EPS);
    assert!((got - want).abs() <= TOL, "{got} vs {want}");
}

#[test]
fn generator_loss_examples() {
    let rec = Reconstruction::new(&LossConfig::default(), DType::F64).unwrap();
    let cfg = LossConfig::default();
    let x = t2(&[signal(256, 1)]);
    let real: Vec<DiscOutput> = (0..8).map(|_| output(1.0, 0.4)).collect();
    let fake: Vec<DiscOutput> = (0..8).map(|_| output(1.0, 0.4)).collect();
    let g = generator_loss(&real, &fake, &x, &x, &rec, &cfg).unwrap();
    assert!(g.report.total.abs() < TOL);

    let x_hat = t2(&[signal(256, 2)]);
    let fake1: Vec<DiscOutput> = (0..8).map(|k| output(0.1 * k as f64, 0.4 + 0.1)).collect();
    let fake2: Vec<DiscOutput> = (0..8).map(|k| output(0.1 * k as f64, 0.4 + 0.2)).collect();
    let g1 = generator_loss(&real, &fake1, &x, &x_hat, &rec, &cfg).unwrap();
    let g2 = generator_loss(&real, &fake2, &x, &x_hat, &rec, &cfg).unwrap();
    for g in [&g1, &g2] {
        assert!((g.report.component_sum() - g.report.total).abs() < TOL);
        assert!((val(&g.total) - g.report.total).abs() < TOL);
    }
    assert!((g2.report.get("w_fm").unwrap() - 2.0 * g1.report.get("w_fm").unwrap()).abs() < TOL);
    assert!((g1.report.get("w_fm").unwrap() - 2.0 * 0.1).abs() < TOL);
    assert_eq!(g1.report.get("w_adv_g"), g2.report.get("w_adv_g"));
    assert_eq!(g1.report.get("w_mrstft"), g2.report.get("w_mrstft"));
}

#[test]
fn discriminator_loss_examples() {
    let perfect_real: Vec<DiscOutput> = (0..8).map(|_| output(1.0, 0.0)).collect();
    let perfect_fake: Vec<DiscOutput> = (0..8).map(|_| output(0.0, 0.0)).collect();
    assert!(val(&discriminator_loss(&perfect_real, &perfect_fake).unwrap()).abs() < TOL);
    let half: Vec<DiscOutput> = (0..8).map(|_| output(0.5, 0.0)).collect();
    assert!((val(&discriminator_loss(&half, &half).unwrap()) - 4.0).abs() < TOL);
    let mixed: Vec<DiscOutput> = (0..8).map(|k| output(0.1 * k as f64, 0.0)).collect();
    let mut reversed: Vec<DiscOutput> = mixed.iter().map(|o| DiscOutput { scores: o.scores.clone(), features: o.features.clone() }).collect();
    reversed.reverse();
    let mut half_rev: Vec<DiscOutput> = (0..8).map(|_| output(0.5, 0.0)).collect();
    half_rev.reverse();
    let a = val(&discriminator_loss(&half, &mixed).unwrap());
    let b = val(&discriminator_loss(&half_rev, &reversed).unwrap());
    assert!((a - b).abs() < 1e-12);
    assert!(discriminator_loss(&half[..7], &half).is_err());
}

#[test]
fn hybrid_loss_examples() {
    let l_g = full(&[], 1.0);
    let nll = full(&[], 2.0);
    assert!((val(&hybrid_loss(&l_g, &nll, 0.0).unwrap()) - 1.0).abs() < TOL);
    assert!((val(&hybrid_loss(&l_g, &nll, 0.3).unwrap()) - 1.6).abs() < TOL);
    assert_eq!(sefgan::train::TrainConfig::default().lambda, 0.3);
}

#[test]
fn alternative_reconstructions_are_zero_at_the_reference() {
    let x = t2(&[signal(2048, 1)]);
    for kind in [ReconstructionKind::Mel, ReconstructionKind::SiSdr] {
        let cfg = LossConfig { reconstruction: kind, ..Default::default() };
        let rec = Reconstruction::new(&cfg, DType::F64).unwrap();
        let same = val(&rec.loss(&x, &x).unwrap());
        let other = val(&rec.loss(&x, &t2(&[signal(2048, 7)])).unwrap());
        assert!(other > same, "{}: {other} <= {same}", rec.name());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn losses_are_non_negative(a in -2.0f64..2.0, b in -2.0f64..2.0, fa in -1.0f64..1.0, fb in -1.0f64..1.0) {
        let (d, g) = lsgan_losses(&full(&[4], a), &full(&[4], b)).unwrap();
        prop_assert!(val(&d) >= 0.0 && val(&g) >= 0.0);
        let fm = feature_matching(&[output(a, fa)], &[output(b, fb)]).unwrap();
        prop_assert!(val(&fm) >= 0.0);
        prop_assert!((val(&fm) - (fa - fb).abs()).abs() < 1e-9);
    }

    #[test]
    fn mrstft_non_negative_and_zero_only_at_reference(seed in 0u64..500, scale in 0.1f64..3.0) {
        let m = MrStft::new(&MrStftConfig { resolutions: vec![(32, 8, 24), (16, 4, 16)] }).unwrap();
        let r = t2(&[signal(96, seed)]);
        let e = t2(&[signal(96, seed).iter().map(|v| v * scale).collect()]);
        let l = val(&m.loss(&r, &e).unwrap());
        prop_assert!(l >= 0.0);
        if (scale - 1.0).abs() > 1e-3 {
            prop_assert!(l > 0.0);
        }
    }
}
