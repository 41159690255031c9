use candle_core::{DType, Device, Tensor};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sefgan::conditioning::CondFeatures;
use sefgan::flow::{squeeze, unsqueeze, Coupling, Flow, FlowConfig};
use sefgan::nn::layers::randn;
use sefgan::nn::ParamStore;

fn tiny(s: usize, n_blocks: usize, every: usize) -> FlowConfig {
    FlowConfig {
        n_blocks,
        squeeze_factor: s,
        subnet_layers: 2,
        subnet_channels: 8,
        cond_channels: 4,
        early_output_every: every,
        early_output_channels: 2,
        subnet_kernel: 3,
    }
}

fn noise(seed: u64, shape: &[usize], std: f64, dtype: DType) -> Tensor {
    randn(&mut ChaCha8Rng::seed_from_u64(seed), shape, std, dtype).unwrap()
}

fn cond_for(cfg: &FlowConfig, b: usize, t: usize, dtype: DType, seed: u64) -> CondFeatures {
    let per_block = (0..cfg.n_blocks)
        .map(|k| noise(seed * 1000 + k as u64, &[b, cfg.cond_channels, t], 1.0, dtype))
        .collect();
    CondFeatures { per_block }
}

/// Gives every coupling a non-trivial output layer.
fn randomize_couplings(store: &ParamStore, std: f64, seed: u64) {
    for (i, p) in store.entries().iter().enumerate() {
        if p.name.ends_with(".end.weight") || p.name.ends_with(".end.bias") {
            store.set(&p.name, &noise(seed + i as u64, p.var.dims(), std, DType::F64)).unwrap();
        }
    }
}

fn set_identity_mixing(store: &ParamStore, cfg: &FlowConfig) {
    for (k, c) in cfg.block_channels().into_iter().enumerate() {
        let eye = Tensor::eye(c, DType::F64, &Device::Cpu).unwrap();
        store.set(&format!("block{k}.invconv.weight"), &eye).unwrap();
    }
}

fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
    (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_dtype(DType::F64).unwrap().to_scalar().unwrap()
}

fn logdet0(ld: &Tensor) -> f64 {
    ld.to_vec1::<f64>().unwrap()[0]
}

#[test]
fn zero_initialised_coupling_is_identity() {
    let cfg = tiny(4, 1, 0);
    let mut store = ParamStore::new(DType::F64, 1);
    let coupling = Coupling::new(&mut store, 0, 4, &cfg).unwrap();
    let h = noise(2, &[2, 4, 9], 1.0, DType::F64);
    let c = noise(3, &[2, 4, 9], 1.0, DType::F64);
    let (out, ld) = coupling.forward(&h, &c).unwrap();
    assert_eq!(max_abs(&out, &h), 0.0);
    assert_eq!(ld.to_vec1::<f64>().unwrap(), vec![0.0, 0.0]);
}

#[test]
fn constant_log_scale_gives_analytic_logdet() {
    let (c, t) = (6, 11);
    let cfg = tiny(c, 1, 0);
    let mut store = ParamStore::new(DType::F64, 1);
    let coupling = Coupling::new(&mut store, 0, c, &cfg).unwrap();
    let mut bias = vec![std::f64::consts::LN_2; c / 2];
    bias.extend(vec![0.0; c / 2]);
    store.set("block0.coupling.end.bias", &Tensor::new(bias, &Device::Cpu).unwrap()).unwrap();
    let h = noise(4, &[1, c, t], 1.0, DType::F64);
    let (out, ld) = coupling.forward(&h, &noise(5, &[1, 4, t], 1.0, DType::F64)).unwrap();
    let expected = (c / 2 * t) as f64 * std::f64::consts::LN_2;
    assert!((logdet0(&ld) - expected).abs() < 1e-9);
    let doubled = (h.narrow(1, c / 2, c / 2).unwrap() * 2.0).unwrap();
    assert!(max_abs(&out.narrow(1, c / 2, c / 2).unwrap(), &doubled) < 1e-12);
    let (_, ld_inv) = coupling.inverse(&out, &noise(5, &[1, 4, t], 1.0, DType::F64)).unwrap();
    assert!((logdet0(&ld_inv) + expected).abs() < 1e-9);
}

#[test]
fn random_coupling_round_trips_in_f32() {
    let cfg = tiny(8, 1, 0);
    let mut store = ParamStore::new(DType::F32, 7);
    let coupling = Coupling::new(&mut store, 0, 8, &cfg).unwrap();
    for (i, p) in store.entries().iter().enumerate() {
        if p.name.contains(".end.") {
            store.set(&p.name, &noise(50 + i as u64, p.var.dims(), 0.3, DType::F64)).unwrap();
        }
    }
    let h = noise(8, &[3, 8, 40], 1.0, DType::F32);
    let c = noise(9, &[3, 4, 40], 1.0, DType::F32);
    let (y, _) = coupling.forward(&h, &c).unwrap();
    let (back, _) = coupling.inverse(&y, &c).unwrap();
    assert!(max_abs(&back, &h) <= 1e-4);
}

#[test]
fn identity_network_passes_squeezed_signal_through() {
    let cfg = tiny(8, 4, 2);
    let mut store = ParamStore::new(DType::F64, 3);
    let flow = Flow::new(&mut store, &cfg).unwrap();
    set_identity_mixing(&store, &cfg);
    let x = noise(10, &[2, 64], 1.0, DType::F64);
    let cond = cond_for(&cfg, 2, 8, DType::F64, 1);
    let state = flow.forward(&x, &cond).unwrap();
    assert_eq!(max_abs(&state.z, &squeeze(&x, 8).unwrap()), 0.0);
    assert_eq!(state.logdet.to_vec1::<f64>().unwrap(), vec![0.0, 0.0]);
    let z = noise(11, &[2, 8, 8], 1.0, DType::F64);
    assert_eq!(max_abs(&flow.inverse(&z, &cond).unwrap(), &unsqueeze(&z).unwrap()), 0.0);
}

#[test]
fn logdet_matches_finite_difference_jacobian() {
    let cfg = tiny(2, 2, 0);
    let mut store = ParamStore::new(DType::F64, 11);
    let flow = Flow::new(&mut store, &cfg).unwrap();
    randomize_couplings(&store, 0.4, 100);
    for k in 0..2 {
        let w = (noise(200 + k, &[2, 2], 0.5, DType::F64) + Tensor::eye(2, DType::F64, &Device::Cpu).unwrap()).unwrap();
        store.set(&format!("block{k}.invconv.weight"), &w).unwrap();
    }
    let n = 8;
    let cond = cond_for(&cfg, 1, n / 2, DType::F64, 3);
    let x0: Vec<f64> = noise(12, &[n], 1.0, DType::F64).to_vec1().unwrap();
    let f = |x: &[f64]| -> Vec<f64> {
        let t = Tensor::from_slice(x, (1, n), &Device::Cpu).unwrap();
        flow.forward(&t, &cond).unwrap().z.flatten_all().unwrap().to_vec1().unwrap()
    };
    let h = 1e-5;
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let (mut a, mut b) = (x0.clone(), x0.clone());
        a[j] += h;
        b[j] -= h;
        let col = (DVector::from_vec(f(&a)) - DVector::from_vec(f(&b))) / (2.0 * h);
        jac.set_column(j, &col);
    }
    let oracle = jac.determinant().abs().ln();
    let analytic = logdet0(&flow.forward(&Tensor::from_slice(&x0, (1, n), &Device::Cpu).unwrap(), &cond).unwrap().logdet);
    assert!(oracle.abs() > 0.1, "test needs a non-trivial Jacobian, got {oracle}");
    assert!(((analytic - oracle) / oracle).abs() <= 1e-4, "analytic {analytic} vs finite difference {oracle}");
}

#[test]
fn zero_latent_through_translation_only_blocks_matches_hand_unrolling() {
    let (s, t) = (4, 3);
    let cfg = tiny(s, 2, 0);
    let mut store = ParamStore::new(DType::F64, 21);
    let flow = Flow::new(&mut store, &cfg).unwrap();
    // log_s = 0 and constant translations t_k: the subnet output is just its bias.
    let shifts = [[0.5, -1.25], [2.0, 0.75]];
    for (k, sh) in shifts.iter().enumerate() {
        let bias = Tensor::new(&[0.0, 0.0, sh[0], sh[1]], &Device::Cpu).unwrap();
        store.set(&format!("block{k}.coupling.end.bias"), &bias).unwrap();
    }
    let w: Vec<DMatrix<f64>> = (0..2)
        .map(|k| {
            let v: Vec<Vec<f64>> = store.get(&format!("block{k}.invconv.weight")).unwrap().to_vec2().unwrap();
            DMatrix::from_fn(s, s, |r, c| v[r][c])
        })
        .collect();

    // Block 1 inverse, then block 0 inverse, starting from h = 0.
    let mut h = DVector::<f64>::zeros(s);
    for k in [1, 0] {
        h[2] -= shifts[k][0];
        h[3] -= shifts[k][1];
        h = w[k].clone().try_inverse().unwrap() * h;
    }

    let z = Tensor::zeros((1, s, t), DType::F64, &Device::Cpu).unwrap();
    let cond = cond_for(&cfg, 1, t, DType::F64, 4);
    let out: Vec<f64> = flow.inverse(&z, &cond).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    for frame in 0..t {
        for c in 0..s {
            assert!((out[frame * s + c] - h[c]).abs() < 1e-12, "sample {}: {} vs {}", frame * s + c, out[frame * s + c], h[c]);
        }
    }
}

#[test]
fn logdet_depends_on_input_once_couplings_are_trained() {
    let cfg = tiny(4, 2, 0);
    let mut store = ParamStore::new(DType::F64, 5);
    let flow = Flow::new(&mut store, &cfg).unwrap();
    let cond = cond_for(&cfg, 1, 8, DType::F64, 2);
    let x = noise(1, &[1, 32], 1.0, DType::F64);
    let x2 = (&x + noise(2, &[1, 32], 0.5, DType::F64)).unwrap();
    let ld = |x: &Tensor| logdet0(&flow.forward(x, &cond).unwrap().logdet);
    assert_eq!(ld(&x), ld(&x2));
    randomize_couplings(&store, 0.3, 9);
    assert!((ld(&x) - ld(&x2)).abs() > 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_flows_are_bijective_and_dimension_preserving(
        half in 1usize..5,
        n_blocks in 1usize..5,
        every in 0usize..3,
        frames in 1usize..12,
        seed in 0u64..10_000,
    ) {
        let s = 2 * half + 2;
        let cfg = tiny(s, n_blocks, every);
        prop_assume!(cfg.validate().is_ok());
        let mut store = ParamStore::new(DType::F64, seed);
        let flow = Flow::new(&mut store, &cfg).unwrap();
        randomize_couplings(&store, 0.3, seed);
        let x = noise(seed + 1, &[2, s * frames], 1.0, DType::F64);
        let cond = cond_for(&cfg, 2, frames, DType::F64, seed);
        let state = flow.forward(&x, &cond).unwrap();
        prop_assert_eq!(state.z.elem_count(), 2 * s * frames);
        let back = flow.inverse(&state.z, &cond).unwrap();
        prop_assert!(max_abs(&back, &x) <= 1e-8);
        prop_assert!(state.logdet.to_vec1::<f64>().unwrap().iter().all(|v| v.is_finite()));
    }
}
