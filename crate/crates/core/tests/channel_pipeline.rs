use std::f64::consts::PI;

use csinet_core::channel::{
    denormalize, generate_splits, generate_synthetic_channel, nmse_db, normalize, rho, sample_rng, ChannelDims, DftPlan,
    NormalizationInfo, SplitSizes, SyntheticProfile,
};
use csinet_core::CMatrix;
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, seed: u64) -> CMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
    CMatrix::from_vec(rows, cols, data).unwrap()
}

// Direct double sum: H'[p][q] = sum_j sum_k e^{-2 pi i p j / Nc} H[j][k] e^{-2 pi i k q / Nt} / sqrt(Nc Nt)
fn naive_angular_delay(h: &CMatrix) -> CMatrix {
    let (nc, nt) = (h.rows(), h.cols());
    let norm = 1.0 / ((nc * nt) as f64).sqrt();
    CMatrix::from_fn(nc, nt, |p, q| {
        let mut acc = Complex64::new(0.0, 0.0);
        for j in 0..nc {
            for k in 0..nt {
                let phase = -2.0 * PI * ((p * j) as f64 / nc as f64 + (k * q) as f64 / nt as f64);
                acc += h.get(j, k) * Complex64::from_polar(1.0, phase);
            }
        }
        acc * norm
    })
}

#[test]
fn transform_matches_direct_sum() {
    let dims = ChannelDims { nc: 16, nt: 8, ncp: 4 };
    let plan = DftPlan::new(dims).unwrap();
    let h = random(16, 8, 1);
    let fast = plan.forward(&h).unwrap();
    assert!(fast.max_abs_diff(&naive_angular_delay(&h)) < 1e-12);
    let top = plan.forward_truncated(&h).unwrap();
    assert_eq!(top, fast.top_rows(4).unwrap());
    assert!(plan.inverse(&fast).unwrap().max_abs_diff(&h) < 1e-12);
}

#[test]
fn generated_channels_are_unit_energy_and_sparse() {
    let dims = ChannelDims::default();
    let plan = DftPlan::new(dims).unwrap();
    let profile = SyntheticProfile::default();
    for i in 0..4 {
        let s = generate_synthetic_channel(&profile, &plan, &mut sample_rng(profile.seed, i)).unwrap();
        assert_eq!((s.h_freq.rows(), s.h_freq.cols()), (256, 32));
        assert_eq!((s.h_delay.rows(), s.h_delay.cols()), (32, 32));
        assert!((s.h_freq.norm_sqr() - 1.0).abs() < 1e-9);
        // the default profile keeps its clusters inside the retained rows
        assert!(s.h_delay.norm_sqr() > 0.99);
    }
}

#[test]
fn splits_are_reproducible_and_disjoint() {
    let profile = SyntheticProfile { seed: 21, ..SyntheticProfile::default() };
    let sizes = SplitSizes { train: 6, val: 3, test: 3 };
    let a = generate_splits(&profile, ChannelDims::default(), sizes).unwrap();
    let b = generate_splits(&profile, ChannelDims::default(), sizes).unwrap();
    assert_eq!(a, b);
    assert_eq!([a[0].len(), a[1].len(), a[2].len()], [6, 3, 3]);
    assert_eq!(a[1].meta.first_index, 6);
    assert_eq!(a[2].meta.first_index, 9);
    assert_eq!(a[0].meta.info, a[2].meta.info);
    assert_ne!(a[1].x.sample(0), a[0].x.sample(0));
    assert!(a[0].x.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert_eq!(a[0].meta.clipped, 0);
}

#[test]
fn normalization_inverts_to_single_precision() {
    let mats: Vec<CMatrix> = (0..3).map(|i| random(32, 32, 40 + i)).collect();
    let info = NormalizationInfo::fit(&mats).unwrap();
    let (x, clipped) = normalize(&mats, &info).unwrap();
    assert_eq!(clipped, 0);
    let peak = x.data().iter().map(|&v| (v - 0.5).abs()).fold(0.0f32, f32::max);
    assert!((peak - 0.5).abs() < 1e-6);
    let back = denormalize(&x, &info).unwrap();
    for (m, b) in mats.iter().zip(&back) {
        assert!(m.max_abs_diff(b) < 1e-6);
    }
}

#[test]
fn nmse_against_hand_value() {
    // ||H - H_hat||^2 / ||H||^2 = 1 / 4 for a single entry off by half
    let h = CMatrix::from_vec(1, 2, vec![Complex64::new(2.0, 0.0), Complex64::new(0.0, 0.0)]).unwrap();
    let e = CMatrix::from_vec(1, 2, vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)]).unwrap();
    let want = 10.0 * 0.25f64.log10();
    assert!((nmse_db(&[h], &[e]).unwrap() - want).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn rho_bounded_and_phase_invariant(seed in 0u64..10_000, re in -3.0f64..3.0, im in -3.0f64..3.0) {
        prop_assume!(re.abs() + im.abs() > 1e-3);
        let plan = DftPlan::new(ChannelDims { nc: 16, nt: 4, ncp: 8 }).unwrap();
        let h = random(8, 4, seed);
        let noisy = h.sub(&random(8, 4, seed + 1).scale(Complex64::new(0.3, 0.0))).unwrap();
        let r = rho(&[h.clone()], &[noisy.clone()], &plan).unwrap().rho;
        prop_assert!((0.0..=1.0 + 1e-12).contains(&r));
        // a common complex factor changes neither the direction nor rho
        let turned = noisy.scale(Complex64::new(re, im));
        let r2 = rho(&[h.clone()], &[turned], &plan).unwrap().rho;
        prop_assert!((r - r2).abs() < 1e-9);
        let self_rho = rho(&[h.clone()], &[h], &plan).unwrap().rho;
        prop_assert!((self_rho - 1.0).abs() < 1e-12);
    }
}
