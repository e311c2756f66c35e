use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tenrpca::noise::{apply_noise, apply_noise_with_report, NoiseKind, NoiseSpec, Sigma};
use tenrpca::phantom::smooth_phantom;
use tenrpca::{Error, Tensor3};

fn phantom(n1: usize, n2: usize, n3: usize) -> Tensor3 {
    smooth_phantom(n1, n2, n3, 3, &mut ChaCha8Rng::seed_from_u64(0))
}

#[test]
fn same_seed_same_output() {
    let clean = phantom(12, 10, 9);
    for kind in NoiseKind::ALL {
        let spec = NoiseSpec::new(kind, 42);
        let a = apply_noise(&clean, &spec).unwrap();
        let b = apply_noise(&clean, &spec).unwrap();
        assert_eq!(a, b, "{kind}");
        let c = apply_noise(&clean, &NoiseSpec::new(kind, 43)).unwrap();
        assert_ne!(a, c, "{kind}");
    }
}

#[test]
fn zero_sigma_gaussian_is_identity() {
    let clean = phantom(6, 6, 4);
    let spec = NoiseSpec::new(NoiseKind::Gaussian, 1).with_sigma(Sigma::Fixed(0.0));
    assert_eq!(apply_noise(&clean, &spec).unwrap(), clean);
}

#[test]
fn certain_impulses_saturate_the_band() {
    let clean = phantom(10, 10, 1);
    let spec = NoiseSpec {
        impulse_prob: 1.0,
        ..NoiseSpec::new(NoiseKind::Impulse, 3).with_sigma(Sigma::Fixed(0.0))
    };
    let (noisy, report) = apply_noise_with_report(&clean, &spec).unwrap();
    assert_eq!(report.impulse_bands, vec![0]);
    assert!(noisy.as_array().iter().all(|&v| v == 0.0 || v == 1.0));
}

#[test]
fn impulse_fraction_concentrates() {
    let clean = phantom(100, 100, 1);
    for seed in 0..20 {
        let spec = NoiseSpec::new(NoiseKind::Impulse, seed).with_sigma(Sigma::Fixed(0.0));
        let (noisy, report) = apply_noise_with_report(&clean, &spec).unwrap();
        let frac = report.impulse_count as f64 / 10_000.0;
        assert!((0.27..=0.33).contains(&frac), "seed {seed}: {frac}");
        let changed = noisy
            .as_array()
            .iter()
            .zip(clean.as_array())
            .filter(|(a, b)| a != b)
            .count();
        assert!(changed <= report.impulse_count);
    }
}

#[test]
fn noniid_sigmas_stay_in_range() {
    let clean = phantom(8, 8, 40);
    let (_, report) = apply_noise_with_report(&clean, &NoiseSpec::new(NoiseKind::Noniid, 5)).unwrap();
    assert_eq!(report.band_sigmas.len(), 40);
    assert!(report
        .band_sigmas
        .iter()
        .all(|s| (10.0 / 255.0..=70.0 / 255.0).contains(s)));
    let spread = report.band_sigmas.iter().cloned().fold(0.0, f64::max)
        - report.band_sigmas.iter().cloned().fold(1.0, f64::min);
    assert!(spread > 0.05);
}

#[test]
fn deadline_columns_are_zero() {
    let clean = phantom(16, 20, 6);
    let (noisy, report) = apply_noise_with_report(&clean, &NoiseSpec::new(NoiseKind::Deadline, 8)).unwrap();
    assert!(!report.deadline_columns.is_empty());
    for &(band, col) in &report.deadline_columns {
        assert!(noisy.band(band).column(col).iter().all(|&v| v == 0.0));
    }
}

#[test]
fn mixture_deadlines_survive_other_corruptions() {
    let clean = phantom(16, 20, 12);
    for seed in 0..10 {
        let (noisy, report) = apply_noise_with_report(&clean, &NoiseSpec::new(NoiseKind::Mixture, seed)).unwrap();
        for &(band, col) in &report.deadline_columns {
            assert!(noisy.band(band).column(col).iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn stripe_bands_follow_the_fraction() {
    let clean = phantom(10, 10, 9);
    let (_, report) = apply_noise_with_report(&clean, &NoiseSpec::new(NoiseKind::Stripe, 2)).unwrap();
    assert_eq!(report.stripe_bands.len(), 3);
}

#[test]
fn inputs_outside_unit_range_are_rejected() {
    let bad = Tensor3::from_fn(2, 2, 2, |_| 1.5).unwrap();
    let err = apply_noise(&bad, &NoiseSpec::new(NoiseKind::Gaussian, 0)).unwrap_err();
    assert!(matches!(err, Error::Range(_)));
}

#[test]
fn spec_round_trips_through_toml() {
    let spec = NoiseSpec::new(NoiseKind::Blind, 9).with_sigma(Sigma::Range([20.0, 40.0]));
    let text = spec.to_toml().unwrap();
    assert_eq!(NoiseSpec::from_toml(&text).unwrap(), spec);
}

#[test]
fn kinds_parse_from_their_names() {
    for kind in NoiseKind::ALL {
        assert_eq!(kind.name().parse::<NoiseKind>().unwrap(), kind);
    }
    assert!("speckle".parse::<NoiseKind>().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_kind_is_seed_deterministic(seed in any::<u64>(), idx in 0usize..7) {
        let clean = phantom(8, 10, 5);
        let spec = NoiseSpec::new(NoiseKind::ALL[idx], seed);
        let a = apply_noise_with_report(&clean, &spec).unwrap();
        let b = apply_noise_with_report(&clean, &spec).unwrap();
        prop_assert_eq!(a, b);
    }
}
