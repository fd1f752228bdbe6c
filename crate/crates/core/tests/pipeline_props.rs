use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use robnoddi_core::dataio::{PatchExample, Provenance};
use robnoddi_core::pipeline::{compute_features, make_training_example, FeatureSpec, SamplingPolicy};
use robnoddi_core::shbasis::{eval_basis_row, num_coefficients, FitSettings};
use robnoddi_core::sphere::{generate_uniform_directions, random_subsample, GradientScheme, Shell, SubsampleSelection};
use robnoddi_core::Error;

const W: usize = 3;

fn scheme() -> GradientScheme {
    GradientScheme::new(
        vec![
            Shell { bvalue: 1000.0, directions: generate_uniform_directions(90, 1).unwrap() },
            Shell { bvalue: 2000.0, directions: generate_uniform_directions(90, 2).unwrap() },
        ],
        0,
    )
    .unwrap()
}

/// A `W^3` patch whose per-voxel, per-shell signal is a random function of
/// SH degree <= `order`.
fn band_limited_patch(scheme: &GradientScheme, order: usize, seed: u64) -> PatchExample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nc = num_coefficients(order).unwrap();
    let d = scheme.total_directions();
    let mut input = Vec::with_capacity(W * W * W * d);
    let mut row = vec![0.0; nc];
    for _ in 0..W * W * W {
        for shell in scheme.shells() {
            let c: Vec<f64> = (0..nc).map(|k| if k == 0 { 1.0 } else { rng.gen_range(-0.1..0.1) }).collect();
            for g in &shell.directions {
                eval_basis_row(g, order, &mut row);
                input.push(row.iter().zip(&c).map(|(a, b)| a * b).sum());
            }
        }
    }
    PatchExample { w: W, channels: d, input, target: vec![0.5; 3], provenance: Provenance { volume_id: 0, corner: [0; 3] } }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn subset(indices: Vec<usize>, shell: usize) -> SubsampleSelection {
    SubsampleSelection::new(shell, indices, 90).unwrap()
}

#[test]
fn disjoint_direction_subsets_give_matching_features() {
    let scheme = scheme();
    let patch = band_limited_patch(&scheme, 4, 1);
    let spec = FeatureSpec::sh_coeffs(6, vec![0, 1]).unwrap();
    let settings = FitSettings::new(6, 1e-6).unwrap();
    let evens: Vec<usize> = (0..90).step_by(2).collect();
    let odds: Vec<usize> = (1..90).step_by(2).collect();
    let a = compute_features(&patch.input, W, &scheme, &[subset(evens.clone(), 0), subset(evens, 1)], &spec, &settings).unwrap();
    let b = compute_features(&patch.input, W, &scheme, &[subset(odds.clone(), 0), subset(odds, 1)], &spec, &settings).unwrap();
    let d = max_diff(&a, &b);
    assert!(d < 1e-3, "max coefficient difference {d}");
}

#[test]
fn raw_features_reject_adaptive_sampling() {
    let scheme = scheme();
    let patch = band_limited_patch(&scheme, 2, 2);
    let policy = SamplingPolicy::adaptive(20, 60, &scheme).unwrap();
    let spec = FeatureSpec::raw_dwi(vec![0, 1], &[30, 30]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let r = make_training_example(&patch, &scheme, &policy, &spec, &FitSettings::default(), &mut rng);
    assert!(matches!(r, Err(Error::PolicyMismatch(_))));
}

#[test]
fn raw_features_reject_other_direction_counts() {
    let scheme = scheme();
    let patch = band_limited_patch(&scheme, 2, 3);
    let spec = FeatureSpec::raw_dwi(vec![0, 1], &[30, 30]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let sel = [random_subsample(&scheme, 0, 30, &mut rng).unwrap(), random_subsample(&scheme, 1, 45, &mut rng).unwrap()];
    let r = compute_features(&patch.input, W, &scheme, &sel, &spec, &FitSettings::default());
    assert!(matches!(r, Err(Error::Dimension(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn feature_length_does_not_depend_on_direction_count(n1 in 20usize..=45, n2 in 20usize..=45, seed in 0u64..1000) {
        let scheme = scheme();
        let patch = band_limited_patch(&scheme, 4, seed);
        let spec = FeatureSpec::sh_coeffs(6, vec![0, 1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sel = [random_subsample(&scheme, 0, n1, &mut rng).unwrap(), random_subsample(&scheme, 1, n2, &mut rng).unwrap()];
        let f = compute_features(&patch.input, W, &scheme, &sel, &spec, &FitSettings::default()).unwrap();
        prop_assert_eq!(f.len(), W * W * W * 2 * 28);
    }

    // With the default regularization the shrinkage of l >= 2 terms depends
    // on the subset, so draws agree only when the fit is nearly unregularized.
    #[test]
    fn random_draws_agree_on_band_limited_patches(s1 in 0u64..10_000, s2 in 0u64..10_000) {
        prop_assume!(s1 != s2);
        let scheme = scheme();
        let patch = band_limited_patch(&scheme, 4, 7);
        let spec = FeatureSpec::sh_coeffs(4, vec![0, 1]).unwrap();
        let settings = FitSettings::new(4, 1e-9).unwrap();
        let draw = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sel = [random_subsample(&scheme, 0, 30, &mut rng).unwrap(), random_subsample(&scheme, 1, 30, &mut rng).unwrap()];
            compute_features(&patch.input, W, &scheme, &sel, &spec, &settings).unwrap()
        };
        let d = max_diff(&draw(s1), &draw(s2));
        prop_assert!(d < 1e-4, "max difference {}", d);
    }
}
