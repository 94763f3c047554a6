//! Determinism, distribution, and coarsening contracts of the driving noise.

use proptest::prelude::*;
use qsee::noise::{coarsen, sample_path, standard_normal, standard_normal_quantile, NoiseSpec};

#[test]
fn same_key_tuple_is_bit_identical() {
    let spec = NoiseSpec {
        master_seed: 42,
        n_modes: 8,
        n_steps: 200,
        dt: 1e-3,
    };
    let a = sample_path(&spec, 7).unwrap();
    let b = sample_path(&spec, 7).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        standard_normal(42, 7, 13, 3).to_bits(),
        standard_normal(42, 7, 13, 3).to_bits()
    );
}

#[test]
fn different_tuple_components_decorrelate() {
    let base = standard_normal(42, 0, 0, 0);
    assert_ne!(base, standard_normal(43, 0, 0, 0));
    assert_ne!(base, standard_normal(42, 1, 0, 0));
    assert_ne!(base, standard_normal(42, 0, 1, 0));
    assert_ne!(base, standard_normal(42, 0, 0, 1));
    // Swapping the roles of step and path must change the draw.
    assert_ne!(standard_normal(42, 2, 5, 0), standard_normal(42, 5, 2, 0));
}

#[test]
fn empty_table_is_a_configuration_error() {
    let spec = NoiseSpec {
        master_seed: 1,
        n_modes: 0,
        n_steps: 10,
        dt: 1e-3,
    };
    assert!(sample_path(&spec, 0).is_err());
    let spec = NoiseSpec {
        master_seed: 1,
        n_modes: 4,
        n_steps: 0,
        dt: 1e-3,
    };
    assert!(sample_path(&spec, 0).is_err());
}

#[test]
fn sample_mean_obeys_clt_bound_over_a_million_entries() {
    let dt = 0.01;
    let spec = NoiseSpec {
        master_seed: 2024,
        n_modes: 160,
        n_steps: 6250,
        dt,
    };
    let path = sample_path(&spec, 0).unwrap();
    let total = 1_000_000.0;
    let mean: f64 = (0..spec.n_steps)
        .map(|m| path.row(m).iter().sum::<f64>())
        .sum::<f64>()
        / total;
    assert!(mean.abs() < 4.0 * (dt / total).sqrt(), "mean {mean}");
}

#[test]
fn sample_variance_within_one_percent_over_a_million_entries() {
    let dt = 0.01;
    let spec = NoiseSpec {
        master_seed: 6021,
        n_modes: 160,
        n_steps: 6250,
        dt,
    };
    let path = sample_path(&spec, 0).unwrap();
    let total = 1_000_000.0;
    let sq_sum: f64 = (0..spec.n_steps)
        .map(|m| path.row(m).iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>();
    let variance = sq_sum / total;
    assert!((variance - dt).abs() < 0.01 * dt, "variance {variance}");
}

#[test]
fn coarsen_by_one_is_identity() {
    let spec = NoiseSpec {
        master_seed: 5,
        n_modes: 4,
        n_steps: 64,
        dt: 1e-3,
    };
    let path = sample_path(&spec, 3).unwrap();
    assert_eq!(coarsen(&path, 1).unwrap(), path);
}

#[test]
fn coarsen_by_full_length_gives_column_sums() {
    let spec = NoiseSpec {
        master_seed: 5,
        n_modes: 4,
        n_steps: 64,
        dt: 1e-3,
    };
    let path = sample_path(&spec, 3).unwrap();
    let coarse = coarsen(&path, 64).unwrap();
    assert_eq!(coarse.n_steps, 1);
    assert_eq!(coarse.dt, 64.0 * 1e-3);
    for k in 0..4 {
        let col: f64 = (0..64).map(|m| path.inc(m, k)).sum();
        assert!((coarse.inc(0, k) - col).abs() <= 1e-12 * col.abs().max(1.0));
    }
}

#[test]
fn coarsen_rejects_non_divisible_factor() {
    let spec = NoiseSpec {
        master_seed: 5,
        n_modes: 2,
        n_steps: 10,
        dt: 1e-3,
    };
    let path = sample_path(&spec, 0).unwrap();
    assert!(coarsen(&path, 3).is_err());
    assert!(coarsen(&path, 0).is_err());
}

#[test]
fn coarsened_entries_have_scaled_variance() {
    let dt = 1e-3;
    let factor = 4;
    let spec = NoiseSpec {
        master_seed: 99,
        n_modes: 25,
        n_steps: 400,
        dt,
    };
    let mut sq_sum = 0.0;
    let mut count = 0.0;
    for path_index in 0..400 {
        let coarse = coarsen(&sample_path(&spec, path_index).unwrap(), factor).unwrap();
        for m in 0..coarse.n_steps {
            for v in coarse.row(m) {
                sq_sum += v * v;
                count += 1.0;
            }
        }
    }
    let variance = sq_sum / count;
    let expected = factor as f64 * dt;
    assert!(
        (variance - expected).abs() < 0.01 * expected,
        "variance {variance} vs {expected} over {count} entries"
    );
}

#[test]
fn cross_mode_correlation_is_clt_small() {
    let samples = 100_000;
    let spec = NoiseSpec {
        master_seed: 314,
        n_modes: 4,
        n_steps: samples,
        dt: 1.0,
    };
    let path = sample_path(&spec, 0).unwrap();
    for (a, b) in [(0usize, 1usize), (1, 2), (0, 3)] {
        let mut dot = 0.0;
        for m in 0..samples {
            dot += path.inc(m, a) * path.inc(m, b);
        }
        let corr = dot / samples as f64;
        assert!(
            corr.abs() < 4.0 / (samples as f64).sqrt(),
            "modes ({a},{b}): correlation {corr}"
        );
    }
}

#[test]
fn quantile_matches_tabulated_normal_points() {
    assert_eq!(standard_normal_quantile(0.5), 0.0);
    let cases = [
        (0.975, 1.959963984540054),
        (0.8413447460685429, 1.0),
        (0.9772498680518208, 2.0),
        (0.9986501019683699, 3.0),
        (0.0013498980316301, -3.0),
        (0.15865525393145707, -1.0),
    ];
    for (u, x) in cases {
        let got = standard_normal_quantile(u);
        assert!((got - x).abs() < 1e-9, "quantile({u}) = {got}, want {x}");
    }
}

#[test]
fn quantile_is_antisymmetric_and_round_trips() {
    for i in 1..200 {
        let u = i as f64 / 200.0;
        let x = standard_normal_quantile(u);
        let mirrored = -standard_normal_quantile(1.0 - u);
        assert!((x - mirrored).abs() <= 1e-13 * (1.0 + x.abs()));
        let back = 0.5 * libm::erfc(-x / std::f64::consts::SQRT_2);
        assert!((back - u).abs() <= 1e-13, "u={u}: round trip {back}");
    }
    // Deep tail stays accurate.
    let deep = standard_normal_quantile(1.279812543885835e-12);
    assert!((deep + 7.0).abs() < 1e-7, "deep tail {deep}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn coarsening_preserves_mode_displacement(
        seed in any::<u64>(),
        path_index in 0u64..64,
        log_factor in 0u32..4,
        blocks in 1usize..6,
        n_modes in 1usize..5,
    ) {
        let factor = 1usize << log_factor;
        let spec = NoiseSpec {
            master_seed: seed,
            n_modes,
            n_steps: blocks * factor,
            dt: 1e-2,
        };
        let fine = sample_path(&spec, path_index).unwrap();
        let coarse = coarsen(&fine, factor).unwrap();
        for k in 0..n_modes {
            let a = fine.displacement(k);
            let b = coarse.displacement(k);
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn quantile_is_monotone(u1 in 1e-12f64..1.0, u2 in 1e-12f64..1.0) {
        prop_assume!(u1 < 1.0 && u2 < 1.0);
        let (lo, hi) = if u1 <= u2 { (u1, u2) } else { (u2, u1) };
        prop_assert!(standard_normal_quantile(lo) <= standard_normal_quantile(hi) + 1e-12);
    }
}
