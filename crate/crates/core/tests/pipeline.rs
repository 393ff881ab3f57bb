//! Properties of the removal pipeline and the campaign aggregation.

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tdoa_core::geometry::tdoa_map;
use tdoa_core::removal::{
    build_groups, remove_outliers, Decision, GroupSize, Mode, RemovalConfig, RemovalReport,
};
use tdoa_core::simharness::{
    aggregate, inject_noise, inject_outliers, run_trials, ArrayPreset, CampaignConfig,
};
use tdoa_core::stattests::{CovarianceModel, DEFAULT_PVALUE_FLOOR};
use tdoa_core::{PairIndex, Point3, SensorArray, TdoaSet};

const SIGMA: f64 = 0.007;

fn random_array(rng: &mut ChaCha8Rng, sensors: usize) -> SensorArray {
    loop {
        let pts: Vec<Point3> = (0..sensors)
            .map(|_| {
                Point3::new(
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                )
            })
            .collect();
        let Ok(a) = SensorArray::new(pts) else {
            continue;
        };
        if (0..sensors).all(|p| (p + 1..sensors).all(|q| a.distance(p, q) > 0.05)) {
            return a;
        }
    }
}

/// Noisy measurements with `z` injected outliers at a random source.
fn scenario(seed: u64, sensors: usize, z: usize) -> (SensorArray, TdoaSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let array = random_array(&mut rng, sensors);
    let x = Point3::new(
        rng.random_range(-2.0..2.0),
        rng.random_range(-2.0..2.0),
        rng.random_range(-2.0..2.0),
    );
    let clean = tdoa_map(&x, &array);
    let noisy = inject_noise(&clean, SIGMA, &mut rng).unwrap();
    let (set, _) = inject_outliers(&noisy, &clean, &array, z, SIGMA, 0.05, &mut rng).unwrap();
    (array, set)
}

fn config(mode: Mode) -> RemovalConfig {
    RemovalConfig::new(mode, CovarianceModel::isotropic(SIGMA).unwrap())
}

fn mode_strategy() -> impl Strategy<Value = Mode> {
    prop::sample::select(Mode::ALL.to_vec())
}

fn removal_summary(r: &RemovalReport) -> Vec<(usize, Vec<PairIndex>)> {
    r.iterations
        .iter()
        .enumerate()
        .map(|(k, it)| {
            let mut v = it.removed.clone();
            v.sort();
            (k, v)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn reports_are_deterministic(seed in any::<u64>(), z in 0usize..6, mode in mode_strategy()) {
        let (array, set) = scenario(seed, 6, z);
        let a = remove_outliers(&set, &array, &config(mode)).unwrap();
        let b = remove_outliers(&set, &array, &config(mode)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn survivors_shrink_strictly_until_stop(seed in any::<u64>(), z in 0usize..8, mode in mode_strategy()) {
        let (array, set) = scenario(seed, 7, z);
        let report = remove_outliers(&set, &array, &config(mode)).unwrap();
        let mut remaining = set.len() - report.preprocessed_out.len();
        let stops = report.iterations.iter().filter(|it| it.removed.is_empty()).count();
        prop_assert_eq!(stops, mode.stages().len());
        for it in &report.iterations {
            if !it.removed.is_empty() {
                prop_assert!(it.removed.len() <= remaining);
                remaining -= it.removed.len();
            }
        }
        prop_assert_eq!(remaining, report.survivors.len());
        prop_assert!(report.iterations.len() <= set.len() + mode.stages().len());
    }

    #[test]
    fn group_pvalues_never_change_within_a_stage(seed in any::<u64>(), z in 1usize..6, g3 in any::<bool>()) {
        let (array, set) = scenario(seed, 7, z);
        let size = if g3 { GroupSize::G3 } else { GroupSize::G2 };
        let cov = CovarianceModel::isotropic(SIGMA).unwrap();
        let mut table = build_groups(size, &set, &array, &cov, 1e-6).unwrap();
        let initial: BTreeMap<String, f64> =
            table.entries().map(|e| (format!("{:?}", e.group), e.pvalue)).collect();
        let mut previous = initial.len();
        loop {
            let outcome = table.iterate_once(0.05, DEFAULT_PVALUE_FLOOR).unwrap();
            for e in table.entries() {
                prop_assert_eq!(initial[&format!("{:?}", e.group)], e.pvalue);
            }
            match outcome.decision {
                Decision::Stop => break,
                Decision::Remove(pairs) => {
                    for p in pairs {
                        table.remove_pair(p);
                    }
                    let now = table.active_count();
                    prop_assert!(now < previous);
                    previous = now;
                }
            }
        }
    }

    #[test]
    fn relabeling_permutes_the_report(seed in any::<u64>(), z in 0usize..5, mode in mode_strategy()) {
        let (array, set) = scenario(seed, 6, z);
        let mut perm: Vec<usize> = (0..array.len()).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5a5a));
        let a = remove_outliers(&set, &array, &config(mode)).unwrap();
        let b = remove_outliers(&set.relabeled(&perm), &array.relabeled(&perm).unwrap(), &config(mode)).unwrap();
        let mapped: Vec<(usize, Vec<PairIndex>)> = removal_summary(&a)
            .into_iter()
            .map(|(k, v)| {
                let mut w: Vec<PairIndex> = v.iter().map(|p| p.relabeled(&perm).0).collect();
                w.sort();
                (k, w)
            })
            .collect();
        prop_assert_eq!(mapped, removal_summary(&b));
        prop_assert_eq!(a.survivors.relabeled(&perm), b.survivors);
    }
}

fn small_campaign(z_values: Vec<usize>, runs: usize, positions: usize) -> CampaignConfig {
    CampaignConfig {
        preset: ArrayPreset::Linear7,
        z_values,
        runs,
        positions,
        sigma: SIGMA,
        alpha: 0.05,
        modes: Mode::ALL.to_vec(),
        master_seed: 3,
    }
}

#[test]
fn aggregation_ignores_record_order() {
    let config = small_campaign(vec![0, 3, 7], 10, 4);
    let mut records = run_trials(&config).unwrap();
    let rows = aggregate(&records, &config.modes, &config.z_values);
    records.shuffle(&mut ChaCha8Rng::seed_from_u64(5));
    assert_eq!(rows, aggregate(&records, &config.modes, &config.z_values));
    for r in &records {
        for rate in [r.result.tpr, r.result.tnr].into_iter().flatten() {
            assert!((0.0..=1.0).contains(&rate));
        }
        assert_eq!(r.result.tpr.is_none(), r.z == 0);
    }
}

#[test]
fn removal_lowers_mean_error_with_95_percent_confidence() {
    let config = small_campaign(vec![1, 5, 10], 60, 20);
    let records = run_trials(&config).unwrap();
    for &mode in &config.modes {
        for &z in &config.z_values {
            let diffs: Vec<f64> = records
                .iter()
                .filter(|r| r.mode == mode && r.z == z)
                .filter_map(|r| r.result.me_filtered.map(|f| r.result.me_raw - f))
                .collect();
            assert!(diffs.len() >= 1000);
            let n = diffs.len() as f64;
            let mean = diffs.iter().sum::<f64>() / n;
            let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
            // One-sided test of mean(raw − filtered) ≥ 0.
            assert!(
                mean + 1.645 * (var / n).sqrt() >= 0.0,
                "{mode} Z={z}: mean {mean}"
            );
        }
    }
}

#[test]
fn single_outlier_on_cross7_is_discarded() -> tdoa_core::Result<()> {
    let array = ArrayPreset::Cross7.array();
    let mut set = tdoa_map(&Point3::new(1.0, 0.5, 0.2), &array);
    let p = PairIndex::new(4, 1)?;
    set.insert(p, set.get(p).unwrap() + 0.25);

    let config = RemovalConfig::new(Mode::G3, CovarianceModel::isotropic(0.007)?);
    let report = remove_outliers(&set, &array, &config)?;
    assert!(report.discarded().contains(&p));
    Ok(())
}
