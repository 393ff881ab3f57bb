//! Monte-Carlo harness: array presets, noise and outlier injection, per-trial
//! metrics and campaign aggregation.
//!
//! Randomness comes from ChaCha8 keyed by the master seed. Each trial reads
//! its own stream `pos << 40 | Z << 32 | run`, so trial data do not depend on
//! scheduling. Source positions use streams with the top bit set and depend
//! only on the position index, which keeps them fixed across Z.

use std::collections::BTreeSet;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{tdoa_map, PairIndex, Point3, SensorArray, TdoaSet};
use crate::removal::{remove_outliers, Mode, RemovalConfig, RemovalReport};
use crate::stattests::{acceptance_margin, CovarianceModel};

/// Sources closer than this to a sensor are redrawn.
pub const MIN_SENSOR_CLEARANCE: f64 = 0.01;
/// Radius of the source region around the array centroid.
pub const SOURCE_RADIUS: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayPreset {
    /// Seven collinear sensors on the x axis, 10 cm apart, centred at 0.
    Linear7,
    /// Centre plus ±0.3 m on each axis.
    Cross7,
    Custom(SensorArray),
}

impl ArrayPreset {
    pub fn array(&self) -> SensorArray {
        match self {
            ArrayPreset::Linear7 => {
                let coords: Vec<[f64; 3]> = (-3..=3).map(|k| [0.1 * k as f64, 0.0, 0.0]).collect();
                SensorArray::from_coords(&coords).expect("valid preset")
            }
            ArrayPreset::Cross7 => SensorArray::from_coords(&[
                [0.0, 0.0, 0.0],
                [0.3, 0.0, 0.0],
                [-0.3, 0.0, 0.0],
                [0.0, 0.3, 0.0],
                [0.0, -0.3, 0.0],
                [0.0, 0.0, 0.3],
                [0.0, 0.0, -0.3],
            ])
            .expect("valid preset"),
            ArrayPreset::Custom(a) => a.clone(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ArrayPreset::Linear7 => "linear7",
            ArrayPreset::Cross7 => "cross7",
            ArrayPreset::Custom(_) => "custom",
        }
    }

    /// Planar disk for arrays lying in a plane `z = const`, ball otherwise.
    pub fn source_region(&self) -> SourceRegion {
        let array = self.array();
        let center = array.centroid();
        let planar = match self {
            ArrayPreset::Linear7 => true,
            ArrayPreset::Cross7 => false,
            ArrayPreset::Custom(a) => a.positions().iter().all(|p| p.z == center.z),
        };
        if planar {
            SourceRegion::Disk {
                center,
                radius: SOURCE_RADIUS,
            }
        } else {
            SourceRegion::Ball {
                center,
                radius: SOURCE_RADIUS,
            }
        }
    }
}

impl std::str::FromStr for ArrayPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear7" => Ok(ArrayPreset::Linear7),
            "cross7" => Ok(ArrayPreset::Cross7),
            other => Err(Error::InvalidConfig(format!("unknown preset '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SourceRegion {
    /// Disk in the horizontal plane through `center`.
    Disk {
        center: Point3,
        radius: f64,
    },
    Ball {
        center: Point3,
        radius: f64,
    },
}

impl SourceRegion {
    /// Uniform draw by rejection from the bounding square or cube.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Point3 {
        match *self {
            SourceRegion::Disk { center, radius } => loop {
                let (x, y) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                if x * x + y * y <= 1.0 {
                    return center + nalgebra::Vector3::new(x, y, 0.0) * radius;
                }
            },
            SourceRegion::Ball { center, radius } => loop {
                let v = nalgebra::Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                if v.norm_squared() <= 1.0 {
                    return center + v * radius;
                }
            },
        }
    }

    /// Draw until the point clears every sensor by [`MIN_SENSOR_CLEARANCE`].
    pub fn sample_clear<R: Rng + ?Sized>(&self, array: &SensorArray, rng: &mut R) -> Point3 {
        loop {
            let x = self.sample(rng);
            if array
                .positions()
                .iter()
                .all(|m| (x - m).norm() >= MIN_SENSOR_CLEARANCE)
            {
                return x;
            }
        }
    }
}

/// Add independent `N(0, σ²)` noise to every entry.
pub fn inject_noise<R: Rng + ?Sized>(clean: &TdoaSet, sigma: f64, rng: &mut R) -> Result<TdoaSet> {
    let normal =
        Normal::new(0.0, sigma).map_err(|e| Error::Domain(format!("noise sigma {sigma}: {e}")))?;
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("noise sigma {sigma} must be > 0")));
    }
    Ok(clean
        .iter()
        .map(|(p, v)| (p, v + normal.sample(rng)))
        .collect())
}

/// Replace `z` distinct pairs, chosen uniformly, with draws uniform over the
/// acceptance interval minus `[τ − γ_α, τ + γ_α]` around the noiseless value.
pub fn inject_outliers<R: Rng + ?Sized>(
    noisy: &TdoaSet,
    clean: &TdoaSet,
    array: &SensorArray,
    z: usize,
    sigma: f64,
    alpha: f64,
    rng: &mut R,
) -> Result<(TdoaSet, BTreeSet<PairIndex>)> {
    let pairs: Vec<PairIndex> = noisy.pairs().collect();
    if z > pairs.len() {
        return Err(Error::InvalidConfig(format!(
            "{z} outliers exceed {} pairs",
            pairs.len()
        )));
    }
    let outer = acceptance_margin(sigma, alpha)?;
    let exclusion = acceptance_margin(sigma, alpha / 2.0)?;
    let mut out = noisy.clone();
    let mut truth = BTreeSet::new();
    for idx in rand::seq::index::sample(rng, pairs.len(), z).into_vec() {
        let pair = pairs[idx];
        let tau = clean
            .get(pair)
            .ok_or(Error::InvalidConfig(format!("clean set lacks pair {pair}")))?;
        let d = array.distance(pair.j, pair.i);
        let (lo, hi) = (-d - outer, d + outer);
        let below = ((tau - exclusion) - lo).max(0.0);
        let above = (hi - (tau + exclusion)).max(0.0);
        let total = below + above;
        if !(total > 0.0) {
            return Err(Error::InjectionImpossible(pair));
        }
        let u = rng.random_range(0.0..total);
        let value = if u < below {
            lo + u
        } else {
            tau + exclusion + (u - below)
        };
        out.insert(pair, value);
        truth.insert(pair);
    }
    Ok((out, truth))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialSpec {
    pub source: Point3,
    pub z: usize,
    pub sigma: f64,
    pub alpha: f64,
    pub mode: Mode,
    pub master_seed: u64,
    pub stream: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    /// Undefined when no outlier was injected.
    pub tpr: Option<f64>,
    /// Undefined when every pair is an outlier.
    pub tnr: Option<f64>,
    pub me_raw: f64,
    /// Undefined when nothing survives.
    pub me_filtered: Option<f64>,
    pub removed_count: usize,
    /// Outer iterations of the removal run, stop checks included.
    pub iterations: usize,
}

fn mean_abs_error(pairs: impl Iterator<Item = (PairIndex, f64)>, clean: &TdoaSet) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, v) in pairs {
        sum += (v - clean.get(p).expect("clean set is complete")).abs();
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Confusion-count metrics and mean errors of one removal run.
pub fn evaluate_trial(
    report: &RemovalReport,
    truth: &BTreeSet<PairIndex>,
    clean: &TdoaSet,
) -> TrialResult {
    let input = report.input();
    let q = input.len();
    let z = truth.len();
    let removed = report.discarded();
    let caught = truth.intersection(&removed).count();
    let inliers_kept = input
        .pairs()
        .filter(|p| !truth.contains(p) && !removed.contains(p))
        .count();
    TrialResult {
        tpr: (z > 0).then(|| caught as f64 / z as f64),
        tnr: (z < q).then(|| inliers_kept as f64 / (q - z) as f64),
        me_raw: mean_abs_error(input.iter(), clean).unwrap_or(0.0),
        me_filtered: mean_abs_error(report.survivors.iter(), clean),
        removed_count: removed.len(),
        iterations: report.counters.outer_iterations,
    }
}

/// Stream of the trial at `(position, z, run)`.
pub fn trial_stream(position: usize, z: usize, run: usize) -> u64 {
    ((position as u64) << 40) | ((z as u64 & 0xff) << 32) | (run as u64 & 0xffff_ffff)
}

/// Stream of the source draw for `position`.
pub fn position_stream(position: usize) -> u64 {
    (1u64 << 63) | position as u64
}

pub fn rng_for(master_seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(stream);
    rng
}

/// Generate the corrupted set of a trial; identical for every mode.
pub fn trial_data(
    spec: &TrialSpec,
    array: &SensorArray,
) -> Result<(TdoaSet, TdoaSet, BTreeSet<PairIndex>)> {
    let mut rng = rng_for(spec.master_seed, spec.stream);
    let clean = tdoa_map(&spec.source, array);
    let noisy = inject_noise(&clean, spec.sigma, &mut rng)?;
    let (corrupted, truth) = inject_outliers(
        &noisy, &clean, array, spec.z, spec.sigma, spec.alpha, &mut rng,
    )?;
    Ok((clean, corrupted, truth))
}

pub fn run_trial(spec: &TrialSpec, array: &SensorArray) -> Result<TrialResult> {
    let (clean, corrupted, truth) = trial_data(spec, array)?;
    let config = RemovalConfig::new(spec.mode, CovarianceModel::isotropic(spec.sigma)?)
        .with_alpha(spec.alpha);
    let report = remove_outliers(&corrupted, array, &config)?;
    Ok(evaluate_trial(&report, &truth, &clean))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CampaignConfig {
    pub preset: ArrayPreset,
    pub z_values: Vec<usize>,
    pub runs: usize,
    pub positions: usize,
    pub sigma: f64,
    pub alpha: f64,
    pub modes: Vec<Mode>,
    pub master_seed: u64,
}

impl CampaignConfig {
    pub fn validate(&self) -> Result<()> {
        let q = self.preset.array().num_pairs();
        if self.runs == 0 || self.positions == 0 {
            return Err(Error::InvalidConfig(
                "runs and positions must be >= 1".into(),
            ));
        }
        if self.z_values.is_empty() || self.modes.is_empty() {
            return Err(Error::InvalidConfig(
                "need at least one Z and one mode".into(),
            ));
        }
        if let Some(z) = self.z_values.iter().find(|z| **z > q) {
            return Err(Error::InvalidConfig(format!("Z = {z} exceeds {q} pairs")));
        }
        if self.z_values.iter().any(|z| *z > 0xff)
            || self.runs > 1 << 32
            || self.positions > 1 << 23
        {
            return Err(Error::InvalidConfig(
                "campaign exceeds the stream layout".into(),
            ));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "sigma {} must be > 0",
                self.sigma
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 0.5) {
            return Err(Error::InvalidConfig(format!(
                "alpha {} outside (0, 0.5)",
                self.alpha
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub mode: Mode,
    pub z: usize,
    pub position: usize,
    pub run: usize,
    pub result: TrialResult,
}

/// Run every `(Z, position, run)` trial under every mode. Records are
/// ordered by Z, position, run, then the configured mode order.
pub fn run_trials(config: &CampaignConfig) -> Result<Vec<TrialRecord>> {
    config.validate()?;
    let array = config.preset.array();
    let region = config.preset.source_region();
    let sources: Vec<Point3> = (0..config.positions)
        .map(|p| {
            let mut rng = rng_for(config.master_seed, position_stream(p));
            region.sample_clear(&array, &mut rng)
        })
        .collect();

    let keys: Vec<(usize, usize, usize)> = config
        .z_values
        .iter()
        .flat_map(|&z| {
            (0..config.positions).flat_map(move |p| (0..config.runs).map(move |r| (z, p, r)))
        })
        .collect();

    let cov = CovarianceModel::isotropic(config.sigma)?;
    let per_key: Vec<Result<Vec<TrialRecord>>> = keys
        .par_iter()
        .map(|&(z, position, run)| {
            let spec = TrialSpec {
                source: sources[position],
                z,
                sigma: config.sigma,
                alpha: config.alpha,
                mode: config.modes[0],
                master_seed: config.master_seed,
                stream: trial_stream(position, z, run),
            };
            let (clean, corrupted, truth) = trial_data(&spec, &array)?;
            config
                .modes
                .iter()
                .map(|&mode| {
                    let rc = RemovalConfig::new(mode, cov.clone()).with_alpha(config.alpha);
                    let report = remove_outliers(&corrupted, &array, &rc)?;
                    Ok(TrialRecord {
                        mode,
                        z,
                        position,
                        run,
                        result: evaluate_trial(&report, &truth, &clean),
                    })
                })
                .collect()
        })
        .collect();

    let mut out = Vec::with_capacity(keys.len() * config.modes.len());
    for r in per_key {
        out.extend(r?);
    }
    Ok(out)
}

/// One output line of a campaign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignRow {
    pub mode: Mode,
    pub z: usize,
    pub mean_tpr: Option<f64>,
    pub se_tpr: Option<f64>,
    pub mean_tnr: Option<f64>,
    pub se_tnr: Option<f64>,
    pub mean_me_raw: f64,
    pub mean_me_filtered: Option<f64>,
    pub trials: usize,
}

/// Mean and standard error of the mean; the error needs two samples.
pub fn mean_and_se(values: &[f64]) -> (Option<f64>, Option<f64>) {
    let n = values.len();
    if n == 0 {
        return (None, None);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (Some(mean), None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (Some(mean), Some((var / n as f64).sqrt()))
}

/// Fold records into one row per `(mode, Z)`, in the order given.
pub fn aggregate(records: &[TrialRecord], modes: &[Mode], z_values: &[usize]) -> Vec<CampaignRow> {
    let mut rows = Vec::new();
    for &mode in modes {
        for &z in z_values {
            // Reduce in trial-key order so the sums do not depend on record order.
            let mut keyed: Vec<&TrialRecord> = records
                .iter()
                .filter(|r| r.mode == mode && r.z == z)
                .collect();
            keyed.sort_by_key(|r| (r.position, r.run));
            let sel: Vec<&TrialResult> = keyed.iter().map(|r| &r.result).collect();
            let tpr: Vec<f64> = sel.iter().filter_map(|r| r.tpr).collect();
            let tnr: Vec<f64> = sel.iter().filter_map(|r| r.tnr).collect();
            let raw: Vec<f64> = sel.iter().map(|r| r.me_raw).collect();
            let filtered: Vec<f64> = sel.iter().filter_map(|r| r.me_filtered).collect();
            let (mean_tpr, se_tpr) = mean_and_se(&tpr);
            let (mean_tnr, se_tnr) = mean_and_se(&tnr);
            rows.push(CampaignRow {
                mode,
                z,
                mean_tpr,
                se_tpr,
                mean_tnr,
                se_tnr,
                mean_me_raw: mean_and_se(&raw).0.unwrap_or(0.0),
                mean_me_filtered: mean_and_se(&filtered).0,
                trials: sel.len(),
            });
        }
    }
    rows
}

pub fn run_campaign(config: &CampaignConfig) -> Result<Vec<CampaignRow>> {
    let records = run_trials(config)?;
    Ok(aggregate(&records, &config.modes, &config.z_values))
}

/// Frozen column order of the campaign CSV.
pub const CSV_HEADER: [&str; 9] = [
    "mode",
    "Z",
    "mean_tpr",
    "se_tpr",
    "mean_tnr",
    "se_tnr",
    "mean_me_raw",
    "mean_me_filtered",
    "trials",
];

/// Write rows as CSV; undefined values are empty fields.
pub fn write_csv<W: Write>(rows: &[CampaignRow], writer: W) -> std::io::Result<()> {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.mode.name().to_string(),
            r.z.to_string(),
            opt(r.mean_tpr),
            opt(r.se_tpr),
            opt(r.mean_tnr),
            opt(r.se_tnr),
            r.mean_me_raw.to_string(),
            opt(r.mean_me_filtered),
            r.trials.to_string(),
        ])?;
    }
    w.flush()
}
