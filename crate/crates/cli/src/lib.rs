//! Batch commands behind the `tdoa` binary: outlier detection on a
//! measurement file, Monte-Carlo campaigns, and ML localization.
//!
//! Exit codes: 0 on success, 2 on invalid input or configuration, 3 on a
//! numeric failure (including localization that did not converge).

pub mod files;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use tdoa_core::localization::{localize, LocalizationConfig};
use tdoa_core::removal::{remove_outliers, GroupSize, Mode, RemovalConfig, RemovalReport};
use tdoa_core::simharness::{run_campaign, write_csv, ArrayPreset, CampaignConfig};
use tdoa_core::{PairIndex, Point3, SensorArray, TdoaSet};

use files::{Measurements, PairValue};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Numeric,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Validation,
            message: message.into(),
        }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Numeric,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Validation => 2,
            ErrorKind::Numeric => 3,
        }
    }
}

impl From<tdoa_core::Error> for CliError {
    fn from(e: tdoa_core::Error) -> Self {
        use tdoa_core::Error as E;
        match e {
            E::Domain(_) | E::RankAmbiguous { .. } | E::InjectionImpossible(_) => {
                Self::numeric(e.to_string())
            }
            _ => Self::validation(e.to_string()),
        }
    }
}

fn stage_name(stage: GroupSize) -> &'static str {
    match stage {
        GroupSize::G2 => "g2",
        GroupSize::G3 => "g3",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovedEntry {
    pub j: usize,
    pub i: usize,
    pub value: f64,
    pub stage: String,
    /// Zero-based outer iteration across all stages.
    pub iteration: usize,
    pub min_adjusted: f64,
    pub fisher: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectOutput {
    pub mode: String,
    pub alpha: f64,
    pub removed: Vec<RemovedEntry>,
    /// Rejected by the single-TDOA test before any group stage.
    pub preprocessed: Vec<PairValue>,
    pub survivors: Vec<PairValue>,
    /// Survivors that belonged to no complete group.
    pub untestable: Vec<PairIndex>,
    pub iterations: usize,
    pub floored_pvalues: usize,
}

impl DetectOutput {
    pub fn from_report(report: &RemovalReport, mode: Mode, alpha: f64) -> Self {
        let mut removed: Vec<RemovedEntry> = report
            .removed()
            .into_iter()
            .map(|r| RemovedEntry {
                j: r.pair.j,
                i: r.pair.i,
                value: r.value,
                stage: stage_name(r.stage).to_string(),
                iteration: r.iteration,
                min_adjusted: r.min_adjusted,
                fisher: r.fisher,
            })
            .collect();
        removed.sort_by_key(|r| (r.iteration, r.j, r.i));
        Self {
            mode: mode.name().to_string(),
            alpha,
            removed,
            preprocessed: report
                .preprocessed_out
                .iter()
                .map(|&(p, value)| PairValue {
                    j: p.j,
                    i: p.i,
                    value,
                })
                .collect(),
            survivors: set_to_pairs(&report.survivors),
            untestable: report.untestable.clone(),
            iterations: report.iterations.len(),
            floored_pvalues: report.floored_pvalues,
        }
    }

    /// The same report expressed in relabeled sensor indices, with all
    /// lists re-sorted into canonical order.
    pub fn relabeled(&self, perm: &[usize]) -> Self {
        let map = |j: usize, i: usize, value: f64| {
            let (p, sign) = PairIndex { j, i }.relabeled(perm);
            (p, sign * value)
        };
        let map_values = |list: &[PairValue]| {
            let mut out: Vec<PairValue> = list
                .iter()
                .map(|pv| {
                    let (p, value) = map(pv.j, pv.i, pv.value);
                    PairValue {
                        j: p.j,
                        i: p.i,
                        value,
                    }
                })
                .collect();
            out.sort_by_key(|pv| (pv.j, pv.i));
            out
        };
        let mut removed: Vec<RemovedEntry> = self
            .removed
            .iter()
            .map(|r| {
                let (p, value) = map(r.j, r.i, r.value);
                RemovedEntry {
                    j: p.j,
                    i: p.i,
                    value,
                    ..r.clone()
                }
            })
            .collect();
        removed.sort_by_key(|r| (r.iteration, r.j, r.i));
        let mut untestable: Vec<PairIndex> = self
            .untestable
            .iter()
            .map(|p| p.relabeled(perm).0)
            .collect();
        untestable.sort();
        Self {
            mode: self.mode.clone(),
            alpha: self.alpha,
            removed,
            preprocessed: map_values(&self.preprocessed),
            survivors: map_values(&self.survivors),
            untestable,
            iterations: self.iterations,
            floored_pvalues: self.floored_pvalues,
        }
    }

    /// One row per input pair: `j,i,value,status,stage,iteration,min_adjusted,fisher`.
    pub fn to_csv(&self) -> String {
        let mut rows: Vec<(usize, usize, String)> = Vec::new();
        for pv in &self.survivors {
            rows.push((
                pv.j,
                pv.i,
                format!("{},{},{},kept,,,,", pv.j, pv.i, pv.value),
            ));
        }
        for pv in &self.preprocessed {
            rows.push((
                pv.j,
                pv.i,
                format!("{},{},{},preprocessed,g1,,,", pv.j, pv.i, pv.value),
            ));
        }
        for r in &self.removed {
            rows.push((
                r.j,
                r.i,
                format!(
                    "{},{},{},removed,{},{},{},{}",
                    r.j, r.i, r.value, r.stage, r.iteration, r.min_adjusted, r.fisher
                ),
            ));
        }
        rows.sort_by_key(|r| (r.0, r.1));
        let mut out = String::from("j,i,value,status,stage,iteration,min_adjusted,fisher\n");
        for (_, _, line) in rows {
            let _ = writeln!(out, "{line}");
        }
        out
    }
}

fn set_to_pairs(set: &TdoaSet) -> Vec<PairValue> {
    set.iter()
        .map(|(p, value)| PairValue {
            j: p.j,
            i: p.i,
            value,
        })
        .collect()
}

pub fn parse_alpha(alpha: f64) -> Result<f64, CliError> {
    if alpha > 0.0 && alpha < 0.5 {
        Ok(alpha)
    } else {
        Err(CliError::validation(format!(
            "alpha: {alpha} outside (0, 0.5)"
        )))
    }
}

pub fn detect(
    array: &SensorArray,
    measurements: &Measurements,
    mode: Mode,
    alpha: f64,
) -> Result<DetectOutput, CliError> {
    let alpha = parse_alpha(alpha)?;
    let config = RemovalConfig::new(mode, measurements.covariance.clone()).with_alpha(alpha);
    let report = remove_outliers(&measurements.set, array, &config)?;
    Ok(DetectOutput::from_report(&report, mode, alpha))
}

/// Inclusive integer range `A:B` or `A:B:STEP`.
pub fn parse_z_range(text: &str) -> Result<Vec<usize>, CliError> {
    let bad = || CliError::validation(format!("z-range: expected A:B[:STEP], got {text:?}"));
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() < 2 || parts.len() > 3 {
        return Err(bad());
    }
    let num = |s: &str| s.trim().parse::<usize>().map_err(|_| bad());
    let (a, b) = (num(parts[0])?, num(parts[1])?);
    let step = if parts.len() == 3 { num(parts[2])? } else { 1 };
    if a > b || step == 0 {
        return Err(CliError::validation(format!(
            "z-range: need A <= B and STEP >= 1, got {text:?}"
        )));
    }
    Ok((a..=b).step_by(step).collect())
}

pub fn parse_modes(text: &str) -> Result<Vec<Mode>, CliError> {
    let modes = text
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<Mode>()
                .map_err(|e| CliError::validation(format!("modes: {e}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if modes.is_empty() {
        return Err(CliError::validation("modes: empty"));
    }
    Ok(modes)
}

pub fn parse_point(text: &str) -> Result<Point3, CliError> {
    let bad = || CliError::validation(format!("init: expected x,y,z, got {text:?}"));
    let v = text
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<Vec<_>, _>>()?;
    if v.len() != 3 || !v.iter().all(|x| x.is_finite()) {
        return Err(bad());
    }
    Ok(Point3::new(v[0], v[1], v[2]))
}

/// Run a campaign and render it as CSV.
pub fn simulate(config: &CampaignConfig) -> Result<String, CliError> {
    parse_alpha(config.alpha)?;
    let rows = run_campaign(config)?;
    let mut buf = Vec::new();
    write_csv(&rows, &mut buf).map_err(|e| CliError::numeric(e.to_string()))?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

pub fn preset_or_array(
    preset: Option<&str>,
    array: Option<SensorArray>,
) -> Result<ArrayPreset, CliError> {
    match (preset, array) {
        (Some(name), None) => name
            .parse::<ArrayPreset>()
            .map_err(|e| CliError::validation(format!("preset: {e}"))),
        (None, Some(a)) => Ok(ArrayPreset::Custom(a)),
        _ => Err(CliError::validation(
            "exactly one of --preset and --array is required",
        )),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizeOutput {
    pub position: [f64; 3],
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub removed: Option<Vec<RemovedEntry>>,
}

/// Localize from all measurements, or from the survivors of `detect_first`.
pub fn localize_measurements(
    array: &SensorArray,
    measurements: &Measurements,
    detect_first: Option<(Mode, f64)>,
    init: Option<Point3>,
) -> Result<LocalizeOutput, CliError> {
    let (set, removed) = match detect_first {
        Some((mode, alpha)) => {
            let alpha = parse_alpha(alpha)?;
            let config =
                RemovalConfig::new(mode, measurements.covariance.clone()).with_alpha(alpha);
            let report = remove_outliers(&measurements.set, array, &config)?;
            let out = DetectOutput::from_report(&report, mode, alpha);
            (report.survivors, Some(out.removed))
        }
        None => (measurements.set.clone(), None),
    };
    let config = LocalizationConfig {
        initial_guess: init,
        ..LocalizationConfig::default()
    };
    let r = localize(&set, array, &measurements.covariance, &config)?;
    Ok(LocalizeOutput {
        position: [r.position.x, r.position.y, r.position.z],
        cost: r.final_cost,
        iterations: r.iterations,
        converged: r.converged,
        removed,
    })
}
