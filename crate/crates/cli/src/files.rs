//! JSON wire formats for sensor arrays and TDOA measurements.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use tdoa_core::stattests::CovarianceModel;
use tdoa_core::{PairIndex, SensorArray, TdoaSet};

use crate::CliError;

/// Propagation speed assumed for `units = "seconds"` when `speed` is absent (m/s).
pub const DEFAULT_SPEED: f64 = 343.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayFile {
    pub sensors: Vec<[f64; 3]>,
    #[serde(default)]
    pub name: String,
}

impl ArrayFile {
    pub fn from_array(array: &SensorArray, name: impl Into<String>) -> Self {
        Self {
            sensors: array.positions().iter().map(|p| [p.x, p.y, p.z]).collect(),
            name: name.into(),
        }
    }

    pub fn to_array(&self) -> Result<SensorArray, CliError> {
        for (k, s) in self.sensors.iter().enumerate() {
            if !s.iter().all(|v| v.is_finite()) {
                return Err(CliError::validation(format!(
                    "sensors[{k}]: non-finite coordinate"
                )));
            }
        }
        SensorArray::from_coords(&self.sensors)
            .map_err(|e| CliError::validation(format!("sensors: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Units {
    #[default]
    Meters,
    Seconds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairValue {
    pub j: usize,
    pub i: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Sigma {
    Scalar(f64),
    /// One entry per element of `pairs`, in the same order.
    PerPair(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementFile {
    pub pairs: Vec<PairValue>,
    #[serde(default)]
    pub units: Units,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speed: Option<f64>,
    pub sigma: Sigma,
}

/// A measurement file resolved to meters against a concrete array.
#[derive(Debug, Clone)]
pub struct Measurements {
    pub set: TdoaSet,
    pub covariance: CovarianceModel,
    pub warnings: Vec<String>,
}

impl MeasurementFile {
    /// Meter-valued file with one scalar standard deviation.
    pub fn from_set(set: &TdoaSet, sigma: f64) -> Self {
        Self {
            pairs: set
                .iter()
                .map(|(p, value)| PairValue {
                    j: p.j,
                    i: p.i,
                    value,
                })
                .collect(),
            units: Units::Meters,
            speed: None,
            sigma: Sigma::Scalar(sigma),
        }
    }

    pub fn resolve(&self, array: &SensorArray) -> Result<Measurements, CliError> {
        let mut warnings = Vec::new();
        let scale = match self.units {
            Units::Meters => {
                if self.speed.is_some() {
                    warnings.push("speed is ignored for units = \"meters\"".to_string());
                }
                1.0
            }
            Units::Seconds => match self.speed {
                Some(c) if c > 0.0 && c.is_finite() => c,
                Some(c) => {
                    return Err(CliError::validation(format!(
                        "speed: must be positive, got {c}"
                    )))
                }
                None => {
                    warnings.push(format!(
                        "WARNING: units = \"seconds\" without speed; assuming {DEFAULT_SPEED} m/s"
                    ));
                    DEFAULT_SPEED
                }
            },
        };
        if self.pairs.is_empty() {
            return Err(CliError::validation("pairs: empty"));
        }

        let mut set = TdoaSet::new();
        let mut seen = BTreeSet::new();
        for (k, pv) in self.pairs.iter().enumerate() {
            let pair = PairIndex::new(pv.j, pv.i)
                .map_err(|e| CliError::validation(format!("pairs[{k}]: {e}")))?;
            array
                .check_pair(pair)
                .map_err(|e| CliError::validation(format!("pairs[{k}]: {e}")))?;
            if !seen.insert(pair) {
                return Err(CliError::validation(format!(
                    "pairs[{k}]: duplicate pair {pair}"
                )));
            }
            if !pv.value.is_finite() {
                return Err(CliError::validation(format!(
                    "pairs[{k}].value: not finite"
                )));
            }
            set.insert(pair, pv.value * scale);
        }

        let covariance = match &self.sigma {
            Sigma::Scalar(s) => CovarianceModel::isotropic(s * scale)
                .map_err(|e| CliError::validation(format!("sigma: {e}")))?,
            Sigma::PerPair(list) => {
                if list.len() != self.pairs.len() {
                    return Err(CliError::validation(format!(
                        "sigma: {} entries for {} pairs",
                        list.len(),
                        self.pairs.len()
                    )));
                }
                let map: BTreeMap<PairIndex, f64> = self
                    .pairs
                    .iter()
                    .zip(list)
                    .map(|(pv, s)| (PairIndex { j: pv.j, i: pv.i }, s * scale))
                    .collect();
                CovarianceModel::diagonal(map)
                    .map_err(|e| CliError::validation(format!("sigma: {e}")))?
            }
        };
        Ok(Measurements {
            set,
            covariance,
            warnings,
        })
    }
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("output types serialize");
    s.push('\n');
    s
}
