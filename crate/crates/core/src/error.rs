use thiserror::Error;

use crate::geometry::PairIndex;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("sensor array needs at least 2 sensors, got {0}")]
    TooFewSensors(usize),

    #[error("sensors {a} and {b} coincide")]
    CoincidentSensors { a: usize, b: usize },

    #[error("sensor {index} has a non-finite coordinate")]
    NonFinitePosition { index: usize },

    #[error("pair ({j},{i}) is not canonical: expected j > i")]
    NonCanonicalPair { j: usize, i: usize },

    #[error("pair ({j},{i}) references a sensor outside the array of {sensors}")]
    UnknownSensor { j: usize, i: usize, sensors: usize },

    #[error("sensor indices of a triple must be distinct: ({0}, {1}, {2})")]
    RepeatedSensor(usize, usize, usize),

    #[error("geometry does not match the supplied group: {0}")]
    GeometryMismatch(String),

    #[error("covariance is not symmetric positive-definite: {0}")]
    NotPositiveDefinite(String),

    #[error("covariance does not cover pair {0}")]
    MissingCovariance(PairIndex),

    #[error("argument out of domain: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("numerical rank is ambiguous: singular value ratio {ratio:e} lies in the guard band")]
    RankAmbiguous { ratio: f64 },

    #[error(
        "cannot inject an outlier for pair {0}: the exclusion band covers the acceptance interval"
    )]
    InjectionImpossible(PairIndex),
}

pub type Result<T> = std::result::Result<T, Error>;
