//! Maximum-likelihood source localization from a (possibly partial) TDOA set.
//!
//! The cost is the squared Mahalanobis distance between the measured TDOAs
//! and the TDOA map at `x`, restricted to the pairs present in the set. It
//! is minimized by damped Gauss-Newton on the whitened residuals.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{PairIndex, Point3, SensorArray, TdoaSet};
use crate::stattests::CovarianceModel;

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationConfig {
    /// Starting point; the sensor centroid when `None`.
    pub initial_guess: Option<Point3>,
    pub max_iterations: usize,
    /// Bound on the Euclidean norm of the cost gradient.
    pub gradient_tolerance: f64,
    pub initial_damping: f64,
    /// Multiplier applied to the damping after a rejected step, divisor after
    /// an accepted one.
    pub damping_factor: f64,
    /// Damping above which the search is abandoned.
    pub max_damping: f64,
}

impl Default for LocalizationConfig {
    fn default() -> Self {
        Self {
            initial_guess: None,
            max_iterations: 200,
            gradient_tolerance: 1e-8,
            initial_damping: 1e-3,
            damping_factor: 10.0,
            max_damping: 1e16,
        }
    }
}

impl LocalizationConfig {
    pub fn with_initial_guess(mut self, x: Point3) -> Self {
        self.initial_guess = Some(x);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.gradient_tolerance,
            self.initial_damping,
            self.max_damping,
        ];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidConfig(
                "tolerances and damping must be positive".into(),
            ));
        }
        if !(self.damping_factor > 1.0) {
            return Err(Error::InvalidConfig("damping factor must exceed 1".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidConfig("max_iterations must be >= 1".into()));
        }
        if let Some(x) = self.initial_guess {
            if !x.iter().all(|c| c.is_finite()) {
                return Err(Error::InvalidConfig("initial guess is not finite".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalizationResult {
    pub position: Point3,
    pub final_cost: f64,
    pub iterations: usize,
    /// Set only when the gradient norm fell below the configured tolerance.
    pub converged: bool,
}

/// Whitened least-squares problem over a fixed list of pairs.
struct Problem<'a> {
    array: &'a SensorArray,
    pairs: Vec<PairIndex>,
    measured: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl<'a> Problem<'a> {
    fn new(set: &TdoaSet, array: &'a SensorArray, cov: &CovarianceModel) -> Result<Self> {
        if set.is_empty() {
            return Err(Error::Empty("measurement set"));
        }
        for pair in set.pairs() {
            array.check_pair(pair)?;
        }
        let pairs: Vec<PairIndex> = set.pairs().collect();
        let measured = DVector::from_iterator(pairs.len(), set.iter().map(|(_, v)| v));
        let sub = cov.restrict(&pairs)?;
        let chol = sub
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("restricted covariance".into()))?;
        Ok(Self {
            array,
            pairs,
            measured,
            chol,
        })
    }

    fn whitened_residual(&self, x: &Point3) -> DVector<f64> {
        let model = DVector::from_iterator(
            self.pairs.len(),
            self.pairs.iter().map(|&p| self.array.tdoa(x, p)),
        );
        self.whiten(self.measured.clone() - model)
    }

    fn whiten(&self, v: DVector<f64>) -> DVector<f64> {
        self.chol
            .l_dirty()
            .solve_lower_triangular(&v)
            .expect("cholesky factor is nonsingular")
    }

    fn whitened_jacobian(&self, x: &Point3) -> DMatrix<f64> {
        let j = tdoa_jacobian(x, self.array, &self.pairs);
        self.chol
            .l_dirty()
            .solve_lower_triangular(&j)
            .expect("cholesky factor is nonsingular")
    }

    fn cost(&self, x: &Point3) -> f64 {
        self.whitened_residual(x).norm_squared()
    }
}

/// Rows `∂τ_ji/∂x = (x − m_j)/‖x − m_j‖ − (x − m_i)/‖x − m_i‖`, one per pair.
///
/// Rows are undefined (NaN) when `x` coincides with a sensor of the pair.
pub fn tdoa_jacobian(x: &Point3, array: &SensorArray, pairs: &[PairIndex]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(pairs.len(), 3);
    for (r, p) in pairs.iter().enumerate() {
        let uj = x - array.position(p.j);
        let ui = x - array.position(p.i);
        let g = uj / uj.norm() - ui / ui.norm();
        for c in 0..3 {
            out[(r, c)] = g[c];
        }
    }
    out
}

/// `(τ̂ − τ(x))ᵀ Σ⁻¹ (τ̂ − τ(x))` over the pairs present in `set`.
pub fn ml_cost(
    x: &Point3,
    set: &TdoaSet,
    array: &SensorArray,
    cov: &CovarianceModel,
) -> Result<f64> {
    Ok(Problem::new(set, array, cov)?.cost(x))
}

/// Number of independent TDOAs carried by `pairs`: the rank of the pair
/// graph's incidence structure, `Σ (component size − 1)`.
pub fn independent_tdoa_count(sensors: usize, pairs: impl IntoIterator<Item = PairIndex>) -> usize {
    let mut parent: Vec<usize> = (0..sensors).collect();
    fn find(parent: &mut [usize], mut a: usize) -> usize {
        while parent[a] != a {
            parent[a] = parent[parent[a]];
            a = parent[a];
        }
        a
    }
    let mut merged = 0;
    for p in pairs {
        let (a, b) = (find(&mut parent, p.j), find(&mut parent, p.i));
        if a != b {
            parent[a] = b;
            merged += 1;
        }
    }
    merged
}

/// Distance below which an iterate counts as sitting on a sensor.
pub const SENSOR_PROXIMITY: f64 = 1e-9;
/// Size of the nudge applied to an iterate sitting on a sensor.
pub const SENSOR_NUDGE: f64 = 1e-6;

fn nudge_off_sensors(x: Point3, array: &SensorArray, last_step: &Vector3<f64>) -> Point3 {
    let near = array
        .positions()
        .iter()
        .any(|m| (x - m).norm() <= SENSOR_PROXIMITY);
    if !near {
        return x;
    }
    let dir = if last_step.norm() > 0.0 {
        last_step.normalize()
    } else {
        Vector3::new(1.0, 0.0, 0.0)
    };
    x + dir * SENSOR_NUDGE
}

/// Damped Gauss-Newton minimization of [`ml_cost`].
///
/// Under-determined sets (fewer than three independent TDOAs) return the
/// starting point with `converged = false`.
pub fn localize(
    set: &TdoaSet,
    array: &SensorArray,
    cov: &CovarianceModel,
    config: &LocalizationConfig,
) -> Result<LocalizationResult> {
    config.validate()?;
    let problem = Problem::new(set, array, cov)?;
    let mut x = nudge_off_sensors(
        config.initial_guess.unwrap_or_else(|| array.centroid()),
        array,
        &Vector3::zeros(),
    );
    let mut cost = problem.cost(&x);

    if independent_tdoa_count(array.len(), set.pairs()) < 3 {
        return Ok(LocalizationResult {
            position: x,
            final_cost: cost,
            iterations: 0,
            converged: false,
        });
    }

    let mut damping = config.initial_damping;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iterations {
        let r = problem.whitened_residual(&x);
        let j = problem.whitened_jacobian(&x);
        let jtr: Vector3<f64> = (j.transpose() * &r).fixed_rows::<3>(0).into();
        if !jtr.iter().all(|v| v.is_finite()) {
            break;
        }
        if 2.0 * jtr.norm() <= config.gradient_tolerance {
            converged = true;
            break;
        }
        iterations += 1;
        let jtj: Matrix3<f64> = (j.transpose() * &j).fixed_view::<3, 3>(0, 0).into();

        let mut accepted = false;
        while damping <= config.max_damping {
            let mut lhs = jtj;
            for d in 0..3 {
                lhs[(d, d)] += damping * jtj[(d, d)].max(1e-12);
            }
            let Some(step) = lhs.cholesky().map(|c| c.solve(&jtr)) else {
                damping *= config.damping_factor;
                continue;
            };
            let candidate = nudge_off_sensors(x + step, array, &step);
            let candidate_cost = problem.cost(&candidate);
            if candidate_cost.is_finite() && candidate_cost < cost {
                x = candidate;
                cost = candidate_cost;
                damping = (damping / config.damping_factor).max(1e-15);
                accepted = true;
                break;
            }
            damping *= config.damping_factor;
        }
        if !accepted {
            // No descent left at any damping; report the current gradient.
            converged = 2.0 * jtr.norm() <= config.gradient_tolerance;
            break;
        }
    }
    if !converged && iterations == config.max_iterations {
        let r = problem.whitened_residual(&x);
        let j = problem.whitened_jacobian(&x);
        converged = 2.0 * (j.transpose() * r).norm() <= config.gradient_tolerance;
    }
    Ok(LocalizationResult {
        position: x,
        final_cost: cost,
        iterations,
        converged,
    })
}
