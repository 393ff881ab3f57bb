//! One-degree-of-freedom chi-square functions, the group tests built on them,
//! and the multiple/combined testing primitives (BH adjustment, Fisher).

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::geometry::{GroupMember, Interval, PairIndex};

/// Floor applied to zero p-values before taking logarithms.
pub const DEFAULT_PVALUE_FLOOR: f64 = 1e-300;

fn check_nonnegative(x: f64, what: &str) -> Result<()> {
    if x.is_nan() || x < 0.0 {
        return Err(Error::Domain(format!(
            "{what} must be a nonnegative number, got {x}"
        )));
    }
    Ok(())
}

/// `P(χ²₁ ≤ x) = erf(√(x/2))`.
pub fn chi2_cdf_1dof(x: f64) -> Result<f64> {
    check_nonnegative(x, "chi-square argument")?;
    if x.is_infinite() {
        return Ok(1.0);
    }
    Ok(libm::erf((0.5 * x).sqrt()))
}

/// Upper tail `P(χ²₁ > x) = erfc(√(x/2))`, accurate far into the tail.
pub fn chi2_sf_1dof(x: f64) -> Result<f64> {
    check_nonnegative(x, "chi-square argument")?;
    if x.is_infinite() {
        return Ok(0.0);
    }
    Ok(libm::erfc((0.5 * x).sqrt()))
}

fn chi2_pdf_1dof(x: f64) -> f64 {
    (-0.5 * x).exp() / (2.0 * std::f64::consts::PI * x).sqrt()
}

/// Inverse of [`chi2_cdf_1dof`] on `[0, 1)`: bisection to 1e-12, then two
/// Newton steps.
pub fn chi2_quantile_1dof(p: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Domain(format!(
            "quantile probability must lie in [0, 1), got {p}"
        )));
    }
    if p == 0.0 {
        return Ok(0.0);
    }
    let cdf = |x: f64| libm::erf((0.5 * x).sqrt());
    let mut lo = 0.0;
    let mut hi = 1.0;
    while cdf(hi) < p {
        lo = hi;
        hi *= 2.0;
    }
    while hi - lo > 1e-12 * hi.max(1.0) {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..2 {
        let density = chi2_pdf_1dof(x);
        if !(density > 0.0) {
            break;
        }
        let next = x - (cdf(x) - p) / density;
        if next > 0.0 && next.is_finite() {
            x = next;
        }
    }
    Ok(x)
}

/// Null distribution `β₀ χ²₀ + β₁ χ²₁ + β₂ χ²₂` of a squared distance to a
/// boundary-constrained feasible set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureNull {
    weights: [f64; 3],
}

impl MixtureNull {
    /// Half point mass at zero, half `χ²₁`: the global choice for the single
    /// and pair tests.
    pub const HALF_HALF: MixtureNull = MixtureNull {
        weights: [0.5, 0.5, 0.0],
    };

    /// Plain `χ²₁`, exact for the zero-sum plane test.
    pub const CHI2_1: MixtureNull = MixtureNull {
        weights: [0.0, 1.0, 0.0],
    };

    pub fn new(weights: [f64; 3]) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!(
                "mixture weights must be nonnegative and sum to 1, got {weights:?}"
            )));
        }
        Ok(Self { weights })
    }

    pub fn weights(&self) -> [f64; 3] {
        self.weights
    }

    /// Tail probability of a squared-distance statistic. The point mass only
    /// reduces the weight of the continuous components, matching the
    /// `½(1 − F(d²))` form even at `d = 0`.
    pub fn pvalue(&self, statistic: f64) -> Result<f64> {
        let sf1 = chi2_sf_1dof(statistic)?;
        let sf2 = (-0.5 * statistic).exp();
        Ok(self.weights[1] * sf1 + self.weights[2] * sf2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestOutcome {
    /// Squared Mahalanobis distance (dimensionless).
    pub statistic: f64,
    pub pvalue: f64,
    pub reject: bool,
}

impl TestOutcome {
    fn from_pvalue(statistic: f64, pvalue: f64, alpha: f64) -> Self {
        Self {
            statistic,
            pvalue,
            reject: pvalue <= alpha,
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(Error::Domain(format!(
            "alpha must lie in (0, 0.5), got {alpha}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SingleTest {
    pub outcome: TestOutcome,
    /// Mahalanobis distance to `[−d, d]`.
    pub distance: f64,
    /// Acceptance region `[−d − γ_2α, d + γ_2α]`.
    pub acceptance: Interval,
}

/// Half-width margin `γ = σ √(F⁻¹(1 − 2α))` of the single-TDOA acceptance region.
pub fn acceptance_margin(sigma: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(sigma * chi2_quantile_1dof(1.0 - 2.0 * alpha)?.sqrt())
}

/// Test of one TDOA against its feasible interval.
pub fn g1_test(tau: f64, d: f64, sigma: f64, alpha: f64) -> Result<SingleTest> {
    if !(d > 0.0) || !(sigma > 0.0) || !tau.is_finite() {
        return Err(Error::Domain(format!(
            "single test needs d > 0, sigma > 0 and finite tau (d={d}, sigma={sigma}, tau={tau})"
        )));
    }
    check_alpha(alpha)?;
    let distance = if tau.abs() <= d {
        0.0
    } else {
        (tau.abs() - d) / sigma
    };
    let statistic = distance * distance;
    let pvalue = MixtureNull::HALF_HALF.pvalue(statistic)?;
    let gamma = acceptance_margin(sigma, alpha)?;
    Ok(SingleTest {
        outcome: TestOutcome::from_pvalue(statistic, pvalue, alpha),
        distance,
        acceptance: Interval {
            lo: -d - gamma,
            hi: d + gamma,
        },
    })
}

/// Approximate p-value of the pair test from the simplified distance `f`.
pub fn g2_pvalue(f: f64) -> Result<f64> {
    check_nonnegative(f, "distance")?;
    MixtureNull::HALF_HALF.pvalue(f * f)
}

/// Exact p-value of the triple test from the zero-sum plane distance.
pub fn g3_pvalue(d: f64) -> Result<f64> {
    check_nonnegative(d, "distance")?;
    MixtureNull::CHI2_1.pvalue(d * d)
}

fn check_pvalues(pvalues: &[f64]) -> Result<()> {
    if pvalues.is_empty() {
        return Err(Error::Empty("p-value list"));
    }
    if let Some(p) = pvalues.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Domain(format!("p-value {p} outside [0, 1]")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BhAdjusted {
    /// Adjusted values aligned with the input order.
    pub adjusted: Vec<f64>,
    pub min: f64,
}

/// Scale the `m`-th smallest of `M` p-values by `M/m` (capped at 1).
///
/// No cumulative minimum is enforced, so individual adjusted values may be
/// non-monotone in rank; the minimum equals the classical step-up value.
pub fn bh_adjust(pvalues: &[f64]) -> Result<BhAdjusted> {
    check_pvalues(pvalues)?;
    let m_total = pvalues.len() as f64;
    let mut order: Vec<usize> = (0..pvalues.len()).collect();
    order.sort_by(|&a, &b| pvalues[a].total_cmp(&pvalues[b]).then(a.cmp(&b)));
    let mut adjusted = vec![0.0; pvalues.len()];
    let mut min = f64::INFINITY;
    for (rank, &idx) in order.iter().enumerate() {
        // The ratio is >= 1 after rounding, so the product never drops below p.
        let v = (pvalues[idx] * (m_total / (rank + 1) as f64)).min(1.0);
        adjusted[idx] = v;
        min = min.min(v);
    }
    Ok(BhAdjusted { adjusted, min })
}

/// Minimum BH-adjusted value without materializing the adjusted list.
pub fn bh_min(pvalues: &[f64]) -> Result<f64> {
    bh_adjust(pvalues).map(|b| b.min)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FisherStatistic {
    pub value: f64,
    /// How many zero p-values were raised to the floor.
    pub floored: usize,
}

/// Standardized Fisher combination `T = −(2/M) Σ ln λ`.
///
/// Logarithms are summed in ascending p-value order so the result does not
/// depend on the order in which groups are listed.
pub fn fisher_combine(pvalues: &[f64], floor: f64) -> Result<FisherStatistic> {
    check_pvalues(pvalues)?;
    if !(floor > 0.0 && floor < 1.0) {
        return Err(Error::Domain(format!(
            "p-value floor must lie in (0, 1), got {floor}"
        )));
    }
    let mut sorted = pvalues.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut floored = 0;
    let mut sum = 0.0;
    for p in sorted {
        let p = if p < floor {
            if p == 0.0 {
                floored += 1;
            }
            floor
        } else {
            p
        };
        sum += p.ln();
    }
    Ok(FisherStatistic {
        value: -2.0 * sum / pvalues.len() as f64,
        floored,
    })
}

/// Noise covariance of the TDOA measurements.
#[derive(Debug, Clone, PartialEq)]
pub enum CovarianceModel {
    /// Same standard deviation (meters) on every pair, independent pairs.
    Isotropic(f64),
    /// Per-pair standard deviations, independent pairs.
    Diagonal(BTreeMap<PairIndex, f64>),
    /// Full `q × q` covariance in canonical pair order.
    Full(DMatrix<f64>),
}

impl CovarianceModel {
    pub fn isotropic(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::NotPositiveDefinite(format!("sigma = {sigma}")));
        }
        Ok(Self::Isotropic(sigma))
    }

    pub fn diagonal(sigmas: BTreeMap<PairIndex, f64>) -> Result<Self> {
        if let Some((p, s)) = sigmas.iter().find(|(_, s)| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::NotPositiveDefinite(format!(
                "sigma of pair {p} = {s}"
            )));
        }
        Ok(Self::Diagonal(sigmas))
    }

    pub fn full(matrix: DMatrix<f64>) -> Result<Self> {
        let q = matrix.nrows();
        if q == 0 || matrix.ncols() != q {
            return Err(Error::NotPositiveDefinite(
                "matrix must be square and nonempty".into(),
            ));
        }
        let mut sensors = 2;
        while sensors * (sensors - 1) / 2 < q {
            sensors += 1;
        }
        if sensors * (sensors - 1) / 2 != q {
            return Err(Error::NotPositiveDefinite(format!(
                "dimension {q} is not a complete pair count"
            )));
        }
        let scale = matrix.abs().max();
        if (&matrix - matrix.transpose()).abs().max() > 1e-12 * scale {
            return Err(Error::NotPositiveDefinite("matrix is not symmetric".into()));
        }
        if matrix.iter().any(|v| !v.is_finite()) || matrix.clone().cholesky().is_none() {
            return Err(Error::NotPositiveDefinite(
                "Cholesky factorization failed".into(),
            ));
        }
        Ok(Self::Full(matrix))
    }

    pub fn covers(&self, pair: PairIndex) -> bool {
        match self {
            Self::Isotropic(_) => true,
            Self::Diagonal(map) => map.contains_key(&pair),
            Self::Full(m) => pair.linear_index() < m.nrows(),
        }
    }

    /// Standard deviation of one pair.
    pub fn sigma(&self, pair: PairIndex) -> Result<f64> {
        match self {
            Self::Isotropic(s) => Ok(*s),
            Self::Diagonal(map) => map
                .get(&pair)
                .copied()
                .ok_or(Error::MissingCovariance(pair)),
            Self::Full(m) => {
                let k = pair.linear_index();
                if k < m.nrows() {
                    Ok(m[(k, k)].sqrt())
                } else {
                    Err(Error::MissingCovariance(pair))
                }
            }
        }
    }

    fn entry(&self, a: PairIndex, b: PairIndex) -> Result<f64> {
        match self {
            Self::Isotropic(s) => Ok(if a == b { s * s } else { 0.0 }),
            Self::Diagonal(_) => {
                if a == b {
                    let s = self.sigma(a)?;
                    Ok(s * s)
                } else {
                    Ok(0.0)
                }
            }
            Self::Full(m) => {
                let (ka, kb) = (a.linear_index(), b.linear_index());
                if ka >= m.nrows() {
                    return Err(Error::MissingCovariance(a));
                }
                if kb >= m.nrows() {
                    return Err(Error::MissingCovariance(b));
                }
                Ok(m[(ka, kb)])
            }
        }
    }

    /// Covariance of the oriented components of a group: `S Σ_sub S` with
    /// `S = diag(sign)`.
    pub fn group_block(&self, members: &[GroupMember]) -> Result<DMatrix<f64>> {
        let k = members.len();
        let mut out = DMatrix::zeros(k, k);
        for (r, a) in members.iter().enumerate() {
            for (c, b) in members.iter().enumerate() {
                out[(r, c)] = a.sign * b.sign * self.entry(a.pair, b.pair)?;
            }
        }
        Ok(out)
    }

    /// Restriction to a list of canonical pairs.
    pub fn restrict(&self, pairs: &[PairIndex]) -> Result<DMatrix<f64>> {
        let members: Vec<GroupMember> = pairs
            .iter()
            .map(|&pair| GroupMember { pair, sign: 1.0 })
            .collect();
        self.group_block(&members)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cdf_edges() {
        assert_eq!(chi2_cdf_1dof(0.0).unwrap(), 0.0);
        assert_eq!(chi2_cdf_1dof(f64::INFINITY).unwrap(), 1.0);
        assert!(chi2_cdf_1dof(1e4).unwrap() == 1.0);
        assert!(chi2_cdf_1dof(-1.0).is_err());
        assert!(chi2_cdf_1dof(f64::NAN).is_err());
        assert!((chi2_cdf_1dof(3.841458821).unwrap() - 0.95).abs() < 1e-9);
    }

    #[test]
    fn quantile_edges() {
        assert_eq!(chi2_quantile_1dof(0.0).unwrap(), 0.0);
        assert!(chi2_quantile_1dof(1.0).is_err());
        assert!(chi2_quantile_1dof(-0.1).is_err());
        assert!((chi2_quantile_1dof(0.90).unwrap() - 2.705543454095404).abs() < 1e-9);
        assert!((chi2_quantile_1dof(0.95).unwrap() - 3.841458820694124).abs() < 1e-9);
    }

    #[test]
    fn quantile_round_trip_grid() {
        for k in 0..1000 {
            let p = k as f64 / 1000.0 * 0.999;
            let x = chi2_quantile_1dof(p).unwrap();
            assert!((chi2_cdf_1dof(x).unwrap() - p).abs() <= 1e-10, "p={p}");
        }
    }

    #[test]
    fn g1_examples() {
        let t = g1_test(0.3, 1.0, 0.01, 0.05).unwrap();
        assert_eq!(t.distance, 0.0);
        assert_eq!(t.outcome.pvalue, 0.5);
        assert!(!t.outcome.reject);

        let sigma = 0.007;
        let t = g1_test(0.0, 1.0, sigma, 0.05).unwrap();
        let gamma = sigma * 2.705543454095404f64.sqrt();
        assert!((t.acceptance.hi - (1.0 + gamma)).abs() < 1e-12);
        assert!((gamma - 0.0115140).abs() < 1e-6);

        let on_edge = g1_test(1.0 + gamma, 1.0, sigma, 0.05).unwrap();
        assert!((on_edge.outcome.pvalue - 0.05).abs() < 1e-9);

        assert!(g1_test(0.0, 0.0, sigma, 0.05).is_err());
        assert!(g1_test(0.0, 1.0, sigma, 0.7).is_err());
    }

    #[test]
    fn pair_and_triple_pvalues() {
        assert_eq!(g2_pvalue(0.0).unwrap(), 0.5);
        let f = chi2_quantile_1dof(0.9).unwrap().sqrt();
        assert!((g2_pvalue(f).unwrap() - 0.05).abs() < 1e-10);
        let tail = g2_pvalue(10.0).unwrap();
        assert!(tail > 0.0 && tail < 1e-20);

        assert_eq!(g3_pvalue(0.0).unwrap(), 1.0);
        assert!((g3_pvalue(1.959963984540054).unwrap() - 0.05).abs() < 1e-10);
        let mut last = 1.0;
        for k in 1..200 {
            let p = g3_pvalue(k as f64 * 0.05).unwrap();
            assert!(p < last);
            last = p;
        }
        assert!(g2_pvalue(-1.0).is_err());
    }

    #[test]
    fn mixture_weights() {
        assert!(MixtureNull::new([0.25, 0.5, 0.25]).is_ok());
        assert!(MixtureNull::new([0.5, 0.6, 0.0]).is_err());
        assert!(MixtureNull::new([-0.1, 1.1, 0.0]).is_err());
        let quarter = MixtureNull::new([0.25, 0.5, 0.25]).unwrap();
        assert_eq!(quarter.pvalue(0.0).unwrap(), 0.75);
    }

    #[test]
    fn bh_examples() {
        let b = bh_adjust(&[0.01, 0.04, 0.03]).unwrap();
        let expect = [0.03, 0.04, 0.045];
        for (a, e) in b.adjusted.iter().zip(expect) {
            assert!((a - e).abs() <= 1e-12);
        }
        assert!((b.min - 0.03).abs() <= 1e-12);

        let ones = bh_adjust(&[1.0; 4]).unwrap();
        assert!(ones.adjusted.iter().all(|v| *v == 1.0));
        assert_eq!(ones.min, 1.0);

        assert_eq!(bh_adjust(&[0.2]).unwrap().adjusted, vec![0.2]);
        assert!(bh_adjust(&[]).is_err());
        assert!(bh_adjust(&[1.5]).is_err());
    }

    #[test]
    fn fisher_examples() {
        let e = (-1.0f64).exp();
        assert!((fisher_combine(&[e; 3], DEFAULT_PVALUE_FLOOR).unwrap().value - 2.0).abs() < 1e-12);
        assert_eq!(
            fisher_combine(&[1.0, 1.0], DEFAULT_PVALUE_FLOOR)
                .unwrap()
                .value,
            0.0
        );
        let t = fisher_combine(&[0.1, 0.01], DEFAULT_PVALUE_FLOOR).unwrap();
        assert!((t.value - 6.907755278982137).abs() < 1e-12);

        let z = fisher_combine(&[0.0, 0.5], DEFAULT_PVALUE_FLOOR).unwrap();
        assert_eq!(z.floored, 1);
        assert!(z.value.is_finite());
        assert!(fisher_combine(&[], DEFAULT_PVALUE_FLOOR).is_err());
    }

    #[test]
    fn covariance_blocks_apply_signs() {
        let p10 = PairIndex::new(1, 0).unwrap();
        let p20 = PairIndex::new(2, 0).unwrap();
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let cov = CovarianceModel::full(m).unwrap();
        let block = cov
            .group_block(&[
                GroupMember {
                    pair: p10,
                    sign: -1.0,
                },
                GroupMember {
                    pair: p20,
                    sign: 1.0,
                },
            ])
            .unwrap();
        assert_eq!(block[(0, 0)], 4.0);
        assert_eq!(block[(0, 1)], -1.0);
        assert_eq!(block[(1, 1)], 3.0);
        assert_eq!(cov.sigma(p20).unwrap(), 3f64.sqrt());
        assert!(cov.sigma(PairIndex::new(3, 0).unwrap()).is_err());

        assert!(CovarianceModel::full(DMatrix::identity(4, 4)).is_err());
        assert!(CovarianceModel::full(-DMatrix::identity(3, 3)).is_err());
        assert!(CovarianceModel::isotropic(0.0).is_err());
        let mut d = BTreeMap::new();
        d.insert(p10, -1.0);
        assert!(CovarianceModel::diagonal(d).is_err());
    }

    proptest! {
        #[test]
        fn g1_decision_matches_interval(
            tau in -3.0f64..3.0,
            d in 0.05f64..2.0,
            sigma in 1e-3f64..0.2,
            alpha in 0.001f64..0.49,
        ) {
            let t = g1_test(tau, d, sigma, alpha).unwrap();
            prop_assert_eq!(t.outcome.reject, !t.acceptance.contains(tau));
        }

        #[test]
        fn bh_adjusted_dominates_raw(ps in proptest::collection::vec(0.0f64..=1.0, 1..30), alpha in 0.001f64..0.5) {
            let b = bh_adjust(&ps).unwrap();
            for (a, p) in b.adjusted.iter().zip(&ps) {
                prop_assert!(*a >= *p);
            }
            if b.min <= alpha {
                prop_assert!(ps.iter().any(|p| *p <= alpha));
            }
        }

        #[test]
        fn fisher_permutation_invariant_and_monotone(
            ps in proptest::collection::vec(1e-12f64..=1.0, 1..20),
            pick in any::<prop::sample::Index>(),
            shrink in 0.01f64..0.99,
        ) {
            let base = fisher_combine(&ps, DEFAULT_PVALUE_FLOOR).unwrap().value;
            let mut rev = ps.clone();
            rev.reverse();
            prop_assert_eq!(base, fisher_combine(&rev, DEFAULT_PVALUE_FLOOR).unwrap().value);
            let mut lower = ps.clone();
            let k = pick.index(ps.len());
            lower[k] *= shrink;
            prop_assert!(fisher_combine(&lower, DEFAULT_PVALUE_FLOOR).unwrap().value > base);
        }

        #[test]
        fn cdf_monotone(a in 0.0f64..60.0, b in 0.0f64..60.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(chi2_cdf_1dof(lo).unwrap() <= chi2_cdf_1dof(hi).unwrap());
        }
    }
}
