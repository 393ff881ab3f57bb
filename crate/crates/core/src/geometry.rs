//! Sensor-array geometry and the feasible sets of TDOA measurements.
//!
//! All quantities are range differences in meters (propagation speed 1).
//! A TDOA for the ordered pair `(j, i)` is `‖x − m_j‖ − ‖x − m_i‖`; storage is
//! always keyed by the canonical orientation `j > i`.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = Vector3<f64>;

/// Default relative tolerance used to decide whether three sensors are aligned.
pub const DEFAULT_ALIGNMENT_TOL: f64 = 1e-6;

/// Relative tolerance of the closed-set membership tests.
pub const MEMBERSHIP_TOL: f64 = 1e-12;

/// Positions of `n + 1` distinct sensors with cached pairwise distances.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorArray {
    positions: Vec<Point3>,
    dist: Vec<f64>,
}

impl SensorArray {
    pub fn new(positions: Vec<Point3>) -> Result<Self> {
        let count = positions.len();
        if count < 2 {
            return Err(Error::TooFewSensors(count));
        }
        if let Some(index) = positions
            .iter()
            .position(|p| !p.iter().all(|c| c.is_finite()))
        {
            return Err(Error::NonFinitePosition { index });
        }
        let mut dist = vec![0.0; count * count];
        for a in 0..count {
            for b in (a + 1)..count {
                let d = (positions[a] - positions[b]).norm();
                if d <= 0.0 {
                    return Err(Error::CoincidentSensors { a, b });
                }
                dist[a * count + b] = d;
                dist[b * count + a] = d;
            }
        }
        Ok(Self { positions, dist })
    }

    pub fn from_coords(coords: &[[f64; 3]]) -> Result<Self> {
        Self::new(
            coords
                .iter()
                .map(|c| Point3::new(c[0], c[1], c[2]))
                .collect(),
        )
    }

    /// Number of sensors, `n + 1`.
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Index of the last sensor, `n`.
    pub fn last_index(&self) -> usize {
        self.positions.len() - 1
    }

    /// Size of the complete TDOA set, `q = n(n+1)/2`.
    pub fn num_pairs(&self) -> usize {
        let c = self.len();
        c * (c - 1) / 2
    }

    pub fn positions(&self) -> &[Point3] {
        &self.positions
    }

    pub fn position(&self, i: usize) -> &Point3 {
        &self.positions[i]
    }

    /// Euclidean distance `d_ab` between two sensors.
    pub fn distance(&self, a: usize, b: usize) -> f64 {
        self.dist[a * self.len() + b]
    }

    pub fn centroid(&self) -> Point3 {
        self.positions.iter().sum::<Point3>() / self.len() as f64
    }

    /// Largest pairwise sensor distance.
    pub fn aperture(&self) -> f64 {
        self.dist.iter().cloned().fold(0.0, f64::max)
    }

    /// All canonical pairs in enumeration order.
    pub fn pairs(&self) -> impl Iterator<Item = PairIndex> {
        PairIndex::enumerate(self.len())
    }

    pub fn check_pair(&self, pair: PairIndex) -> Result<()> {
        if pair.j >= self.len() {
            return Err(Error::UnknownSensor {
                j: pair.j,
                i: pair.i,
                sensors: self.len(),
            });
        }
        Ok(())
    }

    /// Noiseless TDOA of one pair for a source at `x`.
    pub fn tdoa(&self, x: &Point3, pair: PairIndex) -> f64 {
        (x - self.positions[pair.j]).norm() - (x - self.positions[pair.i]).norm()
    }

    /// The array with sensor `a` moved to index `perm[a]`.
    pub fn relabeled(&self, perm: &[usize]) -> Result<Self> {
        let mut positions = vec![Point3::zeros(); self.len()];
        for (a, &to) in perm.iter().enumerate() {
            positions[to] = self.positions[a];
        }
        Self::new(positions)
    }

    pub fn scaled(&self, s: f64) -> Result<Self> {
        Self::new(self.positions.iter().map(|p| p * s).collect())
    }
}

/// Canonical sensor pair `(j, i)` with `j > i`.
///
/// Ordering is `j`-major, which reproduces the TDOA-vector layout
/// `(τ10, τ20, τ21, τ30, …, τ_{n,n−1})`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PairIndex {
    pub j: usize,
    pub i: usize,
}

impl PairIndex {
    pub fn new(j: usize, i: usize) -> Result<Self> {
        if j > i {
            Ok(Self { j, i })
        } else {
            Err(Error::NonCanonicalPair { j, i })
        }
    }

    /// Canonical storage pair for the oriented TDOA `τ_ab`, with the sign
    /// mapping the stored value onto it.
    pub fn oriented(a: usize, b: usize) -> Result<(Self, f64)> {
        match a.cmp(&b) {
            std::cmp::Ordering::Greater => Ok((Self { j: a, i: b }, 1.0)),
            std::cmp::Ordering::Less => Ok((Self { j: b, i: a }, -1.0)),
            std::cmp::Ordering::Equal => Err(Error::NonCanonicalPair { j: a, i: b }),
        }
    }

    /// Position of the pair in the canonical enumeration.
    pub fn linear_index(&self) -> usize {
        self.j * (self.j - 1) / 2 + self.i
    }

    pub fn from_linear_index(index: usize) -> Self {
        let mut j = 1;
        while (j + 1) * j / 2 <= index {
            j += 1;
        }
        Self {
            j,
            i: index - j * (j - 1) / 2,
        }
    }

    pub fn enumerate(sensors: usize) -> impl Iterator<Item = PairIndex> {
        (1..sensors).flat_map(|j| (0..j).map(move |i| PairIndex { j, i }))
    }

    pub fn touches(&self, sensor: usize) -> bool {
        self.j == sensor || self.i == sensor
    }

    /// The pair after relabeling every sensor `a` as `perm[a]`, with the sign
    /// picked up if the orientation flips.
    pub fn relabeled(&self, perm: &[usize]) -> (Self, f64) {
        Self::oriented(perm[self.j], perm[self.i]).expect("permutation keeps sensors distinct")
    }
}

impl fmt::Display for PairIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.j, self.i)
    }
}

/// Sparse set of measured range differences keyed by canonical pair.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TdoaSet {
    entries: BTreeMap<PairIndex, f64>,
}

impl TdoaSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, pair: PairIndex, value: f64) -> Option<f64> {
        self.entries.insert(pair, value)
    }

    pub fn remove(&mut self, pair: PairIndex) -> Option<f64> {
        self.entries.remove(&pair)
    }

    pub fn get(&self, pair: PairIndex) -> Option<f64> {
        self.entries.get(&pair).copied()
    }

    /// Signed accessor: `τ_ab`, reading the stored `τ_ba` negated when `a < b`.
    pub fn get_oriented(&self, a: usize, b: usize) -> Option<f64> {
        let (pair, sign) = PairIndex::oriented(a, b).ok()?;
        self.get(pair).map(|v| sign * v)
    }

    pub fn contains(&self, pair: PairIndex) -> bool {
        self.entries.contains_key(&pair)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (PairIndex, f64)> + '_ {
        self.entries.iter().map(|(p, v)| (*p, *v))
    }

    pub fn pairs(&self) -> impl Iterator<Item = PairIndex> + '_ {
        self.entries.keys().copied()
    }

    /// Apply a sensor relabeling, flipping signs where orientation changes.
    pub fn relabeled(&self, perm: &[usize]) -> Self {
        self.iter()
            .map(|(p, v)| {
                let (q, s) = p.relabeled(perm);
                (q, s * v)
            })
            .collect()
    }
}

impl FromIterator<(PairIndex, f64)> for TdoaSet {
    fn from_iter<T: IntoIterator<Item = (PairIndex, f64)>>(iter: T) -> Self {
        Self {
            entries: iter.into_iter().collect(),
        }
    }
}

/// The complete TDOA vector of a source at `x`.
pub fn tdoa_map(x: &Point3, array: &SensorArray) -> TdoaSet {
    let ranges: Vec<f64> = array.positions().iter().map(|m| (x - m).norm()).collect();
    array
        .pairs()
        .map(|p| (p, ranges[p.j] - ranges[p.i]))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Feasible interval `[−d_ji, d_ji]` of a single TDOA.
pub fn theta1_interval(pair: PairIndex, array: &SensorArray) -> Result<Interval> {
    array.check_pair(pair)?;
    let d = array.distance(pair.j, pair.i);
    Ok(Interval { lo: -d, hi: d })
}

/// One member of a group: the stored pair and the sign that maps its stored
/// value onto the group's oriented component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupMember {
    pub pair: PairIndex,
    pub sign: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TripleGroupKind {
    /// Two TDOAs `(τ_ji, τ_ki)` sharing sensor `shared`; `j < k`.
    SharedPair { shared: usize, j: usize, k: usize },
    /// Three TDOAs `(τ_ji, τ_ki, τ_kj)` over the sorted triple `i < j < k`.
    Triple { i: usize, j: usize, k: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripleGroup {
    pub kind: TripleGroupKind,
    pub members: Vec<GroupMember>,
}

impl TripleGroup {
    pub fn shared_pair(shared: usize, j: usize, k: usize) -> Result<Self> {
        if shared == j || shared == k || j == k {
            return Err(Error::RepeatedSensor(shared, j, k));
        }
        let (j, k) = if j < k { (j, k) } else { (k, j) };
        let members = [(j, shared), (k, shared)]
            .iter()
            .map(|&(a, b)| PairIndex::oriented(a, b).map(|(pair, sign)| GroupMember { pair, sign }))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            kind: TripleGroupKind::SharedPair { shared, j, k },
            members,
        })
    }

    pub fn triple(a: usize, b: usize, c: usize) -> Result<Self> {
        let mut s = [a, b, c];
        s.sort_unstable();
        let [i, j, k] = s;
        if i == j || j == k {
            return Err(Error::RepeatedSensor(a, b, c));
        }
        let members = vec![
            GroupMember {
                pair: PairIndex { j, i },
                sign: 1.0,
            },
            GroupMember {
                pair: PairIndex { j: k, i },
                sign: 1.0,
            },
            GroupMember {
                pair: PairIndex { j: k, i: j },
                sign: 1.0,
            },
        ];
        Ok(Self {
            kind: TripleGroupKind::Triple { i, j, k },
            members,
        })
    }

    pub fn contains(&self, pair: PairIndex) -> bool {
        self.members.iter().any(|m| m.pair == pair)
    }

    /// Oriented components read from `set`, or `None` if a member is absent.
    pub fn oriented_values(&self, set: &TdoaSet) -> Option<Vec<f64>> {
        self.members
            .iter()
            .map(|m| set.get(m.pair).map(|v| m.sign * v))
            .collect()
    }

    pub fn sensors(&self) -> [usize; 3] {
        match self.kind {
            TripleGroupKind::SharedPair { shared, j, k } => [shared, j, k],
            TripleGroupKind::Triple { i, j, k } => [i, j, k],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Alignment {
    General,
    /// Shared sensor lies between the other two.
    AlignedSharedBetween,
    /// Sensors aligned, shared sensor at one end.
    AlignedSharedOutside,
}

impl Alignment {
    pub fn is_aligned(&self) -> bool {
        !matches!(self, Alignment::General)
    }
}

/// Half-plane `normal · τ ≤ offset` in the reduced `(τ_ji, τ_ki)` plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HalfPlane {
    pub normal: Vector2<f64>,
    pub offset: f64,
}

impl HalfPlane {
    /// Signed violation; positive outside.
    pub fn excess(&self, tau: &Vector2<f64>) -> f64 {
        self.normal.dot(tau) - self.offset
    }

    /// Mahalanobis distance from `tau` to the boundary line.
    pub fn line_distance(&self, tau: &Vector2<f64>, cov: &Matrix2<f64>) -> f64 {
        self.excess(tau).abs() / sigma_norm2(&self.normal, cov)
    }
}

/// Planar geometry of a sensor triple seen from a shared sensor `i`, with
/// `j` and `k` playing the roles of sensors 1 and 2 in the reduced map
/// `τ⁰ = (τ_ji, τ_ki)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanarTripleGeometry {
    pub shared: usize,
    pub j: usize,
    pub k: usize,
    pub alignment: Alignment,
    pub d_ji: f64,
    pub d_ki: f64,
    pub d_kj: f64,
    /// `det(d_ji, d_ki, e3)` in a counterclockwise in-plane frame (≥ 0).
    pub area_det: f64,
    /// Displacements `m_j − m_i` and `m_k − m_i` in the in-plane frame.
    pub disp_j: Vector2<f64>,
    pub disp_k: Vector2<f64>,
    /// TDOA pairs of a source placed at `m_i`, `m_j`, `m_k`.
    pub vertices: [Vector2<f64>; 3],
}

/// Classify the triple `(i; j, k)` with `i` as the shared/reference sensor.
pub fn classify_triple(
    i: usize,
    j: usize,
    k: usize,
    array: &SensorArray,
    tol: f64,
) -> Result<PlanarTripleGeometry> {
    if i == j || i == k || j == k {
        return Err(Error::RepeatedSensor(i, j, k));
    }
    for s in [i, j, k] {
        if s >= array.len() {
            return Err(Error::UnknownSensor {
                j: s,
                i,
                sensors: array.len(),
            });
        }
    }
    let d_ji = array.distance(j, i);
    let d_ki = array.distance(k, i);
    let d_kj = array.distance(k, j);

    let longest = d_ji.max(d_ki).max(d_kj);
    let slack = d_ji + d_ki + d_kj - 2.0 * longest;
    let alignment = if slack <= tol * longest {
        if d_kj >= d_ji && d_kj >= d_ki {
            Alignment::AlignedSharedBetween
        } else {
            Alignment::AlignedSharedOutside
        }
    } else {
        Alignment::General
    };

    let u = array.position(j) - array.position(i);
    let w = array.position(k) - array.position(i);
    let e1 = u / d_ji;
    let along = w.dot(&e1);
    let perp = (w - e1 * along).norm();
    let disp_j = Vector2::new(d_ji, 0.0);
    let disp_k = Vector2::new(along, perp);
    let area_det = d_ji * perp;

    let vertices = [
        Vector2::new(d_ji, d_ki),
        Vector2::new(-d_ji, d_kj - d_ji),
        Vector2::new(d_kj - d_ki, -d_ki),
    ];

    Ok(PlanarTripleGeometry {
        shared: i,
        j,
        k,
        alignment,
        d_ji,
        d_ki,
        d_kj,
        area_det,
        disp_j,
        disp_k,
        vertices,
    })
}

impl PlanarTripleGeometry {
    /// `c^{s1 s2 s3} = s1·d_ji + s2·d_ki + s3·d_kj` with `s ∈ {+1, −1}`.
    pub fn c(&self, s1: f64, s2: f64, s3: f64) -> f64 {
        s1 * self.d_ji + s2 * self.d_ki + s3 * self.d_kj
    }

    pub fn scale(&self) -> f64 {
        self.d_ji.max(self.d_ki).max(self.d_kj)
    }

    fn v(&self, tau: &Vector2<f64>) -> Vector2<f64> {
        // The fixed rotation does not change norms or inner products, so the
        // unrotated vector is used throughout.
        self.disp_j * tau[1] - self.disp_k * tau[0]
    }

    /// Ellipse polynomial `a(τ⁰) = ‖v‖² − W²`; negative inside.
    pub fn ellipse(&self, tau: &Vector2<f64>) -> f64 {
        self.v(tau).norm_squared() - self.area_det * self.area_det
    }

    /// Cubic polynomial `b(τ⁰) = ⟨v, l₀⟩`. Only defined for general triples.
    pub fn cubic(&self, tau: &Vector2<f64>) -> Option<f64> {
        if self.alignment.is_aligned() || self.area_det <= 0.0 {
            return None;
        }
        let l0 = (self.disp_j * (self.d_ki * self.d_ki - tau[1] * tau[1])
            - self.disp_k * (self.d_ji * self.d_ji - tau[0] * tau[0]))
            / (2.0 * self.area_det);
        Some(self.v(tau).dot(&l0))
    }

    /// The six triangle inequalities bounding the hexagon, with slack `eps`.
    pub fn hexagon_contains(&self, tau: &Vector2<f64>, eps: f64) -> bool {
        tau[0].abs() <= self.d_ji + eps
            && tau[1].abs() <= self.d_ki + eps
            && (tau[1] - tau[0]).abs() <= self.d_kj + eps
    }

    /// Half-planes whose intersection is the closed triangle of an aligned
    /// triple, in the order `l_ji`, `l_ki`, `l_kj`.
    pub fn triangle_half_planes(&self) -> [HalfPlane; 3] {
        let c_mmp = self.c(-1.0, -1.0, 1.0);
        [
            HalfPlane {
                normal: Vector2::new(c_mmp, 2.0 * self.d_ji),
                offset: self.d_ji * self.c(-1.0, 1.0, 1.0),
            },
            HalfPlane {
                normal: Vector2::new(2.0 * self.d_ki, c_mmp),
                offset: self.d_ki * self.c(1.0, -1.0, 1.0),
            },
            HalfPlane {
                normal: Vector2::new(self.c(1.0, -1.0, -1.0), self.c(-1.0, 1.0, -1.0)),
                offset: self.d_kj * self.c(1.0, 1.0, -1.0),
            },
        ]
    }

    fn matches(&self, group: &TripleGroup) -> bool {
        match group.kind {
            TripleGroupKind::SharedPair { shared, j, k } => {
                shared == self.shared
                    && ((j == self.j && k == self.k) || (j == self.k && k == self.j))
            }
            TripleGroupKind::Triple { .. } => false,
        }
    }
}

/// Exact membership of the reduced pair `(τ_ji, τ_ki)` in the feasible set of
/// the shared-sensor group, using closed sets with a relative tolerance.
pub fn theta2_membership(
    group: &TripleGroup,
    tau: &Vector2<f64>,
    geom: &PlanarTripleGeometry,
) -> Result<bool> {
    if !geom.matches(group) {
        return Err(Error::GeometryMismatch(format!(
            "group {:?} vs geometry ({}; {}, {})",
            group.kind, geom.shared, geom.j, geom.k
        )));
    }
    Ok(reduced_pair_feasible(tau, geom))
}

/// Membership without the group consistency check; `tau` must be oriented as
/// `(τ_{geom.j, i}, τ_{geom.k, i})`.
pub fn reduced_pair_feasible(tau: &Vector2<f64>, geom: &PlanarTripleGeometry) -> bool {
    let s = geom.scale();
    let eps = MEMBERSHIP_TOL * s;
    if (tau - geom.vertices[0]).norm() <= eps {
        return true;
    }
    match geom.alignment {
        Alignment::General => {
            if geom.ellipse(tau) <= MEMBERSHIP_TOL * s.powi(4) {
                return true;
            }
            let b = geom.cubic(tau).expect("general geometry");
            b >= -MEMBERSHIP_TOL * s.powi(3) && geom.hexagon_contains(tau, eps)
        }
        _ => geom
            .triangle_half_planes()
            .iter()
            .all(|h| h.excess(tau) <= MEMBERSHIP_TOL * s * s),
    }
}

/// `‖v‖_Σ = √(vᵀ Σ v)` for a 2-vector.
fn sigma_norm2(v: &Vector2<f64>, cov: &Matrix2<f64>) -> f64 {
    (v[0] * v[0] * cov[(0, 0)] + v[1] * v[1] * cov[(1, 1)] + 2.0 * v[0] * v[1] * cov[(0, 1)]).sqrt()
}

pub(crate) fn check_pd2(cov: &Matrix2<f64>) -> Result<()> {
    let sym = (cov[(0, 1)] - cov[(1, 0)]).abs() <= 1e-12 * (cov[(0, 0)].abs() + cov[(1, 1)].abs());
    let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
    if sym && cov[(0, 0)] > 0.0 && det > 0.0 && cov.iter().all(|c| c.is_finite()) {
        Ok(())
    } else {
        Err(Error::NotPositiveDefinite(format!("{cov:?}")))
    }
}

pub(crate) fn check_pd3(cov: &Matrix3<f64>) -> Result<()> {
    let sym = (cov - cov.transpose()).abs().max() <= 1e-12 * cov.abs().max();
    if sym && cov.iter().all(|c| c.is_finite()) && cov.cholesky().is_some() {
        Ok(())
    } else {
        Err(Error::NotPositiveDefinite(format!("{cov:?}")))
    }
}

/// Mahalanobis distance to the strip `|τ_ki − τ_ji| ≤ d_kj` (general triples).
pub fn strip_distance_general(
    tau: &Vector2<f64>,
    geom: &PlanarTripleGeometry,
    cov: &Matrix2<f64>,
) -> Result<f64> {
    if geom.alignment != Alignment::General {
        return Err(Error::GeometryMismatch(
            "strip distance requires a general triple".into(),
        ));
    }
    check_pd2(cov)?;
    let diff = tau[1] - tau[0];
    if diff.abs() <= geom.d_kj {
        return Ok(0.0);
    }
    let excess = diff.abs() - geom.d_kj;
    let norm = ((cov[(0, 0)] + cov[(1, 1)]) - 2.0 * cov[(0, 1)]).sqrt();
    Ok(excess / norm)
}

/// Simplified distance for aligned triples, assuming `tau` already passed the
/// single-TDOA test.
pub fn aligned_distance(
    tau: &Vector2<f64>,
    geom: &PlanarTripleGeometry,
    cov: &Matrix2<f64>,
) -> Result<f64> {
    check_pd2(cov)?;
    let [l_ji, l_ki, l_kj] = geom.triangle_half_planes();
    match geom.alignment {
        Alignment::General => Err(Error::GeometryMismatch(
            "aligned distance requires an aligned triple".into(),
        )),
        Alignment::AlignedSharedBetween => {
            if l_kj.excess(tau) <= 0.0 {
                Ok(0.0)
            } else {
                Ok(l_kj.line_distance(tau, cov))
            }
        }
        Alignment::AlignedSharedOutside => {
            let first = l_ji.excess(tau) <= 0.0;
            let second = l_ki.excess(tau) <= 0.0;
            match (first, second) {
                (true, false) => Ok(l_ki.line_distance(tau, cov)),
                (false, true) => Ok(l_ji.line_distance(tau, cov)),
                _ => Ok(0.0),
            }
        }
    }
}

/// Simplified distance `f` for any shared-sensor geometry.
pub fn simplified_distance(
    tau: &Vector2<f64>,
    geom: &PlanarTripleGeometry,
    cov: &Matrix2<f64>,
) -> Result<f64> {
    match geom.alignment {
        Alignment::General => strip_distance_general(tau, geom, cov),
        _ => aligned_distance(tau, geom, cov),
    }
}

/// Mahalanobis distance from an oriented triple `(τ_ji, τ_ki, τ_kj)` to the
/// zero-sum plane `τ_ji − τ_ki + τ_kj = 0`.
pub fn zsc_plane_distance(tau: &Vector3<f64>, cov: &Matrix3<f64>) -> Result<f64> {
    check_pd3(cov)?;
    let n = Vector3::new(1.0, -1.0, 1.0);
    let residual = tau[0] - tau[1] + tau[2];
    let norm = (n.transpose() * cov * n)[(0, 0)].sqrt();
    Ok(residual.abs() / norm)
}

/// Singular values below this fraction of the largest count as zero.
pub const RANK_ZERO_TOL: f64 = 1e-8;
/// Guard band of relative singular values in which rank is ambiguous.
pub const RANK_GUARD_BAND: (f64, f64) = (1e-10, 1e-6);

/// Dimension of the space of linear relations among the complete TDOAs,
/// estimated as `q − rank` of a matrix of sampled TDOA vectors.
pub fn relation_space_dimension(
    array: &SensorArray,
    num_sources: usize,
    seed: u64,
) -> Result<usize> {
    let q = array.num_pairs();
    if num_sources == 0 {
        return Err(Error::Empty("no sources to sample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = array.centroid();
    let radius = 2.0 * array.aperture();
    let mut data = nalgebra::DMatrix::<f64>::zeros(num_sources, q);
    for row in 0..num_sources {
        let x = loop {
            let p = Point3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            if p.norm_squared() <= 1.0 {
                break center + p * radius;
            }
        };
        for (col, (_, v)) in tdoa_map(&x, array).iter().enumerate() {
            data[(row, col)] = v;
        }
    }
    let sv = data.singular_values();
    let max = sv.max();
    let mut rank = 0;
    for s in sv.iter() {
        let ratio = s / max;
        if ratio > RANK_GUARD_BAND.0 && ratio < RANK_GUARD_BAND.1 {
            return Err(Error::RankAmbiguous { ratio });
        }
        if ratio >= RANK_ZERO_TOL {
            rank += 1;
        }
    }
    Ok(q - rank)
}
