//! Iterative outlier identification and removal.
//!
//! After the single-TDOA pre-processing, each stage builds the table of
//! groups (pairs sharing a sensor, or sensor triples), computes every group's
//! p-value once, and then repeatedly
//!
//! 1. BH-adjusts, per TDOA, the p-values of the groups still containing it,
//! 2. stops if every minimum adjusted p-value exceeds α,
//! 3. otherwise removes the TDOA(s) with the largest Fisher statistic and
//!    drops every group that contained them.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    classify_triple, simplified_distance, tdoa_map, zsc_plane_distance, PairIndex, Point3,
    SensorArray, TdoaSet, TripleGroup, TripleGroupKind, DEFAULT_ALIGNMENT_TOL,
};
use crate::stattests::{
    bh_min, fisher_combine, g1_test, g2_pvalue, g3_pvalue, CovarianceModel, DEFAULT_PVALUE_FLOOR,
};

/// Group size of a testing stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum GroupSize {
    /// Pairs of TDOAs sharing a sensor.
    G2,
    /// Triples of TDOAs over a loop of three sensors.
    G3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Mode {
    G2,
    G3,
    G2ThenG3,
    G3ThenG2,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::G2, Mode::G3, Mode::G2ThenG3, Mode::G3ThenG2];

    pub fn stages(&self) -> &'static [GroupSize] {
        match self {
            Mode::G2 => &[GroupSize::G2],
            Mode::G3 => &[GroupSize::G3],
            Mode::G2ThenG3 => &[GroupSize::G2, GroupSize::G3],
            Mode::G3ThenG2 => &[GroupSize::G3, GroupSize::G2],
        }
    }

    /// Short name used on the command line and in CSV output.
    pub fn name(&self) -> &'static str {
        match self {
            Mode::G2 => "g2",
            Mode::G3 => "g3",
            Mode::G2ThenG3 => "g2g3",
            Mode::G3ThenG2 => "g3g2",
        }
    }

    pub fn uses_triples(&self) -> bool {
        self.stages().contains(&GroupSize::G3)
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "g2" => Ok(Mode::G2),
            "g3" => Ok(Mode::G3),
            "g2g3" | "g2+g3" => Ok(Mode::G2ThenG3),
            "g3g2" | "g3+g2" => Ok(Mode::G3ThenG2),
            other => Err(Error::InvalidConfig(format!("unknown mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Optional per-stage significance levels overriding the shared α.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageAlphas {
    pub g1: Option<f64>,
    pub g2: Option<f64>,
    pub g3: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemovalConfig {
    pub alpha: f64,
    pub mode: Mode,
    pub covariance: CovarianceModel,
    pub stage_alphas: StageAlphas,
    pub alignment_tol: f64,
    pub pvalue_floor: f64,
}

impl RemovalConfig {
    pub fn new(mode: Mode, covariance: CovarianceModel) -> Self {
        Self {
            alpha: 0.05,
            mode,
            covariance,
            stage_alphas: StageAlphas::default(),
            alignment_tol: DEFAULT_ALIGNMENT_TOL,
            pvalue_floor: DEFAULT_PVALUE_FLOOR,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let alphas = [
            Some(self.alpha),
            self.stage_alphas.g1,
            self.stage_alphas.g2,
            self.stage_alphas.g3,
        ];
        for a in alphas.into_iter().flatten() {
            if !(a > 0.0 && a < 0.5) {
                return Err(Error::InvalidConfig(format!(
                    "significance level {a} outside (0, 0.5)"
                )));
            }
        }
        if !(self.alignment_tol >= 0.0) {
            return Err(Error::InvalidConfig(
                "alignment tolerance must be >= 0".into(),
            ));
        }
        if !(self.pvalue_floor > 0.0 && self.pvalue_floor < 1.0) {
            return Err(Error::InvalidConfig(
                "p-value floor must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }

    fn g1_alpha(&self) -> f64 {
        self.stage_alphas.g1.unwrap_or(self.alpha)
    }

    fn stage_alpha(&self, size: GroupSize) -> f64 {
        match size {
            GroupSize::G2 => self.stage_alphas.g2,
            GroupSize::G3 => self.stage_alphas.g3,
        }
        .unwrap_or(self.alpha)
    }
}

/// Single-TDOA pre-processing: drop every TDOA outside its acceptance
/// interval.
pub fn preprocess_g1(
    set: &TdoaSet,
    array: &SensorArray,
    cov: &CovarianceModel,
    alpha: f64,
) -> Result<(TdoaSet, Vec<(PairIndex, f64)>)> {
    let mut kept = TdoaSet::new();
    let mut removed = Vec::new();
    for (pair, value) in set.iter() {
        array.check_pair(pair)?;
        let sigma = cov.sigma(pair)?;
        let test = g1_test(value, array.distance(pair.j, pair.i), sigma, alpha)?;
        if test.acceptance.contains(value) {
            kept.insert(pair, value);
        } else {
            removed.push((pair, value));
        }
    }
    Ok((kept, removed))
}

/// A group with its oriented measurements and its (fixed) test result.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupEntry {
    pub group: TripleGroup,
    pub values: Vec<f64>,
    pub distance: f64,
    pub pvalue: f64,
}

/// Work counters for complexity measurements.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkCounters {
    /// Calls to the iteration body, including the final stop check.
    pub outer_iterations: usize,
    /// Group p-values read while building per-TDOA statistics.
    pub group_evaluations: usize,
    /// Groups whose distance and p-value were computed.
    pub groups_built: usize,
}

impl std::ops::AddAssign for WorkCounters {
    fn add_assign(&mut self, o: Self) {
        self.outer_iterations += o.outer_iterations;
        self.group_evaluations += o.group_evaluations;
        self.groups_built += o.groups_built;
    }
}

/// Groups of one stage plus the per-TDOA index of the groups containing it.
#[derive(Debug, Clone)]
pub struct GroupTable {
    pub size: GroupSize,
    entries: Vec<GroupEntry>,
    active: Vec<bool>,
    by_pair: BTreeMap<PairIndex, Vec<usize>>,
    pub counters: WorkCounters,
}

/// Build every group of the requested size whose members are all present.
pub fn build_groups(
    size: GroupSize,
    set: &TdoaSet,
    array: &SensorArray,
    cov: &CovarianceModel,
    alignment_tol: f64,
) -> Result<GroupTable> {
    let count = array.len();
    for pair in set.pairs() {
        array.check_pair(pair)?;
    }
    let mut groups = Vec::new();
    match size {
        GroupSize::G2 => {
            for shared in 0..count {
                for j in 0..count {
                    for k in (j + 1)..count {
                        if j != shared && k != shared {
                            groups.push(TripleGroup::shared_pair(shared, j, k)?);
                        }
                    }
                }
            }
        }
        GroupSize::G3 => {
            for i in 0..count {
                for j in (i + 1)..count {
                    for k in (j + 1)..count {
                        groups.push(TripleGroup::triple(i, j, k)?);
                    }
                }
            }
        }
    }

    let mut entries = Vec::new();
    let mut by_pair: BTreeMap<PairIndex, Vec<usize>> =
        set.pairs().map(|p| (p, Vec::new())).collect();
    for group in groups {
        let Some(values) = group.oriented_values(set) else {
            continue;
        };
        let block = cov.group_block(&group.members)?;
        let (distance, pvalue) = match group.kind {
            TripleGroupKind::SharedPair { shared, j, k } => {
                let geom = classify_triple(shared, j, k, array, alignment_tol)?;
                let tau = Vector2::new(values[0], values[1]);
                let cov2 = Matrix2::from_iterator(block.iter().copied());
                let f = simplified_distance(&tau, &geom, &cov2)?;
                (f, g2_pvalue(f)?)
            }
            TripleGroupKind::Triple { .. } => {
                let tau = Vector3::new(values[0], values[1], values[2]);
                let cov3 = Matrix3::from_iterator(block.iter().copied());
                let d = zsc_plane_distance(&tau, &cov3)?;
                (d, g3_pvalue(d)?)
            }
        };
        let idx = entries.len();
        for m in &group.members {
            by_pair.get_mut(&m.pair).expect("member present").push(idx);
        }
        entries.push(GroupEntry {
            group,
            values,
            distance,
            pvalue,
        });
    }
    let groups_built = entries.len();
    Ok(GroupTable {
        size,
        active: vec![true; entries.len()],
        entries,
        by_pair,
        counters: WorkCounters {
            groups_built,
            ..WorkCounters::default()
        },
    })
}

/// Per-TDOA statistics of one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairStatistics {
    /// Minimum BH-adjusted p-value over the groups containing the TDOA.
    pub min_adjusted: f64,
    /// Standardized Fisher combination of the raw group p-values.
    pub fisher: f64,
    pub groups: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Decision {
    Stop,
    Remove(Vec<PairIndex>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationOutcome {
    pub decision: Decision,
    pub stats: BTreeMap<PairIndex, PairStatistics>,
    /// Remaining TDOAs with no group left to test them.
    pub untestable: Vec<PairIndex>,
    pub floored: usize,
}

impl GroupTable {
    pub fn entries(&self) -> impl Iterator<Item = &GroupEntry> {
        self.entries
            .iter()
            .zip(&self.active)
            .filter_map(|(e, a)| a.then_some(e))
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|a| **a).count()
    }

    /// TDOAs still under test.
    pub fn remaining(&self) -> impl Iterator<Item = PairIndex> + '_ {
        self.by_pair.keys().copied()
    }

    fn active_of(&self, pair: PairIndex) -> impl Iterator<Item = &GroupEntry> {
        self.by_pair
            .get(&pair)
            .into_iter()
            .flatten()
            .filter(|&&g| self.active[g])
            .map(|&g| &self.entries[g])
    }

    /// Raw p-values of the active groups containing `pair`.
    pub fn pvalues_of(&self, pair: PairIndex) -> Vec<f64> {
        self.active_of(pair).map(|e| e.pvalue).collect()
    }

    /// One pass of the multiple test and, if it fires, the combined test.
    pub fn iterate_once(&mut self, alpha: f64, floor: f64) -> Result<IterationOutcome> {
        self.counters.outer_iterations += 1;
        let mut stats = BTreeMap::new();
        let mut untestable = Vec::new();
        let mut floored = 0;
        let pairs: Vec<PairIndex> = self.remaining().collect();
        for pair in pairs {
            let pvalues = self.pvalues_of(pair);
            if pvalues.is_empty() {
                untestable.push(pair);
                continue;
            }
            self.counters.group_evaluations += pvalues.len();
            let min_adjusted = bh_min(&pvalues)?;
            let fisher = fisher_combine(&pvalues, floor)?;
            floored += fisher.floored;
            stats.insert(
                pair,
                PairStatistics {
                    min_adjusted,
                    fisher: fisher.value,
                    groups: pvalues.len(),
                },
            );
        }

        let detected = stats.values().any(|s| s.min_adjusted <= alpha);
        let decision = if !detected {
            Decision::Stop
        } else {
            let best = stats
                .values()
                .map(|s| s.fisher)
                .fold(f64::NEG_INFINITY, f64::max);
            Decision::Remove(
                stats
                    .iter()
                    .filter(|(_, s)| s.fisher == best)
                    .map(|(p, _)| *p)
                    .collect(),
            )
        };
        Ok(IterationOutcome {
            decision,
            stats,
            untestable,
            floored,
        })
    }

    /// Drop a TDOA and every group containing it.
    pub fn remove_pair(&mut self, pair: PairIndex) {
        if let Some(ids) = self.by_pair.remove(&pair) {
            for g in ids {
                self.active[g] = false;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub stage: GroupSize,
    pub stats: BTreeMap<PairIndex, PairStatistics>,
    /// Empty for the final stop check of a stage.
    pub removed: Vec<PairIndex>,
}

/// A TDOA removed by the iterative stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RemovedTdoa {
    pub pair: PairIndex,
    pub value: f64,
    pub stage: GroupSize,
    /// Index into [`RemovalReport::iterations`].
    pub iteration: usize,
    pub min_adjusted: f64,
    pub fisher: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemovalReport {
    pub preprocessed_out: Vec<(PairIndex, f64)>,
    pub iterations: Vec<IterationRecord>,
    pub survivors: TdoaSet,
    pub untestable: Vec<PairIndex>,
    /// Zero p-values raised to the floor over the whole run.
    pub floored_pvalues: usize,
    pub counters: WorkCounters,
    input: TdoaSet,
}

impl RemovalReport {
    /// Every TDOA removed by the iterative stages, in removal order.
    pub fn removed(&self) -> Vec<RemovedTdoa> {
        let mut out = Vec::new();
        for (iteration, rec) in self.iterations.iter().enumerate() {
            for &pair in &rec.removed {
                let s = rec.stats[&pair];
                out.push(RemovedTdoa {
                    pair,
                    value: self.input.get(pair).expect("removed pair came from input"),
                    stage: rec.stage,
                    iteration,
                    min_adjusted: s.min_adjusted,
                    fisher: s.fisher,
                });
            }
        }
        out
    }

    /// All pairs discarded by any step, pre-processing included.
    pub fn discarded(&self) -> BTreeSet<PairIndex> {
        self.preprocessed_out
            .iter()
            .map(|(p, _)| *p)
            .chain(
                self.iterations
                    .iter()
                    .flat_map(|r| r.removed.iter().copied()),
            )
            .collect()
    }

    pub fn input(&self) -> &TdoaSet {
        &self.input
    }
}

/// Run pre-processing followed by the stages of `config.mode`.
pub fn remove_outliers(
    set: &TdoaSet,
    array: &SensorArray,
    config: &RemovalConfig,
) -> Result<RemovalReport> {
    config.validate()?;
    if set.is_empty() {
        return Err(Error::Empty("measurement set"));
    }
    let (mut survivors, preprocessed_out) =
        preprocess_g1(set, array, &config.covariance, config.g1_alpha())?;

    let mut iterations = Vec::new();
    let mut untestable = BTreeSet::new();
    let mut floored_pvalues = 0;
    let mut counters = WorkCounters::default();

    for &stage in config.mode.stages() {
        let alpha = config.stage_alpha(stage);
        let mut table = build_groups(
            stage,
            &survivors,
            array,
            &config.covariance,
            config.alignment_tol,
        )?;
        loop {
            let outcome = table.iterate_once(alpha, config.pvalue_floor)?;
            floored_pvalues += outcome.floored;
            match outcome.decision {
                Decision::Stop => {
                    untestable.extend(outcome.untestable);
                    iterations.push(IterationRecord {
                        stage,
                        stats: outcome.stats,
                        removed: Vec::new(),
                    });
                    break;
                }
                Decision::Remove(pairs) => {
                    for &p in &pairs {
                        table.remove_pair(p);
                        survivors.remove(p);
                    }
                    iterations.push(IterationRecord {
                        stage,
                        stats: outcome.stats,
                        removed: pairs,
                    });
                }
            }
        }
        counters += table.counters;
    }
    let untestable = untestable
        .into_iter()
        .filter(|p| survivors.contains(*p))
        .collect();

    Ok(RemovalReport {
        preprocessed_out,
        iterations,
        survivors,
        untestable,
        floored_pvalues,
        counters,
        input: set.clone(),
    })
}

/// Counters of an instrumented run on a synthetic array of `n + 1` sensors
/// with `outliers` gross outliers and vanishing noise.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexityProbe {
    pub sensors: usize,
    pub outliers: usize,
    pub mode: Mode,
    pub counters: WorkCounters,
    /// Outer iterations that removed something.
    pub removal_iterations: usize,
    pub removed_all_outliers: bool,
}

pub fn complexity_probe(
    n: usize,
    outliers: usize,
    mode: Mode,
    seed: u64,
) -> Result<ComplexityProbe> {
    let sensors = n + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positions: Vec<Point3> = (0..sensors)
        .map(|_| {
            Point3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            )
        })
        .collect();
    let array = SensorArray::new(positions)?;
    let source = Point3::new(1.5, 0.7, -0.4);
    let mut set = tdoa_map(&source, &array);
    let q = set.len();
    if outliers > q {
        return Err(Error::InvalidConfig(format!(
            "{outliers} outliers exceed {q} pairs"
        )));
    }
    let chosen = rand::seq::index::sample(&mut rng, q, outliers);
    let mut truth = BTreeSet::new();
    for idx in chosen.iter() {
        let pair = PairIndex::from_linear_index(idx);
        let d = array.distance(pair.j, pair.i);
        let v = set.get(pair).expect("complete set");
        // Half an interval away from the truth, still inside [−d, d].
        let shifted = if v > 0.0 { v - 0.5 * d } else { v + 0.5 * d };
        set.insert(pair, shifted);
        truth.insert(pair);
    }
    let config = RemovalConfig::new(mode, CovarianceModel::isotropic(1e-6)?);
    let report = remove_outliers(&set, &array, &config)?;
    let removal_iterations = report
        .iterations
        .iter()
        .filter(|r| !r.removed.is_empty())
        .count();
    let discarded = report.discarded();
    Ok(ComplexityProbe {
        sensors,
        outliers,
        mode,
        counters: report.counters,
        removal_iterations,
        removed_all_outliers: truth.is_subset(&discarded),
    })
}
