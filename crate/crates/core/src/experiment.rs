//! Bohm–Aharonov style two-post experiments.
//!
//! Each trial picks one mark at each post, measures a particle pair along
//! the hidden orientations of those marks, and records only the two mark
//! ids and whether the detectors agreed (`S`) or not (`N`).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{sample_uniform_direction, RandomStream, UnitVec};
use crate::hidden::{tetra_sample, HiddenError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("post on the {side} side has no marks")]
    EmptyPost { side: Side },
    #[error("duplicate mark id `{id}` on the {side} side")]
    DuplicateMark { side: Side, id: String },
    #[error("unknown {side} mark `{id}`")]
    UnknownMark { side: Side, id: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Hidden(#[from] HiddenError),
    #[error("logbook csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("stats json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Left => "left",
            Side::Right => "right",
        })
    }
}

/// A labelled orientation on an instrument mounting. The orientation is
/// known to the simulator only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mark {
    pub id: String,
    pub orientation: UnitVec,
}

impl Mark {
    pub fn new(id: impl Into<String>, orientation: UnitVec) -> Self {
        Mark {
            id: id.into(),
            orientation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Post {
    side: Side,
    marks: Vec<Mark>,
}

impl Post {
    pub fn new(side: Side, marks: Vec<Mark>) -> Result<Self, ExperimentError> {
        if marks.is_empty() {
            return Err(ExperimentError::EmptyPost { side });
        }
        let mut seen = HashSet::new();
        for m in &marks {
            if !seen.insert(m.id.as_str()) {
                return Err(ExperimentError::DuplicateMark { side, id: m.id.clone() });
            }
        }
        Ok(Post { side, marks })
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn marks(&self) -> &[Mark] {
        &self.marks
    }

    pub fn ids(&self) -> Vec<String> {
        self.marks.iter().map(|m| m.id.clone()).collect()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.marks.iter().position(|m| m.id == id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    /// Both detectors gave the same result.
    S,
    /// The detectors disagreed.
    N,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Outcome::S => "S",
            Outcome::N => "N",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Spin {
    Up,
    Down,
}

impl Spin {
    /// Zero counts as up.
    pub fn from_sign(x: f64) -> Spin {
        if x >= 0.0 {
            Spin::Up
        } else {
            Spin::Down
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OutcomePair {
    pub a: Spin,
    pub b: Spin,
}

impl OutcomePair {
    pub fn outcome(&self) -> Outcome {
        if self.a == self.b {
            Outcome::S
        } else {
            Outcome::N
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    /// Samples the four joint outcomes from the quantum probabilities.
    #[default]
    Qm,
    /// A uniformly random hidden axis; each detector reports the sign of
    /// its projection.
    ClassicalVector,
    /// Hidden projections drawn from the tetrahedral delta distribution.
    Tetrahedron,
}

impl std::str::FromStr for Backend {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "qm" => Ok(Backend::Qm),
            "classical-vector" | "classical" => Ok(Backend::ClassicalVector),
            "tetrahedron" => Ok(Backend::Tetrahedron),
            other => Err(ExperimentError::InvalidArgument(format!(
                "unknown backend `{other}` (expected qm, classical-vector or tetrahedron)"
            ))),
        }
    }
}

/// Relation between the instrument angle and the agreement probability.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrelationLaw {
    /// `P(S) = sin²(θ/2)`: the pair carries anti-parallel spins.
    #[default]
    AntiParallel,
    /// `P(S) = cos²(θ/2)`.
    Parallel,
}

impl CorrelationLaw {
    /// The hidden correlation variable `z_ab` for instruments with cosine
    /// `cos_ab`.
    pub fn z_ab(self, cos_ab: f64) -> f64 {
        match self {
            CorrelationLaw::AntiParallel => -cos_ab,
            CorrelationLaw::Parallel => cos_ab,
        }
    }
}

impl std::str::FromStr for CorrelationLaw {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "anti-parallel" => Ok(CorrelationLaw::AntiParallel),
            "parallel" => Ok(CorrelationLaw::Parallel),
            other => Err(ExperimentError::InvalidArgument(format!(
                "unknown law `{other}` (expected anti-parallel or parallel)"
            ))),
        }
    }
}

/// A backend together with the correlation law it realizes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Measurement {
    pub backend: Backend,
    pub law: CorrelationLaw,
}

impl From<Backend> for Measurement {
    fn from(backend: Backend) -> Self {
        Measurement {
            backend,
            law: CorrelationLaw::default(),
        }
    }
}

/// Measures one particle pair with instruments along `a` (left) and `b`
/// (right).
pub fn run_pair(
    measurement: impl Into<Measurement>,
    a: &UnitVec,
    b: &UnitVec,
    rng: &mut RandomStream,
) -> Result<OutcomePair, ExperimentError> {
    let Measurement { backend, law } = measurement.into();
    let z_ab = law.z_ab(a.dot(b)).clamp(-1.0, 1.0);
    let pair = match backend {
        Backend::Qm => {
            let p_same = 0.5 * (1.0 + z_ab);
            let same = rng.uniform() < p_same;
            let a = if rng.coin() { Spin::Up } else { Spin::Down };
            let b = match (same, a) {
                (true, s) => s,
                (false, Spin::Up) => Spin::Down,
                (false, Spin::Down) => Spin::Up,
            };
            OutcomePair { a, b }
        }
        Backend::ClassicalVector => {
            let c = sample_uniform_direction(rng);
            let twin = match law {
                CorrelationLaw::AntiParallel => -b.dot(&c),
                CorrelationLaw::Parallel => b.dot(&c),
            };
            OutcomePair {
                a: Spin::from_sign(a.dot(&c)),
                b: Spin::from_sign(twin),
            }
        }
        Backend::Tetrahedron => {
            let (z_a, z_b) = tetra_sample(z_ab, rng)?;
            OutcomePair {
                a: Spin::from_sign(z_a),
                b: Spin::from_sign(z_b),
            }
        }
    };
    Ok(pair)
}

/// One logbook line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TripletRecord {
    pub left: Arc<str>,
    pub right: Arc<str>,
    pub outcome: Outcome,
}

/// How marks are chosen per trial.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    /// Independent uniform choice at each post.
    #[default]
    Uniform,
    /// Trial `i` uses left mark `i mod L` and right mark `(i / L) mod R`.
    Cyclic,
}

impl std::str::FromStr for Schedule {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(Schedule::Uniform),
            "cyclic" => Ok(Schedule::Cyclic),
            other => Err(ExperimentError::InvalidArgument(format!(
                "unknown schedule `{other}` (expected uniform or cyclic)"
            ))),
        }
    }
}

fn check_sides(left: &Post, right: &Post) -> Result<(), ExperimentError> {
    if left.side != Side::Left || right.side != Side::Right {
        return Err(ExperimentError::InvalidArgument(
            "posts must be given as (left, right)".into(),
        ));
    }
    Ok(())
}

/// Simulates `n_pairs` trials. Trial `i` draws from sub-stream `i` of the
/// seed, so the sequence does not depend on the rayon thread count.
pub fn generate_logbook(
    posts: (&Post, &Post),
    measurement: impl Into<Measurement>,
    n_pairs: usize,
    seed: u64,
    schedule: Schedule,
) -> Result<Vec<TripletRecord>, ExperimentError> {
    let (left, right) = posts;
    check_sides(left, right)?;
    if n_pairs == 0 {
        return Err(ExperimentError::InvalidArgument("n_pairs must be at least 1".into()));
    }
    let measurement = measurement.into();
    let root = RandomStream::new(seed);
    let left_ids: Vec<Arc<str>> = left.marks.iter().map(|m| Arc::from(m.id.as_str())).collect();
    let right_ids: Vec<Arc<str>> = right.marks.iter().map(|m| Arc::from(m.id.as_str())).collect();
    let (nl, nr) = (left.marks.len(), right.marks.len());
    (0..n_pairs)
        .into_par_iter()
        .map(|i| {
            let mut rng = root.split(i as u64);
            let (li, ri) = match schedule {
                Schedule::Uniform => (rng.index(nl), rng.index(nr)),
                Schedule::Cyclic => (i % nl, (i / nl) % nr),
            };
            let pair = run_pair(
                measurement,
                &left.marks[li].orientation,
                &right.marks[ri].orientation,
                &mut rng,
            )?;
            Ok(TripletRecord {
                left: left_ids[li].clone(),
                right: right_ids[ri].clone(),
                outcome: pair.outcome(),
            })
        })
        .collect()
}

/// Writes `left_mark,right_mark,outcome` rows with LF line endings.
pub fn write_logbook_csv<W: Write>(records: &[TripletRecord], out: W) -> Result<(), ExperimentError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(["left_mark", "right_mark", "outcome"])?;
    for r in records {
        w.write_record([&*r.left, &*r.right, if r.outcome == Outcome::S { "S" } else { "N" }])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_logbook_csv<R: Read>(input: R) -> Result<Vec<TripletRecord>, ExperimentError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["left_mark", "right_mark", "outcome"] {
        return Err(ExperimentError::InvalidArgument(format!(
            "unexpected logbook header {:?}",
            headers.iter().collect::<Vec<_>>()
        )));
    }
    let mut interned: HashMap<String, Arc<str>> = HashMap::new();
    let mut intern = |s: &str| -> Arc<str> { interned.entry(s.to_owned()).or_insert_with(|| Arc::from(s)).clone() };
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row?;
        let outcome = match &row[2] {
            "S" => Outcome::S,
            "N" => Outcome::N,
            other => {
                return Err(ExperimentError::InvalidArgument(format!(
                    "outcome `{other}` is neither S nor N"
                )))
            }
        };
        records.push(TripletRecord {
            left: intern(&row[0]),
            right: intern(&row[1]),
            outcome,
        });
    }
    Ok(records)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairCount {
    pub n: u64,
    pub same: u64,
}

impl PairCount {
    pub fn p_hat(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.same as f64 / self.n as f64
        }
    }
}

/// One entry of the stats JSON array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairStatEntry {
    pub left: String,
    pub right: String,
    pub n: u64,
    pub p_hat: f64,
}

/// Agreement counts per observed (left mark, right mark) pair.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairStats {
    left_ids: Vec<String>,
    right_ids: Vec<String>,
    counts: BTreeMap<(usize, usize), PairCount>,
}

impl PairStats {
    pub fn new(left_ids: Vec<String>, right_ids: Vec<String>) -> Self {
        PairStats {
            left_ids,
            right_ids,
            counts: BTreeMap::new(),
        }
    }

    pub fn left_ids(&self) -> &[String] {
        &self.left_ids
    }

    pub fn right_ids(&self) -> &[String] {
        &self.right_ids
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Number of observed pairs.
    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn get(&self, left: &str, right: &str) -> Option<PairCount> {
        let l = self.left_ids.iter().position(|x| x == left)?;
        let r = self.right_ids.iter().position(|x| x == right)?;
        self.counts.get(&(l, r)).copied()
    }

    /// Observed pairs as `(left index, right index, count)`.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, PairCount)> + '_ {
        self.counts.iter().map(|(&(l, r), &c)| (l, r, c))
    }

    fn index_of(ids: &mut Vec<String>, id: &str) -> usize {
        match ids.iter().position(|x| x == id) {
            Some(i) => i,
            None => {
                ids.push(id.to_owned());
                ids.len() - 1
            }
        }
    }

    /// Adds `count` trials to a pair, registering unseen ids.
    pub fn add(&mut self, left: &str, right: &str, count: PairCount) {
        let l = Self::index_of(&mut self.left_ids, left);
        let r = Self::index_of(&mut self.right_ids, right);
        let e = self.counts.entry((l, r)).or_default();
        e.n += count.n;
        e.same += count.same;
    }

    /// Sums counts by mark id.
    pub fn merge(mut self, other: &PairStats) -> PairStats {
        for (l, r, c) in other.iter() {
            self.add(&other.left_ids[l], &other.right_ids[r], c);
        }
        self
    }

    pub fn to_entries(&self) -> Vec<PairStatEntry> {
        self.iter()
            .map(|(l, r, c)| PairStatEntry {
                left: self.left_ids[l].clone(),
                right: self.right_ids[r].clone(),
                n: c.n,
                p_hat: c.p_hat(),
            })
            .collect()
    }

    /// Rebuilds stats from JSON entries; ids are ordered by first appearance.
    pub fn from_entries(entries: &[PairStatEntry]) -> Result<Self, ExperimentError> {
        let mut stats = PairStats::default();
        for e in entries {
            if !(0.0..=1.0).contains(&e.p_hat) {
                return Err(ExperimentError::InvalidArgument(format!(
                    "p_hat {} for ({}, {}) is outside [0, 1]",
                    e.p_hat, e.left, e.right
                )));
            }
            let same = (e.p_hat * e.n as f64).round() as u64;
            stats.add(&e.left, &e.right, PairCount { n: e.n, same });
        }
        Ok(stats)
    }

    pub fn to_json(&self) -> Result<String, ExperimentError> {
        let mut s = serde_json::to_string_pretty(&self.to_entries())?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let entries: Vec<PairStatEntry> = serde_json::from_str(text)?;
        Self::from_entries(&entries)
    }
}

/// Counts S outcomes per pair. Pairs that never occur are absent.
pub fn estimate_pair_stats(posts: (&Post, &Post), records: &[TripletRecord]) -> Result<PairStats, ExperimentError> {
    let (left, right) = posts;
    check_sides(left, right)?;
    fn index(post: &Post) -> HashMap<&str, usize> {
        post.marks.iter().enumerate().map(|(i, m)| (m.id.as_str(), i)).collect()
    }
    let (li, ri) = (index(left), index(right));
    let mut stats = PairStats::new(left.ids(), right.ids());
    for r in records {
        let l = *li.get(&*r.left).ok_or_else(|| ExperimentError::UnknownMark {
            side: Side::Left,
            id: r.left.to_string(),
        })?;
        let rr = *ri.get(&*r.right).ok_or_else(|| ExperimentError::UnknownMark {
            side: Side::Right,
            id: r.right.to_string(),
        })?;
        let e = stats.counts.entry((l, rr)).or_default();
        e.n += 1;
        e.same += (r.outcome == Outcome::S) as u64;
    }
    Ok(stats)
}

/// Counts S outcomes per pair without a mark table.
pub fn tally_records(records: &[TripletRecord]) -> PairStats {
    let mut stats = PairStats::default();
    for r in records {
        stats.add(
            &r.left,
            &r.right,
            PairCount {
                n: 1,
                same: (r.outcome == Outcome::S) as u64,
            },
        );
    }
    stats
}

/// `E = P(S) - P(N)`.
pub fn correlation(p_same: f64) -> f64 {
    2.0 * p_same - 1.0
}

/// Estimated CHSH combination with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChshEstimate {
    pub s: f64,
    pub std_error: f64,
    /// `E(a,b)`, `E(a,b′)`, `E(a′,b)`, `E(a′,b′)`.
    pub correlations: [f64; 4],
    pub n_per_setting: usize,
}

/// The four instrument orientations of a CHSH run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChshSettings {
    pub a: UnitVec,
    pub a_prime: UnitVec,
    pub b: UnitVec,
    pub b_prime: UnitVec,
}

impl ChshSettings {
    /// Coplanar axes at 0°, 90° (left) and 45°, 135° (right).
    pub fn standard() -> Self {
        let at = |deg: f64| UnitVec::from_spherical(deg.to_radians(), 0.0);
        ChshSettings {
            a: at(0.0),
            a_prime: at(90.0),
            b: at(45.0),
            b_prime: at(135.0),
        }
    }
}

/// `S = E(a,b) − E(a,b′) + E(a′,b) + E(a′,b′)`, each correlation estimated
/// from `n_per_setting` trials. Setting `k` in that order uses sub-stream
/// `k` of the seed, and trial `i` within it sub-stream `i` of that.
pub fn chsh(
    measurement: impl Into<Measurement>,
    settings: &ChshSettings,
    n_per_setting: usize,
    seed: u64,
) -> Result<ChshEstimate, ExperimentError> {
    if n_per_setting < 10_000 {
        return Err(ExperimentError::InvalidArgument(format!(
            "n_per_setting must be at least 10^4, got {n_per_setting}"
        )));
    }
    let measurement = measurement.into();
    let root = RandomStream::new(seed);
    let pairs = [
        (settings.a, settings.b),
        (settings.a, settings.b_prime),
        (settings.a_prime, settings.b),
        (settings.a_prime, settings.b_prime),
    ];
    let mut correlations = [0.0; 4];
    let mut variance = 0.0;
    for (k, (a, b)) in pairs.iter().enumerate() {
        let stream = root.split(k as u64);
        let same = (0..n_per_setting)
            .into_par_iter()
            .map(|i| {
                let mut rng = stream.split(i as u64);
                run_pair(measurement, a, b, &mut rng).map(|p| (p.outcome() == Outcome::S) as u64)
            })
            .try_reduce(|| 0, |x, y| Ok(x + y))?;
        let p = same as f64 / n_per_setting as f64;
        correlations[k] = correlation(p);
        variance += 4.0 * p * (1.0 - p) / n_per_setting as f64;
    }
    let [ab, abp, apb, apbp] = correlations;
    Ok(ChshEstimate {
        s: ab - abp + apb + apbp,
        std_error: variance.sqrt(),
        correlations,
        n_per_setting,
    })
}
