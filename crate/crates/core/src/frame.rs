//! Reconstruction of instrument geometry from logbook statistics alone.
//!
//! Cross-post agreement frequencies are turned into angles under a
//! hypothesis relating probability and angle, the marks of both posts are
//! placed on one unit sphere by weighted least squares on cosines, and the
//! angles between marks of the same post (never measured directly) are read
//! off the embedding.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::experiment::{PairStats, Side};
use crate::geometry::{angle_between, sample_uniform_direction, RandomStream, UnitVec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FrameError {
    #[error("observation graph is disconnected: components {0:?}")]
    Disconnected(Vec<Vec<String>>),
    #[error("cosine matrix is not symmetric at ({row}, {col})")]
    Asymmetric { row: usize, col: usize },
    #[error("invalid cosine matrix: {0}")]
    InvalidMatrix(String),
    #[error("p_hat = {0} is outside [0, 1]")]
    ProbabilityOutOfRange(f64),
    #[error("mark sets differ: {0}")]
    MarkMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Probability-to-angle relation used to read the logbook.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hypothesis {
    /// `p = sin²(θ/2)`.
    QmSin2,
    /// `p = cos²(θ/2)`.
    QmCos2,
    /// `p = θ/π`.
    Linear,
}

impl Hypothesis {
    pub fn angle(self, p: f64) -> f64 {
        let p = p.clamp(0.0, 1.0);
        match self {
            Hypothesis::QmSin2 => 2.0 * p.sqrt().asin(),
            Hypothesis::QmCos2 => 2.0 * p.sqrt().acos(),
            Hypothesis::Linear => PI * p,
        }
    }

    /// Delta-method standard deviation of `cos θ̂` from `n` trials at `p`.
    pub fn cosine_sd(self, p: f64, n: f64) -> f64 {
        let binom = (p * (1.0 - p) / n).sqrt();
        match self {
            Hypothesis::QmSin2 | Hypothesis::QmCos2 => 2.0 * binom,
            Hypothesis::Linear => PI * (PI * p).sin().abs() * binom,
        }
    }
}

impl std::str::FromStr for Hypothesis {
    type Err = FrameError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "qm_sin2" => Ok(Hypothesis::QmSin2),
            "qm_cos2" => Ok(Hypothesis::QmCos2),
            "linear" => Ok(Hypothesis::Linear),
            _ => Err(FrameError::InvalidArgument(format!(
                "unknown hypothesis `{s}` (expected qm_sin2, qm_cos2 or linear)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MarkKey {
    pub side: Side,
    pub id: String,
}

impl MarkKey {
    pub fn new(side: Side, id: impl Into<String>) -> Self {
        MarkKey { side, id: id.into() }
    }

    pub fn label(&self) -> String {
        format!("{}:{}", self.side, self.id)
    }
}

/// Estimated angles between marks, left marks first. Only cross-post
/// entries are observed.
#[derive(Clone, Debug, PartialEq)]
pub struct AngleMatrix {
    keys: Vec<MarkKey>,
    n_left: usize,
    hypothesis: Hypothesis,
    /// `(probability, trials)` per observed cross pair, indexed
    /// `(left, right)`. `None` trials mark exact probabilities.
    observed: BTreeMap<(usize, usize), (f64, Option<u64>)>,
}

impl AngleMatrix {
    /// Angles for known probabilities, `probabilities[(l, r)]` for left mark
    /// `l` and right mark `r`. Entries that are `NaN` are unobserved.
    pub fn from_probabilities(
        left_ids: &[String],
        right_ids: &[String],
        probabilities: &DMatrix<f64>,
        hypothesis: Hypothesis,
    ) -> Result<Self, FrameError> {
        if probabilities.shape() != (left_ids.len(), right_ids.len()) {
            return Err(FrameError::InvalidArgument(format!(
                "probability matrix is {:?}, expected {}x{}",
                probabilities.shape(),
                left_ids.len(),
                right_ids.len()
            )));
        }
        let mut observed = BTreeMap::new();
        for l in 0..left_ids.len() {
            for r in 0..right_ids.len() {
                let p = probabilities[(l, r)];
                if p.is_nan() {
                    continue;
                }
                if !(0.0..=1.0).contains(&p) {
                    return Err(FrameError::ProbabilityOutOfRange(p));
                }
                observed.insert((l, r), (p, None));
            }
        }
        Ok(Self::assemble(left_ids, right_ids, hypothesis, observed))
    }

    fn assemble(
        left_ids: &[String],
        right_ids: &[String],
        hypothesis: Hypothesis,
        observed: BTreeMap<(usize, usize), (f64, Option<u64>)>,
    ) -> Self {
        let keys = left_ids
            .iter()
            .map(|id| MarkKey::new(Side::Left, id.clone()))
            .chain(right_ids.iter().map(|id| MarkKey::new(Side::Right, id.clone())))
            .collect();
        AngleMatrix {
            keys,
            n_left: left_ids.len(),
            hypothesis,
            observed,
        }
    }

    pub fn keys(&self) -> &[MarkKey] {
        &self.keys
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn n_left(&self) -> usize {
        self.n_left
    }

    pub fn n_right(&self) -> usize {
        self.keys.len() - self.n_left
    }

    pub fn hypothesis(&self) -> Hypothesis {
        self.hypothesis
    }

    fn cross(&self, i: usize, j: usize) -> Option<(usize, usize)> {
        match (i < self.n_left, j < self.n_left) {
            (true, false) => Some((i, j - self.n_left)),
            (false, true) => Some((j, i - self.n_left)),
            _ => None,
        }
    }

    fn entry(&self, i: usize, j: usize) -> Option<(f64, Option<u64>)> {
        self.cross(i, j).and_then(|k| self.observed.get(&k).copied())
    }

    /// Angle between marks `i` and `j`; `0` on the diagonal, `None` when
    /// unobserved.
    pub fn angle(&self, i: usize, j: usize) -> Option<f64> {
        if i == j {
            return Some(0.0);
        }
        self.entry(i, j).map(|(p, _)| self.hypothesis.angle(p))
    }

    pub fn p_hat(&self, i: usize, j: usize) -> Option<f64> {
        self.entry(i, j).map(|(p, _)| p)
    }

    /// Trial count behind an entry; `None` for unobserved or exact entries.
    pub fn count(&self, i: usize, j: usize) -> Option<u64> {
        self.entry(i, j).and_then(|(_, n)| n)
    }

    pub fn is_observed(&self, i: usize, j: usize) -> bool {
        self.entry(i, j).is_some()
    }

    /// Observed pairs as `(i, j, cos θ̂, weight)` with `i < j`.
    fn observations(&self) -> Vec<(usize, usize, f64, f64)> {
        self.observed
            .iter()
            .map(|(&(l, r), &(p, n))| {
                let w = n.map_or(1.0, |n| n as f64);
                (l, self.n_left + r, self.hypothesis.angle(p).cos(), w)
            })
            .collect()
    }

    /// Whether every observed entry came from a finite number of trials.
    pub fn is_sampled(&self) -> bool {
        !self.observed.is_empty() && self.observed.values().all(|(_, n)| n.is_some())
    }

    /// Eigenvalue tolerance for the completed cosine matrix: the RMS
    /// cosine standard error times `√L + √R + 3`, the scale of the largest
    /// eigenvalue of a random `L × R` noise block plus a 3σ margin. Exact
    /// inputs use `1e-6·n`.
    pub fn noise_tolerance(&self) -> f64 {
        if !self.is_sampled() {
            return 1e-6 * self.len() as f64;
        }
        let mut sum = 0.0;
        for &(p, n) in self.observed.values() {
            let sd = self.hypothesis.cosine_sd(p, n.unwrap_or(1) as f64);
            sum += sd * sd;
        }
        let rms = (sum / self.observed.len() as f64).sqrt();
        rms * ((self.n_left as f64).sqrt() + (self.n_right() as f64).sqrt() + 3.0)
    }

    /// Labelled CSV: header row and first column of `side:id` labels,
    /// unobserved cells empty.
    pub fn to_csv(&self) -> String {
        let labels: Vec<String> = self.keys.iter().map(MarkKey::label).collect();
        let mut out = String::from("mark");
        for l in &labels {
            out.push(',');
            out.push_str(&csv_field(l));
        }
        out.push('\n');
        for (i, l) in labels.iter().enumerate() {
            out.push_str(&csv_field(l));
            for j in 0..self.len() {
                out.push(',');
                if let Some(a) = self.angle(i, j) {
                    let _ = write!(out, "{a}");
                }
            }
            out.push('\n');
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

/// Angle estimates for every observed pair in `stats`.
pub fn angles_from_stats(stats: &PairStats, hypothesis: Hypothesis) -> Result<AngleMatrix, FrameError> {
    let mut observed = BTreeMap::new();
    for (l, r, c) in stats.iter() {
        if c.n == 0 {
            continue;
        }
        let p = c.p_hat();
        if !(0.0..=1.0).contains(&p) {
            return Err(FrameError::ProbabilityOutOfRange(p));
        }
        observed.insert((l, r), (p, Some(c.n)));
    }
    Ok(AngleMatrix::assemble(
        stats.left_ids(),
        stats.right_ids(),
        hypothesis,
        observed,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddabilityReport {
    /// Descending.
    pub eigenvalues: Vec<f64>,
    /// `λ_min ≥ -tolerance`.
    pub psd: bool,
    /// `λ₄ ≤ tolerance` (vacuous below four marks).
    pub rank3: bool,
    pub tolerance: f64,
}

impl EmbeddabilityReport {
    pub fn embeddable(&self) -> bool {
        self.psd && self.rank3
    }

    pub fn lambda4(&self) -> f64 {
        self.eigenvalues.get(3).copied().unwrap_or(0.0)
    }
}

/// Spectral test of whether `cos_matrix` is the Gram matrix of unit vectors
/// in three dimensions. `tolerance` defaults to `1e-6·n`.
pub fn embeddability_test(
    cos_matrix: &DMatrix<f64>,
    tolerance: Option<f64>,
) -> Result<EmbeddabilityReport, FrameError> {
    let n = cos_matrix.nrows();
    if cos_matrix.ncols() != n || n == 0 {
        return Err(FrameError::InvalidMatrix(format!(
            "expected a nonempty square matrix, got {:?}",
            cos_matrix.shape()
        )));
    }
    for i in 0..n {
        if (cos_matrix[(i, i)] - 1.0).abs() > 1e-12 {
            return Err(FrameError::InvalidMatrix(format!("diagonal entry {i} is not 1")));
        }
        for j in 0..n {
            let c = cos_matrix[(i, j)];
            if !(-1.0 - 1e-12..=1.0 + 1e-12).contains(&c) {
                return Err(FrameError::InvalidMatrix(format!("entry ({i}, {j}) = {c}")));
            }
            if (c - cos_matrix[(j, i)]).abs() > 1e-12 {
                return Err(FrameError::Asymmetric { row: i, col: j });
            }
        }
    }
    let tolerance = tolerance.unwrap_or(1e-6 * n as f64);
    let mut eigenvalues: Vec<f64> = cos_matrix.clone().symmetric_eigenvalues().iter().copied().collect();
    eigenvalues.sort_by(|a, b| b.total_cmp(a));
    let psd = *eigenvalues.last().expect("nonempty") >= -tolerance;
    let rank3 = eigenvalues.get(3).map_or(true, |&l| l <= tolerance);
    Ok(EmbeddabilityReport {
        eigenvalues,
        psd,
        rank3,
        tolerance,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedOptions {
    pub max_iter: usize,
    /// Stop when one step lowers the (weight-normalized) stress by less
    /// than `tol` times its value.
    pub tol: f64,
}

impl Default for EmbedOptions {
    fn default() -> Self {
        EmbedOptions {
            max_iter: 50_000,
            tol: 1e-15,
        }
    }
}

pub const GAUGE_TAG: &str = "pole-meridian-chirality";

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSolution {
    keys: Vec<MarkKey>,
    vectors: Vec<UnitVec>,
    /// `Σ w (x_i·x_j - cos θ̂_ij)²` over observed pairs, `w` = trial count
    /// (one for exact inputs).
    pub stress: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Too few marks, or one post's marks do not span space.
    pub rank_deficient: bool,
}

#[derive(Serialize, Deserialize)]
struct EmbeddedMarkJson {
    id: String,
    post: Side,
    x: f64,
    y: f64,
    z: f64,
}

#[derive(Serialize, Deserialize)]
struct EmbeddingJson {
    marks: Vec<EmbeddedMarkJson>,
    stress: f64,
    iterations: usize,
    gauge: String,
    rank_deficient: bool,
}

impl EmbeddingSolution {
    pub fn keys(&self) -> &[MarkKey] {
        &self.keys
    }

    pub fn vectors(&self) -> &[UnitVec] {
        &self.vectors
    }

    pub fn gauge(&self) -> &'static str {
        GAUGE_TAG
    }

    pub fn vector(&self, key: &MarkKey) -> Option<UnitVec> {
        self.keys.iter().position(|k| k == key).map(|i| self.vectors[i])
    }

    /// Observed cosines where available, embedding cosines elsewhere.
    pub fn completed_cosines(&self, angles: &AngleMatrix) -> DMatrix<f64> {
        let n = self.vectors.len();
        DMatrix::from_fn(n, n, |i, j| match angles.angle(i, j) {
            Some(a) if i != j => a.cos(),
            _ if i == j => 1.0,
            _ => self.vectors[i].dot(&self.vectors[j]).clamp(-1.0, 1.0),
        })
    }

    pub fn to_json(&self) -> String {
        let doc = EmbeddingJson {
            marks: self
                .keys
                .iter()
                .zip(&self.vectors)
                .map(|(k, v)| EmbeddedMarkJson {
                    id: k.id.clone(),
                    post: k.side,
                    x: v.x(),
                    y: v.y(),
                    z: v.z(),
                })
                .collect(),
            stress: self.stress,
            iterations: self.iterations,
            gauge: GAUGE_TAG.to_owned(),
            rank_deficient: self.rank_deficient,
        };
        let mut s = serde_json::to_string_pretty(&doc).expect("plain data");
        s.push('\n');
        s
    }
}

fn connected_components(angles: &AngleMatrix) -> Vec<Vec<usize>> {
    let n = angles.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for &(l, r) in angles.observed.keys() {
        let (a, b) = (find(&mut parent, l), find(&mut parent, angles.n_left + r));
        if a != b {
            parent[a.max(b)] = a.min(b);
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(i);
    }
    groups.into_values().collect()
}

/// Weighted stress and its Riemannian gradient on the product of spheres.
fn stress_gradient(x: &[Vector3<f64>], obs: &[(usize, usize, f64, f64)], grad: &mut [Vector3<f64>]) -> f64 {
    grad.iter_mut().for_each(|g| *g = Vector3::zeros());
    let mut f = 0.0;
    for &(i, j, c, w) in obs {
        let r = x[i].dot(&x[j]) - c;
        f += w * r * r;
        grad[i] += 2.0 * w * r * x[j];
        grad[j] += 2.0 * w * r * x[i];
    }
    for (g, xi) in grad.iter_mut().zip(x) {
        *g -= xi * g.dot(xi);
    }
    f
}

fn stress(x: &[Vector3<f64>], obs: &[(usize, usize, f64, f64)]) -> f64 {
    obs.iter()
        .map(|&(i, j, c, w)| {
            let r = x[i].dot(&x[j]) - c;
            w * r * r
        })
        .sum()
}

/// Top-3 eigenvectors of the cosine matrix with zeros for unobserved
/// pairs, rows normalized.
fn spectral_start(angles: &AngleMatrix, obs: &[(usize, usize, f64, f64)]) -> Vec<Vector3<f64>> {
    let n = angles.len();
    let mut c = DMatrix::<f64>::identity(n, n);
    for &(i, j, cos, _) in obs {
        c[(i, j)] = cos;
        c[(j, i)] = cos;
    }
    let eig = c.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut columns = Vec::with_capacity(3);
    for &k in order.iter().take(3) {
        let mut v = eig.eigenvectors.column(k).into_owned();
        if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                v.neg_mut();
            }
        }
        columns.push(v * eig.eigenvalues[k].abs().sqrt());
    }
    while columns.len() < 3 {
        columns.push(nalgebra::DVector::zeros(n));
    }
    (0..n)
        .map(|i| {
            let v = Vector3::new(columns[0][i], columns[1][i], columns[2][i]);
            let norm = v.norm();
            if norm > 1e-12 {
                v / norm
            } else {
                // Deterministic spread for marks the spectrum does not see.
                let t = i as f64 + 1.0;
                Vector3::new(t.sin(), t.cos(), 0.5).normalize()
            }
        })
        .collect()
}

fn retract(x: &[Vector3<f64>], g: &[Vector3<f64>], step: f64, out: &mut [Vector3<f64>]) {
    for ((o, xi), gi) in out.iter_mut().zip(x).zip(g) {
        *o = (xi - step * gi).normalize();
    }
}

/// Rotation (and possibly reflection) pinning the first mark to +z, the
/// next non-collinear mark to the `x ≥ 0` half of the `xz` plane, and the
/// next mark off that plane to `y ≥ 0`.
fn fix_gauge(x: &mut [Vector3<f64>]) {
    let Some(first) = x.first().copied() else {
        return;
    };
    let pole = Vector3::z();
    let rotate_onto = |from: Vector3<f64>, to: Vector3<f64>| -> Matrix3<f64> {
        let axis = from.cross(&to);
        let s = axis.norm();
        let c = from.dot(&to);
        if s < 1e-15 {
            if c > 0.0 {
                return Matrix3::identity();
            }
            // Half turn about any axis perpendicular to `from`.
            let perp = if from.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
            let k = from.cross(&perp).normalize();
            return 2.0 * k * k.transpose() - Matrix3::identity();
        }
        let k = axis / s;
        let kx = k.cross_matrix();
        Matrix3::identity() + kx * s + kx * kx * (1.0 - c)
    };
    let r1 = rotate_onto(first, pole);
    x.iter_mut().for_each(|v| *v = (r1 * *v).normalize());
    if let Some(m) = x.iter().skip(1).find(|v| v.x.hypot(v.y) > 1e-9) {
        let phi = m.y.atan2(m.x);
        let (s, c) = (-phi).sin_cos();
        let rz = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        x.iter_mut().for_each(|v| *v = rz * *v);
    }
    if let Some(m) = x.iter().skip(1).find(|v| v.y.abs() > 1e-9) {
        if m.y < 0.0 {
            x.iter_mut().for_each(|v| v.y = -v.y);
        }
    }
}

fn smallest_singular_value(vs: &[Vector3<f64>]) -> f64 {
    if vs.len() < 3 {
        return 0.0;
    }
    let mut m = Matrix3::zeros();
    for v in vs {
        m += v * v.transpose();
    }
    let mut ev: Vec<f64> = m.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev[0].max(0.0).sqrt()
}

/// Random starts tried after the spectral one; the lowest stress wins.
const RESTARTS: usize = 15;
const RESTART_SEED: u64 = 0x5eed_f7a3;

struct Descent {
    x: Vec<Vector3<f64>>,
    stress: f64,
    iterations: usize,
    converged: bool,
}

/// Riemannian gradient descent with Barzilai-Borwein steps and Armijo
/// backtracking.
fn descend(mut x: Vec<Vector3<f64>>, obs: &[(usize, usize, f64, f64)], options: &EmbedOptions) -> Descent {
    let n = x.len();
    let mut grad = vec![Vector3::zeros(); n];
    let mut prev_x = x.clone();
    let mut prev_grad = vec![Vector3::zeros(); n];
    let mut trial = x.clone();
    let mut f = stress_gradient(&x, obs, &mut grad);
    let mut step = 1.0;
    let mut iterations = 0;
    let mut converged = false;
    let mut small_steps = 0;
    while iterations < options.max_iter {
        let g2: f64 = grad.iter().map(|g| g.norm_squared()).sum();
        if g2.sqrt() <= 1e-15 {
            converged = true;
            break;
        }
        iterations += 1;
        if iterations > 1 {
            let (mut ss, mut sy) = (0.0, 0.0);
            for i in 0..n {
                let s = x[i] - prev_x[i];
                ss += s.norm_squared();
                sy += s.dot(&(grad[i] - prev_grad[i]));
            }
            step = if sy > 0.0 {
                (ss / sy).clamp(1e-10, 1e10)
            } else {
                (step * 2.0).min(1e10)
            };
        }
        let mut accepted = None;
        for _ in 0..80 {
            retract(&x, &grad, step, &mut trial);
            let ft = stress(&trial, obs);
            if ft <= f - 1e-4 * step * g2 {
                accepted = Some(ft);
                break;
            }
            step *= 0.5;
        }
        let Some(ft) = accepted else {
            // No descent left at working precision.
            converged = true;
            break;
        };
        prev_x.copy_from_slice(&x);
        prev_grad.copy_from_slice(&grad);
        x.copy_from_slice(&trial);
        let decrease = f - ft;
        f = stress_gradient(&x, obs, &mut grad);
        if decrease <= options.tol * f {
            small_steps += 1;
            if small_steps >= 3 {
                converged = true;
                break;
            }
        } else {
            small_steps = 0;
        }
    }
    Descent {
        x,
        stress: f,
        iterations,
        converged,
    }
}

/// Places every mark on the unit sphere so that cosines match the observed
/// angles in the trial-weighted least-squares sense.
pub fn embed_on_sphere(angles: &AngleMatrix, options: &EmbedOptions) -> Result<EmbeddingSolution, FrameError> {
    if angles.n_left() == 0 || angles.n_right() == 0 {
        return Err(FrameError::InvalidArgument("each post needs at least one mark".into()));
    }
    let components = connected_components(angles);
    if components.len() > 1 {
        return Err(FrameError::Disconnected(
            components
                .iter()
                .map(|c| c.iter().map(|&i| angles.keys[i].label()).collect())
                .collect(),
        ));
    }
    let mut obs = angles.observations();
    let total_weight: f64 = obs.iter().map(|o| o.3).sum();
    for o in &mut obs {
        o.3 /= total_weight;
    }

    let n = angles.len();
    let mut best = descend(spectral_start(angles, &obs), &obs, options);
    let mut rng = RandomStream::with_stream(RESTART_SEED, n as u64);
    for _ in 0..RESTARTS {
        let x0 = (0..n)
            .map(|_| sample_uniform_direction(&mut rng).to_vector3())
            .collect();
        let run = descend(x0, &obs, options);
        if run.stress < best.stress * (1.0 - 1e-9) {
            best = run;
        }
    }
    let Descent {
        mut x,
        stress: f,
        iterations,
        converged,
    } = best;

    fix_gauge(&mut x);
    let (left, right) = x.split_at(angles.n_left());
    let rank_deficient = angles.n_left() < 3
        || angles.n_right() < 3
        || smallest_singular_value(left) < 1e-6
        || smallest_singular_value(right) < 1e-6;
    let vectors = x
        .iter()
        .map(|v| UnitVec::new(v.x, v.y, v.z).expect("unit rows"))
        .collect();
    Ok(EmbeddingSolution {
        keys: angles.keys.clone(),
        vectors,
        stress: f * total_weight,
        iterations,
        converged,
        rank_deficient,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub mean_error: f64,
    pub max_error: f64,
    pub rms_error: f64,
    /// Angular error per mark, in solution order.
    pub errors: Vec<f64>,
    /// Whether the best transform includes a reflection.
    pub reflected: bool,
}

/// Aligns `solution` to `truth` by the orthogonal transform (reflections
/// allowed) minimizing squared chordal distance, then reports angular
/// errors.
pub fn align_and_score(
    solution: &EmbeddingSolution,
    truth: &HashMap<MarkKey, UnitVec>,
) -> Result<AlignmentReport, FrameError> {
    if truth.len() != solution.keys.len() {
        return Err(FrameError::MarkMismatch(format!(
            "solution has {} marks, truth has {}",
            solution.keys.len(),
            truth.len()
        )));
    }
    let mut pairs = Vec::with_capacity(truth.len());
    for (k, v) in solution.keys.iter().zip(&solution.vectors) {
        let t = truth
            .get(k)
            .ok_or_else(|| FrameError::MarkMismatch(format!("no truth for {}", k.label())))?;
        pairs.push((v.to_vector3(), t.to_vector3()));
    }
    let mut m = Matrix3::zeros();
    for (s, t) in &pairs {
        m += t * s.transpose();
    }
    let svd = m.svd(true, true);
    let q = svd.u.expect("u") * svd.v_t.expect("v_t");
    let errors: Vec<f64> = pairs
        .iter()
        .map(|(s, t)| {
            let a = UnitVec::from_vector3(&(q * s)).expect("orthogonal image");
            let b = UnitVec::from_vector3(t).expect("unit");
            angle_between(&a, &b).radians()
        })
        .collect();
    let count = errors.len().max(1) as f64;
    Ok(AlignmentReport {
        mean_error: errors.iter().sum::<f64>() / count,
        max_error: errors.iter().copied().fold(0.0, f64::max),
        rms_error: (errors.iter().map(|e| e * e).sum::<f64>() / count).sqrt(),
        reflected: q.determinant() < 0.0,
        errors,
    })
}

/// Angles between marks of one post, read off an embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct IntraPostAngles {
    pub ids: Vec<String>,
    pub angles: DMatrix<f64>,
    pub rank_deficient: bool,
}

impl IntraPostAngles {
    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.ids.iter().position(|x| x == a)?;
        let j = self.ids.iter().position(|x| x == b)?;
        Some(self.angles[(i, j)])
    }
}

pub fn intra_post_angles(solution: &EmbeddingSolution, side: Side) -> IntraPostAngles {
    let picked: Vec<(usize, &MarkKey)> = solution
        .keys
        .iter()
        .enumerate()
        .filter(|(_, k)| k.side == side)
        .collect();
    let n = picked.len();
    let angles = DMatrix::from_fn(n, n, |a, b| {
        if a == b {
            0.0
        } else {
            angle_between(&solution.vectors[picked[a].0], &solution.vectors[picked[b].0]).radians()
        }
    });
    IntraPostAngles {
        ids: picked.iter().map(|(_, k)| k.id.clone()).collect(),
        angles,
        rank_deficient: solution.rank_deficient,
    }
}
