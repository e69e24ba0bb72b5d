//! Grid fits of a density on `[-1, 1]³` under the locality/QM marginal
//! constraints.
//!
//! Cells are indexed `(i, j, k)` along `(z_a, z_b, z_ab)` and stored at
//! `i + n·j + n²·k`. Every constraint is a linear row `Σ a_c w_c = b`, so
//! both objectives are solved by cyclic row projections: multiplicative
//! (Bregman) projections for the entropy, and exact dual coordinate ascent
//! for the squared norm.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Maximize `-Σ w ln w`.
    MaxEntropy,
    /// Minimize `Σ w²`.
    #[serde(rename = "min-l2")]
    MinL2,
}

impl std::str::FromStr for Objective {
    type Err = FitError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "max-entropy" => Ok(Objective::MaxEntropy),
            "min-l2" => Ok(Objective::MinL2),
            _ => Err(FitError::InvalidArgument(format!(
                "unknown objective `{s}` (expected max-entropy or min-l2)"
            ))),
        }
    }
}

/// Which constraint families to impose. Unit mass is always imposed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintSet {
    /// `ρ(z_ab) = 1/2`.
    pub z_ab_marginal: bool,
    /// All three pair marginals equal `1/4`.
    pub pair_marginals: bool,
    /// `P(z_a > 0, z_b > 0 | z_ab) = (1 + z_ab) / 4` per slab.
    pub conditional: bool,
}

impl ConstraintSet {
    pub const ALL: ConstraintSet = ConstraintSet {
        z_ab_marginal: true,
        pair_marginals: true,
        conditional: true,
    };

    pub const MARGINALS: ConstraintSet = ConstraintSet {
        z_ab_marginal: true,
        pair_marginals: true,
        conditional: false,
    };

    /// Parses a comma separated list of `z-ab-marginal`, `pair-marginals`,
    /// `conditional`, or the single word `all`.
    pub fn parse_list(s: &str) -> Result<Self, FitError> {
        let mut set = ConstraintSet {
            z_ab_marginal: false,
            pair_marginals: false,
            conditional: false,
        };
        for name in s.split(',').map(str::trim).filter(|n| !n.is_empty()) {
            match name {
                "all" => set = ConstraintSet::ALL,
                "z-ab-marginal" => set.z_ab_marginal = true,
                "pair-marginals" => set.pair_marginals = true,
                "conditional" => set.conditional = true,
                other => return Err(FitError::InvalidArgument(format!("unknown constraint `{other}`"))),
            }
        }
        Ok(set)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Cap on full sweeps over the constraint rows.
    pub max_sweeps: usize,
    /// Target for the largest residual in [`Residuals`].
    pub tolerance: f64,
    /// Sweeps without a tenfold residual improvement before the problem is
    /// declared infeasible and the current iterate returned.
    pub stall_sweeps: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_sweeps: 20_000,
            tolerance: 1e-10,
            stall_sweeps: 2_000,
        }
    }
}

/// Largest constraint violations, in density or probability units.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    /// `|Σ w - 1|`.
    pub mass: f64,
    /// `max_k |ρ(z_ab) - 1/2|`.
    pub z_ab_marginal: f64,
    /// Max over the three pair densities of `|ρ - 1/4|`.
    pub pair_marginals: f64,
    /// `max_k |P(↑↑ | slab k) - (1 + u_k)/4|` over slabs with mass.
    pub conditional: f64,
}

impl Residuals {
    /// Largest residual among the imposed families and unit mass.
    pub fn max_imposed(&self, set: &ConstraintSet) -> f64 {
        let mut m = self.mass;
        if set.z_ab_marginal {
            m = m.max(self.z_ab_marginal);
        }
        if set.pair_marginals {
            m = m.max(self.pair_marginals);
        }
        if set.conditional {
            m = m.max(self.conditional);
        }
        m
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("grid_n = {0} is outside 8..=64")]
    InvalidGrid(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no convergence after {sweeps} sweeps (max residual {})", best.residuals.max_imposed(&ConstraintSet::ALL))]
    NotConverged { sweeps: usize, best: Box<DiscreteDensity> },
    #[error("malformed density file: {0}")]
    Parse(String),
}

/// Nonnegative cell weights on an `n × n × n` grid over `[-1, 1]³`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDensity {
    grid_n: usize,
    weights: Vec<f64>,
    pub residuals: Residuals,
}

impl DiscreteDensity {
    /// Builds a density from raw weights, computing its residuals.
    pub fn from_weights(grid_n: usize, weights: Vec<f64>) -> Result<Self, FitError> {
        if weights.len() != grid_n * grid_n * grid_n {
            return Err(FitError::InvalidArgument(format!(
                "expected {} weights for grid_n = {grid_n}, got {}",
                grid_n * grid_n * grid_n,
                weights.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(FitError::InvalidArgument(format!(
                "weight {w} is not a finite nonnegative number"
            )));
        }
        let residuals = compute_residuals(grid_n, &weights);
        Ok(DiscreteDensity {
            grid_n,
            weights,
            residuals,
        })
    }

    pub fn grid_n(&self) -> usize {
        self.grid_n
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, i: usize, j: usize, k: usize) -> f64 {
        let n = self.grid_n;
        self.weights[i + n * j + n * n * k]
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Centre of cell `i` along any axis.
    pub fn cell_center(&self, i: usize) -> f64 {
        -1.0 + (i as f64 + 0.5) * self.cell_width()
    }

    pub fn cell_width(&self) -> f64 {
        2.0 / self.grid_n as f64
    }

    /// `grid_n=<n>` followed by one weight per line, `z_a` fastest.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.weights.len() * 24);
        let _ = writeln!(out, "grid_n={}", self.grid_n);
        for w in &self.weights {
            let _ = writeln!(out, "{w}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, FitError> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let header = lines.next().ok_or_else(|| FitError::Parse("empty input".into()))?;
        let n: usize = header
            .strip_prefix("grid_n=")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| FitError::Parse(format!("bad header `{header}`")))?;
        let weights = lines
            .map(|l| l.parse::<f64>().map_err(|e| FitError::Parse(format!("`{l}`: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        DiscreteDensity::from_weights(n, weights).map_err(|e| FitError::Parse(e.to_string()))
    }
}

/// Fraction of cell `i` (of `n`) lying in `z > 0`.
fn positive_fraction(i: usize, n: usize) -> f64 {
    let h = 2.0 / n as f64;
    let lo = -1.0 + i as f64 * h;
    let hi = lo + h;
    if lo >= 0.0 {
        1.0
    } else if hi <= 0.0 {
        0.0
    } else {
        hi / h
    }
}

fn compute_residuals(n: usize, w: &[f64]) -> Residuals {
    let h = 2.0 / n as f64;
    let idx = |i: usize, j: usize, k: usize| i + n * j + n * n * k;
    let mass: f64 = w.iter().sum();
    let mut slab = vec![0.0; n];
    let mut up_up = vec![0.0; n];
    let mut ak = vec![0.0; n * n];
    let mut bk = vec![0.0; n * n];
    let mut ab = vec![0.0; n * n];
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                let x = w[idx(i, j, k)];
                slab[k] += x;
                up_up[k] += x * positive_fraction(i, n) * positive_fraction(j, n);
                ak[i + n * k] += x;
                bk[j + n * k] += x;
                ab[i + n * j] += x;
            }
        }
    }
    let z_ab_marginal = slab.iter().map(|m| (m / h - 0.5).abs()).fold(0.0, f64::max);
    let pair_marginals = ak
        .iter()
        .chain(&bk)
        .chain(&ab)
        .map(|m| (m / (h * h) - 0.25).abs())
        .fold(0.0, f64::max);
    let conditional = (0..n)
        .filter(|&k| slab[k] > 0.0)
        .map(|k| {
            let u = -1.0 + (k as f64 + 0.5) * h;
            (up_up[k] / slab[k] - (1.0 + u) / 4.0).abs()
        })
        .fold(0.0, f64::max);
    Residuals {
        mass: (mass - 1.0).abs(),
        z_ab_marginal,
        pair_marginals,
        conditional,
    }
}

/// One linear constraint `Σ coef·w[cell] = target`.
struct Row {
    cells: Vec<u32>,
    /// `None` means every coefficient is one.
    coefs: Option<Vec<f64>>,
    target: f64,
}

impl Row {
    fn coef(&self, m: usize) -> f64 {
        self.coefs.as_ref().map_or(1.0, |c| c[m])
    }
}

fn build_rows(n: usize, set: &ConstraintSet) -> Vec<Row> {
    let idx = |i: usize, j: usize, k: usize| (i + n * j + n * n * k) as u32;
    let nf = n as f64;
    let mut rows = vec![Row {
        cells: (0..(n * n * n) as u32).collect(),
        coefs: None,
        target: 1.0,
    }];
    if set.z_ab_marginal {
        for k in 0..n {
            let cells = (0..n).flat_map(|j| (0..n).map(move |i| idx(i, j, k))).collect();
            rows.push(Row {
                cells,
                coefs: None,
                target: 1.0 / nf,
            });
        }
    }
    if set.pair_marginals {
        let pair = |cells: Vec<u32>| Row {
            cells,
            coefs: None,
            target: 1.0 / (nf * nf),
        };
        for k in 0..n {
            for i in 0..n {
                rows.push(pair((0..n).map(|j| idx(i, j, k)).collect()));
            }
            for j in 0..n {
                rows.push(pair((0..n).map(|i| idx(i, j, k)).collect()));
            }
        }
        for j in 0..n {
            for i in 0..n {
                rows.push(pair((0..n).map(|k| idx(i, j, k)).collect()));
            }
        }
    }
    if set.conditional {
        for k in 0..n {
            let q = (1.0 + (-1.0 + (k as f64 + 0.5) * 2.0 / nf)) / 4.0;
            let mut cells = Vec::with_capacity(n * n);
            let mut coefs = Vec::with_capacity(n * n);
            for j in 0..n {
                for i in 0..n {
                    cells.push(idx(i, j, k));
                    coefs.push(positive_fraction(i, n) * positive_fraction(j, n) - q);
                }
            }
            rows.push(Row {
                cells,
                coefs: Some(coefs),
                target: 0.0,
            });
        }
    }
    rows
}

/// Multiplicative projection of `w` onto one row: `w_c ← w_c·exp(δ a_c)`.
fn entropy_project(row: &Row, w: &mut [f64]) {
    let Some(coefs) = &row.coefs else {
        let sum: f64 = row.cells.iter().map(|&c| w[c as usize]).sum();
        if sum > 0.0 {
            let scale = row.target / sum;
            for &c in &row.cells {
                w[c as usize] *= scale;
            }
        }
        return;
    };
    // f(δ) = Σ a w e^{δa} - b is increasing; Newton inside a bracket.
    let f = |delta: f64| -> (f64, f64) {
        let mut v = -row.target;
        let mut d = 0.0;
        for (m, &c) in row.cells.iter().enumerate() {
            let a = coefs[m];
            let e = w[c as usize] * (delta * a).exp();
            v += a * e;
            d += a * a * e;
        }
        (v, d)
    };
    let (mut lo, mut hi) = (-1.0f64, 1.0f64);
    while f(lo).0 > 0.0 && lo > -1e6 {
        lo *= 2.0;
    }
    while f(hi).0 < 0.0 && hi < 1e6 {
        hi *= 2.0;
    }
    let mut delta = 0.0f64.clamp(lo, hi);
    for _ in 0..100 {
        let (v, d) = f(delta);
        if v > 0.0 {
            hi = delta;
        } else {
            lo = delta;
        }
        let mut next = if d > 0.0 { delta - v / d } else { f64::NAN };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - delta).abs() <= 1e-15 * (1.0 + delta.abs()) {
            delta = next;
            break;
        }
        delta = next;
    }
    for (m, &c) in row.cells.iter().enumerate() {
        w[c as usize] *= (delta * coefs[m]).exp();
    }
}

/// Exact maximization of the dual along one row for `min ½‖w‖²`, with
/// `w = max(0, z)`. Solves `Σ a_c max(0, z_c + t a_c) = b` for `t`.
fn l2_project(row: &Row, z: &mut [f64], scratch: &mut Vec<(f64, f64)>) {
    // g(t) is piecewise linear and nondecreasing; breakpoints at -z/a.
    scratch.clear();
    let mut value = -row.target;
    let (mut right, mut left) = (0.0, 0.0);
    for (m, &c) in row.cells.iter().enumerate() {
        let a = row.coef(m);
        if a == 0.0 {
            continue;
        }
        let zc = z[c as usize];
        if zc > 0.0 {
            value += a * zc;
        }
        // Slopes just right and just left of t = 0.
        if zc > 0.0 || (zc == 0.0 && a > 0.0) {
            right += a * a;
        }
        if zc > 0.0 || (zc == 0.0 && a < 0.0) {
            left += a * a;
        }
        scratch.push((-zc / a, a));
    }
    scratch.sort_by(|x, y| x.0.total_cmp(&y.0));
    // Walk breakpoints from t = 0 toward the root. Crossing a breakpoint
    // switches a cell on when moving along the sign of its coefficient.
    let t = if value == 0.0 {
        0.0
    } else if value < 0.0 {
        let start = scratch.partition_point(|p| p.0 <= 0.0);
        let (mut t, mut v, mut s) = (0.0, value, right);
        let mut found = None;
        for &(t0, a) in &scratch[start..] {
            if s > 0.0 && v + s * (t0 - t) >= 0.0 {
                found = Some(t - v / s);
                break;
            }
            v += s * (t0 - t);
            t = t0;
            s += if a > 0.0 { a * a } else { -a * a };
        }
        match found {
            Some(x) => x,
            None if s > 0.0 => t - v / s,
            None => return,
        }
    } else {
        let start = scratch.partition_point(|p| p.0 < 0.0);
        let (mut t, mut v, mut s) = (0.0, value, left);
        let mut found = None;
        for &(t0, a) in scratch[..start].iter().rev() {
            if s > 0.0 && v - s * (t - t0) <= 0.0 {
                found = Some(t - v / s);
                break;
            }
            v -= s * (t - t0);
            t = t0;
            s += if a < 0.0 { a * a } else { -a * a };
        }
        match found {
            Some(x) => x,
            None if s > 0.0 => t - v / s,
            None => return,
        }
    };
    for (m, &c) in row.cells.iter().enumerate() {
        z[c as usize] += t * row.coef(m);
    }
}

/// Fits cell weights on a `grid_n³` grid under the selected constraints.
///
/// Returns `Ok` once every imposed residual is below `options.tolerance`,
/// or when progress stalls (an infeasible system, visible in the
/// residuals). Hitting `max_sweeps` while still improving is an error that
/// carries the best iterate.
pub fn fit_discrete_density(
    grid_n: usize,
    objective: Objective,
    constraints: ConstraintSet,
    options: &FitOptions,
) -> Result<DiscreteDensity, FitError> {
    if !(8..=64).contains(&grid_n) {
        return Err(FitError::InvalidGrid(grid_n));
    }
    let cells = grid_n * grid_n * grid_n;
    let rows = build_rows(grid_n, &constraints);
    let mut state = match objective {
        Objective::MaxEntropy => vec![1.0 / cells as f64; cells],
        Objective::MinL2 => vec![0.0; cells],
    };
    let weights_of = |state: &[f64]| -> Vec<f64> {
        match objective {
            Objective::MaxEntropy => state.to_vec(),
            Objective::MinL2 => state.iter().map(|z| z.max(0.0)).collect(),
        }
    };

    let mut scratch = Vec::new();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut last_gain = 0usize;
    let mut reference = f64::INFINITY;
    for sweep in 1..=options.max_sweeps {
        for row in &rows {
            match objective {
                Objective::MaxEntropy => entropy_project(row, &mut state),
                Objective::MinL2 => l2_project(row, &mut state, &mut scratch),
            }
        }
        let weights = weights_of(&state);
        let err = compute_residuals(grid_n, &weights).max_imposed(&constraints);
        if best.as_ref().map_or(true, |(e, _)| err < *e) {
            best = Some((err, weights));
        }
        if err <= options.tolerance {
            break;
        }
        if err < 0.1 * reference {
            reference = err;
            last_gain = sweep;
        } else if sweep - last_gain >= options.stall_sweeps {
            break;
        }
        if sweep == options.max_sweeps {
            let (_, weights) = best.take().expect("at least one sweep");
            return Err(FitError::NotConverged {
                sweeps: sweep,
                best: Box::new(DiscreteDensity::from_weights(grid_n, weights)?),
            });
        }
    }
    let (_, weights) = best.expect("at least one sweep");
    DiscreteDensity::from_weights(grid_n, weights)
}
