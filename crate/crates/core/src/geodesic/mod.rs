//! Geodesics of the stationary model space-time
//!
//! ```text
//! ds² = cos²ϑ dt² − dr² − r² dϑ² − r² sin²ϑ dφ² + 2 r sin²ϑ dt dφ
//! ```
//!
//! with its four first integrals `P`, `X`, `A`, `W`, orbit classification from
//! the radial turning-point quadratic, and the node-line precession.

mod export;
mod integrate;

pub use export::{
    export_cartesian, export_stereogram, stereogram_svg, trajectory_csv, GeodesicReport, StereoPoint,
    DEFAULT_STEREO_OFFSET_DEG,
};
pub use integrate::{integrate, Event, EventKind, Trajectory, TrajectoryStatus};

use std::f64::consts::{FRAC_PI_2, TAU};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::experiment::Spin;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeodesicError {
    #[error("invalid constants: {0}")]
    InvalidConstants(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("latitude forbidden: sin ϑ = {sin_theta} is below |X|/√A = {bound}")]
    LatitudeForbidden { sin_theta: f64, bound: f64 },
    #[error("radius forbidden: (U^r)² = {radicand} < 0")]
    RadiusForbidden { radicand: f64 },
    #[error("no real turning radius")]
    NoTurningPoint,
    #[error("tilt undefined for A = 0")]
    UndefinedTilt,
    #[error("P < 0: time-reversed geodesic")]
    TimeReversed,
    #[error("degenerate constants: {0}")]
    Degenerate(String),
    #[error("trajectory has fewer than two ascending nodes")]
    NoNodes,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("step size underflow at s = {s}")]
    StepUnderflow { s: f64, partial: Box<Trajectory> },
}

/// The four constants of motion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeodesicConstants {
    #[serde(rename = "P")]
    pub p: f64,
    #[serde(rename = "X")]
    pub x: f64,
    #[serde(rename = "A")]
    pub a: f64,
    /// Squared norm: `1` time-like, `0` light-like, `-1` space-like.
    #[serde(rename = "W")]
    pub w: f64,
}

impl GeodesicConstants {
    /// Validated constants: `A ≥ 0`, `X² ≤ A` and `W ∈ {-1, 0, 1}`.
    pub fn new(p: f64, x: f64, a: f64, w: f64) -> Result<Self, GeodesicError> {
        if ![p, x, a, w].iter().all(|v| v.is_finite()) {
            return Err(GeodesicError::InvalidConstants("non-finite value".into()));
        }
        if a < 0.0 {
            return Err(GeodesicError::InvalidConstants(format!("A = {a} < 0")));
        }
        if x * x > a * (1.0 + 1e-12) {
            return Err(GeodesicError::InvalidConstants(format!(
                "X² = {} exceeds A = {a}",
                x * x
            )));
        }
        if ![-1.0, 0.0, 1.0].contains(&w) {
            return Err(GeodesicError::InvalidConstants(format!("W = {w} is not -1, 0 or 1")));
        }
        Ok(GeodesicConstants { p, x, a, w })
    }

    /// Reference orbit constants `A = 4, P = 5, W = 1` with the given `X`.
    pub fn reference(x: f64) -> Self {
        GeodesicConstants {
            p: 5.0,
            x,
            a: 4.0,
            w: 1.0,
        }
    }
}

/// Position and velocity along a geodesic, parametrized by `s`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeodesicState {
    pub s: f64,
    pub t: f64,
    pub r: f64,
    pub theta: f64,
    pub phi: f64,
    pub ut: f64,
    pub ur: f64,
    pub utheta: f64,
    pub uphi: f64,
}

impl GeodesicState {
    pub(crate) fn to_array(self) -> [f64; 8] {
        [
            self.t,
            self.r,
            self.theta,
            self.phi,
            self.ut,
            self.ur,
            self.utheta,
            self.uphi,
        ]
    }

    pub(crate) fn from_array(s: f64, y: &[f64; 8]) -> Self {
        GeodesicState {
            s,
            t: y[0],
            r: y[1],
            theta: y[2],
            phi: y[3],
            ut: y[4],
            ur: y[5],
            utheta: y[6],
            uphi: y[7],
        }
    }

    pub fn validate(&self) -> Result<(), GeodesicError> {
        if !self.to_array().iter().chain([&self.s]).all(|v| v.is_finite()) {
            return Err(GeodesicError::InvalidState("non-finite component".into()));
        }
        if self.r <= 0.0 {
            return Err(GeodesicError::InvalidState(format!("r = {} ≤ 0", self.r)));
        }
        if !(self.theta > 0.0 && self.theta < std::f64::consts::PI) {
            return Err(GeodesicError::InvalidState(format!(
                "ϑ = {} outside (0, π)",
                self.theta
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    fn apply(self, v: f64) -> f64 {
        match self {
            Sign::Plus => v,
            Sign::Minus => -v,
        }
    }
}

/// `P, X, A, W` evaluated at a state.
pub fn constants_from_state(y: &GeodesicState) -> GeodesicConstants {
    let (sin, cos) = y.theta.sin_cos();
    let k = y.ut - y.r * y.uphi;
    GeodesicConstants {
        p: cos * cos * y.ut + y.r * sin * sin * y.uphi,
        x: y.r * sin * sin * k,
        a: (y.r * y.r * y.utheta).powi(2) + (y.r * sin * k).powi(2),
        w: (cos * y.ut).powi(2) - y.ur * y.ur - (y.r * y.utheta).powi(2) - (y.r * sin * y.uphi).powi(2)
            + 2.0 * y.r * sin * sin * y.ut * y.uphi,
    }
}

/// Radicands within this relative distance of zero are treated as zero.
const RADICAND_SLACK: f64 = 1e-12;

/// The state at `(r0, theta0)` with `t = φ = 0` carrying the given
/// constants.
pub fn state_from_constants(
    c: &GeodesicConstants,
    r0: f64,
    theta0: f64,
    sign_ur: Sign,
    sign_utheta: Sign,
) -> Result<GeodesicState, GeodesicError> {
    if r0.is_nan() || r0 <= 0.0 || !(theta0 > 0.0 && theta0 < std::f64::consts::PI) {
        return Err(GeodesicError::InvalidState(format!("r0 = {r0}, ϑ0 = {theta0}")));
    }
    let (sin, cos) = theta0.sin_cos();
    let cot2 = (cos / sin).powi(2);
    let x2_sin2 = c.x * c.x / (sin * sin);
    let mut lat = c.a - x2_sin2;
    if lat < 0.0 {
        if lat < -RADICAND_SLACK * c.a.max(x2_sin2) {
            return Err(GeodesicError::LatitudeForbidden {
                sin_theta: sin,
                bound: if c.a > 0.0 {
                    c.x.abs() / c.a.sqrt()
                } else {
                    f64::INFINITY
                },
            });
        }
        lat = 0.0;
    }
    let terms = [-(c.a - c.x * c.x) / (r0 * r0), 2.0 * c.p * c.x / r0, c.p * c.p, -c.w];
    let mut rad: f64 = terms.iter().sum();
    if rad < 0.0 {
        let scale: f64 = terms.iter().map(|t| t.abs()).sum();
        if rad < -RADICAND_SLACK * scale {
            return Err(GeodesicError::RadiusForbidden { radicand: rad });
        }
        rad = 0.0;
    }
    Ok(GeodesicState {
        s: 0.0,
        t: 0.0,
        r: r0,
        theta: theta0,
        phi: 0.0,
        ut: c.p + c.x / r0,
        ur: sign_ur.apply(rad.sqrt()),
        utheta: sign_utheta.apply((lat / r0.powi(4)).sqrt()),
        uphi: (c.p - c.x * cot2 / r0) / r0,
    })
}

/// Derivatives with respect to `s` of `(t, r, ϑ, φ, U^t, U^r, U^ϑ, U^φ)`.
pub fn eom_rhs(y: &GeodesicState) -> [f64; 8] {
    rhs(&y.to_array())
}

pub(crate) fn rhs(y: &[f64; 8]) -> [f64; 8] {
    let [_, r, theta, _, ut, ur, uth, uph] = *y;
    let (sin, cos) = theta.sin_cos();
    let k = sin * (ut - r * uph);
    let ruth = r * uth;
    [
        ut,
        ur,
        uth,
        uph,
        -ur * sin * k / r,
        (ruth * ruth - r * uph * sin * k) / r,
        (-2.0 * ur * ruth + cos / sin * k * k) / (r * r),
        (-ur * r * uph * sin + ur * cos * cos * k + 2.0 * cos / sin * ruth * k) / (r * r * sin),
    ]
}

/// Maximum relative drift `|C(s) − C(0)| / max(1, |C(0)|)` of each constant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Drift {
    #[serde(rename = "P")]
    pub p: f64,
    #[serde(rename = "X")]
    pub x: f64,
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "W")]
    pub w: f64,
}

impl Drift {
    pub fn between(c0: &GeodesicConstants, c: &GeodesicConstants) -> Drift {
        let rel = |a: f64, b: f64| (b - a).abs() / a.abs().max(1.0);
        Drift {
            p: rel(c0.p, c.p),
            x: rel(c0.x, c.x),
            a: rel(c0.a, c.a),
            w: rel(c0.w, c.w),
        }
    }

    pub fn max(&self) -> f64 {
        self.p.max(self.x).max(self.a).max(self.w)
    }

    fn merge(self, o: Drift) -> Drift {
        Drift {
            p: self.p.max(o.p),
            x: self.x.max(o.x),
            a: self.a.max(o.a),
            w: self.w.max(o.w),
        }
    }
}

pub fn conserved_drift(traj: &Trajectory) -> Drift {
    let Some(first) = traj.samples.first() else {
        return Drift::default();
    };
    let c0 = constants_from_state(first);
    traj.samples
        .iter()
        .map(|y| Drift::between(&c0, &constants_from_state(y)))
        .fold(Drift::default(), Drift::merge)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "class", rename_all = "snake_case")]
pub enum OrbitClass {
    Bound { r_min: f64, r_max: f64 },
    Circular { r: f64 },
    Unbound { r_min: f64 },
    BarelyUnbound { r_min: f64 },
}

impl OrbitClass {
    pub fn r_min(&self) -> f64 {
        match *self {
            OrbitClass::Bound { r_min, .. } | OrbitClass::Unbound { r_min } | OrbitClass::BarelyUnbound { r_min } => {
                r_min
            }
            OrbitClass::Circular { r } => r,
        }
    }

    pub fn r_max(&self) -> Option<f64> {
        match *self {
            OrbitClass::Bound { r_max, .. } => Some(r_max),
            OrbitClass::Circular { r } => Some(r),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OrbitClass::Bound { .. } => "bound",
            OrbitClass::Circular { .. } => "circular",
            OrbitClass::Unbound { .. } => "unbound",
            OrbitClass::BarelyUnbound { .. } => "barely_unbound",
        }
    }
}

/// Roots in `1/r` of `(U^r)² = 0` and the resulting orbit type.
///
/// When `A = X²` the radial equation is linear in `1/r`; with `PX > 0` the
/// admissible region is `r ≤ r*` and the orbit is reported bound with
/// `r_min = 0`.
pub fn classify_orbit(c: &GeodesicConstants) -> Result<OrbitClass, GeodesicError> {
    let c = GeodesicConstants::new(c.p, c.x, c.a, c.w)?;
    let curvature = c.a - c.x * c.x;
    let px = c.p * c.x;
    if curvature <= 1e-12 * c.a {
        if px == 0.0 {
            return Err(GeodesicError::NoTurningPoint);
        }
        let u = (c.w - c.p * c.p) / (2.0 * px);
        return match (u > 0.0, px > 0.0) {
            (true, true) => Ok(OrbitClass::Bound {
                r_min: 0.0,
                r_max: 1.0 / u,
            }),
            (true, false) => Ok(OrbitClass::Unbound { r_min: 1.0 / u }),
            _ => Err(GeodesicError::NoTurningPoint),
        };
    }
    let scale = c.a * c.p * c.p + c.a * c.w.abs() + c.x * c.x * c.w.abs();
    let disc = c.a * c.p * c.p - c.a * c.w + c.x * c.x * c.w;
    if disc < -1e-12 * scale {
        return Err(GeodesicError::NoTurningPoint);
    }
    if disc.abs() <= 1e-12 * scale {
        let u = px / curvature;
        return if u > 0.0 {
            Ok(OrbitClass::Circular { r: 1.0 / u })
        } else {
            Err(GeodesicError::NoTurningPoint)
        };
    }
    let root = disc.sqrt();
    let (hi, lo) = ((px + root) / curvature, (px - root) / curvature);
    let zero = 1e-12 * hi.abs().max(1.0);
    if hi <= 0.0 {
        Err(GeodesicError::NoTurningPoint)
    } else if lo.abs() <= zero {
        Ok(OrbitClass::BarelyUnbound { r_min: 1.0 / hi })
    } else if lo > 0.0 {
        Ok(OrbitClass::Bound {
            r_min: 1.0 / hi,
            r_max: 1.0 / lo,
        })
    } else {
        Ok(OrbitClass::Unbound { r_min: 1.0 / hi })
    }
}

/// Orbital-plane tilt `S = X/√A`; `|S| = 1` is equatorial.
pub fn tilt(c: &GeodesicConstants) -> Result<f64, GeodesicError> {
    if c.a <= 0.0 {
        return Err(GeodesicError::UndefinedTilt);
    }
    Ok((c.x / c.a.sqrt()).clamp(-1.0, 1.0))
}

/// Mismatch of the energy balance: `(P² − W)/2` against radial plus
/// tangential kinetic terms and the `1/r`, `1/r²` potentials.
pub fn energy_residual(y: &GeodesicState) -> f64 {
    let c = constants_from_state(y);
    let sin = y.theta.sin();
    let tangential = (y.r * y.utheta).powi(2) + (sin * (y.ut - y.r * y.uphi)).powi(2);
    let rhs = 0.5 * (y.ur * y.ur + tangential) - c.x * c.p / y.r - c.x * c.x / (2.0 * y.r * y.r);
    (0.5 * (c.p * c.p - c.w) - rhs).abs()
}

/// Spin reading of a geodesic: for forward time (`P > 0`) the sign of `X`.
pub fn spin_outcome(c: &GeodesicConstants) -> Result<Spin, GeodesicError> {
    if c.p < 0.0 {
        return Err(GeodesicError::TimeReversed);
    }
    if c.p == 0.0 {
        return Err(GeodesicError::Degenerate("P = 0".into()));
    }
    if c.x == 0.0 {
        return Err(GeodesicError::Degenerate("X = 0".into()));
    }
    Ok(if c.x > 0.0 { Spin::Up } else { Spin::Down })
}

/// Node-line rate between two successive ascending equatorial crossings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeRate {
    pub t_start: f64,
    pub t_end: f64,
    pub psi_start: f64,
    pub psi_end: f64,
    /// `dψ/dt` over the interval.
    pub measured: f64,
    /// Time-averaged radius over the interval.
    pub mean_r: f64,
    /// `1 / mean_r`.
    pub predicted: f64,
}

/// Node-line precession measured from the ascending nodes of `traj`.
///
/// Between successive ascending nodes the particle completes one turn
/// relative to the orbital plane, in the sense opposite to `sign(X)`, so
/// the node line advances by `Δφ + 2π·sign(X)`.
pub fn node_precession(traj: &Trajectory) -> Result<Vec<NodeRate>, GeodesicError> {
    let c = traj.constants;
    if c.a > 0.0 && tilt(&c)?.abs() >= 1.0 - 1e-12 {
        return Err(GeodesicError::NoNodes);
    }
    let nodes: Vec<&GeodesicState> = traj
        .events
        .iter()
        .filter(|e| e.kind == EventKind::Equatorial { ascending: true })
        .map(|e| &e.state)
        .collect();
    if nodes.len() < 2 {
        return Err(GeodesicError::NoNodes);
    }
    let turn = TAU * c.x.signum();
    Ok(nodes
        .windows(2)
        .map(|w| {
            let (a, b) = (w[0], w[1]);
            let dt = b.t - a.t;
            let mean_r = time_average_r(traj, a, b);
            NodeRate {
                t_start: a.t,
                t_end: b.t,
                psi_start: a.phi,
                psi_end: b.phi + turn,
                measured: (b.phi - a.phi + turn) / dt,
                mean_r,
                predicted: 1.0 / mean_r,
            }
        })
        .collect())
}

/// Trapezoidal `∫ r dt / Δt` over samples between two event states.
fn time_average_r(traj: &Trajectory, a: &GeodesicState, b: &GeodesicState) -> f64 {
    let mut pts: Vec<(f64, f64)> = vec![(a.t, a.r)];
    pts.extend(
        traj.samples
            .iter()
            .filter(|y| y.s > a.s && y.s < b.s)
            .map(|y| (y.t, y.r)),
    );
    pts.push((b.t, b.r));
    let area: f64 = pts
        .windows(2)
        .map(|w| 0.5 * (w[0].1 + w[1].1) * (w[1].0 - w[0].0))
        .sum();
    area / (b.t - a.t)
}

/// Latitude bound `sin ϑ ≥ |S|` as a polar-angle interval around the equator.
pub fn latitude_band(c: &GeodesicConstants) -> Result<(f64, f64), GeodesicError> {
    let s = tilt(c)?.abs();
    let half = FRAC_PI_2 - s.asin();
    Ok((FRAC_PI_2 - half, FRAC_PI_2 + half))
}

#[cfg(test)]
mod tests;
