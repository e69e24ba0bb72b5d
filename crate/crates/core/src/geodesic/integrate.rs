//! Adaptive Dormand-Prince 5(4) integration with event location.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use super::{constants_from_state, rhs, tilt, GeodesicConstants, GeodesicError, GeodesicState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventKind {
    /// `ϑ = π/2`; ascending when `ϑ` decreases (moving north).
    Equatorial { ascending: bool },
    /// `U^r = 0`.
    RadialTurning,
    /// `U^ϑ = 0`, the extreme latitudes.
    LatitudeTurning,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub kind: EventKind,
    pub state: GeodesicState,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryStatus {
    Completed,
    /// Stopped because `r` fell below its floor.
    RadiusGuard,
    /// Stopped because `sin ϑ` fell below its floor.
    LatitudeGuard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// Initial state and one state per accepted step.
    pub samples: Vec<GeodesicState>,
    /// Time ordered.
    pub events: Vec<Event>,
    /// Constants evaluated at the initial state.
    pub constants: GeodesicConstants,
    pub status: TrajectoryStatus,
}

impl Trajectory {
    fn states(&self) -> impl Iterator<Item = &GeodesicState> {
        self.samples.iter().chain(self.events.iter().map(|e| &e.state))
    }

    /// Smallest radius over samples and located events.
    pub fn min_r(&self) -> f64 {
        self.states().map(|y| y.r).fold(f64::INFINITY, f64::min)
    }

    pub fn max_r(&self) -> f64 {
        self.states().map(|y| y.r).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_sin_theta(&self) -> f64 {
        self.states().map(|y| y.theta.sin()).fold(f64::INFINITY, f64::min)
    }

    pub fn count(&self, pred: impl Fn(&EventKind) -> bool) -> usize {
        self.events.iter().filter(|e| pred(&e.kind)).count()
    }

    pub fn last(&self) -> &GeodesicState {
        self.samples.last().expect("trajectory holds its initial state")
    }
}

const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
/// Fifth-order weights minus embedded fourth-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

type Y = [f64; 8];

fn axpy(y: &Y, h: f64, ks: &[Y], coeffs: &[f64]) -> Y {
    let mut out = *y;
    for (k, &a) in ks.iter().zip(coeffs) {
        if a != 0.0 {
            for i in 0..8 {
                out[i] += h * a * k[i];
            }
        }
    }
    out
}

/// One step of size `h` from `y` with `f0 = f(y)`; returns the new state,
/// its derivative and the error estimate.
fn dp_step(y: &Y, f0: &Y, h: f64) -> (Y, Y, Y) {
    let mut k = [[0.0; 8]; 7];
    k[0] = *f0;
    for stage in 1..7 {
        let yi = axpy(y, h, &k[..stage], &A[stage][..stage]);
        k[stage] = rhs(&yi);
    }
    let y1 = axpy(y, h, &k[..6], &A[6]);
    let mut err = [0.0; 8];
    for (i, e) in err.iter_mut().enumerate() {
        *e = h * (0..7).map(|s| E[s] * k[s][i]).sum::<f64>();
    }
    (y1, k[6], err)
}

fn error_norm(err: &Y, y0: &Y, y1: &Y, rtol: f64, atol: f64) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..8 {
        let sc = atol + rtol * y0[i].abs().max(y1[i].abs());
        let e = err[i] / sc;
        if !e.is_finite() {
            return f64::INFINITY;
        }
        worst = worst.max(e.abs());
    }
    worst
}

fn initial_step(y: &Y, f0: &Y, rtol: f64, atol: f64, span: f64) -> f64 {
    let norm = |v: &Y| -> f64 {
        (0..8)
            .map(|i| v[i].abs() / (atol + rtol * y[i].abs()))
            .fold(0.0, f64::max)
    };
    let (d0, d1) = (norm(y), norm(f0));
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let y1 = axpy(y, h0, &[*f0], &[1.0]);
    let f1 = rhs(&y1);
    let mut diff = [0.0; 8];
    for i in 0..8 {
        diff[i] = f1[i] - f0[i];
    }
    let d2 = norm(&diff) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    (100.0 * h0).min(h1).min(span)
}

/// Event functions on the state vector and their `s`-derivatives.
fn event_value(kind: usize, y: &Y, f: &Y) -> (f64, f64) {
    match kind {
        0 => (y[2] - FRAC_PI_2, f[2]),
        1 => (y[5], f[5]),
        _ => (y[6], f[6]),
    }
}

/// Crossings whose function moves slower than this at both ends are
/// numerical noise around an identically vanishing quantity.
const EVENT_RATE_FLOOR: f64 = 1e-9;
const EVENT_S_TOL: f64 = 1e-10;

/// Per-step tolerances are this fraction of the requested ones, so that
/// the accumulated error over a run stays near the requested level.
const LOCAL_TOL_FRACTION: f64 = 0.1;

/// Integrates the geodesic equations from `state0` over `s ∈ [s0, s0 + s_span]`.
///
/// Stops early (with a flagged status) if `r < 1e-9` or
/// `sin ϑ < max(1e-8, |S|/2)`.
pub fn integrate(state0: &GeodesicState, s_span: f64, rel_tol: f64, abs_tol: f64) -> Result<Trajectory, GeodesicError> {
    state0.validate()?;
    for (name, tol) in [("rel_tol", rel_tol), ("abs_tol", abs_tol)] {
        if !(1e-12..=1e-3).contains(&tol) {
            return Err(GeodesicError::InvalidArgument(format!(
                "{name} = {tol} outside [1e-12, 1e-3]"
            )));
        }
    }
    if !(s_span.is_finite() && s_span >= 0.0) {
        return Err(GeodesicError::InvalidArgument(format!("s_span = {s_span}")));
    }
    let (rel_tol, abs_tol) = (rel_tol * LOCAL_TOL_FRACTION, abs_tol * LOCAL_TOL_FRACTION);
    let constants = constants_from_state(state0);
    let s_tilt = tilt(&constants).map(f64::abs).unwrap_or(0.0);
    let sin_floor = (s_tilt / 2.0).max(1e-8);

    let mut traj = Trajectory {
        samples: vec![*state0],
        events: Vec::new(),
        constants,
        status: TrajectoryStatus::Completed,
    };
    let s_end = state0.s + s_span;
    let mut s = state0.s;
    let mut y = state0.to_array();
    let mut f = rhs(&y);
    if s_span == 0.0 {
        return Ok(traj);
    }
    let mut h = initial_step(&y, &f, rel_tol, abs_tol, s_span);

    while s < s_end {
        let last = s + h >= s_end;
        if last {
            h = s_end - s;
        }
        let (y1, f1, err) = dp_step(&y, &f, h);
        let e = error_norm(&err, &y, &y1, rel_tol, abs_tol);
        if e > 1.0 {
            h *= (0.9 * e.powf(-0.2)).clamp(0.1, 0.9);
            if h <= 1e-14 * s.abs().max(1.0) {
                return Err(GeodesicError::StepUnderflow {
                    s,
                    partial: Box::new(traj),
                });
            }
            continue;
        }
        let s1 = if last { s_end } else { s + h };
        locate_events(&mut traj, s, &y, &f, s1, &y1, &f1);
        s = s1;
        y = y1;
        f = f1;
        traj.samples.push(GeodesicState::from_array(s, &y));
        if y[1] < 1e-9 {
            traj.status = TrajectoryStatus::RadiusGuard;
            break;
        }
        if y[2].sin() < sin_floor {
            traj.status = TrajectoryStatus::LatitudeGuard;
            break;
        }
        let grow = if e == 0.0 {
            5.0
        } else {
            (0.9 * e.powf(-0.2)).clamp(0.2, 5.0)
        };
        h *= grow;
    }
    Ok(traj)
}

fn locate_events(traj: &mut Trajectory, s0: f64, y0: &Y, f0: &Y, s1: f64, y1: &Y, f1: &Y) {
    let mut found = Vec::new();
    for kind in 0..3 {
        let (g0, d0) = event_value(kind, y0, f0);
        let (g1, d1) = event_value(kind, y1, f1);
        if g0 == 0.0 || g0.signum() == g1.signum() && g1 != 0.0 {
            continue;
        }
        if d0.abs() < EVENT_RATE_FLOOR && d1.abs() < EVENT_RATE_FLOOR {
            continue;
        }
        // Bisection on the local solution: a fresh step of length σ from s0.
        let (mut lo, mut hi) = (0.0, s1 - s0);
        while hi - lo > EVENT_S_TOL {
            let mid = 0.5 * (lo + hi);
            let (ym, fm, _) = dp_step(y0, f0, mid);
            let (gm, _) = event_value(kind, &ym, &fm);
            if gm == 0.0 {
                lo = mid;
                hi = mid;
            } else if gm.signum() == g0.signum() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let sigma = 0.5 * (lo + hi);
        let (ye, _, _) = dp_step(y0, f0, sigma);
        let kind = match kind {
            0 => EventKind::Equatorial { ascending: g1 < g0 },
            1 => EventKind::RadialTurning,
            _ => EventKind::LatitudeTurning,
        };
        found.push(Event {
            kind,
            state: GeodesicState::from_array(s0 + sigma, &ye),
        });
    }
    found.sort_by(|a, b| a.state.s.total_cmp(&b.state.s));
    traj.events.extend(found);
}
