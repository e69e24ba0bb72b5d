use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{
    classify_orbit, conserved_drift, constants_from_state, node_precession, spin_outcome, tilt, Drift, EventKind,
    GeodesicConstants, NodeRate, Trajectory, TrajectoryStatus,
};
use crate::experiment::Spin;

pub const DEFAULT_STEREO_OFFSET_DEG: f64 = 4.0;

const CSV_HEADER: &str = "s,t,r,theta,phi,Ut,Ur,Utheta,Uphi,drift_P,drift_X,drift_A,drift_W";

/// One row per sample, with drift of each constant relative to the first.
pub fn trajectory_csv(traj: &Trajectory) -> String {
    let mut out = String::with_capacity(160 * (traj.samples.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    let c0 = traj.samples.first().map(constants_from_state);
    for y in &traj.samples {
        let d = c0
            .map(|c0| Drift::between(&c0, &constants_from_state(y)))
            .unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{:e},{:e},{:e},{:e}",
            y.s, y.t, y.r, y.theta, y.phi, y.ut, y.ur, y.utheta, y.uphi, d.p, d.x, d.a, d.w
        );
    }
    out
}

/// `(r sin ϑ cos φ, r sin ϑ sin φ, r cos ϑ)` per sample.
pub fn export_cartesian(traj: &Trajectory) -> Vec<[f64; 3]> {
    traj.samples
        .iter()
        .map(|y| {
            let (st, ct) = y.theta.sin_cos();
            let (sp, cp) = y.phi.sin_cos();
            [y.r * st * cp, y.r * st * sp, y.r * ct]
        })
        .collect()
}

/// Projections of one sample for the two views of a stereo pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StereoPoint {
    pub s: f64,
    pub left: [f64; 2],
    pub right: [f64; 2],
}

/// Orthographic views onto the plane containing the z axis, turned by
/// `∓offset/2` about z.
pub fn export_stereogram(traj: &Trajectory, offset_deg: f64) -> Vec<StereoPoint> {
    let half = 0.5 * offset_deg.to_radians();
    let view = |p: &[f64; 3], a: f64| -> [f64; 2] {
        let (s, c) = a.sin_cos();
        [p[0] * c - p[1] * s, p[2]]
    };
    traj.samples
        .iter()
        .zip(export_cartesian(traj))
        .map(|(y, p)| StereoPoint {
            s: y.s,
            left: view(&p, -half),
            right: view(&p, half),
        })
        .collect()
}

/// Side-by-side polylines of a stereo pair.
pub fn stereogram_svg(points: &[StereoPoint]) -> String {
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in points {
        for q in [p.left, p.right] {
            for k in 0..2 {
                lo[k] = lo[k].min(q[k]);
                hi[k] = hi[k].max(q[k]);
            }
        }
    }
    let panel = 400.0;
    let margin = 10.0;
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-12);
    let scale = (panel - 2.0 * margin) / span;
    let polyline = |pick: fn(&StereoPoint) -> [f64; 2], dx: f64| -> String {
        let mut pts = String::new();
        for p in points {
            let q = pick(p);
            let x = dx + margin + (q[0] - lo[0]) * scale;
            let y = panel - margin - (q[1] - lo[1]) * scale;
            let _ = write!(pts, "{x:.3},{y:.3} ");
        }
        format!(
            "  <polyline fill=\"none\" stroke=\"black\" stroke-width=\"1\" points=\"{}\"/>\n",
            pts.trim_end()
        )
    };
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{panel}\" viewBox=\"0 0 {} {panel}\">\n",
        2.0 * panel,
        2.0 * panel
    );
    svg.push_str(&polyline(|p| p.left, 0.0));
    svg.push_str(&polyline(|p| p.right, panel));
    svg.push_str("</svg>\n");
    svg
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeodesicReport {
    pub constants: GeodesicConstants,
    /// `None` when the radial equation has no admissible turning radius.
    pub orbit_class: Option<String>,
    /// Turning radii from the constants.
    pub r_min: Option<f64>,
    pub r_max: Option<f64>,
    pub tilt: Option<f64>,
    pub spin: Option<Spin>,
    pub status: TrajectoryStatus,
    pub samples: usize,
    pub radial_turning_points: usize,
    pub equatorial_crossings: usize,
    pub sampled_min_r: f64,
    pub sampled_max_r: f64,
    pub sampled_min_sin_theta: f64,
    pub drift: Drift,
    pub node_rates: Vec<NodeRate>,
}

impl GeodesicReport {
    pub fn new(constants: &GeodesicConstants, traj: &Trajectory) -> Self {
        let orbit = classify_orbit(constants).ok();
        GeodesicReport {
            constants: *constants,
            orbit_class: orbit.map(|o| o.name().to_owned()),
            r_min: orbit.map(|o| o.r_min()),
            r_max: orbit.and_then(|o| o.r_max()),
            tilt: tilt(constants).ok(),
            spin: spin_outcome(constants).ok(),
            status: traj.status,
            samples: traj.samples.len(),
            radial_turning_points: traj.count(|k| *k == EventKind::RadialTurning),
            equatorial_crossings: traj.count(|k| matches!(k, EventKind::Equatorial { .. })),
            sampled_min_r: traj.min_r(),
            sampled_max_r: traj.max_r(),
            sampled_min_sin_theta: traj.min_sin_theta(),
            drift: conserved_drift(traj),
            node_rates: node_precession(traj).unwrap_or_default(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plain data");
        s.push('\n');
        s
    }
}
