//! Joint distributions of the three inner products `(Z_A, Z_B, Z_AB)`.
//!
//! `Z_A` and `Z_B` are the projections of the two instrument axes on the
//! hidden spin axis and `Z_AB = -a·b` is the (negated) cosine between the
//! instruments. A measurement outcome is the sign of the corresponding `Z`.
//!
//! Three families live here: the density of three independent isotropic
//! vectors, the independent (factorized) product of uniform marginals, and
//! the tetrahedral delta distribution whose support is the four faces
//! through the cube corners `(1,-1,-1)`, `(-1,1,-1)`, `(-1,-1,1)`, `(1,1,1)`.

mod fit;
mod verify;

pub use fit::{fit_discrete_density, ConstraintSet, DiscreteDensity, FitError, FitOptions, Objective, Residuals};
pub use verify::{verify_marginals, ConditionalBin, ConstraintCheck, ConstraintReport};

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{sample_uniform_direction, Angle, RandomStream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HiddenError {
    #[error("{name} = {value} is outside [-1, 1]")]
    OutOfRange { name: &'static str, value: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("sampler failed: {0}")]
    Sampler(String),
}

/// The three inner products parameterizing one measurement configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiddenTriple {
    pub z_a: f64,
    pub z_b: f64,
    pub z_ab: f64,
}

impl HiddenTriple {
    pub fn new(z_a: f64, z_b: f64, z_ab: f64) -> Result<Self, HiddenError> {
        check_unit("z_a", z_a)?;
        check_unit("z_b", z_b)?;
        check_unit("z_ab", z_ab)?;
        Ok(HiddenTriple { z_a, z_b, z_ab })
    }
}

fn check_unit(name: &'static str, value: f64) -> Result<(), HiddenError> {
    if (-1.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(HiddenError::OutOfRange { name, value })
    }
}

/// Gram determinant `1 + 2stu - s² - t² - u²` of three unit vectors with
/// pairwise cosines `s`, `t`, `u`.
pub fn gram_determinant(s: f64, t: f64, u: f64) -> f64 {
    1.0 + 2.0 * s * t * u - s * s - t * t - u * u
}

/// Joint density of `(a·c, b·c, a·b)` for three independent isotropic unit
/// vectors: `1 / (4π √D)` inside the elliptope `D > 0`, zero outside.
///
/// The normalization integrates to one over `[-1, 1]³`; see
/// [`classical_u_mass`] for the slab-integrated form.
pub fn classical_density(s: f64, t: f64, u: f64) -> f64 {
    let d = gram_determinant(s, t, u);
    if d > 0.0 {
        1.0 / (4.0 * PI * d.sqrt())
    } else {
        0.0
    }
}

/// Probability mass of [`classical_density`] in the slab `u ∈ [u0, u1]` at
/// fixed `(s, t)`, i.e. `∫ ρ du`. Conditionally on `(s, t)`, `u` follows an
/// arcsine law centred at `st` with half-width `√((1-s²)(1-t²))`.
pub fn classical_u_mass(s: f64, t: f64, u0: f64, u1: f64) -> f64 {
    let half = ((1.0 - s * s) * (1.0 - t * t)).max(0.0).sqrt();
    if half == 0.0 {
        let c = s * t;
        return if u0 <= c && c < u1 { 0.25 } else { 0.0 };
    }
    let z = |u: f64| (((u - s * t) / half).clamp(-1.0, 1.0)).asin();
    (z(u1) - z(u0)) / (4.0 * PI)
}

/// Allowed range of the third side of a spherical triangle with sides
/// `alpha1`, `alpha2`: `[|α₁-α₂|, min(α₁+α₂, 2π-α₁-α₂)]`.
pub fn triangle_bounds(alpha1: Angle, alpha2: Angle) -> (Angle, Angle) {
    let (a1, a2) = (alpha1.radians(), alpha2.radians());
    let lo = (a1 - a2).abs();
    let hi = (a1 + a2).min(TAU - a1 - a2);
    (Angle::clamped(lo), Angle::clamped(hi))
}

const BRANCH_TOL: f64 = 1e-12;

/// Values of `z_b` on the tetrahedral support for given `(z_a, z_ab)`.
///
/// Each of the four faces is a linear relation between the three
/// coordinates; candidates outside `[-1, 1]` (beyond a `1e-12` slack) are
/// discarded and coincident roots merged. Generic inputs give two values,
/// sorted in descending order.
pub fn tetra_branches(z_a: f64, z_ab: f64) -> Vec<f64> {
    let candidates = [-1.0 - z_a - z_ab, z_a - z_ab + 1.0, 1.0 + z_ab - z_a, z_a + z_ab - 1.0];
    let mut out: Vec<f64> = Vec::with_capacity(2);
    for c in candidates {
        if !(-1.0 - BRANCH_TOL..=1.0 + BRANCH_TOL).contains(&c) {
            continue;
        }
        let c = c.clamp(-1.0, 1.0);
        if out.iter().all(|&o| (o - c).abs() > BRANCH_TOL) {
            out.push(c);
        }
    }
    out.sort_by(|a, b| b.total_cmp(a));
    out
}

/// Residuals of the four face relations at `(z_a, z_b, z_ab)`.
pub fn tetra_face_residuals(z_a: f64, z_b: f64, z_ab: f64) -> [f64; 4] {
    [
        z_a + z_b + z_ab + 1.0,
        z_a - z_b - z_ab + 1.0,
        z_a + z_b - z_ab - 1.0,
        z_a - z_b + z_ab - 1.0,
    ]
}

/// Draws `(z_a, z_b)` from the tetrahedral distribution conditioned on
/// `z_ab`: `z_a` uniform, then a fair choice between the two faces the
/// vertical line through `(z_a, z_ab)` meets.
pub fn tetra_sample(z_ab: f64, rng: &mut RandomStream) -> Result<(f64, f64), HiddenError> {
    check_unit("z_ab", z_ab)?;
    let z_a = 2.0 * rng.uniform() - 1.0;
    let branches = tetra_branches(z_a, z_ab);
    let z_b = match branches.as_slice() {
        [only] => *only,
        [first, second] => {
            if rng.coin() {
                *first
            } else {
                *second
            }
        }
        other => {
            return Err(HiddenError::Sampler(format!(
                "tetrahedral support gave {} roots at z_a={z_a}, z_ab={z_ab}",
                other.len()
            )))
        }
    };
    Ok((z_a, z_b))
}

/// Three independent uniforms on `[-1, 1]`.
pub fn sample_factorized(rng: &mut RandomStream) -> HiddenTriple {
    HiddenTriple {
        z_a: 2.0 * rng.uniform() - 1.0,
        z_b: 2.0 * rng.uniform() - 1.0,
        z_ab: 2.0 * rng.uniform() - 1.0,
    }
}

/// Inner products `(a·c, b·c, a·b)` of three independent isotropic vectors.
pub fn sample_classical(rng: &mut RandomStream) -> HiddenTriple {
    let a = sample_uniform_direction(rng);
    let b = sample_uniform_direction(rng);
    let c = sample_uniform_direction(rng);
    HiddenTriple {
        z_a: a.dot(&c).clamp(-1.0, 1.0),
        z_b: b.dot(&c).clamp(-1.0, 1.0),
        z_ab: a.dot(&b).clamp(-1.0, 1.0),
    }
}

/// A source of hidden triples.
pub trait HiddenSampler: Sync {
    fn sample(&self, rng: &mut RandomStream) -> Result<HiddenTriple, HiddenError>;
}

impl<F> HiddenSampler for F
where
    F: Fn(&mut RandomStream) -> Result<HiddenTriple, HiddenError> + Sync,
{
    fn sample(&self, rng: &mut RandomStream) -> Result<HiddenTriple, HiddenError> {
        self(rng)
    }
}

/// The built-in samplers, selectable by name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    /// `z_ab ~ U[-1, 1]` followed by [`tetra_sample`].
    Tetrahedron,
    /// [`sample_factorized`].
    Factorized,
    /// [`sample_classical`].
    Classical,
}

impl HiddenSampler for SamplerKind {
    fn sample(&self, rng: &mut RandomStream) -> Result<HiddenTriple, HiddenError> {
        match self {
            SamplerKind::Tetrahedron => {
                let z_ab = 2.0 * rng.uniform() - 1.0;
                let (z_a, z_b) = tetra_sample(z_ab, rng)?;
                Ok(HiddenTriple { z_a, z_b, z_ab })
            }
            SamplerKind::Factorized => Ok(sample_factorized(rng)),
            SamplerKind::Classical => Ok(sample_classical(rng)),
        }
    }
}

impl std::str::FromStr for SamplerKind {
    type Err = HiddenError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tetrahedron" => Ok(SamplerKind::Tetrahedron),
            "factorized" => Ok(SamplerKind::Factorized),
            "classical" => Ok(SamplerKind::Classical),
            other => Err(HiddenError::InvalidArgument(format!(
                "unknown sampler `{other}` (expected tetrahedron, factorized or classical)"
            ))),
        }
    }
}
