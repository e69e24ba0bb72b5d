//! Directions on the unit sphere, angles between them, and the seeded random
//! streams every stochastic routine in the crate draws from.

use std::f64::consts::{PI, TAU};
use std::fmt;

use nalgebra::Vector3;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("cannot normalize vector ({0}, {1}, {2})")]
    Degenerate(f64, f64, f64),
    #[error("angle {0} rad is outside [0, pi]")]
    AngleOutOfRange(f64),
}

/// A direction in 3-space. Components always satisfy `x² + y² + z² = 1`
/// to within rounding.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawVec", into = "RawVec")]
pub struct UnitVec {
    x: f64,
    y: f64,
    z: f64,
}

#[derive(Serialize, Deserialize)]
struct RawVec {
    x: f64,
    y: f64,
    z: f64,
}

impl TryFrom<RawVec> for UnitVec {
    type Error = GeometryError;

    fn try_from(v: RawVec) -> Result<Self, Self::Error> {
        UnitVec::new(v.x, v.y, v.z)
    }
}

impl From<UnitVec> for RawVec {
    fn from(v: UnitVec) -> Self {
        RawVec { x: v.x, y: v.y, z: v.z }
    }
}

impl UnitVec {
    pub const EX: UnitVec = UnitVec { x: 1.0, y: 0.0, z: 0.0 };
    pub const EY: UnitVec = UnitVec { x: 0.0, y: 1.0, z: 0.0 };
    pub const EZ: UnitVec = UnitVec { x: 0.0, y: 0.0, z: 1.0 };

    /// Normalizes `(x, y, z)`. Fails for zero or non-finite input.
    pub fn new(x: f64, y: f64, z: f64) -> Result<Self, GeometryError> {
        let n = (x * x + y * y + z * z).sqrt();
        if !n.is_finite() || n == 0.0 {
            return Err(GeometryError::Degenerate(x, y, z));
        }
        Ok(UnitVec {
            x: x / n,
            y: y / n,
            z: z / n,
        })
    }

    /// Direction at polar angle `theta` from +z and azimuth `phi` from +x.
    pub fn from_spherical(theta: f64, phi: f64) -> Self {
        let (st, ct) = theta.sin_cos();
        let (sp, cp) = phi.sin_cos();
        UnitVec {
            x: st * cp,
            y: st * sp,
            z: ct,
        }
    }

    pub fn from_vector3(v: &Vector3<f64>) -> Result<Self, GeometryError> {
        UnitVec::new(v.x, v.y, v.z)
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn to_vector3(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn dot(&self, other: &UnitVec) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }
}

impl std::ops::Neg for UnitVec {
    type Output = UnitVec;

    fn neg(self) -> UnitVec {
        UnitVec {
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }
}

/// An angle in `[0, π]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Angle(f64);

impl Angle {
    pub const ZERO: Angle = Angle(0.0);
    pub const STRAIGHT: Angle = Angle(PI);

    pub fn new(radians: f64) -> Result<Self, GeometryError> {
        if (0.0..=PI).contains(&radians) {
            Ok(Angle(radians))
        } else {
            Err(GeometryError::AngleOutOfRange(radians))
        }
    }

    /// Clamps into `[0, π]`; NaN maps to 0.
    pub fn clamped(radians: f64) -> Self {
        if radians.is_nan() {
            Angle(0.0)
        } else {
            Angle(radians.clamp(0.0, PI))
        }
    }

    pub fn radians(self) -> f64 {
        self.0
    }

    pub fn degrees(self) -> f64 {
        self.0.to_degrees()
    }
}

impl fmt::Display for Angle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} rad", self.0)
    }
}

/// Angle in `[0, π]`, computed as `atan2(|a × b|, a · b)` so that nearly
/// parallel vectors keep full precision.
pub fn angle_between(a: &UnitVec, b: &UnitVec) -> Angle {
    let (u, v) = (a.to_vector3(), b.to_vector3());
    Angle(u.cross(&v).norm().atan2(u.dot(&v)))
}

/// Isotropic direction: `z ~ U[-1, 1]`, azimuth `~ U[0, 2π)`.
pub fn sample_uniform_direction(rng: &mut RandomStream) -> UnitVec {
    let z = 2.0 * rng.uniform() - 1.0;
    let phi = TAU * rng.uniform();
    let rho = (1.0 - z * z).max(0.0).sqrt();
    let (s, c) = phi.sin_cos();
    UnitVec {
        x: rho * c,
        y: rho * s,
        z,
    }
}

/// A reproducible random stream identified by `(seed, stream)`.
///
/// Backed by ChaCha8 keyed from `seed`, with `stream` selecting one of its
/// 2⁶⁴ independent block streams. Children produced by [`split`] are keyed
/// from the parent's identity, so a tree of streams indexed by trial number
/// gives output that does not depend on how trials are distributed across
/// threads.
///
/// [`split`]: RandomStream::split
#[derive(Clone, Debug)]
pub struct RandomStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RandomStream {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RandomStream { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Child stream `index`. Depends only on `(seed, stream, index)`, never
    /// on how many values have been drawn from `self`.
    pub fn split(&self, index: u64) -> RandomStream {
        RandomStream::with_stream(child_key(self.seed, self.stream), index)
    }

    /// Uniform on `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform index in `0..n`. `n` must be nonzero.
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Lemire's multiply-shift with rejection keeps the draw unbiased.
        let n = n as u64;
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = (self.rng.next_u64() as u128) * (n as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as usize;
            }
        }
    }

    /// Fair coin.
    pub fn coin(&mut self) -> bool {
        self.rng.next_u32() & 1 == 1
    }
}

/// Free-function form of [`RandomStream::split`].
pub fn split_stream(rng: &RandomStream, index: u64) -> RandomStream {
    rng.split(index)
}

impl RngCore for RandomStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn child_key(seed: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ stream.rotate_left(32) ^ 0x5bd1_e995_d6e8_feb8)
}
