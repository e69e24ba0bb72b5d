//! Binned Monte Carlo checks of the three locality/QM constraints:
//! uniform `Z_AB` marginal, uniform pair marginals, and the conditional
//! up-up probability `(1 + Z_AB) / 4`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::{HiddenError, HiddenSampler, HiddenTriple};
use crate::geometry::RandomStream;

/// Samples per independent sub-stream.
const CHUNK: usize = 8192;

/// Two-sided tail mass of a 3σ normal deviation.
const THREE_SIGMA_TAIL: f64 = 0.0026997960632601866;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstraintCheck {
    /// Largest absolute deviation from the required value over all cells.
    pub max_deviation: f64,
    /// Binomial standard error of the cell with the largest deviation.
    pub sigma_at_max: f64,
    /// Largest `|deviation| / sigma` over cells.
    pub max_score: f64,
    /// Family-wise equivalent of 3σ across `cells` simultaneous tests.
    pub threshold: f64,
    pub cells: usize,
    pub passed: bool,
}

/// Conditional up-up frequency in one `z_ab` slab.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionalBin {
    pub lo: f64,
    pub hi: f64,
    pub count: u64,
    pub up_up: u64,
    pub observed: f64,
    pub expected: f64,
    /// `observed - expected`.
    pub deviation: f64,
    pub sigma: f64,
}

impl ConditionalBin {
    pub fn center(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport {
    pub samples: usize,
    pub bins: usize,
    /// `ρ(Z_AB) = 1/2`.
    pub z_ab_marginal: ConstraintCheck,
    /// `ρ(Z_A, Z_AB) = ρ(Z_B, Z_AB) = ρ(Z_A, Z_B) = 1/4`.
    pub pair_marginals: ConstraintCheck,
    /// `P(↑↑ | Z_AB) = (1 + Z_AB) / 4`.
    pub conditional: ConstraintCheck,
    pub profile: Vec<ConditionalBin>,
}

impl ConstraintReport {
    /// The slab containing `z_ab`.
    pub fn bin_at(&self, z_ab: f64) -> Option<&ConditionalBin> {
        self.profile.iter().find(|b| b.lo <= z_ab && z_ab < b.hi)
    }

    pub fn all_passed(&self) -> bool {
        self.z_ab_marginal.passed && self.pair_marginals.passed && self.conditional.passed
    }
}

/// Counts accumulated over a run; merging is associative and commutative.
#[derive(Clone)]
struct Tally {
    bins: usize,
    z_ab: Vec<u64>,
    pairs: Vec<u64>,
    up_up: Vec<u64>,
}

impl Tally {
    fn new(bins: usize) -> Self {
        Tally {
            bins,
            z_ab: vec![0; bins],
            pairs: vec![0; 3 * bins * bins],
            up_up: vec![0; bins],
        }
    }

    fn bin(&self, z: f64) -> usize {
        (((z + 1.0) * 0.5 * self.bins as f64) as usize).min(self.bins - 1)
    }

    fn add(&mut self, h: &HiddenTriple) {
        let n = self.bins;
        let (a, b, k) = (self.bin(h.z_a), self.bin(h.z_b), self.bin(h.z_ab));
        self.z_ab[k] += 1;
        self.pairs[a * n + k] += 1;
        self.pairs[n * n + b * n + k] += 1;
        self.pairs[2 * n * n + a * n + b] += 1;
        if h.z_a > 0.0 && h.z_b > 0.0 {
            self.up_up[k] += 1;
        }
    }

    fn merge(mut self, other: Tally) -> Tally {
        for (x, y) in self.z_ab.iter_mut().zip(other.z_ab) {
            *x += y;
        }
        for (x, y) in self.pairs.iter_mut().zip(other.pairs) {
            *x += y;
        }
        for (x, y) in self.up_up.iter_mut().zip(other.up_up) {
            *x += y;
        }
        self
    }
}

fn family_threshold(cells: usize) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    normal.inverse_cdf(1.0 - THREE_SIGMA_TAIL / (2.0 * cells.max(1) as f64))
}

/// Density check of histogram cells with equal null probability `p` and
/// required density `target`.
fn density_check(counts: &[u64], n: usize, p: f64, width: f64, target: f64) -> ConstraintCheck {
    let nf = n as f64;
    let sigma = (nf * p * (1.0 - p)).sqrt() / (nf * width);
    let mut worst = 0.0f64;
    for &c in counts {
        worst = worst.max((c as f64 / (nf * width) - target).abs());
    }
    let threshold = family_threshold(counts.len());
    ConstraintCheck {
        max_deviation: worst,
        sigma_at_max: sigma,
        max_score: worst / sigma,
        threshold,
        cells: counts.len(),
        passed: worst / sigma <= threshold,
    }
}

/// Draws `n` triples from `sampler` and checks the three constraints on a
/// `bins`-per-axis histogram.
///
/// Deviations are judged against binomial standard errors under the null;
/// a check passes when every cell lies within the family-wise 3σ level
/// (two-sided tail 0.27% shared across all cells of that check).
///
/// Sample `i` is drawn from sub-stream `i / 8192` of `rng`, so the report is
/// independent of the rayon thread count.
pub fn verify_marginals<S: HiddenSampler + ?Sized>(
    sampler: &S,
    n: usize,
    bins: usize,
    rng: &RandomStream,
) -> Result<ConstraintReport, HiddenError> {
    if n < 10_000 {
        return Err(HiddenError::InvalidArgument(format!(
            "need at least 10^4 samples, got {n}"
        )));
    }
    if !(10..=100).contains(&bins) {
        return Err(HiddenError::InvalidArgument(format!(
            "bins must lie in 10..=100, got {bins}"
        )));
    }

    let chunks = n.div_ceil(CHUNK);
    let tally = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut stream = rng.split(c as u64);
            let mut tally = Tally::new(bins);
            let len = CHUNK.min(n - c * CHUNK);
            for _ in 0..len {
                tally.add(&sampler.sample(&mut stream)?);
            }
            Ok(tally)
        })
        .try_reduce(|| Tally::new(bins), |a, b| Ok(a.merge(b)))?;

    let width = 2.0 / bins as f64;
    let z_ab_marginal = density_check(&tally.z_ab, n, 1.0 / bins as f64, width, 0.5);
    let pair_marginals = density_check(&tally.pairs, n, 1.0 / (bins * bins) as f64, width * width, 0.25);

    let mut profile = Vec::with_capacity(bins);
    let mut worst = (0.0f64, 0.0f64, 0.0f64);
    for k in 0..bins {
        let lo = -1.0 + k as f64 * width;
        let hi = lo + width;
        let count = tally.z_ab[k];
        let expected = (1.0 + 0.5 * (lo + hi)) / 4.0;
        let (observed, sigma) = if count > 0 {
            let c = count as f64;
            (tally.up_up[k] as f64 / c, (expected * (1.0 - expected) / c).sqrt())
        } else {
            (f64::NAN, f64::INFINITY)
        };
        let deviation = observed - expected;
        if count > 0 {
            let score = deviation.abs() / sigma;
            if deviation.abs() > worst.0 {
                worst.0 = deviation.abs();
                worst.1 = sigma;
            }
            worst.2 = worst.2.max(score);
        }
        profile.push(ConditionalBin {
            lo,
            hi,
            count,
            up_up: tally.up_up[k],
            observed,
            expected,
            deviation,
            sigma,
        });
    }
    let threshold = family_threshold(bins);
    let conditional = ConstraintCheck {
        max_deviation: worst.0,
        sigma_at_max: worst.1,
        max_score: worst.2,
        threshold,
        cells: bins,
        passed: worst.2 <= threshold,
    };

    Ok(ConstraintReport {
        samples: n,
        bins,
        z_ab_marginal,
        pair_marginals,
        conditional,
        profile,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hidden::SamplerKind;
    use std::f64::consts::TAU;

    #[test]
    fn threshold_reduces_to_three_sigma_for_one_cell() {
        assert!((family_threshold(1) - 3.0).abs() < 1e-9);
        assert!(family_threshold(400) > 4.0);
    }

    #[test]
    fn argument_validation() {
        let rng = RandomStream::new(0);
        assert!(verify_marginals(&SamplerKind::Factorized, 100, 20, &rng).is_err());
        assert!(verify_marginals(&SamplerKind::Factorized, 20_000, 5, &rng).is_err());
        assert!(verify_marginals(&SamplerKind::Factorized, 20_000, 101, &rng).is_err());
    }

    #[test]
    fn sampler_errors_propagate() {
        let failing =
            |_: &mut RandomStream| -> Result<HiddenTriple, HiddenError> { Err(HiddenError::Sampler("boom".into())) };
        let rng = RandomStream::new(0);
        assert_eq!(
            verify_marginals(&failing, 20_000, 20, &rng).unwrap_err(),
            HiddenError::Sampler("boom".into())
        );
    }

    #[test]
    fn tetrahedron_passes_all_three() {
        let r = verify_marginals(&SamplerKind::Tetrahedron, 1_000_000, 20, &RandomStream::new(7)).unwrap();
        assert!(r.all_passed(), "{r:#?}");
    }

    #[test]
    fn factorized_fails_conditional_near_the_ends() {
        let r = verify_marginals(&SamplerKind::Factorized, 1_000_000, 20, &RandomStream::new(2)).unwrap();
        assert!(r.z_ab_marginal.passed && r.pair_marginals.passed);
        assert!(!r.conditional.passed);
        for bin in r.profile.iter().filter(|b| b.center().abs() >= 0.8) {
            assert!(bin.deviation.abs() >= 0.15, "{bin:?}");
        }
    }

    #[test]
    fn classical_matches_arccos_oracle() {
        let r = verify_marginals(&SamplerKind::Classical, 1_000_000, 10, &RandomStream::new(9)).unwrap();
        assert!(r.z_ab_marginal.passed && r.pair_marginals.passed);
        assert!(!r.conditional.passed);
        let bin = r.bin_at(0.5).unwrap();
        assert!((bin.center() - 0.5).abs() < 1e-12);
        // Bin average of arccos(-u) / 2π over [0.4, 0.6] by Simpson's rule.
        let f = |u: f64| (-u).acos() / TAU;
        let m = 200;
        let h = (bin.hi - bin.lo) / m as f64;
        let mut simpson = f(bin.lo) + f(bin.hi);
        for i in 1..m {
            simpson += f(bin.lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        let oracle = simpson * h / 3.0 / (bin.hi - bin.lo);
        assert!((bin.observed - oracle).abs() <= 3.0 * bin.sigma, "{bin:?} vs {oracle}");
        assert!((bin.deviation.abs() - 0.0417).abs() <= 0.005);
    }

    #[test]
    fn thread_count_does_not_change_the_report() {
        let rng = RandomStream::new(5);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| verify_marginals(&SamplerKind::Tetrahedron, 50_000, 10, &rng));
        let b = four.install(|| verify_marginals(&SamplerKind::Tetrahedron, 50_000, 10, &rng));
        assert_eq!(a.unwrap(), b.unwrap());
    }
}
