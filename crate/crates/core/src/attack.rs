//! Byzantine update construction.
//!
//! Vector attacks (ALIE, IPM, Min-Max/Min-Sum, hybrid sparse) are computed
//! once per round from benign statistics and sent by every Byzantine client.
//! Bit-flip and label-flip only transform a client's own local step.

use crate::error::{check_dim, Error, Result};
use crate::linalg::{common_dim, index_mean, index_std, sq_dist, ParamVector};
use crate::prune::SparseMask;

/// Index-wise mean and population standard deviation of the benign updates.
#[derive(Clone, Debug, PartialEq)]
pub struct BenignStats {
    pub mean: ParamVector,
    pub std: ParamVector,
    pub count: usize,
}

pub fn benign_stats<V: AsRef<[f64]>>(benign: &[V]) -> Result<BenignStats> {
    Ok(BenignStats {
        mean: index_mean(benign)?,
        std: index_std(benign)?,
        count: benign.len(),
    })
}

const ACKLAM_A: [f64; 6] = [
    -3.969_683_028_665_376e1,
    2.209_460_984_245_205e2,
    -2.759_285_104_469_687e2,
    1.383_577_518_672_69e2,
    -3.066_479_806_614_716e1,
    2.506_628_277_459_239,
];
const ACKLAM_B: [f64; 5] = [
    -5.447_609_879_822_406e1,
    1.615_858_368_580_409e2,
    -1.556_989_798_598_866e2,
    6.680_131_188_771_972e1,
    -1.328_068_155_288_572e1,
];
const ACKLAM_C: [f64; 6] = [
    -7.784_894_002_430_293e-3,
    -3.223_964_580_411_365e-1,
    -2.400_758_277_161_838,
    -2.549_732_539_343_734,
    4.374_664_141_464_968,
    2.938_163_982_698_783,
];
const ACKLAM_D: [f64; 4] = [
    7.784_695_709_041_462e-3,
    3.224_671_290_700_398e-1,
    2.445_134_137_142_996,
    3.754_408_661_907_416,
];

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Inverse of the standard normal CDF: Acklam's rational approximation
/// followed by one Newton step on `Phi(z) - p`, with `Phi` from `erfc`.
pub fn std_normal_inv_cdf(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid(format!(
            "probability must be in (0, 1), got {p}"
        )));
    }
    let (a, b, c, d) = (ACKLAM_A, ACKLAM_B, ACKLAM_C, ACKLAM_D);
    let p_low = 0.024_25;
    let z = if p < p_low {
        let q = (-2.0 * p.ln()).sqrt();
        (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5])
            / ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
    } else if p <= 1.0 - p_low {
        let q = p - 0.5;
        let r = q * q;
        (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q
            / (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5])
            / ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
    };
    let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    Ok(z - (std_normal_cdf(z) - p) / pdf)
}

/// ALIE scale for `k` clients of which `k_m` are Byzantine.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ZMax {
    pub z: f64,
    pub supporters: usize,
    pub quantile: f64,
    /// Set when the quantile is at most 0.5, i.e. the attack has no room.
    pub degenerate: bool,
}

pub fn compute_z_max(k: usize, k_m: usize) -> Result<ZMax> {
    if k_m == 0 || 2 * k_m >= k {
        return Err(Error::invalid(format!(
            "need 0 < k_m < k/2, got k = {k}, k_m = {k_m}"
        )));
    }
    let supporters = (k / 2 + 1).saturating_sub(k_m);
    let honest = k - k_m;
    let quantile = honest.saturating_sub(supporters) as f64 / honest as f64;
    let z = if quantile <= 0.0 {
        f64::NEG_INFINITY
    } else {
        std_normal_inv_cdf(quantile)?
    };
    Ok(ZMax {
        z,
        supporters,
        quantile,
        degenerate: quantile <= 0.5,
    })
}

fn shifted(stats: &BenignStats, scale: impl Fn(usize) -> f64) -> ParamVector {
    ParamVector::new(
        stats
            .mean
            .iter()
            .zip(stats.std.iter())
            .enumerate()
            .map(|(i, (m, s))| m - scale(i) * s)
            .collect(),
    )
}

/// `mean - z * std`.
pub fn attack_alie(stats: &BenignStats, z: f64) -> ParamVector {
    shifted(stats, |_| z)
}

/// `-z * mean`.
pub fn attack_ipm(stats: &BenignStats, z: f64) -> ParamVector {
    ParamVector::new(stats.mean.iter().map(|m| -z * m).collect())
}

pub fn attack_bitflip(own_gradient: &[f64]) -> ParamVector {
    ParamVector::new(own_gradient.iter().map(|g| -g).collect())
}

/// `mean - (z1 (1 - c) + z2 c) * std` for a binary mask `c`.
pub fn attack_hybrid_sparse(
    stats: &BenignStats,
    mask: &[bool],
    z1: f64,
    z2: f64,
) -> Result<ParamVector> {
    check_dim(stats.mean.len(), mask.len())?;
    Ok(shifted(stats, |i| if mask[i] { z2 } else { z1 }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistanceMode {
    /// Largest distance to any benign update.
    Max,
    /// Sum of squared distances to all benign updates.
    Sum,
}

/// Bisection controls for the adaptive attacks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SearchParams {
    pub z_hi: f64,
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for SearchParams {
    fn default() -> Self {
        Self {
            z_hi: 10.0,
            tol: 1e-3,
            max_iters: 40,
        }
    }
}

fn spread(x: &[f64], benign: &[&[f64]], mode: DistanceMode) -> f64 {
    match mode {
        DistanceMode::Max => benign
            .iter()
            .map(|b| sq_dist(x, b).sqrt())
            .fold(0.0, f64::max),
        DistanceMode::Sum => benign.iter().map(|b| sq_dist(x, b)).sum(),
    }
}

/// The largest benign-to-benign spread, the budget a poisoned update must
/// stay within.
pub fn distance_threshold<V: AsRef<[f64]>>(benign: &[V], mode: DistanceMode) -> Result<f64> {
    common_dim(benign)?;
    let refs: Vec<&[f64]> = benign.iter().map(|b| b.as_ref()).collect();
    Ok(refs
        .iter()
        .map(|b| spread(b, &refs, mode))
        .fold(0.0, f64::max))
}

/// Largest `z` in `[0, hi]` with `feasible(z)`, assuming `feasible(0)` and
/// monotonicity.
fn bisect(hi: f64, params: SearchParams, feasible: impl Fn(f64) -> bool) -> f64 {
    if feasible(hi) {
        return hi;
    }
    let (mut lo, mut hi) = (0.0, hi);
    for _ in 0..params.max_iters {
        if hi - lo <= params.tol {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if feasible(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

#[derive(Clone, Debug, PartialEq)]
pub struct MinOpt {
    pub z: f64,
    pub poisoned: ParamVector,
    /// No positive scale was feasible; `poisoned` is the benign mean.
    pub degenerate: bool,
}

/// Min-Max / Min-Sum: the largest `z` such that `mean - z * std` is no
/// farther from the benign updates than they are from each other.
pub fn attack_min_opt<V: AsRef<[f64]>>(
    stats: &BenignStats,
    benign: &[V],
    mode: DistanceMode,
    params: SearchParams,
) -> Result<MinOpt> {
    if benign.len() < 2 {
        return Err(Error::invalid(
            "adaptive attacks need at least 2 benign updates",
        ));
    }
    if !(params.z_hi > 0.0) {
        return Err(Error::invalid("search upper bound must be > 0"));
    }
    check_dim(stats.mean.len(), common_dim(benign)?)?;
    let refs: Vec<&[f64]> = benign.iter().map(|b| b.as_ref()).collect();
    let threshold = distance_threshold(&refs, mode)?;
    let degenerate = MinOpt {
        z: 0.0,
        poisoned: stats.mean.clone(),
        degenerate: true,
    };
    if threshold == 0.0 || stats.std.iter().all(|&s| s == 0.0) {
        return Ok(degenerate);
    }
    let z = bisect(params.z_hi, params, |z| {
        spread(&attack_alie(stats, z), &refs, mode) <= threshold
    });
    if z == 0.0 {
        return Ok(degenerate);
    }
    Ok(MinOpt {
        z,
        poisoned: attack_alie(stats, z),
        degenerate: false,
    })
}

/// Largest `z1` in `[0, cap]` for which the hybrid update with fixed `z2`
/// meets the Min-Sum budget; 0 when even `z1 = 0` does not.
pub fn hybrid_z1_adaptive<V: AsRef<[f64]>>(
    stats: &BenignStats,
    benign: &[V],
    mask: &[bool],
    z2: f64,
    params: SearchParams,
) -> Result<f64> {
    if benign.len() < 2 {
        return Err(Error::invalid(
            "adaptive attacks need at least 2 benign updates",
        ));
    }
    check_dim(stats.mean.len(), mask.len())?;
    let refs: Vec<&[f64]> = benign.iter().map(|b| b.as_ref()).collect();
    let threshold = distance_threshold(&refs, DistanceMode::Sum)?;
    let feasible = |z1: f64| {
        let v = attack_hybrid_sparse(stats, mask, z1, z2).expect("dimensions checked");
        spread(&v, &refs, DistanceMode::Sum) <= threshold
    };
    if threshold == 0.0 || !feasible(0.0) {
        return Ok(0.0);
    }
    Ok(bisect(params.z_hi, params, feasible))
}

/// Whether `z2` exceeds the `sqrt(2)` guidance from Chebyshev's inequality
/// by more than `slack` (relative).
pub fn z2_exceeds_guidance(z2: f64, slack: f64) -> bool {
    z2 > std::f64::consts::SQRT_2 * (1.0 + slack)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Z1Policy {
    /// A fixed scale; `None` means the ALIE `z_max` for the round's `(k, k_m)`.
    Fixed(Option<f64>),
    /// Min-Sum search capped at the given value (`None`: the search bound).
    MinSumAdaptive(Option<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub enum AttackKind {
    None,
    BitFlip,
    LabelFlip,
    /// `None` means `z_max`.
    Alie(Option<f64>),
    Ipm(f64),
    MinMax,
    MinSum,
    HybridSparse {
        mask: SparseMask,
        z1: Z1Policy,
        z2: f64,
    },
}

impl AttackKind {
    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::BitFlip => "bitflip",
            AttackKind::LabelFlip => "labelflip",
            AttackKind::Alie(_) => "alie",
            AttackKind::Ipm(_) => "ipm",
            AttackKind::MinMax => "minmax",
            AttackKind::MinSum => "minsum",
            AttackKind::HybridSparse { .. } => "hybrid_sparse",
        }
    }

    /// True for attacks that replace the Byzantine update with a crafted vector.
    pub fn is_vector_attack(&self) -> bool {
        !matches!(
            self,
            AttackKind::None | AttackKind::BitFlip | AttackKind::LabelFlip
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// Subtract the perturbation (`mean - z * std`) when true, add it otherwise.
    pub subtract: bool,
    pub search: SearchParams,
}

impl AttackConfig {
    pub fn new(kind: AttackKind) -> Self {
        Self {
            kind,
            subtract: true,
            search: SearchParams::default(),
        }
    }

    pub fn none() -> Self {
        Self::new(AttackKind::None)
    }

    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            AttackKind::Ipm(z) if !(*z > 0.0) => {
                Err(Error::invalid(format!("IPM scale must be > 0, got {z}")))
            }
            AttackKind::HybridSparse { z1, z2, .. } => {
                if !(*z2 >= 0.0) {
                    return Err(Error::invalid(format!("z2 must be >= 0, got {z2}")));
                }
                match z1 {
                    Z1Policy::Fixed(Some(z)) | Z1Policy::MinSumAdaptive(Some(z))
                        if !(*z >= 0.0) =>
                    {
                        Err(Error::invalid(format!("z1 must be >= 0, got {z}")))
                    }
                    _ => Ok(()),
                }
            }
            _ => Ok(()),
        }
    }

    /// Builds this round's Byzantine vector from the benign momenta, or
    /// `None` for attacks that act inside the local step.
    pub fn craft<V: AsRef<[f64]>>(
        &self,
        benign: &[V],
        k: usize,
        k_m: usize,
    ) -> Result<Option<Crafted>> {
        if !self.kind.is_vector_attack() {
            return Ok(None);
        }
        let stats = benign_stats(benign)?;
        let sign = if self.subtract { 1.0 } else { -1.0 };
        let z_max = || -> Result<(f64, bool)> {
            let zm = compute_z_max(k, k_m)?;
            Ok(if zm.z > 0.0 {
                (zm.z, false)
            } else {
                (0.0, true)
            })
        };
        let crafted = match &self.kind {
            AttackKind::Alie(z) => {
                let (z, degenerate) = match z {
                    Some(z) => (*z, false),
                    None => z_max()?,
                };
                Crafted {
                    vector: attack_alie(&stats, sign * z),
                    z,
                    degenerate,
                }
            }
            AttackKind::Ipm(z) => Crafted {
                vector: attack_ipm(&stats, *z),
                z: *z,
                degenerate: false,
            },
            AttackKind::MinMax | AttackKind::MinSum => {
                let mode = if matches!(self.kind, AttackKind::MinMax) {
                    DistanceMode::Max
                } else {
                    DistanceMode::Sum
                };
                let r = attack_min_opt(&stats, benign, mode, self.search)?;
                Crafted {
                    vector: attack_alie(&stats, sign * r.z),
                    z: r.z,
                    degenerate: r.degenerate,
                }
            }
            AttackKind::HybridSparse { mask, z1, z2 } => {
                let bits = mask.bits();
                let (z1, degenerate) = match z1 {
                    Z1Policy::Fixed(Some(z)) => (*z, false),
                    Z1Policy::Fixed(None) => z_max()?,
                    Z1Policy::MinSumAdaptive(cap) => {
                        let mut params = self.search;
                        if let Some(cap) = cap {
                            params.z_hi = *cap;
                        }
                        let z = hybrid_z1_adaptive(&stats, benign, bits, *z2, params)?;
                        (z, z == 0.0)
                    }
                };
                Crafted {
                    vector: attack_hybrid_sparse(&stats, bits, sign * z1, sign * z2)?,
                    z: z1,
                    degenerate,
                }
            }
            AttackKind::None | AttackKind::BitFlip | AttackKind::LabelFlip => unreachable!(),
        };
        Ok(Some(crafted))
    }
}

/// A round's Byzantine vector and the (dense) scale it used.
#[derive(Clone, Debug, PartialEq)]
pub struct Crafted {
    pub vector: ParamVector,
    pub z: f64,
    pub degenerate: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{cosine_similarity, dot};
    use crate::model::{LayerLayout, SegmentKind};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};
    use std::sync::Arc;

    fn stats(mean: &[f64], std: &[f64]) -> BenignStats {
        BenignStats {
            mean: ParamVector::new(mean.to_vec()),
            std: ParamVector::new(std.to_vec()),
            count: 2,
        }
    }

    #[test]
    fn benign_stats_cases() {
        let s = benign_stats(&[vec![1.0, 3.0], vec![3.0, 5.0]]).unwrap();
        assert_eq!(s.mean.as_slice(), &[2.0, 4.0]);
        assert_eq!(s.std.as_slice(), &[1.0, 1.0]);
        let s = benign_stats(&vec![vec![0.3, -1.0]; 4]).unwrap();
        assert_eq!(s.std.as_slice(), &[0.0, 0.0]);
        assert!(benign_stats(&[vec![1.0]]).is_err());
    }

    #[test]
    fn inverse_cdf_cases() {
        assert!(std_normal_inv_cdf(0.5).unwrap().abs() < 1e-15);
        assert!((std_normal_inv_cdf(0.975).unwrap() - 1.959_963_984_540_054).abs() < 1e-8);
        assert!((std_normal_inv_cdf(0.6).unwrap() - 0.253_347_103_135_800).abs() < 1e-8);
        for p in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(std_normal_inv_cdf(p).is_err());
        }
    }

    #[test]
    fn inverse_cdf_matches_statrs() {
        use statrs::distribution::{ContinuousCDF, Normal};
        let n = Normal::new(0.0, 1.0).unwrap();
        for i in 1..2000 {
            let p = i as f64 / 2000.0;
            let z = std_normal_inv_cdf(p).unwrap();
            assert!((z - n.inverse_cdf(p)).abs() < 1e-8, "p = {p}");
        }
        for p in [1e-10, 1e-6, 0.01, 0.99, 1.0 - 1e-6] {
            let z = std_normal_inv_cdf(p).unwrap();
            assert!(
                (n.cdf(z) - p).abs() <= 1e-8 * p.min(1.0 - p).max(1e-3),
                "p = {p}"
            );
        }
    }

    #[test]
    fn z_max_cases() {
        let z = compute_z_max(25, 5).unwrap();
        assert_eq!(z.supporters, 8);
        assert_eq!(z.quantile, 0.6);
        assert!((z.z - 0.2533).abs() < 1e-3);
        assert!(!z.degenerate);

        let z = compute_z_max(10, 2).unwrap();
        assert_eq!((z.supporters, z.quantile), (4, 0.5));
        assert!(z.z.abs() < 1e-15);
        assert!(z.degenerate);

        let z = compute_z_max(25, 10).unwrap();
        assert_eq!((z.supporters, z.quantile), (3, 0.8));
        assert!((z.z - 0.8416).abs() < 1e-4);

        assert!(compute_z_max(10, 5).is_err());
        assert!(compute_z_max(10, 0).is_err());
    }

    #[test]
    fn alie_ipm_bitflip() {
        let s = stats(&[1.0, 1.0], &[2.0, 0.0]);
        assert_eq!(attack_alie(&s, 0.25).as_slice(), &[0.5, 1.0]);
        assert_eq!(attack_alie(&s, 0.0), s.mean);
        let flat = stats(&[1.0, -3.0], &[0.0, 0.0]);
        assert_eq!(attack_alie(&flat, 7.0), flat.mean);

        let s = stats(&[1.0, -2.0], &[0.0, 0.0]);
        assert_eq!(attack_ipm(&s, 0.4).as_slice(), &[-0.4, 0.8]);
        assert!((cosine_similarity(&attack_ipm(&s, 0.4), &s.mean).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(attack_ipm(&s, 1.0).as_slice(), &[-1.0, 2.0]);

        assert_eq!(
            attack_bitflip(&[1.0, -2.0, 0.0]).as_slice(),
            &[-1.0, 2.0, 0.0]
        );
        assert_eq!(
            attack_bitflip(&attack_bitflip(&[3.5, -0.5])).as_slice(),
            &[3.5, -0.5]
        );
    }

    #[test]
    fn ipm_flips_mean_alignment() {
        // z * k_m > k - k_m: 0.4 * 11 > 20 - 11 is false, 1.0 * 11 > 9 is true.
        let benign = vec![vec![1.0]; 9];
        let s = benign_stats(&benign).unwrap();
        for (z, flipped) in [(0.4, false), (1.0, true)] {
            let mut all = benign.clone();
            all.extend(std::iter::repeat_n(attack_ipm(&s, z).into_vec(), 11));
            let agg = index_mean(&all).unwrap();
            assert_eq!(dot(&agg, &s.mean).unwrap() < 0.0, flipped, "z = {z}");
        }
    }

    #[test]
    fn min_opt_degenerate() {
        let benign = vec![vec![1.0, 2.0]; 3];
        let s = benign_stats(&benign).unwrap();
        for mode in [DistanceMode::Max, DistanceMode::Sum] {
            let r = attack_min_opt(&s, &benign, mode, SearchParams::default()).unwrap();
            assert_eq!(r.z, 0.0);
            assert!(r.degenerate);
            assert_eq!(r.poisoned, s.mean);
        }
    }

    #[test]
    fn min_max_one_dimensional() {
        // Benign {0, 2}: mean 1, std 1, budget 2. Candidate 1 - z is within 2
        // of both points iff z <= 1.
        let benign = vec![vec![0.0], vec![2.0]];
        let s = benign_stats(&benign).unwrap();
        let r = attack_min_opt(&s, &benign, DistanceMode::Max, SearchParams::default()).unwrap();
        assert!((r.z - 1.0).abs() <= 1e-3, "{}", r.z);
        assert!(r.z <= 1.0);
        assert!((r.poisoned[0] - (1.0 - r.z)).abs() < 1e-15);

        // Brute-force scan of the same feasibility condition.
        let scan = (0..=3000)
            .map(|i| i as f64 * 1e-3)
            .filter(|z| (1.0 - z).abs() <= 2.0 && (1.0 - z - 2.0).abs() <= 2.0)
            .fold(0.0, f64::max);
        assert!((r.z - scan).abs() <= 1e-3);
    }

    #[test]
    fn min_opt_bound_cap() {
        let benign = vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![0.0, 2.0]];
        let s = benign_stats(&benign).unwrap();
        let p = SearchParams {
            z_hi: 0.1,
            ..SearchParams::default()
        };
        let r = attack_min_opt(&s, &benign, DistanceMode::Sum, p).unwrap();
        assert_eq!(r.z, 0.1);
    }

    #[test]
    fn hybrid_cases() {
        let s = stats(&[0.0, 0.0], &[2.0, 2.0]);
        let v = attack_hybrid_sparse(&s, &[true, false], 0.25, 1.5).unwrap();
        assert_eq!(v.as_slice(), &[-3.0, -0.5]);

        let s = stats(&[0.3, -1.0, 2.0], &[0.5, 1.5, 0.1]);
        assert_eq!(
            attack_hybrid_sparse(&s, &[false; 3], 0.7, 1.5).unwrap(),
            attack_alie(&s, 0.7)
        );
        assert_eq!(
            attack_hybrid_sparse(&s, &[true; 3], 0.7, 1.5).unwrap(),
            attack_alie(&s, 1.5)
        );
        assert!(attack_hybrid_sparse(&s, &[true; 2], 0.7, 1.5).is_err());
    }

    fn random_benign(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect()
    }

    #[test]
    fn hybrid_adaptive_cases() {
        let benign = random_benign(8, 12, 3);
        let s = benign_stats(&benign).unwrap();
        let p = SearchParams::default();
        let mask = [
            true, false, true, false, false, false, false, false, false, false, false, true,
        ];

        let z1 = hybrid_z1_adaptive(&s, &benign, &[false; 12], 0.0, p).unwrap();
        let dense = attack_min_opt(&s, &benign, DistanceMode::Sum, p).unwrap();
        assert!((z1 - dense.z).abs() < 1e-12);

        let z1 = hybrid_z1_adaptive(&s, &benign, &mask, 1.5, p).unwrap();
        assert!(z1 > 0.0 && z1 < p.z_hi);
        let threshold = distance_threshold(&benign, DistanceMode::Sum).unwrap();
        let refs: Vec<&[f64]> = benign.iter().map(|b| b.as_slice()).collect();
        let at = |z| {
            spread(
                &attack_hybrid_sparse(&s, &mask, z, 1.5).unwrap(),
                &refs,
                DistanceMode::Sum,
            )
        };
        assert!(at(z1) <= threshold);
        assert!(at(z1 + p.tol) > threshold);

        let same = vec![vec![0.5; 12]; 4];
        let s = benign_stats(&same).unwrap();
        assert_eq!(hybrid_z1_adaptive(&s, &same, &mask, 1.5, p).unwrap(), 0.0);
    }

    #[test]
    fn chebyshev_guidance() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (n, d, z2) = (20, 1000, 1.5);
        let benign: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let s = benign_stats(&benign).unwrap();
        let mut far = 0usize;
        for b in &benign {
            for c in 0..d {
                if (b[c] - s.mean[c]).abs() > z2 * s.std[c] {
                    far += 1;
                }
            }
        }
        let total = (n * d) as f64;
        let bound = 1.0 / (z2 * z2);
        let frac = far as f64 / total;
        assert!(
            frac <= bound + 3.0 * (bound * (1.0 - bound) / total).sqrt(),
            "{frac}"
        );
        assert!(!z2_exceeds_guidance(1.5, 0.1));
        assert!(z2_exceeds_guidance(2.0, 0.1));
    }

    fn layout(d: usize) -> Arc<LayerLayout> {
        Arc::new(LayerLayout::from_shapes(&[(
            "w",
            SegmentKind::FullyConnected,
            vec![1, d],
        )]))
    }

    #[test]
    fn craft_dispatch() {
        let benign = random_benign(20, 6, 5);
        let s = benign_stats(&benign).unwrap();
        assert!(AttackConfig::none()
            .craft(&benign, 25, 5)
            .unwrap()
            .is_none());
        assert!(AttackConfig::new(AttackKind::BitFlip)
            .craft(&benign, 25, 5)
            .unwrap()
            .is_none());

        let c = AttackConfig::new(AttackKind::Alie(None))
            .craft(&benign, 25, 5)
            .unwrap()
            .unwrap();
        let zm = compute_z_max(25, 5).unwrap().z;
        assert_eq!(c.vector, attack_alie(&s, zm));

        let mut plus = AttackConfig::new(AttackKind::Alie(Some(0.5)));
        plus.subtract = false;
        assert_eq!(
            plus.craft(&benign, 25, 5).unwrap().unwrap().vector,
            attack_alie(&s, -0.5)
        );

        let degenerate = AttackConfig::new(AttackKind::Alie(None))
            .craft(&benign, 10, 2)
            .unwrap()
            .unwrap();
        assert!(degenerate.degenerate);
        assert_eq!(degenerate.vector, s.mean);

        let mask =
            SparseMask::from_bits(vec![true, false, false, false, false, true], layout(6)).unwrap();
        let hybrid = AttackConfig::new(AttackKind::HybridSparse {
            mask: mask.clone(),
            z1: Z1Policy::Fixed(None),
            z2: 1.5,
        });
        let c = hybrid.craft(&benign, 25, 5).unwrap().unwrap();
        assert_eq!(
            c.vector,
            attack_hybrid_sparse(&s, mask.bits(), zm, 1.5).unwrap()
        );
    }

    proptest! {
        #[test]
        fn alie_at_z_max_stays_in_band(mean in prop::collection::vec(-5.0..5.0f64, 8), std in prop::collection::vec(0.0..3.0f64, 8)) {
            let s = stats(&mean, &std);
            let z = compute_z_max(25, 5).unwrap().z;
            let v = attack_alie(&s, z);
            for i in 0..8 {
                prop_assert!(v[i] <= mean[i] + 1e-12);
                prop_assert!(v[i] >= mean[i] - 0.2534 * std[i] - 1e-12);
            }
        }

        #[test]
        fn hybrid_only_moves_where_std_positive(
            mean in prop::collection::vec(-5.0..5.0f64, 8),
            std in prop::collection::vec(prop_oneof![Just(0.0), 0.1..3.0f64], 8),
            mask in prop::collection::vec(any::<bool>(), 8),
            z1 in 0.0..2.0f64,
            z2 in 0.0..3.0f64,
        ) {
            let s = stats(&mean, &std);
            let v = attack_hybrid_sparse(&s, &mask, z1, z2).unwrap();
            for i in 0..8 {
                if std[i] == 0.0 {
                    prop_assert_eq!(v[i], mean[i]);
                }
            }
        }

        #[test]
        fn min_opt_constraint_is_monotone(seed in 0u64..200, a in 0.0..5.0f64, b in 0.0..5.0f64) {
            let benign = random_benign(5, 4, seed);
            let s = benign_stats(&benign).unwrap();
            let refs: Vec<&[f64]> = benign.iter().map(|x| x.as_slice()).collect();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let sum = |z| spread(&attack_alie(&s, z), &refs, DistanceMode::Sum);
            prop_assert!(sum(lo) <= sum(hi) + 1e-9);
            // The max-distance constraint is convex along the ray, so its
            // feasible set is still an interval containing 0.
            let max = |z| spread(&attack_alie(&s, z), &refs, DistanceMode::Max);
            prop_assert!(max(0.5 * (lo + hi)) <= 0.5 * (max(lo) + max(hi)) + 1e-9);
            prop_assert!(max(0.0) <= distance_threshold(&benign, DistanceMode::Max).unwrap());
        }

        #[test]
        fn min_opt_result_is_feasible(seed in 0u64..200) {
            let benign = random_benign(6, 5, seed);
            let s = benign_stats(&benign).unwrap();
            let refs: Vec<&[f64]> = benign.iter().map(|x| x.as_slice()).collect();
            for mode in [DistanceMode::Max, DistanceMode::Sum] {
                let r = attack_min_opt(&s, &benign, mode, SearchParams::default()).unwrap();
                prop_assert!(spread(&r.poisoned, &refs, mode) <= distance_threshold(&benign, mode).unwrap());
            }
        }
    }
}
