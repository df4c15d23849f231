//! Chain diagnostics: autocorrelation, effective sample size, histogram HPD
//! sets and agreement between chains.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

fn check_finite(values: &[f64]) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return invalid("chain contains non-finite values");
    }
    Ok(())
}

/// Normalized autocorrelation for every lag `0..n`, from the biased
/// autocovariance computed with a zero-padded FFT.
fn full_acf(values: &[f64]) -> Result<Vec<f64>> {
    let n = values.len();
    if values.iter().all(|&v| v == values[0]) {
        return Err(Error::Undefined("autocorrelation of a constant chain".into()));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let m = (2 * n).next_power_of_two();
    let mut buf: Vec<Complex64> = values
        .iter()
        .map(|&v| Complex64::new(v - mean, 0.0))
        .chain(std::iter::repeat(Complex64::new(0.0, 0.0)))
        .take(m)
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(m).process(&mut buf);
    for z in &mut buf {
        *z = Complex64::new(z.norm_sqr(), 0.0);
    }
    planner.plan_fft_inverse(m).process(&mut buf);
    let c0 = buf[0].re;
    Ok(buf[..n].iter().map(|z| z.re / c0).collect())
}

/// `ρ(l) = γ̂(l)/γ̂(0)` for `l = 0..=max_lag`.
pub fn acf(chain: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    if chain.len() < 2 {
        return invalid("autocorrelation needs at least 2 values");
    }
    if max_lag >= chain.len() {
        return invalid(format!(
            "max_lag {max_lag} must be below the chain length {}",
            chain.len()
        ));
    }
    check_finite(chain)?;
    let mut r = full_acf(chain)?;
    r.truncate(max_lag + 1);
    r[0] = 1.0;
    Ok(r)
}

/// Effective sample size `n/τ` with `τ = −1 + 2 Σ_k Γ_k`, where
/// `Γ_k = ρ(2k) + ρ(2k+1)` is summed up to the last positive pair (Geyer's
/// initial positive sequence). Clamped to `n`.
pub fn ess(chain: &[f64]) -> Result<f64> {
    let n = chain.len();
    if n < 4 {
        return invalid("ESS needs at least 4 values");
    }
    check_finite(chain)?;
    let rho = full_acf(chain)?;
    let mut tau = -1.0;
    let mut k = 0;
    while 2 * k + 1 < n {
        let gamma = rho[2 * k] + rho[2 * k + 1];
        if gamma <= 0.0 {
            break;
        }
        tau += 2.0 * gamma;
        k += 1;
    }
    let n = n as f64;
    Ok(if tau > 0.0 { (n / tau).min(n) } else { n })
}

/// First lag with `|ρ(l)| < threshold`, if any.
pub fn decorrelation_lag(chain: &[f64], threshold: f64) -> Result<Option<usize>> {
    let r = acf(chain, chain.len() - 1)?;
    Ok(r.iter().position(|v| v.abs() < threshold))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn len(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn is_empty(&self) -> bool {
        self.hi <= self.lo
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }
}

/// Histogram estimate of a highest-density set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HpdSet {
    pub intervals: Vec<Interval>,
    /// Density threshold `c_HPD`: bins whose smoothed density is at or above
    /// it are included.
    pub threshold: f64,
    /// Fraction of samples inside the included bins.
    pub mass: f64,
}

impl HpdSet {
    pub fn total_length(&self) -> f64 {
        self.intervals.iter().map(Interval::len).sum()
    }

    pub fn contains(&self, x: f64) -> bool {
        self.intervals.iter().any(|i| i.contains(x))
    }
}

/// Selects bins of a histogram in decreasing count order until `level` of
/// the mass is reached, including every bin tied with the last one. Returns
/// the inclusion mask and the threshold count.
pub(crate) fn select_hpd_bins(counts: &[usize], level: f64) -> (Vec<bool>, usize) {
    select_ranked_bins(counts, counts, level)
}

/// Like [`select_hpd_bins`], but bins are ranked by `scores` while the mass
/// is taken from `counts`. Returns the mask and the last score admitted.
fn select_ranked_bins(scores: &[usize], counts: &[usize], level: f64) -> (Vec<bool>, usize) {
    let total: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| scores[b].cmp(&scores[a]).then(a.cmp(&b)));
    let target = level * total as f64;
    let mut acc = 0usize;
    let mut threshold = scores[order[0]];
    for &b in &order {
        if acc as f64 >= target {
            break;
        }
        acc += counts[b];
        threshold = scores[b];
    }
    let threshold = threshold.max(1);
    (scores.iter().map(|&c| c >= threshold).collect(), threshold)
}

const SMOOTHING: [usize; 5] = [1, 2, 3, 2, 1];

/// Counts convolved with a triangular 5-bin kernel (an averaged shifted
/// histogram), zero beyond the ends. Ranking bins by these scores keeps
/// Poisson noise near the threshold from splitting one mode into pieces.
fn smooth_counts(counts: &[usize]) -> Vec<usize> {
    let n = counts.len();
    (0..n)
        .map(|b| {
            SMOOTHING
                .iter()
                .enumerate()
                .filter_map(|(k, w)| (b + k).checked_sub(2).filter(|&i| i < n).map(|i| w * counts[i]))
                .sum()
        })
        .collect()
}

/// HPD set at `level` from a histogram with `⌈√n⌉` bins, ranked by
/// smoothed density. Multi-modal samples give several disjoint intervals.
pub fn hpd_1d(samples: &[f64], level: f64) -> Result<HpdSet> {
    let n = samples.len();
    if n < 100 {
        return invalid(format!("HPD estimation needs at least 100 samples, got {n}"));
    }
    if !(level > 0.0 && level < 1.0) {
        return invalid(format!("HPD level must lie in (0, 1), got {level}"));
    }
    check_finite(samples)?;
    let lo = samples.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return Ok(HpdSet {
            intervals: vec![Interval { lo, hi }],
            threshold: f64::INFINITY,
            mass: 1.0,
        });
    }
    let nb = (n as f64).sqrt().ceil() as usize;
    let width = (hi - lo) / nb as f64;
    let mut counts = vec![0usize; nb];
    for &x in samples {
        let b = (((x - lo) / width) as usize).min(nb - 1);
        counts[b] += 1;
    }
    let scores = smooth_counts(&counts);
    let (mask, threshold) = select_ranked_bins(&scores, &counts, level);
    let mut intervals = Vec::new();
    let mut mass = 0usize;
    let mut b = 0;
    while b < nb {
        if !mask[b] {
            b += 1;
            continue;
        }
        let start = b;
        while b < nb && mask[b] {
            mass += counts[b];
            b += 1;
        }
        intervals.push(Interval {
            lo: lo + start as f64 * width,
            hi: if b == nb { hi } else { lo + b as f64 * width },
        });
    }
    Ok(HpdSet {
        intervals,
        threshold: threshold as f64 / (SMOOTHING.iter().sum::<usize>() as f64 * n as f64 * width),
        mass: mass as f64 / n as f64,
    })
}

/// A scalar curve on an angle grid, e.g. a mean boundary radius.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub angles: Vec<f64>,
    pub values: Vec<f64>,
}

/// Largest sup-norm distance between any two curves.
pub fn multi_chain_mean_check(curves: &[Curve]) -> Result<f64> {
    if curves.len() < 2 {
        return invalid("need at least two curves");
    }
    let grid = &curves[0].angles;
    for c in curves {
        if &c.angles != grid || c.values.len() != grid.len() {
            return invalid("curves are not on a common angle grid");
        }
    }
    let mut worst = 0.0f64;
    for a in 0..curves.len() {
        for b in a + 1..curves.len() {
            for (x, y) in curves[a].values.iter().zip(&curves[b].values) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn normals(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = stream(seed, 0);
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    fn ar1(n: usize, phi: f64, seed: u64) -> Vec<f64> {
        let mut rng = stream(seed, 0);
        let mut x = 0.0;
        let scale = (1.0 - phi * phi).sqrt();
        (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                x = phi * x + scale * z;
                x
            })
            .collect()
    }

    fn direct_acf(x: &[f64], lag: usize) -> f64 {
        let n = x.len();
        let m = x.iter().sum::<f64>() / n as f64;
        let c0: f64 = x.iter().map(|v| (v - m) * (v - m)).sum();
        let cl: f64 = (0..n - lag).map(|t| (x[t] - m) * (x[t + lag] - m)).sum();
        cl / c0
    }

    #[test]
    fn acf_matches_direct_sum() {
        let x = ar1(500, 0.5, 1);
        let r = acf(&x, 20).unwrap();
        assert_eq!(r[0], 1.0);
        for (l, v) in r.iter().enumerate() {
            assert!((v - direct_acf(&x, l)).abs() < 1e-10);
        }
    }

    #[test]
    fn acf_examples() {
        let r = acf(&normals(100_000, 2), 10).unwrap();
        assert!(r[10].abs() < 0.02);
        let r = acf(&ar1(100_000, 0.9, 3), 1).unwrap();
        assert!((0.88..=0.92).contains(&r[1]), "{}", r[1]);
        assert!(matches!(acf(&[2.0; 10], 3), Err(Error::Undefined(_))));
        assert!(acf(&[1.0, 2.0], 2).is_err());
    }

    #[test]
    fn ess_examples() {
        let e = ess(&normals(10_000, 4)).unwrap();
        assert!((e / 1e4 - 1.0).abs() < 0.15, "{e}");
        let e = ess(&ar1(100_000, 0.9, 5)).unwrap();
        let expected = 1e5 * 0.1 / 1.9;
        assert!((e / expected - 1.0).abs() < 0.2, "{e} vs {expected}");
        let twice: Vec<f64> = normals(5_000, 6).into_iter().flat_map(|v| [v, v]).collect();
        let e = ess(&twice).unwrap();
        assert!((e / 5e3 - 1.0).abs() < 0.2, "{e}");
        assert!(matches!(ess(&[1.0; 50]), Err(Error::Undefined(_))));
        assert!(ess(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn hpd_examples() {
        let h = hpd_1d(&normals(100_000, 7), 0.95).unwrap();
        assert_eq!(h.intervals.len(), 1);
        assert!((h.intervals[0].lo + 1.959).abs() < 0.1);
        assert!((h.intervals[0].hi - 1.959).abs() < 0.1);

        let mut rng = stream(8, 0);
        let mix: Vec<f64> = (0..100_000)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                let sign = if rng.random::<bool>() { 3.0 } else { -3.0 };
                sign + 0.5 * z
            })
            .collect();
        let h = hpd_1d(&mix, 0.9).unwrap();
        assert_eq!(h.intervals.len(), 2);
        assert!(h.intervals[0].hi < 0.0 && h.intervals[1].lo > 0.0);

        let x = normals(10_000, 9);
        let h = hpd_1d(&x, 0.999).unwrap();
        let inside = x.iter().filter(|&&v| h.contains(v)).count() as f64 / 1e4;
        assert!(inside >= 0.999);
        assert!(hpd_1d(&x[..50], 0.9).is_err());
        assert!(hpd_1d(&x, 1.0).is_err());
    }

    #[test]
    fn unimodal_hpd_is_not_fragmented_by_bin_noise() {
        for seed in 0..20 {
            let h = hpd_1d(&normals(100_000, seed), 0.95).unwrap();
            assert_eq!(h.intervals.len(), 1, "seed {seed}: {:?}", h.intervals);
        }
    }

    #[test]
    fn mean_check_examples() {
        let a = Curve { angles: vec![0.0, 1.0, 2.0], values: vec![0.3, 0.31, 0.29] };
        assert_eq!(multi_chain_mean_check(&[a.clone(), a.clone()]).unwrap(), 0.0);
        let b = Curve { values: a.values.iter().map(|v| v + 0.05).collect(), ..a.clone() };
        assert!((multi_chain_mean_check(&[a.clone(), b]).unwrap() - 0.05).abs() < 1e-12);
        let c = Curve { angles: vec![0.0, 1.0], values: vec![0.0, 0.0] };
        assert!(multi_chain_mean_check(&[a.clone(), c]).is_err());
        assert!(multi_chain_mean_check(&[a]).is_err());
    }

    #[test]
    fn decorrelation_lag_of_white_noise_is_small() {
        let lag = decorrelation_lag(&normals(10_000, 10), 0.05).unwrap();
        assert_eq!(lag, Some(1));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn ess_is_affine_invariant(seed in 0u64..1000, a in 0.1f64..10.0, b in -5.0f64..5.0) {
            let x = ar1(2_000, 0.6, seed);
            let y: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            let (ex, ey) = (ess(&x).unwrap(), ess(&y).unwrap());
            prop_assert!((ex - ey).abs() < 1e-6 * ex);
        }

        #[test]
        fn hpd_shrinks_with_level(seed in 0u64..1000, l1 in 0.5f64..0.98, dl in 0.005f64..0.02) {
            let x = normals(5_000, seed);
            let small = hpd_1d(&x, l1).unwrap();
            let large = hpd_1d(&x, l1 + dl).unwrap();
            prop_assert!(small.total_length() <= large.total_length() + 1e-12);
        }

        // The overshoot is the mass of the last bin added. Near the mode of a
        // normal sample a single bin of width range/√n holds about 3/√n, so
        // the bound is checked where the threshold bin lies in the shoulders.
        #[test]
        fn hpd_mass_is_within_bin_granularity(seed in 0u64..1000, level in 0.8f64..0.995) {
            let x = normals(5_000, seed);
            let h = hpd_1d(&x, level).unwrap();
            let slack = 2.0 / (x.len() as f64).sqrt();
            let inside = x.iter().filter(|&&v| h.contains(v)).count() as f64 / x.len() as f64;
            prop_assert!(h.mass >= level && h.mass <= level + slack, "{} at {}", h.mass, level);
            prop_assert!(inside >= h.mass);
        }

        #[test]
        fn mean_check_is_a_pseudometric(
            a in proptest::collection::vec(-1.0f64..1.0, 5),
            b in proptest::collection::vec(-1.0f64..1.0, 5),
            c in proptest::collection::vec(-1.0f64..1.0, 5),
        ) {
            let angles: Vec<f64> = (0..5).map(|k| k as f64).collect();
            let mk = |v: &Vec<f64>| Curve { angles: angles.clone(), values: v.clone() };
            let d = |x: &Vec<f64>, y: &Vec<f64>| multi_chain_mean_check(&[mk(x), mk(y)]).unwrap();
            prop_assert_eq!(d(&a, &b), d(&b, &a));
            prop_assert_eq!(d(&a, &a), 0.0);
            prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-12);
        }
    }
}
