use std::f64::consts::{PI, TAU};

use ctbuq_core::randfield::{
    evaluate_boundary_field, sample_boundary_coeffs, Grid, MaternParams, SpectralSampler,
};
use ctbuq_core::rng::stream;
use statrs::distribution::{ContinuousCDF, Normal};

/// Periodic lag-`h` covariance of the 2D spectral field along x, summed
/// directly over the DFT wavevectors of an `n×n` grid on the `2×2` box.
fn spectral_covariance(gamma: f64, tau: f64, amplitude: f64, n: usize, h: usize) -> f64 {
    let signed = |i: usize| if i <= n / 2 { i as f64 } else { i as f64 - n as f64 };
    let (mut num, mut den) = (0.0, 0.0);
    for iy in 0..n {
        for ix in 0..n {
            let (wx, wy) = (PI * signed(ix), PI * signed(iy));
            let s = (tau * tau + wx * wx + wy * wy).powf(-gamma);
            num += s * (wx * h as f64 * 2.0 / n as f64).cos();
            den += s;
        }
    }
    amplitude * amplitude * num / den
}

/// Pixel variance and lag-1 covariance along x, pooled over pixels and draws.
fn empirical_moments(sampler: &SpectralSampler, draws: usize, seed: u64) -> (f64, f64) {
    let g = *sampler.grid();
    let mut rng = stream(seed, 0);
    let (mut var, mut cov) = (0.0, 0.0);
    for _ in 0..draws {
        let f = sampler.sample(&mut rng);
        for iy in 0..g.ny {
            for ix in 0..g.nx {
                let v = f.get(ix, iy);
                var += v * v;
                cov += v * f.get((ix + 1) % g.nx, iy);
            }
        }
    }
    let n = (draws * g.len()) as f64;
    (var / n, cov / n)
}

#[test]
fn pixel_variance_matches_amplitude() {
    let params = MaternParams::new(2.5, 50.0, 1.0, 0.0).unwrap();
    let sampler = SpectralSampler::new(params, Grid::square(64).unwrap(), None).unwrap();
    let (var, _) = empirical_moments(&sampler, 10_000, 1);
    assert!((var - 1.0).abs() < 0.1, "pixel variance {var}");
    assert!((sampler.pointwise_variance() - 1.0).abs() < 1e-12);
}

#[test]
fn neighbour_covariance_matches_spectrum() {
    for tau in [5.0, 20.0] {
        let params = MaternParams::new(2.0, tau, 1.0, 0.0).unwrap();
        let sampler = SpectralSampler::new(params, Grid::square(32).unwrap(), None).unwrap();
        let (_, cov) = empirical_moments(&sampler, 4000, 2);
        let exact = spectral_covariance(2.0, tau, 1.0, 32, 1);
        assert!((cov - exact).abs() < 0.05, "tau {tau}: {cov} vs {exact}");
    }
}

#[test]
fn correlation_decreases_with_tau() {
    let corr: Vec<f64> = [2.0, 10.0, 50.0]
        .iter()
        .map(|&tau| {
            let params = MaternParams::new(2.0, tau, 1.0, 0.0).unwrap();
            let sampler = SpectralSampler::new(params, Grid::square(32).unwrap(), None).unwrap();
            let (var, cov) = empirical_moments(&sampler, 1000, 3);
            cov / var
        })
        .collect();
    assert!(corr[0] > corr[1] && corr[1] > corr[2], "{corr:?}");
}

/// `ξ(θ)` under the boundary prior is `N(m, Σ_k (c k^{-γ})²)` at every angle.
#[test]
fn boundary_marginal_is_gaussian() {
    let (gamma, amplitude, mean, n_kl) = (3.0, 0.3, 0.3f64.ln(), 100);
    let params = MaternParams::boundary(gamma, amplitude, mean).unwrap();
    let var: f64 = (1..=n_kl).map(|k| (amplitude * (k as f64).powf(-gamma)).powi(2)).sum();
    let normal = Normal::new(mean, var.sqrt()).unwrap();

    let mut rng = stream(4, 0);
    let draws = 4000;
    for theta in [0.0, 1.0, 0.5 * TAU] {
        let mut xs: Vec<f64> = (0..draws)
            .map(|_| {
                let c = sample_boundary_coeffs(&params, n_kl, &mut rng).unwrap();
                evaluate_boundary_field(&c, &params, &[theta])[0]
            })
            .collect();
        xs.sort_by(f64::total_cmp);
        let d = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = normal.cdf(x);
                (f - i as f64 / draws as f64).max((i + 1) as f64 / draws as f64 - f)
            })
            .fold(0.0, f64::max);
        // 1% critical value of the one-sample KS statistic
        let critical = 1.63 / (draws as f64).sqrt();
        assert!(d < critical, "theta {theta}: D = {d:.4} >= {critical:.4}");
    }
}
