//! Likelihood and MCMC kernels.
//!
//! The random part of every state is a vector of standard-normal
//! coefficients (see [`crate::randfield`]), so the pCN proposal
//! `ζ = √(1−b²)·ξ + b·ϱ` with `ϱ ~ N(0, I)` preserves the prior exactly and
//! the acceptance ratio involves the likelihood alone.

use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::forward::{disk_chord, GridProjector, PixelColumns, PolygonProjector, ScanGeometry, Sinogram};
use crate::forward::NoiseModel;
use crate::geometry::{Point2, Rect};
use crate::priors::AttenuationLevels;
use crate::randfield::{Grid, MaternParams, SpectralSampler, UniformBoundaryEvaluator};

/// Maps a state `(ξ, c)` to predicted measurements `𝒢(ξ, c)`.
pub trait ForwardModel: Sync {
    /// Length of the coefficient vector.
    fn n_coeffs(&self) -> usize;
    /// Number of predicted measurements.
    fn n_data(&self) -> usize;
    fn predict(&self, coeffs: &[f64], center: Option<Point2>, out: &mut [f64]) -> Result<()>;
}

/// Level-set model: a 2D field synthesised from spectral coefficients,
/// thresholded at zero and projected with a precomputed sparse operator.
#[derive(Debug)]
pub struct LevelSetForward {
    sampler: SpectralSampler,
    projector: GridProjector,
    levels: AttenuationLevels,
}

impl LevelSetForward {
    pub fn new(
        sampler: SpectralSampler,
        projector: GridProjector,
        levels: AttenuationLevels,
    ) -> Result<Self> {
        levels.validate()?;
        if sampler.grid() != projector.grid() {
            return invalid("sampler and projector grids differ");
        }
        Ok(Self {
            sampler,
            projector,
            levels,
        })
    }

    pub fn sampler(&self) -> &SpectralSampler {
        &self.sampler
    }

    pub fn projector(&self) -> &GridProjector {
        &self.projector
    }

    pub fn levels(&self) -> &AttenuationLevels {
        &self.levels
    }

    /// `F_ls(ξ)` on the grid, zero outside the unit disk.
    pub fn image_into(&self, coeffs: &[f64], image: &mut [f64]) {
        self.sampler.synthesize_into(coeffs, image);
        let grid = self.sampler.grid();
        for iy in 0..grid.ny {
            for ix in 0..grid.nx {
                let k = grid.index(ix, iy);
                image[k] = if grid.pixel_center(ix, iy).norm() >= 1.0 {
                    0.0
                } else if image[k] < 0.0 {
                    self.levels.a_minus
                } else {
                    self.levels.a_plus
                };
            }
        }
    }
}

impl ForwardModel for LevelSetForward {
    fn n_coeffs(&self) -> usize {
        self.sampler.n_coeffs()
    }

    fn n_data(&self) -> usize {
        self.projector.geometry().len()
    }

    fn predict(&self, coeffs: &[f64], _center: Option<Point2>, out: &mut [f64]) -> Result<()> {
        if coeffs.len() != self.n_coeffs() {
            return invalid("coefficient count mismatch");
        }
        let mut image = vec![0.0; self.sampler.grid().len()];
        self.image_into(coeffs, &mut image);
        self.projector.apply_into(&image, out);
        Ok(())
    }
}

/// Star-shaped model for one inclusion: constant background `a⁻` on the
/// unit disk, the inclusion at `a⁺`, plus a fixed offset sinogram.
///
/// The boundary is the polygon through `exp(ξ(ϑ_m))` at `n_vertices`
/// uniformly spaced angles, whose line integrals are exact.
#[derive(Debug)]
pub struct StarForward {
    params: MaternParams,
    evaluator: UniformBoundaryEvaluator,
    projector: PolygonProjector,
    levels: AttenuationLevels,
    base: Vec<f64>,
    directions: Vec<Point2>,
}

impl StarForward {
    pub fn new(
        params: MaternParams,
        n_kl: usize,
        n_vertices: usize,
        geometry: ScanGeometry,
        levels: AttenuationLevels,
        offset: Option<&[f64]>,
    ) -> Result<Self> {
        params.validate_boundary()?;
        levels.validate()?;
        let evaluator = UniformBoundaryEvaluator::new(&params, n_kl, n_vertices)?;
        let projector = PolygonProjector::new(geometry)?;
        let mut base: Vec<f64> = (0..geometry.n_theta)
            .flat_map(|_| (0..geometry.n_s).map(|j| levels.a_minus * disk_chord(geometry.offset(j))))
            .collect();
        if let Some(off) = offset {
            if off.len() != base.len() {
                return invalid("offset sinogram has the wrong length");
            }
            for (b, o) in base.iter_mut().zip(off) {
                *b += o;
            }
        }
        let directions = (0..n_vertices)
            .map(|m| Point2::from_polar(1.0, evaluator.angle(m)))
            .collect();
        Ok(Self {
            params,
            evaluator,
            projector,
            levels,
            base,
            directions,
        })
    }

    pub fn params(&self) -> &MaternParams {
        &self.params
    }

    pub fn n_kl(&self) -> usize {
        self.evaluator.n_kl()
    }

    pub fn vertices(&self, coeffs: &[f64], center: Point2) -> Vec<Point2> {
        let log_r = self.evaluator.evaluate(coeffs);
        log_r
            .iter()
            .zip(&self.directions)
            .map(|(lr, d)| center + *d * lr.exp())
            .collect()
    }
}

impl ForwardModel for StarForward {
    fn n_coeffs(&self) -> usize {
        2 * self.evaluator.n_kl()
    }

    fn n_data(&self) -> usize {
        self.base.len()
    }

    fn predict(&self, coeffs: &[f64], center: Option<Point2>, out: &mut [f64]) -> Result<()> {
        let center = center.ok_or_else(|| Error::InvalidArgument("star model needs a center".into()))?;
        if coeffs.len() != self.n_coeffs() {
            return invalid("coefficient count mismatch");
        }
        let vertices = self.vertices(coeffs, center);
        if vertices.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite boundary radius".into()));
        }
        out.copy_from_slice(&self.base);
        self.projector
            .accumulate(&vertices, self.levels.contrast(), out);
        Ok(())
    }
}

/// Star-shaped model on a pixel grid: the image is `a⁻` on the unit disk
/// plus `a⁺ − a⁻` at every pixel whose center lies strictly inside the
/// star, projected with the grid operator, plus a fixed offset sinogram.
#[derive(Debug)]
pub struct RasterStarForward {
    params: MaternParams,
    evaluator: UniformBoundaryEvaluator,
    grid: Grid,
    columns: PixelColumns,
    levels: AttenuationLevels,
    base: Vec<f64>,
}

impl RasterStarForward {
    pub fn new(
        params: MaternParams,
        n_kl: usize,
        n_vertices: usize,
        projector: &GridProjector,
        levels: AttenuationLevels,
        offset: Option<&[f64]>,
    ) -> Result<Self> {
        params.validate_boundary()?;
        levels.validate()?;
        let evaluator = UniformBoundaryEvaluator::new(&params, n_kl, n_vertices)?;
        let grid = *projector.grid();
        let background: Vec<f64> = (0..grid.len())
            .map(|p| {
                let c = grid.pixel_center(p % grid.nx, p / grid.nx);
                if c.norm() < 1.0 {
                    levels.a_minus
                } else {
                    0.0
                }
            })
            .collect();
        let mut base = vec![0.0; projector.geometry().len()];
        projector.apply_into(&background, &mut base);
        if let Some(off) = offset {
            if off.len() != base.len() {
                return invalid("offset sinogram has the wrong length");
            }
            for (b, o) in base.iter_mut().zip(off) {
                *b += o;
            }
        }
        Ok(Self {
            params,
            evaluator,
            grid,
            columns: projector.columns(),
            levels,
            base,
        })
    }

    pub fn params(&self) -> &MaternParams {
        &self.params
    }

    pub fn n_kl(&self) -> usize {
        self.evaluator.n_kl()
    }

    /// Flat indices of the pixels inside the star, in raster order. The log
    /// radius between evaluation angles is interpolated linearly.
    pub fn pixels(&self, coeffs: &[f64], center: Point2) -> Result<Vec<usize>> {
        let mut log_r = Vec::new();
        self.evaluator.evaluate_into(coeffs, &mut log_r);
        if log_r.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite boundary radius".into()));
        }
        let m = log_r.len();
        let r_max = log_r.iter().cloned().fold(f64::NEG_INFINITY, f64::max).exp();
        let g = &self.grid;
        let to_index = |v: f64, o: f64, n: usize| -> usize { (((v - o) / g.spacing - 0.5).max(0.0) as usize).min(n - 1) };
        let (x0, x1) = (to_index(center.x - r_max, g.origin.x, g.nx), to_index(center.x + r_max, g.origin.x, g.nx) + 1);
        let (y0, y1) = (to_index(center.y - r_max, g.origin.y, g.ny), to_index(center.y + r_max, g.origin.y, g.ny) + 1);
        let scale = m as f64 / TAU;
        let mut out = Vec::new();
        for iy in y0..=y1.min(g.ny - 1) {
            for ix in x0..=x1.min(g.nx - 1) {
                let p = g.pixel_center(ix, iy);
                if p.norm() >= 1.0 {
                    continue;
                }
                let d = p - center;
                let rho = d.norm();
                if rho >= r_max {
                    continue;
                }
                let f = d.polar_angle() * scale;
                let k = (f.floor() as usize).min(m - 1);
                let t = f - k as f64;
                let lr = log_r[k] * (1.0 - t) + log_r[(k + 1) % m] * t;
                if rho < lr.exp() {
                    out.push(g.index(ix, iy));
                }
            }
        }
        Ok(out)
    }
}

impl ForwardModel for RasterStarForward {
    fn n_coeffs(&self) -> usize {
        2 * self.evaluator.n_kl()
    }

    fn n_data(&self) -> usize {
        self.base.len()
    }

    fn predict(&self, coeffs: &[f64], center: Option<Point2>, out: &mut [f64]) -> Result<()> {
        let center = center.ok_or_else(|| Error::InvalidArgument("star model needs a center".into()))?;
        if coeffs.len() != self.n_coeffs() {
            return invalid("coefficient count mismatch");
        }
        let pixels = self.pixels(coeffs, center)?;
        out.copy_from_slice(&self.base);
        let w = self.levels.contrast();
        for p in pixels {
            self.columns.add_column(p, w, out);
        }
        Ok(())
    }
}

/// Data, noise model and forward map defining `Φ(ξ, c) = ½‖y − 𝒢(ξ, c)‖²/σ²`.
pub struct LikelihoodContext<'a> {
    pub data: &'a Sinogram,
    pub noise: NoiseModel,
    pub forward: &'a dyn ForwardModel,
    /// Support of the uniform center prior (center-carrying models only).
    pub bounding_box: Option<Rect>,
}

impl<'a> LikelihoodContext<'a> {
    pub fn new(
        data: &'a Sinogram,
        noise: NoiseModel,
        forward: &'a dyn ForwardModel,
        bounding_box: Option<Rect>,
    ) -> Result<Self> {
        if !(noise.sigma_noise > 0.0 && noise.sigma_noise.is_finite()) {
            return invalid("sigma_noise must be positive");
        }
        if forward.n_data() != data.values.len() {
            return invalid(format!(
                "forward model predicts {} values, data has {}",
                forward.n_data(),
                data.values.len()
            ));
        }
        Ok(Self {
            data,
            noise,
            forward,
            bounding_box,
        })
    }

    pub fn phi(&self, coeffs: &[f64], center: Option<Point2>) -> Result<f64> {
        let mut g = vec![0.0; self.data.values.len()];
        self.forward.predict(coeffs, center, &mut g)?;
        let inv = 1.0 / (self.noise.sigma_noise * self.noise.sigma_noise);
        let mut ss = 0.0;
        for (y, p) in self.data.values.iter().zip(&g) {
            let r = y - p;
            ss += r * r;
        }
        let phi = 0.5 * ss * inv;
        if !phi.is_finite() {
            return Err(Error::Numerical("non-finite negative log-likelihood".into()));
        }
        Ok(phi)
    }
}

/// Current coefficients, center and cached `Φ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    pub coeffs: Vec<f64>,
    pub center: Option<Point2>,
    pub phi: f64,
}

impl ChainState {
    pub fn new(ctx: &LikelihoodContext<'_>, coeffs: Vec<f64>, center: Option<Point2>) -> Result<Self> {
        if coeffs.len() != ctx.forward.n_coeffs() {
            return invalid(format!(
                "state has {} coefficients, model needs {}",
                coeffs.len(),
                ctx.forward.n_coeffs()
            ));
        }
        if let (Some(c), Some(b)) = (center, ctx.bounding_box) {
            if !b.contains(c) {
                return invalid("initial center lies outside the bounding box");
            }
        }
        let phi = ctx.phi(&coeffs, center)?;
        Ok(Self { coeffs, center, phi })
    }
}

pub fn neg_log_likelihood(ctx: &LikelihoodContext<'_>, state: &ChainState) -> Result<f64> {
    ctx.phi(&state.coeffs, state.center)
}

/// `min{1, exp(Φ_current − Φ_proposal)}`.
pub fn acceptance_probability(phi_current: f64, phi_proposal: f64) -> f64 {
    (phi_current - phi_proposal).exp().min(1.0)
}

fn accept<R: Rng + ?Sized>(phi_current: f64, phi_proposal: f64, rng: &mut R) -> bool {
    let a = acceptance_probability(phi_current, phi_proposal);
    rng.random::<f64>() < a
}

/// One pCN update of the coefficients. Returns whether it was accepted.
pub fn pcn_step<R: Rng + ?Sized>(
    state: &mut ChainState,
    ctx: &LikelihoodContext<'_>,
    b1: f64,
    rng: &mut R,
) -> Result<bool> {
    if !(0.0..=1.0).contains(&b1) {
        return invalid(format!("pCN step must lie in [0, 1], got {b1}"));
    }
    let keep = (1.0 - b1 * b1).sqrt();
    let proposal: Vec<f64> = state
        .coeffs
        .iter()
        .map(|&x| {
            let z: f64 = rng.sample(StandardNormal);
            keep * x + b1 * z
        })
        .collect();
    let phi = ctx.phi(&proposal, state.center)?;
    if accept(state.phi, phi, rng) {
        state.coeffs = proposal;
        state.phi = phi;
        Ok(true)
    } else {
        Ok(false)
    }
}

/// One random-walk update `o = c + b2·ρ` of the center; proposals outside
/// the bounding box are rejected without evaluating the likelihood.
pub fn rwm_center_step<R: Rng + ?Sized>(
    state: &mut ChainState,
    ctx: &LikelihoodContext<'_>,
    b2: f64,
    rng: &mut R,
) -> Result<bool> {
    let center = state
        .center
        .ok_or_else(|| Error::InvalidArgument("state has no center".into()))?;
    let bbox = ctx
        .bounding_box
        .ok_or_else(|| Error::InvalidArgument("context has no bounding box".into()))?;
    if !(b2 >= 0.0) {
        return invalid(format!("center step must be non-negative, got {b2}"));
    }
    let zx: f64 = rng.sample(StandardNormal);
    let zy: f64 = rng.sample(StandardNormal);
    let o = center + Point2::new(zx, zy) * b2;
    if !bbox.contains(o) {
        return Ok(false);
    }
    let phi = ctx.phi(&state.coeffs, Some(o))?;
    if accept(state.phi, phi, rng) {
        state.center = Some(o);
        state.phi = phi;
        Ok(true)
    } else {
        Ok(false)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepStats {
    pub pcn_accepted: usize,
    pub pcn_proposed: usize,
    pub mh_accepted: usize,
    pub mh_proposed: usize,
}

impl SweepStats {
    pub fn pcn_rate(&self) -> f64 {
        rate(self.pcn_accepted, self.pcn_proposed)
    }

    pub fn mh_rate(&self) -> f64 {
        rate(self.mh_accepted, self.mh_proposed)
    }

    fn add(&mut self, other: &SweepStats) {
        self.pcn_accepted += other.pcn_accepted;
        self.pcn_proposed += other.pcn_proposed;
        self.mh_accepted += other.mh_accepted;
        self.mh_proposed += other.mh_proposed;
    }
}

fn rate(a: usize, n: usize) -> f64 {
    if n == 0 {
        f64::NAN
    } else {
        a as f64 / n as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    /// Initial pCN step `b1 ∈ [0, 1]`.
    pub b1: f64,
    /// Initial center step `b2 > 0`.
    pub b2: f64,
    /// pCN steps per sweep.
    pub n_pcn: usize,
    /// Center steps per sweep; ignored for center-free states.
    pub n_mh: usize,
    /// Recorded sweeps after warm-up.
    pub n_samples: usize,
    pub warmup_sweeps: usize,
    /// pCN steps per warm-up sweep.
    pub warmup_pcn: usize,
    /// Center steps per warm-up sweep.
    pub warmup_mh: usize,
    pub target_acceptance: (f64, f64),
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            b1: 0.1,
            b2: 0.01,
            n_pcn: 20,
            n_mh: 20,
            n_samples: 5_000,
            warmup_sweeps: 20,
            warmup_pcn: 500,
            warmup_mh: 500,
            target_acceptance: (0.15, 0.25),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.b1) {
            return invalid(format!("b1 must lie in [0, 1], got {}", self.b1));
        }
        if !(self.b2 >= 0.0 && self.b2.is_finite()) {
            return invalid(format!("b2 must be non-negative, got {}", self.b2));
        }
        let (lo, hi) = self.target_acceptance;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return invalid("target acceptance band must satisfy 0 < lo <= hi < 1");
        }
        Ok(())
    }
}

/// `n_pcn` pCN steps then `n_mh` center steps.
pub fn gibbs_sweep<R: Rng + ?Sized>(
    state: &mut ChainState,
    ctx: &LikelihoodContext<'_>,
    b1: f64,
    b2: f64,
    n_pcn: usize,
    n_mh: usize,
    rng: &mut R,
) -> Result<SweepStats> {
    let mut stats = SweepStats::default();
    for _ in 0..n_pcn {
        stats.pcn_proposed += 1;
        if pcn_step(state, ctx, b1, rng)? {
            stats.pcn_accepted += 1;
        }
    }
    if state.center.is_some() {
        for _ in 0..n_mh {
            stats.mh_proposed += 1;
            if rwm_center_step(state, ctx, b2, rng)? {
                stats.mh_accepted += 1;
            }
        }
    }
    Ok(stats)
}

fn adapt(step: f64, rate: f64, (lo, hi): (f64, f64)) -> f64 {
    if rate.is_nan() {
        step
    } else if rate > hi {
        step * 1.5
    } else if rate < lo {
        step * (2.0 / 3.0)
    } else {
        step
    }
}

/// Warm-up: runs `warmup_sweeps` sweeps of `warmup_pcn`/`warmup_mh` steps and
/// rescales each step size after every sweep (×1.5 above the target band,
/// ×2/3 below it). Returns the final `(b1, b2)`.
pub fn tune<R: Rng + ?Sized>(
    state: &mut ChainState,
    ctx: &LikelihoodContext<'_>,
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<(f64, f64)> {
    config.validate()?;
    let (mut b1, mut b2) = (config.b1, config.b2);
    for _ in 0..config.warmup_sweeps {
        let s = gibbs_sweep(state, ctx, b1, b2, config.warmup_pcn, config.warmup_mh, rng)?;
        b1 = adapt(b1, s.pcn_rate(), config.target_acceptance).clamp(0.0, 1.0);
        b2 = adapt(b2, s.mh_rate(), config.target_acceptance);
    }
    Ok((b1, b2))
}

/// Post-warm-up chain statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainRun {
    pub b1: f64,
    pub b2: f64,
    pub totals: SweepStats,
    /// Acceptance counts per recorded sweep.
    pub trace: Vec<SweepStats>,
}

impl ChainRun {
    pub fn acceptance_rates(&self) -> (f64, f64) {
        (self.totals.pcn_rate(), self.totals.mh_rate())
    }
}

/// Tunes, then records `n_samples` sweeps, handing each recorded state to
/// `observer` together with its sweep index.
pub fn run_chain_with<R, F>(
    state: &mut ChainState,
    ctx: &LikelihoodContext<'_>,
    config: &SamplerConfig,
    rng: &mut R,
    mut observer: F,
) -> Result<ChainRun>
where
    R: Rng + ?Sized,
    F: FnMut(usize, &ChainState),
{
    let (b1, b2) = tune(state, ctx, config, rng)?;
    let mut totals = SweepStats::default();
    let mut trace = Vec::with_capacity(config.n_samples);
    for sweep in 0..config.n_samples {
        let s = gibbs_sweep(state, ctx, b1, b2, config.n_pcn, config.n_mh, rng)?;
        totals.add(&s);
        trace.push(s);
        observer(sweep, state);
    }
    Ok(ChainRun {
        b1,
        b2,
        totals,
        trace,
    })
}

/// A chain with every recorded state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Chain {
    pub records: Vec<ChainRecord>,
    pub run: ChainRun,
}

/// One recorded state, as written to chain files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainRecord {
    pub sweep: usize,
    pub phi: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<Point2>,
    pub coeffs: Vec<f64>,
}

impl ChainRecord {
    pub fn from_state(sweep: usize, s: &ChainState) -> Self {
        Self {
            sweep,
            phi: s.phi,
            center: s.center,
            coeffs: s.coeffs.clone(),
        }
    }
}

/// First line of a chain file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainHeader {
    pub params: MaternParams,
    pub n_kl: usize,
}

pub fn run_chain<R: Rng + ?Sized>(
    init: ChainState,
    ctx: &LikelihoodContext<'_>,
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<Chain> {
    let mut state = init;
    let mut records = Vec::with_capacity(config.n_samples);
    let run = run_chain_with(&mut state, ctx, config, rng, |sweep, s| {
        records.push(ChainRecord::from_state(sweep, s))
    })?;
    Ok(Chain { records, run })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::radon_functional;
    use crate::priors::{Background, Margins, Phantom, StarInclusion};
    use crate::randfield::{BoundaryCoeffs, Grid};
    use crate::rng::stream;

    /// Φ = ½ Σ (y_k − scale·x_k)²/σ² on the first coefficients: a Gaussian
    /// target with a closed-form posterior.
    struct Linear {
        n: usize,
        scale: f64,
    }

    impl ForwardModel for Linear {
        fn n_coeffs(&self) -> usize {
            self.n
        }
        fn n_data(&self) -> usize {
            self.n
        }
        fn predict(&self, coeffs: &[f64], center: Option<Point2>, out: &mut [f64]) -> Result<()> {
            let shift = center.map_or(0.0, |c| c.x);
            for (o, c) in out.iter_mut().zip(coeffs) {
                *o = self.scale * c + shift;
            }
            Ok(())
        }
    }

    fn data(values: Vec<f64>) -> Sinogram {
        let g = ScanGeometry::full(1, values.len()).unwrap();
        Sinogram::new(g, values).unwrap()
    }

    fn noise(sigma: f64, n: usize) -> NoiseModel {
        NoiseModel {
            sigma_noise: sigma,
            dimension: n,
        }
    }

    #[test]
    fn phi_examples() {
        let model = Linear { n: 3, scale: 1.0 };
        let y = data(vec![0.5, -1.0, 2.0]);
        let ctx = LikelihoodContext::new(&y, noise(0.1, 3), &model, None).unwrap();
        let s = ChainState::new(&ctx, vec![0.5, -1.0, 2.0], None).unwrap();
        assert_eq!(neg_log_likelihood(&ctx, &s).unwrap(), 0.0);
        let s = ChainState::new(&ctx, vec![0.5, -1.1, 2.0], None).unwrap();
        assert!((s.phi - 0.5).abs() < 1e-12);
        assert!(LikelihoodContext::new(&y, noise(0.0, 3), &model, None).is_err());
        assert!(ChainState::new(&ctx, vec![0.0; 2], None).is_err());
    }

    #[test]
    fn acceptance_probability_examples() {
        assert_eq!(acceptance_probability(1.0, 1.0), 1.0);
        assert_eq!(acceptance_probability(1.0, 1.0 - 2f64.ln()), 1.0);
        assert!((acceptance_probability(1.0, 1.0 + 2f64.ln()) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn degenerate_steps_leave_state_unchanged() {
        let model = Linear { n: 4, scale: 1.0 };
        let y = data(vec![1.0; 4]);
        let bbox = Rect { x_min: -1.0, x_max: 1.0, y_min: -1.0, y_max: 1.0 };
        let ctx = LikelihoodContext::new(&y, noise(0.5, 4), &model, Some(bbox)).unwrap();
        let init = ChainState::new(&ctx, vec![0.3, -0.2, 0.1, 0.0], Some(Point2::new(0.1, 0.2))).unwrap();
        let mut rng = stream(1, 0);
        let mut s = init.clone();
        assert!(pcn_step(&mut s, &ctx, 0.0, &mut rng).unwrap());
        assert!(rwm_center_step(&mut s, &ctx, 0.0, &mut rng).unwrap());
        assert_eq!(s, init);
        let stats = gibbs_sweep(&mut s, &ctx, 0.0, 0.0, 7, 5, &mut rng).unwrap();
        assert_eq!(s, init);
        assert_eq!((stats.pcn_accepted, stats.mh_accepted), (7, 5));
        let stats = gibbs_sweep(&mut s, &ctx, 0.3, 0.1, 0, 0, &mut rng).unwrap();
        assert_eq!(s, init);
        assert_eq!(stats, SweepStats::default());
        assert!(pcn_step(&mut s, &ctx, 1.5, &mut rng).is_err());
    }

    #[test]
    fn center_outside_box_is_rejected() {
        let model = Linear { n: 1, scale: 1.0 };
        let y = data(vec![0.0]);
        let bbox = Rect { x_min: 0.0, x_max: 0.01, y_min: 0.0, y_max: 0.01 };
        let ctx = LikelihoodContext::new(&y, noise(1.0, 1), &model, Some(bbox)).unwrap();
        let mut s = ChainState::new(&ctx, vec![0.0], Some(Point2::new(0.005, 0.005))).unwrap();
        let before = s.clone();
        let mut rng = stream(2, 0);
        let mut rejected = 0;
        for _ in 0..200 {
            if !rwm_center_step(&mut s, &ctx, 10.0, &mut rng).unwrap() {
                rejected += 1;
            }
        }
        assert_eq!(rejected, 200);
        assert_eq!(s, before);
    }

    #[test]
    fn sweep_counts_forty_outcomes() {
        let model = Linear { n: 2, scale: 1.0 };
        let y = data(vec![0.2, 0.1]);
        let bbox = Rect { x_min: -1.0, x_max: 1.0, y_min: -1.0, y_max: 1.0 };
        let ctx = LikelihoodContext::new(&y, noise(0.3, 2), &model, Some(bbox)).unwrap();
        let mut s = ChainState::new(&ctx, vec![0.0, 0.0], Some(Point2::ORIGIN)).unwrap();
        let st = gibbs_sweep(&mut s, &ctx, 0.3, 0.1, 20, 20, &mut stream(3, 0)).unwrap();
        assert_eq!(st.pcn_proposed + st.mh_proposed, 40);
    }

    #[test]
    fn flat_likelihood_targets_the_prior() {
        let model = Linear { n: 5, scale: 0.0 };
        let y = data(vec![0.0; 5]);
        let ctx = LikelihoodContext::new(&y, noise(1.0, 5), &model, None).unwrap();
        for b1 in [1.0, 0.5] {
            let init = ChainState::new(&ctx, vec![0.0; 5], None).unwrap();
            let cfg = SamplerConfig {
                b1,
                n_pcn: 1,
                n_mh: 0,
                n_samples: 100_000,
                warmup_sweeps: 0,
                ..SamplerConfig::default()
            };
            let chain = run_chain(init, &ctx, &cfg, &mut stream(4, 0)).unwrap();
            assert_eq!(chain.run.totals.pcn_accepted, 100_000);
            for k in 0..5 {
                let xs: Vec<f64> = chain.records.iter().map(|r| r.coeffs[k]).collect();
                let m = xs.iter().sum::<f64>() / xs.len() as f64;
                let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64;
                assert!(m.abs() < 0.05, "mean {m}");
                assert!((v - 1.0).abs() < 0.05, "var {v}");
            }
        }
    }

    #[test]
    fn empty_chain_and_determinism() {
        let model = Linear { n: 3, scale: 1.0 };
        let y = data(vec![0.3, 0.2, 0.1]);
        let ctx = LikelihoodContext::new(&y, noise(0.2, 3), &model, None).unwrap();
        let init = ChainState::new(&ctx, vec![0.0; 3], None).unwrap();
        let cfg = SamplerConfig { n_samples: 0, warmup_sweeps: 2, warmup_pcn: 10, ..Default::default() };
        assert!(run_chain(init.clone(), &ctx, &cfg, &mut stream(5, 0)).unwrap().records.is_empty());
        let cfg = SamplerConfig { n_samples: 50, n_pcn: 3, ..cfg };
        let a = run_chain(init.clone(), &ctx, &cfg, &mut stream(5, 0)).unwrap();
        let b = run_chain(init, &ctx, &cfg, &mut stream(5, 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn posterior_mean_of_gaussian_target() {
        // prior N(0,1), y = x + N(0, σ²): posterior mean y/(1+σ²), var σ²/(1+σ²)
        let model = Linear { n: 1, scale: 1.0 };
        let sigma: f64 = 0.5;
        let y = data(vec![1.0]);
        let ctx = LikelihoodContext::new(&y, noise(sigma, 1), &model, None).unwrap();
        let init = ChainState::new(&ctx, vec![0.0], None).unwrap();
        let cfg = SamplerConfig {
            b1: 0.5,
            n_pcn: 1,
            n_mh: 0,
            n_samples: 200_000,
            warmup_sweeps: 0,
            ..Default::default()
        };
        let chain = run_chain(init, &ctx, &cfg, &mut stream(6, 0)).unwrap();
        let xs: Vec<f64> = chain.records.iter().map(|r| r.coeffs[0]).collect();
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64;
        let s2 = sigma * sigma;
        assert!((m - 1.0 / (1.0 + s2)).abs() < 0.02, "{m}");
        assert!((v - s2 / (1.0 + s2)).abs() < 0.02, "{v}");
    }

    #[test]
    fn two_state_flux_balance() {
        // lump the 1D posterior into {x < 0.3} and {x ≥ 0.3}; a reversible
        // stationary chain crosses the cut equally often in both directions,
        // and the time spent on each side matches the posterior mass
        let model = Linear { n: 1, scale: 1.0 };
        let sigma: f64 = 0.7;
        let y = data(vec![0.6]);
        let ctx = LikelihoodContext::new(&y, noise(sigma, 1), &model, None).unwrap();
        let init = ChainState::new(&ctx, vec![0.0], None).unwrap();
        let cfg = SamplerConfig { b1: 0.8, n_pcn: 1, n_mh: 0, n_samples: 200_000, warmup_sweeps: 0, ..Default::default() };
        let chain = run_chain(init, &ctx, &cfg, &mut stream(7, 0)).unwrap();
        let side: Vec<bool> = chain.records.iter().map(|r| r.coeffs[0] >= 0.3).collect();
        let (mut ab, mut ba) = (0usize, 0usize);
        for w in side.windows(2) {
            match (w[0], w[1]) {
                (false, true) => ab += 1,
                (true, false) => ba += 1,
                _ => {}
            }
        }
        assert!((ab as i64 - ba as i64).abs() <= 1);
        let s2 = sigma * sigma;
        let mean = 0.6 / (1.0 + s2);
        let sd = (s2 / (1.0 + s2)).sqrt();
        let p_b = 0.5 * erfc((0.3 - mean) / (sd * std::f64::consts::SQRT_2));
        let frac = side.iter().filter(|&&b| b).count() as f64 / side.len() as f64;
        assert!((frac - p_b).abs() < 0.02, "{frac} vs {p_b}");
        // π(a)P(a→b) ≈ π(b)P(b→a)
        let n_a = side.iter().filter(|&&b| !b).count() as f64;
        let n_b = side.len() as f64 - n_a;
        let lhs = (n_a / side.len() as f64) * (ab as f64 / n_a);
        let rhs = (n_b / side.len() as f64) * (ba as f64 / n_b);
        assert!((lhs - rhs).abs() < 1e-4);
    }

    fn erfc(x: f64) -> f64 {
        // Abramowitz-Stegun 7.1.26, |error| < 1.5e-7
        let t = 1.0 / (1.0 + 0.3275911 * x.abs());
        let poly = t * (0.254829592 + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
        let e = poly * (-x * x).exp();
        if x >= 0.0 { e } else { 2.0 - e }
    }

    #[test]
    fn tuning_moves_step_sizes_in_the_right_direction() {
        let sharp = Linear { n: 20, scale: 1.0 };
        let y = data(vec![0.5; 20]);
        let ctx = LikelihoodContext::new(&y, noise(1e-3, 20), &sharp, None).unwrap();
        let mut s = ChainState::new(&ctx, vec![0.0; 20], None).unwrap();
        let cfg = SamplerConfig { b1: 1.0, warmup_sweeps: 5, warmup_pcn: 50, warmup_mh: 0, ..Default::default() };
        let (b1, _) = tune(&mut s, &ctx, &cfg, &mut stream(8, 0)).unwrap();
        assert!(b1 < 1.0 * (2.0f64 / 3.0).powi(4));

        let easy = Linear { n: 3, scale: 0.0 };
        let y = data(vec![0.0; 3]);
        let ctx = LikelihoodContext::new(&y, noise(1.0, 3), &easy, None).unwrap();
        let mut s = ChainState::new(&ctx, vec![0.0; 3], None).unwrap();
        let cfg = SamplerConfig { b1: 1e-6, ..cfg };
        let (b1, _) = tune(&mut s, &ctx, &cfg, &mut stream(9, 0)).unwrap();
        assert!((b1 - 1e-6 * 1.5f64.powi(5)).abs() < 1e-15);
    }

    #[test]
    fn tuning_fixed_point() {
        assert_eq!(adapt(0.3, 0.2, (0.15, 0.25)), 0.3);
        assert_eq!(adapt(0.3, 0.15, (0.15, 0.25)), 0.3);
        assert_eq!(adapt(0.3, 0.25, (0.15, 0.25)), 0.3);
        assert_eq!(adapt(0.3, f64::NAN, (0.15, 0.25)), 0.3);
    }

    fn star_setup() -> (Phantom, ScanGeometry, MaternParams) {
        let params = MaternParams::boundary(3.0, 0.3, 0.3f64.ln()).unwrap();
        let mut c = BoundaryCoeffs::zeros(16).unwrap();
        c.pair_mut(2)[0] = 0.8;
        c.pair_mut(3)[1] = -0.6;
        let inc = StarInclusion::new(Point2::new(0.15, -0.1), c, params).unwrap();
        let ph = Phantom {
            inclusions: vec![inc],
            background: Background::Constant,
            levels: AttenuationLevels::new(0.1, 1.0).unwrap(),
            margins: Margins::default(),
        };
        (ph, ScanGeometry::full(20, 30).unwrap(), params)
    }

    #[test]
    fn star_forward_matches_functional_quadrature() {
        let (ph, g, params) = star_setup();
        let model = StarForward::new(params, 16, 1024, g, ph.levels, None).unwrap();
        let mut pred = vec![0.0; g.len()];
        let inc = &ph.inclusions[0];
        model.predict(&inc.coeffs().to_flat(), Some(inc.center()), &mut pred).unwrap();
        let reference = crate::forward::radon_functional_with_step(&ph, &g, 1e-4);
        let max = reference.max_abs();
        for (a, b) in pred.iter().zip(&reference.values) {
            assert!((a - b).abs() < 2e-3 * max, "{a} vs {b}");
        }
    }

    #[test]
    fn cached_phi_stays_coherent() {
        let (ph, g, params) = star_setup();
        let y = radon_functional(&ph, &g);
        let model = StarForward::new(params, 16, 256, g, ph.levels, None).unwrap();
        let bbox = Rect { x_min: -0.2, x_max: 0.5, y_min: -0.45, y_max: 0.25 };
        let ctx = LikelihoodContext::new(&y, noise(0.05, g.len()), &model, Some(bbox)).unwrap();
        let mut s = ChainState::new(&ctx, vec![0.0; 32], Some(Point2::new(0.1, -0.1))).unwrap();
        let mut rng = stream(10, 0);
        for _ in 0..50 {
            pcn_step(&mut s, &ctx, 0.2, &mut rng).unwrap();
            let fresh = neg_log_likelihood(&ctx, &s).unwrap();
            assert!((fresh - s.phi).abs() <= 1e-10 * fresh.max(1.0));
            rwm_center_step(&mut s, &ctx, 0.02, &mut rng).unwrap();
            let fresh = neg_log_likelihood(&ctx, &s).unwrap();
            assert!((fresh - s.phi).abs() <= 1e-10 * fresh.max(1.0));
        }
    }

    #[test]
    fn level_set_forward_matches_radon_grid() {
        let grid = Grid::square(32).unwrap();
        let g = ScanGeometry::full(10, 32).unwrap();
        let levels = AttenuationLevels::new(0.1, 1.0).unwrap();
        let sampler = SpectralSampler::new(MaternParams::new(2.0, 5.0, 1.0, -0.5).unwrap(), grid, Some(8.0)).unwrap();
        let coeffs = sampler.sample_coeffs(&mut stream(11, 0));
        let model = LevelSetForward::new(sampler, GridProjector::new(grid, g).unwrap(), levels).unwrap();
        let mut image = vec![0.0; grid.len()];
        model.image_into(&coeffs, &mut image);
        assert!(image.iter().all(|&v| v == 0.0 || v == 0.1 || v == 1.0));
        let mut pred = vec![0.0; g.len()];
        model.predict(&coeffs, None, &mut pred).unwrap();
        let img = crate::randfield::Field2D::new(grid, image).unwrap();
        let reference = crate::forward::radon_grid(&img, &g);
        for (a, b) in pred.iter().zip(&reference.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn raster_pixels_match_star_membership() {
        let params = MaternParams::boundary(3.0, 0.3, 0.3f64.ln()).unwrap();
        let mut rng = stream(5, 0);
        let coeffs = crate::randfield::sample_boundary_coeffs(&params, 20, &mut rng).unwrap();
        let center = Point2::new(0.2, -0.1);
        let inc = StarInclusion::new(center, coeffs.clone(), params).unwrap();
        let grid = Grid::square(64).unwrap();
        let proj = GridProjector::new(grid, ScanGeometry::full(8, 64).unwrap()).unwrap();
        let levels = AttenuationLevels::new(0.1, 1.0).unwrap();
        let model = RasterStarForward::new(params, 20, 1024, &proj, levels, None).unwrap();
        let got = model.pixels(&coeffs.to_flat(), center).unwrap();
        let want: Vec<usize> = (0..grid.len())
            .filter(|&p| {
                let c = grid.pixel_center(p % grid.nx, p / grid.nx);
                c.norm() < 1.0 && inc.contains(c)
            })
            .collect();
        assert!(!want.is_empty());
        assert_eq!(got, want);
    }

    #[test]
    fn raster_model_matches_grid_projection_of_raster_image() {
        let params = MaternParams::boundary(3.0, 0.3, 0.3f64.ln()).unwrap();
        let mut rng = stream(6, 0);
        let coeffs = crate::randfield::sample_boundary_coeffs(&params, 10, &mut rng).unwrap();
        let center = Point2::new(-0.3, 0.1);
        let grid = Grid::square(48).unwrap();
        let proj = GridProjector::new(grid, ScanGeometry::full(12, 48).unwrap()).unwrap();
        let levels = AttenuationLevels::new(0.1, 1.0).unwrap();
        let model = RasterStarForward::new(params, 10, 256, &proj, levels, None).unwrap();
        let inside = model.pixels(&coeffs.to_flat(), center).unwrap();
        let mut image: Vec<f64> = (0..grid.len())
            .map(|p| if grid.pixel_center(p % grid.nx, p / grid.nx).norm() < 1.0 { 0.1 } else { 0.0 })
            .collect();
        for p in inside {
            image[p] = 1.0;
        }
        let mut want = vec![0.0; proj.geometry().len()];
        proj.apply_into(&image, &mut want);
        let mut got = vec![0.0; want.len()];
        model.predict(&coeffs.to_flat(), Some(center), &mut got).unwrap();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
