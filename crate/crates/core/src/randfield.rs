//! Whittle-Matérn Gaussian random fields.
//!
//! Two representations are used:
//!
//! * periodic 1D fields on `[0, 2π)` written as a truncated Karhunen-Loève
//!   series `ξ(θ) = m + Σ_k w_k (a_k sin kθ + b_k cos kθ)` with standard-normal
//!   coefficients, used for star-shaped inclusion boundaries;
//! * stationary fields on a periodic 2D grid, synthesised from real Fourier
//!   coefficients scaled by the square root of the spectral density
//!   `S(w) = (τ² + |w|²)^{-γ}` and transformed back with an inverse FFT.
//!
//! In both cases the random state is a flat vector of i.i.d. standard-normal
//! coefficients; the covariance lives entirely in deterministic weights. The
//! MCMC kernels in [`crate::inference`] rely on this.

use std::f64::consts::TAU;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::Point2;

/// Which eigenvalue sequence the 1D boundary expansion uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlForm {
    /// `c · k^{-γ}`, the weights of the boundary model with τ fixed at one.
    #[default]
    Literal,
    /// `c · (τ² + k²)^{-γ/2}`, the exact eigenvalues of `(τ²I − Δ)^{-γ}` on
    /// the circle.
    Exact,
}

/// Hyperparameters of a Whittle-Matérn field.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaternParams {
    /// Smoothness, `γ = ν + 1`.
    pub gamma: f64,
    /// Inverse correlation length, `τ = 1/ℓ`.
    pub tau: f64,
    /// Amplitude `c` of the expansion (1D) or marginal standard deviation (2D).
    pub amplitude: f64,
    /// Constant mean `m`.
    #[serde(default)]
    pub mean: f64,
    #[serde(default)]
    pub kl_form: KlForm,
}

impl MaternParams {
    pub fn new(gamma: f64, tau: f64, amplitude: f64, mean: f64) -> Result<Self> {
        let p = Self {
            gamma,
            tau,
            amplitude,
            mean,
            kl_form: KlForm::Literal,
        };
        p.validate()?;
        Ok(p)
    }

    /// Parameters for a boundary field: τ = 1 and γ > 1 so that samples are
    /// Lipschitz.
    pub fn boundary(gamma: f64, amplitude: f64, mean: f64) -> Result<Self> {
        let p = Self::new(gamma, 1.0, amplitude, mean)?;
        p.validate_boundary()?;
        Ok(p)
    }

    pub fn with_kl_form(mut self, form: KlForm) -> Self {
        self.kl_form = form;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return invalid(format!("gamma must be finite and >= 0, got {}", self.gamma));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return invalid(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.amplitude.is_finite() && self.amplitude > 0.0) {
            return invalid(format!("amplitude must be positive, got {}", self.amplitude));
        }
        if !self.mean.is_finite() {
            return invalid("mean must be finite");
        }
        Ok(())
    }

    pub fn validate_boundary(&self) -> Result<()> {
        self.validate()?;
        if self.gamma <= 1.0 {
            return invalid(format!(
                "boundary fields need gamma > 1 for Lipschitz samples, got {}",
                self.gamma
            ));
        }
        Ok(())
    }
}

/// Truncated KL coefficients `(ξ¹_k, ξ²_k)`, `k = 1..n_kl`, of a boundary field.
/// `ξ¹` multiplies `sin kθ` and `ξ²` multiplies `cos kθ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BoundaryCoeffsRepr")]
pub struct BoundaryCoeffs {
    n_kl: usize,
    coeffs: Vec<[f64; 2]>,
}

#[derive(Deserialize)]
struct BoundaryCoeffsRepr {
    n_kl: usize,
    coeffs: Vec<[f64; 2]>,
}

impl TryFrom<BoundaryCoeffsRepr> for BoundaryCoeffs {
    type Error = Error;
    fn try_from(r: BoundaryCoeffsRepr) -> Result<Self> {
        if r.coeffs.len() != r.n_kl {
            return invalid(format!(
                "n_kl = {} but {} coefficient pairs given",
                r.n_kl,
                r.coeffs.len()
            ));
        }
        Self::from_pairs(r.coeffs)
    }
}

impl BoundaryCoeffs {
    pub fn zeros(n_kl: usize) -> Result<Self> {
        if n_kl == 0 {
            return invalid("n_kl must be at least 1");
        }
        Ok(Self {
            n_kl,
            coeffs: vec![[0.0; 2]; n_kl],
        })
    }

    pub fn from_pairs(coeffs: Vec<[f64; 2]>) -> Result<Self> {
        if coeffs.is_empty() {
            return invalid("n_kl must be at least 1");
        }
        if coeffs.iter().flatten().any(|v| !v.is_finite()) {
            return invalid("boundary coefficients must be finite");
        }
        Ok(Self {
            n_kl: coeffs.len(),
            coeffs,
        })
    }

    /// Builds coefficients from the interleaved layout `[ξ¹_1, ξ²_1, ξ¹_2, …]`.
    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() % 2 != 0 {
            return invalid("flat boundary coefficient vector must have even length");
        }
        Self::from_pairs(flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.coeffs.iter().flatten().copied().collect()
    }

    pub fn n_kl(&self) -> usize {
        self.n_kl
    }

    pub fn pairs(&self) -> &[[f64; 2]] {
        &self.coeffs
    }

    /// Mutable access to mode `k` (1-based).
    pub fn pair_mut(&mut self, k: usize) -> &mut [f64; 2] {
        &mut self.coeffs[k - 1]
    }
}

/// The √λ_k weight of mode `k` in the 1D expansion: `c · k^{-γ}`.
pub fn kl_weight(params: &MaternParams, k: usize) -> Result<f64> {
    if k == 0 {
        return invalid("KL mode index starts at 1");
    }
    Ok(weight_unchecked(params, k))
}

fn weight_unchecked(params: &MaternParams, k: usize) -> f64 {
    let k = k as f64;
    match params.kl_form {
        KlForm::Literal => params.amplitude * k.powf(-params.gamma),
        KlForm::Exact => params.amplitude * (params.tau * params.tau + k * k).powf(-params.gamma / 2.0),
    }
}

/// All weights `w_1..w_n`.
pub fn kl_weights(params: &MaternParams, n_kl: usize) -> Vec<f64> {
    (1..=n_kl).map(|k| weight_unchecked(params, k)).collect()
}

/// Draws `n_kl` i.i.d. standard-normal coefficient pairs. No weighting is
/// applied here; weights enter at evaluation time.
pub fn sample_boundary_coeffs<R: Rng + ?Sized>(
    _params: &MaternParams,
    n_kl: usize,
    rng: &mut R,
) -> Result<BoundaryCoeffs> {
    if n_kl == 0 {
        return invalid("n_kl must be at least 1");
    }
    let coeffs = (0..n_kl)
        .map(|_| [rng.sample(StandardNormal), rng.sample(StandardNormal)])
        .collect();
    Ok(BoundaryCoeffs { n_kl, coeffs })
}

/// Evaluates `ξ(θ)` at each angle.
pub fn evaluate_boundary_field(
    coeffs: &BoundaryCoeffs,
    params: &MaternParams,
    angles: &[f64],
) -> Vec<f64> {
    let weights = kl_weights(params, coeffs.n_kl);
    let flat = coeffs.to_flat();
    angles
        .iter()
        .map(|&t| eval_series(&flat, &weights, params.mean, t))
        .collect()
}

/// Series evaluation on the interleaved coefficient layout. `sin kθ` and
/// `cos kθ` come from the angle-addition recurrence.
pub(crate) fn eval_series(flat: &[f64], weights: &[f64], mean: f64, theta: f64) -> f64 {
    let (s1, c1) = theta.sin_cos();
    let (mut s, mut c) = (s1, c1);
    let mut acc = 0.0;
    for (pair, w) in flat.chunks_exact(2).zip(weights) {
        acc += w * (pair[0] * s + pair[1] * c);
        let sn = s * c1 + c * s1;
        c = c * c1 - s * s1;
        s = sn;
    }
    mean + acc
}

/// Evaluates a boundary field on the uniform angle grid `θ_m = 2πm/M` with one
/// inverse FFT of length `M`.
pub struct UniformBoundaryEvaluator {
    n_points: usize,
    weights: Vec<f64>,
    mean: f64,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for UniformBoundaryEvaluator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("UniformBoundaryEvaluator")
            .field("n_points", &self.n_points)
            .field("n_kl", &self.weights.len())
            .finish()
    }
}

impl UniformBoundaryEvaluator {
    pub fn new(params: &MaternParams, n_kl: usize, n_points: usize) -> Result<Self> {
        if n_kl == 0 {
            return invalid("n_kl must be at least 1");
        }
        if n_points <= 2 * n_kl {
            return invalid(format!(
                "{n_points} boundary points cannot resolve {n_kl} KL modes without aliasing"
            ));
        }
        let fft = FftPlanner::new().plan_fft_inverse(n_points);
        Ok(Self {
            n_points,
            weights: kl_weights(params, n_kl),
            mean: params.mean,
            fft,
        })
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn n_kl(&self) -> usize {
        self.weights.len()
    }

    pub fn angle(&self, m: usize) -> f64 {
        TAU * m as f64 / self.n_points as f64
    }

    /// `ξ(θ_m)` for `m = 0..M`, written into `out`.
    pub fn evaluate_into(&self, flat: &[f64], out: &mut Vec<f64>) {
        debug_assert_eq!(flat.len(), 2 * self.weights.len());
        // a sin kθ + b cos kθ = Re[(b − i a) e^{ikθ}]
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n_points];
        for (k, (pair, w)) in flat.chunks_exact(2).zip(&self.weights).enumerate() {
            buf[k + 1] = Complex64::new(w * pair[1], -w * pair[0]);
        }
        self.fft.process(&mut buf);
        out.clear();
        out.extend(buf.iter().map(|z| self.mean + z.re));
    }

    pub fn evaluate(&self, flat: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_points);
        self.evaluate_into(flat, &mut out);
        out
    }
}

/// Regular pixel grid. `origin` is the lower-left corner of the grid box;
/// pixel `(ix, iy)` has its center at `origin + (ix + ½, iy + ½)·spacing`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub nx: usize,
    pub ny: usize,
    pub spacing: f64,
    pub origin: Point2,
}

impl Grid {
    pub fn new(nx: usize, ny: usize, spacing: f64, origin: Point2) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return invalid("grid dimensions must be positive");
        }
        if !(spacing.is_finite() && spacing > 0.0) {
            return invalid(format!("grid spacing must be positive, got {spacing}"));
        }
        Ok(Self {
            nx,
            ny,
            spacing,
            origin,
        })
    }

    /// `n × n` pixels covering the box `[-1, 1]²` (pixel size `2/n`).
    pub fn square(n: usize) -> Result<Self> {
        Self::new(n, n, 2.0 / n as f64, Point2::new(-1.0, -1.0))
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, ix: usize, iy: usize) -> usize {
        iy * self.nx + ix
    }

    pub fn pixel_center(&self, ix: usize, iy: usize) -> Point2 {
        Point2::new(
            self.origin.x + (ix as f64 + 0.5) * self.spacing,
            self.origin.y + (iy as f64 + 0.5) * self.spacing,
        )
    }

    pub fn pixel_area(&self) -> f64 {
        self.spacing * self.spacing
    }

    /// Bilinear interpolation stencil for `p`: four `(index, weight)` pairs.
    /// Points beyond the outermost pixel centers are clamped to the edge.
    pub fn bilinear_stencil(&self, p: Point2) -> [(usize, f64); 4] {
        let fx = ((p.x - self.origin.x) / self.spacing - 0.5).clamp(0.0, (self.nx - 1) as f64);
        let fy = ((p.y - self.origin.y) / self.spacing - 0.5).clamp(0.0, (self.ny - 1) as f64);
        let ix = (fx.floor() as usize).min(self.nx.saturating_sub(2));
        let iy = (fy.floor() as usize).min(self.ny.saturating_sub(2));
        let tx = fx - ix as f64;
        let ty = fy - iy as f64;
        let ix1 = (ix + 1).min(self.nx - 1);
        let iy1 = (iy + 1).min(self.ny - 1);
        [
            (self.index(ix, iy), (1.0 - tx) * (1.0 - ty)),
            (self.index(ix1, iy), tx * (1.0 - ty)),
            (self.index(ix, iy1), (1.0 - tx) * ty),
            (self.index(ix1, iy1), tx * ty),
        ]
    }
}

/// Real values on a [`Grid`], row-major (`values[iy * nx + ix]`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Field2D {
    pub grid: Grid,
    pub values: Vec<f64>,
}

impl Field2D {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return invalid(format!(
                "field has {} values for a {}x{} grid",
                values.len(),
                grid.nx,
                grid.ny
            ));
        }
        Ok(Self { grid, values })
    }

    pub fn constant(grid: Grid, value: f64) -> Self {
        Self {
            grid,
            values: vec![value; grid.len()],
        }
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut(Point2) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.len());
        for iy in 0..grid.ny {
            for ix in 0..grid.nx {
                values.push(f(grid.pixel_center(ix, iy)));
            }
        }
        Self { grid, values }
    }

    pub fn get(&self, ix: usize, iy: usize) -> f64 {
        self.values[self.grid.index(ix, iy)]
    }

    pub fn bilinear(&self, p: Point2) -> f64 {
        self.grid
            .bilinear_stencil(p)
            .iter()
            .map(|&(i, w)| w * self.values[i])
            .sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field2D {
        Field2D {
            grid: self.grid,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Mode {
    index: usize,
    conjugate: usize,
    weight: f64,
}

/// Spectral synthesis of a periodic stationary field on a 2D grid.
///
/// Wavevectors are `w = 2π(k_x/L_x, k_y/L_y)` for the integer DFT indices of
/// the grid, so on the `2×2` box `w = πk`. Each conjugate pair `±k` carries
/// two coefficients `(a, b)` contributing `w_k (a cos + b sin)`; self-conjugate
/// indices carry one. Weights satisfy `w_k² = σ² m_k S(w_k) / Z` with `m_k`
/// the multiplicity of the mode and `Z = Σ_all S(w)`, which makes the
/// pointwise variance equal to `σ² = amplitude²` and reproduces the
/// white-noise-filtering construction exactly.
///
/// An optional cutoff keeps only modes with integer wavenumber `|k| ≤ cutoff`.
pub struct SpectralSampler {
    grid: Grid,
    params: MaternParams,
    modes: Vec<Mode>,
    n_coeffs: usize,
    fft_x: Arc<dyn Fft<f64>>,
    fft_y: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for SpectralSampler {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpectralSampler")
            .field("grid", &self.grid)
            .field("params", &self.params)
            .field("n_coeffs", &self.n_coeffs)
            .finish()
    }
}

impl SpectralSampler {
    pub fn new(params: MaternParams, grid: Grid, cutoff: Option<f64>) -> Result<Self> {
        params.validate()?;
        if grid.nx < 2 || grid.ny < 2 || grid.nx % 2 != 0 || grid.ny % 2 != 0 {
            return invalid(format!(
                "spectral sampling needs even grid dimensions >= 2, got {}x{}",
                grid.nx, grid.ny
            ));
        }
        if let Some(c) = cutoff {
            if !(c.is_finite() && c >= 0.0) {
                return invalid(format!("wavenumber cutoff must be >= 0, got {c}"));
            }
        }
        let (nx, ny) = (grid.nx, grid.ny);
        let lx = nx as f64 * grid.spacing;
        let ly = ny as f64 * grid.spacing;
        let signed = |i: usize, n: usize| -> f64 {
            if i <= n / 2 {
                i as f64
            } else {
                i as f64 - n as f64
            }
        };
        let density = |ix: usize, iy: usize| -> f64 {
            let wx = TAU * signed(ix, nx) / lx;
            let wy = TAU * signed(iy, ny) / ly;
            (params.tau * params.tau + wx * wx + wy * wy).powf(-params.gamma)
        };

        let mut raw = Vec::new();
        let mut total = 0.0;
        for iy in 0..ny {
            for ix in 0..nx {
                let idx = iy * nx + ix;
                let conj = ((ny - iy) % ny) * nx + (nx - ix) % nx;
                if conj < idx {
                    continue;
                }
                if let Some(c) = cutoff {
                    let k = signed(ix, nx).hypot(signed(iy, ny));
                    if k > c {
                        continue;
                    }
                }
                let s = density(ix, iy);
                let multiplicity = if conj == idx { 1.0 } else { 2.0 };
                total += multiplicity * s;
                raw.push((idx, conj, multiplicity * s));
            }
        }
        if raw.is_empty() || total <= 0.0 {
            return invalid("spectral cutoff removes every mode");
        }
        let var = params.amplitude * params.amplitude;
        let modes: Vec<Mode> = raw
            .into_iter()
            .map(|(index, conjugate, ms)| Mode {
                index,
                conjugate,
                weight: (var * ms / total).sqrt(),
            })
            .collect();
        let n_coeffs = modes
            .iter()
            .map(|m| if m.index == m.conjugate { 1 } else { 2 })
            .sum();
        let mut planner = FftPlanner::new();
        Ok(Self {
            grid,
            params,
            fft_x: planner.plan_fft_inverse(nx),
            fft_y: planner.plan_fft_inverse(ny),
            modes,
            n_coeffs,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn params(&self) -> &MaternParams {
        &self.params
    }

    /// Number of real standard-normal coefficients.
    pub fn n_coeffs(&self) -> usize {
        self.n_coeffs
    }

    /// Number of retained Fourier modes (conjugate pairs counted once).
    pub fn n_modes(&self) -> usize {
        self.modes.len()
    }

    /// `Σ w_k²`, the pointwise variance of the synthesised field.
    pub fn pointwise_variance(&self) -> f64 {
        self.modes.iter().map(|m| m.weight * m.weight).sum()
    }

    pub fn sample_coeffs<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.n_coeffs).map(|_| rng.sample(StandardNormal)).collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Field2D {
        let c = self.sample_coeffs(rng);
        self.synthesize(&c)
    }

    /// Maps standard-normal coefficients to field values (mean included).
    pub fn synthesize(&self, coeffs: &[f64]) -> Field2D {
        let mut values = vec![0.0; self.grid.len()];
        self.synthesize_into(coeffs, &mut values);
        Field2D {
            grid: self.grid,
            values,
        }
    }

    pub fn synthesize_into(&self, coeffs: &[f64], out: &mut [f64]) {
        assert_eq!(coeffs.len(), self.n_coeffs, "coefficient count mismatch");
        let (nx, ny) = (self.grid.nx, self.grid.ny);
        let mut spec = vec![Complex64::new(0.0, 0.0); nx * ny];
        let mut it = coeffs.iter();
        for m in &self.modes {
            if m.index == m.conjugate {
                spec[m.index] += Complex64::new(m.weight * it.next().unwrap(), 0.0);
            } else {
                let a = *it.next().unwrap();
                let b = *it.next().unwrap();
                spec[m.index] += Complex64::new(0.5 * m.weight * a, -0.5 * m.weight * b);
                spec[m.conjugate] += Complex64::new(0.5 * m.weight * a, 0.5 * m.weight * b);
            }
        }
        // rows
        for row in spec.chunks_exact_mut(nx) {
            self.fft_x.process(row);
        }
        // columns
        let mut col = vec![Complex64::new(0.0, 0.0); ny];
        for ix in 0..nx {
            for iy in 0..ny {
                col[iy] = spec[iy * nx + ix];
            }
            self.fft_y.process(&mut col);
            for iy in 0..ny {
                spec[iy * nx + ix] = col[iy];
            }
        }
        for (o, z) in out.iter_mut().zip(&spec) {
            *o = self.params.mean + z.re;
        }
    }
}

/// One full-spectrum draw of a periodic Whittle-Matérn field on `grid`.
pub fn sample_field_2d<R: Rng + ?Sized>(
    params: &MaternParams,
    grid: &Grid,
    rng: &mut R,
) -> Result<Field2D> {
    Ok(SpectralSampler::new(*params, *grid, None)?.sample(rng))
}
