//! Two-stage boundary detection.
//!
//! Stage 1 samples a level-set posterior on a pixel grid, thresholds the
//! posterior mean field and segments it to count and localize inclusions.
//! Stage 2 runs, for each detected inclusion, a Metropolis-within-Gibbs chain
//! over a star-shaped boundary and its center, restricted to that
//! inclusion's bounding box, and summarizes the samples with center HPD
//! modes, per-mode mean boundaries and radial HPD bands.

use std::collections::VecDeque;
use std::f64::consts::{PI, TAU};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{ess, hpd_1d, select_hpd_bins};
use crate::error::{invalid, Error, Result};
use crate::forward::{GridProjector, NoiseModel, Sinogram};
use crate::geometry::{Point2, Rect};
use crate::inference::{
    run_chain, run_chain_with, Chain, ChainRecord, ChainState, ForwardModel, LevelSetForward, LikelihoodContext,
    RasterStarForward, SamplerConfig, StarForward,
};
use crate::priors::{AttenuationLevels, StarInclusion};
use crate::randfield::{kl_weights, BoundaryCoeffs, Field2D, Grid, MaternParams, SpectralSampler, UniformBoundaryEvaluator};
use crate::rng::{stream, streams};

/// Inclusive pixel-index rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub ix_min: usize,
    pub ix_max: usize,
    pub iy_min: usize,
    pub iy_max: usize,
}

impl PixelBox {
    pub fn intersects(&self, o: &PixelBox) -> bool {
        self.ix_min <= o.ix_max && o.ix_min <= self.ix_max && self.iy_min <= o.iy_max && o.iy_min <= self.iy_max
    }

    /// Covered region in world coordinates (outer pixel edges).
    pub fn to_rect(&self, grid: &Grid) -> Rect {
        Rect {
            x_min: grid.origin.x + self.ix_min as f64 * grid.spacing,
            x_max: grid.origin.x + (self.ix_max + 1) as f64 * grid.spacing,
            y_min: grid.origin.y + self.iy_min as f64 * grid.spacing,
            y_max: grid.origin.y + (self.iy_max + 1) as f64 * grid.spacing,
        }
    }
}

/// A 4-connected foreground region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    /// Flat pixel indices, in discovery order.
    pub pixels: Vec<usize>,
    /// Unweighted mean of the pixel centers.
    pub center: Point2,
    pub extent: PixelBox,
}

/// 4-connected components of `{value ≥ threshold}` with at least
/// `min_pixels` pixels, in raster order of their first pixel.
pub fn segment(image: &Field2D, threshold: f64, min_pixels: usize) -> Vec<Component> {
    let grid = image.grid;
    let (nx, ny) = (grid.nx, grid.ny);
    let fg: Vec<bool> = image.values.iter().map(|&v| v >= threshold).collect();
    let mut seen = vec![false; fg.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..fg.len() {
        if !fg[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        while let Some(p) = queue.pop_front() {
            pixels.push(p);
            let (ix, iy) = (p % nx, p / nx);
            let mut visit = |q: usize| {
                if fg[q] && !seen[q] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if ix > 0 {
                visit(p - 1);
            }
            if ix + 1 < nx {
                visit(p + 1);
            }
            if iy > 0 {
                visit(p - nx);
            }
            if iy + 1 < ny {
                visit(p + nx);
            }
        }
        if pixels.len() < min_pixels.max(1) {
            continue;
        }
        let mut extent = PixelBox {
            ix_min: usize::MAX,
            ix_max: 0,
            iy_min: usize::MAX,
            iy_max: 0,
        };
        let (mut sx, mut sy) = (0.0, 0.0);
        for &p in &pixels {
            let (ix, iy) = (p % nx, p / nx);
            extent.ix_min = extent.ix_min.min(ix);
            extent.ix_max = extent.ix_max.max(ix);
            extent.iy_min = extent.iy_min.min(iy);
            extent.iy_max = extent.iy_max.max(iy);
            let c = grid.pixel_center(ix, iy);
            sx += c.x;
            sy += c.y;
        }
        let n = pixels.len() as f64;
        out.push(Component {
            pixels,
            center: Point2::new(sx / n, sy / n),
            extent,
        });
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBoxes {
    pub boxes: Vec<PixelBox>,
    /// Set when two expanded boxes intersect, which suggests the inclusions
    /// are too close to be separated.
    pub overlap_warning: bool,
}

/// Component extents grown by `margin_pixels` on every side and clipped to
/// the grid.
pub fn bounding_boxes(components: &[Component], margin_pixels: usize, grid: &Grid) -> BoundingBoxes {
    let boxes: Vec<PixelBox> = components
        .iter()
        .map(|c| PixelBox {
            ix_min: c.extent.ix_min.saturating_sub(margin_pixels),
            ix_max: (c.extent.ix_max + margin_pixels).min(grid.nx - 1),
            iy_min: c.extent.iy_min.saturating_sub(margin_pixels),
            iy_max: (c.extent.iy_max + margin_pixels).min(grid.ny - 1),
        })
        .collect();
    let mut overlap_warning = false;
    for i in 0..boxes.len() {
        for j in i + 1..boxes.len() {
            overlap_warning |= boxes[i].intersects(&boxes[j]);
        }
    }
    BoundingBoxes {
        boxes,
        overlap_warning,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage1Config {
    /// Prior of the level-set field.
    pub field: MaternParams,
    /// Integer-wavenumber cutoff of the spectral expansion; `None` keeps the
    /// full spectrum.
    #[serde(default)]
    pub cutoff: Option<f64>,
    /// Grid size; defaults to `n_s` of the data (pixel size `2/N_s`).
    #[serde(default)]
    pub grid_n: Option<usize>,
    pub levels: AttenuationLevels,
    /// One recorded state per sweep; use `n_pcn = 1`, `n_mh = 0`.
    pub sampler: SamplerConfig,
    #[serde(default = "default_burn_in")]
    pub burn_in_fraction: f64,
    #[serde(default = "default_min_pixels")]
    pub min_pixels: usize,
    /// `d^D_min`; boxes are grown by half of it.
    #[serde(default = "default_d_min")]
    pub d_min_domain: f64,
}

fn default_burn_in() -> f64 {
    0.1
}

fn default_min_pixels() -> usize {
    4
}

fn default_d_min() -> f64 {
    0.1
}

impl Default for Stage1Config {
    /// `γ = 3`, `τ = 8`, mean `−0.25`, wavenumber cutoff 16, levels
    /// `a⁻ = 0.1`, `a⁺ = 1`, 5000 single-step pCN samples.
    fn default() -> Self {
        Self {
            field: MaternParams {
                gamma: 3.0,
                tau: 8.0,
                amplitude: 1.0,
                mean: -0.25,
                kl_form: Default::default(),
            },
            cutoff: Some(16.0),
            grid_n: None,
            levels: AttenuationLevels {
                a_minus: 0.1,
                a_plus: 1.0,
            },
            sampler: SamplerConfig {
                n_pcn: 1,
                n_mh: 0,
                warmup_mh: 0,
                ..SamplerConfig::default()
            },
            burn_in_fraction: default_burn_in(),
            min_pixels: default_min_pixels(),
            d_min_domain: default_d_min(),
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        self.field.validate()?;
        self.levels.validate()?;
        self.sampler.validate()?;
        if self.sampler.n_mh != 0 || self.sampler.n_pcn == 0 {
            return invalid("stage 1 sampler needs n_pcn >= 1 and n_mh = 0");
        }
        check_burn_in(self.burn_in_fraction)?;
        if self.d_min_domain < 0.0 {
            return invalid("d_min_domain must be non-negative");
        }
        Ok(())
    }
}

fn check_burn_in(f: f64) -> Result<()> {
    if !(0.0..1.0).contains(&f) {
        return invalid(format!("burn_in_fraction must lie in [0, 1), got {f}"));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Result {
    /// `ᾱ = F_ls[𝔼ξ]`.
    pub mean_field_image: Field2D,
    /// `α̂ = 𝔼 F_ls[ξ]`.
    pub pointwise_mean_image: Field2D,
    pub n_inc: usize,
    pub centers: Vec<Point2>,
    pub pixel_boxes: Vec<PixelBox>,
    pub boxes: Vec<Rect>,
    /// Pixels of each detected component in `mean_field_image`.
    pub components: Vec<Vec<usize>>,
    pub overlap_warning: bool,
    pub levels: AttenuationLevels,
    pub acceptance_rate: f64,
    pub b1: f64,
}

/// Localizes inclusions from the level-set posterior.
pub fn stage1(y: &Sinogram, noise: &NoiseModel, config: &Stage1Config, seed: u64) -> Result<Stage1Result> {
    config.validate()?;
    let grid = Grid::square(config.grid_n.unwrap_or(y.geometry.n_s))?;
    let sampler = SpectralSampler::new(config.field, grid, config.cutoff)?;
    let projector = GridProjector::new(grid, y.geometry)?;
    let model = LevelSetForward::new(sampler, projector, config.levels)?;
    let ctx = LikelihoodContext::new(y, *noise, &model, None)?;
    let n_coeffs = model.sampler().n_coeffs();
    let mut state = ChainState::new(&ctx, vec![0.0; n_coeffs], None)?;
    let mut rng = stream(seed, streams::STAGE1);

    let burn = (config.burn_in_fraction * config.sampler.n_samples as f64).floor() as usize;
    let mut coeff_sum = vec![0.0; n_coeffs];
    let mut image_sum = vec![0.0; grid.len()];
    let mut image = vec![0.0; grid.len()];
    let mut kept = 0usize;
    let run = run_chain_with(&mut state, &ctx, &config.sampler, &mut rng, |sweep, s| {
        if sweep < burn {
            return;
        }
        kept += 1;
        for (a, c) in coeff_sum.iter_mut().zip(&s.coeffs) {
            *a += c;
        }
        model.image_into(&s.coeffs, &mut image);
        for (a, v) in image_sum.iter_mut().zip(&image) {
            *a += v;
        }
    })?;
    if kept == 0 {
        return invalid("stage 1 recorded no samples after burn-in");
    }
    let k = kept as f64;
    let mean_coeffs: Vec<f64> = coeff_sum.iter().map(|v| v / k).collect();
    let mut mean_img = vec![0.0; grid.len()];
    model.image_into(&mean_coeffs, &mut mean_img);
    let mean_field_image = Field2D::new(grid, mean_img)?;
    let pointwise_mean_image = Field2D::new(grid, image_sum.iter().map(|v| v / k).collect())?;

    let components = segment(&mean_field_image, config.levels.midpoint(), config.min_pixels);
    if components.is_empty() {
        return Err(Error::NoInclusion(format!(
            "no region of the posterior mean exceeds {} (acceptance {:.3})",
            config.levels.midpoint(),
            run.totals.pcn_rate()
        )));
    }
    let margin = (0.5 * config.d_min_domain / grid.spacing).ceil() as usize;
    let bb = bounding_boxes(&components, margin, &grid);
    Ok(Stage1Result {
        n_inc: components.len(),
        centers: components.iter().map(|c| c.center).collect(),
        boxes: bb.boxes.iter().map(|b| b.to_rect(&grid)).collect(),
        pixel_boxes: bb.boxes,
        components: components.into_iter().map(|c| c.pixels).collect(),
        overlap_warning: bb.overlap_warning,
        mean_field_image,
        pointwise_mean_image,
        levels: config.levels,
        acceptance_rate: run.totals.pcn_rate(),
        b1: run.b1,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2Config {
    /// Boundary prior; `τ = 1`.
    pub prior: MaternParams,
    pub n_kl: usize,
    /// Replace `prior.mean` by the mean log radius of the Stage-1
    /// component about its center of mass.
    #[serde(default = "default_true")]
    pub estimate_mean: bool,
    #[serde(default)]
    pub model: StarModel,
    /// Angles at which the boundary is evaluated by the likelihood.
    #[serde(default = "default_vertices")]
    pub n_vertices: usize,
    pub sampler: SamplerConfig,
    #[serde(default = "default_burn_in")]
    pub burn_in_fraction: f64,
    #[serde(default = "default_hpd_level")]
    pub hpd_level: f64,
    #[serde(default = "default_n_band")]
    pub n_band: usize,
    /// Bins per axis of the center histogram.
    #[serde(default = "default_mode_grid")]
    pub mode_grid: usize,
    /// HPD components holding less than this fraction of the HPD mass are
    /// merged into the nearest larger mode.
    #[serde(default = "default_min_mode_fraction")]
    pub min_mode_fraction: f64,
}

fn default_true() -> bool {
    true
}

fn default_vertices() -> usize {
    256
}

/// Forward evaluation used by the Stage-2 likelihood.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StarModel {
    /// Exact line integrals through the boundary polygon.
    #[default]
    Polygon,
    /// Star rasterized on the Stage-1 grid and projected with the grid
    /// operator.
    Raster,
}

fn default_hpd_level() -> f64 {
    0.99
}

fn default_n_band() -> usize {
    128
}

fn default_mode_grid() -> usize {
    64
}

fn default_min_mode_fraction() -> f64 {
    0.05
}

impl Default for Stage2Config {
    /// `γ = 3`, amplitude 0.3, 100 KL modes, polygon likelihood, 300
    /// warm-up sweeps of 500 steps each.
    fn default() -> Self {
        Self {
            prior: MaternParams {
                gamma: 3.0,
                tau: 1.0,
                amplitude: 0.3,
                mean: 0.3f64.ln(),
                kl_form: Default::default(),
            },
            n_kl: 100,
            estimate_mean: true,
            model: StarModel::Polygon,
            n_vertices: default_vertices(),
            sampler: SamplerConfig {
                warmup_sweeps: 300,
                ..SamplerConfig::default()
            },
            burn_in_fraction: default_burn_in(),
            hpd_level: default_hpd_level(),
            n_band: default_n_band(),
            mode_grid: default_mode_grid(),
            min_mode_fraction: default_min_mode_fraction(),
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        self.prior.validate_boundary()?;
        self.sampler.validate()?;
        if self.n_kl == 0 {
            return invalid("n_kl must be at least 1");
        }
        if self.n_vertices <= 2 * self.n_kl {
            return invalid("n_vertices must exceed 2·n_kl");
        }
        check_burn_in(self.burn_in_fraction)?;
        if !(self.hpd_level > 0.0 && self.hpd_level < 1.0) {
            return invalid("hpd_level must lie in (0, 1)");
        }
        if self.n_band < 4 || self.mode_grid < 2 {
            return invalid("n_band must be >= 4 and mode_grid >= 2");
        }
        if !(0.0..1.0).contains(&self.min_mode_fraction) {
            return invalid("min_mode_fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Radial HPD band around a center, as rows `[angle, lo, mean, hi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadialBand {
    pub center: Point2,
    pub rows: Vec<[f64; 4]>,
}

impl RadialBand {
    pub fn mean_width(&self) -> f64 {
        self.rows.iter().map(|r| r[3] - r[1]).sum::<f64>() / self.rows.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    /// Sweep indices of the samples assigned to this mode.
    pub samples: Vec<usize>,
    /// Fraction of post-burn-in samples in this mode.
    pub mass: f64,
    pub mean_coeffs: BoundaryCoeffs,
    pub mean_center: Point2,
    pub band: RadialBand,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub inclusion_index: usize,
    pub bounding_box: Rect,
    pub prior: MaternParams,
    pub hpd_level: f64,
    pub n_samples: usize,
    pub burn_in: usize,
    /// Sorted by decreasing mass.
    pub modes: Vec<ModeSummary>,
    pub global_variance: f64,
    /// ESS of the radius at angle 0 over the post-burn-in chain.
    pub ess: Option<f64>,
    pub acceptance_rates: (f64, f64),
    pub step_sizes: (f64, f64),
}

impl PosteriorSummary {
    pub fn first_mode(&self) -> &ModeSummary {
        &self.modes[0]
    }

    pub fn mean_inclusion(&self, mode: usize) -> Result<StarInclusion> {
        let m = &self.modes[mode];
        StarInclusion::new(m.mean_center, m.mean_coeffs.clone(), self.prior)
    }
}

/// `𝔼‖ξ − 𝔼ξ‖²` in `L²(0, 2π)`: by Parseval each sample contributes
/// `π Σ_k w_k² [(Δξ¹_k)² + (Δξ²_k)²]`.
pub fn global_variance(samples: &[BoundaryCoeffs], params: &MaternParams) -> Result<f64> {
    if samples.len() < 2 {
        return invalid("global variance needs at least 2 samples");
    }
    let flat: Vec<Vec<f64>> = samples.iter().map(BoundaryCoeffs::to_flat).collect();
    global_variance_flat(&flat.iter().map(Vec::as_slice).collect::<Vec<_>>(), params)
}

fn global_variance_flat(samples: &[&[f64]], params: &MaternParams) -> Result<f64> {
    let d = samples[0].len();
    if samples.iter().any(|s| s.len() != d) || d % 2 != 0 {
        return invalid("samples must share one even coefficient length");
    }
    let w = kl_weights(params, d / 2);
    let n = samples.len() as f64;
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s.iter()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut total = 0.0;
    for s in samples {
        for (i, (v, m)) in s.iter().zip(&mean).enumerate() {
            let wk = w[i / 2];
            total += wk * wk * (v - m) * (v - m);
        }
    }
    Ok(PI * total / n)
}

/// Offset sinogram of every component except `skip`, at the contrast
/// `a⁺ − a⁻`.
fn offset_sinogram(stage1: &Stage1Result, skip: usize, projector: &GridProjector) -> Vec<f64> {
    let grid = stage1.mean_field_image.grid;
    let mut img = vec![0.0; grid.len()];
    for (i, pix) in stage1.components.iter().enumerate() {
        if i != skip {
            for &p in pix {
                img[p] = stage1.levels.contrast();
            }
        }
    }
    let mut out = vec![0.0; projector.geometry().len()];
    projector.apply_into(&img, &mut out);
    out
}

/// Log radius of the Stage-1 component `index` about its center of mass at
/// `n_angles` uniform angles: the distance at which a ray from the center
/// first leaves the component's pixels.
fn component_log_radii(stage1: &Stage1Result, index: usize, n_angles: usize) -> Vec<f64> {
    let grid = stage1.mean_field_image.grid;
    let mut mask = vec![false; grid.len()];
    for &p in &stage1.components[index] {
        mask[p] = true;
    }
    let inside = |q: Point2| -> bool {
        let fx = ((q.x - grid.origin.x) / grid.spacing).floor();
        let fy = ((q.y - grid.origin.y) / grid.spacing).floor();
        if fx < 0.0 || fy < 0.0 || fx >= grid.nx as f64 || fy >= grid.ny as f64 {
            return false;
        }
        mask[grid.index(fx as usize, fy as usize)]
    };
    let c = stage1.centers[index];
    let step = 0.25 * grid.spacing;
    (0..n_angles)
        .map(|m| {
            let d = Point2::from_polar(1.0, TAU * m as f64 / n_angles as f64);
            let mut r = 0.0;
            let mut t = step;
            while t < 2.0 {
                if inside(c + d * t) {
                    r = t;
                } else if r > 0.0 {
                    break;
                }
                t += step;
            }
            r.max(0.5 * grid.spacing).ln()
        })
        .collect()
}

/// Boundary prior and starting coefficients for inclusion `index`.
///
/// The coefficients are the component's log-radius profile projected onto
/// the KL basis with a ridge penalty matching the pixel resolution. With
/// `estimate_mean` the prior mean is replaced by the mean of that profile.
pub fn initial_state(stage1: &Stage1Result, index: usize, config: &Stage2Config) -> Result<(MaternParams, Vec<f64>)> {
    if index >= stage1.n_inc {
        return invalid(format!("inclusion index {index} out of range"));
    }
    let n_kl = config.n_kl;
    let n_angles = (4 * n_kl).max(64);
    let log_r = component_log_radii(stage1, index, n_angles);
    let profile_mean = log_r.iter().sum::<f64>() / n_angles as f64;
    let mut prior = config.prior;
    if config.estimate_mean {
        prior.mean = profile_mean;
    }
    let spacing = stage1.mean_field_image.grid.spacing;
    let s2 = (spacing / profile_mean.exp()).powi(2);
    let half = 0.5 * n_angles as f64;
    let mut out = vec![0.0; 2 * n_kl];
    for (k, w) in kl_weights(&prior, n_kl).iter().enumerate() {
        let kf = (k + 1) as f64;
        let (mut sk, mut ck) = (0.0, 0.0);
        for (m, lr) in log_r.iter().enumerate() {
            let th = kf * TAU * m as f64 / n_angles as f64;
            let d = lr - prior.mean;
            sk += d * th.sin();
            ck += d * th.cos();
        }
        let denom = w * w * half + s2;
        out[2 * k] = w * sk / denom;
        out[2 * k + 1] = w * ck / denom;
    }
    Ok((prior, out))
}

/// Center-histogram HPD region split into modes. Returns one list of sample
/// positions (indices into `centers`) per mode, largest first.
pub fn center_modes(
    centers: &[Point2],
    bbox: &Rect,
    level: f64,
    grid_n: usize,
    min_fraction: f64,
) -> Vec<Vec<usize>> {
    let bin = |p: Point2| -> usize {
        let fx = ((p.x - bbox.x_min) / bbox.width() * grid_n as f64).floor();
        let fy = ((p.y - bbox.y_min) / bbox.height() * grid_n as f64).floor();
        let ix = (fx.max(0.0) as usize).min(grid_n - 1);
        let iy = (fy.max(0.0) as usize).min(grid_n - 1);
        iy * grid_n + ix
    };
    let bins: Vec<usize> = centers.iter().map(|&c| bin(c)).collect();
    let mut counts = vec![0usize; grid_n * grid_n];
    for &b in &bins {
        counts[b] += 1;
    }
    let (mask, _) = select_hpd_bins(&counts, level);

    // 8-connected components of the selected bins
    let mut label = vec![usize::MAX; counts.len()];
    let mut comps: Vec<Vec<usize>> = Vec::new();
    for start in 0..counts.len() {
        if !mask[start] || label[start] != usize::MAX {
            continue;
        }
        let id = comps.len();
        let mut members = vec![start];
        label[start] = id;
        let mut k = 0;
        while k < members.len() {
            let b = members[k];
            k += 1;
            let (bx, by) = ((b % grid_n) as i64, (b / grid_n) as i64);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (x, y) = (bx + dx, by + dy);
                    if x < 0 || y < 0 || x >= grid_n as i64 || y >= grid_n as i64 {
                        continue;
                    }
                    let q = y as usize * grid_n + x as usize;
                    if mask[q] && label[q] == usize::MAX {
                        label[q] = id;
                        members.push(q);
                    }
                }
            }
        }
        comps.push(members);
    }
    let mass: Vec<usize> = comps.iter().map(|c| c.iter().map(|&b| counts[b]).sum()).collect();
    let total: usize = mass.iter().sum();
    let mut order: Vec<usize> = (0..comps.len()).collect();
    order.sort_by(|&a, &b| mass[b].cmp(&mass[a]).then(a.cmp(&b)));
    let keep: Vec<usize> = order
        .iter()
        .copied()
        .enumerate()
        .filter(|&(rank, c)| rank == 0 || mass[c] as f64 >= min_fraction * total as f64)
        .map(|(_, c)| c)
        .collect();
    let centroid = |c: usize| -> (f64, f64) {
        let (mut x, mut y, mut w) = (0.0, 0.0, 0.0);
        for &b in &comps[c] {
            let n = counts[b] as f64;
            x += n * (b % grid_n) as f64;
            y += n * (b / grid_n) as f64;
            w += n;
        }
        (x / w, y / w)
    };
    let kept_centroids: Vec<(f64, f64)> = keep.iter().map(|&c| centroid(c)).collect();
    let mut target = vec![usize::MAX; comps.len()];
    for (slot, &c) in keep.iter().enumerate() {
        target[c] = slot;
    }
    for c in 0..comps.len() {
        if target[c] != usize::MAX {
            continue;
        }
        let (x, y) = centroid(c);
        let nearest = kept_centroids
            .iter()
            .enumerate()
            .min_by(|a, b| {
                let da = (a.1 .0 - x).hypot(a.1 .1 - y);
                let db = (b.1 .0 - x).hypot(b.1 .1 - y);
                da.total_cmp(&db)
            })
            .map(|(i, _)| i)
            .unwrap();
        target[c] = nearest;
    }
    let mut modes = vec![Vec::new(); keep.len()];
    for (i, &b) in bins.iter().enumerate() {
        if mask[b] {
            modes[target[label[b]]].push(i);
        }
    }
    modes
}

/// Output of one Stage-2 chain.
#[derive(Clone, Debug)]
pub struct InclusionRun {
    pub summary: PosteriorSummary,
    pub chain: Chain,
}

/// Stage 2 for inclusion `index` of `stage1`, with its own random stream.
pub fn run_inclusion(
    y: &Sinogram,
    noise: &NoiseModel,
    stage1: &Stage1Result,
    index: usize,
    config: &Stage2Config,
    seed: u64,
) -> Result<InclusionRun> {
    config.validate()?;
    if config.sampler.n_samples == 0 {
        return invalid("stage 2 needs at least one sample");
    }
    let (prior, coeffs) = initial_state(stage1, index, config)?;
    let grid = stage1.mean_field_image.grid;
    let projector = GridProjector::new(grid, y.geometry)?;
    let offset = (stage1.n_inc > 1).then(|| offset_sinogram(stage1, index, &projector));
    let model: Box<dyn ForwardModel> = match config.model {
        StarModel::Raster => Box::new(RasterStarForward::new(
            prior,
            config.n_kl,
            config.n_vertices,
            &projector,
            stage1.levels,
            offset.as_deref(),
        )?),
        StarModel::Polygon => Box::new(StarForward::new(
            prior,
            config.n_kl,
            config.n_vertices,
            y.geometry,
            stage1.levels,
            offset.as_deref(),
        )?),
    };
    let bbox = stage1.boxes[index];
    let ctx = LikelihoodContext::new(y, *noise, model.as_ref(), Some(bbox))?;
    let init = ChainState::new(&ctx, coeffs, Some(stage1.centers[index]))?;
    let mut rng = stream(seed, streams::STAGE2_BASE + index as u64);
    let chain = run_chain(init, &ctx, &config.sampler, &mut rng)?;
    let summary = summarize(&chain, index, bbox, &prior, config)?;
    Ok(InclusionRun { summary, chain })
}

/// Per-angle HPD hull of the radii of the samples in `set`, widened where
/// needed to contain the mean-boundary radius. Fewer than 100 samples fall
/// back to the sample range.
fn band_rows(radii: &[Vec<f64>], set: &[usize], mean_radius: &[f64], level: f64) -> Vec<[f64; 4]> {
    let n_band = mean_radius.len();
    let mut column = Vec::with_capacity(set.len());
    (0..n_band)
        .map(|q| {
            column.clear();
            column.extend(set.iter().map(|&i| radii[i][q]));
            let (lo, hi) = match hpd_1d(&column, level) {
                Ok(h) => (h.intervals[0].lo, h.intervals[h.intervals.len() - 1].hi),
                Err(_) => (
                    column.iter().cloned().fold(f64::INFINITY, f64::min),
                    column.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                ),
            };
            let r = mean_radius[q];
            [TAU * q as f64 / n_band as f64, lo.min(r), r, hi.max(r)]
        })
        .collect()
}

/// Posterior summary of a recorded Stage-2 chain.
/// `prior` is the boundary prior the chain ran under.
pub fn summarize(
    chain: &Chain,
    index: usize,
    bbox: Rect,
    prior: &MaternParams,
    config: &Stage2Config,
) -> Result<PosteriorSummary> {
    let n = chain.records.len();
    let burn = (config.burn_in_fraction * n as f64).floor() as usize;
    let post: &[ChainRecord] = &chain.records[burn..];
    if post.is_empty() {
        return invalid("no samples left after burn-in");
    }
    let n_kl = config.n_kl;
    let centers: Vec<Point2> = post
        .iter()
        .map(|r| r.center.ok_or_else(|| Error::InvalidArgument("stage 2 records need centers".into())))
        .collect::<Result<_>>()?;
    let mode_sets = center_modes(&centers, &bbox, config.hpd_level, config.mode_grid, config.min_mode_fraction);

    // log radii of every sample at the band angles
    let factor = (2 * n_kl + 1).div_ceil(config.n_band).max(1);
    let evaluator = UniformBoundaryEvaluator::new(prior, n_kl, config.n_band * factor)?;
    let mut buf = Vec::new();
    let radii: Vec<Vec<f64>> = post
        .iter()
        .map(|r| {
            evaluator.evaluate_into(&r.coeffs, &mut buf);
            buf.iter().step_by(factor).map(|v| v.exp()).collect()
        })
        .collect();

    let mut modes = Vec::with_capacity(mode_sets.len());
    for set in &mode_sets {
        if set.is_empty() {
            continue;
        }
        let k = set.len() as f64;
        let mut mean = vec![0.0; 2 * n_kl];
        let (mut cx, mut cy) = (0.0, 0.0);
        for &i in set {
            for (m, v) in mean.iter_mut().zip(&post[i].coeffs) {
                *m += v;
            }
            cx += centers[i].x;
            cy += centers[i].y;
        }
        mean.iter_mut().for_each(|m| *m /= k);
        let mean_center = Point2::new(cx / k, cy / k);
        let mut mean_log = Vec::new();
        evaluator.evaluate_into(&mean, &mut mean_log);
        let mean_radius: Vec<f64> = mean_log.iter().step_by(factor).map(|v| v.exp()).collect();
        let rows = band_rows(&radii, set, &mean_radius, config.hpd_level);
        modes.push(ModeSummary {
            samples: set.iter().map(|&i| post[i].sweep).collect(),
            mass: k / post.len() as f64,
            mean_coeffs: BoundaryCoeffs::from_flat(&mean)?,
            mean_center,
            band: RadialBand {
                center: mean_center,
                rows,
            },
        });
    }
    if modes.is_empty() {
        return Err(Error::Numerical("center HPD region is empty".into()));
    }
    let coeff_refs: Vec<&[f64]> = post.iter().map(|r| r.coeffs.as_slice()).collect();
    let gv = if post.len() >= 2 {
        global_variance_flat(&coeff_refs, prior)?
    } else {
        0.0
    };
    let r0: Vec<f64> = radii.iter().map(|r| r[0]).collect();
    Ok(PosteriorSummary {
        inclusion_index: index,
        bounding_box: bbox,
        prior: *prior,
        hpd_level: config.hpd_level,
        n_samples: n,
        burn_in: burn,
        modes,
        global_variance: gv,
        ess: ess(&r0).ok(),
        acceptance_rates: chain.run.acceptance_rates(),
        step_sizes: (chain.run.b1, chain.run.b2),
    })
}

/// Runs Stage 2 for every inclusion in parallel. Inclusion `i` uses the
/// random stream `(seed, STAGE2_BASE + i)`; a failing inclusion does not
/// affect the others.
pub fn stage2(
    y: &Sinogram,
    noise: &NoiseModel,
    stage1: &Stage1Result,
    config: &Stage2Config,
    seed: u64,
) -> Vec<Result<InclusionRun>> {
    (0..stage1.n_inc)
        .into_par_iter()
        .map(|i| run_inclusion(y, noise, stage1, i, config, seed))
        .collect()
}

/// Distance from `origin` to the boundary of `inclusion` along `angle`:
/// the first exit point, located by marching and bisection.
pub fn boundary_distance(inclusion: &StarInclusion, origin: Point2, angle: f64) -> Option<f64> {
    let d = Point2::from_polar(1.0, angle);
    if !inclusion.contains(origin) {
        return None;
    }
    let step = 1e-3;
    let limit = 2.0 * inclusion.max_radius_bound() + origin.distance(inclusion.center());
    let mut t = 0.0;
    while t < limit {
        let next = t + step;
        if !inclusion.contains(origin + d * next) {
            let (mut a, mut b) = (t, next);
            for _ in 0..50 {
                let m = 0.5 * (a + b);
                if inclusion.contains(origin + d * m) {
                    a = m;
                } else {
                    b = m;
                }
            }
            return Some(0.5 * (a + b));
        }
        t = next;
    }
    None
}

/// Fraction of band angles at which the true boundary, measured from the
/// band center, lies within `[lo, hi]`.
pub fn band_coverage(band: &RadialBand, truth: &StarInclusion) -> f64 {
    let hits = band
        .rows
        .iter()
        .filter(|r| {
            boundary_distance(truth, band.center, r[0]).is_some_and(|d| r[1] <= d && d <= r[3])
        })
        .count();
    hits as f64 / band.rows.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{radon_functional, ScanGeometry};
    use crate::priors::{Background, Margins, Phantom};
    use proptest::prelude::*;

    fn binary(n: usize, on: &[(usize, usize)]) -> Field2D {
        let g = Grid::square(n).unwrap();
        let mut f = Field2D::constant(g, 0.0);
        for &(ix, iy) in on {
            f.values[g.index(ix, iy)] = 1.0;
        }
        f
    }

    #[test]
    fn single_pixel_component() {
        let f = binary(8, &[(3, 5)]);
        let c = segment(&f, 0.5, 1);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].center, f.grid.pixel_center(3, 5));
        assert!(segment(&f, 0.5, 4).is_empty());
    }

    #[test]
    fn separate_blobs_and_diagonal_contact() {
        let f = binary(8, &[(0, 0), (1, 0), (0, 1), (1, 1), (5, 5), (6, 5), (5, 6), (6, 6)]);
        assert_eq!(segment(&f, 0.5, 1).len(), 2);
        // diagonal neighbours are not 4-connected
        let f = binary(4, &[(0, 0), (1, 1)]);
        assert_eq!(segment(&f, 0.5, 1).len(), 2);
    }

    #[test]
    fn disk_center_of_mass() {
        let g = Grid::square(64).unwrap();
        let c0 = Point2::new(0.23, -0.11);
        let f = Field2D::from_fn(g, |p| if p.distance(c0) < 0.3 { 1.0 } else { 0.0 });
        let c = segment(&f, 0.5, 4);
        assert_eq!(c.len(), 1);
        assert!(c[0].center.distance(c0) < 0.5 * g.spacing);
    }

    fn component(ix: (usize, usize), iy: (usize, usize)) -> Component {
        Component {
            pixels: vec![],
            center: Point2::ORIGIN,
            extent: PixelBox { ix_min: ix.0, ix_max: ix.1, iy_min: iy.0, iy_max: iy.1 },
        }
    }

    #[test]
    fn bounding_box_examples() {
        let g = Grid::square(64).unwrap();
        let b = bounding_boxes(&[component((10, 20), (15, 25))], 3, &g);
        assert_eq!(b.boxes[0], PixelBox { ix_min: 7, ix_max: 23, iy_min: 12, iy_max: 28 });
        assert!(!b.overlap_warning);
        let b = bounding_boxes(&[component((0, 5), (60, 63))], 3, &g);
        assert_eq!(b.boxes[0], PixelBox { ix_min: 0, ix_max: 8, iy_min: 57, iy_max: 63 });
        let b = bounding_boxes(&[component((10, 20), (10, 20)), component((23, 30), (10, 20))], 3, &g);
        assert!(b.overlap_warning);
    }

    #[test]
    fn global_variance_examples() {
        let p = MaternParams::boundary(2.5, 1.0, 0.0).unwrap();
        let s = BoundaryCoeffs::from_pairs(vec![[0.3, -0.1], [0.2, 0.0]]).unwrap();
        assert_eq!(global_variance(&[s.clone(), s.clone()], &p).unwrap(), 0.0);
        let d = 0.7;
        let a = BoundaryCoeffs::from_pairs(vec![[d, 0.0], [0.0, 0.0]]).unwrap();
        let b = BoundaryCoeffs::from_pairs(vec![[-d, 0.0], [0.0, 0.0]]).unwrap();
        assert!((global_variance(&[a, b], &p).unwrap() - PI * d * d).abs() < 1e-12);
        assert!(global_variance(&[s], &p).is_err());
    }

    #[test]
    fn global_variance_of_prior_samples() {
        let p = MaternParams::boundary(2.0, 1.0, 0.0).unwrap();
        let mut rng = stream(3, 0);
        let samples: Vec<BoundaryCoeffs> = (0..20_000)
            .map(|_| crate::randfield::sample_boundary_coeffs(&p, 20, &mut rng).unwrap())
            .collect();
        let expected: f64 = PI * (1..=20).map(|k| 2.0 * (k as f64).powi(-4)).sum::<f64>();
        let gv = global_variance(&samples, &p).unwrap();
        assert!((gv / expected - 1.0).abs() < 0.05, "{gv} vs {expected}");
    }

    #[test]
    fn center_modes_split_two_clusters() {
        let bbox = Rect { x_min: -1.0, x_max: 1.0, y_min: -1.0, y_max: 1.0 };
        let mut rng = stream(4, 0);
        let mut pts = Vec::new();
        for k in 0..3000 {
            let c = if k % 3 == 0 { Point2::new(0.5, 0.5) } else { Point2::new(-0.5, -0.4) };
            let dx: f64 = rand::Rng::sample(&mut rng, rand_distr::StandardNormal);
            let dy: f64 = rand::Rng::sample(&mut rng, rand_distr::StandardNormal);
            pts.push(c + Point2::new(dx, dy) * 0.05);
        }
        let modes = center_modes(&pts, &bbox, 0.95, 32, 0.05);
        assert_eq!(modes.len(), 2);
        assert!(modes[0].len() > modes[1].len());
        let mut all: Vec<usize> = modes.concat();
        let total = all.len();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), total);
        assert!(total as f64 >= 0.95 * pts.len() as f64);
        assert!(pts[modes[0][0]].x < 0.0);
    }

    #[test]
    fn boundary_distance_of_circle() {
        let inc = StarInclusion::circle(Point2::new(0.1, 0.2), 0.3, 4).unwrap();
        let d = boundary_distance(&inc, Point2::new(0.1, 0.2), 1.0).unwrap();
        assert!((d - 0.3).abs() < 1e-9);
        let d = boundary_distance(&inc, Point2::new(0.2, 0.2), 0.0).unwrap();
        assert!((d - 0.2).abs() < 1e-9);
        assert!(boundary_distance(&inc, Point2::new(0.9, 0.9), 0.0).is_none());
    }

    fn tiny_stage2() -> (Sinogram, NoiseModel, Stage1Result, Stage2Config, StarInclusion) {
        let params = MaternParams::boundary(3.0, 0.3, 0.3f64.ln()).unwrap();
        let mut c = BoundaryCoeffs::zeros(8).unwrap();
        c.pair_mut(2)[0] = 0.5;
        let truth = StarInclusion::new(Point2::new(0.1, 0.05), c, params).unwrap();
        let levels = AttenuationLevels::new(0.1, 1.0).unwrap();
        let ph = Phantom {
            inclusions: vec![truth.clone()],
            background: Background::Constant,
            levels,
            margins: Margins::default(),
        };
        let g = ScanGeometry::full(30, 40).unwrap();
        let y = radon_functional(&ph, &g);
        let noise = NoiseModel { sigma_noise: 0.01 * y.norm() / (g.len() as f64).sqrt(), dimension: g.len() };
        let grid = Grid::square(40).unwrap();
        let img = ph.rasterize(&grid);
        let comps = segment(&img, levels.midpoint(), 4);
        let bb = bounding_boxes(&comps, 2, &grid);
        let s1 = Stage1Result {
            mean_field_image: img.clone(),
            pointwise_mean_image: img,
            n_inc: 1,
            centers: vec![comps[0].center],
            boxes: bb.boxes.iter().map(|b| b.to_rect(&grid)).collect(),
            pixel_boxes: bb.boxes,
            components: comps.into_iter().map(|c| c.pixels).collect(),
            overlap_warning: false,
            levels,
            acceptance_rate: 0.2,
            b1: 0.1,
        };
        let cfg = Stage2Config {
            prior: params,
            n_kl: 8,
            estimate_mean: true,
            model: StarModel::Raster,
            n_vertices: 128,
            sampler: SamplerConfig {
                b1: 0.1,
                b2: 0.01,
                n_pcn: 5,
                n_mh: 5,
                n_samples: 400,
                warmup_sweeps: 10,
                warmup_pcn: 50,
                warmup_mh: 50,
                target_acceptance: (0.15, 0.25),
            },
            burn_in_fraction: 0.1,
            hpd_level: 0.99,
            n_band: 32,
            mode_grid: 16,
            min_mode_fraction: 0.05,
        };
        (y, noise, s1, cfg, truth)
    }

    #[test]
    fn stage2_summary_invariants() {
        let (y, noise, s1, cfg, truth) = tiny_stage2();
        let run = run_inclusion(&y, &noise, &s1, 0, &cfg, 11).unwrap();
        let s = &run.summary;
        assert_eq!(s.n_samples, 400);
        assert_eq!(s.burn_in, 40);
        assert!(s.global_variance >= 0.0);
        let mut seen = std::collections::HashSet::new();
        for m in &s.modes {
            for &i in &m.samples {
                assert!(seen.insert(i));
                assert!(i >= s.burn_in);
            }
            for r in &m.band.rows {
                assert!(r[1] <= r[2] && r[2] <= r[3]);
            }
            // the mode mean is the arithmetic mean of its samples
            let mut mean = vec![0.0; 16];
            for &i in &m.samples {
                for (a, v) in mean.iter_mut().zip(&run.chain.records[i].coeffs) {
                    *a += v;
                }
            }
            for (a, b) in mean.iter().zip(m.mean_coeffs.to_flat()) {
                assert!((a / m.samples.len() as f64 - b).abs() < 1e-12);
            }
        }
        assert!(band_coverage(&s.first_mode().band, &truth) > 0.5);
        let again = run_inclusion(&y, &noise, &s1, 0, &cfg, 11).unwrap();
        assert_eq!(serde_json::to_string(&again.summary).unwrap(), serde_json::to_string(s).unwrap());
    }

    #[test]
    fn band_is_monotone_in_level() {
        let mut rng = stream(13, 0);
        let radii: Vec<Vec<f64>> = (0..2_000)
            .map(|_| {
                (0..16)
                    .map(|q| {
                        let z: f64 = rand::Rng::sample(&mut rng, rand_distr::StandardNormal);
                        0.3 + 0.01 * q as f64 + 0.02 * z
                    })
                    .collect()
            })
            .collect();
        let set: Vec<usize> = (0..2_000).collect();
        let mean: Vec<f64> = (0..16).map(|q| 0.3 + 0.01 * q as f64).collect();
        let narrow = band_rows(&radii, &set, &mean, 0.95);
        let wide = band_rows(&radii, &set, &mean, 0.99);
        for (a, b) in narrow.iter().zip(&wide) {
            assert!(b[1] <= a[1] && a[3] <= b[3]);
            assert!(a[1] <= a[2] && a[2] <= a[3]);
        }
    }

    #[test]
    fn zero_length_chain_is_an_error() {
        let (y, noise, s1, mut cfg, _) = tiny_stage2();
        cfg.sampler.n_samples = 0;
        assert!(run_inclusion(&y, &noise, &s1, 0, &cfg, 1).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn segment_partitions_foreground(bits in proptest::collection::vec(any::<bool>(), 64)) {
            let g = Grid::square(8).unwrap();
            let f = Field2D::new(g, bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()).unwrap();
            let comps = segment(&f, 0.5, 1);
            let mut all: Vec<usize> = comps.iter().flat_map(|c| c.pixels.clone()).collect();
            all.sort_unstable();
            let fg: Vec<usize> = (0..64).filter(|&i| bits[i]).collect();
            prop_assert_eq!(all, fg);
            for c in &comps {
                let rect = c.extent.to_rect(&g);
                prop_assert!(rect.contains(c.center));
            }
        }
    }
}
