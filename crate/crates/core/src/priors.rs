//! Push-forward maps from Gaussian fields to attenuation images, and random
//! phantom generation.

use std::f64::consts::TAU;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{segment_distance, segments_intersect, Point2};
use crate::randfield::{
    eval_series, kl_weights, sample_boundary_coeffs, BoundaryCoeffs, Field2D, Grid, MaternParams,
    SpectralSampler,
};

/// Background attenuation `a⁻` and inclusion intensity `a⁺`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttenuationLevels {
    pub a_minus: f64,
    pub a_plus: f64,
}

impl AttenuationLevels {
    pub fn new(a_minus: f64, a_plus: f64) -> Result<Self> {
        let l = Self { a_minus, a_plus };
        l.validate()?;
        Ok(l)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a_minus > 0.0 && self.a_minus < self.a_plus && self.a_plus.is_finite()) {
            return invalid(format!(
                "attenuation levels need 0 < a_minus < a_plus, got {} and {}",
                self.a_minus, self.a_plus
            ));
        }
        Ok(())
    }

    pub fn contrast(&self) -> f64 {
        self.a_plus - self.a_minus
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.a_minus + self.a_plus)
    }
}

/// `a⁻` where the field is negative, `a⁺` elsewhere.
pub fn level_set_map(field: &Field2D, levels: &AttenuationLevels) -> Field2D {
    field.map(|v| if v < 0.0 { levels.a_minus } else { levels.a_plus })
}

/// Pointwise exponential. Values that overflow `f64` are reported instead of
/// being saturated to infinity.
pub fn log_gaussian_map(field: &Field2D) -> Result<Field2D> {
    let out = field.map(f64::exp);
    if let Some(i) = out.values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "exp overflow at pixel {i} (field value {})",
            field.values[i]
        )));
    }
    Ok(out)
}

/// A star-shaped inclusion `{x : |x − c| < exp(ξ(ϑ(x − c)))}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "StarInclusionRepr", into = "StarInclusionRepr")]
pub struct StarInclusion {
    center: Point2,
    coeffs: BoundaryCoeffs,
    params: MaternParams,
    weights: Vec<f64>,
    max_log_radius: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StarInclusionRepr {
    center: Point2,
    coeffs: BoundaryCoeffs,
    params: MaternParams,
}

impl TryFrom<StarInclusionRepr> for StarInclusion {
    type Error = Error;
    fn try_from(r: StarInclusionRepr) -> Result<Self> {
        StarInclusion::new(r.center, r.coeffs, r.params)
    }
}

impl From<StarInclusion> for StarInclusionRepr {
    fn from(s: StarInclusion) -> Self {
        Self {
            center: s.center,
            coeffs: s.coeffs,
            params: s.params,
        }
    }
}

impl StarInclusion {
    pub fn new(center: Point2, coeffs: BoundaryCoeffs, params: MaternParams) -> Result<Self> {
        params.validate()?;
        if !center.is_finite() {
            return invalid("inclusion center must be finite");
        }
        if center.norm() >= 1.0 {
            return invalid(format!(
                "inclusion center ({}, {}) lies outside the unit disk",
                center.x, center.y
            ));
        }
        let weights = kl_weights(&params, coeffs.n_kl());
        let bound: f64 = coeffs
            .pairs()
            .iter()
            .zip(&weights)
            .map(|(c, w)| w * (c[0].abs() + c[1].abs()))
            .sum();
        Ok(Self {
            center,
            coeffs,
            params,
            weights,
            max_log_radius: params.mean + bound,
        })
    }

    /// A circle of the given radius: mean `ln r`, all coefficients zero.
    pub fn circle(center: Point2, radius: f64, n_kl: usize) -> Result<Self> {
        let params = MaternParams::boundary(2.0, 1.0, radius.ln())?;
        Self::new(center, BoundaryCoeffs::zeros(n_kl)?, params)
    }

    pub fn center(&self) -> Point2 {
        self.center
    }

    pub fn coeffs(&self) -> &BoundaryCoeffs {
        &self.coeffs
    }

    pub fn params(&self) -> &MaternParams {
        &self.params
    }

    /// `ξ(angle)`.
    pub fn log_radius(&self, angle: f64) -> f64 {
        let flat = self.coeffs.to_flat();
        eval_series(&flat, &self.weights, self.params.mean, angle)
    }

    /// Radial distance of the boundary at polar angle `angle`: `exp(ξ(angle))`.
    pub fn radius(&self, angle: f64) -> f64 {
        self.log_radius(angle).exp()
    }

    /// Upper bound on the radius over all angles.
    pub fn max_radius_bound(&self) -> f64 {
        self.max_log_radius.exp()
    }

    /// Strict membership: points exactly on the boundary are outside.
    pub fn contains(&self, x: Point2) -> bool {
        let d = x - self.center;
        let dist = d.norm();
        if dist == 0.0 {
            return true;
        }
        if dist >= self.max_radius_bound() {
            return false;
        }
        dist < self.radius(d.polar_angle())
    }

    /// Boundary polyline at `n` uniformly spaced angles, counter-clockwise.
    pub fn boundary_polyline(&self, n: usize) -> Vec<Point2> {
        (0..n)
            .map(|m| {
                let a = TAU * m as f64 / n as f64;
                self.center + Point2::from_polar(self.radius(a), a)
            })
            .collect()
    }
}

pub fn star_radius(inclusion: &StarInclusion, angle: f64) -> f64 {
    inclusion.radius(angle)
}

pub fn contains(inclusion: &StarInclusion, x: Point2) -> bool {
    inclusion.contains(x)
}

/// Attenuation outside the inclusions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Background {
    /// Constant `a⁻`.
    Constant,
    /// `exp(ξ₀(x))` with `ξ₀` stored on a grid and bilinearly interpolated.
    Field {
        params: MaternParams,
        log_field: Field2D,
    },
}

/// Exclusion margins `d^D_min` (between inclusions) and `d^{∂D}_min` (to the
/// boundary of the unit disk).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Margins {
    pub d_min_domain: f64,
    pub d_min_boundary: f64,
}

impl Default for Margins {
    fn default() -> Self {
        Self {
            d_min_domain: 0.1,
            d_min_boundary: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phantom {
    pub inclusions: Vec<StarInclusion>,
    pub background: Background,
    pub levels: AttenuationLevels,
    pub margins: Margins,
}

impl Phantom {
    /// Attenuation at `x`; see [`evaluate_attenuation`].
    pub fn attenuation(&self, x: Point2) -> f64 {
        if self.inclusions.iter().any(|inc| inc.contains(x)) {
            return self.levels.a_plus;
        }
        match &self.background {
            Background::Constant => self.levels.a_minus,
            Background::Field { log_field, .. } => log_field.bilinear(x).exp(),
        }
    }

    /// Samples the attenuation at the pixel centers of `grid`, zero outside
    /// the unit disk.
    pub fn rasterize(&self, grid: &Grid) -> Field2D {
        Field2D::from_fn(*grid, |p| {
            if p.norm() < 1.0 {
                self.attenuation(p)
            } else {
                0.0
            }
        })
    }
}

/// `a⁺` inside any inclusion, otherwise the background value.
pub fn evaluate_attenuation(phantom: &Phantom, x: Point2) -> f64 {
    phantom.attenuation(x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    /// Assumption (I): inclusions `i` and `j` intersect.
    Overlap { i: usize, j: usize },
    /// Assumption (II): inclusion `i` comes within `distance` of the unit circle.
    NearBoundary { i: usize, distance: f64 },
    /// Assumption (III): inclusions `i` and `j` are only `distance` apart.
    TooClose { i: usize, j: usize, distance: f64 },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_admissible(&self) -> bool {
        self.violations.is_empty()
    }
}

fn boundary_violation(i: usize, poly: &[Point2], d_min_boundary: f64) -> Option<Violation> {
    // distance from the origin is convex along a segment, so vertices suffice
    let r_max = poly.iter().map(|p| p.norm()).fold(0.0, f64::max);
    let distance = 1.0 - r_max;
    (distance < d_min_boundary).then_some(Violation::NearBoundary { i, distance })
}

fn pair_violation(
    (i, a, pa): (usize, &StarInclusion, &[Point2]),
    (j, b, pb): (usize, &StarInclusion, &[Point2]),
    d_min_domain: f64,
) -> Option<Violation> {
    if a.contains(b.center()) || b.contains(a.center()) {
        return Some(Violation::Overlap { i, j });
    }
    let na = pa.len();
    let nb = pb.len();
    // bounding-circle shortcut
    let gap_bound = a.center().distance(b.center()) - a.max_radius_bound() - b.max_radius_bound();
    if gap_bound >= d_min_domain {
        return None;
    }
    let mut min_d = f64::INFINITY;
    for s in 0..na {
        let (p0, p1) = (pa[s], pa[(s + 1) % na]);
        for t in 0..nb {
            let (q0, q1) = (pb[t], pb[(t + 1) % nb]);
            if segments_intersect(p0, p1, q0, q1) {
                return Some(Violation::Overlap { i, j });
            }
            min_d = min_d.min(segment_distance(p0, p1, q0, q1));
        }
    }
    (min_d < d_min_domain).then_some(Violation::TooClose {
        i,
        j,
        distance: min_d,
    })
}

/// Checks assumptions (I)-(III) on boundary polylines with `n_check` vertices.
pub fn validate_configuration(
    phantom: &Phantom,
    d_min_domain: f64,
    d_min_boundary: f64,
    n_check: usize,
) -> Result<ValidationReport> {
    if n_check < 8 {
        return invalid(format!("n_check must be at least 8, got {n_check}"));
    }
    let polys: Vec<Vec<Point2>> = phantom
        .inclusions
        .iter()
        .map(|inc| inc.boundary_polyline(n_check))
        .collect();
    let mut report = ValidationReport::default();
    for (i, poly) in polys.iter().enumerate() {
        if let Some(v) = boundary_violation(i, poly, d_min_boundary) {
            report.violations.push(v);
        }
    }
    for i in 0..polys.len() {
        for j in i + 1..polys.len() {
            if let Some(v) = pair_violation(
                (i, &phantom.inclusions[i], &polys[i]),
                (j, &phantom.inclusions[j], &polys[j]),
                d_min_domain,
            ) {
                report.violations.push(v);
            }
        }
    }
    Ok(report)
}

/// Background specification for phantom sampling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackgroundConfig {
    Constant,
    /// Log-Gaussian background. The field mean is `ln a⁻ + params.mean`, so
    /// the background fluctuates around `a⁻`.
    Field {
        params: MaternParams,
        grid_n: usize,
        #[serde(default)]
        cutoff: Option<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    pub n_inc: usize,
    pub levels: AttenuationLevels,
    /// One entry per inclusion, or a single entry shared by all.
    pub inclusion_params: Vec<MaternParams>,
    pub n_kl: usize,
    pub background: BackgroundConfig,
    #[serde(default)]
    pub margins: Margins,
    #[serde(default = "default_n_check")]
    pub n_check: usize,
    #[serde(default = "default_max_rejections")]
    pub max_rejections: usize,
}

fn default_n_check() -> usize {
    256
}

fn default_max_rejections() -> usize {
    10_000
}

impl PhantomConfig {
    fn params_for(&self, i: usize) -> &MaternParams {
        if self.inclusion_params.len() == 1 {
            &self.inclusion_params[0]
        } else {
            &self.inclusion_params[i]
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_inc == 0 {
            return invalid("n_inc must be at least 1");
        }
        if self.inclusion_params.len() != 1 && self.inclusion_params.len() != self.n_inc {
            return invalid("inclusion_params needs one entry or one per inclusion");
        }
        for p in &self.inclusion_params {
            p.validate_boundary()?;
        }
        self.levels.validate()?;
        if self.n_kl == 0 {
            return invalid("n_kl must be at least 1");
        }
        if self.n_check < 8 {
            return invalid("n_check must be at least 8");
        }
        if !(self.margins.d_min_domain >= 0.0 && self.margins.d_min_boundary >= 0.0) {
            return invalid("margins must be non-negative");
        }
        if let BackgroundConfig::Field { params, grid_n, .. } = &self.background {
            params.validate()?;
            if *grid_n < 2 || grid_n % 2 != 0 {
                return invalid("background grid size must be even and >= 2");
            }
        }
        Ok(())
    }
}

fn uniform_in_disk<R: Rng + ?Sized>(rng: &mut R) -> Point2 {
    loop {
        let p = Point2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        if p.norm() < 1.0 {
            return p;
        }
    }
}

/// Sampling-and-elimination: inclusions are drawn one at a time (center
/// uniform in the unit disk, coefficients from the prior) and a candidate is
/// discarded whenever it violates (I)-(III) against the ones already kept.
pub fn sample_phantom<R: Rng + ?Sized>(config: &PhantomConfig, rng: &mut R) -> Result<Phantom> {
    config.validate()?;
    let margins = config.margins;
    let mut kept: Vec<(StarInclusion, Vec<Point2>)> = Vec::with_capacity(config.n_inc);
    let mut rejections = 0usize;
    while kept.len() < config.n_inc {
        let i = kept.len();
        let params = *config.params_for(i);
        let center = uniform_in_disk(rng);
        let coeffs = sample_boundary_coeffs(&params, config.n_kl, rng)?;
        let cand = StarInclusion::new(center, coeffs, params)?;
        let poly = cand.boundary_polyline(config.n_check);
        let ok = boundary_violation(i, &poly, margins.d_min_boundary).is_none()
            && kept.iter().enumerate().all(|(j, (inc, p))| {
                pair_violation((j, inc, p), (i, &cand, &poly), margins.d_min_domain).is_none()
            });
        if ok {
            kept.push((cand, poly));
        } else {
            rejections += 1;
            if rejections > config.max_rejections {
                return Err(Error::Infeasible(format!(
                    "could not place {} admissible inclusions within {} rejections",
                    config.n_inc, config.max_rejections
                )));
            }
        }
    }
    let background = match config.background {
        BackgroundConfig::Constant => Background::Constant,
        BackgroundConfig::Field {
            params,
            grid_n,
            cutoff,
        } => {
            let grid = Grid::square(grid_n)?;
            let mut shifted = params;
            shifted.mean += config.levels.a_minus.ln();
            let log_field = SpectralSampler::new(shifted, grid, cutoff)?.sample(rng);
            Background::Field {
                params: shifted,
                log_field,
            }
        }
    };
    Ok(Phantom {
        inclusions: kept.into_iter().map(|(inc, _)| inc).collect(),
        background,
        levels: config.levels,
        margins,
    })
}

/// Center of mass of inclusion `i` by midpoint quadrature on an `n × n`
/// sub-grid of its bounding square.
pub fn inclusion_center_of_mass(inclusion: &StarInclusion, n: usize) -> Point2 {
    let r = inclusion.max_radius_bound().min(2.0);
    let c = inclusion.center();
    let h = 2.0 * r / n as f64;
    let (mut sx, mut sy, mut count) = (0.0, 0.0, 0usize);
    for iy in 0..n {
        for ix in 0..n {
            let p = Point2::new(
                c.x - r + (ix as f64 + 0.5) * h,
                c.y - r + (iy as f64 + 0.5) * h,
            );
            if inclusion.contains(p) {
                sx += p.x;
                sy += p.y;
                count += 1;
            }
        }
    }
    if count == 0 {
        return c;
    }
    Point2::new(sx / count as f64, sy / count as f64)
}
