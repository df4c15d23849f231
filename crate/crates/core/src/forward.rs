//! Parallel-beam Radon transform, noise injection and sinogram I/O.
//!
//! Rays are indexed from zero: angle `i` is `θ_i = i·θ_max/N_θ` and detector
//! `j` sits at `s_j = −w + (j + ½)·2w/N_s` for detector half-width `w`. The
//! line `L_{θ,s}` is `{s·n + t·d}` with `n = (cos θ, sin θ)` and
//! `d = (−sin θ, cos θ)`. The attenuation vanishes outside the unit disk, so
//! every integral runs over the exact chord `|t| ≤ √(1 − s²)` with the
//! composite midpoint rule.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::Point2;
use crate::priors::Phantom;
use crate::randfield::{Field2D, Grid};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanGeometry {
    /// Upper end of the half-open angular range `[0, θ_max)`, radians.
    pub theta_max: f64,
    pub n_theta: usize,
    pub n_s: usize,
    #[serde(default = "default_halfwidth")]
    pub detector_halfwidth: f64,
}

fn default_halfwidth() -> f64 {
    1.0
}

impl ScanGeometry {
    pub fn new(theta_max: f64, n_theta: usize, n_s: usize) -> Result<Self> {
        let g = Self {
            theta_max,
            n_theta,
            n_s,
            detector_halfwidth: 1.0,
        };
        g.validate()?;
        Ok(g)
    }

    /// `n_theta` angles over `[0, π)`.
    pub fn full(n_theta: usize, n_s: usize) -> Result<Self> {
        Self::new(std::f64::consts::PI, n_theta, n_s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta_max > 0.0 && self.theta_max <= std::f64::consts::PI) {
            return invalid(format!("theta_max must lie in (0, π], got {}", self.theta_max));
        }
        if self.n_theta == 0 || self.n_s == 0 {
            return invalid("n_theta and n_s must be positive");
        }
        if !(self.detector_halfwidth > 0.0 && self.detector_halfwidth.is_finite()) {
            return invalid("detector_halfwidth must be positive");
        }
        Ok(())
    }

    pub fn angle(&self, i: usize) -> f64 {
        i as f64 * self.theta_max / self.n_theta as f64
    }

    pub fn offset(&self, j: usize) -> f64 {
        let w = self.detector_halfwidth;
        -w + (j as f64 + 0.5) * 2.0 * w / self.n_s as f64
    }

    pub fn angles(&self) -> Vec<f64> {
        (0..self.n_theta).map(|i| self.angle(i)).collect()
    }

    pub fn offsets(&self) -> Vec<f64> {
        (0..self.n_s).map(|j| self.offset(j)).collect()
    }

    /// Number of measurements `N = N_θ·N_s`.
    pub fn len(&self) -> usize {
        self.n_theta * self.n_s
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Default quadrature step `min(2/N_s, 10⁻²)/2`.
    pub fn default_step(&self) -> f64 {
        (2.0 / self.n_s as f64).min(1e-2) / 2.0
    }
}

/// A line `base + t·direction`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub base: Point2,
    pub direction: Point2,
}

impl Ray {
    fn from_angle(theta: f64, s: f64) -> Self {
        let (sin, cos) = theta.sin_cos();
        Self {
            base: Point2::new(s * cos, s * sin),
            direction: Point2::new(-sin, cos),
        }
    }

    pub fn point(&self, t: f64) -> Point2 {
        self.base + self.direction * t
    }

    /// Parameter interval of the chord through the origin-centered circle of
    /// the given radius, if the ray meets it.
    pub fn chord(&self, radius: f64) -> Option<(f64, f64)> {
        let s2 = self.base.dot(self.base);
        let r2 = radius * radius;
        (s2 < r2).then(|| {
            let h = (r2 - s2).sqrt();
            (-h, h)
        })
    }
}

/// Ray for angle index `i` and detector index `j`.
pub fn ray(geometry: &ScanGeometry, i: usize, j: usize) -> Result<Ray> {
    if i >= geometry.n_theta || j >= geometry.n_s {
        return invalid(format!(
            "ray index ({i}, {j}) out of range for {}x{} geometry",
            geometry.n_theta, geometry.n_s
        ));
    }
    Ok(Ray::from_angle(geometry.angle(i), geometry.offset(j)))
}

/// Length of the chord of the unit disk at offset `s`.
pub fn disk_chord(s: f64) -> f64 {
    if s.abs() < 1.0 {
        2.0 * (1.0 - s * s).sqrt()
    } else {
        0.0
    }
}

/// Midpoint nodes along the unit-disk chord of `ray`, as `(point, weight)`.
fn chord_nodes(ray: &Ray, step: f64) -> impl Iterator<Item = (Point2, f64)> + '_ {
    let (t0, t1) = ray.chord(1.0).unwrap_or((0.0, 0.0));
    let len = t1 - t0;
    let n = if len > 0.0 { (len / step).ceil() as usize } else { 0 };
    let h = if n > 0 { len / n as f64 } else { 0.0 };
    (0..n).map(move |k| (ray.point(t0 + (k as f64 + 0.5) * h), h))
}

/// Angle-major measurement matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sinogram {
    pub geometry: ScanGeometry,
    /// `values[i * n_s + j]` for angle `i`, detector `j`.
    pub values: Vec<f64>,
}

impl Sinogram {
    pub fn new(geometry: ScanGeometry, values: Vec<f64>) -> Result<Self> {
        geometry.validate()?;
        if values.len() != geometry.len() {
            return invalid(format!(
                "sinogram has {} values, geometry needs {}",
                values.len(),
                geometry.len()
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return invalid("sinogram values must be finite");
        }
        Ok(Self { geometry, values })
    }

    pub fn zeros(geometry: ScanGeometry) -> Self {
        Self {
            geometry,
            values: vec![0.0; geometry.len()],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.geometry.n_s + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.geometry.n_s;
        &self.values[i * n..(i + 1) * n]
    }

    pub fn norm(&self) -> f64 {
        l2(&self.values)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// CSV text: a first line `theta_max,n_theta,n_s` with the geometry
    /// values, then one line of `n_s` values per angle.
    pub fn to_csv(&self) -> String {
        let g = &self.geometry;
        let mut out = format!("{},{},{}\n", g.theta_max, g.n_theta, g.n_s);
        for i in 0..g.n_theta {
            for (j, v) in self.row(i).iter().enumerate() {
                if j > 0 {
                    out.push(',');
                }
                write!(out, "{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty sinogram file".into()))?;
        let fields: Vec<&str> = header.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(Error::Parse(format!(
                "header must be `theta_max,n_theta,n_s`, got `{header}`"
            )));
        }
        let bad = |what: &str| Error::Parse(format!("bad {what} in sinogram header"));
        let theta_max: f64 = fields[0].parse().map_err(|_| bad("theta_max"))?;
        let n_theta: usize = fields[1].parse().map_err(|_| bad("n_theta"))?;
        let n_s: usize = fields[2].parse().map_err(|_| bad("n_s"))?;
        let geometry = ScanGeometry::new(theta_max, n_theta, n_s)?;
        let mut values = Vec::with_capacity(geometry.len());
        let mut rows = 0;
        for (r, line) in lines.enumerate() {
            let before = values.len();
            for tok in line.split(',') {
                let v: f64 = tok.trim().parse().map_err(|_| {
                    Error::Parse(format!("row {}: cannot parse `{}`", r + 1, tok.trim()))
                })?;
                values.push(v);
            }
            if values.len() - before != n_s {
                return Err(Error::Parse(format!(
                    "row {} has {} values, expected {n_s}",
                    r + 1,
                    values.len() - before
                )));
            }
            rows += 1;
        }
        if rows != n_theta {
            return Err(Error::Parse(format!(
                "found {rows} rows, expected {n_theta}"
            )));
        }
        Sinogram::new(geometry, values)
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn project_rows(geometry: &ScanGeometry, f: impl Fn(&Ray) -> f64 + Sync) -> Sinogram {
    let n_s = geometry.n_s;
    let mut values = vec![0.0; geometry.len()];
    values
        .par_chunks_mut(n_s)
        .enumerate()
        .for_each(|(i, row)| {
            let theta = geometry.angle(i);
            for (j, out) in row.iter_mut().enumerate() {
                *out = f(&Ray::from_angle(theta, geometry.offset(j)));
            }
        });
    Sinogram {
        geometry: *geometry,
        values,
    }
}

/// Line integrals of a gridded image (bilinear interpolation) with the
/// default step.
pub fn radon_grid(image: &Field2D, geometry: &ScanGeometry) -> Sinogram {
    radon_grid_with_step(image, geometry, geometry.default_step())
}

pub fn radon_grid_with_step(image: &Field2D, geometry: &ScanGeometry, step: f64) -> Sinogram {
    project_rows(geometry, |ray| {
        chord_nodes(ray, step).map(|(p, h)| h * image.bilinear(p)).sum()
    })
}

/// Line integrals of a phantom evaluated pointwise, without rasterizing the
/// inclusions.
pub fn radon_functional(phantom: &Phantom, geometry: &ScanGeometry) -> Sinogram {
    radon_functional_with_step(phantom, geometry, geometry.default_step())
}

pub fn radon_functional_with_step(phantom: &Phantom, geometry: &ScanGeometry, step: f64) -> Sinogram {
    project_rows(geometry, |ray| {
        chord_nodes(ray, step).map(|(p, h)| h * phantom.attenuation(p)).sum()
    })
}

/// The quadrature of [`radon_grid`] assembled once as a sparse matrix in
/// compressed-row form, so that repeated projections of images on the same
/// grid cost one sparse product.
#[derive(Clone, Debug)]
pub struct GridProjector {
    grid: Grid,
    geometry: ScanGeometry,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

impl GridProjector {
    pub fn new(grid: Grid, geometry: ScanGeometry) -> Result<Self> {
        Self::with_step(grid, geometry, geometry.default_step())
    }

    pub fn with_step(grid: Grid, geometry: ScanGeometry, step: f64) -> Result<Self> {
        geometry.validate()?;
        if !(step > 0.0) {
            return invalid("quadrature step must be positive");
        }
        if grid.len() > u32::MAX as usize {
            return invalid("grid too large for the sparse projector");
        }
        let rows: Vec<Vec<(u32, f64)>> = (0..geometry.len())
            .into_par_iter()
            .map(|r| {
                let ray = Ray::from_angle(geometry.angle(r / geometry.n_s), geometry.offset(r % geometry.n_s));
                let mut entries: Vec<(u32, f64)> = Vec::new();
                for (p, h) in chord_nodes(&ray, step) {
                    for (idx, w) in grid.bilinear_stencil(p) {
                        if w != 0.0 {
                            entries.push((idx as u32, h * w));
                        }
                    }
                }
                entries.sort_unstable_by_key(|e| e.0);
                let mut merged: Vec<(u32, f64)> = Vec::with_capacity(entries.len() / 2);
                for (c, v) in entries {
                    match merged.last_mut() {
                        Some(last) if last.0 == c => last.1 += v,
                        _ => merged.push((c, v)),
                    }
                }
                merged
            })
            .collect();
        let nnz = rows.iter().map(Vec::len).sum();
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut cols = Vec::with_capacity(nnz);
        let mut vals = Vec::with_capacity(nnz);
        row_ptr.push(0);
        for row in rows {
            for (c, v) in row {
                cols.push(c);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        Ok(Self {
            grid,
            geometry,
            row_ptr,
            cols,
            vals,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn geometry(&self) -> &ScanGeometry {
        &self.geometry
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// `out = A·image`.
    pub fn apply_into(&self, image: &[f64], out: &mut [f64]) {
        assert_eq!(image.len(), self.grid.len());
        assert_eq!(out.len(), self.geometry.len());
        for (r, o) in out.iter_mut().enumerate() {
            let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
            *o = self.cols[a..b]
                .iter()
                .zip(&self.vals[a..b])
                .map(|(&c, &v)| v * image[c as usize])
                .sum();
        }
    }

    /// Column-major copy, for images that are sparse in pixels.
    pub fn columns(&self) -> PixelColumns {
        let n = self.grid.len();
        let mut col_ptr = vec![0usize; n + 1];
        for &c in &self.cols {
            col_ptr[c as usize + 1] += 1;
        }
        for i in 0..n {
            col_ptr[i + 1] += col_ptr[i];
        }
        let mut next = col_ptr.clone();
        let mut rows = vec![0u32; self.cols.len()];
        let mut vals = vec![0.0; self.cols.len()];
        for r in 0..self.geometry.len() {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let c = self.cols[k] as usize;
                rows[next[c]] = r as u32;
                vals[next[c]] = self.vals[k];
                next[c] += 1;
            }
        }
        PixelColumns { col_ptr, rows, vals }
    }

    pub fn apply(&self, image: &Field2D) -> Result<Sinogram> {
        if image.grid != self.grid {
            return invalid("image grid does not match the projector grid");
        }
        let mut values = vec![0.0; self.geometry.len()];
        self.apply_into(&image.values, &mut values);
        Ok(Sinogram {
            geometry: self.geometry,
            values,
        })
    }
}

/// Projector stored by pixel: `add_column(p, w, out)` adds `w` times the
/// sinogram of pixel `p`.
#[derive(Clone, Debug)]
pub struct PixelColumns {
    col_ptr: Vec<usize>,
    rows: Vec<u32>,
    vals: Vec<f64>,
}

impl PixelColumns {
    pub fn add_column(&self, pixel: usize, weight: f64, out: &mut [f64]) {
        let (a, b) = (self.col_ptr[pixel], self.col_ptr[pixel + 1]);
        for (&r, &v) in self.rows[a..b].iter().zip(&self.vals[a..b]) {
            out[r as usize] += weight * v;
        }
    }
}

/// Exact line integrals of the indicator of a simple polygon.
///
/// For a counter-clockwise polygon, an edge `a → b` crossing `L_{θ,s}`
/// contributes `−sign(s_b − s_a)·t` where `t` is the crossing position along
/// the ray; summed over edges this is the total chord length inside the
/// polygon.
#[derive(Clone, Debug)]
pub struct PolygonProjector {
    geometry: ScanGeometry,
    cos_sin: Vec<(f64, f64)>,
    offsets: Vec<f64>,
}

impl PolygonProjector {
    pub fn new(geometry: ScanGeometry) -> Result<Self> {
        geometry.validate()?;
        Ok(Self {
            geometry,
            cos_sin: geometry
                .angles()
                .iter()
                .map(|t| (t.cos(), t.sin()))
                .collect(),
            offsets: geometry.offsets(),
        })
    }

    pub fn geometry(&self) -> &ScanGeometry {
        &self.geometry
    }

    /// Adds `weight × chord length` for every ray to `out`.
    ///
    /// Each edge a→b contributes `∓t` at the detectors with `s` in
    /// `[min(s_a, s_b), max(s_a, s_b))`, where `(s, t)` are ray-aligned
    /// coordinates. Detector ranges come from one monotone index map, so edges
    /// sharing a vertex agree on it and the contributions of a closed polygon
    /// telescope to chord lengths.
    pub fn accumulate(&self, vertices: &[Point2], weight: f64, out: &mut [f64]) {
        let g = &self.geometry;
        assert_eq!(out.len(), g.len());
        let n = vertices.len();
        if n < 3 {
            return;
        }
        let w = g.detector_halfwidth;
        let inv_ds = g.n_s as f64 / (2.0 * w);
        let n_s = g.n_s as f64;
        // number of detectors with offset < s
        let below = |s: f64| -> usize { ((s + w) * inv_ds - 0.5).ceil().clamp(0.0, n_s) as usize };
        let mut st = vec![(0.0, 0.0, 0usize); n];
        for (i, &(c, s)) in self.cos_sin.iter().enumerate() {
            let row = &mut out[i * g.n_s..(i + 1) * g.n_s];
            for (q, v) in st.iter_mut().zip(vertices) {
                let sv = v.x * c + v.y * s;
                *q = (sv, -v.x * s + v.y * c, below(sv));
            }
            let mut prev = st[n - 1];
            for &cur in &st {
                let (sa, ta, ja) = prev;
                let (sb, tb, jb) = cur;
                prev = cur;
                if ja == jb {
                    continue;
                }
                let slope = (tb - ta) / (sb - sa);
                let (range, sign) = if jb > ja { (ja..jb, -weight) } else { (jb..ja, weight) };
                for j in range {
                    row[j] += sign * (ta + (self.offsets[j] - sa) * slope);
                }
            }
        }
    }
}

/// How the noise standard deviation is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseSpec {
    /// Explicit `σ_noise`.
    Sigma(f64),
    /// Relative level in percent: `σ = (level/100)·‖y‖₂/√N`.
    LevelPercent(f64),
}

/// I.i.d. Gaussian noise `N(0, σ²I)` on `N` measurements.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    pub sigma_noise: f64,
    pub dimension: usize,
}

impl NoiseSpec {
    pub fn sigma_for(&self, clean: &Sinogram) -> Result<f64> {
        match *self {
            NoiseSpec::Sigma(s) if s >= 0.0 && s.is_finite() => Ok(s),
            NoiseSpec::Sigma(s) => invalid(format!("sigma_noise must be non-negative, got {s}")),
            NoiseSpec::LevelPercent(l) if l > 0.0 && l.is_finite() => {
                Ok(l / 100.0 * clean.norm() / (clean.values.len() as f64).sqrt())
            }
            NoiseSpec::LevelPercent(l) => invalid(format!("noise level must be positive, got {l}")),
        }
    }
}

/// Adds i.i.d. Gaussian noise with the standard deviation given by `spec`.
pub fn add_noise<R: Rng + ?Sized>(
    sinogram: &Sinogram,
    spec: NoiseSpec,
    rng: &mut R,
) -> Result<(Sinogram, NoiseModel)> {
    let sigma = spec.sigma_for(sinogram)?;
    let values = sinogram
        .values
        .iter()
        .map(|&v| {
            let z: f64 = rng.sample(StandardNormal);
            v + sigma * z
        })
        .collect();
    Ok((
        Sinogram {
            geometry: sinogram.geometry,
            values,
        },
        NoiseModel {
            sigma_noise: sigma,
            dimension: sinogram.values.len(),
        },
    ))
}

/// `(‖y‖₂/‖ε‖₂, 100·‖ε‖₂/‖y‖₂)`.
pub fn snr(y: &[f64], eps: &[f64]) -> Result<(f64, f64)> {
    let ne = l2(eps);
    if ne == 0.0 {
        return Err(Error::Undefined("SNR is undefined for zero noise".into()));
    }
    let s = l2(y) / ne;
    Ok((s, 100.0 / s))
}

/// Noise realization `noisy − clean`.
pub fn noise_realization(clean: &Sinogram, noisy: &Sinogram) -> Result<Vec<f64>> {
    if clean.geometry != noisy.geometry {
        return invalid("sinogram geometries differ");
    }
    Ok(noisy
        .values
        .iter()
        .zip(&clean.values)
        .map(|(a, b)| a - b)
        .collect())
}
