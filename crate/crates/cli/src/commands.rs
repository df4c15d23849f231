use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ctbuq_core::diagnostics::{acf, decorrelation_lag, ess, multi_chain_mean_check, Curve};
use ctbuq_core::forward::{add_noise, noise_realization, radon_functional, snr, NoiseModel, NoiseSpec, Sinogram};
use ctbuq_core::inference::{ChainHeader, ChainRecord};
use ctbuq_core::pipeline::{stage1, stage2, InclusionRun, PosteriorSummary, Stage1Result};
use ctbuq_core::priors::{sample_phantom, Phantom};
use ctbuq_core::randfield::{evaluate_boundary_field, BoundaryCoeffs, Grid, MaternParams};
use ctbuq_core::rng::{stream, streams};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::plot;

/// Largest lag reported by ACF outputs.
const MAX_LAG: usize = 200;
/// Angles of the mean curves compared across chains.
const CURVE_ANGLES: usize = 128;

/// Resolved configuration, seed and output directory of one invocation.
pub struct Ctx {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub out: PathBuf,
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(path, &text)
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&read(path)?).with_context(|| format!("cannot parse {}", path.display()))
}

pub fn read_sinogram(path: &Path) -> Result<Sinogram> {
    Ok(Sinogram::from_csv(&read(path)?).with_context(|| format!("in {}", path.display()))?)
}

/// Noise metadata written next to a simulated sinogram.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseInfo {
    pub model: NoiseModel,
    pub spec: NoiseSpec,
    pub snr: f64,
    pub realized_level_percent: f64,
}

/// `σ` from a metadata file, or from the config when none is given. A
/// percentage level is then converted using the noisy data's norm.
pub fn noise_model(ctx: &Ctx, y: &Sinogram, noise_path: Option<&Path>) -> Result<NoiseModel> {
    if let Some(p) = noise_path {
        return Ok(read_json::<NoiseInfo>(p)?.model);
    }
    if let NoiseSpec::LevelPercent(_) = ctx.config.noise {
        eprintln!("warning: no noise file given; estimating sigma from the noisy sinogram norm");
    }
    Ok(NoiseModel {
        sigma_noise: ctx.config.noise.sigma_for(y)?,
        dimension: y.values.len(),
    })
}

fn truth_grid(ctx: &Ctx) -> Result<Grid> {
    Ok(Grid::square(ctx.config.geometry.n_s)?)
}

pub fn phantom(ctx: &Ctx) -> Result<Phantom> {
    let ph = sample_phantom(&ctx.config.phantom, &mut stream(ctx.seed, streams::PHANTOM))?;
    write_json(&ctx.out.join("phantom.json"), &ph)?;
    write(&ctx.out.join("truth.csv"), &plot::field_csv(&ph.rasterize(&truth_grid(ctx)?)))?;
    Ok(ph)
}

pub fn scan(ctx: &Ctx, ph: &Phantom) -> Result<(Sinogram, NoiseModel)> {
    let geometry = ctx.config.geometry.scan_geometry()?;
    let clean = radon_functional(ph, &geometry);
    let (y, model) = add_noise(&clean, ctx.config.noise, &mut stream(ctx.seed, streams::NOISE))?;
    let eps = noise_realization(&clean, &y)?;
    let (ratio, level) = if eps.iter().all(|e| *e == 0.0) {
        (f64::INFINITY, 0.0)
    } else {
        snr(&clean.values, &eps)?
    };
    write(&ctx.out.join("sinogram_clean.csv"), &clean.to_csv())?;
    write(&ctx.out.join("sinogram.csv"), &y.to_csv())?;
    let info = NoiseInfo {
        model,
        spec: ctx.config.noise,
        snr: if ratio.is_finite() { ratio } else { f64::MAX },
        realized_level_percent: level,
    };
    write_json(&ctx.out.join("noise.json"), &info)?;
    Ok((y, model))
}

pub fn run_stage1(ctx: &Ctx, y: &Sinogram, noise: &NoiseModel) -> Result<Stage1Result> {
    let result = stage1(y, noise, &ctx.config.stage1, ctx.seed)?;
    if result.overlap_warning {
        eprintln!("warning: bounding boxes of detected inclusions overlap");
    }
    write_json(&ctx.out.join("stage1.json"), &result)?;
    Ok(result)
}

fn write_chain(path: &Path, params: &MaternParams, n_kl: usize, run: &InclusionRun) -> Result<()> {
    let mut text = serde_json::to_string(&ChainHeader { params: *params, n_kl })?;
    text.push('\n');
    for r in &run.chain.records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    write(path, &text)
}

/// Runs Stage 2 for every inclusion. Failed inclusions are reported and
/// skipped; the first error is returned after all outputs are written.
pub fn run_stage2(ctx: &Ctx, y: &Sinogram, noise: &NoiseModel, s1: &Stage1Result) -> Result<Vec<PosteriorSummary>> {
    let mut summaries = Vec::new();
    let mut first_error = None;
    for (i, run) in stage2(y, noise, s1, &ctx.config.stage2, ctx.seed).into_iter().enumerate() {
        match run {
            Ok(run) => {
                write_json(&ctx.out.join(format!("inclusion_{i}.json")), &run.summary)?;
                write_chain(
                    &ctx.out.join(format!("chain_{i}.jsonl")),
                    &run.summary.prior,
                    ctx.config.stage2.n_kl,
                    &run,
                )?;
                summaries.push(run.summary);
            }
            Err(e) => {
                eprintln!("error: inclusion {i}: {e}");
                first_error.get_or_insert(e);
            }
        }
    }
    match first_error {
        Some(e) => Err(e.into()),
        None => Ok(summaries),
    }
}

/// A chain file: one header line, then one record per line.
pub struct ChainFile {
    pub header: ChainHeader,
    pub records: Vec<ChainRecord>,
}

pub fn read_chain(path: &Path) -> Result<ChainFile> {
    let text = read(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let first = lines.next().with_context(|| format!("{} is empty", path.display()))?;
    let header: ChainHeader =
        serde_json::from_str(first).with_context(|| format!("bad header in {}", path.display()))?;
    let records = lines
        .enumerate()
        .map(|(k, l)| {
            serde_json::from_str(l).with_context(|| format!("bad record {} in {}", k + 1, path.display()))
        })
        .collect::<Result<Vec<ChainRecord>>>()?;
    Ok(ChainFile { header, records })
}

fn radius_curves(chain: &ChainFile, angles: &[f64]) -> Result<Vec<Vec<f64>>> {
    chain
        .records
        .iter()
        .map(|r| {
            let c = BoundaryCoeffs::from_flat(&r.coeffs)?;
            Ok(evaluate_boundary_field(&c, &chain.header.params, angles)
                .into_iter()
                .map(f64::exp)
                .collect())
        })
        .collect()
}

#[derive(Debug, Serialize)]
pub struct ChainDiagnostics {
    pub file: String,
    pub n_samples: usize,
    /// Diagnostics of the radius at angle 0.
    pub ess: Option<f64>,
    pub acf: Option<Vec<f64>>,
    pub decorrelation_lag: Option<usize>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Serialize)]
pub struct Diagnostics {
    pub chains: Vec<ChainDiagnostics>,
    /// Present with two or more chains.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub multi_chain: Option<MultiChain>,
}

#[derive(Debug, Serialize)]
pub struct MultiChain {
    pub angles: Vec<f64>,
    pub mean_curves: Vec<Vec<f64>>,
    pub max_pairwise_distance: f64,
}

fn record<T>(r: ctbuq_core::Result<T>, what: &str, warnings: &mut Vec<String>) -> Option<T> {
    match r {
        Ok(v) => Some(v),
        Err(e) => {
            warnings.push(format!("{what}: {e}"));
            None
        }
    }
}

pub fn diagnose(ctx: &Ctx, files: &[PathBuf]) -> Result<Diagnostics> {
    let angles: Vec<f64> = (0..CURVE_ANGLES)
        .map(|k| k as f64 * std::f64::consts::TAU / CURVE_ANGLES as f64)
        .collect();
    let mut chains = Vec::new();
    let mut curves = Vec::new();
    for (k, path) in files.iter().enumerate() {
        let chain = read_chain(path)?;
        let radii = radius_curves(&chain, &angles)?;
        let r0: Vec<f64> = radii.iter().map(|r| r[0]).collect();
        let mut warnings = Vec::new();
        let acf_values = record(acf(&r0, MAX_LAG.min(r0.len().saturating_sub(1))), "acf", &mut warnings);
        let d = ChainDiagnostics {
            file: path.display().to_string(),
            n_samples: r0.len(),
            ess: record(ess(&r0), "ess", &mut warnings),
            decorrelation_lag: record(decorrelation_lag(&r0, 0.05), "decorrelation lag", &mut warnings).flatten(),
            acf: acf_values,
            warnings,
        };
        for w in &d.warnings {
            eprintln!("warning: {}: {w}", d.file);
        }
        if let Some(a) = &d.acf {
            write(&ctx.out.join(format!("diagnose_acf_{k}.csv")), &plot::acf_csv(a))?;
            write(&ctx.out.join(format!("diagnose_acf_{k}.svg")), &plot::acf_svg(&format!("ACF of r(0), {}", d.file), a))?;
        }
        if !radii.is_empty() {
            let n = radii.len() as f64;
            let values = (0..angles.len()).map(|a| radii.iter().map(|r| r[a]).sum::<f64>() / n).collect();
            curves.push(Curve { angles: angles.clone(), values });
        }
        chains.push(d);
    }
    let multi_chain = if curves.len() >= 2 {
        Some(MultiChain {
            angles: angles.clone(),
            max_pairwise_distance: multi_chain_mean_check(&curves)?,
            mean_curves: curves.into_iter().map(|c| c.values).collect(),
        })
    } else {
        None
    };
    let diagnostics = Diagnostics { chains, multi_chain };
    write_json(&ctx.out.join("diagnostics.json"), &diagnostics)?;
    Ok(diagnostics)
}

/// Writes every figure that can be derived from the artifacts in `dir`.
pub fn plot_dir(dir: &Path, out: &Path) -> Result<usize> {
    let mut written = 0;
    let stage1_path = dir.join("stage1.json");
    let s1: Option<Stage1Result> = stage1_path.exists().then(|| read_json(&stage1_path)).transpose()?;
    let phantom_path = dir.join("phantom.json");
    let truth: Option<Phantom> = phantom_path.exists().then(|| read_json(&phantom_path)).transpose()?;
    let sinogram_path = dir.join("sinogram.csv");
    if sinogram_path.exists() {
        let y = read_sinogram(&sinogram_path)?;
        write(&out.join("sinogram.svg"), &plot::sinogram_svg("Sinogram", &y))?;
        written += 1;
    }
    if let Some(s1) = &s1 {
        for (name, title, field) in [
            ("mean_field", "Stage 1: image of the mean level-set field", &s1.mean_field_image),
            ("pointwise_mean", "Stage 1: pointwise mean image", &s1.pointwise_mean_image),
        ] {
            write(&out.join(format!("{name}.svg")), &plot::field_svg(title, field))?;
            write(&out.join(format!("{name}.csv")), &plot::field_csv(field))?;
            written += 1;
        }
    }
    for i in 0.. {
        let path = dir.join(format!("inclusion_{i}.json"));
        if !path.exists() {
            break;
        }
        let summary: PosteriorSummary = read_json(&path)?;
        let band = &summary.first_mode().band;
        let outline = truth.as_ref().and_then(|ph| {
            let c = band.center;
            ph.inclusions
                .iter()
                .min_by(|a, b| (a.center() - c).norm().total_cmp(&(b.center() - c).norm()))
                .map(|inc| inc.boundary_polyline(256))
        });
        let title = format!("Inclusion {i}: mean boundary and {}% HPD band", 100.0 * summary.hpd_level);
        let s1_center = s1.as_ref().and_then(|s| s.centers.get(i).copied());
        write(&out.join(format!("boundary_{i}.svg")), &plot::boundary_svg(&title, band, outline.as_deref(), s1_center))?;
        write(&out.join(format!("band_{i}.csv")), &plot::band_csv(band))?;
        written += 1;
        let chain_path = dir.join(format!("chain_{i}.jsonl"));
        if chain_path.exists() {
            let chain = read_chain(&chain_path)?;
            let r0: Vec<f64> = radius_curves(&chain, &[0.0])?.into_iter().map(|r| r[0]).collect();
            match acf(&r0, MAX_LAG.min(r0.len().saturating_sub(1))) {
                Ok(a) => {
                    write(&out.join(format!("acf_{i}.svg")), &plot::acf_svg(&format!("Inclusion {i}: ACF of r(0)"), &a))?;
                    write(&out.join(format!("acf_{i}.csv")), &plot::acf_csv(&a))?;
                    written += 1;
                }
                Err(e) => eprintln!("warning: inclusion {i}: no ACF plot: {e}"),
            }
        }
    }
    Ok(written)
}

pub fn write_config(ctx: &Ctx) -> Result<()> {
    let mut text = ctx.config.to_json();
    text.push('\n');
    write(&ctx.out.join("config.json"), &text)
}
