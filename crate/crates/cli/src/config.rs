//! Experiment configuration: one versioned JSON document, plus named presets.

use ctbuq_core::forward::{NoiseSpec, ScanGeometry};
use ctbuq_core::pipeline::{Stage1Config, Stage2Config};
use ctbuq_core::priors::{AttenuationLevels, BackgroundConfig, Margins, PhantomConfig};
use ctbuq_core::randfield::MaternParams;
use ctbuq_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

pub const PRESETS: [&str; 6] = ["single-smooth", "single-rough", "multi3", "sparse", "limited", "lotus"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub theta_max_deg: f64,
    pub n_theta: usize,
    pub n_s: usize,
}

impl GeometryConfig {
    pub fn scan_geometry(&self) -> Result<ScanGeometry> {
        ScanGeometry::new(self.theta_max_deg.to_radians(), self.n_theta, self.n_s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub master_seed: u64,
    pub geometry: GeometryConfig,
    pub phantom: PhantomConfig,
    pub noise: NoiseSpec,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks every module precondition that does not need data.
    pub fn validate(&self) -> Result<()> {
        if self.version != SCHEMA_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported config version {}, expected {SCHEMA_VERSION}",
                self.version
            )));
        }
        self.geometry.scan_geometry()?;
        self.phantom.validate()?;
        let noise_ok = match self.noise {
            NoiseSpec::Sigma(s) => s >= 0.0 && s.is_finite(),
            NoiseSpec::LevelPercent(l) => l > 0.0 && l.is_finite(),
        };
        if !noise_ok {
            return Err(Error::InvalidArgument(format!("invalid noise spec {:?}", self.noise)));
        }
        self.stage1.validate()?;
        self.stage2.validate()?;
        Ok(())
    }

    pub fn preset(name: &str) -> Result<Self> {
        let mut c = single_smooth();
        match name {
            "single-smooth" => {}
            "single-rough" => {
                c.phantom.inclusion_params = vec![boundary(2.0, 0.3)];
                c.stage2.prior.gamma = 2.0;
            }
            "multi3" => {
                c.phantom.n_inc = 3;
                c.phantom.inclusion_params = vec![boundary(3.0, 0.25)];
                c.stage2.sampler.n_samples = 11_000;
                c.stage2.burn_in_fraction = 1.0 / 11.0;
            }
            "sparse" => c.geometry.n_theta = 10,
            "limited" => {
                c.geometry.n_theta = 10;
                c.geometry.theta_max_deg = 45.0;
            }
            "lotus" => {
                let levels = AttenuationLevels {
                    a_minus: 0.001,
                    a_plus: 0.025,
                };
                c.phantom.levels = levels;
                c.phantom.background = BackgroundConfig::Constant;
                c.stage1.levels = levels;
                c.stage1.field.tau = 50.0;
            }
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown preset `{other}`; available: {}",
                    PRESETS.join(", ")
                )))
            }
        }
        Ok(c)
    }
}

fn boundary(gamma: f64, mean_radius: f64) -> MaternParams {
    MaternParams {
        gamma,
        tau: 1.0,
        amplitude: 0.3,
        mean: mean_radius.ln(),
        kl_form: Default::default(),
    }
}

/// Single `γ = 3` inclusion, 100 angles over 180°, 100 detector cells, 1%
/// noise.
fn single_smooth() -> ExperimentConfig {
    let stage1 = Stage1Config::default();
    ExperimentConfig {
        version: SCHEMA_VERSION,
        master_seed: 1,
        geometry: GeometryConfig {
            theta_max_deg: 180.0,
            n_theta: 100,
            n_s: 100,
        },
        phantom: PhantomConfig {
            n_inc: 1,
            levels: stage1.levels,
            inclusion_params: vec![boundary(3.0, 0.3)],
            n_kl: 100,
            background: BackgroundConfig::Field {
                params: MaternParams {
                    gamma: 2.5,
                    tau: 50.0,
                    amplitude: 0.00065,
                    mean: 0.0,
                    kl_form: Default::default(),
                },
                grid_n: 128,
                cutoff: None,
            },
            margins: Margins::default(),
            n_check: 256,
            max_rejections: 10_000,
        },
        noise: NoiseSpec::LevelPercent(1.0),
        stage1,
        stage2: Stage2Config::default(),
    }
}
