//! Run configuration read from TOML files. Precedence is flags, then file,
//! then built-in defaults; the binary applies flags on top of [`RunConfig`].

use std::path::{Path, PathBuf};

use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::pipeline::{InjectedPulse, InjectionSpec, PointEstimateName, RestoreConfig};
use crate::pulse::ShapeTailParams;
use crate::sampler::{SamplerConfig, TailModelKind};

/// Sampler settings as they appear in a file. Unset entries fall back to the
/// protocol of the selected tail model.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub iterations: Option<usize>,
    pub burn_in: Option<usize>,
    pub thin: Option<usize>,
    pub loc_proposal_width: Option<usize>,
    pub shape_proposal_vars: Option<[f64; 5]>,
    pub shape_init: Option<[f64; 6]>,
    pub sequential_shape: Option<bool>,
    pub collapse_amplitude: Option<bool>,
    pub alpha_d: Option<f64>,
    pub beta_d: Option<f64>,
}

impl SamplerSection {
    pub fn resolve(&self, model: TailModelKind, seed: u64) -> SamplerConfig {
        let mut c = SamplerConfig::protocol(model);
        macro_rules! take {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { c.$f = v; } )* };
        }
        take!(
            iterations,
            burn_in,
            thin,
            loc_proposal_width,
            shape_proposal_vars,
            shape_init,
            sequential_shape,
            collapse_amplitude,
            alpha_d,
            beta_d
        );
        c.seed = seed;
        c
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: TailModelKind,
    pub seed: u64,
    pub excerpt_len: usize,
    pub n0_in_excerpt: usize,
    pub ar_order: usize,
    pub ar_fit_len: usize,
    pub fade_len: Option<usize>,
    pub gp_fit_window: usize,
    pub point: PointEstimateName,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub detector: DetectorConfig,
    pub sampler: SamplerSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let r = RestoreConfig::default();
        RunConfig {
            model: r.model,
            seed: 0,
            excerpt_len: r.excerpt_len,
            n0_in_excerpt: r.n0_in_excerpt,
            ar_order: r.ar_order,
            ar_fit_len: r.ar_fit_len,
            fade_len: r.fade_len,
            gp_fit_window: r.gp_fit_window,
            point: r.point,
            input: None,
            output: None,
            detector: DetectorConfig::default(),
            sampler: SamplerSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Per-pulse settings with every default filled in.
    pub fn restore_config(&self) -> RestoreConfig {
        RestoreConfig {
            model: self.model,
            excerpt_len: self.excerpt_len,
            n0_in_excerpt: self.n0_in_excerpt,
            ar_order: self.ar_order,
            ar_fit_len: self.ar_fit_len,
            fade_len: self.fade_len,
            gp_fit_window: self.gp_fit_window,
            point: self.point,
            sampler: self.sampler.resolve(self.model, self.seed),
        }
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        self.detector.validate(sample_rate)?;
        self.restore_config().validate()
    }

    /// Fully resolved settings as TOML, for logging.
    pub fn effective_toml(&self) -> String {
        #[derive(serde::Serialize)]
        struct Effective<'a> {
            seed: u64,
            detector: &'a DetectorConfig,
            restore: RestoreConfig,
        }
        let e = Effective {
            seed: self.seed,
            detector: &self.detector,
            restore: self.restore_config(),
        };
        toml::to_string(&e).unwrap_or_else(|_| format!("{e:?}", e = self))
    }
}

/// One pulse of an injection file. `n0` is 1-based.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PulseEntry {
    pub n0: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub sigma_d2: f64,
    #[serde(rename = "V_t")]
    pub v_t: f64,
    pub tau_m: f64,
    pub tau_f: f64,
    pub f_max: f64,
    pub f_min: f64,
    pub phi: f64,
    pub tail_len: usize,
}

/// Pulse parameters without a position, used by uniform spacing.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PulseTemplate {
    #[serde(rename = "M")]
    pub m: usize,
    pub sigma_d2: f64,
    #[serde(rename = "V_t")]
    pub v_t: f64,
    pub tau_m: f64,
    pub tau_f: f64,
    pub f_max: f64,
    pub f_min: f64,
    pub phi: f64,
    pub tail_len: usize,
}

impl Default for PulseTemplate {
    /// The reference pulse used throughout the controlled experiments.
    fn default() -> Self {
        PulseTemplate {
            m: 10,
            sigma_d2: 0.5,
            v_t: 0.3,
            tau_m: 0.07,
            tau_f: 0.013,
            f_max: 60.0,
            f_min: 20.0,
            phi: 0.0,
            tail_len: 7500,
        }
    }
}

impl PulseTemplate {
    pub fn at(&self, n0: usize) -> InjectedPulse<f64> {
        InjectedPulse {
            n0,
            m: self.m,
            sigma_d2: self.sigma_d2,
            tail: ShapeTailParams {
                v_t: self.v_t,
                tau_m: self.tau_m,
                tau_f: self.tau_f,
                f_max: self.f_max,
                f_min: self.f_min,
                phi: self.phi,
            },
            tail_len: self.tail_len,
        }
    }
}

/// Injection spec as written by users: explicit pulses, or a count of
/// uniformly spaced copies of a template.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InjectionFile {
    pub seed: u64,
    pub uniform: Option<usize>,
    pub template: Option<PulseTemplate>,
    pub pulse: Vec<PulseEntry>,
}

impl InjectionFile {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Spec(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Resolves to 0-based pulses and validates them against the signal.
    pub fn to_spec(&self, signal_len: usize) -> Result<InjectionSpec<f64>> {
        let mut pulses = Vec::with_capacity(self.pulse.len());
        for p in &self.pulse {
            if p.n0 == 0 {
                return Err(Error::Spec("pulse positions are 1-based; n0 = 0 is invalid".into()));
            }
            let t = PulseTemplate {
                m: p.m,
                sigma_d2: p.sigma_d2,
                v_t: p.v_t,
                tau_m: p.tau_m,
                tau_f: p.tau_f,
                f_max: p.f_max,
                f_min: p.f_min,
                phi: p.phi,
                tail_len: p.tail_len,
            };
            pulses.push(t.at(p.n0 - 1));
        }
        if let Some(k) = self.uniform {
            let template = self.template.clone().unwrap_or_default();
            pulses.extend(InjectionSpec::uniform(signal_len, k, &template.at(0), self.seed)?.pulses);
        }
        let spec = InjectionSpec {
            pulses,
            seed: self.seed,
        };
        spec.validate(signal_len)?;
        Ok(spec)
    }
}
