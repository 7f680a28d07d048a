//! Run configuration, read from TOML.
//!
//! ```toml
//! prior = "gaussian"
//! p_m = 0.99
//! l = 8
//! matching = "hard"
//! marker_qc = true
//! ```
//!
//! Every key is optional. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hardening::MatchingMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Prior strategy name: `gaussian`, `cluster` or `gross`.
    pub prior: String,
    /// Marker-prior variance; defaults to the estimated sigma^2.
    pub sigma_star2: Option<f64>,
    pub p_m: f64,
    /// Cluster prior radius in pixels; defaults to 2 sigma.
    pub cluster_radius: Option<f64>,
    /// Convergence exponent: stop when the mean squared posterior change is <= 10^-l.
    #[serde(alias = "convergence_exponent")]
    pub l: u32,
    pub max_iterations: usize,
    pub matching: MatchingMode,
    /// Background box margin around the observed points, in multiples of sigma.
    pub omega_margin: f64,
    /// Fixes sigma^2 instead of estimating it from the markers.
    pub sigma2: Option<f64>,
    /// Lower bound applied to an estimated sigma^2 (exactly affine markers give 0).
    pub min_sigma2: f64,
    /// Screen markers for misallocation before aligning.
    pub marker_qc: bool,
    /// Use the least-median-of-squares scale for marker screening.
    pub robust_scale: bool,
    /// Only used by the synthetic generator.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            prior: "gaussian".into(),
            sigma_star2: None,
            p_m: 0.99,
            cluster_radius: None,
            l: 8,
            max_iterations: 500,
            matching: MatchingMode::Hard,
            omega_margin: 3.0,
            sigma2: None,
            min_sigma2: 1e-6,
            marker_qc: false,
            robust_scale: false,
            seed: 0,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} = {v} must be positive and finite")))
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p_m > 0.0 && self.p_m < 1.0) {
            return Err(Error::Config(format!("p_m = {} must lie in (0, 1)", self.p_m)));
        }
        if self.l == 0 || self.l > 300 {
            return Err(Error::Config(format!("l = {} must lie in 1..=300", self.l)));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be at least 1".into()));
        }
        if !(self.omega_margin >= 0.0 && self.omega_margin.is_finite()) {
            return Err(Error::Config(format!(
                "omega_margin = {} must be >= 0",
                self.omega_margin
            )));
        }
        positive("min_sigma2", self.min_sigma2)?;
        for (name, v) in [
            ("sigma2", self.sigma2),
            ("sigma_star2", self.sigma_star2),
            ("cluster_radius", self.cluster_radius),
        ] {
            if let Some(v) = v {
                positive(name, v)?;
            }
        }
        Ok(())
    }
}
