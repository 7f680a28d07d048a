//! JSON alignment report.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{AffineTransform, Region};
use crate::qc::{MissingCase, QcReport};

/// Bumped whenever a field changes meaning or disappears.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchEntry {
    pub x_spot: String,
    /// `None` when the observed spot is left unmatched.
    pub mu_spot: Option<String>,
    /// Posterior probability of the chosen assignment.
    pub posterior: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerSummary {
    /// Largest marker label in either file.
    pub k: usize,
    /// Markers located in both files and kept for alignment.
    pub used: Vec<usize>,
    /// Case per label 1..=k.
    pub cases: Vec<MissingCase>,
    pub qc: Option<QcReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmsdStats {
    /// Marker pairs under the initial least-squares transform.
    pub markers_initial: f64,
    /// Matched pairs under the EM transform.
    pub matches_em: f64,
    /// Matched pairs under the refitted transform.
    pub matches_refit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub schema_version: u32,
    /// Transform maximising the observed likelihood.
    pub transform: AffineTransform,
    /// Least-squares transform over the hardened matches.
    pub refit_transform: AffineTransform,
    pub initial_transform: AffineTransform,
    pub iterations: usize,
    pub converged: bool,
    pub loglik: f64,
    pub sigma2: f64,
    pub sigma_star2: f64,
    pub omega: Region,
    pub n_matched: usize,
    pub matches: Vec<MatchEntry>,
    pub markers: MarkerSummary,
    pub rmsd: RmsdStats,
    pub config: RunConfig,
}

impl AlignmentReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: "report".into(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if r.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "report schema {} is not supported (expected {SCHEMA_VERSION})",
                r.schema_version
            )));
        }
        Ok(r)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Parse { line, message, .. } => Error::Parse {
                path: path.display().to_string(),
                line,
                message,
            },
            other => other,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        super::write_atomic(path, self.to_json().as_bytes())
    }

    /// Matched (x_spot, mu_spot) pairs in report order.
    pub fn matched_pairs(&self) -> impl Iterator<Item = (&str, &str)> {
        self.matches
            .iter()
            .filter_map(|m| m.mu_spot.as_deref().map(|mu| (m.x_spot.as_str(), mu)))
    }
}
