//! End-to-end alignment of two spot tables.
//!
//! Missing markers are demoted, optionally misallocated ones are screened
//! out, the marker regression seeds the transform and sigma^2, and the EM
//! runs under the configured prior. The posteriors are hardened and the
//! matches refitted. Every failure carries the name of the stage that raised it.

use nalgebra::DVector;

use crate::em::{estimate_sigma2, initial_transform, run_em, IterationRecord};
use crate::error::{Error, Result};
use crate::hardening::{matcher_registry, HardeningProblem};
use crate::io::config::RunConfig;
use crate::io::report::{AlignmentReport, MarkerSummary, MatchEntry, RmsdStats, SCHEMA_VERSION};
use crate::io::spotfile::SpotTable;
use crate::model::{rmsd, AffineTransform, ModelParams, Region};
use crate::priors::{prior_registry, PriorInputs, PriorParams};
use crate::qc::{
    detect_misallocated_from, final_refit, marker_pairs, resolve_missing, robust_fit, MissingCase, QcReport,
};

pub const STAGE_MISSING: &str = "resolve_missing";
pub const STAGE_QC: &str = "marker_qc";
pub const STAGE_INIT: &str = "initial_transform";
pub const STAGE_SIGMA: &str = "estimate_sigma2";
pub const STAGE_PRIOR: &str = "prior";
pub const STAGE_EM: &str = "em";
pub const STAGE_HARDEN: &str = "harden";
pub const STAGE_REFIT: &str = "final_refit";

#[derive(Debug, Clone)]
pub struct Alignment {
    pub report: AlignmentReport,
    pub trace: Vec<IterationRecord>,
}

/// Marker screening on its own.
#[derive(Debug, Clone)]
pub struct MarkerScreen {
    pub cases: Vec<MissingCase>,
    /// 1-based labels of the screened markers, in the order the QC report numbers them.
    pub labels: Vec<usize>,
    pub report: QcReport,
}

impl MarkerScreen {
    /// Labels excluded by screening, in file numbering.
    pub fn excluded_labels(&self) -> Vec<usize> {
        self.report.excluded().into_iter().map(|k| self.labels[k - 1]).collect()
    }

    /// Labels kept by screening, in file numbering.
    pub fn retained_labels(&self) -> Vec<usize> {
        self.report.retained.iter().map(|&k| self.labels[k - 1]).collect()
    }
}

fn params(cfg: &RunConfig, sigma2: f64, sigma_star2: f64) -> ModelParams {
    ModelParams {
        sigma2,
        sigma_star2,
        p_m: cfg.p_m,
        convergence_exponent: cfg.l,
        max_iterations: cfg.max_iterations,
    }
}

/// sigma^2 and EM start for screening. The robust option replaces both.
fn screening_setup(cfg: &RunConfig, mu: &[DVector<f64>], x: &[DVector<f64>]) -> Result<(f64, Option<AffineTransform>)> {
    let (s, start) = if cfg.robust_scale {
        let fit = robust_fit(mu, x)?;
        (fit.sigma2, Some(fit.transform))
    } else {
        (estimate_sigma2(mu, x, &initial_transform(mu, x)?)?, None)
    };
    Ok((cfg.sigma2.unwrap_or(s.max(cfg.min_sigma2)), start))
}

/// Runs misallocation screening over the markers located in both tables.
pub fn screen_markers(mu: &SpotTable, x: &SpotTable, cfg: &RunConfig) -> Result<MarkerScreen> {
    cfg.validate()?;
    let resolved = resolve_missing(&mu.configuration, &x.configuration).map_err(|e| e.in_stage(STAGE_MISSING))?;
    let (labels, mp, xp) = marker_pairs(&resolved.mu, &resolved.x);
    let run = || -> Result<QcReport> {
        let (s2, start) = screening_setup(cfg, &mp, &xp)?;
        detect_misallocated_from(&mp, &xp, &params(cfg, s2, s2), start.as_ref())
    };
    let report = run().map_err(|e| e.in_stage(STAGE_QC))?;
    Ok(MarkerScreen {
        cases: resolved.cases,
        labels,
        report,
    })
}

pub fn align(mu_table: &SpotTable, x_table: &SpotTable, cfg: &RunConfig) -> Result<Alignment> {
    cfg.validate()?;
    let resolved =
        resolve_missing(&mu_table.configuration, &x_table.configuration).map_err(|e| e.in_stage(STAGE_MISSING))?;
    let k = resolved.cases.len();
    let (mut mu, mut x) = (resolved.mu, resolved.x);

    let qc = if cfg.marker_qc {
        let screen = screen_markers(mu_table, x_table, cfg)?;
        let drop: Vec<usize> = screen.excluded_labels().into_iter().map(|l| l - 1).collect();
        mu = mu.without_markers(&drop);
        x = x.without_markers(&drop);
        Some(screen.report)
    } else {
        None
    };

    let (used, mp, xp) = marker_pairs(&mu, &x);
    let t0 = initial_transform(&mp, &xp).map_err(|e| e.in_stage(STAGE_INIT))?;
    let sigma2 = match cfg.sigma2 {
        Some(s) => s,
        None => estimate_sigma2(&mp, &xp, &t0)
            .map_err(|e| e.in_stage(STAGE_SIGMA))?
            .max(cfg.min_sigma2),
    };
    let sigma_star2 = cfg.sigma_star2.unwrap_or(sigma2);
    let sigma = sigma2.sqrt();
    let model = params(cfg, sigma2, sigma_star2);

    let omega = Region::bounding(&x, cfg.omega_margin * sigma).map_err(|e| e.in_stage(STAGE_PRIOR))?;
    let priors = prior_registry();
    let strategy = priors.get(&cfg.prior).ok_or_else(|| {
        Error::Config(format!(
            "unknown prior {:?} (known: {})",
            cfg.prior,
            priors.names().collect::<Vec<_>>().join(", ")
        ))
    })?;
    let q = strategy
        .build(&PriorInputs {
            mu: &mu,
            x: &x,
            omega: &omega,
            params: PriorParams {
                sigma_star2,
                p_m: cfg.p_m,
                cluster_radius: cfg.cluster_radius.unwrap_or(2.0 * sigma),
            },
        })
        .map_err(|e| e.in_stage(STAGE_PRIOR))?;

    let state = run_em(&x, &mu, &q, &model, &t0, &omega).map_err(|e| e.in_stage(STAGE_EM))?;

    let matchers = matcher_registry();
    let matcher = matchers
        .get(cfg.matching.as_str())
        .ok_or_else(|| Error::Config(format!("no matcher named {}", cfg.matching)))?;
    let m = HardeningProblem::from_posteriors(&state.posteriors, cfg.matching)
        .and_then(|prob| matcher.solve(&prob.log_post))
        .map_err(|e| e.in_stage(STAGE_HARDEN))?;

    let (refit, rmsd_refit) = final_refit(&x, &mu, &m).map_err(|e| e.in_stage(STAGE_REFIT))?;

    let em_pairs: Vec<(DVector<f64>, &DVector<f64>)> = m
        .pairs()
        .map(|(j, i)| (state.transform.apply_point(mu.point(i)), x.point(j)))
        .collect();
    let rmsd_em = rmsd(em_pairs.iter().map(|(a, b)| (a, *b)))?;
    let mapped: Vec<_> = mp.iter().map(|p| t0.apply_point(p)).collect();
    let rmsd_markers = rmsd(mapped.iter().zip(&xp))?;

    let matches = (0..x.len())
        .map(|j| {
            let row = m.row_of(j);
            MatchEntry {
                x_spot: x_table.ids[j].clone(),
                mu_spot: (row > 0).then(|| mu_table.ids[row - 1].clone()),
                posterior: state.posteriors.get(j, row),
            }
        })
        .collect();

    let report = AlignmentReport {
        schema_version: SCHEMA_VERSION,
        transform: state.transform.clone(),
        refit_transform: refit,
        initial_transform: t0,
        iterations: state.iteration,
        converged: state.converged,
        loglik: state.observed_loglik,
        sigma2,
        sigma_star2,
        omega,
        n_matched: m.matched_count(),
        matches,
        markers: MarkerSummary {
            k,
            used,
            cases: resolved.cases,
            qc,
        },
        rmsd: RmsdStats {
            markers_initial: rmsd_markers,
            matches_em: rmsd_em,
            matches_refit: rmsd_refit,
        },
        config: cfg.clone(),
    };
    Ok(Alignment {
        report,
        trace: state.trace,
    })
}
