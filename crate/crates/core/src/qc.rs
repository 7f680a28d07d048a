//! Marker quality control.
//!
//! Markers are placed by hand and can be wrong in two ways: missing from one
//! image, or attached to the wrong spot. Missing markers are reclassified as
//! nonmarkers. Misallocated markers are found by running the EM/hardening
//! pipeline on the marker pairs alone under a flat identity prior; any marker
//! whose two copies do not end up matched to each other is dropped.

use itertools::Itertools;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::em::{initial_transform, run_em};
use crate::error::{Error, Result};
use crate::hardening::{harden, HardeningProblem, MatchingMode};
use crate::model::{rmsd, AffineTransform, Configuration, MatchMatrix, ModelParams, Region};
use crate::priors::build_gross_prior;

/// Where marker k was located.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MissingCase {
    /// Both images.
    A,
    /// Reference only.
    B,
    /// Observed only.
    C,
    /// Neither.
    D,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum MarkerOutcome {
    MatchedToSelf,
    /// The observed copy was left unmatched.
    UnmatchedInX {
        mu_also_unmatched: bool,
    },
    /// No observed marker took the reference copy.
    MuUnmatched,
    /// The reference copy was matched to the observed copy of `partner`.
    CrossMatched {
        partner: usize,
    },
    /// Not located in both images, so never screened.
    Missing {
        case: MissingCase,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerStatus {
    /// 1-based marker label.
    pub marker: usize,
    #[serde(flatten)]
    pub outcome: MarkerOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QcReport {
    pub markers: Vec<MarkerStatus>,
    /// 1-based labels of markers kept for the main alignment.
    pub retained: Vec<usize>,
    /// RMSD over every screened pair under the all-marker least-squares fit.
    pub rmsd_before: f64,
    /// RMSD over retained pairs after refitting on them alone.
    pub rmsd_after: f64,
    pub sigma2: f64,
    pub em_iterations: usize,
    pub em_converged: bool,
}

impl QcReport {
    pub fn excluded(&self) -> Vec<usize> {
        self.markers
            .iter()
            .filter(|s| !matches!(s.outcome, MarkerOutcome::MatchedToSelf | MarkerOutcome::Missing { .. }))
            .map(|s| s.marker)
            .collect()
    }
}

/// Screens K paired markers for gross misallocation.
///
/// Pair k is `(mu_markers[k], x_markers[k])`. The EM uses `params.sigma2`
/// and `params.p_m`; the returned labels are `k + 1`.
pub fn detect_misallocated(
    mu_markers: &[DVector<f64>],
    x_markers: &[DVector<f64>],
    params: &ModelParams,
) -> Result<QcReport> {
    detect_misallocated_from(mu_markers, x_markers, params, None)
}

/// As [`detect_misallocated`], but starting the EM from `start` instead of
/// the least-squares fit to all markers. A single gross error can drag that
/// fit far enough that a small sigma never recovers.
pub fn detect_misallocated_from(
    mu_markers: &[DVector<f64>],
    x_markers: &[DVector<f64>],
    params: &ModelParams,
    start: Option<&AffineTransform>,
) -> Result<QcReport> {
    let k = mu_markers.len();
    if x_markers.len() != k {
        return Err(Error::ShapeMismatch(format!(
            "{k} reference markers vs {} observed",
            x_markers.len()
        )));
    }
    let d = mu_markers.first().map(|p| p.len()).unwrap_or(2);
    if k < d + 2 {
        return Err(Error::InsufficientMarkers {
            needed: d + 2,
            found: k,
        });
    }
    params.validate()?;

    let mu = Configuration::with_leading_markers(d, mu_markers.to_vec(), k)?;
    let x = Configuration::with_leading_markers(d, x_markers.to_vec(), k)?;
    let omega = Region::bounding(&x, 3.0 * params.sigma2.sqrt())?;
    let q = build_gross_prior(k, params.p_m)?;
    let t0 = initial_transform(mu_markers, x_markers)?;
    let state = run_em(&x, &mu, &q, params, start.unwrap_or(&t0), &omega)?;
    let m = harden(&HardeningProblem::from_posteriors(
        &state.posteriors,
        MatchingMode::Hard,
    )?)?;

    let outcomes = classify(&m, k);
    let retained: Vec<usize> = outcomes
        .iter()
        .enumerate()
        .filter(|(_, o)| **o == MarkerOutcome::MatchedToSelf)
        .map(|(i, _)| i + 1)
        .collect();
    if retained.len() < d + 2 {
        return Err(Error::CannotProceed(format!(
            "only {} of {k} markers survive screening, need {}",
            retained.len(),
            d + 2
        )));
    }

    let rmsd_before = rmsd(
        mu_markers
            .iter()
            .map(|p| t0.apply_point(p))
            .collect::<Vec<_>>()
            .iter()
            .zip(x_markers),
    )?;
    let keep_mu: Vec<_> = retained.iter().map(|&l| mu_markers[l - 1].clone()).collect();
    let keep_x: Vec<_> = retained.iter().map(|&l| x_markers[l - 1].clone()).collect();
    let t1 = initial_transform(&keep_mu, &keep_x)?;
    let mapped: Vec<_> = keep_mu.iter().map(|p| t1.apply_point(p)).collect();
    let rmsd_after = rmsd(mapped.iter().zip(&keep_x))?;

    Ok(QcReport {
        markers: outcomes
            .into_iter()
            .enumerate()
            .map(|(i, outcome)| MarkerStatus { marker: i + 1, outcome })
            .collect(),
        retained,
        rmsd_before,
        rmsd_after,
        sigma2: params.sigma2,
        em_iterations: state.iteration,
        em_converged: state.converged,
    })
}

/// Outcome of each marker pair from a hard matching of marker-only sets.
fn classify(m: &MatchMatrix, k: usize) -> Vec<MarkerOutcome> {
    // taker[i] = observed marker matched to reference marker i
    let mut taker = vec![None; k];
    for (j, i) in m.pairs() {
        taker[i] = Some(j);
    }
    (0..k)
        .map(|idx| {
            let row = m.row_of(idx);
            if row == idx + 1 {
                MarkerOutcome::MatchedToSelf
            } else if row == 0 {
                MarkerOutcome::UnmatchedInX {
                    mu_also_unmatched: taker[idx].is_none(),
                }
            } else if taker[idx].is_none() {
                MarkerOutcome::MuUnmatched
            } else {
                // reference copy of idx went to another observed marker
                MarkerOutcome::CrossMatched {
                    partner: taker[idx].expect("checked above") + 1,
                }
            }
        })
        .collect()
}

/// Both configurations after missing markers have been demoted, together
/// with the case of every marker label.
#[derive(Debug, Clone)]
pub struct MissingResolution {
    pub mu: Configuration,
    pub x: Configuration,
    pub cases: Vec<MissingCase>,
}

impl MissingResolution {
    /// Effective K: markers located in both images.
    pub fn effective_k(&self) -> usize {
        self.cases.iter().filter(|c| **c == MissingCase::A).count()
    }

    pub fn count(&self, case: MissingCase) -> usize {
        self.cases.iter().filter(|c| **c == case).count()
    }
}

/// Demotes markers located in only one image to nonmarkers. Points are never
/// removed; only their labels change.
pub fn resolve_missing(mu: &Configuration, x: &Configuration) -> Result<MissingResolution> {
    let k = mu.marker_count().max(x.marker_count());
    let mu = mu.clone().with_marker_count(k)?;
    let x = x.clone().with_marker_count(k)?;
    let cases: Vec<MissingCase> = (0..k)
        .map(|s| match (mu.marker(s).is_some(), x.marker(s).is_some()) {
            (true, true) => MissingCase::A,
            (true, false) => MissingCase::B,
            (false, true) => MissingCase::C,
            (false, false) => MissingCase::D,
        })
        .collect();
    let mu_only: Vec<usize> = (0..k).filter(|&s| cases[s] == MissingCase::B).collect();
    let x_only: Vec<usize> = (0..k).filter(|&s| cases[s] == MissingCase::C).collect();
    let out = MissingResolution {
        mu: mu.without_markers(&mu_only),
        x: x.without_markers(&x_only),
        cases,
    };
    if out.effective_k() == 0 {
        return Err(Error::CannotProceed("no marker is located in both images".into()));
    }
    Ok(out)
}

/// Paired coordinates of every marker located in both configurations, with
/// their 1-based labels.
pub fn marker_pairs(mu: &Configuration, x: &Configuration) -> (Vec<usize>, Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let k = mu.marker_count().min(x.marker_count());
    let mut labels = Vec::new();
    let mut mp = Vec::new();
    let mut xp = Vec::new();
    for s in 0..k {
        if let (Some(i), Some(j)) = (mu.marker(s), x.marker(s)) {
            labels.push(s + 1);
            mp.push(mu.point(i).clone());
            xp.push(x.point(j).clone());
        }
    }
    (labels, mp, xp)
}

/// Least-squares affine refit over the accepted matches, with the RMSD of
/// the matched pairs under the refitted transform.
pub fn final_refit(x: &Configuration, mu: &Configuration, m: &MatchMatrix) -> Result<(AffineTransform, f64)> {
    if m.cols() != x.len() || m.rows() != mu.len() + 1 {
        return Err(Error::ShapeMismatch(
            "match matrix does not fit the configurations".into(),
        ));
    }
    let (xs, ms): (Vec<_>, Vec<_>) = m
        .pairs()
        .map(|(j, i)| (x.point(j).clone(), mu.point(i).clone()))
        .unzip();
    let d = x.dim();
    if xs.len() < d + 1 {
        return Err(Error::InsufficientMatches {
            needed: d + 1,
            found: xs.len(),
        });
    }
    let t = initial_transform(&ms, &xs)?;
    let mapped: Vec<_> = ms.iter().map(|p| t.apply_point(p)).collect();
    let r = rmsd(mapped.iter().zip(&xs))?;
    Ok((t, r))
}

/// Median of the chi-square distribution with `d` degrees of freedom.
fn chi2_median(d: usize) -> f64 {
    match d {
        1 => 0.454_936_423_119_572_8,
        2 => 2.0 * std::f64::consts::LN_2,
        3 => 2.365_973_884_375_338,
        _ => {
            let k = d as f64;
            k * (1.0 - 2.0 / (9.0 * k)).powi(3)
        }
    }
}

/// Upper bound on exact (d+1)-subsets tried by [`robust_fit`].
pub const MAX_ROBUST_SUBSETS: usize = 20_000;

/// Least-median-of-squares affine fit to marker pairs.
#[derive(Debug, Clone)]
pub struct RobustFit {
    /// Exact fit to the best (d+1)-subset.
    pub transform: AffineTransform,
    /// Per-coordinate variance from the median squared residual, with the
    /// usual small-sample correction.
    pub sigma2: f64,
}

/// Fits every (d+1)-subset exactly and keeps the one with the smallest
/// median squared residual over all pairs.
pub fn robust_fit(mu_markers: &[DVector<f64>], x_markers: &[DVector<f64>]) -> Result<RobustFit> {
    let k = mu_markers.len();
    if x_markers.len() != k {
        return Err(Error::ShapeMismatch(format!(
            "{k} reference markers vs {} observed",
            x_markers.len()
        )));
    }
    let d = mu_markers.first().map(|p| p.len()).unwrap_or(2);
    if k < d + 2 {
        return Err(Error::InsufficientMarkers {
            needed: d + 2,
            found: k,
        });
    }
    let mut best: Option<(f64, AffineTransform)> = None;
    for subset in (0..k).combinations(d + 1).take(MAX_ROBUST_SUBSETS) {
        let ms: Vec<_> = subset.iter().map(|&i| mu_markers[i].clone()).collect();
        let xs: Vec<_> = subset.iter().map(|&i| x_markers[i].clone()).collect();
        let Ok(t) = initial_transform(&ms, &xs) else {
            continue;
        };
        let mut r2: Vec<f64> = mu_markers
            .iter()
            .zip(x_markers)
            .map(|(m, x)| (x - t.apply_point(m)).norm_squared())
            .collect();
        r2.sort_by(f64::total_cmp);
        let med = if k % 2 == 1 {
            r2[k / 2]
        } else {
            0.5 * (r2[k / 2 - 1] + r2[k / 2])
        };
        if best.as_ref().is_none_or(|(b, _)| med < *b) {
            best = Some((med, t));
        }
    }
    let (med, transform) =
        best.ok_or_else(|| Error::DegenerateLandmarks("every marker subset is degenerate".into()))?;
    let correction = 1.0 + 5.0 / (k - d - 1) as f64;
    Ok(RobustFit {
        transform,
        sigma2: med / chi2_median(d) * correction * correction,
    })
}
