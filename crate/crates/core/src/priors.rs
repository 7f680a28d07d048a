//! Prior match probabilities Q.
//!
//! `Q` has one row per reference point plus the unmatched row (stored at
//! index 0) and one column per observed point. Every column is a probability
//! distribution over "which reference point, if any, is this observed point".
//!
//! Three marker-identity models are available behind [`PriorStrategy`]:
//! a Gaussian in the distance to the allocated marker, a flat model for
//! marker-only screening of gross misallocations, and a cluster-adaptive
//! model that spreads mass evenly over every point near the allocated marker.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Configuration, Region};
use crate::registry::{Named, Registry};

/// Tolerance on column sums.
pub const COLUMN_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct PriorMatrix {
    q: DMatrix<f64>,
}

impl PriorMatrix {
    /// Wraps a (K+m+1) x (K+n) matrix, checking it is column-stochastic.
    pub fn new(q: DMatrix<f64>) -> Result<Self> {
        if q.nrows() < 1 {
            return Err(Error::InvalidInput("prior needs an unmatched row".into()));
        }
        if q.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput("prior entry outside [0, 1]".into()));
        }
        for (j, col) in q.column_iter().enumerate() {
            let s: f64 = col.iter().sum();
            if (s - 1.0).abs() > COLUMN_SUM_TOL {
                return Err(Error::InvalidInput(format!("prior column {j} sums to {s}")));
            }
        }
        Ok(Self { q })
    }

    pub fn rows(&self) -> usize {
        self.q.nrows()
    }

    pub fn cols(&self) -> usize {
        self.q.ncols()
    }

    /// q_ij with row 0 the unmatched row.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.q[(i, j)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.q
    }
}

fn check_omega(omega: &Region) -> Result<f64> {
    let q0 = 1.0 / omega.area();
    if !(q0 < 1.0) {
        return Err(Error::InvalidRegion(format!(
            "|Omega| = {} gives an unmatched prior of {q0} >= 1",
            omega.area()
        )));
    }
    Ok(q0)
}

/// Which reference point, if any, anchors the prior of each observed point.
///
/// Observed point j is anchored when it carries marker k and marker k is
/// also located in the reference; every other observed point is treated as
/// a nonmarker.
fn anchors(mu: &Configuration, x: &Configuration) -> Result<Vec<Option<usize>>> {
    if mu.dim() != x.dim() {
        return Err(Error::ShapeMismatch(format!(
            "reference is {}-D, observed is {}-D",
            mu.dim(),
            x.dim()
        )));
    }
    let mut out = vec![None; x.len()];
    for (k, slot) in x.marker_slots().iter().enumerate() {
        if let (Some(j), Some(i)) = (*slot, mu.marker(k)) {
            out[j] = Some(i);
        }
    }
    Ok(out)
}

/// Assembles Q from per-anchor weights over reference points.
///
/// Anchored columns get `1/|Omega|` on the unmatched row and the remaining
/// mass split in proportion to `weights(anchor)`. Other columns are uniform
/// over all `N_mu + 1` possibilities.
fn assemble<F>(mu: &Configuration, x: &Configuration, omega: &Region, mut weights: F) -> Result<PriorMatrix>
where
    F: FnMut(usize) -> Vec<f64>,
{
    let q0 = check_omega(omega)?;
    let anchors = anchors(mu, x)?;
    let rows = mu.len() + 1;
    let uniform = 1.0 / rows as f64;
    let mut q = DMatrix::zeros(rows, x.len());
    for (j, anchor) in anchors.iter().enumerate() {
        match anchor {
            Some(a) => {
                let w = weights(*a);
                let total: f64 = w.iter().sum();
                q[(0, j)] = q0;
                for (i, wi) in w.iter().enumerate() {
                    q[(i + 1, j)] = (1.0 - q0) * wi / total;
                }
            }
            None => {
                for i in 0..rows {
                    q[(i, j)] = uniform;
                }
            }
        }
    }
    PriorMatrix::new(q)
}

fn gaussian_weights(mu: &Configuration, anchor: usize, sigma_star2: f64) -> Vec<f64> {
    let a = mu.point(anchor);
    mu.points()
        .iter()
        .map(|p| (-(p - a).norm_squared() / (2.0 * sigma_star2)).exp())
        .collect()
}

fn require_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{name} = {v} must be positive")))
    }
}

/// Distance-based prior for fully located markers.
///
/// Marker columns: `q_0j = 1/|Omega|`, other rows proportional to
/// `exp(-|mu_i - mu_j|^2 / (2 sigma_*^2))`. Nonmarker columns: uniform.
pub fn build_standard_prior(
    mu: &Configuration,
    x: &Configuration,
    omega: &Region,
    sigma_star2: f64,
) -> Result<PriorMatrix> {
    let k = mu.marker_count().max(x.marker_count());
    if mu.marker_count() != x.marker_count() || mu.located_markers() != k || x.located_markers() != k {
        return Err(Error::InvalidInput(
            "standard prior needs every marker located in both configurations".into(),
        ));
    }
    if k == 0 {
        return Err(Error::InvalidInput("no markers located".into()));
    }
    build_missing_prior(mu, x, omega, sigma_star2)
}

/// Distance-based prior that tolerates markers missing from either side.
///
/// Marker k located in both: distance-based column. Located only in the
/// reference: the reference point acts as a nonmarker row. Located only in
/// the observed set: its column is uniform at `1/(K_mu + m + 1)`. Located in
/// neither: contributes nothing.
pub fn build_missing_prior(
    mu: &Configuration,
    x: &Configuration,
    omega: &Region,
    sigma_star2: f64,
) -> Result<PriorMatrix> {
    require_positive("sigma_star2", sigma_star2)?;
    assemble(mu, x, omega, |a| gaussian_weights(mu, a, sigma_star2))
}

/// Flat marker-identity prior on a marker-only pair of size K:
/// `q_jj = p_M` and `(1 - p_M)/K` for every other row including the
/// unmatched row. Row 0 is the unmatched row; row k is marker k.
pub fn build_gross_prior(k: usize, p_m: f64) -> Result<PriorMatrix> {
    let identity: Vec<usize> = (0..k).collect();
    gross_with_rows(k, p_m, &identity)
}

/// `rows_for_col[j]` is the reference point index of the marker carried by
/// observed point j.
fn gross_with_rows(k: usize, p_m: f64, rows_for_col: &[usize]) -> Result<PriorMatrix> {
    if !(p_m > 0.0 && p_m < 1.0) {
        return Err(Error::InvalidInput(format!("p_m = {p_m} must lie in (0, 1)")));
    }
    if k == 0 {
        return Err(Error::InvalidInput("no markers".into()));
    }
    let off = (1.0 - p_m) / k as f64;
    let mut q = DMatrix::from_element(k + 1, k, off);
    for (j, &i) in rows_for_col.iter().enumerate() {
        q[(i + 1, j)] = p_m;
        // p_M + K (1 - p_M)/K; the division repairs rounding only
        let s = p_m + k as f64 * off;
        q.column_mut(j).unscale_mut(s);
    }
    PriorMatrix::new(q)
}

/// Cluster-adaptive prior: mass spread uniformly over the C_j reference
/// points within `epsilon` of the allocated marker.
pub fn build_cluster_prior(mu: &Configuration, x: &Configuration, omega: &Region, epsilon: f64) -> Result<PriorMatrix> {
    require_positive("epsilon", epsilon)?;
    let eps2 = epsilon * epsilon;
    assemble(mu, x, omega, |a| {
        let anchor = mu.point(a);
        mu.points()
            .iter()
            .map(|p| if (p - anchor).norm_squared() <= eps2 { 1.0 } else { 0.0 })
            .collect()
    })
}

/// Tunable inputs shared by every prior strategy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorParams {
    pub sigma_star2: f64,
    pub p_m: f64,
    pub cluster_radius: f64,
}

pub struct PriorInputs<'a> {
    pub mu: &'a Configuration,
    pub x: &'a Configuration,
    pub omega: &'a Region,
    pub params: PriorParams,
}

pub trait PriorStrategy: Named + Send + Sync {
    fn build(&self, inputs: &PriorInputs<'_>) -> Result<PriorMatrix>;
}

/// `gaussian`: distance-based marker prior, missing markers allowed.
pub struct GaussianDistance;

impl Named for GaussianDistance {
    fn name(&self) -> &'static str {
        "gaussian"
    }
}

impl PriorStrategy for GaussianDistance {
    fn build(&self, inputs: &PriorInputs<'_>) -> Result<PriorMatrix> {
        build_missing_prior(inputs.mu, inputs.x, inputs.omega, inputs.params.sigma_star2)
    }
}

/// `gross`: flat prior for marker-only configurations.
pub struct GrossFlat;

impl Named for GrossFlat {
    fn name(&self) -> &'static str {
        "gross"
    }
}

impl PriorStrategy for GrossFlat {
    fn build(&self, inputs: &PriorInputs<'_>) -> Result<PriorMatrix> {
        let (mu, x) = (inputs.mu, inputs.x);
        let k = mu.len();
        if x.len() != k || mu.located_markers() != k || x.located_markers() != k {
            return Err(Error::InvalidInput(
                "gross prior needs marker-only configurations with every marker located".into(),
            ));
        }
        let rows: Vec<usize> = (0..k)
            .map(|j| {
                let label = x.marker_of_point(j).expect("every point is a marker");
                mu.marker(label).expect("every marker is located")
            })
            .collect();
        gross_with_rows(k, inputs.params.p_m, &rows)
    }
}

/// `cluster`: uniform over reference points within the cluster radius.
pub struct ClusterAdaptive;

impl Named for ClusterAdaptive {
    fn name(&self) -> &'static str {
        "cluster"
    }
}

impl PriorStrategy for ClusterAdaptive {
    fn build(&self, inputs: &PriorInputs<'_>) -> Result<PriorMatrix> {
        build_cluster_prior(inputs.mu, inputs.x, inputs.omega, inputs.params.cluster_radius)
    }
}

pub type PriorRegistry = Registry<dyn PriorStrategy>;

/// Registry holding every built-in prior.
pub fn prior_registry() -> PriorRegistry {
    let mut r = PriorRegistry::new();
    r.register(Box::new(GaussianDistance))
        .register(Box::new(GrossFlat))
        .register(Box::new(ClusterAdaptive));
    r
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    fn omega100() -> Region {
        Region::new(vec![0.0, 0.0], vec![10.0, 10.0]).unwrap()
    }

    fn pts(xy: &[[f64; 2]]) -> Vec<DVector<f64>> {
        xy.iter().map(|p| DVector::from_column_slice(p)).collect()
    }

    #[test]
    fn isolated_marker_keeps_its_mass() {
        let mu = Configuration::with_leading_markers(2, pts(&[[0.0, 0.0], [50.0, 0.0], [0.0, 50.0]]), 1).unwrap();
        let x = mu.clone();
        let q = build_standard_prior(&mu, &x, &omega100(), 1.0).unwrap();
        assert!((q.get(0, 0) - 0.01).abs() < 1e-15);
        assert!((q.get(1, 0) - 0.99).abs() < 1e-12);
        assert!(q.get(2, 0) < 1e-300);
        // nonmarker columns are uniform over 3 + 1 rows
        for j in 1..3 {
            for i in 0..4 {
                assert!((q.get(i, j) - 0.25).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn illustrative_marker_column() {
        // Place candidates at distances that give relative weights
        // 0.89 : 0.09 : 0.01 : ~0 against the allocated marker.
        let s2 = 4.0;
        let dist = |w: f64| (-2.0 * s2 * (w / 0.89f64).ln()).sqrt();
        let d5 = dist(0.09);
        let d4 = dist(0.01);
        let mu = Configuration::with_leading_markers(
            2,
            pts(&[
                [0.0, 0.0],
                [0.0, 200.0],
                [200.0, 0.0],
                [d4, 0.0],
                [0.0, d5],
                [200.0, 200.0],
                [0.0, -40.0],
            ]),
            1,
        )
        .unwrap();
        let x = Configuration::with_leading_markers(2, pts(&[[1.0, 1.0], [5.0, 5.0]]), 1).unwrap();
        let q = build_standard_prior(&mu, &x, &omega100(), s2).unwrap();
        assert!((q.get(0, 0) - 0.01).abs() < 1e-15);
        assert!((q.get(1, 0) - 0.89).abs() < 1e-9);
        assert!((q.get(5, 0) - 0.09).abs() < 1e-9);
        assert!((q.get(4, 0) - 0.01).abs() < 1e-9);
        assert!(q.get(7, 0) < 0.005);
        // m = 6 nonmarkers plus one marker gives eight options per nonmarker column
        assert!((q.get(3, 1) - 1.0 / 8.0).abs() < 1e-15);
    }

    #[test]
    fn equidistant_candidates_tie() {
        let mu =
            Configuration::with_leading_markers(2, pts(&[[0.0, 0.0], [3.0, 0.0], [0.0, 3.0], [-3.0, 0.0]]), 1).unwrap();
        let q = build_standard_prior(&mu, &mu, &omega100(), 2.0).unwrap();
        assert_eq!(q.get(2, 0), q.get(3, 0));
        assert_eq!(q.get(3, 0), q.get(4, 0));
    }

    #[test]
    fn tiny_region_rejected() {
        let mu = Configuration::with_leading_markers(2, pts(&[[0.0, 0.0]]), 1).unwrap();
        let omega = Region::new(vec![0.0, 0.0], vec![0.5, 0.5]).unwrap();
        assert!(matches!(
            build_standard_prior(&mu, &mu, &omega, 1.0),
            Err(Error::InvalidRegion(_))
        ));
    }

    #[test]
    fn gross_prior_values() {
        let q = build_gross_prior(12, 0.99).unwrap();
        assert_eq!((q.rows(), q.cols()), (13, 12));
        for j in 0..12 {
            let mut s = 0.0;
            for i in 0..13 {
                let expect = if i == j + 1 { 0.99 } else { 0.01 / 12.0 };
                assert!((q.get(i, j) - expect).abs() < 1e-15);
                s += q.get(i, j);
            }
            // 0.99 + 12 * (0.01 / 12): the K off-diagonal rows include row 0
            assert!((s - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn gross_prior_uninformative_point() {
        let k = 7;
        let q = build_gross_prior(k, 1.0 / (k as f64 + 1.0)).unwrap();
        for v in q.matrix().iter() {
            assert!((v - 1.0 / 8.0).abs() < 1e-15);
        }
    }

    #[test]
    fn missing_markers_follow_case_rules() {
        // reference: 4 markers + 2 nonmarkers; observed lacks marker 3 and
        // has marker 4 only as a label on a point.
        let mu = Configuration::from_xy(
            &[
                [0.0, 0.0],
                [30.0, 0.0],
                [0.0, 30.0],
                [30.0, 30.0],
                [60.0, 60.0],
                [70.0, 10.0],
            ],
            vec![Some(0), Some(1), Some(2), None],
        )
        .unwrap();
        let x = Configuration::from_xy(
            &[[1.0, 0.0], [31.0, 0.0], [31.0, 31.0], [61.0, 60.0]],
            vec![Some(0), Some(1), None, Some(2)],
        )
        .unwrap();
        let omega = Region::new(vec![-10.0, -10.0], vec![90.0, 90.0]).unwrap();
        let q = build_missing_prior(&mu, &x, &omega, 4.0).unwrap();
        assert_eq!((q.rows(), q.cols()), (7, 4));
        // markers 1 and 2: anchored
        assert!((q.get(0, 0) - 1e-4).abs() < 1e-15);
        assert!(q.get(1, 0) > 0.99);
        assert!(q.get(2, 1) > 0.99);
        // marker 4 located only in x (point 3): uniform over K_mu + m + 1 = 7
        for i in 0..7 {
            assert!((q.get(i, 3) - 1.0 / 7.0).abs() < 1e-15);
            assert!((q.get(i, 2) - 1.0 / 7.0).abs() < 1e-15);
        }
    }

    #[test]
    fn missing_prior_equals_standard_when_complete() {
        let mu =
            Configuration::with_leading_markers(2, pts(&[[0.0, 0.0], [5.0, 1.0], [2.0, 7.0], [9.0, 9.0]]), 2).unwrap();
        let x = Configuration::with_leading_markers(2, pts(&[[0.5, 0.0], [5.0, 1.5], [3.0, 3.0]]), 2).unwrap();
        let a = build_standard_prior(&mu, &x, &omega100(), 3.0).unwrap();
        let b = build_missing_prior(&mu, &x, &omega100(), 3.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn nonmarker_uniform_count() {
        // K_mu = 10 markers, m = 90 nonmarkers -> 1/101
        let points: Vec<_> = (0..100)
            .map(|i| DVector::from_vec(vec![(i % 10) as f64, (i / 10) as f64]))
            .collect();
        let mu = Configuration::with_leading_markers(2, points.clone(), 10).unwrap();
        let x = Configuration::with_leading_markers(2, points, 10).unwrap();
        let omega = Region::new(vec![-5.0, -5.0], vec![15.0, 15.0]).unwrap();
        let q = build_missing_prior(&mu, &x, &omega, 1.0).unwrap();
        let count_oracle = 1.0 / (10.0 + 90.0 + 1.0);
        for j in 10..100 {
            for i in 0..101 {
                assert_eq!(q.get(i, j), count_oracle);
            }
        }
    }

    #[test]
    fn cluster_prior_isolated_and_triplet() {
        let mu = Configuration::with_leading_markers(
            2,
            pts(&[[0.0, 0.0], [50.0, 50.0], [1.0, 0.0], [0.0, 1.0], [90.0, 90.0]]),
            2,
        )
        .unwrap();
        let omega = Region::new(vec![-10.0, -10.0], vec![100.0, 100.0]).unwrap();
        let q = build_cluster_prior(&mu, &mu, &omega, 2.0).unwrap();
        // marker 1 has itself plus two neighbours within 2
        let third = (1.0 - q.get(0, 0)) / 3.0;
        for i in [1, 3, 4] {
            assert!((q.get(i, 0) - third).abs() < 1e-15);
        }
        assert_eq!(q.get(2, 0), 0.0);
        assert_eq!(q.get(5, 0), 0.0);
        // marker 2 is isolated
        assert!((q.get(2, 1) - (1.0 - q.get(0, 1))).abs() < 1e-15);
    }

    #[test]
    fn cluster_counts_match_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let eps = 5.0;
        let xy: Vec<[f64; 2]> = (0..40)
            .map(|_| [rng.random_range(0.0..30.0), rng.random_range(0.0..30.0)])
            .collect();
        let mu = Configuration::from_xy(&xy, (0..8).map(Some).collect()).unwrap();
        let omega = Region::new(vec![-1.0, -1.0], vec![31.0, 31.0]).unwrap();
        let q = build_cluster_prior(&mu, &mu, &omega, eps).unwrap();
        for j in 0..8 {
            let mut c = 0;
            for p in &xy {
                let dx = p[0] - xy[j][0];
                let dy = p[1] - xy[j][1];
                if (dx * dx + dy * dy).sqrt() <= eps {
                    c += 1;
                }
            }
            let nonzero = (1..=40).filter(|&i| q.get(i, j) > 0.0).count();
            assert_eq!(nonzero, c);
            assert!((q.get(j + 1, j) - (1.0 - q.get(0, j)) / c as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn registry_has_all_variants() {
        let r = prior_registry();
        assert_eq!(r.names().collect::<Vec<_>>(), vec!["cluster", "gaussian", "gross"]);
    }

    #[test]
    fn gross_strategy_follows_labels() {
        // marker-only pair with the observed points stored in reverse order
        let mu = Configuration::with_leading_markers(2, pts(&[[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]]), 3).unwrap();
        let x =
            Configuration::from_xy(&[[0.0, 10.0], [10.0, 0.0], [0.0, 0.0]], vec![Some(2), Some(1), Some(0)]).unwrap();
        let omega = omega100();
        let inputs = PriorInputs {
            mu: &mu,
            x: &x,
            omega: &omega,
            params: PriorParams {
                sigma_star2: 1.0,
                p_m: 0.9,
                cluster_radius: 1.0,
            },
        };
        let q = prior_registry().get("gross").unwrap().build(&inputs).unwrap();
        assert!((q.get(3, 0) - 0.9).abs() < 1e-15);
        assert!((q.get(2, 1) - 0.9).abs() < 1e-15);
        assert!((q.get(1, 2) - 0.9).abs() < 1e-15);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn config(max: usize) -> impl Strategy<Value = (Vec<[f64; 2]>, usize)> {
            prop::collection::vec((0.0..100.0f64, 0.0..100.0f64), 1..max).prop_flat_map(|v| {
                let n = v.len();
                (Just(v.into_iter().map(|(a, b)| [a, b]).collect::<Vec<_>>()), 1..=n)
            })
        }

        proptest! {
            #[test]
            fn priors_are_column_stochastic((xy, k) in config(25), s2 in 0.5..200.0f64, eps in 0.5..40.0f64) {
                let mu = Configuration::from_xy(&xy, (0..k).map(Some).collect()).unwrap();
                let omega = Region::new(vec![-5.0, -5.0], vec![105.0, 105.0]).unwrap();
                for q in [
                    build_standard_prior(&mu, &mu, &omega, s2).unwrap(),
                    build_cluster_prior(&mu, &mu, &omega, eps).unwrap(),
                ] {
                    for col in q.matrix().column_iter() {
                        prop_assert!((col.sum() - 1.0).abs() <= COLUMN_SUM_TOL);
                    }
                }
            }

            #[test]
            fn standard_prior_monotone_in_distance((xy, k) in config(25), s2 in 0.5..200.0f64) {
                let mu = Configuration::from_xy(&xy, (0..k).map(Some).collect()).unwrap();
                let omega = Region::new(vec![-5.0, -5.0], vec![105.0, 105.0]).unwrap();
                let q = build_standard_prior(&mu, &mu, &omega, s2).unwrap();
                for j in 0..k {
                    let anchor = mu.point(j);
                    let mut by_dist: Vec<(f64, f64)> = (0..xy.len())
                        .map(|i| ((mu.point(i) - anchor).norm(), q.get(i + 1, j)))
                        .collect();
                    by_dist.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
                    for w in by_dist.windows(2) {
                        prop_assert!(w[1].1 <= w[0].1 || w[1].0 == w[0].0);
                    }
                }
            }

            #[test]
            fn gross_prior_permutation_equivariant(
                ref_perm in Just((0..6usize).collect::<Vec<_>>()).prop_shuffle(),
                obs_perm in Just((0..6usize).collect::<Vec<_>>()).prop_shuffle(),
                p_m in 0.05..0.999f64,
            ) {
                let k = ref_perm.len();
                let base = build_gross_prior(k, p_m).unwrap();
                // marker j moves to reference point ref_perm[j] and observed point obs_perm[j]
                let mut rows = vec![0; k];
                for j in 0..k {
                    rows[obs_perm[j]] = ref_perm[j];
                }
                let permuted = gross_with_rows(k, p_m, &rows).unwrap();
                for j in 0..k {
                    prop_assert_eq!(permuted.get(0, obs_perm[j]), base.get(0, j));
                    for i in 0..k {
                        prop_assert_eq!(permuted.get(ref_perm[i] + 1, obs_perm[j]), base.get(i + 1, j));
                    }
                }
            }
        }
    }
}
