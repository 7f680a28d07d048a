//! Synthetic spot-table pairs with known ground truth.
//!
//! Reference spots are scattered over a `width x height` field with a minimum
//! spacing, the first `n_markers` are labelled, and the observed image is the
//! warped reference plus Gaussian noise. On top of that the generator can add
//! spurious spots to both images, drop marker labels independently per image,
//! and move observed marker labels onto the wrong spot.

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::spotfile::SpotTable;
use crate::model::{AffineTransform, Configuration};
use crate::qc::MissingCase;

const MAX_DRAWS_PER_POINT: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub seed: u64,
    pub n_points: usize,
    pub n_markers: usize,
    pub width: f64,
    pub height: f64,
    pub min_separation: f64,
    pub warp: AffineTransform,
    pub noise_sd: f64,
    /// Extra spots without a counterpart, per image, as a fraction of `n_points`.
    pub spurious_rate: f64,
    /// Chance that a marker label is dropped, applied to each image separately.
    pub missing_rate: f64,
    /// Observed marker labels moved to another spot.
    pub corrupt_markers: usize,
    /// Minimum distance between a corrupted label's true and recorded spot.
    pub corrupt_displacement: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            seed: 0,
            n_points: 100,
            n_markers: 12,
            width: 280.0,
            height: 220.0,
            min_separation: 12.0,
            warp: AffineTransform::from_2d([[0.98, -0.047], [0.002, 1.006]], [-1.72, 10.78]).expect("nonsingular"),
            noise_sd: 2.0,
            spurious_rate: 0.0,
            missing_rate: 0.0,
            corrupt_markers: 0,
            corrupt_displacement: 40.0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("spurious_rate", self.spurious_rate),
            ("missing_rate", self.missing_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::InvalidInput(format!("{name} = {r} must lie in [0, 1]")));
            }
        }
        if self.n_markers > self.n_points {
            return Err(Error::InvalidInput("more markers than points".into()));
        }
        if !(self.width > 0.0 && self.height > 0.0) {
            return Err(Error::InvalidInput("field must have positive size".into()));
        }
        if !(self.noise_sd >= 0.0) || !(self.min_separation >= 0.0) || !(self.corrupt_displacement >= 0.0) {
            return Err(Error::InvalidInput("distances must be non-negative".into()));
        }
        if self.corrupt_markers > self.n_markers {
            return Err(Error::InvalidInput("cannot corrupt more markers than exist".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruePair {
    pub x_spot: String,
    /// `None` for a spurious observed spot.
    pub mu_spot: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub warp: AffineTransform,
    pub pairs: Vec<TruePair>,
    /// Case of each marker label 1..=n_markers after label dropping.
    pub cases: Vec<MissingCase>,
    /// Labels whose observed copy was moved to the wrong spot.
    pub corrupted: Vec<usize>,
}

impl GroundTruth {
    pub fn true_partner(&self, x_spot: &str) -> Option<&str> {
        self.pairs
            .iter()
            .find(|p| p.x_spot == x_spot)
            .and_then(|p| p.mu_spot.as_deref())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticPair {
    pub mu: SpotTable,
    pub x: SpotTable,
    pub truth: GroundTruth,
}

fn far_enough(p: &DVector<f64>, others: &[DVector<f64>], sep2: f64) -> bool {
    others.iter().all(|q| (p - q).norm_squared() >= sep2)
}

/// Rejection sampling over `[lo, hi]`, keeping `sep` from everything in `taken`.
fn scatter(
    rng: &mut ChaCha8Rng,
    count: usize,
    lo: [f64; 2],
    hi: [f64; 2],
    sep: f64,
    taken: &mut Vec<DVector<f64>>,
) -> Result<Vec<DVector<f64>>> {
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..MAX_DRAWS_PER_POINT {
            let p = DVector::from_vec(vec![rng.random_range(lo[0]..hi[0]), rng.random_range(lo[1]..hi[1])]);
            if far_enough(&p, taken, sep * sep) {
                taken.push(p.clone());
                out.push(p);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::InvalidInput(format!(
                "cannot place {count} spots {sep} apart in the field"
            )));
        }
    }
    Ok(out)
}

pub fn generate(params: &SynthParams) -> Result<SyntheticPair> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let n = params.n_points;
    let k = params.n_markers;
    let n_spur = (params.spurious_rate * n as f64).round() as usize;

    let mut taken = Vec::new();
    let field = [params.width, params.height];
    let true_mu = scatter(&mut rng, n, [0.0, 0.0], field, params.min_separation, &mut taken)?;
    let spur_mu = scatter(&mut rng, n_spur, [0.0, 0.0], field, params.min_separation, &mut taken)?;

    let noise = Normal::new(0.0, params.noise_sd).expect("sd checked");
    let mut true_x: Vec<DVector<f64>> = true_mu
        .iter()
        .map(|p| {
            let e = DVector::from_vec(vec![noise.sample(&mut rng), noise.sample(&mut rng)]);
            params.warp.apply_point(p) + e
        })
        .collect();
    // spurious observed spots keep clear of every mapped reference spot too,
    // so none of them has a plausible counterpart
    let mut x_taken = true_x.clone();
    x_taken.extend(spur_mu.iter().map(|p| params.warp.apply_point(p)));
    let (xlo, xhi) = warped_box(&params.warp, field);
    let spur_x = scatter(&mut rng, n_spur, xlo, xhi, params.min_separation, &mut x_taken)?;

    // label drops, decided per image
    let mut mu_has = vec![true; k];
    let mut x_has = vec![true; k];
    for s in 0..k {
        mu_has[s] = !rng.random_bool(params.missing_rate);
        x_has[s] = !rng.random_bool(params.missing_rate);
    }
    let cases: Vec<MissingCase> = (0..k)
        .map(|s| match (mu_has[s], x_has[s]) {
            (true, true) => MissingCase::A,
            (true, false) => MissingCase::B,
            (false, true) => MissingCase::C,
            (false, false) => MissingCase::D,
        })
        .collect();

    // observed index (before shuffling) carrying each marker label
    let mut x_marker_at: Vec<Option<usize>> = (0..k).map(|s| x_has[s].then_some(s)).collect();
    let mut candidates: Vec<usize> = (0..k).filter(|&s| x_has[s]).collect();
    candidates.shuffle(&mut rng);
    let mut corrupted = Vec::new();
    let all_x: Vec<DVector<f64>> = true_x.iter().chain(&spur_x).cloned().collect();
    for s in candidates.into_iter().take(params.corrupt_markers) {
        let home = &true_x[s];
        let used: Vec<usize> = x_marker_at.iter().flatten().copied().collect();
        let targets: Vec<usize> = (k..all_x.len())
            .filter(|j| !used.contains(j) && (&all_x[*j] - home).norm() >= params.corrupt_displacement)
            .collect();
        let Some(&t) = targets.get(rng.random_range(0..targets.len().max(1))) else {
            return Err(Error::InvalidInput(
                "no spot far enough away to corrupt a marker".into(),
            ));
        };
        x_marker_at[s] = Some(t);
        corrupted.push(s + 1);
    }
    corrupted.sort_unstable();

    // reference image: true spots then spurious, in random order
    let mut mu_order: Vec<usize> = (0..n + n_spur).collect();
    mu_order.shuffle(&mut rng);
    let mu_all: Vec<DVector<f64>> = true_mu.iter().chain(&spur_mu).cloned().collect();
    let mut mu_pos = vec![0; n + n_spur];
    for (row, &src) in mu_order.iter().enumerate() {
        mu_pos[src] = row;
    }
    let mu_slots: Vec<Option<usize>> = (0..k).map(|s| mu_has[s].then(|| mu_pos[s])).collect();
    let mu_ids: Vec<String> = (0..n + n_spur).map(|r| format!("m{:04}", r + 1)).collect();
    let mu_cfg = Configuration::new(2, mu_order.iter().map(|&i| mu_all[i].clone()).collect(), mu_slots)?;

    let mut x_order: Vec<usize> = (0..n + n_spur).collect();
    x_order.shuffle(&mut rng);
    let mut x_pos = vec![0; n + n_spur];
    for (row, &src) in x_order.iter().enumerate() {
        x_pos[src] = row;
    }
    let x_slots: Vec<Option<usize>> = x_marker_at.iter().map(|o| o.map(|j| x_pos[j])).collect();
    let x_ids: Vec<String> = (0..n + n_spur).map(|r| format!("s{:04}", r + 1)).collect();
    true_x.extend(spur_x);
    let x_cfg = Configuration::new(2, x_order.iter().map(|&j| true_x[j].clone()).collect(), x_slots)?;

    let pairs = x_order
        .iter()
        .enumerate()
        .map(|(row, &src)| TruePair {
            x_spot: x_ids[row].clone(),
            mu_spot: (src < n).then(|| mu_ids[mu_pos[src]].clone()),
        })
        .collect();

    Ok(SyntheticPair {
        mu: SpotTable::new(mu_ids, mu_cfg)?,
        x: SpotTable::new(x_ids, x_cfg)?,
        truth: GroundTruth {
            warp: params.warp.clone(),
            pairs,
            cases,
            corrupted,
        },
    })
}

fn warped_box(t: &AffineTransform, field: [f64; 2]) -> ([f64; 2], [f64; 2]) {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for (cx, cy) in [(0.0, 0.0), (field[0], 0.0), (0.0, field[1]), (field[0], field[1])] {
        let p = t.apply_point(&DVector::from_vec(vec![cx, cy]));
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    (lo, hi)
}
