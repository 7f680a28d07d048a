//! Domain types shared by every stage: point configurations with a labeled
//! marker subset, the affine group action, the background region and the
//! conditional densities of an observed point given its match.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest |det A| accepted for a transform.
pub const MIN_ABS_DET: f64 = 1e-12;

/// An ordered point set in `dim` dimensions whose markers are addressed by
/// label slot. Slot `k` (0-based, marker label `k + 1`) holds the index of
/// the point carrying that label, or `None` when the marker was not located.
#[derive(Debug, Clone, PartialEq)]
pub struct Configuration {
    dim: usize,
    points: Vec<DVector<f64>>,
    marker_slots: Vec<Option<usize>>,
}

impl Configuration {
    pub fn new(dim: usize, points: Vec<DVector<f64>>, marker_slots: Vec<Option<usize>>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidInput("dimension must be positive".into()));
        }
        if let Some(bad) = points.iter().position(|p| p.len() != dim) {
            return Err(Error::InvalidInput(format!(
                "point {bad} has dimension {} (expected {dim})",
                points[bad].len()
            )));
        }
        if points.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidInput("non-finite coordinate".into()));
        }
        let mut seen = vec![false; points.len()];
        for (k, slot) in marker_slots.iter().enumerate() {
            if let Some(idx) = *slot {
                if idx >= points.len() {
                    return Err(Error::InvalidInput(format!(
                        "marker {} refers to point {idx}, only {} points",
                        k + 1,
                        points.len()
                    )));
                }
                if seen[idx] {
                    return Err(Error::InvalidInput(format!(
                        "point {idx} carries more than one marker label"
                    )));
                }
                seen[idx] = true;
            }
        }
        Ok(Self {
            dim,
            points,
            marker_slots,
        })
    }

    /// Build from 2-D coordinate pairs.
    pub fn from_xy(points: &[[f64; 2]], marker_slots: Vec<Option<usize>>) -> Result<Self> {
        let pts = points.iter().map(|p| DVector::from_column_slice(p)).collect();
        Self::new(2, pts, marker_slots)
    }

    /// A configuration in which the first `k` points are markers `1..=k`.
    pub fn with_leading_markers(dim: usize, points: Vec<DVector<f64>>, k: usize) -> Result<Self> {
        if k > points.len() {
            return Err(Error::InvalidInput(format!(
                "{k} markers requested from {} points",
                points.len()
            )));
        }
        Self::new(dim, points, (0..k).map(Some).collect())
    }

    pub fn unlabeled(dim: usize, points: Vec<DVector<f64>>) -> Result<Self> {
        Self::new(dim, points, Vec::new())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[DVector<f64>] {
        &self.points
    }

    pub fn point(&self, idx: usize) -> &DVector<f64> {
        &self.points[idx]
    }

    /// Total number of marker labels K, located or not.
    pub fn marker_count(&self) -> usize {
        self.marker_slots.len()
    }

    pub fn marker_slots(&self) -> &[Option<usize>] {
        &self.marker_slots
    }

    /// Point index of marker `k` (0-based slot).
    pub fn marker(&self, k: usize) -> Option<usize> {
        self.marker_slots.get(k).copied().flatten()
    }

    /// Number of located markers (K_mu or K_x).
    pub fn located_markers(&self) -> usize {
        self.marker_slots.iter().filter(|s| s.is_some()).count()
    }

    /// Number of points that carry no marker label.
    pub fn nonmarker_count(&self) -> usize {
        self.len() - self.located_markers()
    }

    /// Marker slot carried by point `idx`, if any.
    pub fn marker_of_point(&self, idx: usize) -> Option<usize> {
        self.marker_slots.iter().position(|s| *s == Some(idx))
    }

    /// Same points, marker label table extended with absent slots up to `k`.
    pub fn with_marker_count(mut self, k: usize) -> Result<Self> {
        if k < self.marker_slots.len() {
            return Err(Error::InvalidInput(format!(
                "cannot shrink marker table from {} to {k}",
                self.marker_slots.len()
            )));
        }
        self.marker_slots.resize(k, None);
        Ok(self)
    }

    /// Same points with the given marker slots relabeled as absent.
    pub fn without_markers(&self, slots: &[usize]) -> Self {
        let mut out = self.clone();
        for &k in slots {
            if let Some(s) = out.marker_slots.get_mut(k) {
                *s = None;
            }
        }
        out
    }

    /// Same points with the marker table replaced.
    pub fn relabeled(&self, marker_slots: Vec<Option<usize>>) -> Result<Self> {
        Self::new(self.dim, self.points.clone(), marker_slots)
    }
}

/// The affine map `p -> A p + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TransformRepr", into = "TransformRepr")]
pub struct AffineTransform {
    a: DMatrix<f64>,
    b: DVector<f64>,
}

impl AffineTransform {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if !a.is_square() || a.nrows() != b.len() {
            return Err(Error::InvalidTransform(format!(
                "matrix is {}x{}, translation has length {}",
                a.nrows(),
                a.ncols(),
                b.len()
            )));
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidTransform("non-finite entry".into()));
        }
        let det = a.determinant();
        if det.abs() <= MIN_ABS_DET {
            return Err(Error::InvalidTransform(format!("matrix is singular (det = {det:e})")));
        }
        Ok(Self { a, b })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            a: DMatrix::identity(dim, dim),
            b: DVector::zeros(dim),
        }
    }

    pub fn translation(b: DVector<f64>) -> Self {
        Self {
            a: DMatrix::identity(b.len(), b.len()),
            b,
        }
    }

    /// 2-D transform from row-major `[[a11, a12], [a21, a22]]` and `(b1, b2)`.
    pub fn from_2d(a: [[f64; 2]; 2], b: [f64; 2]) -> Result<Self> {
        Self::new(
            DMatrix::from_row_slice(2, 2, &[a[0][0], a[0][1], a[1][0], a[1][1]]),
            DVector::from_column_slice(&b),
        )
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn translation_vector(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn apply_point(&self, p: &DVector<f64>) -> DVector<f64> {
        &self.a * p + &self.b
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self
            .a
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::InvalidTransform("matrix is not invertible".into()))?;
        let b = -(&inv * &self.b);
        Self::new(inv, b)
    }

    /// Largest absolute entrywise difference to `other` over both A and b.
    pub fn max_abs_diff(&self, other: &AffineTransform) -> (f64, f64) {
        let da = (&self.a - &other.a).amax();
        let db = (&self.b - &other.b).amax();
        (da, db)
    }
}

#[derive(Serialize, Deserialize)]
struct TransformRepr {
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
}

impl From<AffineTransform> for TransformRepr {
    fn from(t: AffineTransform) -> Self {
        let a = (0..t.a.nrows()).map(|r| t.a.row(r).iter().copied().collect()).collect();
        Self {
            a,
            b: t.b.iter().copied().collect(),
        }
    }
}

impl TryFrom<TransformRepr> for AffineTransform {
    type Error = Error;

    fn try_from(r: TransformRepr) -> Result<Self> {
        let d = r.b.len();
        if r.a.len() != d || r.a.iter().any(|row| row.len() != d) {
            return Err(Error::InvalidTransform(
                "matrix shape does not match translation".into(),
            ));
        }
        let flat: Vec<f64> = r.a.into_iter().flatten().collect();
        Self::new(DMatrix::from_row_slice(d, d, &flat), DVector::from_vec(r.b))
    }
}

/// Map every point of `c` through `t`. Marker labels are carried over unchanged.
pub fn apply_transform(t: &AffineTransform, c: &Configuration) -> Result<Configuration> {
    if t.dim() != c.dim() {
        return Err(Error::ShapeMismatch(format!(
            "transform is {}-D, configuration is {}-D",
            t.dim(),
            c.dim()
        )));
    }
    let points = c.points().iter().map(|p| t.apply_point(p)).collect();
    Ok(Configuration {
        dim: c.dim,
        points,
        marker_slots: c.marker_slots.clone(),
    })
}

/// Axis-aligned box that stands in for the background region Omega.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl Region {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::InvalidRegion("bounds must have equal, positive length".into()));
        }
        if lower
            .iter()
            .zip(&upper)
            .any(|(l, u)| !(u > l) || !l.is_finite() || !u.is_finite())
        {
            return Err(Error::InvalidRegion(
                "every side must have positive finite extent".into(),
            ));
        }
        Ok(Self { lower, upper })
    }

    /// Bounding box of `c` grown by `margin` on every side.
    pub fn bounding(c: &Configuration, margin: f64) -> Result<Self> {
        if c.is_empty() {
            return Err(Error::InvalidRegion("no points to bound".into()));
        }
        if !(margin >= 0.0) {
            return Err(Error::InvalidRegion(format!("margin {margin} is negative")));
        }
        let d = c.dim();
        let mut lower = vec![f64::INFINITY; d];
        let mut upper = vec![f64::NEG_INFINITY; d];
        for p in c.points() {
            for k in 0..d {
                lower[k] = lower[k].min(p[k]);
                upper[k] = upper[k].max(p[k]);
            }
        }
        for k in 0..d {
            lower[k] -= margin;
            upper[k] += margin;
        }
        Self::new(lower, upper)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    /// |Omega|.
    pub fn area(&self) -> f64 {
        self.lower.iter().zip(&self.upper).map(|(l, u)| u - l).product()
    }

    pub fn contains(&self, p: &DVector<f64>) -> bool {
        p.len() == self.dim()
            && p.iter()
                .enumerate()
                .all(|(k, v)| *v >= self.lower[k] && *v <= self.upper[k])
    }
}

/// Hard or soft assignment of each observed point to a reference row.
///
/// `assignment[j]` is the row matched to observed point `j`: 0 means
/// unmatched, `i >= 1` means reference point `i - 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchMatrix {
    rows: usize,
    assignment: Vec<usize>,
}

impl MatchMatrix {
    /// `rows` counts the unmatched row, i.e. `rows = K + m + 1`.
    pub fn new(rows: usize, assignment: Vec<usize>) -> Result<Self> {
        if rows == 0 {
            return Err(Error::InvalidInput("match matrix needs an unmatched row".into()));
        }
        if let Some(j) = assignment.iter().position(|&i| i >= rows) {
            return Err(Error::InvalidInput(format!(
                "column {j} assigned to row {} of {rows}",
                assignment[j]
            )));
        }
        Ok(Self { rows, assignment })
    }

    pub fn unmatched(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            assignment: vec![0; cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.assignment.len()
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn row_of(&self, j: usize) -> usize {
        self.assignment[j]
    }

    /// M_ij.
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.assignment[j] == i
    }

    /// True when no reference row i >= 1 is used twice.
    pub fn is_one_to_one(&self) -> bool {
        let mut used = vec![false; self.rows];
        for &i in &self.assignment {
            if i > 0 {
                if used[i] {
                    return false;
                }
                used[i] = true;
            }
        }
        true
    }

    /// `(observed index, reference index)` for every matched column.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &i)| i > 0)
            .map(|(j, &i)| (j, i - 1))
    }

    pub fn matched_count(&self) -> usize {
        self.assignment.iter().filter(|&&i| i > 0).count()
    }
}

/// Parameters of the error model and of the EM iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Error variance sigma^2 (pixels^2).
    pub sigma2: f64,
    /// Marker-prior variance sigma_*^2 (pixels^2).
    pub sigma_star2: f64,
    /// Probability that an allocated marker pair truly corresponds.
    pub p_m: f64,
    /// Convergence is declared at mean squared posterior change <= 10^-l.
    pub convergence_exponent: u32,
    pub max_iterations: usize,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            sigma2: 1.0,
            sigma_star2: 1.0,
            p_m: 0.99,
            convergence_exponent: 8,
            max_iterations: 500,
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "sigma2 = {} must be positive",
                self.sigma2
            )));
        }
        if !(self.sigma_star2 > 0.0 && self.sigma_star2.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "sigma_star2 = {} must be positive",
                self.sigma_star2
            )));
        }
        if !(self.p_m > 0.0 && self.p_m < 1.0) {
            return Err(Error::InvalidInput(format!("p_m = {} must lie in (0, 1)", self.p_m)));
        }
        if self.convergence_exponent < 1 {
            return Err(Error::InvalidInput("convergence exponent must be >= 1".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidInput("max_iterations must be >= 1".into()));
        }
        Ok(())
    }

    pub fn convergence_tolerance(&self) -> f64 {
        10f64.powi(-(self.convergence_exponent as i32))
    }
}

/// What an observed point may be matched to.
#[derive(Debug, Clone, Copy)]
pub enum Candidate<'a> {
    /// The unmatched row: uniform over Omega.
    Background,
    /// A reference point already mapped through the current transform.
    Point(&'a DVector<f64>),
}

/// log p(x_j | M_ij = 1).
pub fn log_match_density(x_j: &DVector<f64>, candidate: Candidate<'_>, sigma2: f64, omega: &Region) -> f64 {
    match candidate {
        Candidate::Background => -omega.area().ln(),
        Candidate::Point(mu) => gaussian_log_density((x_j - mu).norm_squared(), sigma2, x_j.len()),
    }
}

/// p(x_j | M_ij = 1): isotropic Gaussian around the mapped reference point,
/// or `1 / |Omega|` for the unmatched row.
pub fn match_density(x_j: &DVector<f64>, candidate: Candidate<'_>, sigma2: f64, omega: &Region) -> f64 {
    log_match_density(x_j, candidate, sigma2, omega).exp()
}

/// Log of the isotropic normal density at squared residual `r2`.
pub fn gaussian_log_density(r2: f64, sigma2: f64, dim: usize) -> f64 {
    -0.5 * dim as f64 * (2.0 * std::f64::consts::PI * sigma2).ln() - r2 / (2.0 * sigma2)
}

/// Root mean squared Euclidean distance over point pairs.
pub fn rmsd<'a, I>(pairs: I) -> Result<f64>
where
    I: IntoIterator<Item = (&'a DVector<f64>, &'a DVector<f64>)>,
{
    let mut n = 0usize;
    let mut sum = 0.0;
    for (p, q) in pairs {
        sum += (p - q).norm_squared();
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidInput("rmsd of an empty pair list".into()));
    }
    Ok((sum / n as f64).sqrt())
}
