//! Turning posterior probabilities into a hard (one-to-one) or soft
//! (many-to-one) match matrix that maximises `sum_ij M_ij log P_ji`.
//!
//! Hard matching is an assignment problem: each observed point takes exactly
//! one option, each reference point is taken at most once, and the unmatched
//! option is unlimited. Giving every observed point a private copy of the
//! unmatched option and padding with zero-cost filler rows turns this into a
//! square linear assignment, solved exactly by the Hungarian method. Ties
//! are then resolved to the lexicographically smallest assignment vector by
//! walking the tight-edge subgraph of the optimal dual.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::em::PosteriorMatrix;
use crate::error::{Error, Result};
use crate::model::MatchMatrix;
use crate::registry::{Named, Registry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchingMode {
    Hard,
    Soft,
}

impl MatchingMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            MatchingMode::Hard => "hard",
            MatchingMode::Soft => "soft",
        }
    }
}

impl fmt::Display for MatchingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MatchingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(MatchingMode::Hard),
            "soft" => Ok(MatchingMode::Soft),
            other => Err(Error::Config(format!(
                "unknown matching mode '{other}' (expected hard or soft)"
            ))),
        }
    }
}

/// `log_post[(j, i)] = log p_ji`; `-inf` marks an impossible match.
#[derive(Debug, Clone, PartialEq)]
pub struct HardeningProblem {
    pub log_post: DMatrix<f64>,
    pub mode: MatchingMode,
}

impl HardeningProblem {
    pub fn new(log_post: DMatrix<f64>, mode: MatchingMode) -> Result<Self> {
        if log_post.ncols() == 0 {
            return Err(Error::InvalidInput("need at least the unmatched column".into()));
        }
        if log_post.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::InvalidInput("log posterior must be finite or -inf".into()));
        }
        Ok(Self { log_post, mode })
    }

    pub fn from_posteriors(p: &PosteriorMatrix, mode: MatchingMode) -> Result<Self> {
        Self::new(p.matrix().map(f64::ln), mode)
    }

    pub fn observed(&self) -> usize {
        self.log_post.nrows()
    }

    /// Reference rows including the unmatched row.
    pub fn rows(&self) -> usize {
        self.log_post.ncols()
    }

    fn check_feasible_rows(&self) -> Result<()> {
        for j in 0..self.observed() {
            if self.log_post.row(j).iter().all(|v| *v == f64::NEG_INFINITY) {
                return Err(Error::Infeasible(format!("observed point {j} has no possible match")));
            }
        }
        Ok(())
    }
}

pub trait Matcher: Named + Send + Sync {
    fn solve(&self, log_post: &DMatrix<f64>) -> Result<MatchMatrix>;
}

/// One-to-one matching.
pub struct HardMatcher;

impl Named for HardMatcher {
    fn name(&self) -> &'static str {
        "hard"
    }
}

impl Matcher for HardMatcher {
    fn solve(&self, log_post: &DMatrix<f64>) -> Result<MatchMatrix> {
        let prob = HardeningProblem::new(log_post.clone(), MatchingMode::Hard)?;
        prob.check_feasible_rows()?;
        let assignment = solve_hard(&prob.log_post)?;
        MatchMatrix::new(prob.rows(), assignment)
    }
}

/// Many-to-one matching: each observed point independently takes its most
/// probable row, lowest index on ties.
pub struct SoftMatcher;

impl Named for SoftMatcher {
    fn name(&self) -> &'static str {
        "soft"
    }
}

impl Matcher for SoftMatcher {
    fn solve(&self, log_post: &DMatrix<f64>) -> Result<MatchMatrix> {
        let prob = HardeningProblem::new(log_post.clone(), MatchingMode::Soft)?;
        prob.check_feasible_rows()?;
        let assignment = (0..prob.observed())
            .map(|j| {
                let row = prob.log_post.row(j);
                let mut best = 0;
                for i in 1..row.len() {
                    if row[i] > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect();
        MatchMatrix::new(prob.rows(), assignment)
    }
}

pub type MatcherRegistry = Registry<dyn Matcher>;

pub fn matcher_registry() -> MatcherRegistry {
    let mut r = MatcherRegistry::new();
    r.register(Box::new(HardMatcher)).register(Box::new(SoftMatcher));
    r
}

/// Optimal match matrix for the problem's mode.
pub fn harden(prob: &HardeningProblem) -> Result<MatchMatrix> {
    match prob.mode {
        MatchingMode::Hard => HardMatcher.solve(&prob.log_post),
        MatchingMode::Soft => SoftMatcher.solve(&prob.log_post),
    }
}

/// `sum_ij M_ij log P_ji`, summed over observed points in index order.
pub fn matching_objective(m: &MatchMatrix, prob: &HardeningProblem) -> Result<f64> {
    if m.cols() != prob.observed() || m.rows() != prob.rows() {
        return Err(Error::ShapeMismatch(format!(
            "match matrix is {}x{}, problem is {}x{}",
            m.rows(),
            m.cols(),
            prob.rows(),
            prob.observed()
        )));
    }
    if prob.mode == MatchingMode::Hard && !m.is_one_to_one() {
        return Err(Error::Infeasible("match matrix reuses a reference point".into()));
    }
    Ok(m.assignment()
        .iter()
        .enumerate()
        .map(|(j, &i)| prob.log_post[(j, i)])
        .sum())
}

/// Square assignment instance built from the log posteriors.
///
/// Rows `0..n` are observed points, rows `n..n+r` are filler. Columns
/// `0..r` are reference points (row `i = c + 1` of the posterior), columns
/// `r..r+n` are the private unmatched options of each observed point.
struct Expanded {
    n: usize,
    r: usize,
    cost: Vec<f64>,
}

impl Expanded {
    fn new(log_post: &DMatrix<f64>) -> Self {
        let n = log_post.nrows();
        let r = log_post.ncols() - 1;
        let size = n + r;
        let mut cost = vec![f64::INFINITY; size * size];
        for j in 0..n {
            for c in 0..r {
                cost[j * size + c] = -log_post[(j, c + 1)];
            }
            cost[j * size + r + j] = -log_post[(j, 0)];
        }
        for row in n..size {
            for c in 0..size {
                cost[row * size + c] = 0.0;
            }
        }
        Self { n, r, cost }
    }

    fn size(&self) -> usize {
        self.n + self.r
    }

    fn cost(&self, row: usize, col: usize) -> f64 {
        self.cost[row * self.size() + col]
    }

    /// Posterior row index represented by an expanded column.
    fn posterior_row(&self, col: usize) -> usize {
        if col < self.r {
            col + 1
        } else {
            0
        }
    }

    /// Expanded columns of observed point `j` in increasing posterior-row order.
    fn columns_in_order(&self, j: usize) -> impl Iterator<Item = usize> + '_ {
        std::iter::once(self.r + j).chain(0..self.r)
    }
}

struct Solution {
    col_of_row: Vec<usize>,
    row_of_col: Vec<usize>,
    u: Vec<f64>,
    v: Vec<f64>,
}

/// Hungarian method (shortest augmenting paths with potentials) on a square
/// cost matrix; `+inf` entries are forbidden.
fn hungarian(e: &Expanded) -> Result<Solution> {
    let size = e.size();
    // 1-based with a virtual column 0.
    let mut u = vec![0.0; size + 1];
    let mut v = vec![0.0; size + 1];
    let mut p = vec![0usize; size + 1];
    let mut way = vec![0usize; size + 1];
    for row in 1..=size {
        p[0] = row;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; size + 1];
        let mut used = vec![false; size + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=size {
                if used[j] {
                    continue;
                }
                let c = e.cost(i0 - 1, j - 1);
                if c.is_finite() {
                    let cur = c - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            if !delta.is_finite() {
                return Err(Error::Infeasible(
                    "no one-to-one matching exists with finite log-likelihood".into(),
                ));
            }
            for j in 0..=size {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0; size];
    let mut row_of_col = vec![0; size];
    for j in 1..=size {
        col_of_row[p[j] - 1] = j - 1;
        row_of_col[j - 1] = p[j] - 1;
    }
    Ok(Solution {
        col_of_row,
        row_of_col,
        u: u[1..].to_vec(),
        v: v[1..].to_vec(),
    })
}

fn solve_hard(log_post: &DMatrix<f64>) -> Result<Vec<usize>> {
    let e = Expanded::new(log_post);
    let size = e.size();
    if e.n == 0 {
        return Ok(Vec::new());
    }
    let mut sol = hungarian(&e)?;

    let scale = e
        .cost
        .iter()
        .filter(|c| c.is_finite())
        .fold(1.0f64, |m, c| m.max(c.abs()));
    let tol = 1e-10 * scale * size as f64;
    let u = sol.u.clone();
    let v = sol.v.clone();
    let tight = |row: usize, col: usize| {
        let c = e.cost(row, col);
        c.is_finite() && (c - u[row] - v[col]).abs() <= tol
    };

    let mut locked = vec![false; size];
    for j in 0..e.n {
        let current = sol.col_of_row[j];
        for col in e.columns_in_order(j) {
            if col == current {
                break;
            }
            if !tight(j, col) {
                continue;
            }
            let owner = sol.row_of_col[col];
            if locked[owner] {
                continue;
            }
            if let Some(path) = alternating_path(&e, &sol, &locked, j, owner, current, &tight) {
                // j takes col; along the path each row takes the next column.
                sol.col_of_row[j] = col;
                sol.row_of_col[col] = j;
                for (row, c) in path {
                    sol.col_of_row[row] = c;
                    sol.row_of_col[c] = row;
                }
                break;
            }
        }
        locked[j] = true;
    }

    Ok((0..e.n).map(|j| e.posterior_row(sol.col_of_row[j])).collect())
}

/// Breadth-first search for an alternating path in the tight subgraph that
/// rehomes `start` (displaced from its column) and ends by taking `target`
/// (the column released by `blocked`). Returns the new (row, column) pairs.
fn alternating_path<F>(
    e: &Expanded,
    sol: &Solution,
    locked: &[bool],
    blocked: usize,
    start: usize,
    target: usize,
    tight: &F,
) -> Option<Vec<(usize, usize)>>
where
    F: Fn(usize, usize) -> bool,
{
    let size = e.size();
    let displaced_col = sol.col_of_row[start];
    // parent[col] = row that would move into col
    let mut parent: Vec<Option<usize>> = vec![None; size];
    let mut seen_row = vec![false; size];
    let mut queue = std::collections::VecDeque::new();
    seen_row[start] = true;
    queue.push_back(start);
    while let Some(row) = queue.pop_front() {
        for col in 0..size {
            if parent[col].is_some() || col == displaced_col || !tight(row, col) {
                continue;
            }
            if col == target {
                parent[col] = Some(row);
                let mut path = Vec::new();
                let mut c = col;
                loop {
                    let r = parent[c].expect("path is connected");
                    path.push((r, c));
                    if r == start {
                        break;
                    }
                    c = sol.col_of_row[r];
                }
                return Some(path);
            }
            let owner = sol.row_of_col[col];
            if owner == blocked || locked[owner] || seen_row[owner] {
                continue;
            }
            parent[col] = Some(row);
            seen_row[owner] = true;
            queue.push_back(owner);
        }
    }
    None
}
