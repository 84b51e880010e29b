//! Greedy D-optimal choice of which paths to measure.
//!
//! Working in units of `σ²`, the prediction error covariance of the
//! unmeasured paths has log-determinant
//!
//! ```text
//! f(S) = |S̄| log σ² + log det(I + Φ) − log det(I + Φ_SS)
//! ```
//!
//! with `Φ = (b² M(t−1) + C_η + C_ν)/σ²`. Minimizing `f` is the same as
//! maximizing `log det(I + Φ_SS)`, which is monotone submodular, so the
//! greedy choice is within `1 − 1/e` of optimal under a cardinality budget
//! and within `1/2` under per-node caps.
//!
//! The greedy loop keeps `V = (Φ_SS + I)⁻¹` up to date with a rank-one
//! (or, for whole nodes, block) extension per step. The final `V` is the
//! inverse the Kalman gain needs for the same selection.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::{DMatrix, DVector};

use crate::covmodel::ModelParams;
use crate::error::{Error, Result};
use crate::linalg::{
    block_extend_inverse, check_psd, complement, principal, rank_one_extend_inverse, submatrix, symmetrize,
    SymmetricPsd,
};

/// Smallest Schur scalar accepted during a greedy step.
pub const MIN_SCHUR: f64 = 1e-12;

const PHI_PSD_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub enum Constraint {
    /// Exactly `S` paths.
    Cardinality(usize),
    /// `nodes` whole origin groups; every path of a chosen group is measured.
    NodeBudget { nodes: usize, groups: Vec<Vec<usize>> },
    /// At most `caps[v]` paths from `groups[v]`. Paths outside every group
    /// are never chosen.
    PartitionMatroid { groups: Vec<Vec<usize>>, caps: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionProblem {
    phi: DMatrix<f64>,
    constraint: Constraint,
}

impl SelectionProblem {
    pub fn new(mut phi: DMatrix<f64>, constraint: Constraint) -> Result<Self> {
        if !phi.is_square() {
            return Err(Error::Dimension(format!("phi must be square, got {:?}", phi.shape())));
        }
        symmetrize(&mut phi);
        check_psd(&phi, PHI_PSD_TOL, "phi")?;
        validate_constraint(&constraint, phi.nrows())?;
        Ok(Self { phi, constraint })
    }

    /// `Φ = (b² M(t−1) + C_η + C_ν)/σ²` for the slot after `prev_m`.
    pub fn from_filter(prev_m: &DMatrix<f64>, params: &ModelParams, constraint: Constraint) -> Result<Self> {
        if !(params.sigma2 > 0.0) {
            return Err(Error::ZeroMeasurementNoise);
        }
        if prev_m.shape() != params.c_nu.shape() {
            return Err(Error::Dimension("filter covariance does not match the model".into()));
        }
        let b2 = params.damping_b * params.damping_b;
        let phi = (prev_m * b2 + params.noise_sum()) / params.sigma2;
        Self::new(phi, constraint)
    }

    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn constraint(&self) -> &Constraint {
        &self.constraint
    }

    pub fn dim(&self) -> usize {
        self.phi.nrows()
    }
}

fn validate_groups(groups: &[Vec<usize>], p: usize) -> Result<()> {
    let mut seen = vec![false; p];
    for (g, group) in groups.iter().enumerate() {
        for &i in group {
            if i >= p {
                return Err(Error::Infeasible(format!("group {g} names path {i}, only {p} paths exist")));
            }
            if seen[i] {
                return Err(Error::Infeasible(format!("path {i} appears in more than one group")));
            }
            seen[i] = true;
        }
    }
    Ok(())
}

fn validate_constraint(constraint: &Constraint, p: usize) -> Result<()> {
    match constraint {
        Constraint::Cardinality(s) => {
            if *s > p {
                return Err(Error::Infeasible(format!("cannot choose {s} of {p} paths")));
            }
        }
        Constraint::NodeBudget { nodes, groups } => {
            validate_groups(groups, p)?;
            if *nodes == 0 {
                return Err(Error::Infeasible("node budget must be at least 1".into()));
            }
            if *nodes > groups.len() {
                return Err(Error::Infeasible(format!("cannot choose {nodes} of {} nodes", groups.len())));
            }
        }
        Constraint::PartitionMatroid { groups, caps } => {
            validate_groups(groups, p)?;
            if caps.len() != groups.len() {
                return Err(Error::Infeasible(format!(
                    "{} caps for {} groups",
                    caps.len(),
                    groups.len()
                )));
            }
            if let Some(v) = caps.iter().position(|&c| c == 0) {
                return Err(Error::Infeasible(format!("cap for group {v} must be at least 1")));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    /// Path ids in the order they were picked.
    pub chosen: Vec<usize>,
    /// Group indices picked under a node budget, otherwise empty.
    pub chosen_nodes: Vec<usize>,
    /// `(Φ_SS + I)⁻¹` with rows and columns in `chosen` order.
    pub v_matrix: DMatrix<f64>,
    /// Change in the normalized objective at each greedy step.
    pub objective_trace: Vec<f64>,
}

impl SelectionResult {
    pub fn sorted(&self) -> Vec<usize> {
        let mut s = self.chosen.clone();
        s.sort_unstable();
        s
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GreedyOptions {
    /// Lazy (Minoux) evaluation of stale scores. Picks the same paths.
    pub lazy: bool,
}

/// `log det(I + Φ) − log det(I + Φ_SS)`: the objective in units of `σ²`.
pub fn objective_normalized(phi: &DMatrix<f64>, set: &[usize]) -> Result<f64> {
    let p = phi.nrows();
    let full = SymmetricPsd::new(phi + DMatrix::identity(p, p), "I + phi")?.logdet();
    Ok(full + h_value(phi, set)?)
}

/// `h(S) = −log det(I + Φ_SS) ≤ 0`, with `h(∅) = 0`.
pub fn h_value(phi: &DMatrix<f64>, set: &[usize]) -> Result<f64> {
    if set.is_empty() {
        return Ok(0.0);
    }
    let sub = principal(phi, set) + DMatrix::identity(set.len(), set.len());
    Ok(-SymmetricPsd::new(sub, "I + phi_SS")?.logdet())
}

/// `log det` of the prediction error covariance of the paths outside
/// `set`, assembled directly as `σ² [(I+Φ)_S̄S̄ − Φ_S̄S (I+Φ_SS)⁻¹ Φ_SS̄]`.
/// Zero when every path is measured.
pub fn objective_f(phi: &DMatrix<f64>, sigma2: f64, set: &[usize]) -> Result<f64> {
    let p = phi.nrows();
    if !(sigma2 > 0.0) {
        return Err(Error::ZeroMeasurementNoise);
    }
    check_psd(phi, PHI_PSD_TOL, "phi")?;
    if set.iter().any(|&i| i >= p) {
        return Err(Error::Dimension(format!("selection names a path outside 0..{p}")));
    }
    let rest = complement(p, set);
    if rest.is_empty() {
        return Ok(0.0);
    }
    let mut cov = principal(phi, &rest) + DMatrix::identity(rest.len(), rest.len());
    if !set.is_empty() {
        let inner = SymmetricPsd::new(principal(phi, set) + DMatrix::identity(set.len(), set.len()), "I + phi_SS")?;
        let cross = submatrix(phi, &rest, set);
        cov -= &cross * inner.solve(&cross.transpose());
    }
    cov *= sigma2;
    symmetrize(&mut cov);
    Ok(SymmetricPsd::new(cov, "prediction error covariance")?.logdet())
}

/// `δ_S(p) = −log(1 + Φ_pp − w_pᵀ V w_p)` with `w_p = Φ_{S,p}` and
/// `V = (Φ_SS + I)⁻¹` given in the order of `set`.
pub fn increment_delta(phi: &DMatrix<f64>, v: &DMatrix<f64>, set: &[usize], candidate: usize) -> Result<f64> {
    if v.shape() != (set.len(), set.len()) {
        return Err(Error::Dimension("V does not match the selected set".into()));
    }
    if set.contains(&candidate) {
        return Err(Error::InvalidParameter(format!("path {candidate} is already selected")));
    }
    let d = schur_scalar(phi, v, set, candidate);
    if d <= MIN_SCHUR {
        return Err(Error::NumericalFailure { path: candidate, d });
    }
    Ok(-d.ln())
}

fn cross_column(phi: &DMatrix<f64>, set: &[usize], p: usize) -> DVector<f64> {
    DVector::from_iterator(set.len(), set.iter().map(|&s| phi[(s, p)]))
}

/// `d = Φ_pp − w_pᵀ V w_p + 1`.
fn schur_scalar(phi: &DMatrix<f64>, v: &DMatrix<f64>, set: &[usize], p: usize) -> f64 {
    if set.is_empty() {
        return phi[(p, p)] + 1.0;
    }
    let w = cross_column(phi, set, p);
    phi[(p, p)] - w.dot(&(v * &w)) + 1.0
}

/// Greedy selection under the problem's constraint.
pub fn greedy_select(problem: &SelectionProblem, options: GreedyOptions) -> Result<SelectionResult> {
    let p = problem.dim();
    match &problem.constraint {
        Constraint::Cardinality(s) => {
            let allowed = vec![Some(0usize); p];
            greedy_paths(&problem.phi, *s, &allowed, &[usize::MAX], options)
        }
        Constraint::PartitionMatroid { groups, caps } => {
            let mut group_of = vec![None; p];
            for (g, group) in groups.iter().enumerate() {
                for &i in group {
                    group_of[i] = Some(g);
                }
            }
            let total: usize = groups.iter().zip(caps).map(|(g, &c)| g.len().min(c)).sum();
            greedy_paths(&problem.phi, total, &group_of, caps, options)
        }
        Constraint::NodeBudget { nodes, groups } => greedy_nodes(&problem.phi, *nodes, groups),
    }
}

/// Max-heap entry for the lazy variant: larger score first, then lower id.
#[derive(Debug, Clone, Copy)]
struct Candidate {
    score: f64,
    path: usize,
    stamp: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.path.cmp(&self.path))
    }
}

/// Single-path greedy. `group_of[p]` is `None` for paths that may never be
/// chosen; `caps[g]` bounds picks from group `g`.
fn greedy_paths(
    phi: &DMatrix<f64>,
    count: usize,
    group_of: &[Option<usize>],
    caps: &[usize],
    options: GreedyOptions,
) -> Result<SelectionResult> {
    let p = phi.nrows();
    let mut used = vec![0usize; caps.len()];
    let mut taken = vec![false; p];
    let mut chosen = Vec::with_capacity(count);
    let mut v = DMatrix::zeros(0, 0);
    let mut trace = Vec::with_capacity(count);

    let open = |i: usize, taken: &[bool], used: &[usize]| -> bool {
        !taken[i] && matches!(group_of[i], Some(g) if used[g] < caps[g])
    };

    let mut heap: BinaryHeap<Candidate> = if options.lazy {
        (0..p)
            .filter(|&i| group_of[i].is_some())
            .map(|i| Candidate {
                score: phi[(i, i)],
                path: i,
                stamp: 0,
            })
            .collect()
    } else {
        BinaryHeap::new()
    };

    for step in 0..count {
        let best = if options.lazy {
            loop {
                let Some(top) = heap.pop() else { break None };
                if !open(top.path, &taken, &used) {
                    continue;
                }
                if top.stamp == step {
                    break Some((top.path, top.score));
                }
                let score = schur_scalar(phi, &v, &chosen, top.path) - 1.0;
                heap.push(Candidate {
                    score,
                    path: top.path,
                    stamp: step,
                });
            }
        } else {
            let mut best: Option<(usize, f64)> = None;
            for i in (0..p).filter(|&i| open(i, &taken, &used)) {
                let score = schur_scalar(phi, &v, &chosen, i) - 1.0;
                if best.is_none_or(|(_, b)| score > b) {
                    best = Some((i, score));
                }
            }
            best
        };
        let Some((pick, score)) = best else {
            return Err(Error::Infeasible(format!("no admissible path left after {step} picks")));
        };
        let d = score + 1.0;
        if d <= MIN_SCHUR {
            return Err(Error::NumericalFailure { path: pick, d });
        }
        let w = cross_column(phi, &chosen, pick);
        v = rank_one_extend_inverse(&v, &w, d)?;
        trace.push(-d.ln());
        chosen.push(pick);
        taken[pick] = true;
        if let Some(g) = group_of[pick] {
            used[g] += 1;
        }
    }

    Ok(SelectionResult {
        chosen,
        chosen_nodes: Vec::new(),
        v_matrix: v,
        objective_trace: trace,
    })
}

/// Whole-group greedy: each step adds the group with the largest
/// `log det(I + Φ_vv − W_vᵀ V W_v)`.
fn greedy_nodes(phi: &DMatrix<f64>, nodes: usize, groups: &[Vec<usize>]) -> Result<SelectionResult> {
    let mut chosen: Vec<usize> = Vec::new();
    let mut chosen_nodes = Vec::with_capacity(nodes);
    let mut v = DMatrix::zeros(0, 0);
    let mut trace = Vec::with_capacity(nodes);

    for _ in 0..nodes {
        let mut best: Option<(usize, f64, DMatrix<f64>)> = None;
        for (g, group) in groups.iter().enumerate() {
            if chosen_nodes.contains(&g) {
                continue;
            }
            let w = submatrix(phi, &chosen, group);
            let c = principal(phi, group) + DMatrix::identity(group.len(), group.len());
            let (extended, gain) = block_extend_inverse(&v, &w, &c).map_err(|e| match e {
                Error::NotPositiveDefinite { .. } => Error::NumericalFailure {
                    path: group.first().copied().unwrap_or(0),
                    d: 0.0,
                },
                other => other,
            })?;
            if best.as_ref().is_none_or(|(_, b, _)| gain > *b) {
                best = Some((g, gain, extended));
            }
        }
        let Some((g, gain, extended)) = best else {
            return Err(Error::Infeasible("node budget exceeds the available nodes".into()));
        };
        v = extended;
        chosen.extend_from_slice(&groups[g]);
        chosen_nodes.push(g);
        trace.push(-gain);
    }

    Ok(SelectionResult {
        chosen,
        chosen_nodes,
        v_matrix: v,
        objective_trace: trace,
    })
}

/// The single best node: the group maximizing `log det(I + Φ_vv)`.
/// Ties go to the lowest group index.
pub fn select_single_node(phi: &DMatrix<f64>, groups: &[Vec<usize>]) -> Result<usize> {
    if groups.is_empty() {
        return Err(Error::Infeasible("no end nodes to choose from".into()));
    }
    validate_groups(groups, phi.nrows())?;
    let mut best: Option<(usize, f64)> = None;
    for (g, group) in groups.iter().enumerate() {
        if group.is_empty() {
            return Err(Error::Infeasible(format!("end node {g} has no paths")));
        }
        let score = -h_value(phi, group)?;
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((g, score));
        }
    }
    Ok(best.map(|(g, _)| g).unwrap_or(0))
}

/// Exhaustive check of monotonicity and supermodularity of the normalized
/// objective over every subset pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SupermodularityReport {
    pub paths: usize,
    pub pairs_checked: usize,
    pub monotonicity_violations: usize,
    pub supermodularity_violations: usize,
    /// Largest amount by which any inequality failed (0 when none did).
    pub worst_violation: f64,
}

impl SupermodularityReport {
    pub fn is_clean(&self) -> bool {
        self.monotonicity_violations == 0 && self.supermodularity_violations == 0
    }
}

/// Checks `f(A) ≥ f(B)` and `δ_A(p) ≤ δ_B(p)` for all `A ⊆ B`, `p ∉ B`.
/// Limited to seven paths.
pub fn verify_supermodularity(phi: &DMatrix<f64>, slack: f64) -> Result<SupermodularityReport> {
    let p = phi.nrows();
    if p > 7 {
        return Err(Error::InvalidParameter(format!("exhaustive check supports at most 7 paths, got {p}")));
    }
    let subsets = 1usize << p;
    let members = |mask: usize| -> Vec<usize> { (0..p).filter(|i| mask & (1 << i) != 0).collect() };
    let f: Vec<f64> = (0..subsets)
        .map(|mask| objective_normalized(phi, &members(mask)))
        .collect::<Result<_>>()?;

    let mut report = SupermodularityReport {
        paths: p,
        pairs_checked: 0,
        monotonicity_violations: 0,
        supermodularity_violations: 0,
        worst_violation: 0.0,
    };
    for b in 0..subsets {
        // Every submask of b, including b itself and the empty set.
        let mut a = b;
        loop {
            report.pairs_checked += 1;
            let gap = f[b] - f[a];
            if gap > slack {
                report.monotonicity_violations += 1;
                report.worst_violation = report.worst_violation.max(gap);
            }
            for i in (0..p).filter(|i| b & (1 << i) == 0) {
                let delta_a = f[a | (1 << i)] - f[a];
                let delta_b = f[b | (1 << i)] - f[b];
                let gap = delta_a - delta_b;
                if gap > slack {
                    report.supermodularity_violations += 1;
                    report.worst_violation = report.worst_violation.max(gap);
                }
            }
            if a == 0 {
                break;
            }
            a = (a - 1) & b;
        }
    }
    Ok(report)
}
