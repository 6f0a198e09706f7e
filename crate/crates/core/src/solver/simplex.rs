//! Dense bounded-variable primal simplex.
//!
//! Rows are brought to `A x + s = b` with one slack per row; the slack of a
//! `<=` row lives in `[0, inf)`, of a `>=` row in `(-inf, 0]` and of an
//! equality in `[0, 0]`. Phase one minimizes the total bound violation of the
//! basic variables starting from whatever basis is current, so a solve after a
//! bound change (branch and bound) starts warm from the previous basis.

use crate::error::{Error, Result};
use crate::model::{MilpModel, Sense};

const PRIMAL_TOL: f64 = 1e-9;
const DUAL_TOL: f64 = 1e-9;
const PIVOT_TOL: f64 = 1e-9;
const SINGULAR_TOL: f64 = 1e-11;
const REFACTOR_EVERY: usize = 100;
const STALL_LIMIT: usize = 30;
const PERTURBATION: f64 = 1e-7;
const MAX_PERTURBATIONS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub status: LpStatus,
    /// Values of the model variables (meaningful when optimal).
    pub x: Vec<f64>,
    pub objective: f64,
    pub iterations: u64,
}

/// Column-wise copy of a model's rows with integrality dropped.
#[derive(Debug, Clone)]
pub(crate) struct LpData {
    pub n: usize,
    pub m: usize,
    cols: Vec<Vec<(usize, f64)>>,
    rhs: Vec<f64>,
    cost: Vec<f64>,
    /// Bounds of structural and slack variables.
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl LpData {
    pub fn from_model(model: &MilpModel) -> Self {
        let n = model.num_vars();
        let m = model.num_constraints();
        let mut cols = vec![Vec::new(); n];
        for (i, c) in model.constraints.iter().enumerate() {
            for &(j, a) in &c.terms {
                cols[j].push((i, a));
            }
        }
        let mut cost = vec![0.0; n];
        for &(j, c) in &model.objective {
            cost[j] += c;
        }
        let mut lower: Vec<f64> = model.variables.iter().map(|v| v.lower).collect();
        let mut upper: Vec<f64> = model.variables.iter().map(|v| v.upper).collect();
        for c in &model.constraints {
            let (l, u) = match c.sense {
                Sense::Le => (0.0, f64::INFINITY),
                Sense::Ge => (f64::NEG_INFINITY, 0.0),
                Sense::Eq => (0.0, 0.0),
            };
            lower.push(l);
            upper.push(u);
        }
        LpData {
            n,
            m,
            cols,
            rhs: model.constraints.iter().map(|c| c.rhs).collect(),
            cost,
            lower,
            upper,
        }
    }

    fn cost(&self, j: usize) -> f64 {
        if j < self.n {
            self.cost[j]
        } else {
            0.0
        }
    }

    fn column(&self, j: usize) -> ColumnIter<'_> {
        if j < self.n {
            ColumnIter::Sparse(self.cols[j].iter())
        } else {
            ColumnIter::Unit(Some(j - self.n))
        }
    }
}

enum ColumnIter<'a> {
    Sparse(std::slice::Iter<'a, (usize, f64)>),
    Unit(Option<usize>),
}

impl Iterator for ColumnIter<'_> {
    type Item = (usize, f64);

    fn next(&mut self) -> Option<(usize, f64)> {
        match self {
            ColumnIter::Sparse(it) => it.next().copied(),
            ColumnIter::Unit(row) => row.take().map(|r| (r, 1.0)),
        }
    }
}

const NOT_BASIC: usize = usize::MAX;

/// Best infeasibility and phase-two objective seen since the last reset.
struct Progress {
    infeasibility: f64,
    phase_two: Option<f64>,
}

impl Default for Progress {
    fn default() -> Self {
        Progress {
            infeasibility: f64::INFINITY,
            phase_two: None,
        }
    }
}

/// Simplex state that survives bound changes.
#[derive(Debug, Clone)]
pub(crate) struct Simplex<'a> {
    lp: &'a LpData,
    lower: Vec<f64>,
    upper: Vec<f64>,
    basis: Vec<usize>,
    position: Vec<usize>,
    at_upper: Vec<bool>,
    x: Vec<f64>,
    /// Row-major dense basis inverse.
    binv: Vec<f64>,
    since_refactor: usize,
    /// Original bounds while a degeneracy-breaking perturbation is active.
    saved_bounds: Option<(Vec<f64>, Vec<f64>)>,
    pub iterations: u64,
}

impl<'a> Simplex<'a> {
    /// Starts from the all-slack basis.
    pub fn new(lp: &'a LpData) -> Self {
        let total = lp.n + lp.m;
        let mut s = Simplex {
            lp,
            lower: lp.lower.clone(),
            upper: lp.upper.clone(),
            basis: (lp.n..total).collect(),
            position: vec![NOT_BASIC; total],
            at_upper: vec![false; total],
            x: vec![0.0; total],
            binv: Vec::new(),
            since_refactor: 0,
            saved_bounds: None,
            iterations: 0,
        };
        for (i, &j) in s.basis.iter().enumerate() {
            s.position[j] = i;
        }
        s.binv = identity(lp.m);
        s.place_nonbasic();
        s.compute_basic_values();
        s
    }

    /// Replaces the bounds of the structural variables.
    pub fn set_bounds(&mut self, lower: &[f64], upper: &[f64]) {
        let n = self.lp.n;
        self.lower[..n].copy_from_slice(lower);
        self.upper[..n].copy_from_slice(upper);
        self.place_nonbasic();
    }

    pub fn structural_values(&self) -> Vec<f64> {
        self.x[..self.lp.n].to_vec()
    }

    pub fn objective(&self) -> f64 {
        (0..self.lp.n).map(|j| self.lp.cost[j] * self.x[j]).sum()
    }

    fn place_nonbasic(&mut self) {
        for j in 0..self.x.len() {
            if self.position[j] != NOT_BASIC {
                continue;
            }
            let (l, u) = (self.lower[j], self.upper[j]);
            self.x[j] = if self.at_upper[j] && u.is_finite() {
                u
            } else if l.is_finite() {
                self.at_upper[j] = false;
                l
            } else if u.is_finite() {
                self.at_upper[j] = true;
                u
            } else {
                self.at_upper[j] = false;
                0.0
            };
        }
    }

    fn compute_basic_values(&mut self) {
        let m = self.lp.m;
        let mut r = self.lp.rhs.clone();
        for j in 0..self.x.len() {
            if self.position[j] == NOT_BASIC && self.x[j] != 0.0 {
                for (i, a) in self.lp.column(j) {
                    r[i] -= a * self.x[j];
                }
            }
        }
        for i in 0..m {
            let row = &self.binv[i * m..(i + 1) * m];
            self.x[self.basis[i]] = row.iter().zip(&r).map(|(b, v)| b * v).sum();
        }
    }

    /// Rebuilds the inverse from the basis columns; a singular basis is
    /// replaced by the slack basis.
    fn refactor(&mut self) {
        let m = self.lp.m;
        match basis_inverse(self.lp, &self.basis) {
            Some(inv) => self.binv = inv,
            None => {
                log::debug!("singular basis, restarting from slacks");
                for &j in &self.basis {
                    self.position[j] = NOT_BASIC;
                }
                self.basis = (self.lp.n..self.lp.n + m).collect();
                for (i, &j) in self.basis.iter().enumerate() {
                    self.position[j] = i;
                }
                self.binv = identity(m);
                self.place_nonbasic();
            }
        }
        self.since_refactor = 0;
        self.compute_basic_values();
    }

    fn column_in_basis(&self, q: usize) -> Vec<f64> {
        let m = self.lp.m;
        if m == 0 {
            return Vec::new();
        }
        let col: Vec<(usize, f64)> = self.lp.column(q).collect();
        self.binv
            .chunks_exact(m)
            .map(|row| col.iter().map(|&(r, a)| row[r] * a).sum())
            .collect()
    }

    fn pivot(&mut self, row: usize, alpha: &[f64]) {
        let m = self.lp.m;
        let p = alpha[row];
        let (before, rest) = self.binv.split_at_mut(row * m);
        let (pivot_row, after) = rest.split_at_mut(m);
        pivot_row.iter_mut().for_each(|v| *v /= p);
        for (i, chunk) in before.chunks_mut(m).enumerate() {
            eliminate(chunk, pivot_row, alpha[i]);
        }
        for (k, chunk) in after.chunks_mut(m).enumerate() {
            eliminate(chunk, pivot_row, alpha[row + 1 + k]);
        }
        self.since_refactor += 1;
    }

    fn infeasibility(&self) -> f64 {
        self.basis
            .iter()
            .map(|&j| (self.lower[j] - self.x[j]).max(0.0) + (self.x[j] - self.upper[j]).max(0.0))
            .sum()
    }

    /// Stall count after a pivot: reset only on a real decrease of the
    /// infeasibility (phase one) or objective (phase two), since tiny steps
    /// driven by rounding can otherwise cycle forever.
    fn progress(&self, phase_one: bool, best: &mut Progress, stalled: usize) -> usize {
        let better = |measure: f64, record: f64| record.is_infinite() || measure < record - 1e-9 * (1.0 + record.abs());
        let improved = if phase_one {
            let inf = self.infeasibility();
            better(inf, best.infeasibility).then(|| best.infeasibility = inf).is_some()
        } else {
            let obj = self.objective();
            // reaching phase two counts, slipping back to phase one does not
            let reached = best.phase_two.is_none();
            let record = best.phase_two.unwrap_or(f64::INFINITY);
            (reached || better(obj, record)).then(|| best.phase_two = Some(obj)).is_some()
        };
        if improved {
            0
        } else {
            stalled + 1
        }
    }

    /// Widens every non-fixed finite bound by a small pseudo-random amount so
    /// that ties in the ratio test disappear.
    fn perturb(&mut self, salt: u64) {
        self.saved_bounds = Some((self.lower.clone(), self.upper.clone()));
        let mut state = salt.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for j in 0..self.lower.len() {
            if self.lower[j] == self.upper[j] {
                continue;
            }
            if self.lower[j].is_finite() {
                self.lower[j] -= PERTURBATION * (1.0 + next()) * (1.0 + self.lower[j].abs());
            }
            if self.upper[j].is_finite() {
                self.upper[j] += PERTURBATION * (1.0 + next()) * (1.0 + self.upper[j].abs());
            }
        }
        self.place_nonbasic();
        self.compute_basic_values();
    }

    fn restore_bounds(&mut self) -> bool {
        match self.saved_bounds.take() {
            Some((lower, upper)) => {
                self.lower = lower;
                self.upper = upper;
                self.place_nonbasic();
                self.compute_basic_values();
                true
            }
            None => false,
        }
    }

    /// Runs both phases from the current basis.
    pub fn solve(&mut self, iteration_limit: u64) -> Result<LpStatus> {
        let result = self.solve_phases(iteration_limit);
        self.restore_bounds();
        result
    }

    fn solve_phases(&mut self, iteration_limit: u64) -> Result<LpStatus> {
        let lp = self.lp;
        let (n, m) = (lp.n, lp.m);
        let total = n + m;
        let start = self.iterations;
        let mut stalled = 0usize;
        let mut best = Progress::default();
        let mut perturbations = 0;
        self.compute_basic_values();
        let mut y = vec![0.0; m];
        let mut cb = vec![0.0; m];
        loop {
            if self.iterations - start > iteration_limit {
                return Err(Error::Numerical(format!(
                    "simplex exceeded {iteration_limit} iterations on a {m} x {n} problem"
                )));
            }
            if self.since_refactor >= REFACTOR_EVERY {
                self.refactor();
            }
            let mut phase_one = false;
            for (i, &j) in self.basis.iter().enumerate() {
                let v = self.x[j];
                cb[i] = if v < self.lower[j] - PRIMAL_TOL {
                    phase_one = true;
                    -1.0
                } else if v > self.upper[j] + PRIMAL_TOL {
                    phase_one = true;
                    1.0
                } else {
                    0.0
                };
            }
            if !phase_one {
                for (i, &j) in self.basis.iter().enumerate() {
                    cb[i] = lp.cost(j);
                }
            }
            y.iter_mut().for_each(|v| *v = 0.0);
            for (i, &c) in cb.iter().enumerate() {
                if c != 0.0 {
                    let row = &self.binv[i * m..(i + 1) * m];
                    y.iter_mut().zip(row).for_each(|(yv, b)| *yv += c * b);
                }
            }

            if stalled > STALL_LIMIT && self.saved_bounds.is_none() && perturbations < MAX_PERTURBATIONS {
                perturbations += 1;
                self.perturb(self.iterations);
                stalled = 0;
                best = Progress::default();
                continue;
            }

            // Pricing.
            let bland = stalled > STALL_LIMIT;
            let mut entering: Option<(usize, f64, f64)> = None;
            for j in 0..total {
                if self.position[j] != NOT_BASIC || self.lower[j] == self.upper[j] {
                    continue;
                }
                let base = if phase_one { 0.0 } else { lp.cost(j) };
                let d = base - lp.column(j).map(|(i, a)| y[i] * a).sum::<f64>();
                let can_increase = self.x[j] < self.upper[j];
                let can_decrease = self.x[j] > self.lower[j];
                let dir = if d < -DUAL_TOL && can_increase {
                    1.0
                } else if d > DUAL_TOL && can_decrease {
                    -1.0
                } else {
                    continue;
                };
                if bland {
                    entering = Some((j, d, dir));
                    break;
                }
                if entering.is_none_or(|(_, best, _)| d.abs() > best.abs()) {
                    entering = Some((j, d, dir));
                }
            }
            let Some((q, _, dir)) = entering else {
                if self.since_refactor > 0 {
                    // confirm with a fresh inverse before trusting the verdict
                    self.refactor();
                    continue;
                }
                if self.restore_bounds() {
                    // finish on the original bounds from the perturbed basis
                    stalled = 0;
                    best = Progress::default();
                    continue;
                }
                return Ok(if phase_one { LpStatus::Infeasible } else { LpStatus::Optimal });
            };

            // Harris ratio test: the first pass finds the largest step that
            // keeps every basic variable within tolerance of its bounds, the
            // second picks the largest pivot among rows blocking by then.
            let alpha = self.column_in_basis(q);
            let limit_of = |i: usize, a: f64, slack: f64| -> Option<(f64, bool)> {
                let j = self.basis[i];
                let rate = -dir * a;
                let v = self.x[j];
                let (l, u) = (self.lower[j], self.upper[j]);
                if v < l - PRIMAL_TOL {
                    (rate > 0.0).then(|| ((l - v + slack) / rate, false))
                } else if v > u + PRIMAL_TOL {
                    (rate < 0.0).then(|| ((v - u + slack) / -rate, true))
                } else if rate < 0.0 {
                    // a value already outside by less than the tolerance may
                    // only use what is left of it
                    l.is_finite().then(|| ((v - l + slack).max(0.0) / -rate, false))
                } else {
                    u.is_finite().then(|| ((u - v + slack).max(0.0) / rate, true))
                }
            };
            let mut relaxed = f64::INFINITY;
            for (i, &a) in alpha.iter().enumerate() {
                if a.abs() > PIVOT_TOL {
                    // Bland's rule needs the exact minimum ratio
                    let slack = if bland { 0.0 } else { PRIMAL_TOL };
                    if let Some((t, _)) = limit_of(i, a, slack) {
                        relaxed = relaxed.min(if bland { t + 1e-12 } else { t });
                    }
                }
            }
            let mut step = f64::INFINITY;
            let mut leave: Option<(usize, bool)> = None;
            let mut leave_pivot = 0.0;
            for (i, &a) in alpha.iter().enumerate() {
                if a.abs() <= PIVOT_TOL {
                    continue;
                }
                let Some((t, hits_upper)) = limit_of(i, a, 0.0) else { continue };
                if t > relaxed {
                    continue;
                }
                let better = match leave {
                    None => true,
                    Some((r, _)) => {
                        if bland {
                            self.basis[i] < self.basis[r]
                        } else {
                            a.abs() > leave_pivot
                        }
                    }
                };
                if better {
                    step = t;
                    leave = Some((i, hits_upper));
                    leave_pivot = a.abs();
                }
            }
            let range = self.upper[q] - self.lower[q];
            self.iterations += 1;

            if range.is_finite() && range <= step {
                // entering variable moves to its other bound
                self.x[q] += dir * range;
                self.at_upper[q] = dir > 0.0;
                for (i, &a) in alpha.iter().enumerate() {
                    self.x[self.basis[i]] -= dir * a * range;
                }
                stalled = self.progress(phase_one, &mut best, stalled);
                continue;
            }
            let Some((r, hits_upper)) = leave else {
                if phase_one {
                    return Err(Error::Numerical("unbounded ray during phase one".into()));
                }
                return Ok(LpStatus::Unbounded);
            };
            let step = step.max(0.0);
            self.x[q] += dir * step;
            for (i, &a) in alpha.iter().enumerate() {
                self.x[self.basis[i]] -= dir * a * step;
            }
            let out = self.basis[r];
            self.x[out] = if hits_upper { self.upper[out] } else { self.lower[out] };
            self.at_upper[out] = hits_upper;
            self.position[out] = NOT_BASIC;
            self.position[q] = r;
            self.basis[r] = q;
            self.pivot(r, &alpha);
            stalled = self.progress(phase_one, &mut best, stalled);
        }
    }
}

/// Inverse of the basis matrix, exploiting that basic slacks are unit
/// columns: only the block of structural columns on the rows without a basic
/// slack is inverted densely.
fn basis_inverse(lp: &LpData, basis: &[usize]) -> Option<Vec<f64>> {
    let (n, m) = (lp.n, lp.m);
    // rows whose slack is basic, with its basis position
    let mut slack_pos = vec![NOT_BASIC; m];
    let mut structural = Vec::new();
    for (pos, &j) in basis.iter().enumerate() {
        if j >= n {
            slack_pos[j - n] = pos;
        } else {
            structural.push(pos);
        }
    }
    let open_rows: Vec<usize> = (0..m).filter(|&i| slack_pos[i] == NOT_BASIC).collect();
    let k = structural.len();
    if open_rows.len() != k {
        return None;
    }
    let mut row_index = vec![NOT_BASIC; m];
    for (ri, &i) in open_rows.iter().enumerate() {
        row_index[i] = ri;
    }
    let mut block = vec![0.0; k * k];
    for (c, &pos) in structural.iter().enumerate() {
        for &(i, a) in &lp.cols[basis[pos]] {
            if row_index[i] != NOT_BASIC {
                block[row_index[i] * k + c] = a;
            }
        }
    }
    let block_inv = invert(block, k)?;
    let mut binv = vec![0.0; m * m];
    for i in 0..m {
        if slack_pos[i] != NOT_BASIC {
            binv[slack_pos[i] * m + i] = 1.0;
        }
    }
    for (c, &pos) in structural.iter().enumerate() {
        let inv_row = &block_inv[c * k..(c + 1) * k];
        for (ri, &i) in open_rows.iter().enumerate() {
            binv[pos * m + i] = inv_row[ri];
        }
        // slack rows: e_i - C[i, .] (block inverse)
        for &(i, a) in &lp.cols[basis[pos]] {
            let sp = slack_pos[i];
            if sp == NOT_BASIC {
                continue;
            }
            for (ri, &r) in open_rows.iter().enumerate() {
                binv[sp * m + r] -= a * inv_row[ri];
            }
        }
    }
    Some(binv)
}

fn eliminate(row: &mut [f64], pivot_row: &[f64], factor: f64) {
    if factor != 0.0 {
        row.iter_mut().zip(pivot_row).for_each(|(v, p)| *v -= factor * p);
    }
}

fn identity(m: usize) -> Vec<f64> {
    let mut id = vec![0.0; m * m];
    for i in 0..m {
        id[i * m + i] = 1.0;
    }
    id
}

/// Gauss-Jordan inverse with partial pivoting.
fn invert(mut a: Vec<f64>, m: usize) -> Option<Vec<f64>> {
    let mut inv = identity(m);
    for col in 0..m {
        let pivot = (col..m).max_by(|&i, &k| a[i * m + col].abs().total_cmp(&a[k * m + col].abs()))?;
        if a[pivot * m + col].abs() < SINGULAR_TOL {
            return None;
        }
        if pivot != col {
            for k in 0..m {
                a.swap(pivot * m + k, col * m + k);
                inv.swap(pivot * m + k, col * m + k);
            }
        }
        let p = a[col * m + col];
        for k in 0..m {
            a[col * m + k] /= p;
            inv[col * m + k] /= p;
        }
        for i in 0..m {
            if i == col {
                continue;
            }
            let f = a[i * m + col];
            if f != 0.0 {
                for k in 0..m {
                    a[i * m + k] -= f * a[col * m + k];
                    inv[i * m + k] -= f * inv[col * m + k];
                }
            }
        }
    }
    Some(inv)
}

pub(crate) fn default_iteration_limit(lp: &LpData) -> u64 {
    50 * (lp.n + lp.m) as u64 + 10_000
}

/// Solves the linear relaxation of `model`.
pub fn solve_lp(model: &MilpModel) -> Result<LpSolution> {
    model.validate()?;
    let lp = LpData::from_model(model);
    let mut simplex = Simplex::new(&lp);
    let status = simplex.solve(default_iteration_limit(&lp))?;
    let x = simplex.structural_values();
    let objective = simplex.objective() + model.objective_offset;
    Ok(LpSolution {
        status,
        x,
        objective,
        iterations: simplex.iterations,
    })
}
