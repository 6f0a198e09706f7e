use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::sync::{Condvar, Mutex};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::simplex::{default_iteration_limit, LpData, LpStatus, Simplex};
use super::{relative_gap, Branching, EventKind, NodeSelection, SolveResult, SolverConfig, SolverEvent, Status};
use crate::error::{Error, Result};
use crate::model::MilpModel;

/// Rows may be violated by this much in an accepted incumbent.
const FEASIBILITY_TOL: f64 = 1e-6;

#[derive(Debug, Clone)]
struct Node {
    /// `(variable, lower, upper)` overrides of the root bounds.
    changes: Vec<(usize, f64, f64)>,
    bound: f64,
    depth: usize,
    seq: u64,
}

/// Heap order: smallest bound first, then deepest, then newest.
struct BestFirst(Node);

impl PartialEq for BestFirst {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for BestFirst {}

impl PartialOrd for BestFirst {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for BestFirst {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .bound
            .total_cmp(&self.0.bound)
            .then(self.0.depth.cmp(&other.0.depth))
            .then(self.0.seq.cmp(&other.0.seq))
    }
}

enum Frontier {
    Best(BinaryHeap<BestFirst>),
    Depth(Vec<Node>),
}

impl Frontier {
    fn new(selection: NodeSelection) -> Self {
        match selection {
            NodeSelection::BestBound => Frontier::Best(BinaryHeap::new()),
            NodeSelection::DepthFirst => Frontier::Depth(Vec::new()),
        }
    }

    fn push(&mut self, node: Node) {
        match self {
            Frontier::Best(h) => h.push(BestFirst(node)),
            Frontier::Depth(s) => s.push(node),
        }
    }

    fn pop(&mut self) -> Option<Node> {
        match self {
            Frontier::Best(h) => h.pop().map(|n| n.0),
            Frontier::Depth(s) => s.pop(),
        }
    }

    fn min_bound(&self) -> f64 {
        match self {
            Frontier::Best(h) => h.peek().map_or(f64::INFINITY, |n| n.0.bound),
            Frontier::Depth(s) => s.iter().map(|n| n.bound).fold(f64::INFINITY, f64::min),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stop {
    Exhausted,
    GapReached,
    Limit,
    Unbounded,
}

struct Shared {
    frontier: Frontier,
    incumbent: Option<(f64, Vec<f64>)>,
    /// Bound of the node each worker is processing.
    active: Vec<Option<f64>>,
    nodes: u64,
    lp_iterations: u64,
    seq: u64,
    last_bound: f64,
    events: Vec<SolverEvent>,
    stop: Option<Stop>,
    error: Option<Error>,
    log: Option<BufWriter<File>>,
}

impl Shared {
    fn global_bound(&self) -> f64 {
        let open = self
            .active
            .iter()
            .flatten()
            .copied()
            .fold(self.frontier.min_bound(), f64::min);
        match &self.incumbent {
            Some((obj, _)) => open.min(*obj),
            None => open,
        }
    }

    fn record(&mut self, kind: EventKind, start: Instant) {
        let best_bound = self.global_bound();
        let objective = self.incumbent.as_ref().map(|(o, _)| *o);
        let event = SolverEvent {
            kind,
            time: start.elapsed().as_secs_f64(),
            nodes: self.nodes,
            objective,
            best_bound,
            gap: objective.map(|o| relative_gap(o, best_bound)),
        };
        if let Some(log) = self.log.as_mut() {
            let line = serde_json::to_string(&event).expect("event serializes");
            if let Err(e) = writeln!(log, "{line}") {
                log::warn!("solver log write failed: {e}");
                self.log = None;
            }
        }
        self.events.push(event);
    }
}

enum Outcome {
    Infeasible,
    Unbounded,
    Pruned,
    Integral(f64, Vec<f64>),
    Branch(Vec<Node>),
}

struct Context<'a> {
    model: &'a MilpModel,
    lp: &'a LpData,
    config: &'a SolverConfig,
    integer: Vec<usize>,
    /// Seeded tie-break rank per variable.
    priority: Vec<usize>,
    integral_objective: bool,
    start: Instant,
}

impl<'a> Context<'a> {
    /// Tightens an LP bound when every feasible objective is an integer.
    fn effective_bound(&self, lp_objective: f64) -> f64 {
        if self.integral_objective {
            (lp_objective - 1e-6).ceil()
        } else {
            lp_objective
        }
    }

    fn can_prune(&self, bound: f64, incumbent: Option<f64>) -> bool {
        let Some(inc) = incumbent else { return false };
        let tol = (self.config.gap_tolerance / 100.0 * inc.abs().max(1e-10)).max(1e-9 * inc.abs().max(1.0));
        bound >= inc - tol
    }

    fn limit_reached(&self, nodes: u64) -> bool {
        self.config.node_limit.is_some_and(|l| nodes >= l)
            || self
                .config
                .time_limit
                .is_some_and(|t| self.start.elapsed().as_secs_f64() >= t)
    }

    fn node_bounds(&self, node: &Node) -> (Vec<f64>, Vec<f64>) {
        let n = self.lp.n;
        let mut lower = self.lp.lower[..n].to_vec();
        let mut upper = self.lp.upper[..n].to_vec();
        for &(j, l, u) in &node.changes {
            lower[j] = l;
            upper[j] = u;
        }
        (lower, upper)
    }

    fn solve_lp(&self, simplex: &mut Simplex<'a>, lower: &[f64], upper: &[f64]) -> Result<LpStatus> {
        simplex.set_bounds(lower, upper);
        let limit = default_iteration_limit(self.lp);
        match simplex.solve(limit) {
            Ok(s) => Ok(s),
            Err(e) => {
                log::debug!("retrying node LP from the slack basis after: {e}");
                let iterations = simplex.iterations;
                *simplex = Simplex::new(self.lp);
                simplex.iterations = iterations;
                simplex.set_bounds(lower, upper);
                simplex.solve(limit)
            }
        }
    }

    fn evaluate(&self, simplex: &mut Simplex<'a>, node: &Node, cutoff: Option<f64>, seq: &mut u64) -> Result<Outcome> {
        let (lower, upper) = self.node_bounds(node);
        match self.solve_lp(simplex, &lower, &upper)? {
            LpStatus::Infeasible => return Ok(Outcome::Infeasible),
            LpStatus::Unbounded => return Ok(Outcome::Unbounded),
            LpStatus::Optimal => {}
        }
        let bound = self.effective_bound(simplex.objective() + self.model.objective_offset);
        if self.can_prune(bound, cutoff) {
            return Ok(Outcome::Pruned);
        }
        let x = simplex.structural_values();
        let tol = self.config.integrality_tolerance;
        let fractional = self.integer.iter().copied().filter(|&j| (x[j] - x[j].round()).abs() > tol);
        let pick = match self.config.branching {
            Branching::FirstFractional => fractional.min(),
            Branching::MostFractional => fractional.max_by(|&a, &b| {
                let fa = (x[a] - x[a].floor()).min(x[a].ceil() - x[a]);
                let fb = (x[b] - x[b].floor()).min(x[b].ceil() - x[b]);
                fa.total_cmp(&fb).then(self.priority[b].cmp(&self.priority[a]))
            }),
        };
        let j = match pick {
            Some(j) => j,
            None => match self.repair(simplex, &x, lower.clone(), upper.clone())? {
                Some(outcome) => return Ok(outcome),
                // rounding within the tolerance broke a row: branch on the
                // least integral variable instead of trusting the rounding
                None => match self
                    .integer
                    .iter()
                    .copied()
                    .filter(|&j| x[j] != x[j].round())
                    .max_by(|&a, &b| (x[a] - x[a].round()).abs().total_cmp(&(x[b] - x[b].round()).abs()))
                {
                    Some(j) => j,
                    None => {
                        log::warn!("integral LP solution violates the rows after re-solving; node dropped");
                        return Ok(Outcome::Infeasible);
                    }
                },
            },
        };
        let v = x[j];
        let mut child = |l: f64, u: f64| {
            let mut changes = node.changes.clone();
            changes.push((j, l, u));
            *seq += 1;
            Node {
                changes,
                bound,
                depth: node.depth + 1,
                seq: *seq,
            }
        };
        let down = child(lower[j], v.floor());
        let up = child(v.ceil(), upper[j]);
        // the nearer rounding is pushed last so it is explored first
        Ok(Outcome::Branch(if v - v.floor() >= 0.5 { vec![down, up] } else { vec![up, down] }))
    }

    /// Rounds the integer variables, re-solves for the continuous ones and
    /// checks the result against the original rows. `None` when that fails.
    fn repair(&self, simplex: &mut Simplex<'a>, x: &[f64], mut lower: Vec<f64>, mut upper: Vec<f64>) -> Result<Option<Outcome>> {
        for &j in &self.integer {
            let r = x[j].round();
            lower[j] = r;
            upper[j] = r;
        }
        let mut candidate = if self.integer.len() == self.lp.n {
            let mut c = x.to_vec();
            self.integer.iter().for_each(|&j| c[j] = c[j].round());
            c
        } else {
            match self.solve_lp(simplex, &lower, &upper)? {
                LpStatus::Optimal => simplex.structural_values(),
                _ => {
                    log::debug!("rounded LP solution lost feasibility");
                    return Ok(None);
                }
            }
        };
        for &j in &self.integer {
            candidate[j] = lower[j];
        }
        let violation = self.model.max_violation(&candidate);
        if violation > FEASIBILITY_TOL {
            log::debug!("rounded LP solution violates a row by {violation:e}");
            return Ok(None);
        }
        let objective = self.model.objective_value(&candidate)?;
        Ok(Some(Outcome::Integral(objective, candidate)))
    }
}

pub(super) fn branch_and_bound(model: &MilpModel, config: &SolverConfig, initial: Option<&[f64]>) -> Result<SolveResult> {
    let start = Instant::now();
    let lp = LpData::from_model(model);
    let integer: Vec<usize> = (0..model.num_vars()).filter(|&j| model.variables[j].is_integer()).collect();
    let mut order: Vec<usize> = (0..model.num_vars()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    let mut priority = vec![0; order.len()];
    for (rank, &j) in order.iter().enumerate() {
        priority[j] = rank;
    }
    let integral_objective = model.objective_offset.fract() == 0.0
        && model
            .objective
            .iter()
            .all(|&(j, c)| model.variables[j].is_integer() && c.fract() == 0.0);
    let ctx = Context {
        model,
        lp: &lp,
        config,
        integer,
        priority,
        integral_objective,
        start,
    };
    let log = config
        .log_path
        .as_ref()
        .map(|p| File::create(p).map(BufWriter::new).map_err(|e| Error::io(p, e)))
        .transpose()?;
    let mut frontier = Frontier::new(config.node_selection);
    frontier.push(Node {
        changes: Vec::new(),
        bound: f64::NEG_INFINITY,
        depth: 0,
        seq: 0,
    });
    let incumbent = match initial {
        Some(x) => {
            let mut x = x.to_vec();
            ctx.integer.iter().for_each(|&j| x[j] = x[j].round());
            let violation = model.max_violation(&x);
            if violation <= FEASIBILITY_TOL {
                Some((model.objective_value(&x)?, x))
            } else {
                log::warn!("start point violates the model by {violation:e}; ignored");
                None
            }
        }
        None => None,
    };
    let has_start = incumbent.is_some();
    let shared = Mutex::new(Shared {
        frontier,
        incumbent,
        active: vec![None; config.threads],
        nodes: 0,
        lp_iterations: 0,
        seq: 0,
        last_bound: f64::NEG_INFINITY,
        events: Vec::new(),
        stop: None,
        error: None,
        log,
    });
    if has_start {
        shared.lock().expect("solver state lock poisoned").record(EventKind::Incumbent, start);
    }
    let wake = Condvar::new();
    if config.threads == 1 {
        worker(&ctx, &shared, &wake, 0);
    } else {
        std::thread::scope(|s| {
            for w in 0..config.threads {
                let (ctx, shared, wake) = (&ctx, &shared, &wake);
                s.spawn(move || worker(ctx, shared, wake, w));
            }
        });
    }
    let mut state = shared.into_inner().expect("solver state lock poisoned");
    if let Some(e) = state.error.take() {
        return Err(e);
    }
    if let Some(log) = state.log.as_mut() {
        log.flush().map_err(|e| Error::io(config.log_path.clone().unwrap_or_default(), e))?;
    }
    let stop = state.stop.unwrap_or(Stop::Exhausted);
    let bound = state.global_bound();
    let (status, best_bound) = match (stop, &state.incumbent) {
        (Stop::Unbounded, _) => (Status::Unbounded, f64::NEG_INFINITY),
        (Stop::Exhausted, Some((obj, _))) => (Status::Optimal, *obj),
        (Stop::Exhausted, None) => (Status::Infeasible, f64::INFINITY),
        (Stop::GapReached, _) => (Status::Optimal, bound),
        (Stop::Limit, Some(_)) => (Status::Feasible, bound),
        (Stop::Limit, None) => (Status::TimeLimitNoIncumbent, bound),
    };
    let (objective, incumbent) = match state.incumbent.take() {
        Some((o, x)) if status != Status::Unbounded => (o, Some(x)),
        _ => (f64::INFINITY, None),
    };
    Ok(SolveResult {
        status,
        gap: incumbent.as_ref().map(|_| relative_gap(objective, best_bound)),
        incumbent,
        objective,
        best_bound,
        nodes: state.nodes,
        lp_iterations: state.lp_iterations,
        wall_time: start.elapsed().as_secs_f64(),
        events: state.events,
    })
}

fn worker(ctx: &Context<'_>, shared: &Mutex<Shared>, wake: &Condvar, id: usize) {
    let mut simplex = Simplex::new(ctx.lp);
    loop {
        let (node, cutoff, mut seq) = {
            let mut s = shared.lock().expect("solver state lock poisoned");
            loop {
                if s.stop.is_some() {
                    return;
                }
                if ctx.limit_reached(s.nodes) {
                    s.stop = Some(Stop::Limit);
                    wake.notify_all();
                    return;
                }
                if let Some(node) = s.frontier.pop() {
                    let cutoff = s.incumbent.as_ref().map(|(o, _)| *o);
                    if ctx.can_prune(node.bound, cutoff) {
                        continue;
                    }
                    s.active[id] = Some(node.bound);
                    s.nodes += 1;
                    // reserve sequence numbers for the children
                    let seq = s.seq;
                    s.seq += 2;
                    break (node, cutoff, seq);
                }
                if s.active.iter().all(Option::is_none) {
                    s.stop = Some(Stop::Exhausted);
                    wake.notify_all();
                    return;
                }
                s = wake.wait(s).expect("solver state lock poisoned");
            }
        };
        let before = simplex.iterations;
        let outcome = ctx.evaluate(&mut simplex, &node, cutoff, &mut seq);
        let mut s = shared.lock().expect("solver state lock poisoned");
        s.lp_iterations += simplex.iterations - before;
        s.active[id] = None;
        match outcome {
            Err(e) => {
                s.error.get_or_insert(e);
                s.stop = Some(Stop::Limit);
            }
            Ok(Outcome::Infeasible | Outcome::Pruned) => {}
            Ok(Outcome::Unbounded) => s.stop = Some(Stop::Unbounded),
            Ok(Outcome::Integral(obj, x)) => {
                if s.incumbent.as_ref().is_none_or(|(best, _)| obj < *best) {
                    s.incumbent = Some((obj, x));
                    s.record(EventKind::Incumbent, ctx.start);
                }
            }
            Ok(Outcome::Branch(children)) => children.into_iter().for_each(|c| s.frontier.push(c)),
        }
        let bound = s.global_bound();
        if bound > s.last_bound + 1e-12 && bound.is_finite() {
            s.last_bound = bound;
            s.record(EventKind::Bound, ctx.start);
        }
        if s.stop.is_none() {
            if let Some((obj, _)) = &s.incumbent {
                let open = s.frontier.min_bound() < f64::INFINITY || s.active.iter().any(Option::is_some);
                if open && (ctx.can_prune(bound, Some(*obj)) || relative_gap(*obj, bound) <= ctx.config.gap_tolerance) {
                    s.stop = Some(Stop::GapReached);
                }
            }
        }
        wake.notify_all();
    }
}
