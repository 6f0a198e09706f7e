//! Alternating local search over odd and even layers.
//!
//! Layers are numbered from 1. The odd subproblem frees the weights and
//! thresholds of odd layers and the activations of odd hidden layers while the
//! even ones are held fixed; the even subproblem does the opposite. Output
//! activations are free in both because they carry the loss. Every product in
//! either subproblem has one fixed factor, so both are plain MILPs without
//! McCormick variables.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{build_with_fixings, BuildOptions, FixingPlan, Formulation, LayerFixing, Unit};
use crate::network::{BdnnParams, NetworkSpec, ThresholdMode, WeightDomain};
use crate::solver::{solve, solve_with_start, SolverConfig, Status};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parity {
    /// Fixes even layers; solved by the odd subproblem.
    Odd,
    /// Fixes odd layers; solved by the even subproblem.
    Even,
}

impl Parity {
    /// Whether 0-based `layer` (1-based `layer + 1`) is freed by this subproblem.
    fn frees(self, layer: usize) -> bool {
        let one_based_odd = layer % 2 == 0;
        match self {
            Parity::Odd => one_based_odd,
            Parity::Even => !one_based_odd,
        }
    }

    fn other(self) -> Parity {
        match self {
            Parity::Odd => Parity::Even,
            Parity::Even => Parity::Odd,
        }
    }
}

/// Fixed values for the subproblem that frees layers of `parity`.
#[derive(Debug, Clone, PartialEq)]
pub struct FixationState {
    pub parity: Parity,
    /// Weights and threshold of every layer the subproblem keeps fixed.
    pub layers: Vec<Option<LayerFixing>>,
    /// Hidden activations `[point][neuron]` of every fixed hidden layer.
    pub activations: Vec<Option<Vec<Vec<u8>>>>,
}

impl FixationState {
    /// Fixation taken from concrete parameters: fixed layers copy the
    /// weights, fixed hidden activations the forward trace.
    pub fn from_params(params: &BdnnParams, dataset: &Dataset, parity: Parity) -> Result<Self> {
        let spec = &params.spec;
        let k = spec.depth();
        let traces = dataset
            .samples()
            .iter()
            .map(|x| params.forward(x))
            .collect::<Result<Vec<_>>>()?;
        let layers = (0..k)
            .map(|l| {
                (!parity.frees(l)).then(|| LayerFixing {
                    rows: (0..spec.layer_width(l)).map(|j| params.augmented_row(l, j)).collect(),
                    threshold: params.thresholds[l],
                })
            })
            .collect();
        let activations = (0..k)
            .map(|l| (l + 1 < k && !parity.frees(l)).then(|| traces.iter().map(|t| t[l].clone()).collect()))
            .collect();
        Ok(FixationState {
            parity,
            layers,
            activations,
        })
    }

    /// Fixation for the next subproblem, read from a solved formulation.
    fn from_solution(formulation: &Formulation, x: &[f64], parity: Parity) -> Self {
        let k = formulation.spec().depth();
        let acts = formulation.activation_values(x);
        FixationState {
            parity,
            layers: (0..k)
                .map(|l| (!parity.frees(l)).then(|| formulation.layer_values(x, l)))
                .collect(),
            activations: (0..k)
                .map(|l| (l + 1 < k && !parity.frees(l)).then(|| acts.iter().map(|unit| unit[l].clone()).collect()))
                .collect(),
        }
    }

    fn validate(&self, spec: &NetworkSpec, points: usize) -> Result<()> {
        let k = spec.depth();
        if self.layers.len() != k || self.activations.len() != k {
            return Err(Error::InvalidArgument(format!("fixation must cover {k} layers")));
        }
        for l in 0..k {
            let must_fix = !self.parity.frees(l);
            if self.layers[l].is_some() != must_fix {
                return Err(Error::InvalidArgument(format!(
                    "fixation for the {:?} subproblem is incomplete at layer {}",
                    self.parity,
                    l + 1
                )));
            }
            let act_fixed = must_fix && l + 1 < k;
            match &self.activations[l] {
                Some(a) if act_fixed && a.len() == points => {}
                None if !act_fixed => {}
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "fixation for the {:?} subproblem has wrong activations at layer {}",
                        self.parity,
                        l + 1
                    )))
                }
            }
        }
        Ok(())
    }
}

fn build_subproblem(
    dataset: &Dataset,
    spec: &NetworkSpec,
    fixation: &FixationState,
    options: &BuildOptions,
    parity: Parity,
) -> Result<Formulation> {
    if fixation.parity != parity {
        return Err(Error::InvalidArgument(format!(
            "fixation built for the {:?} subproblem, not {:?}",
            fixation.parity, parity
        )));
    }
    fixation.validate(spec, dataset.len())?;
    let units = (0..dataset.len())
        .map(|i| Unit {
            points: vec![i],
            loss_points: vec![i],
        })
        .collect();
    let plan = FixingPlan {
        layers: fixation.layers.clone(),
        activations: fixation.activations.clone(),
    };
    build_with_fixings(dataset, spec, options, units, plan)
}

/// Subproblem freeing odd layers.
pub fn build_h1(
    dataset: &Dataset,
    spec: &NetworkSpec,
    fixation: &FixationState,
    options: &BuildOptions,
) -> Result<Formulation> {
    build_subproblem(dataset, spec, fixation, options, Parity::Odd)
}

/// Subproblem freeing even layers.
pub fn build_h2(
    dataset: &Dataset,
    spec: &NetworkSpec,
    fixation: &FixationState,
    options: &BuildOptions,
) -> Result<Formulation> {
    build_subproblem(dataset, spec, fixation, options, Parity::Even)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalSearchConfig {
    pub seed: u64,
    pub solver: SolverConfig,
    pub build: BuildOptions,
    /// Redraws allowed when the first odd subproblem is infeasible.
    pub max_retries: usize,
    /// A round must lower the objective by more than this to continue.
    pub improvement_tol: f64,
    pub max_rounds: Option<usize>,
}

impl Default for LocalSearchConfig {
    fn default() -> Self {
        LocalSearchConfig {
            seed: 0,
            solver: SolverConfig::default(),
            build: BuildOptions::default(),
            max_retries: 10,
            improvement_tol: 1e-9,
            max_rounds: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub round: usize,
    pub parity: Parity,
    pub objective: f64,
    pub status: Status,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalSearchResult {
    pub params: BdnnParams,
    pub objective: f64,
    pub trace: Vec<TraceStep>,
    pub rounds: usize,
    /// Initializations discarded because the first subproblem was infeasible.
    pub redraws: usize,
}

/// Uniform draw from the weight domain, thresholds uniform in `[-1, 1]`.
pub fn random_params(spec: &NetworkSpec, rng: &mut impl Rng) -> BdnnParams {
    let weight = |rng: &mut dyn rand::RngCore| match spec.weight_domain {
        WeightDomain::BoxContinuous => rng.random_range(-1.0..=1.0),
        WeightDomain::Ternary => rng.random_range(-1i32..=1) as f64,
    };
    let k = spec.depth();
    let weights = (0..k)
        .map(|l| {
            (0..spec.layer_width(l))
                .map(|_| (0..spec.layer_fan_in(l)).map(|_| weight(rng)).collect())
                .collect()
        })
        .collect();
    let biases = spec
        .use_bias
        .then(|| (0..k).map(|l| (0..spec.layer_width(l)).map(|_| weight(rng)).collect()).collect());
    let thresholds = (0..k)
        .map(|_| match spec.threshold_mode {
            ThresholdMode::Learned => rng.random_range(-1.0..=1.0),
            ThresholdMode::FixedZero => 0.0,
        })
        .collect();
    BdnnParams {
        spec: spec.clone(),
        weights,
        thresholds,
        biases,
    }
}

fn solve_formulation(
    formulation: &Formulation,
    config: &SolverConfig,
    start: Option<Vec<f64>>,
) -> Result<Option<(f64, Status, Vec<f64>)>> {
    let result = match start {
        Some(x) => solve_with_start(formulation.model(), config, &x)?,
        None => solve(formulation.model(), config)?,
    };
    match (result.status, result.incumbent) {
        (Status::Optimal | Status::Feasible, Some(x)) => Ok(Some((result.objective, result.status, x))),
        (Status::Infeasible, _) => Ok(None),
        (Status::TimeLimitNoIncumbent, _) => Err(Error::NoIncumbent),
        (status, _) => Err(Error::Numerical(format!("subproblem ended with status {status:?}"))),
    }
}

/// Alternates the two subproblems from a seeded random start until a full
/// round brings no improvement. Starts whose first subproblem is infeasible
/// are redrawn up to `max_retries` times.
pub fn local_search(dataset: &Dataset, spec: &NetworkSpec, config: &LocalSearchConfig) -> Result<LocalSearchResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for redraws in 0..=config.max_retries {
        let init = random_params(spec, &mut rng);
        match local_search_from(dataset, spec, &init, config) {
            Err(Error::Infeasible(_)) => log::debug!("infeasible start, redrawing ({})", redraws + 1),
            Ok(mut result) => {
                result.redraws = redraws;
                return Ok(result);
            }
            Err(e) => return Err(e),
        }
    }
    Err(Error::Infeasible(format!(
        "the first subproblem was infeasible for {} random starts",
        config.max_retries + 1
    )))
}

/// Local search from a given start. Even layers and even hidden activations
/// of `init` form the first fixation.
pub fn local_search_from(
    dataset: &Dataset,
    spec: &NetworkSpec,
    init: &BdnnParams,
    config: &LocalSearchConfig,
) -> Result<LocalSearchResult> {
    if &init.spec != spec {
        return Err(Error::InvalidArgument("start parameters belong to a different network".into()));
    }
    let fixation = FixationState::from_params(init, dataset, Parity::Odd)?;
    let mut formulation = build_h1(dataset, spec, &fixation, &config.build)?;
    let start = formulation.encode(init, dataset)?;
    let Some((mut objective, status, mut x)) = solve_formulation(&formulation, &config.solver, start)? else {
        return Err(Error::Infeasible("the start admits no solution of the first subproblem".into()));
    };
    let mut trace = vec![TraceStep {
        round: 0,
        parity: Parity::Odd,
        objective,
        status,
    }];
    let mut best = (objective, formulation.decode_params(&x));
    let mut round_start = objective;
    let mut parity = Parity::Even;
    let mut rounds = 0;
    loop {
        let fixation = FixationState::from_solution(&formulation, &x, parity);
        let f = build_subproblem(dataset, spec, &fixation, &config.build, parity)?;
        // the current point, read through the new fixation, seeds the solve
        let layers: Vec<LayerFixing> = (0..spec.depth()).map(|l| formulation.layer_values(&x, l)).collect();
        let start = f.assignment(&layers, &formulation.activation_values(&x));
        let Some((obj, status, sol)) = solve_formulation(&f, &config.solver, Some(start))? else {
            // the previous solution is feasible here, so this is numerical trouble
            return Err(Error::Numerical("a subproblem lost the previous solution".into()));
        };
        trace.push(TraceStep {
            round: rounds,
            parity,
            objective: obj,
            status,
        });
        // a solve stopped at a limit may come back worse; keep the old point then
        if obj <= objective {
            objective = obj;
            formulation = f;
            x = sol;
            if objective < best.0 {
                best = (objective, formulation.decode_params(&x));
            }
        }
        if parity == Parity::Even {
            rounds += 1;
            let improved = objective < round_start - config.improvement_tol;
            round_start = objective;
            if !improved || config.max_rounds.is_some_and(|r| rounds >= r) {
                break;
            }
        }
        parity = parity.other();
    }
    Ok(LocalSearchResult {
        params: best.1,
        objective: best.0,
        trace,
        rounds,
        redraws: 0,
    })
}

/// Independent runs for `seeds`, solved concurrently.
pub fn local_search_restarts(
    dataset: &Dataset,
    spec: &NetworkSpec,
    config: &LocalSearchConfig,
    seeds: &[u64],
) -> Vec<Result<LocalSearchResult>> {
    std::thread::scope(|s| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                let cfg = LocalSearchConfig {
                    seed,
                    ..config.clone()
                };
                s.spawn(move || local_search(dataset, spec, &cfg))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Numerical("local search worker panicked".into()))))
            .collect()
    })
}
