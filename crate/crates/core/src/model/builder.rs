//! Compiles a training instance into a [`MilpModel`].
//!
//! Every layer `k` and unit contributes two rows per neuron:
//!
//! ```text
//! pre + margin <= M u + λ - ε        (u = 0 forces pre < λ)
//! pre - margin >= M (u - 1) + λ      (u = 1 forces pre >= λ)
//! ```
//!
//! where `pre` is `W^k` applied to the data point (first layer) or to the
//! previous activations. Products of a free weight and a free activation are
//! replaced by a variable `s` with the four McCormick rows, which are exact
//! because the activation is binary. Layers or activations may be fixed to
//! constants, which is how the local-search subproblems are built.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{loss_coefficient, BdnnParams, NetworkSpec, ThresholdMode, WeightDomain};
use crate::robust::{dual_norm, Norm, UncertaintySpec};

use super::{LinExpr, MilpModel, SecondOrderCone, Sense, VarKey};

/// `M_1 = n r + 1`.
pub fn big_m_first_layer(n: usize, r: f64) -> f64 {
    n as f64 * r + 1.0
}

/// `M_k = d_{k-1} + 1`.
pub fn big_m_layer(d_prev: usize) -> f64 {
    d_prev as f64 + 1.0
}

/// First-layer constant for a point with uncertainty radius `r_i`:
/// `max(n r + 1, n (r + r_i) + 1)`.
pub fn robust_big_m_first_layer(n: usize, r: f64, r_i: f64) -> f64 {
    big_m_first_layer(n, r).max(n as f64 * (r + r_i) + 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildOptions {
    /// Margin replacing strict inequalities.
    pub epsilon_strict: f64,
    /// Disjoint cells whose members share one activation pattern.
    pub partition: Option<Vec<Vec<usize>>>,
    /// Points whose first-layer rows and loss terms enter the model.
    pub batch: Option<Vec<usize>>,
    pub robust: Option<UncertaintySpec>,
    /// Emit second-order cones for an l2 uncertainty set instead of failing.
    /// The embedded solver cannot solve such models; they are for export.
    pub allow_cones: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            epsilon_strict: 1e-4,
            partition: None,
            batch: None,
            robust: None,
            allow_cones: false,
        }
    }
}

impl BuildOptions {
    fn validate(&self) -> Result<()> {
        if !(self.epsilon_strict > 0.0 && self.epsilon_strict.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "epsilon_strict must be positive, got {}",
                self.epsilon_strict
            )));
        }
        Ok(())
    }
}

/// One activation block: its first-layer points and the points whose loss is
/// charged to its output activations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Unit {
    pub points: Vec<usize>,
    pub loss_points: Vec<usize>,
}

/// Constant weights for one layer: rows include the bias as last column when
/// biases are enabled.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerFixing {
    pub rows: Vec<Vec<f64>>,
    pub threshold: f64,
}

/// Constant activations of one layer, indexed `[unit][neuron]`.
pub type ActivationFixing = Vec<Vec<u8>>;

/// Which layers and hidden activations are held constant.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FixingPlan {
    /// One entry per layer.
    pub layers: Vec<Option<LayerFixing>>,
    /// One entry per layer; the output layer is never fixed.
    pub activations: Vec<Option<ActivationFixing>>,
}

impl FixingPlan {
    pub fn free(depth: usize) -> Self {
        FixingPlan {
            layers: vec![None; depth],
            activations: vec![None; depth],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum WeightSlot {
    Fixed(f64),
    Box(usize),
    Ternary { pos: usize, neg: usize },
}

impl WeightSlot {
    fn expr(self) -> LinExpr {
        let mut e = LinExpr::new();
        match self {
            WeightSlot::Fixed(v) => {
                e.add_constant(v);
            }
            WeightSlot::Box(id) => {
                e.add(id, 1.0);
            }
            WeightSlot::Ternary { pos, neg } => {
                e.add(pos, 1.0).add(neg, -1.0);
            }
        }
        e
    }

    fn value(self, x: &[f64]) -> f64 {
        match self {
            WeightSlot::Fixed(v) => v,
            WeightSlot::Box(id) => x[id].clamp(-1.0, 1.0),
            WeightSlot::Ternary { pos, neg } => x[pos].round() - x[neg].round(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Slot {
    Fixed(f64),
    Var(usize),
}

impl Slot {
    fn expr(self) -> LinExpr {
        let mut e = LinExpr::new();
        match self {
            Slot::Fixed(v) => {
                e.add_constant(v);
            }
            Slot::Var(id) => {
                e.add(id, 1.0);
            }
        }
        e
    }
}

/// A compiled training model together with the bookkeeping needed to read
/// network parameters and activation patterns back out of a solution.
#[derive(Debug, Clone)]
pub struct Formulation {
    pub model: MilpModel,
    spec: NetworkSpec,
    units: Vec<Unit>,
    epsilon: f64,
    /// `[layer][row][col]`, bias as last column.
    weights: Vec<Vec<Vec<WeightSlot>>>,
    thresholds: Vec<Slot>,
    /// `[unit][layer][neuron]`.
    activations: Vec<Vec<Vec<Slot>>>,
    first_layer_big_m: Vec<Vec<f64>>,
}

impl Formulation {
    pub fn model(&self) -> &MilpModel {
        &self.model
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn units(&self) -> &[Unit] {
        &self.units
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// First-layer big-M used for each point of each unit.
    pub fn first_layer_big_m(&self) -> &[Vec<f64>] {
        &self.first_layer_big_m
    }

    /// Weight value, bias being column `d_layer`.
    pub fn weight_value(&self, x: &[f64], layer: usize, row: usize, col: usize) -> f64 {
        self.weights[layer][row][col].value(x)
    }

    pub fn threshold_value(&self, x: &[f64], layer: usize) -> f64 {
        match self.thresholds[layer] {
            Slot::Fixed(v) => v,
            Slot::Var(id) => x[id].clamp(-1.0, 1.0),
        }
    }

    /// Rounded activations `[unit][layer][neuron]`.
    pub fn activation_values(&self, x: &[f64]) -> Vec<Vec<Vec<u8>>> {
        self.activations
            .iter()
            .map(|layers| {
                layers
                    .iter()
                    .map(|neurons| {
                        neurons
                            .iter()
                            .map(|slot| match *slot {
                                Slot::Fixed(v) => v as u8,
                                Slot::Var(id) => u8::from(x[id] > 0.5),
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }

    /// The layer's weights and threshold exactly as they appear in `x`.
    pub fn layer_values(&self, x: &[f64], layer: usize) -> LayerFixing {
        LayerFixing {
            rows: self.weights[layer]
                .iter()
                .map(|row| row.iter().map(|w| w.value(x)).collect())
                .collect(),
            threshold: self.threshold_value(x, layer),
        }
    }

    /// Network parameters of a solution.
    ///
    /// Learned thresholds are lowered by `ε/2`: active rows satisfy
    /// `pre >= λ` only up to solver tolerance while inactive rows satisfy
    /// `pre <= λ - ε`, so the shifted threshold reproduces the solution's
    /// activations under exact inference. Continuous layers are rescaled when
    /// the shift leaves `[-1, 1]`.
    pub fn decode_params(&self, x: &[f64]) -> BdnnParams {
        let spec = &self.spec;
        let k = spec.depth();
        let mut weights = Vec::with_capacity(k);
        let mut biases = Vec::with_capacity(k);
        let mut thresholds = Vec::with_capacity(k);
        for layer in 0..k {
            let values = self.layer_values(x, layer);
            let fan_in = spec.layer_fan_in(layer);
            let mut rows: Vec<Vec<f64>> = values.rows.iter().map(|r| r[..fan_in].to_vec()).collect();
            let mut bias: Vec<f64> = values
                .rows
                .iter()
                .map(|r| if spec.use_bias { r[fan_in] } else { 0.0 })
                .collect();
            let mut lambda = values.threshold;
            if spec.threshold_mode == ThresholdMode::Learned {
                lambda -= self.epsilon / 2.0;
                if lambda < -1.0 {
                    match spec.weight_domain {
                        WeightDomain::BoxContinuous => {
                            let beta = -lambda;
                            rows.iter_mut().flatten().for_each(|w| *w /= beta);
                            bias.iter_mut().for_each(|w| *w /= beta);
                            lambda = -1.0;
                        }
                        WeightDomain::Ternary => lambda = -1.0,
                    }
                }
            }
            weights.push(rows);
            biases.push(bias);
            thresholds.push(lambda);
        }
        BdnnParams {
            spec: spec.clone(),
            weights,
            thresholds,
            biases: spec.use_bias.then_some(biases),
        }
    }

    /// Model point for the given layer values (augmented rows) and
    /// activations `[unit][layer][neuron]`. Parts fixed in the model are not
    /// read.
    pub fn assignment(&self, layers: &[LayerFixing], activations: &[Vec<Vec<u8>>]) -> Vec<f64> {
        let n = self.spec.input_dim();
        let cones = !self.model.cones.is_empty();
        self.model
            .variables
            .iter()
            .map(|v| match v.key {
                VarKey::Weight { layer, row, col } => layers[layer].rows[row][col],
                VarKey::WeightPos { layer, row, col } => layers[layer].rows[row][col].max(0.0),
                VarKey::WeightNeg { layer, row, col } => (-layers[layer].rows[row][col]).max(0.0),
                VarKey::Threshold { layer } => layers[layer].threshold,
                VarKey::Activation { unit, layer, neuron } => f64::from(activations[unit][layer][neuron]),
                VarKey::Product { layer, row, col, unit } => {
                    layers[layer].rows[row][col] * f64::from(activations[unit][layer - 1][col])
                }
                VarKey::AbsWeight { row, col } => layers[0].rows[row][col].abs(),
                VarKey::RowMaxWeight { row } => {
                    let w = &layers[0].rows[row][..n];
                    dual_norm(if cones { Norm::L2 } else { Norm::L1 }, w)
                }
            })
            .collect()
    }

    /// Model point of a concrete network, or `None` when it violates a row.
    ///
    /// Each unit takes the activations of its first point, so a cell whose
    /// points disagree, a pre-activation inside the strict margin, or an
    /// uncertified robust point all give `None`. The all-zero network is
    /// feasible for every exact, partitioned and robust model.
    pub fn encode(&self, params: &BdnnParams, dataset: &Dataset) -> Result<Option<Vec<f64>>> {
        if params.spec != self.spec {
            return Err(Error::InvalidParams("parameters belong to a different network".into()));
        }
        let k = self.spec.depth();
        let layers: Vec<LayerFixing> = (0..k)
            .map(|l| LayerFixing {
                rows: (0..self.spec.layer_width(l)).map(|j| params.augmented_row(l, j)).collect(),
                threshold: params.thresholds[l],
            })
            .collect();
        let activations = self
            .units
            .iter()
            .map(|unit| match unit.points.first() {
                Some(&p) => params.forward(&dataset.samples()[p]),
                None => Ok((0..k).map(|l| vec![0; self.spec.layer_width(l)]).collect()),
            })
            .collect::<Result<Vec<_>>>()?;
        let x = self.assignment(&layers, &activations);
        Ok(self.model.is_feasible(&x, 1e-9).then_some(x))
    }

    /// Largest `|s - w u|` over all product variables.
    pub fn mccormick_error(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for v in &self.model.variables {
            if let VarKey::Product { layer, row, col, unit } = v.key {
                let s = x[self.model.var(&v.key).expect("indexed")];
                let w = self.weight_value(x, layer, row, col);
                let u = match self.activations[unit][layer - 1][col] {
                    Slot::Fixed(v) => v,
                    Slot::Var(id) => x[id],
                };
                worst = worst.max((s - w * u).abs());
            }
        }
        worst
    }
}

fn check_instance(dataset: &Dataset, spec: &NetworkSpec) -> Result<()> {
    spec.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidDataset("empty dataset".into()));
    }
    if dataset.dim() != spec.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: spec.input_dim(),
            got: dataset.dim(),
        });
    }
    if let Some(&y) = dataset.labels().iter().find(|&&y| y >= spec.num_classes()) {
        return Err(Error::InvalidDataset(format!(
            "label {y} needs more than the {} network outputs",
            spec.num_classes()
        )));
    }
    Ok(())
}

fn point_radii(robust: Option<&UncertaintySpec>, m: usize) -> Result<Option<(Norm, Vec<f64>)>> {
    robust
        .map(|u| {
            u.validate()?;
            Ok((u.norm, u.radii_for(m)?))
        })
        .transpose()
}

/// Exact model: one activation block per training point.
pub fn build_exact(dataset: &Dataset, spec: &NetworkSpec, options: &BuildOptions) -> Result<Formulation> {
    if options.partition.is_some() {
        return Err(Error::InvalidArgument(
            "build_exact does not take a partition; use build_partitioned".into(),
        ));
    }
    let units = (0..dataset.len())
        .map(|i| Unit {
            points: vec![i],
            loss_points: vec![i],
        })
        .collect();
    build_with_fixings(dataset, spec, options, units, FixingPlan::free(spec.depth()))
}

/// Exact model with first-layer rows widened by the dual-norm margin.
pub fn build_robust(dataset: &Dataset, spec: &NetworkSpec, options: &BuildOptions) -> Result<Formulation> {
    if options.robust.is_none() {
        return Err(Error::InvalidArgument("build_robust needs an uncertainty spec".into()));
    }
    build_exact(dataset, spec, options)
}

/// Partitioned model: one activation block per cell, with first-layer rows
/// and loss terms only for batch points.
pub fn build_partitioned(dataset: &Dataset, spec: &NetworkSpec, options: &BuildOptions) -> Result<Formulation> {
    let units = partition_units(dataset.len(), options)?;
    build_with_fixings(dataset, spec, options, units, FixingPlan::free(spec.depth()))
}

fn partition_units(m: usize, options: &BuildOptions) -> Result<Vec<Unit>> {
    let partition = options
        .partition
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("build_partitioned needs a partition".into()))?;
    let mut seen = HashSet::new();
    for cell in partition {
        for &i in cell {
            if i >= m {
                return Err(Error::InvalidArgument(format!("partition index {i} out of range for {m} points")));
            }
            if !seen.insert(i) {
                return Err(Error::InvalidArgument(format!("partition cells overlap at point {i}")));
            }
        }
    }
    let batch: HashSet<usize> = match &options.batch {
        Some(batch) => {
            let mut set = HashSet::new();
            for &i in batch {
                if i >= m {
                    return Err(Error::InvalidArgument(format!("batch index {i} out of range for {m} points")));
                }
                if !set.insert(i) {
                    return Err(Error::InvalidArgument(format!("batch repeats point {i}")));
                }
            }
            set
        }
        None => (0..m).collect(),
    };
    Ok(partition
        .iter()
        .map(|cell| {
            let points: Vec<usize> = cell.iter().copied().filter(|i| batch.contains(i)).collect();
            Unit {
                loss_points: points.clone(),
                points,
            }
        })
        .collect())
}

/// General builder: explicit units and fixings.
pub fn build_with_fixings(
    dataset: &Dataset,
    spec: &NetworkSpec,
    options: &BuildOptions,
    units: Vec<Unit>,
    fixings: FixingPlan,
) -> Result<Formulation> {
    check_instance(dataset, spec)?;
    options.validate()?;
    let k = spec.depth();
    if fixings.layers.len() != k || fixings.activations.len() != k {
        return Err(Error::InvalidArgument(format!("fixing plan must cover {k} layers")));
    }
    if fixings.activations[k - 1].is_some() {
        return Err(Error::InvalidArgument("output activations cannot be fixed".into()));
    }
    let bias = usize::from(spec.use_bias);
    for (layer, fix) in fixings.layers.iter().enumerate() {
        if let Some(fix) = fix {
            let cols = spec.layer_fan_in(layer) + bias;
            if fix.rows.len() != spec.layer_width(layer) || fix.rows.iter().any(|r| r.len() != cols) {
                return Err(Error::InvalidArgument(format!("fixed layer {layer} has the wrong shape")));
            }
        }
    }
    for (layer, fix) in fixings.activations.iter().enumerate() {
        if let Some(fix) = fix {
            if fix.len() != units.len() || fix.iter().any(|u| u.len() != spec.layer_width(layer)) {
                return Err(Error::InvalidArgument(format!("fixed activations of layer {layer} have the wrong shape")));
            }
        }
    }
    let m = dataset.len();
    let radii = point_radii(options.robust.as_ref(), m)?;
    let eps = options.epsilon_strict;
    let n = spec.input_dim();
    let r = dataset.norm_bound();
    let mut model = MilpModel::new();

    // Weights and thresholds.
    let mut weights = Vec::with_capacity(k);
    let mut thresholds = Vec::with_capacity(k);
    for layer in 0..k {
        let cols = spec.layer_fan_in(layer) + bias;
        let slots: Vec<Vec<WeightSlot>> = (0..spec.layer_width(layer))
            .map(|row| {
                (0..cols)
                    .map(|col| match &fixings.layers[layer] {
                        Some(fix) => WeightSlot::Fixed(fix.rows[row][col]),
                        None => match spec.weight_domain {
                            WeightDomain::BoxContinuous => {
                                WeightSlot::Box(model.add_continuous(VarKey::Weight { layer, row, col }, -1.0, 1.0))
                            }
                            WeightDomain::Ternary => {
                                let pos = model.add_binary(VarKey::WeightPos { layer, row, col });
                                let neg = model.add_binary(VarKey::WeightNeg { layer, row, col });
                                WeightSlot::Ternary { pos, neg }
                            }
                        },
                    })
                    .collect()
            })
            .collect();
        weights.push(slots);
        thresholds.push(match (&fixings.layers[layer], spec.threshold_mode) {
            (Some(fix), _) => Slot::Fixed(fix.threshold),
            (None, ThresholdMode::FixedZero) => Slot::Fixed(0.0),
            (None, ThresholdMode::Learned) => Slot::Var(model.add_continuous(VarKey::Threshold { layer }, -1.0, 1.0)),
        });
    }

    // Activations.
    let activations: Vec<Vec<Vec<Slot>>> = (0..units.len())
        .map(|unit| {
            (0..k)
                .map(|layer| {
                    (0..spec.layer_width(layer))
                        .map(|neuron| match &fixings.activations[layer] {
                            Some(fix) => Slot::Fixed(f64::from(fix[unit][neuron])),
                            None => Slot::Var(model.add_binary(VarKey::Activation { unit, layer, neuron })),
                        })
                        .collect()
                })
                .collect()
        })
        .collect();

    // Robust auxiliaries: dual-norm bounds for each free first-layer row.
    let robust_active = radii.as_ref().is_some_and(|(_, rs)| rs.iter().any(|&ri| ri > 0.0));
    let mut margin_exprs: Vec<LinExpr> = vec![LinExpr::new(); spec.layer_width(0)];
    if let (true, Some((norm, _))) = (robust_active, &radii) {
        for (row, margin) in margin_exprs.iter_mut().enumerate() {
            let w_row: Vec<WeightSlot> = weights[0][row][..n].to_vec();
            if let Some(fix) = &fixings.layers[0] {
                margin.add_constant(dual_norm(*norm, &fix.rows[row][..n]));
                continue;
            }
            match norm {
                Norm::Linf => {
                    // dual l1: sum_c t_c with t_c >= |w_c|
                    for (col, w) in w_row.iter().enumerate() {
                        let t = model.add_continuous(VarKey::AbsWeight { row, col }, 0.0, 1.0);
                        add_abs_rows(&mut model, t, &w.expr());
                        margin.add(t, 1.0);
                    }
                }
                Norm::L1 => {
                    // dual linf: t >= |w_c| for every c
                    let t = model.add_continuous(VarKey::RowMaxWeight { row }, 0.0, 1.0);
                    for w in &w_row {
                        add_abs_rows(&mut model, t, &w.expr());
                    }
                    margin.add(t, 1.0);
                }
                Norm::L2 => {
                    if !options.allow_cones {
                        return Err(Error::Unsupported(
                            "an l2 uncertainty set gives a second-order cone model; the embedded solver is \
                             linear only. Export it with `bdnn export --formulation robust --norm l2` for a \
                             cone-capable solver"
                                .into(),
                        ));
                    }
                    let t = model.add_continuous(VarKey::RowMaxWeight { row }, 0.0, (n as f64).sqrt());
                    model.cones.push(SecondOrderCone {
                        bound: t,
                        members: w_row.iter().map(|w| w.expr().terms).collect(),
                    });
                    margin.add(t, 1.0);
                }
            }
        }
    }

    // Products for free weights times free activations.
    let mut products: Vec<Vec<Vec<Vec<Option<usize>>>>> = vec![Vec::new(); k];
    for layer in 1..k {
        let weights_free = fixings.layers[layer].is_none();
        let inputs_free = fixings.activations[layer - 1].is_none();
        products[layer] = (0..units.len())
            .map(|unit| {
                (0..spec.layer_width(layer))
                    .map(|row| {
                        (0..spec.layer_fan_in(layer))
                            .map(|col| {
                                (weights_free && inputs_free)
                                    .then(|| model.add_continuous(VarKey::Product { layer, row, col, unit }, -1.0, 1.0))
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
    }
    for layer in 1..k {
        for (unit, rows) in products[layer].iter().enumerate() {
            for (row, cols) in rows.iter().enumerate() {
                for (col, s) in cols.iter().enumerate() {
                    let Some(s) = *s else { continue };
                    let Slot::Var(u) = activations[unit][layer - 1][col] else {
                        unreachable!("products only exist for free inputs")
                    };
                    add_mccormick(&mut model, s, u, &weights[layer][row][col].expr());
                }
            }
        }
    }

    // Ternary exclusivity.
    for layer in 0..k {
        for row in &weights[layer] {
            for w in row {
                if let WeightSlot::Ternary { pos, neg } = *w {
                    let mut e = LinExpr::new();
                    e.add(pos, 1.0).add(neg, 1.0);
                    model.add_constraint(&e, Sense::Le, 1.0);
                }
            }
        }
    }

    // Activation rows.
    let mut first_layer_big_m = Vec::with_capacity(units.len());
    for (unit_id, unit) in units.iter().enumerate() {
        let mut unit_m = Vec::with_capacity(unit.points.len());
        for &p in &unit.points {
            let x = &dataset.samples()[p];
            let r_p = radii.as_ref().map_or(0.0, |(_, rs)| rs[p]);
            let big_m = if r_p > 0.0 {
                robust_big_m_first_layer(n, r, r_p)
            } else {
                big_m_first_layer(n, r)
            } + bias as f64
                + eps;
            unit_m.push(big_m);
            for neuron in 0..spec.layer_width(0) {
                let mut pre = LinExpr::new();
                for (col, w) in weights[0][neuron].iter().enumerate() {
                    let input = if col < n { x[col] } else { 1.0 };
                    pre.add_scaled(&w.expr(), input);
                }
                let margin = if r_p > 0.0 {
                    let mut e = LinExpr::new();
                    e.add_scaled(&margin_exprs[neuron], r_p);
                    e
                } else {
                    LinExpr::new()
                };
                add_activation_rows(
                    &mut model,
                    &pre,
                    &margin,
                    activations[unit_id][0][neuron],
                    thresholds[0],
                    big_m,
                    eps,
                );
            }
        }
        first_layer_big_m.push(unit_m);
        for layer in 1..k {
            let big_m = big_m_layer(spec.layer_fan_in(layer)) + bias as f64 + eps;
            for neuron in 0..spec.layer_width(layer) {
                let mut pre = LinExpr::new();
                for (col, w) in weights[layer][neuron].iter().enumerate() {
                    if col == spec.layer_fan_in(layer) {
                        pre.add_scaled(&w.expr(), 1.0);
                        continue;
                    }
                    if let Some(s) = products[layer][unit_id][neuron][col] {
                        pre.add(s, 1.0);
                        continue;
                    }
                    match (*w, activations[unit_id][layer - 1][col]) {
                        (WeightSlot::Fixed(wv), Slot::Var(u)) => {
                            pre.add(u, wv);
                        }
                        (w, Slot::Fixed(uv)) => {
                            pre.add_scaled(&w.expr(), uv);
                        }
                        (_, Slot::Var(_)) => unreachable!("free product without a product variable"),
                    }
                }
                add_activation_rows(
                    &mut model,
                    &pre,
                    &LinExpr::new(),
                    activations[unit_id][layer][neuron],
                    thresholds[layer],
                    big_m,
                    eps,
                );
            }
        }
    }

    // Loss on the output activations.
    let c = spec.num_classes();
    let mut objective = LinExpr::new();
    for (unit_id, unit) in units.iter().enumerate() {
        for &p in &unit.loss_points {
            let y = dataset.labels()[p];
            for j in 0..c {
                objective.add_scaled(&activations[unit_id][k - 1][j].expr(), loss_coefficient(y, j));
            }
        }
    }
    model.add_objective(&objective);

    Ok(Formulation {
        model,
        spec: spec.clone(),
        units,
        epsilon: eps,
        weights,
        thresholds,
        activations,
        first_layer_big_m,
    })
}

/// `t >= w` and `t >= -w`.
fn add_abs_rows(model: &mut MilpModel, t: usize, w: &LinExpr) {
    let mut upper = LinExpr::new();
    upper.add(t, 1.0).add_scaled(w, -1.0);
    model.add_constraint(&upper, Sense::Ge, 0.0);
    let mut lower = LinExpr::new();
    lower.add(t, 1.0).add_scaled(w, 1.0);
    model.add_constraint(&lower, Sense::Ge, 0.0);
}

/// Exact linearization of `s = w u` for `w ∈ [-1, 1]`, `u ∈ {0, 1}`.
fn add_mccormick(model: &mut MilpModel, s: usize, u: usize, w: &LinExpr) {
    // s <= u
    let mut e = LinExpr::new();
    e.add(s, 1.0).add(u, -1.0);
    model.add_constraint(&e, Sense::Le, 0.0);
    // s >= -u
    let mut e = LinExpr::new();
    e.add(s, 1.0).add(u, 1.0);
    model.add_constraint(&e, Sense::Ge, 0.0);
    // s <= w + 1 - u
    let mut e = LinExpr::new();
    e.add(s, 1.0).add_scaled(w, -1.0).add(u, 1.0);
    model.add_constraint(&e, Sense::Le, 1.0);
    // s >= w - 1 + u
    let mut e = LinExpr::new();
    e.add(s, 1.0).add_scaled(w, -1.0).add(u, -1.0);
    model.add_constraint(&e, Sense::Ge, -1.0);
}

/// The two big-M rows tying one activation to its pre-activation.
fn add_activation_rows(
    model: &mut MilpModel,
    pre: &LinExpr,
    margin: &LinExpr,
    act: Slot,
    threshold: Slot,
    big_m: f64,
    eps: f64,
) {
    // pre + margin - M u - λ <= -ε
    let mut upper = pre.clone();
    upper.add_scaled(margin, 1.0);
    upper.add_scaled(&act.expr(), -big_m);
    upper.add_scaled(&threshold.expr(), -1.0);
    model.add_constraint(&upper, Sense::Le, -eps);
    // pre - margin - M u - λ >= -M
    let mut lower = pre.clone();
    lower.add_scaled(margin, -1.0);
    lower.add_scaled(&act.expr(), -big_m);
    lower.add_scaled(&threshold.expr(), -1.0);
    model.add_constraint(&lower, Sense::Ge, -big_m);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::WeightDomain;
    use crate::robust::Radii;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(widths: &[usize], domain: WeightDomain, mode: ThresholdMode, bias: bool) -> NetworkSpec {
        NetworkSpec::new(widths.to_vec(), domain, bias, mode).unwrap()
    }

    fn data(m: usize, n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..m)
            .map(|_| (0..n).map(|_| rng.random_range(-8i32..=8) as f64 / 4.0).collect())
            .collect();
        let labels = (0..m).map(|i| i % 2).collect();
        Dataset::with_numbered_classes(samples, labels, 2).unwrap()
    }

    #[test]
    fn big_m_formulas() {
        assert_eq!(big_m_first_layer(100, 10.0), 1001.0);
        assert_eq!(big_m_first_layer(1, 0.0), 1.0);
        assert_eq!(big_m_first_layer(9, 1.0), 10.0);
        assert_eq!(big_m_layer(50), 51.0);
        assert_eq!(big_m_layer(1), 2.0);
        assert_eq!(big_m_layer(100), 101.0);
        assert_eq!(robust_big_m_first_layer(4, 1.0, 0.5), 7.0);
        assert_eq!(robust_big_m_first_layer(4, 1.0, 0.0), big_m_first_layer(4, 1.0));
    }

    #[test]
    fn exact_variable_counts() {
        let s = spec(&[2, 2, 2], WeightDomain::BoxContinuous, ThresholdMode::Learned, false);
        let f = build_exact(&data(3, 2, 0), &s, &BuildOptions::default()).unwrap();
        let m = f.model();
        assert_eq!(m.num_activation_vars(), 12);
        assert_eq!(m.num_product_vars(), 12);
        assert_eq!(m.num_weight_entries(), 8);
        assert_eq!(m.num_threshold_vars(), 2);
        m.validate().unwrap();

        let single = spec(&[2, 2], WeightDomain::BoxContinuous, ThresholdMode::Learned, false);
        let f = build_exact(&data(1, 2, 0), &single, &BuildOptions::default()).unwrap();
        assert_eq!(f.model().num_product_vars(), 0);
    }

    #[test]
    fn ternary_and_fixed_zero_counts() {
        let s = spec(&[2, 3, 2], WeightDomain::Ternary, ThresholdMode::FixedZero, true);
        let f = build_exact(&data(4, 2, 0), &s, &BuildOptions::default()).unwrap();
        let m = f.model();
        assert_eq!(m.num_threshold_vars(), 0);
        assert_eq!(m.num_weight_entries(), s.num_weight_entries());
        assert_eq!(m.num_weight_entries(), 3 * 3 + 2 * 4);
        // two binaries per ternary weight, plus activations
        assert_eq!(m.num_integer(), 2 * 17 + 4 * 5);
        assert_eq!(m.num_product_vars(), 4 * 2 * 3);
    }

    #[test]
    fn partitioned_counts() {
        let s = spec(&[2, 2, 2], WeightDomain::BoxContinuous, ThresholdMode::Learned, false);
        let d = data(5, 2, 1);
        let one = BuildOptions {
            partition: Some(vec![(0..5).collect()]),
            ..BuildOptions::default()
        };
        assert_eq!(build_partitioned(&d, &s, &one).unwrap().model().num_activation_vars(), 4);
        let two = BuildOptions {
            partition: Some(vec![vec![0, 2, 4], vec![1, 3]]),
            batch: Some(vec![0, 1]),
            ..BuildOptions::default()
        };
        let f = build_partitioned(&d, &s, &two).unwrap();
        assert_eq!(f.model().num_activation_vars(), 8);
        assert_eq!(f.units()[0].points, vec![0]);
        assert_eq!(f.units()[1].points, vec![1]);
    }

    #[test]
    fn partition_errors() {
        let s = spec(&[2, 2], WeightDomain::BoxContinuous, ThresholdMode::Learned, false);
        let d = data(4, 2, 1);
        let overlap = BuildOptions {
            partition: Some(vec![vec![0, 1], vec![1, 2]]),
            ..BuildOptions::default()
        };
        assert!(build_partitioned(&d, &s, &overlap).is_err());
        let bad_batch = BuildOptions {
            partition: Some(vec![vec![0, 1, 2, 3]]),
            batch: Some(vec![9]),
            ..BuildOptions::default()
        };
        assert!(build_partitioned(&d, &s, &bad_batch).is_err());
        assert!(build_partitioned(&d, &s, &BuildOptions::default()).is_err());
        assert!(build_exact(&d, &s, &overlap).is_err());
    }

    #[test]
    fn dimension_errors() {
        let s = spec(&[3, 2], WeightDomain::BoxContinuous, ThresholdMode::Learned, false);
        assert!(matches!(
            build_exact(&data(2, 2, 0), &s, &BuildOptions::default()),
            Err(Error::DimensionMismatch { .. })
        ));
        let bad_eps = BuildOptions {
            epsilon_strict: 0.0,
            ..BuildOptions::default()
        };
        let s = spec(&[2, 2], WeightDomain::BoxContinuous, ThresholdMode::Learned, false);
        assert!(build_exact(&data(2, 2, 0), &s, &bad_eps).is_err());
    }

    /// Assignment of every model variable induced by concrete parameters.
    fn assignment_from_params(f: &Formulation, p: &BdnnParams, d: &Dataset) -> Vec<f64> {
        let model = f.model();
        let mut x = vec![0.0; model.num_vars()];
        let traces: Vec<_> = d.samples().iter().map(|s| p.forward(s).unwrap()).collect();
        for (id, v) in model.variables.iter().enumerate() {
            x[id] = match v.key {
                VarKey::Weight { layer, row, col } => p.augmented_row(layer, row)[col],
                VarKey::WeightPos { layer, row, col } => p.augmented_row(layer, row)[col].max(0.0),
                VarKey::WeightNeg { layer, row, col } => (-p.augmented_row(layer, row)[col]).max(0.0),
                VarKey::Threshold { layer } => p.thresholds[layer],
                VarKey::Activation { unit, layer, neuron } => f64::from(traces[unit][layer][neuron]),
                VarKey::Product { layer, row, col, unit } => {
                    p.augmented_row(layer, row)[col] * f64::from(traces[unit][layer - 1][col])
                }
                VarKey::AbsWeight { row, col } => p.weights[0][row][col].abs(),
                VarKey::RowMaxWeight { row } => p.weights[0][row].iter().fold(0.0, |a: f64, w| a.max(w.abs())),
            };
        }
        x
    }

    fn random_params(s: &NetworkSpec, rng: &mut ChaCha8Rng) -> BdnnParams {
        let draw = |rng: &mut ChaCha8Rng| match s.weight_domain {
            WeightDomain::Ternary => rng.random_range(-1i32..=1) as f64,
            WeightDomain::BoxContinuous => rng.random_range(-4i32..=4) as f64 / 4.0,
        };
        let weights = (0..s.depth())
            .map(|l| {
                (0..s.layer_width(l))
                    .map(|_| (0..s.layer_fan_in(l)).map(|_| draw(rng)).collect())
                    .collect()
            })
            .collect();
        let thresholds = (0..s.depth())
            .map(|_| match s.threshold_mode {
                ThresholdMode::FixedZero => 0.0,
                ThresholdMode::Learned => rng.random_range(-4i32..=4) as f64 / 8.0,
            })
            .collect();
        let biases = s
            .use_bias
            .then(|| (0..s.depth()).map(|l| (0..s.layer_width(l)).map(|_| draw(rng)).collect()).collect());
        BdnnParams::new(s.clone(), weights, thresholds, biases).unwrap()
    }

    /// Whether every first-layer and hidden pre-activation is at least ε away
    /// from its threshold on the inactive side.
    fn has_margin(p: &BdnnParams, d: &Dataset, eps: f64) -> bool {
        d.samples().iter().all(|x| {
            let mut input = x.clone();
            for l in 0..p.spec.depth() {
                let pre = p.pre_activation(l, &input);
                let lambda = p.thresholds[l];
                if pre.iter().any(|&a| a < lambda && a > lambda - eps) {
                    return false;
                }
                input = pre.iter().map(|&a| f64::from(a >= lambda)).collect();
            }
            true
        })
    }

    #[test]
    fn forward_trace_is_feasible_and_objective_is_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..60 {
            let domain = if trial % 2 == 0 { WeightDomain::Ternary } else { WeightDomain::BoxContinuous };
            let mode = if trial % 3 == 0 { ThresholdMode::FixedZero } else { ThresholdMode::Learned };
            let s = spec(&[2, 3, 2, 2], domain, mode, trial % 4 == 1);
            let d = data(4, 2, trial);
            let f = build_exact(&d, &s, &BuildOptions::default()).unwrap();
            let p = random_params(&s, &mut rng);
            if !has_margin(&p, &d, 1e-4) {
                continue;
            }
            let x = assignment_from_params(&f, &p, &d);
            assert!(f.model().is_feasible(&x, 1e-9), "trial {trial}: violation {}", f.model().max_violation(&x));
            let loss = p.total_loss(d.samples(), d.labels()).unwrap();
            assert!((f.model().objective_value(&x).unwrap() - loss).abs() < 1e-12);
            assert!(f.mccormick_error(&x) < 1e-12);
        }
    }

    #[test]
    fn flipped_activation_is_infeasible() {
        let s = spec(&[2, 2, 2], WeightDomain::Ternary, ThresholdMode::FixedZero, false);
        let d = data(3, 2, 5);
        let f = build_exact(&d, &s, &BuildOptions::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = loop {
            let p = random_params(&s, &mut rng);
            if has_margin(&p, &d, 1e-4) {
                break p;
            }
        };
        let mut x = assignment_from_params(&f, &p, &d);
        let u = f.model().var(&VarKey::Activation { unit: 0, layer: 0, neuron: 0 }).unwrap();
        x[u] = 1.0 - x[u];
        assert!(!f.model().is_feasible(&x, 1e-9));
    }

    #[test]
    fn zero_weights_are_feasible_for_any_partition() {
        let s = spec(&[2, 2, 2], WeightDomain::Ternary, ThresholdMode::Learned, false);
        let d = data(6, 2, 9);
        let opts = BuildOptions {
            partition: Some(vec![vec![0, 3], vec![1, 4, 5], vec![2]]),
            ..BuildOptions::default()
        };
        let f = build_partitioned(&d, &s, &opts).unwrap();
        let mut x = vec![0.0; f.model().num_vars()];
        for (id, v) in f.model().variables.iter().enumerate() {
            if let VarKey::Activation { .. } = v.key {
                x[id] = 1.0;
            }
            if let VarKey::Product { .. } = v.key {
                x[id] = 0.0;
            }
        }
        assert!(f.model().is_feasible(&x, 1e-12));
        assert_eq!(f.encode(&BdnnParams::zeros(&s), &d).unwrap(), Some(x));
    }

    #[test]
    fn encode_matches_the_forward_assignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut encoded = 0;
        for trial in 0..40 {
            let domain = if trial % 2 == 0 { WeightDomain::Ternary } else { WeightDomain::BoxContinuous };
            let s = spec(&[2, 3, 2], domain, ThresholdMode::Learned, trial % 3 == 0);
            let d = data(4, 2, trial);
            let f = build_exact(&d, &s, &BuildOptions::default()).unwrap();
            let p = random_params(&s, &mut rng);
            match f.encode(&p, &d).unwrap() {
                Some(x) => {
                    encoded += 1;
                    assert_eq!(x, assignment_from_params(&f, &p, &d));
                }
                None => assert!(!has_margin(&p, &d, 1e-4)),
            }
        }
        assert!(encoded > 10);
    }

    #[test]
    fn zero_network_encodes_for_every_formulation() {
        for bias in [false, true] {
            let s = spec(&[2, 2, 2], WeightDomain::BoxContinuous, ThresholdMode::Learned, bias);
            let zeros = BdnnParams::zeros(&s);
            let d = data(5, 2, 4);
            let exact = build_exact(&d, &s, &BuildOptions::default()).unwrap();
            assert!(exact.encode(&zeros, &d).unwrap().is_some());
            let part = BuildOptions {
                partition: Some(vec![vec![0, 2, 4], vec![1, 3]]),
                batch: Some(vec![1, 2]),
                ..BuildOptions::default()
            };
            assert!(build_partitioned(&d, &s, &part).unwrap().encode(&zeros, &d).unwrap().is_some());
            for norm in [Norm::Linf, Norm::L1] {
                let robust = BuildOptions {
                    robust: Some(UncertaintySpec::uniform(norm, 0.3).unwrap()),
                    ..BuildOptions::default()
                };
                assert!(build_robust(&d, &s, &robust).unwrap().encode(&zeros, &d).unwrap().is_some());
            }
        }
        let other = spec(&[3, 2, 2], WeightDomain::Ternary, ThresholdMode::Learned, false);
        let d = data(3, 2, 0);
        let f = build_exact(&d, &spec(&[2, 2, 2], WeightDomain::Ternary, ThresholdMode::Learned, false), &BuildOptions::default()).unwrap();
        assert!(f.encode(&BdnnParams::zeros(&other), &d).is_err());
    }

    #[test]
    fn zero_radius_robust_model_equals_exact() {
        let s = spec(&[3, 2, 2], WeightDomain::Ternary, ThresholdMode::Learned, true);
        let d = data(4, 3, 2);
        let exact = build_exact(&d, &s, &BuildOptions::default()).unwrap();
        for norm in [Norm::Linf, Norm::L1, Norm::L2] {
            let robust = build_robust(
                &d,
                &s,
                &BuildOptions {
                    robust: Some(UncertaintySpec {
                        norm,
                        radii: Radii::Uniform(0.0),
                    }),
                    ..BuildOptions::default()
                },
            )
            .unwrap();
            assert_eq!(robust.model(), exact.model());
        }
    }

    #[test]
    fn linf_margin_enters_first_layer_rows() {
        // fixed first layer W = [[1, -2]], radius 0.5 -> margin 0.5 * 3
        let s = spec(&[2, 1, 2], WeightDomain::BoxContinuous, ThresholdMode::FixedZero, false);
        let d = Dataset::with_numbered_classes(vec![vec![0.25, 0.0]], vec![0], 2).unwrap();
        let mut fixings = FixingPlan::free(2);
        fixings.layers[0] = Some(LayerFixing {
            rows: vec![vec![1.0, -2.0]],
            threshold: 0.0,
        });
        let units = vec![Unit {
            points: vec![0],
            loss_points: vec![0],
        }];
        let robust = BuildOptions {
            robust: Some(UncertaintySpec {
                norm: Norm::Linf,
                radii: Radii::Uniform(0.5),
            }),
            ..BuildOptions::default()
        };
        let plain = build_with_fixings(&d, &s, &BuildOptions::default(), units.clone(), fixings.clone()).unwrap();
        let f = build_with_fixings(&d, &s, &robust, units, fixings).unwrap();
        // the first-layer rows only involve u[0][0][0] once the layer is fixed
        let rows = |g: &Formulation| -> Vec<(Sense, f64)> {
            let u = g.model().var(&VarKey::Activation { unit: 0, layer: 0, neuron: 0 }).unwrap();
            g.model()
                .constraints
                .iter()
                .filter(|c| c.terms.len() == 1 && c.terms[0].0 == u)
                .map(|c| (c.sense, c.rhs))
                .collect()
        };
        let (p, r) = (rows(&plain), rows(&f));
        assert_eq!(p.len(), 2);
        assert_eq!((p[0].0, r[0].0), (Sense::Le, Sense::Le));
        assert!((p[0].1 - r[0].1 - 1.5).abs() < 1e-12);
        // the lower row's right-hand side also carries -M
        let (mp, mr) = (plain.first_layer_big_m()[0][0], f.first_layer_big_m()[0][0]);
        assert!(((r[1].1 + mr) - (p[1].1 + mp) - 1.5).abs() < 1e-12);
        let r = d.norm_bound();
        assert_eq!(f.first_layer_big_m()[0][0], robust_big_m_first_layer(2, r, 0.5) + 1e-4);
    }

    #[test]
    fn free_linf_margin_uses_abs_variables() {
        let s = spec(&[2, 2, 2], WeightDomain::BoxContinuous, ThresholdMode::Learned, true);
        let d = data(3, 2, 4);
        let opts = BuildOptions {
            robust: Some(UncertaintySpec {
                norm: Norm::Linf,
                radii: Radii::Uniform(0.25),
            }),
            ..BuildOptions::default()
        };
        let f = build_robust(&d, &s, &opts).unwrap();
        // one t per first-layer weight, bias excluded
        assert_eq!(f.model().count_vars(|k| matches!(k, VarKey::AbsWeight { .. })), 4);
        let l1 = BuildOptions {
            robust: Some(UncertaintySpec {
                norm: Norm::L1,
                radii: Radii::Uniform(0.25),
            }),
            ..BuildOptions::default()
        };
        let f = build_robust(&d, &s, &l1).unwrap();
        assert_eq!(f.model().count_vars(|k| matches!(k, VarKey::RowMaxWeight { .. })), 2);
    }

    #[test]
    fn l2_needs_cone_support() {
        let s = spec(&[2, 2], WeightDomain::BoxContinuous, ThresholdMode::Learned, false);
        let d = data(2, 2, 4);
        let mut opts = BuildOptions {
            robust: Some(UncertaintySpec {
                norm: Norm::L2,
                radii: Radii::Uniform(0.1),
            }),
            ..BuildOptions::default()
        };
        assert!(matches!(build_robust(&d, &s, &opts), Err(Error::Unsupported(_))));
        opts.allow_cones = true;
        let f = build_robust(&d, &s, &opts).unwrap();
        assert_eq!(f.model().cones.len(), 2);
    }

    #[test]
    fn robust_rows_exclude_what_exact_rows_allow() {
        // Enumerate every ternary single-layer network on a tiny instance: the
        // feasible parameter set of the robust model is inside the exact one.
        let s = spec(&[2, 2], WeightDomain::Ternary, ThresholdMode::FixedZero, false);
        let d = Dataset::with_numbered_classes(vec![vec![0.5, -0.25], vec![-0.75, 0.5]], vec![0, 1], 2).unwrap();
        let exact = build_exact(&d, &s, &BuildOptions::default()).unwrap();
        let robust = build_robust(
            &d,
            &s,
            &BuildOptions {
                robust: Some(UncertaintySpec {
                    norm: Norm::Linf,
                    radii: Radii::Uniform(0.25),
                }),
                ..BuildOptions::default()
            },
        )
        .unwrap();
        let mut robust_count = 0;
        let mut exact_count = 0;
        for code in 0..3usize.pow(4) {
            let mut c = code;
            let mut w = vec![vec![0.0; 2]; 2];
            for cell in w.iter_mut().flatten() {
                *cell = (c % 3) as f64 - 1.0;
                c /= 3;
            }
            let p = BdnnParams::new(s.clone(), vec![w], vec![0.0], None).unwrap();
            let xe = assignment_from_params(&exact, &p, &d);
            let xr = assignment_from_params(&robust, &p, &d);
            let e_ok = exact.model().is_feasible(&xe, 1e-9);
            let r_ok = robust.model().is_feasible(&xr, 1e-9);
            assert!(!r_ok || e_ok);
            robust_count += usize::from(r_ok);
            exact_count += usize::from(e_ok);
        }
        assert!(robust_count < exact_count);
    }
}
