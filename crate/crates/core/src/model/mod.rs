//! Mixed-integer linear models and the training formulations compiled into
//! them.

mod builder;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use builder::{
    big_m_first_layer, big_m_layer, build_exact, build_partitioned, build_robust, robust_big_m_first_layer,
    ActivationFixing, BuildOptions, Formulation, LayerFixing, Unit,
};
pub use builder::{build_with_fixings, FixingPlan};

/// Structured variable key. Layers and rows are 0-based; `unit` is a data
/// point in the exact model and a partition cell in the partitioned model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum VarKey {
    /// Continuous weight `W[layer][row][col]`; the bias is column `d_{layer}`.
    Weight { layer: usize, row: usize, col: usize },
    /// Positive part of a ternary weight.
    WeightPos { layer: usize, row: usize, col: usize },
    /// Negative part of a ternary weight.
    WeightNeg { layer: usize, row: usize, col: usize },
    Threshold { layer: usize },
    /// Activation `u[unit][layer][neuron]`.
    Activation { unit: usize, layer: usize, neuron: usize },
    /// Linearized product `W[layer][row][col] * u[unit][layer-1][col]`.
    Product { layer: usize, row: usize, col: usize, unit: usize },
    /// `|W[0][row][col]|` for the dual-l1 robust margin.
    AbsWeight { row: usize, col: usize },
    /// `max_col |W[0][row][col]|` for the dual-linf robust margin.
    RowMaxWeight { row: usize },
}

impl fmt::Display for VarKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            VarKey::Weight { layer, row, col } => write!(f, "W[{layer}][{row}][{col}]"),
            VarKey::WeightPos { layer, row, col } => write!(f, "Wp[{layer}][{row}][{col}]"),
            VarKey::WeightNeg { layer, row, col } => write!(f, "Wn[{layer}][{row}][{col}]"),
            VarKey::Threshold { layer } => write!(f, "lambda[{layer}]"),
            VarKey::Activation { unit, layer, neuron } => write!(f, "u[{unit}][{layer}][{neuron}]"),
            VarKey::Product { layer, row, col, unit } => write!(f, "s[{layer}][{row}][{col}][{unit}]"),
            VarKey::AbsWeight { row, col } => write!(f, "t[{row}][{col}]"),
            VarKey::RowMaxWeight { row } => write!(f, "t[{row}]"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VarKind {
    Continuous,
    Binary,
    Integer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variable {
    pub key: VarKey,
    pub lower: f64,
    pub upper: f64,
    pub kind: VarKind,
}

impl Variable {
    pub fn is_integer(&self) -> bool {
        self.kind != VarKind::Continuous
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sense {
    Le,
    Ge,
    Eq,
}

/// `Σ coef·x  sense  rhs`, terms sorted by variable index without duplicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub terms: Vec<(usize, f64)>,
    pub sense: Sense,
    pub rhs: f64,
}

impl Constraint {
    pub fn activity(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|&(j, a)| a * x[j]).sum()
    }

    /// Amount by which `x` violates the row, 0 when satisfied.
    pub fn violation(&self, x: &[f64]) -> f64 {
        let lhs = self.activity(x);
        match self.sense {
            Sense::Le => (lhs - self.rhs).max(0.0),
            Sense::Ge => (self.rhs - lhs).max(0.0),
            Sense::Eq => (lhs - self.rhs).abs(),
        }
    }
}

/// Affine expression used while emitting rows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinExpr {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl LinExpr {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn constant(c: f64) -> Self {
        LinExpr {
            terms: Vec::new(),
            constant: c,
        }
    }

    pub fn add(&mut self, var: usize, coef: f64) -> &mut Self {
        if coef != 0.0 {
            self.terms.push((var, coef));
        }
        self
    }

    pub fn add_constant(&mut self, c: f64) -> &mut Self {
        self.constant += c;
        self
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &LinExpr, scale: f64) -> &mut Self {
        for &(j, a) in &other.terms {
            self.add(j, a * scale);
        }
        self.constant += other.constant * scale;
        self
    }

    /// Sorted terms with duplicates merged and zeros dropped.
    fn normalized_terms(&self) -> Vec<(usize, f64)> {
        let mut merged: BTreeMap<usize, f64> = BTreeMap::new();
        for &(j, a) in &self.terms {
            *merged.entry(j).or_insert(0.0) += a;
        }
        merged.into_iter().filter(|&(_, a)| a != 0.0).collect()
    }
}

/// A minimization MILP with a structured variable index.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MilpModel {
    pub variables: Vec<Variable>,
    pub constraints: Vec<Constraint>,
    /// Sparse objective coefficients, sorted by variable index.
    pub objective: Vec<(usize, f64)>,
    pub objective_offset: f64,
    /// Second-order cones; only export handles these.
    #[serde(default)]
    pub cones: Vec<SecondOrderCone>,
    #[serde(skip)]
    index: BTreeMap<VarKey, usize>,
}

/// `||(e_1, ..., e_k)||_2 <= x_bound` with each `e_i` a sparse linear form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecondOrderCone {
    pub bound: usize,
    pub members: Vec<Vec<(usize, f64)>>,
}

impl MilpModel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_var(&mut self, key: VarKey, lower: f64, upper: f64, kind: VarKind) -> usize {
        assert!(lower <= upper, "variable {key}: lower bound {lower} above upper {upper}");
        assert!(!self.index.contains_key(&key), "duplicate variable {key}");
        let id = self.variables.len();
        self.variables.push(Variable { key, lower, upper, kind });
        self.index.insert(key, id);
        id
    }

    pub fn add_binary(&mut self, key: VarKey) -> usize {
        self.add_var(key, 0.0, 1.0, VarKind::Binary)
    }

    pub fn add_continuous(&mut self, key: VarKey, lower: f64, upper: f64) -> usize {
        self.add_var(key, lower, upper, VarKind::Continuous)
    }

    /// Adds `expr sense rhs`, moving the expression's constant to the right.
    pub fn add_constraint(&mut self, expr: &LinExpr, sense: Sense, rhs: f64) {
        self.constraints.push(Constraint {
            terms: expr.normalized_terms(),
            sense,
            rhs: rhs - expr.constant,
        });
    }

    /// Adds `expr` to the objective.
    pub fn add_objective(&mut self, expr: &LinExpr) {
        let mut all = LinExpr {
            terms: std::mem::take(&mut self.objective),
            constant: 0.0,
        };
        all.add_scaled(expr, 1.0);
        self.objective = all.normalized_terms();
        self.objective_offset += expr.constant;
    }

    pub fn var(&self, key: &VarKey) -> Option<usize> {
        self.index.get(key).copied()
    }

    pub fn num_vars(&self) -> usize {
        self.variables.len()
    }

    pub fn num_constraints(&self) -> usize {
        self.constraints.len()
    }

    pub fn count_vars(&self, pred: impl Fn(&VarKey) -> bool) -> usize {
        self.variables.iter().filter(|v| pred(&v.key)).count()
    }

    pub fn num_integer(&self) -> usize {
        self.variables.iter().filter(|v| v.is_integer()).count()
    }

    /// Binary activation variables `u`.
    pub fn num_activation_vars(&self) -> usize {
        self.count_vars(|k| matches!(k, VarKey::Activation { .. }))
    }

    pub fn num_product_vars(&self) -> usize {
        self.count_vars(|k| matches!(k, VarKey::Product { .. }))
    }

    /// Weight entries (a ternary weight counts once despite its two parts).
    pub fn num_weight_entries(&self) -> usize {
        self.count_vars(|k| matches!(k, VarKey::Weight { .. } | VarKey::WeightPos { .. }))
    }

    pub fn num_threshold_vars(&self) -> usize {
        self.count_vars(|k| matches!(k, VarKey::Threshold { .. }))
    }

    /// Rebuilds the key index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .variables
            .iter()
            .enumerate()
            .map(|(i, v)| (v.key, i))
            .collect();
    }

    /// Checks bounds, variable references and finiteness.
    pub fn validate(&self) -> Result<()> {
        for v in &self.variables {
            if v.lower.is_nan() || v.upper.is_nan() || v.lower > v.upper {
                return Err(Error::MalformedModel(format!(
                    "variable {} has bounds [{}, {}]",
                    v.key, v.lower, v.upper
                )));
            }
            if v.kind == VarKind::Binary && (v.lower < 0.0 || v.upper > 1.0) {
                return Err(Error::MalformedModel(format!("binary {} has bounds outside [0, 1]", v.key)));
            }
        }
        let n = self.variables.len();
        for (r, c) in self.constraints.iter().enumerate() {
            if !c.rhs.is_finite() {
                return Err(Error::MalformedModel(format!("row {r} has rhs {}", c.rhs)));
            }
            for &(j, a) in &c.terms {
                if j >= n {
                    return Err(Error::MalformedModel(format!("row {r} references variable {j} of {n}")));
                }
                if !a.is_finite() {
                    return Err(Error::MalformedModel(format!("row {r} has coefficient {a}")));
                }
            }
        }
        for &(j, a) in &self.objective {
            if j >= n || !a.is_finite() {
                return Err(Error::MalformedModel(format!("objective term ({j}, {a}) is invalid")));
            }
        }
        Ok(())
    }

    /// Objective value `c·x + offset`.
    pub fn objective_value(&self, assignment: &[f64]) -> Result<f64> {
        if assignment.len() != self.variables.len() {
            return Err(Error::DimensionMismatch {
                expected: self.variables.len(),
                got: assignment.len(),
            });
        }
        Ok(self.objective_offset + self.objective.iter().map(|&(j, c)| c * assignment[j]).sum::<f64>())
    }

    /// Largest bound, integrality or row violation of `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let bounds = self.variables.iter().zip(x).map(|(v, &xv)| {
            let mut viol = (v.lower - xv).max(xv - v.upper).max(0.0);
            if v.is_integer() {
                viol = viol.max((xv - xv.round()).abs());
            }
            viol
        });
        let rows = self.constraints.iter().map(|c| c.violation(x));
        bounds.chain(rows).fold(0.0, f64::max)
    }

    pub fn is_feasible(&self, x: &[f64], tol: f64) -> bool {
        x.len() == self.variables.len() && self.max_violation(x) <= tol
    }

    /// Variable ids sorted by structured key.
    pub fn key_order(&self) -> Vec<usize> {
        self.index.values().copied().collect()
    }
}
