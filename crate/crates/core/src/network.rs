//! Binarized network types and inference.
//!
//! A network with depth `K` maps `x ∈ R^{d_0}` through `K` layers; layer `k`
//! computes `u^k = step(W^k u^{k-1} + b^k, λ_k)` componentwise, where the step
//! is 1 when its argument reaches the threshold and 0 otherwise. The last
//! layer has one output per class and the prediction is the argmax of the
//! output bits.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightDomain {
    /// Continuous weights in `[-1, 1]`.
    BoxContinuous,
    /// Integer weights in `{-1, 0, 1}`.
    Ternary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    Learned,
    FixedZero,
}

/// Architecture of a binarized network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// `d_0, ..., d_K`: input dimension, hidden widths, number of classes.
    pub widths: Vec<usize>,
    pub weight_domain: WeightDomain,
    pub use_bias: bool,
    pub threshold_mode: ThresholdMode,
}

impl NetworkSpec {
    pub fn new(
        widths: Vec<usize>,
        weight_domain: WeightDomain,
        use_bias: bool,
        threshold_mode: ThresholdMode,
    ) -> Result<Self> {
        let spec = NetworkSpec {
            widths,
            weight_domain,
            use_bias,
            threshold_mode,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least input and output widths, got {} entries",
                self.widths.len()
            )));
        }
        if let Some(pos) = self.widths.iter().position(|&w| w == 0) {
            return Err(Error::InvalidSpec(format!("width d_{pos} is zero")));
        }
        if self.num_classes() < 2 {
            return Err(Error::InvalidSpec(
                "output width must be at least 2 for classification".into(),
            ));
        }
        Ok(())
    }

    /// Number of layers `K`.
    pub fn depth(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.widths.last().expect("validated spec")
    }

    /// Width of layer `layer` (0-based over the `K` weight layers).
    pub fn layer_width(&self, layer: usize) -> usize {
        self.widths[layer + 1]
    }

    /// Input width feeding layer `layer`, excluding the bias column.
    pub fn layer_fan_in(&self, layer: usize) -> usize {
        self.widths[layer]
    }

    /// Sum of the layer widths `d_1 + ... + d_K`.
    pub fn total_neurons(&self) -> usize {
        self.widths[1..].iter().sum()
    }

    /// Number of weight entries, counting bias entries when enabled.
    pub fn num_weight_entries(&self) -> usize {
        (0..self.depth())
            .map(|l| self.layer_width(l) * (self.layer_fan_in(l) + usize::from(self.use_bias)))
            .sum()
    }
}

/// Trained weights `W^k`, thresholds `λ_k` and optional biases `b^k`.
///
/// `weights[k][j]` is row `j` of layer `k` (0-based), with `d_{k}` entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BdnnParams {
    pub spec: NetworkSpec,
    pub weights: Vec<Vec<Vec<f64>>>,
    pub thresholds: Vec<f64>,
    pub biases: Option<Vec<Vec<f64>>>,
}

/// Activation vectors `u^1, ..., u^K` for one input.
pub type ActivationTrace = Vec<Vec<u8>>;

const DOMAIN_TOL: f64 = 1e-9;

fn in_domain(value: f64, domain: WeightDomain) -> bool {
    match domain {
        WeightDomain::BoxContinuous => value.is_finite() && value.abs() <= 1.0 + DOMAIN_TOL,
        WeightDomain::Ternary => value == -1.0 || value == 0.0 || value == 1.0,
    }
}

impl BdnnParams {
    pub fn new(
        spec: NetworkSpec,
        weights: Vec<Vec<Vec<f64>>>,
        thresholds: Vec<f64>,
        biases: Option<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        let params = BdnnParams {
            spec,
            weights,
            thresholds,
            biases,
        };
        params.validate()?;
        Ok(params)
    }

    /// Every weight (and bias) zero, every threshold zero.
    pub fn zeros(spec: &NetworkSpec) -> Self {
        let k = spec.depth();
        let weights = (0..k)
            .map(|l| vec![vec![0.0; spec.layer_fan_in(l)]; spec.layer_width(l)])
            .collect();
        let biases = spec
            .use_bias
            .then(|| (0..k).map(|l| vec![0.0; spec.layer_width(l)]).collect());
        BdnnParams {
            spec: spec.clone(),
            weights,
            thresholds: vec![0.0; k],
            biases,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let spec = &self.spec;
        let k = spec.depth();
        if self.weights.len() != k || self.thresholds.len() != k {
            return Err(Error::InvalidParams(format!(
                "expected {k} layers, got {} weight matrices and {} thresholds",
                self.weights.len(),
                self.thresholds.len()
            )));
        }
        for (l, matrix) in self.weights.iter().enumerate() {
            if matrix.len() != spec.layer_width(l) {
                return Err(Error::InvalidParams(format!(
                    "layer {l}: expected {} rows, got {}",
                    spec.layer_width(l),
                    matrix.len()
                )));
            }
            for row in matrix {
                if row.len() != spec.layer_fan_in(l) {
                    return Err(Error::InvalidParams(format!(
                        "layer {l}: expected {} columns, got {}",
                        spec.layer_fan_in(l),
                        row.len()
                    )));
                }
                if let Some(w) = row.iter().find(|&&w| !in_domain(w, spec.weight_domain)) {
                    return Err(Error::InvalidParams(format!(
                        "layer {l}: weight {w} outside the {:?} domain",
                        spec.weight_domain
                    )));
                }
            }
        }
        for (l, &t) in self.thresholds.iter().enumerate() {
            if !t.is_finite() || t.abs() > 1.0 + DOMAIN_TOL {
                return Err(Error::InvalidParams(format!(
                    "layer {l}: threshold {t} outside [-1, 1]"
                )));
            }
            if spec.threshold_mode == ThresholdMode::FixedZero && t != 0.0 {
                return Err(Error::InvalidParams(format!(
                    "layer {l}: threshold {t} must be zero in fixed-zero mode"
                )));
            }
        }
        match (&self.biases, spec.use_bias) {
            (None, false) => {}
            (Some(biases), true) => {
                if biases.len() != k {
                    return Err(Error::InvalidParams(format!(
                        "expected {k} bias vectors, got {}",
                        biases.len()
                    )));
                }
                for (l, b) in biases.iter().enumerate() {
                    if b.len() != spec.layer_width(l) {
                        return Err(Error::InvalidParams(format!(
                            "layer {l}: expected {} bias entries, got {}",
                            spec.layer_width(l),
                            b.len()
                        )));
                    }
                    if let Some(v) = b.iter().find(|&&v| !in_domain(v, spec.weight_domain)) {
                        return Err(Error::InvalidParams(format!(
                            "layer {l}: bias {v} outside the weight domain"
                        )));
                    }
                }
            }
            (Some(_), false) => {
                return Err(Error::InvalidParams(
                    "biases given but the architecture has none".into(),
                ))
            }
            (None, true) => {
                return Err(Error::InvalidParams(
                    "the architecture has biases but none were given".into(),
                ))
            }
        }
        Ok(())
    }

    /// Row `j` of layer `layer` with the bias appended as the last column when
    /// biases are enabled.
    pub fn augmented_row(&self, layer: usize, j: usize) -> Vec<f64> {
        let mut row = self.weights[layer][j].clone();
        if let Some(biases) = &self.biases {
            row.push(biases[layer][j]);
        }
        row
    }

    /// Pre-activation values `W^k u^{k-1} + b^k` of one layer.
    pub fn pre_activation(&self, layer: usize, input: &[f64]) -> Vec<f64> {
        self.weights[layer]
            .iter()
            .enumerate()
            .map(|(j, row)| {
                let dot: f64 = row.iter().zip(input).map(|(w, x)| w * x).sum();
                match &self.biases {
                    Some(b) => dot + b[layer][j],
                    None => dot,
                }
            })
            .collect()
    }

    /// Full activation trace for `x`.
    pub fn forward(&self, x: &[f64]) -> Result<ActivationTrace> {
        if x.len() != self.spec.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.spec.input_dim(),
                got: x.len(),
            });
        }
        let mut trace = Vec::with_capacity(self.spec.depth());
        let mut input: Vec<f64> = x.to_vec();
        for layer in 0..self.spec.depth() {
            let lambda = self.thresholds[layer];
            let bits: Vec<u8> = self
                .pre_activation(layer, &input)
                .into_iter()
                .map(|alpha| binary_step(alpha, lambda))
                .collect();
            input = bits.iter().map(|&b| f64::from(b)).collect();
            trace.push(bits);
        }
        Ok(trace)
    }

    /// Output bits `u^K`.
    pub fn output(&self, x: &[f64]) -> Result<Vec<u8>> {
        Ok(self.forward(x)?.pop().expect("depth >= 1"))
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax_lowest(&self.output(x)?))
    }

    /// Sum of `empirical_loss` over the given samples.
    pub fn total_loss(&self, samples: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
        samples
            .iter()
            .zip(labels)
            .map(|(x, &y)| {
                let z: Vec<f64> = self.output(x)?.into_iter().map(f64::from).collect();
                empirical_loss(y, &z)
            })
            .sum()
    }

    /// Divides layer `layer`'s weights, bias and threshold by `beta`.
    ///
    /// For `beta > 0` the activations are unchanged; this is what allows the
    /// trainer to bound all parameters to `[-1, 1]`.
    pub fn rescale_layer(&mut self, layer: usize, beta: f64) {
        assert!(beta > 0.0, "scale must be positive");
        for row in &mut self.weights[layer] {
            row.iter_mut().for_each(|w| *w /= beta);
        }
        if let Some(b) = &mut self.biases {
            b[layer].iter_mut().for_each(|v| *v /= beta);
        }
        self.thresholds[layer] /= beta;
    }

    /// `max(|λ_k|, max |w^k_{jl}|)` for one layer.
    pub fn layer_scale(&self, layer: usize) -> f64 {
        let w_max = self.weights[layer]
            .iter()
            .flatten()
            .chain(self.biases.iter().flat_map(|b| b[layer].iter()))
            .fold(0.0_f64, |acc, w| acc.max(w.abs()));
        w_max.max(self.thresholds[layer].abs())
    }
}

/// 0 if `alpha < lambda`, 1 otherwise.
pub fn binary_step(alpha: f64, lambda: f64) -> u8 {
    if alpha < lambda {
        0
    } else {
        1
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax_lowest<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Classification loss of output `z` for true class `y`.
///
/// For two classes this is `(2y-1) z_0 + (1-2y) z_1`; in general every wrong
/// output counts +1 and the true output counts -1.
pub fn empirical_loss(y: usize, z: &[f64]) -> Result<f64> {
    if z.len() < 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            got: z.len(),
        });
    }
    if y >= z.len() {
        return Err(Error::InvalidArgument(format!(
            "label {y} out of range for {} outputs",
            z.len()
        )));
    }
    Ok(z.iter()
        .enumerate()
        .map(|(j, &v)| if j == y { -v } else { v })
        .sum())
}

/// Loss coefficient of output `j` for true class `y`.
pub(crate) fn loss_coefficient(y: usize, j: usize) -> f64 {
    if j == y {
        -1.0
    } else {
        1.0
    }
}

/// On-disk form of trained parameters: spec, row-major flattened weight
/// matrices, thresholds, optional biases and optional class names.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SavedModel {
    pub spec: NetworkSpec,
    pub weights: Vec<Vec<f64>>,
    pub thresholds: Vec<f64>,
    #[serde(default)]
    pub biases: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub classes: Option<Vec<String>>,
}

impl SavedModel {
    pub fn from_params(params: &BdnnParams, classes: Option<Vec<String>>) -> Self {
        SavedModel {
            spec: params.spec.clone(),
            weights: params
                .weights
                .iter()
                .map(|m| m.iter().flatten().copied().collect())
                .collect(),
            thresholds: params.thresholds.clone(),
            biases: params.biases.clone(),
            classes,
        }
    }

    pub fn to_params(&self) -> Result<BdnnParams> {
        self.spec.validate()?;
        if self.weights.len() != self.spec.depth() {
            return Err(Error::InvalidParams(format!(
                "expected {} weight arrays, got {}",
                self.spec.depth(),
                self.weights.len()
            )));
        }
        let weights = self
            .weights
            .iter()
            .enumerate()
            .map(|(l, flat)| {
                let cols = self.spec.layer_fan_in(l);
                let rows = self.spec.layer_width(l);
                if flat.len() != rows * cols {
                    return Err(Error::InvalidParams(format!(
                        "layer {l}: expected {} weights, got {}",
                        rows * cols,
                        flat.len()
                    )));
                }
                Ok(flat.chunks(cols).map(<[f64]>::to_vec).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        BdnnParams::new(
            self.spec.clone(),
            weights,
            self.thresholds.clone(),
            self.biases.clone(),
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(widths: &[usize]) -> NetworkSpec {
        NetworkSpec::new(
            widths.to_vec(),
            WeightDomain::BoxContinuous,
            false,
            ThresholdMode::Learned,
        )
        .unwrap()
    }

    #[test]
    fn step_boundary_is_active() {
        assert_eq!(binary_step(0.5, 0.0), 1);
        assert_eq!(binary_step(-0.1, 0.0), 0);
        assert_eq!(binary_step(0.3, 0.3), 1);
    }

    #[test]
    fn two_layer_trace() {
        let p = BdnnParams::new(
            spec(&[2, 2, 2]),
            vec![
                vec![vec![1.0, 0.0], vec![0.0, 1.0]],
                vec![vec![1.0, -1.0], vec![-1.0, 1.0]],
            ],
            vec![0.0, 0.0],
            None,
        )
        .unwrap();
        let trace = p.forward(&[1.0, -1.0]).unwrap();
        assert_eq!(trace, vec![vec![1, 0], vec![1, 0]]);
        assert_eq!(p.predict(&[1.0, -1.0]).unwrap(), 0);
    }

    #[test]
    fn zero_weights_activate_everything() {
        let p = BdnnParams::zeros(&spec(&[3, 4, 2]));
        for x in [[1.0, -2.0, 3.0], [0.0, 0.0, 0.0], [-5.0, -5.0, -5.0]] {
            assert_eq!(p.forward(&x).unwrap(), vec![vec![1; 4], vec![1; 2]]);
        }
    }

    #[test]
    fn single_layer_threshold() {
        let p = BdnnParams::new(
            spec(&[1, 2]),
            vec![vec![vec![1.0], vec![-1.0]]],
            vec![0.5],
            None,
        )
        .unwrap();
        assert_eq!(p.forward(&[1.0]).unwrap(), vec![vec![1, 0]]);
    }

    #[test]
    fn forward_rejects_wrong_dimension() {
        let p = BdnnParams::zeros(&spec(&[2, 2]));
        assert!(matches!(
            p.forward(&[1.0]),
            Err(Error::DimensionMismatch {
                expected: 2,
                got: 1
            })
        ));
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax_lowest(&[1u8, 0]), 0);
        assert_eq!(argmax_lowest(&[0u8, 1]), 1);
        assert_eq!(argmax_lowest(&[1u8, 1]), 0);
        assert_eq!(argmax_lowest(&[0u8, 0, 0]), 0);
    }

    #[test]
    fn loss_values() {
        assert_eq!(empirical_loss(0, &[1.0, 0.0]).unwrap(), -1.0);
        assert_eq!(empirical_loss(1, &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(empirical_loss(0, &[0.0, 0.0]).unwrap(), 0.0);
        assert!(empirical_loss(2, &[0.0, 0.0]).is_err());
        assert!(empirical_loss(0, &[0.0]).is_err());
    }

    #[test]
    fn loss_matches_two_class_formula() {
        for y in 0..2usize {
            for z0 in [0.0, 1.0] {
                for z1 in [0.0, 1.0] {
                    let yf = y as f64;
                    let expected = (2.0 * yf - 1.0) * z0 + (1.0 - 2.0 * yf) * z1;
                    let got = empirical_loss(y, &[z0, z1]).unwrap();
                    assert_eq!(got, expected);
                    assert!([-1.0, 0.0, 1.0].contains(&got));
                }
            }
        }
    }

    #[test]
    fn validation_catches_domain_and_shape() {
        let s = NetworkSpec::new(
            vec![2, 2],
            WeightDomain::Ternary,
            false,
            ThresholdMode::FixedZero,
        )
        .unwrap();
        assert!(BdnnParams::new(s.clone(), vec![vec![vec![0.5, 0.0]; 2]], vec![0.0], None).is_err());
        assert!(BdnnParams::new(s.clone(), vec![vec![vec![1.0, 0.0]; 2]], vec![0.2], None).is_err());
        assert!(BdnnParams::new(s.clone(), vec![vec![vec![1.0]; 2]], vec![0.0], None).is_err());
        assert!(BdnnParams::new(s, vec![vec![vec![1.0, -1.0]; 2]], vec![0.0], None).is_ok());
        assert!(NetworkSpec::new(vec![2], WeightDomain::Ternary, false, ThresholdMode::Learned).is_err());
        assert!(NetworkSpec::new(vec![2, 1], WeightDomain::Ternary, false, ThresholdMode::Learned).is_err());
        assert!(NetworkSpec::new(vec![2, 0, 2], WeightDomain::Ternary, false, ThresholdMode::Learned).is_err());
    }

    #[test]
    fn saved_model_round_trip() {
        let s = NetworkSpec::new(vec![3, 2, 2], WeightDomain::BoxContinuous, true, ThresholdMode::Learned)
            .unwrap();
        let p = BdnnParams::new(
            s,
            vec![
                vec![vec![0.1, -0.2, 0.3], vec![1.0, -1.0, 0.0]],
                vec![vec![0.5, 0.25], vec![-0.75, 0.125]],
            ],
            vec![0.3, -0.1],
            Some(vec![vec![0.0, 0.5], vec![-1.0, 1.0]]),
        )
        .unwrap();
        let text = SavedModel::from_params(&p, Some(vec!["a".into(), "b".into()]))
            .to_json()
            .unwrap();
        let back = SavedModel::from_json(&text).unwrap();
        assert_eq!(back.classes.as_deref(), Some(&["a".to_string(), "b".to_string()][..]));
        assert_eq!(back.to_params().unwrap(), p);
    }

    fn arb_layer() -> impl Strategy<Value = (Vec<Vec<f64>>, f64)> {
        (
            prop::collection::vec(prop::collection::vec(-3.0..3.0f64, 3), 2),
            -3.0..3.0f64,
        )
    }

    proptest! {
        #[test]
        fn rescaling_a_layer_preserves_activations(
            layer in arb_layer(),
            beta in 0.1..10.0f64,
            xs in prop::collection::vec(prop::collection::vec(-2.0..2.0f64, 3), 1..8),
        ) {
            let (w, lambda) = layer;
            let s = spec(&[3, 2]);
            let p = BdnnParams { spec: s, weights: vec![w], thresholds: vec![lambda], biases: None };
            let mut q = p.clone();
            q.rescale_layer(0, beta);
            for x in &xs {
                // Division can move a value sitting exactly on the threshold;
                // only compare points with a clear margin.
                let pre = p.pre_activation(0, x);
                if pre.iter().any(|a| (a - lambda).abs() < 1e-9) {
                    continue;
                }
                prop_assert_eq!(p.forward(x).unwrap(), q.forward(x).unwrap());
            }
        }

        #[test]
        fn forward_is_deterministic(
            layer in arb_layer(),
            x in prop::collection::vec(-2.0..2.0f64, 3),
        ) {
            let (w, lambda) = layer;
            let p = BdnnParams { spec: spec(&[3, 2]), weights: vec![w], thresholds: vec![lambda], biases: None };
            prop_assert_eq!(p.forward(&x).unwrap(), p.forward(&x).unwrap());
        }
    }
}
