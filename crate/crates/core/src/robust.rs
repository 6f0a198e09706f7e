//! Norm-ball uncertainty sets, first-layer certificates and random sign
//! attacks.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::BdnnParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    L1,
    L2,
    Linf,
}

impl std::str::FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(Norm::L1),
            "l2" => Ok(Norm::L2),
            "linf" | "inf" => Ok(Norm::Linf),
            other => Err(Error::InvalidArgument(format!("unknown norm `{other}` (use l1, l2 or linf)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Radii {
    Uniform(f64),
    PerPoint(Vec<f64>),
}

/// Ball `{δ : ||δ|| <= r_i}` around each training point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySpec {
    pub norm: Norm,
    pub radii: Radii,
}

impl UncertaintySpec {
    pub fn uniform(norm: Norm, radius: f64) -> Result<Self> {
        let spec = UncertaintySpec {
            norm,
            radii: Radii::Uniform(radius),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |r: f64| r >= 0.0 && r.is_finite();
        let valid = match &self.radii {
            Radii::Uniform(r) => ok(*r),
            Radii::PerPoint(rs) => rs.iter().all(|&r| ok(r)),
        };
        if valid {
            Ok(())
        } else {
            Err(Error::InvalidArgument("uncertainty radii must be finite and nonnegative".into()))
        }
    }

    /// One radius per training point.
    pub fn radii_for(&self, m: usize) -> Result<Vec<f64>> {
        match &self.radii {
            Radii::Uniform(r) => Ok(vec![*r; m]),
            Radii::PerPoint(rs) if rs.len() == m => Ok(rs.clone()),
            Radii::PerPoint(rs) => Err(Error::DimensionMismatch {
                expected: m,
                got: rs.len(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub level: f64,
    pub seed: u64,
}

/// Dual of `norm` evaluated at `w`.
pub fn dual_norm(norm: Norm, w: &[f64]) -> f64 {
    match norm {
        Norm::L2 => w.iter().map(|v| v * v).sum::<f64>().sqrt(),
        Norm::Linf => w.iter().map(|v| v.abs()).sum(),
        Norm::L1 => w.iter().fold(0.0, |a: f64, v| a.max(v.abs())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirstLayerCertificate {
    /// Whether each first-layer neuron keeps its activation on the ball.
    pub neurons: Vec<bool>,
    pub certified: bool,
}

/// Checks that no perturbation of norm at most `radius` flips a first-layer
/// activation, which makes the whole prediction constant on the ball.
pub fn certify_first_layer(params: &BdnnParams, x: &[f64], radius: f64, norm: Norm) -> Result<FirstLayerCertificate> {
    if x.len() != params.spec.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: params.spec.input_dim(),
            got: x.len(),
        });
    }
    let lambda = params.thresholds[0];
    let pre = params.pre_activation(0, x);
    let neurons: Vec<bool> = pre
        .iter()
        .zip(&params.weights[0])
        .map(|(&a, row)| {
            let margin = radius * dual_norm(norm, row);
            if a >= lambda {
                a - margin >= lambda
            } else {
                a + margin < lambda
            }
        })
        .collect();
    let certified = neurons.iter().all(|&c| c);
    Ok(FirstLayerCertificate { neurons, certified })
}

/// `x + v` with `v` drawn uniformly from `{-level, level}^n`.
pub fn random_attack(x: &[f64], config: &AttackConfig) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    attack_with(&mut rng, x, config.level)
}

fn attack_with(rng: &mut impl Rng, x: &[f64], level: f64) -> Vec<f64> {
    x.iter()
        .map(|&v| if rng.random_bool(0.5) { v + level } else { v - level })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackAccuracy {
    pub level: f64,
    pub accuracy: f64,
}

/// Mean accuracy under independent random attacks, one row per level.
pub fn robust_eval(
    params: &BdnnParams,
    test: &Dataset,
    levels: &[f64],
    repetitions: usize,
    seed: u64,
) -> Result<Vec<AttackAccuracy>> {
    if test.is_empty() {
        return Err(Error::InvalidDataset("empty test set".into()));
    }
    if repetitions == 0 {
        return Err(Error::InvalidArgument("at least one attack repetition is needed".into()));
    }
    if let Some(l) = levels.iter().find(|l| !(**l >= 0.0)) {
        return Err(Error::InvalidArgument(format!("attack level {l} must be nonnegative")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    levels
        .iter()
        .map(|&level| {
            let mut correct = 0usize;
            for _ in 0..repetitions {
                for (x, &y) in test.samples().iter().zip(test.labels()) {
                    let attacked = attack_with(&mut rng, x, level);
                    correct += usize::from(params.predict(&attacked)? == y);
                }
            }
            Ok(AttackAccuracy {
                level,
                accuracy: correct as f64 / (repetitions * test.len()) as f64,
            })
        })
        .collect()
}

/// Accuracy grid as CSV: one row per attack level, one column per defense level.
pub fn write_accuracy_grid(
    path: impl AsRef<Path>,
    attack_levels: &[f64],
    defense_levels: &[f64],
    accuracy: &[Vec<f64>],
) -> Result<()> {
    let path = path.as_ref();
    if accuracy.len() != attack_levels.len() || accuracy.iter().any(|r| r.len() != defense_levels.len()) {
        return Err(Error::InvalidArgument("accuracy grid shape does not match the levels".into()));
    }
    let csv_err = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        row: 0,
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["attack".to_string()];
    header.extend(defense_levels.iter().map(|d| format!("defense_{d}")));
    w.write_record(&header).map_err(csv_err)?;
    for (a, row) in attack_levels.iter().zip(accuracy) {
        let mut rec = vec![a.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
