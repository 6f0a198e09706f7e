//! Iterative data splitting: points in one partition cell share an
//! activation pattern, and the worst cell is split with 2-means after every
//! epoch.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kmeans::{kmeans, KMeansConfig};
use crate::model::{build_partitioned, BuildOptions};
use crate::network::{empirical_loss, BdnnParams, NetworkSpec};
use crate::solver::{solve, solve_with_start, SolverConfig, Status};

/// Disjoint nonempty cells covering `0..m`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    cells: Vec<Vec<usize>>,
}

impl Partition {
    pub fn new(cells: Vec<Vec<usize>>, m: usize) -> Result<Self> {
        let p = Partition { cells };
        p.validate(m)?;
        Ok(p)
    }

    pub fn trivial(m: usize) -> Self {
        Partition {
            cells: vec![(0..m).collect()],
        }
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        if self.cells.is_empty() {
            return Err(Error::InvalidArgument("a partition needs at least one cell".into()));
        }
        let mut seen = vec![false; m];
        for cell in &self.cells {
            if cell.is_empty() {
                return Err(Error::InvalidArgument("partition has an empty cell".into()));
            }
            for &i in cell {
                if i >= m || seen[i] {
                    return Err(Error::InvalidArgument(format!("point {i} is out of range or repeated")));
                }
                seen[i] = true;
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidArgument(format!("point {i} is in no cell")));
        }
        Ok(())
    }

    pub fn cells(&self) -> &[Vec<usize>] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Replaces cell `index` by the two given parts, appended at the end.
    fn split(&mut self, index: usize, first: Vec<usize>, second: Vec<usize>) {
        self.cells.remove(index);
        self.cells.push(first);
        self.cells.push(second);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Number of cells the epoch's model was built with.
    pub cells: usize,
    pub batch: Vec<usize>,
    pub status: Status,
    pub objective: f64,
    /// Loss of the decoded network on the whole training set.
    pub train_loss: f64,
    pub validation_accuracy: f64,
    pub best_validation_accuracy: f64,
    /// Activation variables in the epoch's model.
    pub activation_vars: usize,
    /// Cell split after the epoch, if any could be split.
    pub split_cell: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasplitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub solver: SolverConfig,
    pub build: BuildOptions,
    pub kmeans: KMeansConfig,
    /// Epoch records as JSON lines.
    pub log_path: Option<PathBuf>,
}

impl Default for DatasplitConfig {
    fn default() -> Self {
        DatasplitConfig {
            epochs: 5,
            batch_size: 32,
            seed: 0,
            solver: SolverConfig::default(),
            build: BuildOptions::default(),
            kmeans: KMeansConfig::default(),
            log_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasplitResult {
    /// Network with the best validation accuracy over all epochs.
    pub params: BdnnParams,
    pub best_epoch: usize,
    pub best_validation_accuracy: f64,
    pub epochs: Vec<EpochRecord>,
    pub partition: Partition,
}

/// An epoch failed; carries the records of the epochs before it.
#[derive(Debug, thiserror::Error)]
#[error("data splitting stopped after {} completed epochs: {error}", epochs.len())]
pub struct DatasplitFailure {
    pub epochs: Vec<EpochRecord>,
    #[source]
    pub error: Error,
}

/// Cells ordered for splitting: highest loss, then largest, then lowest index.
fn split_order(cell_losses: &[f64], cell_sizes: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..cell_losses.len()).collect();
    order.sort_by(|&a, &b| {
        cell_losses[b]
            .total_cmp(&cell_losses[a])
            .then(cell_sizes[b].cmp(&cell_sizes[a]))
            .then(a.cmp(&b))
    });
    order
}

/// Cell with the largest summed loss; ties go to the larger cell, then the
/// lower index.
pub fn select_split_cell(partition: &Partition, point_losses: &[f64]) -> usize {
    let losses: Vec<f64> = partition
        .cells
        .iter()
        .map(|c| c.iter().map(|&i| point_losses[i]).sum())
        .collect();
    let sizes: Vec<usize> = partition.cells.iter().map(Vec::len).collect();
    split_order(&losses, &sizes)[0]
}

fn accuracy(params: &BdnnParams, data: &Dataset) -> Result<f64> {
    let mut correct = 0;
    for (x, &y) in data.samples().iter().zip(data.labels()) {
        correct += usize::from(params.predict(x)? == y);
    }
    Ok(correct as f64 / data.len() as f64)
}

struct EpochLog(Option<BufWriter<File>>, Option<PathBuf>);

impl EpochLog {
    fn write(&mut self, record: &EpochRecord) -> Result<()> {
        if let (Some(w), Some(path)) = (self.0.as_mut(), self.1.as_ref()) {
            let line = serde_json::to_string(record)?;
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// Trains on `train`, choosing the epoch by accuracy on `validation` (the
/// training set itself when absent).
pub fn train_datasplit(
    train: &Dataset,
    validation: Option<&Dataset>,
    spec: &NetworkSpec,
    config: &DatasplitConfig,
) -> std::result::Result<DatasplitResult, DatasplitFailure> {
    let mut records = Vec::new();
    match run(train, validation, spec, config, &mut records) {
        Ok(r) => Ok(r),
        Err(error) => Err(DatasplitFailure { epochs: records, error }),
    }
}

fn run(
    train: &Dataset,
    validation: Option<&Dataset>,
    spec: &NetworkSpec,
    config: &DatasplitConfig,
    records: &mut Vec<EpochRecord>,
) -> Result<DatasplitResult> {
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(Error::InvalidArgument("epochs and batch size must be at least 1".into()));
    }
    if train.is_empty() {
        return Err(Error::InvalidDataset("empty training set".into()));
    }
    let validation = validation.unwrap_or(train);
    let mut log = EpochLog(
        config
            .log_path
            .as_ref()
            .map(|p| File::create(p).map(BufWriter::new).map_err(|e| Error::io(p, e)))
            .transpose()?,
        config.log_path.clone(),
    );
    let m = train.len();
    let b = config.batch_size.min(m);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut partition = Partition::trivial(m);
    let mut best: Option<(f64, usize, BdnnParams)> = None;
    let k = spec.depth();
    let mut previous: Option<BdnnParams> = None;

    for epoch in 1..=config.epochs {
        let mut batch = index::sample(&mut rng, m, b).into_vec();
        batch.sort_unstable();
        let options = BuildOptions {
            partition: Some(partition.cells.clone()),
            batch: Some(batch.clone()),
            ..config.build.clone()
        };
        let formulation = build_partitioned(train, spec, &options)?;
        // last epoch's network when it still fits the partition, else the zero network
        let start = match previous.as_ref().map(|p| formulation.encode(p, train)).transpose()?.flatten() {
            Some(x) => Some(x),
            None => formulation.encode(&BdnnParams::zeros(spec), train)?,
        };
        let result = match start {
            Some(x) => solve_with_start(formulation.model(), &config.solver, &x)?,
            None => solve(formulation.model(), &config.solver)?,
        };
        let x = match (result.status, result.incumbent) {
            (Status::Optimal | Status::Feasible, Some(x)) => x,
            (Status::TimeLimitNoIncumbent, _) => return Err(Error::NoIncumbent),
            (status, _) => return Err(Error::Infeasible(format!("epoch {epoch} model ended with status {status:?}"))),
        };
        let params = formulation.decode_params(&x);
        previous = Some(params.clone());
        let val_acc = accuracy(&params, validation)?;
        if best.as_ref().is_none_or(|(acc, _, _)| val_acc > *acc) {
            best = Some((val_acc, epoch, params.clone()));
        }

        // Per-point losses: solved outputs for cells seen in the batch, the
        // decoded network elsewhere.
        let outputs = formulation.activation_values(&x);
        let mut point_loss = vec![0.0; m];
        let mut train_loss = 0.0;
        for (cell_id, cell) in partition.cells.iter().enumerate() {
            let covered = !formulation.units()[cell_id].loss_points.is_empty();
            for &i in cell {
                let y = train.labels()[i];
                let forward: Vec<f64> = params.output(&train.samples()[i])?.into_iter().map(f64::from).collect();
                let forward_loss = empirical_loss(y, &forward)?;
                train_loss += forward_loss;
                point_loss[i] = if covered {
                    let z: Vec<f64> = outputs[cell_id][k - 1].iter().map(|&v| f64::from(v)).collect();
                    empirical_loss(y, &z)?
                } else {
                    forward_loss
                };
            }
        }
        let losses: Vec<f64> = partition
            .cells
            .iter()
            .map(|c| c.iter().map(|&i| point_loss[i]).sum())
            .collect();
        let sizes: Vec<usize> = partition.cells.iter().map(Vec::len).collect();
        let mut split_cell = None;
        for c in split_order(&losses, &sizes) {
            let cell = &partition.cells[c];
            if cell.len() < 2 {
                continue;
            }
            let points: Vec<Vec<f64>> = cell.iter().map(|&i| train.samples()[i].clone()).collect();
            if points.iter().all(|p| p == &points[0]) {
                continue;
            }
            let clusters = kmeans(
                &points,
                2,
                &KMeansConfig {
                    seed: config.kmeans.seed.wrapping_add(epoch as u64),
                    ..config.kmeans
                },
            )?
            .clusters();
            let first: Vec<usize> = clusters[0].iter().map(|&j| cell[j]).collect();
            let second: Vec<usize> = clusters[1].iter().map(|&j| cell[j]).collect();
            partition.split(c, first, second);
            split_cell = Some(c);
            break;
        }
        partition.validate(m)?;

        let record = EpochRecord {
            epoch,
            cells: sizes.len(),
            batch,
            status: result.status,
            objective: result.objective,
            train_loss,
            validation_accuracy: val_acc,
            best_validation_accuracy: best.as_ref().map_or(val_acc, |b| b.0),
            activation_vars: formulation.model().num_activation_vars(),
            split_cell,
        };
        log::info!(
            "epoch {epoch}: {} cells, objective {}, validation accuracy {val_acc:.4}",
            record.cells,
            record.objective
        );
        log.write(&record)?;
        records.push(record);
    }
    let (best_validation_accuracy, best_epoch, params) = best.expect("at least one epoch ran");
    Ok(DatasplitResult {
        params,
        best_epoch,
        best_validation_accuracy,
        epochs: std::mem::take(records),
        partition,
    })
}
