//! Pair verification at the best threshold, ROC curves, and the train/test
//! heatmaps built from them.

use std::fmt::Write as _;

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::MIN_NORM;
use crate::synth::{
    single_condition_grid, Attribute, Condition, DatasetSplit, SingleConditionOptions, TestId, TrainId,
    Universe,
};
use crate::trainer::{self, Encoder, LabeledSet, MetricLog, TrainConfig, VerificationSet};

/// Outcome of scoring one pair set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub accuracy: f64,
    /// Pairs with similarity strictly above this are called "same".
    pub threshold: f64,
    pub n_pairs: usize,
    /// Area under `roc`.
    pub auc: f64,
    /// `(false-positive rate, true-positive rate)` from `(0, 0)` to `(1, 1)`.
    pub roc: Vec<(f64, f64)>,
}

/// Best accuracy and its threshold, with ties going to the smallest
/// threshold. Candidates are ±1 and the midpoints between adjacent distinct
/// scores; a pair is predicted "same" when its score exceeds the threshold.
pub fn best_threshold(scores: &[f64], same: &[bool]) -> Result<(f64, f64)> {
    check_pairs(scores, same)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let sorted: Vec<f64> = order.iter().map(|&i| scores[i]).collect();

    let mut candidates = vec![-1.0, 1.0];
    candidates.extend(
        sorted
            .windows(2)
            .filter(|w| w[0] < w[1])
            .map(|w| w[0] + (w[1] - w[0]) / 2.0),
    );
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();

    let positives = same.iter().filter(|&&s| s).count();
    let n = scores.len();
    // Walk candidates upward; `below` rows score <= t and are called "different".
    let (mut below, mut neg_below, mut pos_below) = (0, 0, 0);
    let mut best = (f64::NEG_INFINITY, 0.0);
    for t in candidates {
        while below < n && sorted[below] <= t {
            if same[order[below]] {
                pos_below += 1;
            } else {
                neg_below += 1;
            }
            below += 1;
        }
        let correct = neg_below + (positives - pos_below);
        let acc = correct as f64 / n as f64;
        if acc > best.0 {
            best = (acc, t);
        }
    }
    Ok(best)
}

fn check_pairs(scores: &[f64], same: &[bool]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::EmptyPairs);
    }
    if scores.len() != same.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            actual: same.len(),
        });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::InvalidBatch(format!("score {i} is not finite")));
    }
    Ok(())
}

/// ROC points swept from the highest score down, one per distinct score.
pub fn roc_curve(scores: &[f64], same: &[bool]) -> Result<Vec<(f64, f64)>> {
    check_pairs(scores, same)?;
    let positives = same.iter().filter(|&&s| s).count();
    let negatives = same.len() - positives;
    if positives == 0 || negatives == 0 {
        let (accuracy, threshold) = best_threshold(scores, same)?;
        return Err(Error::OneClassOnly { accuracy, threshold });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    for (k, &i) in order.iter().enumerate() {
        if same[i] {
            tp += 1;
        } else {
            fp += 1;
        }
        let group_ends = order.get(k + 1).is_none_or(|&next| scores[next] != scores[i]);
        if group_ends {
            points.push((fp as f64 / negatives as f64, tp as f64 / positives as f64));
        }
    }
    Ok(points)
}

/// Trapezoidal area under a ROC polyline.
pub fn auc(roc: &[(f64, f64)]) -> f64 {
    roc.windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

/// Full report for precomputed similarities. A single-class pair set still
/// has an accuracy, which is carried in [`Error::OneClassOnly`].
pub fn verify_similarities(scores: &[f64], same: &[bool]) -> Result<VerificationReport> {
    let (accuracy, threshold) = best_threshold(scores, same)?;
    let roc = roc_curve(scores, same)?;
    Ok(VerificationReport {
        accuracy,
        threshold,
        n_pairs: scores.len(),
        auc: auc(&roc),
        roc,
    })
}

fn unit_rows(m: &mut Array2<f64>) {
    for mut row in m.axis_iter_mut(Axis(0)) {
        let norm = row.dot(&row).sqrt();
        if norm > MIN_NORM {
            row /= norm;
        } else {
            row.fill(0.0);
        }
    }
}

/// Cosine similarity of each pair's embeddings. A zero embedding scores 0.
pub fn pair_similarities(encoder: &Encoder, set: &VerificationSet) -> Result<Vec<f64>> {
    if set.is_empty() {
        return Err(Error::EmptyPairs);
    }
    let mut a = encoder.embed(set.left.view())?;
    let mut b = encoder.embed(set.right.view())?;
    unit_rows(&mut a);
    unit_rows(&mut b);
    Ok(a.outer_iter()
        .zip(b.outer_iter())
        .map(|(x, y)| x.dot(&y))
        .collect())
}

pub fn verify(encoder: &Encoder, set: &VerificationSet) -> Result<VerificationReport> {
    verify_similarities(&pair_similarities(encoder, set)?, &set.same)
}

/// Best-threshold accuracy alone; defined for single-class sets too.
pub fn accuracy(encoder: &Encoder, set: &VerificationSet) -> Result<f64> {
    Ok(best_threshold(&pair_similarities(encoder, set)?, &set.same)?.0)
}

/// Mean accuracy over the three regions of a train/test grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionMeans {
    /// Train variance below test variance.
    pub under: f64,
    pub balanced: f64,
    /// Train variance above test variance.
    pub over: f64,
}

/// Accuracy of the model trained on `T_{i+1}` on `Q_{j+1}` at `cells[i][j]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatmapGrid {
    pub cells: [[f64; 4]; 4],
}

impl HeatmapGrid {
    pub fn get(&self, train: TrainId, test: TestId) -> f64 {
        self.cells[train.index()][test.index()]
    }

    /// `i < j` is under-training, `i = j` balanced, `i > j` over-training.
    pub fn partition_means(&self) -> PartitionMeans {
        let mut sums = [0.0; 3];
        let mut counts = [0usize; 3];
        for (i, row) in self.cells.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let k = match i.cmp(&j) {
                    std::cmp::Ordering::Less => 0,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Greater => 2,
                };
                sums[k] += v;
                counts[k] += 1;
            }
        }
        PartitionMeans {
            under: sums[0] / counts[0] as f64,
            balanced: sums[1] / counts[1] as f64,
            over: sums[2] / counts[2] as f64,
        }
    }

    /// `train_id,test_id,accuracy`, 16 rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("train_id,test_id,accuracy\n");
        for t in TrainId::ALL {
            for q in TestId::ALL {
                let _ = writeln!(out, "{t},{q},{}", self.get(t, q));
            }
        }
        out
    }
}

pub fn partition_means(grid: &HeatmapGrid) -> PartitionMeans {
    grid.partition_means()
}

/// Trains one model per `T_i` with the same seed and scores every `Q_j`
/// after the last epoch. Returns the grid and the four metric logs.
pub fn heatmap_with_logs(split: &DatasetSplit, cfg: &TrainConfig) -> Result<(HeatmapGrid, Vec<MetricLog>)> {
    let logs = TrainId::ALL
        .par_iter()
        .map(|&t| trainer::train(split, t, cfg).map(|o| o.log))
        .collect::<Result<Vec<_>>>()?;
    let mut cells = [[0.0; 4]; 4];
    for (row, log) in cells.iter_mut().zip(&logs) {
        for q in TestId::ALL {
            let name = q.to_string().to_lowercase();
            row[q.index()] = log
                .final_accuracy(&name)
                .ok_or_else(|| Error::InvalidConfig(format!("no accuracy logged for {name}")))?;
        }
    }
    Ok((HeatmapGrid { cells }, logs))
}

pub fn heatmap(split: &DatasetSplit, cfg: &TrainConfig) -> Result<HeatmapGrid> {
    Ok(heatmap_with_logs(split, cfg)?.0)
}

/// Grid over one attribute's values: `cells[i][j]` trains at `values[i]`
/// and tests at `values[j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleConditionReport {
    pub attribute: Attribute,
    pub values: Vec<u8>,
    pub cells: Vec<Vec<f64>>,
    pub diagonal_mean: f64,
    pub off_diagonal_mean: f64,
}

impl SingleConditionReport {
    pub fn from_cells(attribute: Attribute, values: Vec<u8>, cells: Vec<Vec<f64>>) -> Result<Self> {
        let k = values.len();
        if k < 2 || cells.len() != k || cells.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidConfig(format!(
                "need a square grid of at least 2 values, got {k}"
            )));
        }
        let (mut diag, mut off) = (0.0, 0.0);
        for (i, row) in cells.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if i == j {
                    diag += v;
                } else {
                    off += v;
                }
            }
        }
        Ok(Self {
            attribute,
            values,
            cells,
            diagonal_mean: diag / k as f64,
            off_diagonal_mean: off / (k * (k - 1)) as f64,
        })
    }

    /// Mean matched-condition accuracy minus mean mismatched accuracy.
    pub fn gap(&self) -> f64 {
        self.diagonal_mean - self.off_diagonal_mean
    }
}

/// Trains one model per value of `attribute` from the base condition
/// (A1, 1000 lux, E1, poses C1..C20) and scores every value's pair set.
pub fn single_condition_report(
    universe: &Universe,
    attribute: Attribute,
    options: &SingleConditionOptions,
    cfg: &TrainConfig,
) -> Result<SingleConditionReport> {
    let base = Condition::new(1, 1, 1, 1)?;
    let grid = single_condition_grid(universe, attribute, base, options)?;
    let evals = grid
        .test_sets
        .iter()
        .zip(&grid.values)
        .map(|(pairs, v)| {
            let set = VerificationSet::from_pairs(pairs.iter().map(|(a, b, s)| (a, b, *s)))?;
            Ok((v.to_string(), set))
        })
        .collect::<Result<Vec<_>>>()?;
    let cells = grid
        .train_sets
        .par_iter()
        .map(|train| {
            let set = LabeledSet::from_samples(train, grid.train_identities)?;
            let log = trainer::fit(&set, &evals, cfg)?.log;
            evals
                .iter()
                .map(|(name, _)| {
                    log.final_accuracy(name)
                        .ok_or_else(|| Error::InvalidConfig(format!("no accuracy logged for {name}")))
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    SingleConditionReport::from_cells(attribute, grid.values, cells)
}
