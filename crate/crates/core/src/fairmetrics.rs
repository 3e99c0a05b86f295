//! Group fairness and group-wise accuracy metrics over prediction records.
//!
//! All probabilities are raw empirical frequencies; nothing is smoothed.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::realstr;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("no prediction records")]
    EmptyRecords,
    #[error("invalid records: {0}")]
    InvalidRecords(String),
    #[error("bias group {b} has no records")]
    EmptyBiasGroup { b: usize },
    #[error("conditioning cell (y={y}, b={b}) has no records")]
    EmptyConditionCell { y: usize, b: usize },
    #[error("group cell (y={y}, b={b}) has no records")]
    EmptyGroupCell { y: usize, b: usize },
    #[error("invalid conflicting set: {0}")]
    InvalidConflictingSet(String),
    #[error("invalid group probabilities: {0}")]
    InvalidProbabilities(String),
}

/// Aligned predictions `ŷ`, targets `y` and bias labels `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRecords {
    y_hat: Vec<usize>,
    y: Vec<usize>,
    b: Vec<usize>,
    n_classes: usize,
    n_bias: usize,
}

impl PredictionRecords {
    pub fn new(
        y_hat: Vec<usize>,
        y: Vec<usize>,
        b: Vec<usize>,
        n_classes: usize,
        n_bias: usize,
    ) -> Result<Self, MetricsError> {
        if y_hat.is_empty() {
            return Err(MetricsError::EmptyRecords);
        }
        if y.len() != y_hat.len() || b.len() != y_hat.len() {
            return Err(MetricsError::InvalidRecords(format!(
                "lengths differ: {} predictions, {} targets, {} bias labels",
                y_hat.len(),
                y.len(),
                b.len()
            )));
        }
        if n_classes == 0 || n_bias == 0 {
            return Err(MetricsError::InvalidRecords(
                "label cardinalities must be positive".into(),
            ));
        }
        for (name, v, bound) in [("prediction", &y_hat, n_classes), ("target", &y, n_classes), ("bias", &b, n_bias)] {
            if let Some(i) = v.iter().position(|&l| l >= bound) {
                return Err(MetricsError::InvalidRecords(format!(
                    "{name} label {} at record {i} outside 0..{bound}",
                    v[i]
                )));
            }
        }
        Ok(Self {
            y_hat,
            y,
            b,
            n_classes,
            n_bias,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_bias(&self) -> usize {
        self.n_bias
    }

    pub fn y_hat(&self) -> &[usize] {
        &self.y_hat
    }

    pub fn y(&self) -> &[usize] {
        &self.y
    }

    pub fn b(&self) -> &[usize] {
        &self.b
    }
}

/// `(1/N_Y)·Σ_y max over bias groups of the spread of P(ŷ = y | b)`.
pub fn delta_dp(r: &PredictionRecords) -> Result<f64, MetricsError> {
    let mut per_b = vec![0usize; r.n_bias];
    // hits[b][y] = #{ŷ = y, B = b}
    let mut hits = vec![vec![0usize; r.n_classes]; r.n_bias];
    for i in 0..r.len() {
        per_b[r.b[i]] += 1;
        hits[r.b[i]][r.y_hat[i]] += 1;
    }
    if let Some(b) = per_b.iter().position(|&c| c == 0) {
        return Err(MetricsError::EmptyBiasGroup { b });
    }
    let mut total = 0.0;
    for y in 0..r.n_classes {
        let rates = hits.iter().zip(&per_b).map(|(h, &n)| h[y] as f64 / n as f64);
        total += spread(rates);
    }
    Ok(total / r.n_classes as f64)
}

fn spread(values: impl Iterator<Item = f64>) -> f64 {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    hi - lo
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EoEmptyCellPolicy {
    #[default]
    Error,
    /// Drop classes with an empty `(y, b)` cell from the average.
    SkipClass,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeltaEo {
    pub value: f64,
    pub skipped_classes: Vec<usize>,
}

/// `(1/N_Y)·Σ_y max over bias groups of the spread of P(ŷ = y | y, b)`.
pub fn delta_eo(r: &PredictionRecords) -> Result<f64, MetricsError> {
    Ok(delta_eo_with(r, EoEmptyCellPolicy::Error)?.value)
}

pub fn delta_eo_with(
    r: &PredictionRecords,
    policy: EoEmptyCellPolicy,
) -> Result<DeltaEo, MetricsError> {
    let table = group_table(r);
    let mut total = 0.0;
    let mut used = 0usize;
    let mut skipped = Vec::new();
    for y in 0..r.n_classes {
        let cells = &table[y * r.n_bias..(y + 1) * r.n_bias];
        if let Some(c) = cells.iter().find(|c| c.count == 0) {
            match policy {
                EoEmptyCellPolicy::Error => {
                    return Err(MetricsError::EmptyConditionCell { y, b: c.b })
                }
                EoEmptyCellPolicy::SkipClass => {
                    skipped.push(y);
                    continue;
                }
            }
        }
        total += spread(cells.iter().map(|c| c.correct as f64 / c.count as f64));
        used += 1;
    }
    if used == 0 {
        return Err(MetricsError::EmptyRecords);
    }
    Ok(DeltaEo {
        value: total / used as f64,
        skipped_classes: skipped,
    })
}

/// Accuracy statistics of one `(y, b)` cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupCell {
    pub y: usize,
    pub b: usize,
    pub count: usize,
    pub correct: usize,
    /// `None` for an empty cell.
    #[serde(with = "realstr::real_opt")]
    pub accuracy: Option<f64>,
}

/// Per-cell counts and accuracies, indexed `y * n_bias + b`.
pub fn group_table(r: &PredictionRecords) -> Vec<GroupCell> {
    let mut count = vec![0usize; r.n_classes * r.n_bias];
    let mut correct = vec![0usize; r.n_classes * r.n_bias];
    for i in 0..r.len() {
        let g = r.y[i] * r.n_bias + r.b[i];
        count[g] += 1;
        if r.y_hat[i] == r.y[i] {
            correct[g] += 1;
        }
    }
    (0..count.len())
        .map(|g| GroupCell {
            y: g / r.n_bias,
            b: g % r.n_bias,
            count: count[g],
            correct: correct[g],
            accuracy: (count[g] > 0).then(|| correct[g] as f64 / count[g] as f64),
        })
        .collect()
}

/// Cells with `y ≠ b`, the bias-conflicting pairs of an aligned construction
/// where bias label `k` goes with class `k`.
pub fn off_diagonal_cells(n_classes: usize, n_bias: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..n_classes {
        for b in 0..n_bias {
            if y != b {
                out.push((y, b));
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Accuracies {
    /// Mean per-cell accuracy over all cells.
    pub unbiased: f64,
    /// Mean per-cell accuracy over the conflicting set.
    pub conflicting: f64,
    /// Mean per-cell accuracy over the cells outside the conflicting set;
    /// `None` when the conflicting set covers every cell.
    pub aligned: Option<f64>,
    pub worst_group: f64,
}

fn check_conflicting_set(r: &PredictionRecords, set: &[(usize, usize)]) -> Result<(), MetricsError> {
    if set.is_empty() {
        return Err(MetricsError::InvalidConflictingSet("empty".into()));
    }
    if let Some(&(y, b)) = set.iter().find(|&&(y, b)| y >= r.n_classes || b >= r.n_bias) {
        return Err(MetricsError::InvalidConflictingSet(format!(
            "cell ({y}, {b}) outside the {}x{} grid",
            r.n_classes, r.n_bias
        )));
    }
    Ok(())
}

pub fn accuracy_suite(
    r: &PredictionRecords,
    conflicting_set: &[(usize, usize)],
) -> Result<Accuracies, MetricsError> {
    check_conflicting_set(r, conflicting_set)?;
    let table = group_table(r);
    let acc: Vec<f64> = table
        .iter()
        .map(|c| c.accuracy.ok_or(MetricsError::EmptyGroupCell { y: c.y, b: c.b }))
        .collect::<Result<_, _>>()?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut in_set = vec![false; acc.len()];
    for &(y, b) in conflicting_set {
        in_set[y * r.n_bias + b] = true;
    }
    let conflicting: Vec<f64> = (0..acc.len()).filter(|&g| in_set[g]).map(|g| acc[g]).collect();
    let aligned: Vec<f64> = (0..acc.len()).filter(|&g| !in_set[g]).map(|g| acc[g]).collect();
    Ok(Accuracies {
        unbiased: mean(&acc),
        conflicting: mean(&conflicting),
        aligned: (!aligned.is_empty()).then(|| mean(&aligned)),
        worst_group: acc.iter().copied().fold(f64::INFINITY, f64::min),
    })
}

/// `Σ_{y,b} probs(y,b) · accuracy(y,b)`, with `probs` indexed `y * n_bias + b`.
pub fn weighted_mean_accuracy(r: &PredictionRecords, probs: &[f64]) -> Result<f64, MetricsError> {
    if probs.len() != r.n_classes * r.n_bias {
        return Err(MetricsError::InvalidProbabilities(format!(
            "{} entries for a {}x{} grid",
            probs.len(),
            r.n_classes,
            r.n_bias
        )));
    }
    if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(MetricsError::InvalidProbabilities("entries must be nonnegative".into()));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(MetricsError::InvalidProbabilities(format!("sum to {total}, not 1")));
    }
    let table = group_table(r);
    let mut acc = 0.0;
    for (c, &p) in table.iter().zip(probs) {
        if p > 0.0 {
            let a = c.accuracy.ok_or(MetricsError::EmptyGroupCell { y: c.y, b: c.b })?;
            acc += p * a;
        }
    }
    Ok(acc)
}

/// Fairness and accuracy summary of one set of predictions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    #[serde(with = "realstr::real")]
    pub delta_dp: f64,
    #[serde(with = "realstr::real")]
    pub delta_eo: f64,
    #[serde(with = "realstr::real")]
    pub acc_unbiased: f64,
    #[serde(with = "realstr::real")]
    pub acc_conflicting: f64,
    #[serde(with = "realstr::real_opt")]
    pub acc_aligned: Option<f64>,
    #[serde(with = "realstr::real")]
    pub acc_worst_group: f64,
    /// Plain accuracy over all records.
    #[serde(with = "realstr::real")]
    pub acc_overall: f64,
    pub group_table: Vec<GroupCell>,
    pub conflicting_set: Vec<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub eo_skipped_classes: Vec<usize>,
}

impl FairnessReport {
    /// Aligned minus conflicting accuracy, when both are defined.
    pub fn aligned_conflicting_gap(&self) -> Option<f64> {
        self.acc_aligned.map(|a| a - self.acc_conflicting)
    }
}

pub fn fairness_report(
    r: &PredictionRecords,
    conflicting_set: &[(usize, usize)],
    eo_policy: EoEmptyCellPolicy,
) -> Result<FairnessReport, MetricsError> {
    let acc = accuracy_suite(r, conflicting_set)?;
    let eo = delta_eo_with(r, eo_policy)?;
    let correct = r.y.iter().zip(&r.y_hat).filter(|(a, b)| a == b).count();
    Ok(FairnessReport {
        delta_dp: delta_dp(r)?,
        delta_eo: eo.value,
        acc_unbiased: acc.unbiased,
        acc_conflicting: acc.conflicting,
        acc_aligned: acc.aligned,
        acc_worst_group: acc.worst_group,
        acc_overall: correct as f64 / r.len() as f64,
        group_table: group_table(r),
        conflicting_set: conflicting_set.to_vec(),
        eo_skipped_classes: eo.skipped_classes,
    })
}

/// Leading columns of every metrics CSV row.
pub const CSV_COLUMNS: [&str; 10] = [
    "run_id",
    "lambda",
    "method",
    "T",
    "seed",
    "delta_dp",
    "delta_eo",
    "acc_unbiased",
    "acc_conflicting",
    "acc_worst_group",
];

/// Identifies the run a report row belongs to. Empty strings stand for
/// "not applicable" (e.g. no λ for an unwhitened baseline).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RowKey {
    pub run_id: String,
    pub lambda: String,
    pub method: String,
    pub iterations: String,
    pub seed: String,
}

impl FairnessReport {
    /// Values for [`CSV_COLUMNS`], reals in round-trip form.
    pub fn csv_row(&self, key: &RowKey) -> Vec<String> {
        vec![
            key.run_id.clone(),
            key.lambda.clone(),
            key.method.clone(),
            key.iterations.clone(),
            key.seed.clone(),
            realstr::format(self.delta_dp),
            realstr::format(self.delta_eo),
            realstr::format(self.acc_unbiased),
            realstr::format(self.acc_conflicting),
            realstr::format(self.acc_worst_group),
        ]
    }
}
