//! Per-group feature statistics and the group-reweighted covariance.
//!
//! Samples fall into `(y, b)` cells. The *biased* covariance weights each
//! cell by its empirical probability, the *unbiased* one gives every cell
//! the same mass `1 / (N_Y · N_B)`, and the blended covariance mixes the two
//! with a coefficient `λ ∈ [0, 1]`.
//!
//! Per-cell second moments are stored around the cell's own mean. How they
//! are recentered when cells are combined depends on [`Centering`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matops::{MatError, Matrix, SymMatrix};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CovError {
    #[error("dataset has no samples")]
    EmptyDataset,
    #[error("group cell (y={y}, b={b}) has no samples")]
    EmptyGroupCell { y: usize, b: usize },
    #[error("lambda must lie in [0, 1], got {0}")]
    LambdaOutOfRange(f64),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error(transparent)]
    Mat(#[from] MatError),
}

/// Features (`C × N`, one column per sample) with target and bias labels.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedDataset {
    features: Matrix,
    y: Vec<usize>,
    b: Vec<usize>,
    n_classes: usize,
    n_bias: usize,
}

impl GroupedDataset {
    pub fn new(
        features: Matrix,
        y: Vec<usize>,
        b: Vec<usize>,
        n_classes: usize,
        n_bias: usize,
    ) -> Result<Self, CovError> {
        let n = features.cols();
        if n == 0 || features.rows() == 0 {
            return Err(CovError::EmptyDataset);
        }
        if y.len() != n || b.len() != n {
            return Err(CovError::InvalidDataset(format!(
                "{n} samples but {} target and {} bias labels",
                y.len(),
                b.len()
            )));
        }
        if n_classes == 0 || n_bias == 0 {
            return Err(CovError::InvalidDataset(
                "label cardinalities must be positive".into(),
            ));
        }
        if let Some(i) = y.iter().position(|&v| v >= n_classes) {
            return Err(CovError::InvalidDataset(format!(
                "target label {} at sample {i} outside 0..{n_classes}",
                y[i]
            )));
        }
        if let Some(i) = b.iter().position(|&v| v >= n_bias) {
            return Err(CovError::InvalidDataset(format!(
                "bias label {} at sample {i} outside 0..{n_bias}",
                b[i]
            )));
        }
        if !features.is_finite() {
            return Err(CovError::InvalidDataset("features contain non-finite values".into()));
        }
        Ok(Self {
            features,
            y,
            b,
            n_classes,
            n_bias,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn y(&self) -> &[usize] {
        &self.y
    }

    pub fn b(&self) -> &[usize] {
        &self.b
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_bias(&self) -> usize {
        self.n_bias
    }

    pub fn n_samples(&self) -> usize {
        self.features.cols()
    }

    pub fn dim(&self) -> usize {
        self.features.rows()
    }
}

/// Reference point for the second moments that enter the covariance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Centering {
    /// Each cell is centered on its own mean; the covariance only sees
    /// within-cell spread.
    PerGroup,
    /// All cells are centered on the mean of the mixture being whitened, so
    /// between-cell mean differences are part of the covariance.
    #[default]
    Global,
}

/// What to do when the uniform reweighting meets an empty `(y, b)` cell.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyCellPolicy {
    #[default]
    Error,
    /// Spread the uniform mass over occupied cells only.
    RenormalizeOverOccupied,
}

/// Sufficient statistics per `(y, b)` cell, indexed `y * n_bias + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupStats {
    pub n_classes: usize,
    pub n_bias: usize,
    pub dim: usize,
    pub n_samples: usize,
    pub counts: Vec<usize>,
    /// Cell means; zero vectors for empty cells.
    pub means: Vec<Vec<f64>>,
    /// `E[(x − m_g)(x − m_g)ᵀ]` within each cell (1/n normalization).
    pub second_moments: Vec<Matrix>,
    pub empirical_probs: Vec<f64>,
    pub centering: Centering,
}

impl GroupStats {
    pub fn n_cells(&self) -> usize {
        self.n_classes * self.n_bias
    }

    pub fn cell(&self, y: usize, b: usize) -> usize {
        y * self.n_bias + b
    }

    pub fn count(&self, y: usize, b: usize) -> usize {
        self.counts[self.cell(y, b)]
    }

    /// Group probabilities under the uniform (independent) distribution.
    pub fn uniform_probs(&self, policy: EmptyCellPolicy) -> Result<Vec<f64>, CovError> {
        let occupied = self.counts.iter().filter(|&&c| c > 0).count();
        match policy {
            EmptyCellPolicy::Error => {
                if let Some(g) = self.counts.iter().position(|&c| c == 0) {
                    return Err(CovError::EmptyGroupCell {
                        y: g / self.n_bias,
                        b: g % self.n_bias,
                    });
                }
                let p = 1.0 / self.n_cells() as f64;
                Ok(vec![p; self.n_cells()])
            }
            EmptyCellPolicy::RenormalizeOverOccupied => {
                let p = 1.0 / occupied as f64;
                Ok(self
                    .counts
                    .iter()
                    .map(|&c| if c > 0 { p } else { 0.0 })
                    .collect())
            }
        }
    }

    /// `λ·P_u + (1 − λ)·P_b` per cell.
    pub fn blended_probs(&self, lambda: f64, policy: EmptyCellPolicy) -> Result<Vec<f64>, CovError> {
        check_lambda(lambda)?;
        let pu = self.uniform_probs(policy)?;
        Ok(pu
            .iter()
            .zip(&self.empirical_probs)
            .map(|(&u, &b)| lambda * u + (1.0 - lambda) * b)
            .collect())
    }

    /// `Σ_g w_g · m_g`.
    pub fn weighted_mean(&self, weights: &[f64]) -> Vec<f64> {
        let mut mu = vec![0.0; self.dim];
        for (g, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (m, &x) in mu.iter_mut().zip(&self.means[g]) {
                *m += w * x;
            }
        }
        mu
    }

    /// `Σ_g w_g · E_g[(x − r)(x − r)ᵀ]` with `r = reference` under
    /// [`Centering::Global`] and the cell's own mean under
    /// [`Centering::PerGroup`].
    pub fn mixture_second_moment(&self, weights: &[f64], reference: &[f64]) -> SymMatrix {
        let c = self.dim;
        let mut acc = Matrix::zeros(c, c);
        let mut shift = vec![0.0; c];
        for (g, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let m2 = &self.second_moments[g];
            let global = self.centering == Centering::Global;
            if global {
                for (s, (&m, &r)) in shift.iter_mut().zip(self.means[g].iter().zip(reference)) {
                    *s = m - r;
                }
            }
            for i in 0..c {
                for j in i..c {
                    let mut v = m2[(i, j)];
                    if global {
                        v += shift[i] * shift[j];
                    }
                    acc[(i, j)] += w * v;
                }
            }
        }
        for i in 0..c {
            for j in (i + 1)..c {
                acc[(j, i)] = acc[(i, j)];
            }
        }
        SymMatrix::new(acc).expect("mixture of finite symmetric moments")
    }
}

fn check_lambda(lambda: f64) -> Result<(), CovError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(CovError::LambdaOutOfRange(lambda));
    }
    Ok(())
}

/// Counts, means and within-cell second moments for every `(y, b)` cell.
pub fn compute_group_stats(
    data: &GroupedDataset,
    centering: Centering,
) -> Result<GroupStats, CovError> {
    let n = data.n_samples();
    if n == 0 {
        return Err(CovError::EmptyDataset);
    }
    let c = data.dim();
    let n_cells = data.n_classes * data.n_bias;
    let x = data.features();
    let cell_of = |i: usize| data.y[i] * data.n_bias + data.b[i];

    let mut counts = vec![0usize; n_cells];
    let mut sums = vec![vec![0.0; c]; n_cells];
    let mut sample = vec![0.0; c];
    for i in 0..n {
        let g = cell_of(i);
        counts[g] += 1;
        for (k, s) in sums[g].iter_mut().enumerate() {
            *s += x[(k, i)];
        }
    }
    let means: Vec<Vec<f64>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &cnt)| {
            if cnt == 0 {
                s
            } else {
                s.into_iter().map(|v| v / cnt as f64).collect()
            }
        })
        .collect();

    // second pass: centered outer products, upper triangle only
    let mut moments = vec![Matrix::zeros(c, c); n_cells];
    for i in 0..n {
        let g = cell_of(i);
        for k in 0..c {
            sample[k] = x[(k, i)] - means[g][k];
        }
        let m = &mut moments[g];
        for p in 0..c {
            let sp = sample[p];
            for q in p..c {
                m[(p, q)] += sp * sample[q];
            }
        }
    }
    for (m, &cnt) in moments.iter_mut().zip(&counts) {
        let inv = if cnt > 0 { 1.0 / cnt as f64 } else { 0.0 };
        for p in 0..c {
            for q in p..c {
                let v = m[(p, q)] * inv;
                m[(p, q)] = v;
                m[(q, p)] = v;
            }
        }
    }

    let empirical_probs = counts.iter().map(|&k| k as f64 / n as f64).collect();
    Ok(GroupStats {
        n_classes: data.n_classes,
        n_bias: data.n_bias,
        dim: c,
        n_samples: n,
        counts,
        means,
        second_moments: moments,
        empirical_probs,
        centering,
    })
}

/// Covariance under the empirical group distribution, centered on the
/// empirical mean (for [`Centering::Global`] this is the ordinary sample
/// covariance).
pub fn biased_covariance(stats: &GroupStats) -> SymMatrix {
    let mu = stats.weighted_mean(&stats.empirical_probs);
    stats.mixture_second_moment(&stats.empirical_probs, &mu)
}

/// Covariance with every `(y, b)` cell weighted `1 / (N_Y · N_B)`, centered
/// on the correspondingly reweighted mean.
pub fn unbiased_covariance(
    stats: &GroupStats,
    policy: EmptyCellPolicy,
) -> Result<SymMatrix, CovError> {
    let pu = stats.uniform_probs(policy)?;
    let mu = stats.weighted_mean(&pu);
    Ok(stats.mixture_second_moment(&pu, &mu))
}

/// `Σ_λ = λ·Σ_u + (1 − λ)·Σ_b` with its matching center `μ_λ`.
#[derive(Clone, Debug)]
pub struct BlendedCovariance {
    pub lambda: f64,
    pub sigma: SymMatrix,
    /// `μ_λ = Σ_g (λ·P_u + (1 − λ)·P_b)(g) · m_g`.
    pub mean: Vec<f64>,
    /// The per-cell mixture weights behind `mean` and `sigma`.
    pub group_weights: Vec<f64>,
    pub stats: GroupStats,
}

impl BlendedCovariance {
    /// Recomputes `λ·Σ_u + (1 − λ)·Σ_b` from the stored statistics, with
    /// both terms centered on `μ_λ`.
    pub fn recompute(&self, policy: EmptyCellPolicy) -> Result<SymMatrix, CovError> {
        blend_terms(&self.stats, self.lambda, &self.mean, policy)
    }
}

fn blend_terms(
    stats: &GroupStats,
    lambda: f64,
    reference: &[f64],
    policy: EmptyCellPolicy,
) -> Result<SymMatrix, CovError> {
    let pu = stats.uniform_probs(policy)?;
    let sigma_u = stats.mixture_second_moment(&pu, reference);
    let sigma_b = stats.mixture_second_moment(&stats.empirical_probs, reference);
    if lambda == 0.0 {
        return Ok(sigma_b);
    }
    if lambda == 1.0 {
        return Ok(sigma_u);
    }
    let blended = sigma_u
        .as_matrix()
        .scaled(lambda)
        .add(&sigma_b.as_matrix().scaled(1.0 - lambda))?;
    Ok(SymMatrix::new(blended)?)
}

/// Blends the unbiased and biased covariances with weight `lambda`.
///
/// Both terms are centered on the blended mean `μ_λ`, which makes `sigma`
/// the covariance of the λ-mixture of cells. At `λ = 0` the result equals
/// [`biased_covariance`] and at `λ = 1` it equals [`unbiased_covariance`].
pub fn blend_covariance(
    stats: &GroupStats,
    lambda: f64,
    policy: EmptyCellPolicy,
) -> Result<BlendedCovariance, CovError> {
    check_lambda(lambda)?;
    let weights = if lambda == 0.0 {
        stats.empirical_probs.clone()
    } else {
        stats.blended_probs(lambda, policy)?
    };
    let mean = stats.weighted_mean(&weights);
    let sigma = blend_terms(stats, lambda, &mean, policy)?;
    Ok(BlendedCovariance {
        lambda,
        sigma,
        mean,
        group_weights: weights,
        stats: stats.clone(),
    })
}
