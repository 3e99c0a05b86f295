//! Fitting and applying the controllable whitening transform.
//!
//! The target block `z_t` and the bias block `z_b` are stacked into
//! `z = [z_t; z_b]` and whitened with the λ-blended covariance:
//! `z_w = Σ_λ^{-1/2} (z − μ_λ)`. The top rows of `z_w` are the whitened
//! target features, the bottom rows the whitened bias features.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::groupcov::{
    blend_covariance, compute_group_stats, BlendedCovariance, Centering, CovError,
    EmptyCellPolicy, GroupStats, GroupedDataset,
};
use crate::matops::{
    frobenius_residual, inv_sqrt, inv_sqrt_cholesky, InvSqrtMethod, MatError, Matrix, SymMatrix,
};
use crate::realstr;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_ITERATIONS: usize = 5;
pub const DEFAULT_LAMBDA: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WhitenError {
    #[error(transparent)]
    Cov(#[from] CovError),
    #[error(transparent)]
    Mat(#[from] MatError),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("need at least two samples to fit, got {0}")]
    TooFewSamples(usize),
    #[error("invalid transform document: {0}")]
    Format(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WhitenConfig {
    pub lambda: f64,
    pub method: InvSqrtMethod,
    /// Newton–Schulz steps; ignored by the closed-form solvers.
    pub iterations: usize,
    pub eps: f64,
    pub centering: Centering,
    pub empty_cells: EmptyCellPolicy,
}

impl Default for WhitenConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            method: InvSqrtMethod::NewtonSchulz,
            iterations: DEFAULT_ITERATIONS,
            eps: DEFAULT_EPS,
            centering: Centering::default(),
            empty_cells: EmptyCellPolicy::default(),
        }
    }
}

/// A fitted, frozen whitening transform.
#[derive(Clone, Debug, PartialEq)]
pub struct WhiteningTransform {
    pub mean: Vec<f64>,
    pub inv_sqrt: Matrix,
    pub target_dim: usize,
    pub bias_dim: usize,
    pub method: InvSqrtMethod,
    /// Solver steps actually taken (0 for ZCA and Cholesky).
    pub iterations: usize,
    pub lambda: f64,
    pub eps: f64,
    /// `‖M·Σ_λ·Mᵀ − I‖_F` against the unshrunk `Σ_λ`.
    pub fit_residual: f64,
}

/// A transform together with the statistics it was fitted from.
#[derive(Clone, Debug)]
pub struct WhiteningFit {
    pub transform: WhiteningTransform,
    pub blended: BlendedCovariance,
}

impl WhiteningFit {
    /// Per-sample weights of the distribution the transform whitens, for
    /// the training labels it was fitted on.
    pub fn sample_weights(&self, y: &[usize], b: &[usize]) -> Vec<f64> {
        group_sample_weights(&self.blended.stats, &self.blended.group_weights, y, b)
    }
}

fn check_blocks(z_t: &Matrix, z_b: &Matrix) -> Result<(), WhitenError> {
    if z_t.cols() != z_b.cols() {
        return Err(WhitenError::DimensionMismatch(format!(
            "target block has {} samples, bias block {}",
            z_t.cols(),
            z_b.cols()
        )));
    }
    Ok(())
}

/// Fits the transform on `[z_t; z_b]` (features as rows, samples as columns).
pub fn fit(
    z_t: &Matrix,
    z_b: &Matrix,
    y: &[usize],
    b: &[usize],
    n_classes: usize,
    n_bias: usize,
    cfg: &WhitenConfig,
) -> Result<WhiteningFit, WhitenError> {
    check_blocks(z_t, z_b)?;
    if z_t.cols() < 2 {
        return Err(WhitenError::TooFewSamples(z_t.cols()));
    }
    let z = Matrix::vstack(z_t, z_b)?;
    let data = GroupedDataset::new(z, y.to_vec(), b.to_vec(), n_classes, n_bias)?;
    let stats = compute_group_stats(&data, cfg.centering)?;
    fit_from_stats(&stats, z_t.rows(), cfg)
}

/// Fits the transform from precomputed group statistics of `[z_t; z_b]`.
pub fn fit_from_stats(
    stats: &GroupStats,
    target_dim: usize,
    cfg: &WhitenConfig,
) -> Result<WhiteningFit, WhitenError> {
    if target_dim > stats.dim {
        return Err(WhitenError::DimensionMismatch(format!(
            "target dimension {target_dim} exceeds feature dimension {}",
            stats.dim
        )));
    }
    let blended = blend_covariance(stats, cfg.lambda, cfg.empty_cells)?;
    let solved = inv_sqrt(&blended.sigma, cfg.method, cfg.iterations, cfg.eps)?;
    let fit_residual = frobenius_residual(&solved.matrix, &blended.sigma)?;
    if !solved.matrix.is_finite() {
        return Err(MatError::NonFinite { row: 0, col: 0 }.into());
    }
    let transform = WhiteningTransform {
        mean: blended.mean.clone(),
        inv_sqrt: solved.matrix,
        target_dim,
        bias_dim: stats.dim - target_dim,
        method: cfg.method,
        iterations: solved.iterations_used,
        lambda: cfg.lambda,
        eps: cfg.eps,
        fit_residual,
    };
    Ok(WhiteningFit { transform, blended })
}

impl WhiteningTransform {
    pub fn dim(&self) -> usize {
        self.target_dim + self.bias_dim
    }

    /// Identity transform of the given block sizes.
    pub fn identity(target_dim: usize, bias_dim: usize) -> Self {
        let dim = target_dim + bias_dim;
        Self {
            mean: vec![0.0; dim],
            inv_sqrt: Matrix::identity(dim),
            target_dim,
            bias_dim,
            method: InvSqrtMethod::Zca,
            iterations: 0,
            lambda: 0.0,
            eps: 0.0,
            fit_residual: 0.0,
        }
    }

    /// `inv_sqrt · (z − mean)` for stacked features `z` (dim × K).
    pub fn apply_stacked(&self, z: &Matrix) -> Result<Matrix, WhitenError> {
        if z.rows() != self.dim() {
            return Err(WhitenError::DimensionMismatch(format!(
                "transform expects {} feature rows, got {}",
                self.dim(),
                z.rows()
            )));
        }
        let centered = Matrix::from_fn(z.rows(), z.cols(), |i, j| z[(i, j)] - self.mean[i]);
        Ok(self.inv_sqrt.matmul(&centered)?)
    }

    /// Whitens `[z_t; z_b]` and splits the result into `(z_wt, z_wb)`.
    pub fn apply(&self, z_t: &Matrix, z_b: &Matrix) -> Result<(Matrix, Matrix), WhitenError> {
        check_blocks(z_t, z_b)?;
        if z_t.rows() != self.target_dim || z_b.rows() != self.bias_dim {
            return Err(WhitenError::DimensionMismatch(format!(
                "blocks of {} and {} rows for a {}+{} transform",
                z_t.rows(),
                z_b.rows(),
                self.target_dim,
                self.bias_dim
            )));
        }
        let zw = self.apply_stacked(&Matrix::vstack(z_t, z_b)?)?;
        Ok(zw.split_rows(self.target_dim))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&TransformDoc::from(self)).expect("plain data serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, WhitenError> {
        let doc: TransformDoc =
            serde_json::from_str(s).map_err(|e| WhitenError::Format(e.to_string()))?;
        doc.try_into()
    }
}

#[derive(Serialize, Deserialize)]
struct TransformDoc {
    dim: usize,
    target_dim: usize,
    #[serde(with = "realstr::real")]
    lambda: f64,
    #[serde(with = "realstr::real")]
    eps: f64,
    method: InvSqrtMethod,
    iterations: usize,
    #[serde(with = "realstr::real_vec")]
    mean: Vec<f64>,
    #[serde(with = "realstr::real_vec")]
    inv_sqrt: Vec<f64>,
    #[serde(with = "realstr::real")]
    fit_residual: f64,
}

impl From<&WhiteningTransform> for TransformDoc {
    fn from(t: &WhiteningTransform) -> Self {
        Self {
            dim: t.dim(),
            target_dim: t.target_dim,
            lambda: t.lambda,
            eps: t.eps,
            method: t.method,
            iterations: t.iterations,
            mean: t.mean.clone(),
            inv_sqrt: t.inv_sqrt.as_slice().to_vec(),
            fit_residual: t.fit_residual,
        }
    }
}

impl TryFrom<TransformDoc> for WhiteningTransform {
    type Error = WhitenError;

    fn try_from(d: TransformDoc) -> Result<Self, WhitenError> {
        if d.target_dim > d.dim || d.mean.len() != d.dim {
            return Err(WhitenError::Format(format!(
                "dim {} with target_dim {} and mean of length {}",
                d.dim,
                d.target_dim,
                d.mean.len()
            )));
        }
        let inv_sqrt = Matrix::from_vec(d.dim, d.dim, d.inv_sqrt)
            .map_err(|e| WhitenError::Format(e.to_string()))?;
        if !inv_sqrt.is_finite() || d.mean.iter().any(|x| !x.is_finite()) {
            return Err(WhitenError::Format("non-finite transform entries".into()));
        }
        Ok(Self {
            mean: d.mean,
            inv_sqrt,
            target_dim: d.target_dim,
            bias_dim: d.dim - d.target_dim,
            method: d.method,
            iterations: d.iterations,
            lambda: d.lambda,
            eps: d.eps,
            fit_residual: d.fit_residual,
        })
    }
}

/// Per-sample weights `w_i = π(g_i) / count(g_i)` that realize the cell
/// distribution `π` on the sample; they sum to 1 over occupied cells.
pub fn group_sample_weights(
    stats: &GroupStats,
    group_probs: &[f64],
    y: &[usize],
    b: &[usize],
) -> Vec<f64> {
    y.iter()
        .zip(b)
        .map(|(&yi, &bi)| {
            let g = stats.cell(yi, bi);
            group_probs[g] / stats.counts[g] as f64
        })
        .collect()
}

fn normalized_weights(k: usize, weights: Option<&[f64]>) -> Result<Vec<f64>, WhitenError> {
    match weights {
        None => Ok(vec![1.0 / k as f64; k]),
        Some(w) => {
            if w.len() != k {
                return Err(WhitenError::DimensionMismatch(format!(
                    "{} weights for {k} samples",
                    w.len()
                )));
            }
            let total: f64 = w.iter().sum();
            if !(total > 0.0 && total.is_finite()) || w.iter().any(|&v| v < 0.0) {
                return Err(MatError::InvalidArgument(
                    "weights must be nonnegative with a positive finite sum".into(),
                )
                .into());
            }
            Ok(w.iter().map(|v| v / total).collect())
        }
    }
}

fn weighted_row_means(x: &Matrix, w: &[f64]) -> Vec<f64> {
    (0..x.rows())
        .map(|i| x.row(i).iter().zip(w).map(|(a, b)| a * b).sum())
        .collect()
}

/// Weighted covariance between the rows of `a` and the rows of `b`
/// (`a.rows() × b.rows()`), with weights normalized to sum 1 and no
/// small-sample correction. `None` means equal weights.
pub fn cross_block_covariance(
    a: &Matrix,
    b: &Matrix,
    weights: Option<&[f64]>,
) -> Result<Matrix, WhitenError> {
    check_blocks(a, b)?;
    let k = a.cols();
    if k == 0 {
        return Err(WhitenError::TooFewSamples(0));
    }
    let w = normalized_weights(k, weights)?;
    let ma = weighted_row_means(a, &w);
    let mb = weighted_row_means(b, &w);
    let ca = Matrix::from_fn(a.rows(), k, |i, j| (a[(i, j)] - ma[i]) * w[j]);
    let cb = Matrix::from_fn(b.rows(), k, |i, j| b[(i, j)] - mb[i]);
    Ok(ca.matmul(&cb.transpose())?)
}

/// Weighted covariance of the rows of `x`.
pub fn weighted_covariance(x: &Matrix, weights: Option<&[f64]>) -> Result<Matrix, WhitenError> {
    Ok(cross_block_covariance(x, x, weights)?.symmetrized())
}

/// Weighted least-squares coefficients `B` of the affine map `to ≈ B·from + c`.
pub fn ols_coefficients(
    from: &Matrix,
    to: &Matrix,
    weights: Option<&[f64]>,
) -> Result<Matrix, WhitenError> {
    let cxx = SymMatrix::from_symmetrized(weighted_covariance(from, weights)?)?;
    let cyx = cross_block_covariance(to, from, weights)?;
    // Cov_xx^{-1} = L^{-T} L^{-1}
    let linv = inv_sqrt_cholesky(&cxx, 0.0)?.matrix;
    let cov_inv = linv.transpose().matmul(&linv)?;
    Ok(cyx.matmul(&cov_inv)?)
}

/// In-sample checks that a transform removed linear dependence between the
/// two whitened blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WhiteningCertificate {
    /// `max |Cov_w(z_w) − I|` under the fit weighting.
    #[serde(with = "realstr::real")]
    pub identity_max_error: f64,
    /// `max |Cov_w(z_wt, z_wb)|` under the fit weighting.
    #[serde(with = "realstr::real")]
    pub cross_max_abs: f64,
    /// `‖B‖_F` for the weighted regression of `z_wb` on `z_wt`.
    #[serde(with = "realstr::real")]
    pub ols_norm: f64,
    /// `max |Cov(z_wt, z_wb)|` with equal sample weights.
    #[serde(with = "realstr::real")]
    pub cross_max_abs_unweighted: f64,
}

/// Evaluates the certificate on the fit data. `weights` should be the
/// fit's own sample weighting ([`WhiteningFit::sample_weights`]).
pub fn certificate(
    transform: &WhiteningTransform,
    z_t: &Matrix,
    z_b: &Matrix,
    weights: &[f64],
) -> Result<WhiteningCertificate, WhitenError> {
    let (wt, wb) = transform.apply(z_t, z_b)?;
    let zw = Matrix::vstack(&wt, &wb)?;
    let cov = weighted_covariance(&zw, Some(weights))?;
    let identity_max_error = cov.sub(&Matrix::identity(zw.rows()))?.max_abs();
    let cross = cross_block_covariance(&wt, &wb, Some(weights))?;
    let ols = ols_coefficients(&wt, &wb, Some(weights))?;
    let unweighted = cross_block_covariance(&wt, &wb, None)?;
    Ok(WhiteningCertificate {
        identity_max_error,
        cross_max_abs: cross.max_abs(),
        ols_norm: ols.frobenius_norm(),
        cross_max_abs_unweighted: unweighted.max_abs(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matops::inv_sqrt_zca;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn zca_cfg(lambda: f64) -> WhitenConfig {
        WhitenConfig {
            lambda,
            method: InvSqrtMethod::Zca,
            eps: 0.0,
            ..WhitenConfig::default()
        }
    }

    /// Correlated two-block data with an unbalanced 2x2 group layout.
    fn toy(n: usize, seed: u64) -> (Matrix, Matrix, Vec<usize>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut y = Vec::with_capacity(n);
        let mut b = Vec::with_capacity(n);
        for i in 0..n {
            let yi = i % 2;
            let bi = if rng.random_bool(0.8) { yi } else { 1 - yi };
            y.push(yi);
            b.push(bi);
        }
        let zt = Matrix::from_fn(2, n, |r, j| {
            let base = y[j] as f64 + 0.5 * b[j] as f64;
            base * (r as f64 + 1.0) + rng.random_range(-1.0..1.0)
        });
        let zb = Matrix::from_fn(2, n, |r, j| {
            2.0 * b[j] as f64 - r as f64 * zt[(0, j)] * 0.3 + rng.random_range(-1.0..1.0)
        });
        (zt, zb, y, b)
    }

    #[test]
    fn already_white_data_gives_identity() {
        // the four corners (±1, ±1), one per cell, have mean 0 and covariance I
        let pts = [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)];
        let zt = Matrix::from_fn(1, 4, |_, j| pts[j].0);
        let zb = Matrix::from_fn(1, 4, |_, j| pts[j].1);
        let y = vec![0, 0, 1, 1];
        let b = vec![0, 1, 0, 1];
        for method in InvSqrtMethod::ALL {
            let cfg = WhitenConfig {
                lambda: 0.5,
                method,
                iterations: 20,
                eps: 0.0,
                ..WhitenConfig::default()
            };
            let f = fit(&zt, &zb, &y, &b, 2, 2, &cfg).unwrap();
            let d = f.transform.inv_sqrt.sub(&Matrix::identity(2)).unwrap().max_abs();
            assert!(d <= 1e-6, "{method}: {d}");
            assert!(f.transform.fit_residual <= 1e-6);
        }
    }

    #[test]
    fn hand_two_by_two() {
        // M = 1 with two occupied cells of two samples each
        let zt = Matrix::from_rows(&[[0.0, 2.0, 4.0, 6.0]]).unwrap();
        let zb = Matrix::from_rows(&[[0.0, 0.0, 2.0, 4.0]]).unwrap();
        let y = vec![0, 0, 1, 1];
        let b = vec![0, 0, 0, 0];
        let f = fit(&zt, &zb, &y, &b, 2, 1, &zca_cfg(0.5)).unwrap();
        // balanced cells: Σ_λ is the plain covariance for every λ
        // mean (3, 1.5); deviations t = (-3,-1,1,3), u = (-1.5,-1.5,0.5,2.5)
        let var_t = (9.0 + 1.0 + 1.0 + 9.0) / 4.0;
        let var_u = (2.25 + 2.25 + 0.25 + 6.25) / 4.0;
        let cov = (4.5 + 1.5 + 0.5 + 7.5) / 4.0;
        let sigma = SymMatrix::new(Matrix::from_rows(&[[var_t, cov], [cov, var_u]]).unwrap())
            .unwrap();
        let oracle = inv_sqrt_zca(&sigma, 0.0).unwrap().matrix;
        let d = f.transform.inv_sqrt.sub(&oracle).unwrap().max_abs();
        assert!(d <= 1e-8, "{d}");
        assert_eq!(f.transform.mean, vec![3.0, 1.5]);
    }

    #[test]
    fn endpoints_whiten_their_own_covariance() {
        let (zt, zb, y, b) = toy(400, 3);
        let f0 = fit(&zt, &zb, &y, &b, 2, 2, &zca_cfg(0.0)).unwrap();
        let f1 = fit(&zt, &zb, &y, &b, 2, 2, &zca_cfg(1.0)).unwrap();
        assert!(f0.transform.inv_sqrt.sub(&f1.transform.inv_sqrt).unwrap().max_abs() > 1e-3);

        let z = Matrix::vstack(&zt, &zb).unwrap();
        // Σ_0: plain covariance of the sample
        let s0 = SymMatrix::from_symmetrized(weighted_covariance(&z, None).unwrap()).unwrap();
        assert!(frobenius_residual(&f0.transform.inv_sqrt, &s0).unwrap() <= 1e-6);
        // Σ_1: each cell reweighted to mass 1/4
        let counts = [0, 1, 2, 3].map(|g| {
            (0..y.len()).filter(|&i| y[i] * 2 + b[i] == g).count() as f64
        });
        let w: Vec<f64> = (0..y.len()).map(|i| 0.25 / counts[y[i] * 2 + b[i]]).collect();
        let s1 = SymMatrix::from_symmetrized(weighted_covariance(&z, Some(&w)).unwrap()).unwrap();
        assert!(frobenius_residual(&f1.transform.inv_sqrt, &s1).unwrap() <= 1e-6);
    }

    #[test]
    fn certificate_on_fit_data() {
        let (zt, zb, y, b) = toy(500, 9);
        for lambda in [0.0, 0.25, 1.0] {
            let f = fit(&zt, &zb, &y, &b, 2, 2, &zca_cfg(lambda)).unwrap();
            let w = f.sample_weights(&y, &b);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let c = certificate(&f.transform, &zt, &zb, &w).unwrap();
            assert!(c.identity_max_error <= 1e-6, "{c:?}");
            assert!(c.cross_max_abs <= 1e-6, "{c:?}");
            assert!(c.ols_norm <= 1e-6, "{c:?}");
        }
    }

    #[test]
    fn identity_transform_and_centering() {
        let t = WhiteningTransform::identity(2, 1);
        let zt = Matrix::from_rows(&[[1.5, -2.0], [0.25, 7.0]]).unwrap();
        let zb = Matrix::from_rows(&[[3.0, 4.0]]).unwrap();
        let (wt, wb) = t.apply(&zt, &zb).unwrap();
        assert_eq!(wt, zt);
        assert_eq!(wb, zb);

        let (zt, zb, y, b) = toy(100, 1);
        let f = fit(&zt, &zb, &y, &b, 2, 2, &WhitenConfig::default()).unwrap();
        let m = &f.transform.mean;
        let pt = Matrix::from_vec(2, 1, m[..2].to_vec()).unwrap();
        let pb = Matrix::from_vec(2, 1, m[2..].to_vec()).unwrap();
        let (wt, wb) = f.transform.apply(&pt, &pb).unwrap();
        assert_eq!(wt.max_abs(), 0.0);
        assert_eq!(wb.max_abs(), 0.0);
    }

    #[test]
    fn cross_covariance_cases() {
        let a = Matrix::from_rows(&[[1.0, 2.0, 3.0, 6.0]]).unwrap();
        let own = cross_block_covariance(&a, &a, None).unwrap();
        assert!((own[(0, 0)] - 3.5).abs() < 1e-15);
        let c = Matrix::from_rows(&[[5.0; 4], [-1.0; 4]]).unwrap();
        assert_eq!(cross_block_covariance(&a, &c, None).unwrap().max_abs(), 0.0);
        assert!(cross_block_covariance(&a, &Matrix::zeros(1, 3), None).is_err());
    }

    #[test]
    fn mismatched_blocks_are_rejected() {
        let (zt, zb, y, b) = toy(50, 2);
        let f = fit(&zt, &zb, &y, &b, 2, 2, &WhitenConfig::default()).unwrap();
        assert!(f.transform.apply(&zb, &Matrix::zeros(1, 50)).is_err());
        assert!(fit(&zt, &Matrix::zeros(2, 49), &y, &b, 2, 2, &WhitenConfig::default()).is_err());
    }

    #[test]
    fn json_round_trip_is_exact() {
        let (zt, zb, y, b) = toy(80, 4);
        let f = fit(&zt, &zb, &y, &b, 2, 2, &WhitenConfig::default()).unwrap();
        let s = f.transform.to_json();
        assert!(s.contains("\"method\": \"cns\""));
        let back = WhiteningTransform::from_json(&s).unwrap();
        assert_eq!(back, f.transform);
        assert!(WhiteningTransform::from_json("{\"dim\": 2}").is_err());
    }

    #[test]
    fn refits_are_bitwise_identical() {
        let (zt, zb, y, b) = toy(300, 6);
        let cfg = WhitenConfig::default();
        let a = fit(&zt, &zb, &y, &b, 2, 2, &cfg).unwrap().transform;
        let c = fit(&zt, &zb, &y, &b, 2, 2, &cfg).unwrap().transform;
        assert_eq!(a.to_json(), c.to_json());
    }
}
