use serde::{Deserialize, Serialize};

use super::{sym_eig, MatError, Matrix, SymMatrix};

/// Solver used to compute an inverse square root `M` with `M·A·Mᵀ = I`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InvSqrtMethod {
    /// Principal root from the eigendecomposition.
    #[serde(rename = "zca")]
    Zca,
    /// Inverse of the lower Cholesky factor.
    #[serde(rename = "cd")]
    Cholesky,
    /// Coupled Newton–Schulz iteration on the trace-normalized matrix.
    #[serde(rename = "cns")]
    NewtonSchulz,
}

impl InvSqrtMethod {
    pub const ALL: [InvSqrtMethod; 3] = [Self::Zca, Self::Cholesky, Self::NewtonSchulz];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Zca => "zca",
            Self::Cholesky => "cd",
            Self::NewtonSchulz => "cns",
        }
    }

    /// Whether the iteration count changes the result.
    pub fn is_iterative(self) -> bool {
        matches!(self, Self::NewtonSchulz)
    }
}

impl std::fmt::Display for InvSqrtMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for InvSqrtMethod {
    type Err = MatError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "zca" => Ok(Self::Zca),
            "cd" | "cholesky" => Ok(Self::Cholesky),
            "cns" | "cni" | "ns" | "newton-schulz" | "newton_schulz" => Ok(Self::NewtonSchulz),
            other => Err(MatError::InvalidArgument(format!(
                "unknown inverse square root method '{other}' (expected zca, cd or cns)"
            ))),
        }
    }
}

/// A computed inverse square root together with how well it whitens.
#[derive(Clone, Debug)]
pub struct InvSqrtResult {
    pub matrix: Matrix,
    pub method: InvSqrtMethod,
    /// Newton–Schulz steps taken; 0 for closed-form solvers.
    pub iterations_used: usize,
    /// `‖M·(A + eps·I)·Mᵀ − I‖_F` for the returned `M`.
    pub residual: f64,
}

/// `‖M·A·Mᵀ − I‖_F`.
pub fn frobenius_residual(m: &Matrix, a: &SymMatrix) -> Result<f64, MatError> {
    if m.cols() != a.dim() || m.rows() != a.dim() {
        return Err(MatError::DimensionMismatch {
            expected: format!("{0}x{0}", a.dim()),
            got: format!("{}x{}", m.rows(), m.cols()),
        });
    }
    let mam = m.mul_unchecked(a.as_matrix()).mul_unchecked(&m.transpose());
    let n = a.dim();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            let d = mam[(i, j)] - if i == j { 1.0 } else { 0.0 };
            s += d * d;
        }
    }
    Ok(s.sqrt())
}

fn check_eps(eps: f64) -> Result<(), MatError> {
    if !(eps.is_finite() && eps >= 0.0) {
        return Err(MatError::InvalidArgument(format!(
            "eps must be finite and nonnegative, got {eps}"
        )));
    }
    Ok(())
}

/// Principal inverse square root `V·diag((w + eps)^{-1/2})·Vᵀ`.
pub fn inv_sqrt_zca(a: &SymMatrix, eps: f64) -> Result<InvSqrtResult, MatError> {
    check_eps(eps)?;
    let eig = sym_eig(a)?;
    if let Some(&bad) = eig.values.iter().find(|&&w| w + eps <= 0.0) {
        return Err(MatError::NotPositiveDefinite { value: bad + eps });
    }
    let matrix = eig.reconstruct_with(|w| 1.0 / (w + eps).sqrt());
    let residual = frobenius_residual(&matrix, &a.shifted(eps))?;
    Ok(InvSqrtResult {
        matrix,
        method: InvSqrtMethod::Zca,
        iterations_used: 0,
        residual,
    })
}

/// Lower Cholesky factor `L` of `a + eps·I`.
pub fn cholesky(a: &SymMatrix, eps: f64) -> Result<Matrix, MatError> {
    check_eps(eps)?;
    let n = a.dim();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)] + eps;
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(MatError::NotPositiveDefinite { value: d });
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

fn lower_triangular_inverse(l: &Matrix) -> Matrix {
    let n = l.rows();
    let mut inv = Matrix::zeros(n, n);
    for col in 0..n {
        inv[(col, col)] = 1.0 / l[(col, col)];
        for i in (col + 1)..n {
            let mut s = 0.0;
            for k in col..i {
                s += l[(i, k)] * inv[(k, col)];
            }
            inv[(i, col)] = -s / l[(i, i)];
        }
    }
    inv
}

/// `L^{-1}` where `a + eps·I = L·Lᵀ`. The result is lower triangular, so it
/// whitens but is not symmetric.
pub fn inv_sqrt_cholesky(a: &SymMatrix, eps: f64) -> Result<InvSqrtResult, MatError> {
    let l = cholesky(a, eps)?;
    let matrix = lower_triangular_inverse(&l);
    let residual = frobenius_residual(&matrix, &a.shifted(eps))?;
    Ok(InvSqrtResult {
        matrix,
        method: InvSqrtMethod::Cholesky,
        iterations_used: 0,
        residual,
    })
}

/// `‖Y_k‖_F` above this aborts the Newton–Schulz loop.
pub const NS_DIVERGENCE_BOUND: f64 = 1e6;

/// Coupled Newton–Schulz iteration.
///
/// With `A' = (a + eps·I) / tr(a + eps·I)`, iterates
/// `Y₀ = A'`, `Z₀ = I`, `P = 3I − Z·Y`, `Y ← ½·Y·P`, `Z ← ½·P·Z`
/// for `iterations` steps and returns `(Z + Zᵀ) / (2·√tr)`.
pub fn inv_sqrt_newton_schulz(
    a: &SymMatrix,
    iterations: usize,
    eps: f64,
) -> Result<InvSqrtResult, MatError> {
    check_eps(eps)?;
    if iterations == 0 {
        return Err(MatError::InvalidArgument(
            "Newton-Schulz needs at least one iteration".into(),
        ));
    }
    let n = a.dim();
    let shifted = a.shifted(eps);
    if let Some(&d) = shifted.as_matrix().diagonal().iter().find(|&&d| d <= 0.0) {
        return Err(MatError::NotPositiveDefinite { value: d });
    }
    let tr = shifted.trace();
    if !(tr > 0.0 && tr.is_finite()) {
        return Err(MatError::NotPositiveDefinite { value: tr });
    }

    let mut y = shifted.as_matrix().scaled(1.0 / tr);
    let mut z = Matrix::identity(n);
    for k in 0..iterations {
        let mut p = z.mul_unchecked(&y).scaled(-1.0);
        for i in 0..n {
            p[(i, i)] += 3.0;
        }
        y = y.mul_unchecked(&p).scaled(0.5);
        z = p.mul_unchecked(&z).scaled(0.5);
        let norm = y.frobenius_norm();
        if norm.is_nan() || norm > NS_DIVERGENCE_BOUND {
            return Err(MatError::Diverged {
                iteration: k + 1,
                norm,
            });
        }
    }

    let matrix = z.scaled(1.0 / tr.sqrt()).symmetrized();
    let residual = frobenius_residual(&matrix, &shifted)?;
    Ok(InvSqrtResult {
        matrix,
        method: InvSqrtMethod::NewtonSchulz,
        iterations_used: iterations,
        residual,
    })
}

/// Dispatches to the chosen solver. `iterations` only matters for
/// Newton–Schulz.
pub fn inv_sqrt(
    a: &SymMatrix,
    method: InvSqrtMethod,
    iterations: usize,
    eps: f64,
) -> Result<InvSqrtResult, MatError> {
    match method {
        InvSqrtMethod::Zca => inv_sqrt_zca(a, eps),
        InvSqrtMethod::Cholesky => inv_sqrt_cholesky(a, eps),
        InvSqrtMethod::NewtonSchulz => inv_sqrt_newton_schulz(a, iterations, eps),
    }
}
