use super::{MatError, Matrix, SymMatrix};

/// Off-diagonal stopping tolerance, relative to `‖A‖_F`.
pub const JACOBI_REL_TOL: f64 = 1e-12;
/// Sweep budget for the cyclic Jacobi solver.
pub const JACOBI_MAX_SWEEPS: usize = 100;

/// Eigenpairs of a symmetric matrix.
///
/// `values` are sorted in descending order and column `k` of `vectors`
/// is the unit eigenvector paired with `values[k]`.
#[derive(Clone, Debug)]
pub struct SymEigen {
    pub values: Vec<f64>,
    pub vectors: Matrix,
    pub sweeps: usize,
}

impl SymEigen {
    /// `V · diag(f(w)) · Vᵀ`, computed on the upper triangle and mirrored so
    /// the result is exactly symmetric.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let n = self.values.len();
        let fw: Vec<f64> = self.values.iter().map(|&w| f(w)).collect();
        let v = &self.vectors;
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += v[(i, k)] * fw[k] * v[(j, k)];
                }
                out[(i, j)] = s;
                out[(j, i)] = s;
            }
        }
        out
    }
}

fn off_diagonal_norm(a: &Matrix) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[(i, j)] * a[(i, j)];
            }
        }
    }
    s.sqrt()
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Sweeps over all `(p, q)` pairs in row order until the off-diagonal
/// Frobenius norm drops to `JACOBI_REL_TOL · ‖A‖_F`. Each column of the
/// returned eigenvector matrix has its largest-magnitude entry positive.
pub fn sym_eig(a: &SymMatrix) -> Result<SymEigen, MatError> {
    let n = a.dim();
    let mut m = a.as_matrix().clone();
    let mut v = Matrix::identity(n);
    let tol = JACOBI_REL_TOL * a.frobenius_norm();

    let mut sweeps = 0;
    loop {
        if off_diagonal_norm(&m) <= tol {
            break;
        }
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(MatError::NonConvergence { sweeps });
        }
        sweeps += 1;
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                // tan of the rotation angle, smaller root for stability
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + theta.hypot(1.0))
                };
                let c = 1.0 / t.hypot(1.0);
                let s = t * c;

                for r in 0..n {
                    if r == p || r == q {
                        continue;
                    }
                    let arp = m[(r, p)];
                    let arq = m[(r, q)];
                    let new_rp = c * arp - s * arq;
                    let new_rq = s * arp + c * arq;
                    m[(r, p)] = new_rp;
                    m[(p, r)] = new_rp;
                    m[(r, q)] = new_rq;
                    m[(q, r)] = new_rq;
                }
                m[(p, p)] = app - t * apq;
                m[(q, q)] = aqq + t * apq;
                m[(p, q)] = 0.0;
                m[(q, p)] = 0.0;

                for r in 0..n {
                    let vrp = v[(r, p)];
                    let vrq = v[(r, q)];
                    v[(r, p)] = c * vrp - s * vrq;
                    v[(r, q)] = s * vrp + c * vrq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].total_cmp(&m[(i, i)]));
    let values: Vec<f64> = order.iter().map(|&k| m[(k, k)]).collect();
    let mut vectors = v.select_columns(&order);
    for k in 0..n {
        let mut pivot = 0.0f64;
        for r in 0..n {
            if vectors[(r, k)].abs() > pivot.abs() {
                pivot = vectors[(r, k)];
            }
        }
        if pivot < 0.0 {
            for r in 0..n {
                vectors[(r, k)] = -vectors[(r, k)];
            }
        }
    }

    Ok(SymEigen {
        values,
        vectors,
        sweeps,
    })
}
