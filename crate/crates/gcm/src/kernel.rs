//! Kernels, the scaled Gram matrix, its eigendecomposition, and the
//! spectrum-based ridge tuning rule.
//!
//! Throughout, the Gram matrix carries a 1/n scaling: `K_ij = k(z_i, z_j)/n`.
//! Its eigenvalues therefore sum to k(z,z)-scale quantities (exactly 1 for
//! the Gaussian kernel) and the tuning objective
//! `(1/n) * sum_i mu_i^2/(mu_i + lambda)^2 + lambda` is dimensionless.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{GcmError, Result};

/// Smallest ridge parameter the tuning rule will return.
pub const LAMBDA_FLOOR: f64 = 1e-10;

/// Kernel family for kernel ridge regression.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelSpec {
    /// `k(z, z') = exp(-||z - z'||^2 / (2 sigma^2))`.
    Gaussian { bandwidth: f64 },
    /// First-order Sobolev kernel `k(s, t) = 1 + min(s, t)` on scalar
    /// inputs affinely rescaled to `[0, 1]`. Inputs already inside `[0, 1]`
    /// are left untouched; otherwise the observed range (widened to contain
    /// `[0, 1]`) is mapped onto the unit interval.
    SobolevFirstOrder,
}

impl KernelSpec {
    pub fn gaussian(bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0) || !bandwidth.is_finite() {
            return Err(GcmError::InvalidInput(format!(
                "bandwidth must be a positive real, got {bandwidth}"
            )));
        }
        Ok(KernelSpec::Gaussian { bandwidth })
    }

    pub fn tag(&self) -> String {
        match self {
            KernelSpec::Gaussian { bandwidth } => format!("gaussian({bandwidth})"),
            KernelSpec::SobolevFirstOrder => "sobolev1".to_string(),
        }
    }
}

/// `K` with `K_ij = k(z_i, z_j)/n` for the rows of `z` (an `n x d_Z` matrix).
pub fn gram_matrix(z: &DMatrix<f64>, kernel: &KernelSpec) -> Result<DMatrix<f64>> {
    let n = z.nrows();
    if n == 0 {
        return Err(GcmError::InvalidInput("empty z block".into()));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(GcmError::NonFinite {
            context: "z block".into(),
        });
    }
    let scale = 1.0 / n as f64;
    match kernel {
        KernelSpec::Gaussian { bandwidth } => {
            if !(*bandwidth > 0.0) {
                return Err(GcmError::InvalidInput("bandwidth must be positive".into()));
            }
            let inv_two_sq = 1.0 / (2.0 * bandwidth * bandwidth);
            let mut k = DMatrix::zeros(n, n);
            for i in 0..n {
                k[(i, i)] = scale;
                for j in (i + 1)..n {
                    let mut dist_sq = 0.0;
                    for c in 0..z.ncols() {
                        let d = z[(i, c)] - z[(j, c)];
                        dist_sq += d * d;
                    }
                    let v = (-dist_sq * inv_two_sq).exp() * scale;
                    k[(i, j)] = v;
                    k[(j, i)] = v;
                }
            }
            Ok(k)
        }
        KernelSpec::SobolevFirstOrder => {
            if z.ncols() != 1 {
                return Err(GcmError::KernelUnsupported(format!(
                    "sobolev kernel requires scalar z, got d_Z = {}",
                    z.ncols()
                )));
            }
            let column = z.column(0);
            let rescale = sobolev_rescaler(column.iter().copied());
            let s: Vec<f64> = column.iter().map(|&v| rescale(v)).collect();
            let mut k = DMatrix::zeros(n, n);
            for i in 0..n {
                for j in i..n {
                    let v = (1.0 + s[i].min(s[j])) * scale;
                    k[(i, j)] = v;
                    k[(j, i)] = v;
                }
            }
            Ok(k)
        }
    }
}

/// Parameters of the affine map onto `[0, 1]` used by the Sobolev kernel:
/// the identity whenever the data already lie inside the unit interval.
pub(crate) fn sobolev_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo, hi - lo)
}

fn sobolev_rescaler(values: impl Iterator<Item = f64>) -> impl Fn(f64) -> f64 {
    let (lo, width) = sobolev_range(values);
    move |v| (v - lo) / width
}

/// Eigendecomposition of a symmetric matrix, eigenvalues sorted
/// nonincreasing with matching eigenvector columns.
#[derive(Debug, Clone)]
pub struct EigenDecomp {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

/// Symmetric eigendecomposition with an asymmetry guard: entries may differ
/// from their transposes by at most `tol * max(1, max|a_ij|)`.
pub fn sym_eigen(a: &DMatrix<f64>, tol: f64) -> Result<EigenDecomp> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(GcmError::Eigen(format!("matrix is {}x{}", n, a.ncols())));
    }
    let scale = a.iter().fold(1.0f64, |m, &v| m.max(v.abs()));
    let mut sym = a.clone();
    for i in 0..n {
        for j in (i + 1)..n {
            let diff = (a[(i, j)] - a[(j, i)]).abs();
            if diff > tol * scale {
                return Err(GcmError::Eigen(format!(
                    "asymmetry {diff:.3e} at ({i},{j}) exceeds tolerance"
                )));
            }
            let avg = 0.5 * (a[(i, j)] + a[(j, i)]);
            sym[(i, j)] = avg;
            sym[(j, i)] = avg;
        }
    }
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    Ok(EigenDecomp { values, vectors })
}

/// Spectrum summary for kernel ridge regression: clipped eigenvalues of the
/// scaled Gram matrix plus the selected ridge parameter.
#[derive(Debug, Clone, Serialize)]
pub struct KernelDiag {
    /// Eigenvalues of `K`, nonincreasing, negatives clipped to zero.
    pub eigenvalues: Vec<f64>,
    pub lambda_hat: f64,
    pub objective_at_min: f64,
}

/// Tuning objective `(1/n) * sum_i mu_i^2/(mu_i + lambda)^2 + lambda`.
pub fn lambda_objective(eigenvalues: &[f64], n: usize, lambda: f64) -> f64 {
    let sum: f64 = eigenvalues
        .iter()
        .map(|&mu| {
            let ratio = mu / (mu + lambda);
            ratio * ratio
        })
        .sum();
    sum / n as f64 + lambda
}

/// Minimiser of [`lambda_objective`] over `[LAMBDA_FLOOR, max(1, mu_1)]`.
///
/// The objective is convex in `lambda` (its derivative is increasing), so a
/// log-spaced grid scan followed by golden-section refinement between the
/// bracketing grid points finds the global minimum. A spectrum of all zeros
/// makes the objective reduce to `lambda` and the floor is returned.
pub fn select_lambda(eigenvalues: &[f64], n: usize) -> (f64, f64) {
    let mu_max = eigenvalues.iter().fold(0.0f64, |m, &v| m.max(v.max(0.0)));
    if mu_max <= 0.0 {
        return (LAMBDA_FLOOR, LAMBDA_FLOOR);
    }
    let cap = mu_max.max(1.0);

    const GRID: usize = 240;
    let log_lo = LAMBDA_FLOOR.ln();
    let log_hi = cap.ln();
    let mut best_idx = 0;
    let mut best_val = f64::INFINITY;
    let mut grid = Vec::with_capacity(GRID + 1);
    for g in 0..=GRID {
        let lam = (log_lo + (log_hi - log_lo) * g as f64 / GRID as f64).exp();
        let val = lambda_objective(eigenvalues, n, lam);
        grid.push(lam);
        if val < best_val {
            best_val = val;
            best_idx = g;
        }
    }
    let lo = grid[best_idx.saturating_sub(1)];
    let hi = grid[(best_idx + 1).min(GRID)];

    // Golden-section refinement on the bracketing interval.
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - (b - a) * INV_PHI;
    let mut d = a + (b - a) * INV_PHI;
    let mut fc = lambda_objective(eigenvalues, n, c);
    let mut fd = lambda_objective(eigenvalues, n, d);
    for _ in 0..200 {
        if (b - a) <= 1e-14 * (1.0 + b) {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - (b - a) * INV_PHI;
            fc = lambda_objective(eigenvalues, n, c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + (b - a) * INV_PHI;
            fd = lambda_objective(eigenvalues, n, d);
        }
    }
    // Golden section localises the argmin of a flat quadratic only to
    // sqrt(machine-eps) relative accuracy; a few Newton steps on the
    // derivative sharpen it. The derivative of the objective is
    // 1 - (2/n) sum mu^2/(mu + lambda)^3, which is increasing, so Newton
    // converges monotonically near the root.
    let mut lambda = (0.5 * (a + b)).max(LAMBDA_FLOOR);
    for _ in 0..4 {
        let mut d1 = 1.0;
        let mut d2 = 0.0;
        for &mu in eigenvalues {
            let denom = mu + lambda;
            d1 -= 2.0 / n as f64 * mu * mu / (denom * denom * denom);
            d2 += 6.0 / n as f64 * mu * mu / (denom * denom * denom * denom);
        }
        if d2 <= 0.0 {
            break;
        }
        let next = (lambda - d1 / d2).clamp(LAMBDA_FLOOR, cap);
        if !next.is_finite() || (next - lambda).abs() <= f64::EPSILON * lambda {
            lambda = next.max(LAMBDA_FLOOR);
            break;
        }
        lambda = next;
    }
    (lambda, lambda_objective(eigenvalues, n, lambda))
}

/// Computes the Gram spectrum of `z` under `kernel` and applies the tuning
/// rule.
pub fn krr_diag(z: &DMatrix<f64>, kernel: &KernelSpec) -> Result<KernelDiag> {
    let k = gram_matrix(z, kernel)?;
    let eig = sym_eigen(&k, 1e-10)?;
    let eigenvalues: Vec<f64> = eig.values.iter().map(|&v| v.max(0.0)).collect();
    let (lambda_hat, objective_at_min) = select_lambda(&eigenvalues, z.nrows());
    Ok(KernelDiag {
        eigenvalues,
        lambda_hat,
        objective_at_min,
    })
}
