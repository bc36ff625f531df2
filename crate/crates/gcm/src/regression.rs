//! Conditional-mean estimators producing the residuals the GCM is built
//! from: ordinary least squares, kernel ridge regression driven by the
//! spectrum tuning rule, and leave-one-out k-nearest-neighbours.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{GcmError, Result};
use crate::kernel::{gram_matrix, select_lambda, sym_eigen, EigenDecomp, KernelSpec};

/// Predictions and residuals from one backend run.
#[derive(Debug, Clone)]
pub struct RegressionFit {
    /// Estimates of the conditional mean at each evaluation point.
    pub predictions: Vec<f64>,
    /// `target[i] - predictions[i]`, exactly.
    pub residuals: Vec<f64>,
    pub backend_tag: String,
    /// Ridge parameter actually used, for kernel ridge fits.
    pub lambda_used: Option<f64>,
    /// Whether predictions were made at the training points.
    pub in_sample: bool,
}

impl RegressionFit {
    fn assemble(
        predictions: Vec<f64>,
        target: &[f64],
        backend_tag: String,
        lambda_used: Option<f64>,
        in_sample: bool,
    ) -> Self {
        let residuals = target
            .iter()
            .zip(&predictions)
            .map(|(t, p)| t - p)
            .collect();
        RegressionFit {
            predictions,
            residuals,
            backend_tag,
            lambda_used,
            in_sample,
        }
    }
}

/// Ridge parameter choice for kernel ridge regression.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaRule {
    /// Minimise the spectrum objective over the search window.
    Auto,
    /// Use the given positive value.
    Fixed(f64),
}

/// A pluggable conditional-mean estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    /// Ordinary least squares with an intercept.
    Linear,
    /// Kernel ridge regression.
    Krr {
        kernel: KernelSpec,
        lambda: LambdaRule,
    },
    /// k-nearest-neighbour averaging; `k = None` means `round(sqrt(n))`.
    Knn { k: Option<usize> },
}

impl Backend {
    /// Kernel ridge regression with the Gaussian kernel and automatic
    /// ridge selection; the default backend of the command line.
    pub fn krr_gaussian(bandwidth: f64) -> Result<Self> {
        Ok(Backend::Krr {
            kernel: KernelSpec::gaussian(bandwidth)?,
            lambda: LambdaRule::Auto,
        })
    }

    pub fn tag(&self) -> String {
        match self {
            Backend::Linear => "linear".to_string(),
            Backend::Krr { kernel, lambda } => match lambda {
                LambdaRule::Auto => format!("krr-{}", kernel.tag()),
                LambdaRule::Fixed(l) => format!("krr-{}-lambda{l}", kernel.tag()),
            },
            Backend::Knn { k } => match k {
                Some(k) => format!("knn-{k}"),
                None => "knn-sqrt".to_string(),
            },
        }
    }

    /// In-sample fit of `target` on the rows of `z`. For k-NN the
    /// predictions are leave-one-out.
    pub fn fit(&self, z: &DMatrix<f64>, target: &[f64]) -> Result<RegressionFit> {
        Ok(self.fit_many(z, std::slice::from_ref(&target))?.remove(0))
    }

    /// Fits several targets against the same `z`, sharing the Gram
    /// eigendecomposition across kernel ridge fits.
    pub fn fit_many(&self, z: &DMatrix<f64>, targets: &[&[f64]]) -> Result<Vec<RegressionFit>> {
        let n = z.nrows();
        for t in targets {
            if t.len() != n {
                return Err(GcmError::LengthMismatch {
                    left: n,
                    right: t.len(),
                });
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(GcmError::NonFinite {
                    context: "regression target".into(),
                });
            }
        }
        match self {
            Backend::Linear => targets.iter().map(|t| fit_linear(z, t)).collect(),
            Backend::Krr { kernel, lambda } => {
                let solver = KrrSolver::new(z, kernel)?;
                targets.iter().map(|t| solver.fit(t, *lambda)).collect()
            }
            Backend::Knn { k } => {
                let k = resolve_k(*k, n)?;
                targets.iter().map(|t| fit_knn(z, t, k)).collect()
            }
        }
    }

    /// Fits on `(z_train, target_train)` and evaluates predictions and
    /// residuals on the held-out `(z_eval, target_eval)`.
    pub fn fit_out_of_sample(
        &self,
        z_train: &DMatrix<f64>,
        target_train: &[f64],
        z_eval: &DMatrix<f64>,
        target_eval: &[f64],
    ) -> Result<RegressionFit> {
        if target_train.len() != z_train.nrows() || target_eval.len() != z_eval.nrows() {
            return Err(GcmError::LengthMismatch {
                left: z_train.nrows(),
                right: target_train.len(),
            });
        }
        if z_train.ncols() != z_eval.ncols() {
            return Err(GcmError::InvalidInput("z dimension mismatch".into()));
        }
        let (predictions, lambda_used) = match self {
            Backend::Linear => {
                let beta = linear_coefficients(z_train, target_train)?;
                (linear_predict(&beta, z_eval), None)
            }
            Backend::Krr { kernel, lambda } => {
                let solver = KrrSolver::new(z_train, kernel)?;
                let (dual, lam) = solver.dual_coefficients(target_train, *lambda)?;
                (solver.predict_at(&dual, z_eval), Some(lam))
            }
            Backend::Knn { k } => {
                let k = resolve_k(*k, z_train.nrows() + 1)?;
                if k > z_train.nrows() {
                    return Err(GcmError::InvalidInput(format!(
                        "k = {k} exceeds training size {}",
                        z_train.nrows()
                    )));
                }
                (knn_predict(z_train, target_train, z_eval, k), None)
            }
        };
        Ok(RegressionFit::assemble(
            predictions,
            target_eval,
            self.tag(),
            lambda_used,
            false,
        ))
    }
}

fn resolve_k(k: Option<usize>, n: usize) -> Result<usize> {
    let k = k.unwrap_or_else(|| ((n as f64).sqrt().round() as usize).max(1));
    if k == 0 || k + 1 > n {
        return Err(GcmError::InvalidInput(format!(
            "k must satisfy 1 <= k <= n-1, got k = {k} with n = {n}"
        )));
    }
    Ok(k)
}

/// Kernel ridge regression bound to one design: holds the eigendecomposition
/// of the scaled Gram matrix so several targets can be fitted cheaply.
pub struct KrrSolver {
    z: DMatrix<f64>,
    kernel: KernelSpec,
    /// Sobolev rescaling parameters `(lo, width)` fixed by the training
    /// sample, so held-out points are mapped consistently.
    sobolev_range: Option<(f64, f64)>,
    eigen: EigenDecomp,
    /// Eigenvalues clipped at zero, for the tuning rule.
    clipped: Vec<f64>,
    tag: String,
}

impl KrrSolver {
    pub fn new(z: &DMatrix<f64>, kernel: &KernelSpec) -> Result<Self> {
        let k = gram_matrix(z, kernel)?;
        let eigen = sym_eigen(&k, 1e-10)?;
        let clipped = eigen.values.iter().map(|&v| v.max(0.0)).collect();
        let sobolev_range = match kernel {
            KernelSpec::SobolevFirstOrder => {
                Some(crate::kernel::sobolev_range(z.column(0).iter().copied()))
            }
            _ => None,
        };
        Ok(KrrSolver {
            z: z.clone(),
            kernel: *kernel,
            sobolev_range,
            eigen,
            clipped,
            tag: format!("krr-{}", kernel.tag()),
        })
    }

    pub fn eigenvalues_clipped(&self) -> &[f64] {
        &self.clipped
    }

    fn resolve_lambda(&self, rule: LambdaRule) -> Result<f64> {
        match rule {
            LambdaRule::Auto => Ok(select_lambda(&self.clipped, self.z.nrows()).0),
            LambdaRule::Fixed(l) => {
                if !(l > 0.0) || !l.is_finite() {
                    Err(GcmError::InvalidInput(format!(
                        "lambda must be a positive real, got {l}"
                    )))
                } else {
                    Ok(l)
                }
            }
        }
    }

    /// In-sample predictions `K (K + lambda I)^{-1} target`, computed
    /// through the eigendecomposition.
    pub fn fit(&self, target: &[f64], rule: LambdaRule) -> Result<RegressionFit> {
        let lambda = self.resolve_lambda(rule)?;
        let t = nalgebra::DVector::from_column_slice(target);
        let mut coords = self.eigen.vectors.transpose() * &t;
        for (i, &mu) in self.clipped.iter().enumerate() {
            coords[i] *= mu / (mu + lambda);
        }
        let predictions = &self.eigen.vectors * coords;
        Ok(RegressionFit::assemble(
            predictions.iter().copied().collect(),
            target,
            self.tag.clone(),
            Some(lambda),
            true,
        ))
    }

    /// Representer coefficients `alpha = (K + lambda I)^{-1} target`.
    pub fn dual_coefficients(&self, target: &[f64], rule: LambdaRule) -> Result<(Vec<f64>, f64)> {
        let lambda = self.resolve_lambda(rule)?;
        let t = nalgebra::DVector::from_column_slice(target);
        let mut coords = self.eigen.vectors.transpose() * &t;
        for (i, &mu) in self.clipped.iter().enumerate() {
            coords[i] /= mu + lambda;
        }
        let alpha = &self.eigen.vectors * coords;
        Ok((alpha.iter().copied().collect(), lambda))
    }

    /// Out-of-sample predictions `f(z*) = (1/n) sum_j alpha_j k(z*, z_j)`.
    pub fn predict_at(&self, alpha: &[f64], z_eval: &DMatrix<f64>) -> Vec<f64> {
        let n = self.z.nrows();
        let scale = 1.0 / n as f64;
        (0..z_eval.nrows())
            .map(|i| {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += alpha[j] * self.kernel_value(z_eval, i, j);
                }
                acc * scale
            })
            .collect()
    }

    fn kernel_value(&self, z_eval: &DMatrix<f64>, i: usize, j: usize) -> f64 {
        match self.kernel {
            KernelSpec::Gaussian { bandwidth } => {
                let mut dist_sq = 0.0;
                for c in 0..self.z.ncols() {
                    let d = z_eval[(i, c)] - self.z[(j, c)];
                    dist_sq += d * d;
                }
                (-dist_sq / (2.0 * bandwidth * bandwidth)).exp()
            }
            KernelSpec::SobolevFirstOrder => {
                let (lo, width) = self.sobolev_range.expect("set for sobolev kernels");
                let s_eval = (z_eval[(i, 0)] - lo) / width;
                let s_train = (self.z[(j, 0)] - lo) / width;
                1.0 + s_eval.min(s_train)
            }
        }
    }
}

/// Ordinary least squares of `target` on `z` with an intercept, solved via
/// the normal equations. Rank deficiency is handled by an escalating ridge
/// jitter starting at 1e-12.
pub fn fit_linear(z: &DMatrix<f64>, target: &[f64]) -> Result<RegressionFit> {
    let beta = linear_coefficients(z, target)?;
    let predictions = linear_predict(&beta, z);
    Ok(RegressionFit::assemble(
        predictions,
        target,
        "linear".to_string(),
        None,
        true,
    ))
}

fn linear_coefficients(z: &DMatrix<f64>, target: &[f64]) -> Result<Vec<f64>> {
    let n = z.nrows();
    let d = z.ncols();
    if n <= d + 1 {
        return Err(GcmError::InvalidInput(format!(
            "linear regression needs n > d_Z + 1, got n = {n}, d_Z = {d}"
        )));
    }
    // Design matrix [1 | z].
    let design = DMatrix::from_fn(n, d + 1, |i, j| if j == 0 { 1.0 } else { z[(i, j - 1)] });
    let gram = design.transpose() * &design;
    let rhs = design.transpose() * nalgebra::DVector::from_column_slice(target);
    let scale = gram.diagonal().iter().fold(1.0f64, |m, &v| m.max(v));
    let mut jitter = 0.0;
    loop {
        let mut a = gram.clone();
        for i in 0..=d {
            a[(i, i)] += jitter;
        }
        if let Some(chol) = a.cholesky() {
            let beta = chol.solve(&rhs);
            return Ok(beta.iter().copied().collect());
        }
        jitter = if jitter == 0.0 {
            1e-12 * scale
        } else {
            jitter * 100.0
        };
        if jitter > scale {
            return Err(GcmError::Eigen("normal equations unsolvable".into()));
        }
    }
}

fn linear_predict(beta: &[f64], z: &DMatrix<f64>) -> Vec<f64> {
    (0..z.nrows())
        .map(|i| {
            let mut acc = beta[0];
            for j in 0..z.ncols() {
                acc += beta[j + 1] * z[(i, j)];
            }
            acc
        })
        .collect()
}

/// Leave-one-out k-nearest-neighbour regression: the prediction at row `i`
/// averages `target` over the `k` nearest other rows in Euclidean distance,
/// ties broken by lower row index.
pub fn fit_knn(z: &DMatrix<f64>, target: &[f64], k: usize) -> Result<RegressionFit> {
    let n = z.nrows();
    if k == 0 || k > n - 1 {
        return Err(GcmError::InvalidInput(format!(
            "k must satisfy 1 <= k <= n-1, got k = {k} with n = {n}"
        )));
    }
    let predictions = (0..n)
        .map(|i| {
            let mut dists: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (row_dist_sq(z, i, j), j))
                .collect();
            dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            dists[..k].iter().map(|&(_, j)| target[j]).sum::<f64>() / k as f64
        })
        .collect();
    Ok(RegressionFit::assemble(
        predictions,
        target,
        format!("knn-{k}"),
        None,
        true,
    ))
}

fn knn_predict(z_train: &DMatrix<f64>, target: &[f64], z_eval: &DMatrix<f64>, k: usize) -> Vec<f64> {
    (0..z_eval.nrows())
        .map(|i| {
            let mut dists: Vec<(f64, usize)> = (0..z_train.nrows())
                .map(|j| {
                    let mut d = 0.0;
                    for c in 0..z_train.ncols() {
                        let diff = z_eval[(i, c)] - z_train[(j, c)];
                        d += diff * diff;
                    }
                    (d, j)
                })
                .collect();
            dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            dists[..k].iter().map(|&(_, j)| target[j]).sum::<f64>() / k as f64
        })
        .collect()
}

fn row_dist_sq(z: &DMatrix<f64>, i: usize, j: usize) -> f64 {
    let mut acc = 0.0;
    for c in 0..z.ncols() {
        let d = z[(i, c)] - z[(j, c)];
        acc += d * d;
    }
    acc
}
