//! The univariate generalised covariance measure: residual products, the
//! normalised statistic, the two-sided normal test, the naive
//! product-of-standard-deviations baseline, and the expected-conditional-
//! covariance estimator with its confidence interval.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::DataSet;
use crate::error::{GcmError, Result};
use crate::regression::{Backend, RegressionFit};
use crate::rng::{substream, Stream};
use crate::stat::{normal_quantile, two_sided_p};

/// Relative degeneracy threshold for the denominator.
const DEGENERACY_REL: f64 = 1e-12;

/// Elementwise product of the residual vectors of the two regressions.
pub fn residual_products(fit_x: &RegressionFit, fit_y: &RegressionFit) -> Result<Vec<f64>> {
    if fit_x.residuals.len() != fit_y.residuals.len() {
        return Err(GcmError::LengthMismatch {
            left: fit_x.residuals.len(),
            right: fit_y.residuals.len(),
        });
    }
    Ok(fit_x
        .residuals
        .iter()
        .zip(&fit_y.residuals)
        .map(|(a, b)| a * b)
        .collect())
}

/// Normalised statistic with its numerator and denominator.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct GcmStatistic {
    pub t: f64,
    pub tau_n: f64,
    pub tau_d: f64,
}

/// `T = sqrt(n) * mean(R) / sqrt(mean(R^2) - mean(R)^2)`, with the 1/n
/// variance convention exactly as written.
pub fn gcm_statistic(r: &[f64]) -> Result<GcmStatistic> {
    let n = r.len();
    if n < 2 {
        return Err(GcmError::InvalidInput(format!(
            "need at least 2 residual products, got {n}"
        )));
    }
    let mean = r.iter().sum::<f64>() / n as f64;
    let mean_sq = r.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let tau_n = (n as f64).sqrt() * mean;
    // mean(R^2) - mean(R)^2 evaluated in centered form, which is the same
    // quantity without the catastrophic cancellation on near-constant input.
    let variance = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let tau_d = variance.sqrt();
    let threshold = DEGENERACY_REL * (1.0 + mean_sq);
    if tau_d < threshold {
        return Err(GcmError::DegenerateStatistic {
            tau_d,
            threshold,
        });
    }
    Ok(GcmStatistic {
        t: tau_n / tau_d,
        tau_n,
        tau_d,
    })
}

/// Baseline statistic with the denominator replaced by the product of the
/// empirical residual standard deviations (1/n convention). This is the
/// partial-correlation-style normalisation that loses the correct size
/// under heteroskedasticity.
pub fn naive_statistic(res_x: &[f64], res_y: &[f64]) -> Result<GcmStatistic> {
    if res_x.len() != res_y.len() {
        return Err(GcmError::LengthMismatch {
            left: res_x.len(),
            right: res_y.len(),
        });
    }
    let n = res_x.len();
    if n < 2 {
        return Err(GcmError::InvalidInput("need at least 2 residuals".into()));
    }
    let sd = |v: &[f64]| {
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        var.sqrt()
    };
    let r: Vec<f64> = res_x.iter().zip(res_y).map(|(a, b)| a * b).collect();
    let mean_r = r.iter().sum::<f64>() / n as f64;
    let mean_r_sq = r.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let tau_n = (n as f64).sqrt() * mean_r;
    let tau_d = sd(res_x) * sd(res_y);
    let threshold = DEGENERACY_REL * (1.0 + mean_r_sq);
    if tau_d < threshold {
        return Err(GcmError::DegenerateStatistic { tau_d, threshold });
    }
    Ok(GcmStatistic {
        t: tau_n / tau_d,
        tau_n,
        tau_d,
    })
}

/// Outcome of a univariate test.
#[derive(Debug, Clone, Serialize)]
pub struct GcmResult {
    pub statistic_t: f64,
    pub tau_n: f64,
    pub tau_d: f64,
    pub p_value: f64,
    pub reject: bool,
    pub alpha: f64,
    pub n: usize,
    pub backend_tags: (String, String),
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(GcmError::InvalidInput(format!(
            "alpha must lie in (0,1), got {alpha}"
        )));
    }
    Ok(())
}

fn check_univariate(data: &DataSet) -> Result<()> {
    if data.d_x() != 1 || data.d_y() != 1 {
        return Err(GcmError::InvalidInput(format!(
            "univariate test requires d_X = d_Y = 1, got d_X = {}, d_Y = {}",
            data.d_x(),
            data.d_y()
        )));
    }
    Ok(())
}

/// Fits X and Y on Z with the two backends, sharing work (in particular the
/// Gram eigendecomposition) when the backends coincide.
pub(crate) fn fit_pair(
    data: &DataSet,
    backend_x: &Backend,
    backend_y: &Backend,
) -> Result<(RegressionFit, RegressionFit)> {
    let x = data.x_col(0);
    let y = data.y_col(0);
    if backend_x == backend_y {
        let mut fits = backend_x.fit_many(data.z_block(), &[&x, &y])?;
        let fit_y = fits.pop().expect("two fits");
        let fit_x = fits.pop().expect("two fits");
        Ok((fit_x, fit_y))
    } else {
        Ok((
            backend_x.fit(data.z_block(), &x)?,
            backend_y.fit(data.z_block(), &y)?,
        ))
    }
}

/// The GCM test: regress both variables on Z, form residual products, and
/// compare `|T|` to the standard normal.
pub fn gcm_test(
    data: &DataSet,
    backend_x: &Backend,
    backend_y: &Backend,
    alpha: f64,
) -> Result<GcmResult> {
    check_alpha(alpha)?;
    check_univariate(data)?;
    let (fit_x, fit_y) = fit_pair(data, backend_x, backend_y)?;
    let r = residual_products(&fit_x, &fit_y)?;
    let stat = gcm_statistic(&r)?;
    let p_value = two_sided_p(stat.t);
    Ok(GcmResult {
        statistic_t: stat.t,
        tau_n: stat.tau_n,
        tau_d: stat.tau_d,
        p_value,
        reject: p_value <= alpha,
        alpha,
        n: data.n(),
        backend_tags: (fit_x.backend_tag, fit_y.backend_tag),
    })
}

/// The failing baseline of the heteroskedastic example: same regressions,
/// but the denominator is the product of residual standard deviations.
pub fn naive_resid_corr_test(
    data: &DataSet,
    backend_x: &Backend,
    backend_y: &Backend,
    alpha: f64,
) -> Result<GcmResult> {
    check_alpha(alpha)?;
    check_univariate(data)?;
    let (fit_x, fit_y) = fit_pair(data, backend_x, backend_y)?;
    let stat = naive_statistic(&fit_x.residuals, &fit_y.residuals)?;
    let p_value = two_sided_p(stat.t);
    Ok(GcmResult {
        statistic_t: stat.t,
        tau_n: stat.tau_n,
        tau_d: stat.tau_d,
        p_value,
        reject: p_value <= alpha,
        alpha,
        n: data.n(),
        backend_tags: (
            format!("naive-{}", fit_x.backend_tag),
            format!("naive-{}", fit_y.backend_tag),
        ),
    })
}

/// Point estimate and confidence interval for the expected conditional
/// covariance `E cov(X, Y | Z)`.
#[derive(Debug, Clone, Serialize)]
pub struct CondCovEstimate {
    pub rho_hat: f64,
    pub sigma_hat: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub alpha: f64,
    pub split_used: bool,
    /// Size of the sample the residual products were evaluated on.
    pub n_eval: usize,
}

/// Estimator of `rho = E cov(X, Y | Z)` with a normal confidence interval
/// of width `2 z_{1-alpha/2} sigma_hat / sqrt(n')`.
///
/// With `split = true` the regressions are fitted on a random half of the
/// sample (drawn from the seeded split stream) and the residual products
/// are evaluated on the other half, matching the auxiliary-sample analysis
/// that justifies the interval. Without splitting the same formulas are
/// applied in-sample.
pub fn expected_cond_cov_ci(
    data: &DataSet,
    backend_x: &Backend,
    backend_y: &Backend,
    alpha: f64,
    split: bool,
    seed: u64,
) -> Result<CondCovEstimate> {
    check_alpha(alpha)?;
    check_univariate(data)?;
    let n = data.n();
    let (r, n_eval) = if split {
        if n < 4 {
            return Err(GcmError::SplitTooSmall { n });
        }
        let mut rows: Vec<usize> = (0..n).collect();
        let mut rng: ChaCha8Rng = substream(seed, Stream::Split, 0);
        rows.shuffle(&mut rng);
        let (train_rows, eval_rows) = rows.split_at(n / 2);
        let train = data.select_rows(train_rows)?;
        let eval = data.select_rows(eval_rows)?;
        let fit_x = backend_x.fit_out_of_sample(
            train.z_block(),
            &train.x_col(0),
            eval.z_block(),
            &eval.x_col(0),
        )?;
        let fit_y = backend_y.fit_out_of_sample(
            train.z_block(),
            &train.y_col(0),
            eval.z_block(),
            &eval.y_col(0),
        )?;
        (residual_products(&fit_x, &fit_y)?, eval_rows.len())
    } else {
        let (fit_x, fit_y) = fit_pair(data, backend_x, backend_y)?;
        (residual_products(&fit_x, &fit_y)?, n)
    };
    let stat = gcm_statistic(&r)?;
    let sqrt_n = (n_eval as f64).sqrt();
    let rho_hat = stat.tau_n / sqrt_n;
    let sigma_hat = stat.tau_d;
    let z = normal_quantile(1.0 - alpha / 2.0);
    let half_width = z * sigma_hat / sqrt_n;
    Ok(CondCovEstimate {
        rho_hat,
        sigma_hat,
        ci_lower: rho_hat - half_width,
        ci_upper: rho_hat + half_width,
        alpha,
        split_used: split,
        n_eval,
    })
}

/// Truth-aware prediction-error diagnostics, computable in simulations
/// where the true conditional means are known.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Diagnostics {
    /// In-sample mean squared prediction error of the X regression against
    /// the true conditional mean.
    pub a_f: f64,
    /// Same for the Y regression.
    pub a_g: f64,
    /// `n * A_f * A_g`; the normal limit needs this to vanish.
    pub product_check: f64,
}

impl Diagnostics {
    pub fn from_truth(
        true_f: &[f64],
        true_g: &[f64],
        fit_x: &RegressionFit,
        fit_y: &RegressionFit,
    ) -> Result<Self> {
        let n = true_f.len();
        if fit_x.predictions.len() != n || fit_y.predictions.len() != n || true_g.len() != n {
            return Err(GcmError::LengthMismatch {
                left: n,
                right: fit_x.predictions.len(),
            });
        }
        let mse = |truth: &[f64], fit: &RegressionFit| {
            truth
                .iter()
                .zip(&fit.predictions)
                .map(|(t, p)| (t - p) * (t - p))
                .sum::<f64>()
                / n as f64
        };
        let a_f = mse(true_f, fit_x);
        let a_g = mse(true_g, fit_y);
        Ok(Diagnostics {
            a_f,
            a_g,
            product_check: n as f64 * a_f * a_g,
        })
    }
}
