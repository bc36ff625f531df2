//! Multivariate generalised covariance measure: the matrix of pairwise
//! statistics, the max statistic `S_n`, the residual-product correlation
//! matrix, its Monte-Carlo max-Gaussian quantile, and feature-map lifting.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::prelude::*;
use rand_distr::StandardNormal;

use crate::data::DataSet;
use crate::error::{GcmError, Result};
use crate::gcm::{gcm_statistic, residual_products};
use crate::kernel::sym_eigen;
use crate::regression::Backend;
use crate::rng::{substream, Stream};

/// Pairwise statistics plus the residual-product vectors they were built
/// from, stored row-major over `(j, k)` pairs.
#[derive(Debug, Clone)]
pub struct GcmMatrix {
    /// `t_matrix[(j, k)]` is the univariate statistic for `(X_j, Y_k, Z)`.
    pub t_matrix: DMatrix<f64>,
    /// `r_store[j * d_y + k]` holds the length-n residual products of pair
    /// `(j, k)`.
    pub r_store: Vec<Vec<f64>>,
}

/// One regression per X column and per Y column (fits are shared across
/// pairs), then the univariate statistic for every `(j, k)`.
pub fn gcm_matrix(data: &DataSet, backend_x: &Backend, backend_y: &Backend) -> Result<GcmMatrix> {
    let (d_x, d_y) = (data.d_x(), data.d_y());
    let x_cols: Vec<Vec<f64>> = (0..d_x).map(|j| data.x_col(j)).collect();
    let y_cols: Vec<Vec<f64>> = (0..d_y).map(|k| data.y_col(k)).collect();

    let fits = if backend_x == backend_y {
        // One Gram eigendecomposition for all d_X + d_Y fits.
        let mut all: Vec<&[f64]> = x_cols.iter().map(|c| c.as_slice()).collect();
        all.extend(y_cols.iter().map(|c| c.as_slice()));
        backend_x.fit_many(data.z_block(), &all)?
    } else {
        let xs: Vec<&[f64]> = x_cols.iter().map(|c| c.as_slice()).collect();
        let ys: Vec<&[f64]> = y_cols.iter().map(|c| c.as_slice()).collect();
        let mut fits = backend_x.fit_many(data.z_block(), &xs)?;
        fits.extend(backend_y.fit_many(data.z_block(), &ys)?);
        fits
    };
    let (fits_x, fits_y) = fits.split_at(d_x);

    let mut t_matrix = DMatrix::zeros(d_x, d_y);
    let mut r_store = Vec::with_capacity(d_x * d_y);
    for j in 0..d_x {
        for k in 0..d_y {
            let r = residual_products(&fits_x[j], &fits_y[k])?;
            let stat = gcm_statistic(&r).map_err(|e| match e {
                GcmError::DegenerateStatistic { .. } => GcmError::DegeneratePair {
                    x_col: j + 1,
                    y_col: k + 1,
                },
                other => other,
            })?;
            t_matrix[(j, k)] = stat.t;
            r_store.push(r);
        }
    }
    Ok(GcmMatrix { t_matrix, r_store })
}

/// Sample correlation matrix of the residual-product vectors, 1/n
/// convention throughout; entries clamped to `[-1, 1]` and an exactly unit
/// diagonal.
pub fn residual_correlation(r_store: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let p = r_store.len();
    if p == 0 {
        return Err(GcmError::InvalidInput("empty residual store".into()));
    }
    let n = r_store[0].len();
    let means: Vec<f64> = r_store.iter().map(|r| r.iter().sum::<f64>() / n as f64).collect();
    let sds: Vec<f64> = r_store
        .iter()
        .zip(&means)
        .map(|(r, &m)| (r.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64).sqrt())
        .collect();
    for (idx, (r, &sd)) in r_store.iter().zip(&sds).enumerate() {
        let mean_sq = r.iter().map(|v| v * v).sum::<f64>() / n as f64;
        if sd < 1e-12 * (1.0 + mean_sq) {
            return Err(GcmError::DegenerateStatistic {
                tau_d: sd,
                threshold: 1e-12 * (1.0 + mean_sq),
            });
        }
        if r.len() != n {
            return Err(GcmError::LengthMismatch {
                left: n,
                right: r_store[idx].len(),
            });
        }
    }
    let mut sigma = DMatrix::zeros(p, p);
    for a in 0..p {
        sigma[(a, a)] = 1.0;
        for b in (a + 1)..p {
            let cov = r_store[a]
                .iter()
                .zip(&r_store[b])
                .map(|(u, v)| (u - means[a]) * (v - means[b]))
                .sum::<f64>()
                / n as f64;
            let corr = (cov / (sds[a] * sds[b])).clamp(-1.0, 1.0);
            sigma[(a, b)] = corr;
            sigma[(b, a)] = corr;
        }
    }
    Ok(sigma)
}

// Symmetric square root of the PSD-repaired matrix: eigenvalues clipped at
// zero plus a 1e-8 jitter.
fn repaired_sqrt(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = sym_eigen(sigma, 1e-8)?;
    let p = sigma.nrows();
    let roots: Vec<f64> = eig.values.iter().map(|&v| (v.max(0.0) + 1e-8).sqrt()).collect();
    let mut m = DMatrix::zeros(p, p);
    for a in 0..p {
        for b in 0..p {
            let mut acc = 0.0;
            for c in 0..p {
                acc += eig.vectors[(a, c)] * roots[c] * eig.vectors[(b, c)];
            }
            m[(a, b)] = acc;
        }
    }
    Ok(m)
}

const MC_CHUNK: usize = 8192;

// Draws of max_j |g_j| with g ~ N(0, repaired sigma), deterministically
// chunked over substreams so the result does not depend on scheduling.
fn max_abs_draws(sqrt_sigma: &DMatrix<f64>, b: usize, seed: u64) -> Vec<f64> {
    let p = sqrt_sigma.nrows();
    let mut draws = Vec::with_capacity(b);
    let mut g = vec![0.0f64; p];
    for chunk in 0..b.div_ceil(MC_CHUNK) {
        let mut rng = substream(seed, Stream::Mc, chunk as u64);
        let in_chunk = MC_CHUNK.min(b - chunk * MC_CHUNK);
        for _ in 0..in_chunk {
            for gj in g.iter_mut() {
                *gj = rng.sample(StandardNormal);
            }
            let mut max_abs = 0.0f64;
            for row in 0..p {
                let mut acc = 0.0;
                for (col, gj) in g.iter().enumerate() {
                    acc += sqrt_sigma[(row, col)] * gj;
                }
                max_abs = max_abs.max(acc.abs());
            }
            draws.push(max_abs);
        }
    }
    draws
}

fn empirical_quantile(sorted: &[f64], level: f64) -> f64 {
    let b = sorted.len();
    let idx = ((level * b as f64).ceil() as usize).clamp(1, b) - 1;
    sorted[idx]
}

/// Monte-Carlo `level`-quantile of `max_j |g_j|` for `g` zero-mean Gaussian
/// with covariance `sigma` (PSD-repaired). Deterministic given `seed`.
pub fn mc_quantile(sigma: &DMatrix<f64>, level: f64, b: usize, seed: u64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(GcmError::InvalidInput(format!(
            "quantile level must lie in (0,1), got {level}"
        )));
    }
    if b < 1000 {
        return Err(GcmError::InvalidInput(format!(
            "need at least 1000 Monte-Carlo draws, got {b}"
        )));
    }
    let sqrt_sigma = repaired_sqrt(sigma)?;
    let mut draws = max_abs_draws(&sqrt_sigma, b, seed);
    draws.sort_by(f64::total_cmp);
    Ok(empirical_quantile(&draws, level))
}

/// Fixed, data-independent transforms lifting `(X, Z)` and `(Y, Z)` into
/// more columns before testing.
#[derive(Clone)]
pub struct FeatureLift {
    pub map_x: LiftMap,
    pub map_y: LiftMap,
}

/// One side of a feature lift.
#[derive(Clone)]
pub enum LiftMap {
    /// Identity.
    Raw,
    /// Appends elementwise squares: `v -> (v, v^2)`.
    Square,
    /// Appends elementwise absolute values: `v -> (v, |v|)`.
    Abs,
    /// A fixed user recipe mapping `(own row, z row)` to the lifted row.
    Custom {
        name: String,
        map: Arc<dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync>,
    },
}

impl LiftMap {
    fn apply(&self, own: &[f64], z: &[f64]) -> Vec<f64> {
        match self {
            LiftMap::Raw => own.to_vec(),
            LiftMap::Square => own
                .iter()
                .copied()
                .chain(own.iter().map(|v| v * v))
                .collect(),
            LiftMap::Abs => own
                .iter()
                .copied()
                .chain(own.iter().map(|v| v.abs()))
                .collect(),
            LiftMap::Custom { map, .. } => map(own, z),
        }
    }

    pub fn tag(&self) -> String {
        match self {
            LiftMap::Raw => "raw".into(),
            LiftMap::Square => "square".into(),
            LiftMap::Abs => "abs".into(),
            LiftMap::Custom { name, .. } => format!("custom:{name}"),
        }
    }
}

impl FeatureLift {
    pub fn raw() -> Self {
        FeatureLift {
            map_x: LiftMap::Raw,
            map_y: LiftMap::Raw,
        }
    }

    pub fn square() -> Self {
        FeatureLift {
            map_x: LiftMap::Square,
            map_y: LiftMap::Square,
        }
    }

    pub fn abs() -> Self {
        FeatureLift {
            map_x: LiftMap::Abs,
            map_y: LiftMap::Abs,
        }
    }
}

/// Applies the lift row by row, yielding a dataset with the same Z block.
pub fn feature_lift_apply(data: &DataSet, lift: &FeatureLift) -> Result<DataSet> {
    let n = data.n();
    let z_row = |i: usize| -> Vec<f64> {
        (0..data.d_z()).map(|c| data.z_block()[(i, c)]).collect()
    };
    let lift_block = |block: &DMatrix<f64>, map: &LiftMap| -> Result<DMatrix<f64>> {
        let first = map.apply(
            &(0..block.ncols()).map(|c| block[(0, c)]).collect::<Vec<_>>(),
            &z_row(0),
        );
        let d_new = first.len();
        if d_new == 0 {
            return Err(GcmError::InvalidInput("lift produced no columns".into()));
        }
        let mut out = DMatrix::zeros(n, d_new);
        for i in 0..n {
            let own: Vec<f64> = (0..block.ncols()).map(|c| block[(i, c)]).collect();
            let row = map.apply(&own, &z_row(i));
            if row.len() != d_new {
                return Err(GcmError::InvalidInput(format!(
                    "lift produced {} columns at row {i}, expected {d_new}",
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(GcmError::NonFinite {
                    context: format!("lifted row {i}"),
                });
            }
            for (c, v) in row.into_iter().enumerate() {
                out[(i, c)] = v;
            }
        }
        Ok(out)
    };
    DataSet::new(
        lift_block(data.x_block(), &lift.map_x)?,
        lift_block(data.y_block(), &lift.map_y)?,
        data.z_block().clone(),
    )
}

/// Outcome of the multivariate test.
#[derive(Debug, Clone)]
pub struct MultiGcmResult {
    pub t_matrix: DMatrix<f64>,
    /// `max_{j,k} |T_jk|`.
    pub s_n: f64,
    pub sigma_hat: DMatrix<f64>,
    /// Monte-Carlo `(1-alpha)`-quantile of the calibrating max statistic.
    pub g_quantile: f64,
    /// Add-one Monte-Carlo p-value `(1 + #{draws >= S_n}) / (B + 1)`.
    pub p_value: f64,
    pub draws: usize,
    pub reject: bool,
    pub alpha: f64,
}

/// The max-statistic test calibrated against the Monte-Carlo quantile of a
/// Gaussian vector with the residual-product correlation matrix.
///
/// `d_X = d_Y = 1` is allowed (useful for cross-checking against the
/// univariate test); the theory's `d_X d_Y >= 3` restriction is not
/// enforced.
pub fn multi_gcm_test(
    data: &DataSet,
    backend_x: &Backend,
    backend_y: &Backend,
    alpha: f64,
    b: usize,
    seed: u64,
    lift: Option<&FeatureLift>,
) -> Result<MultiGcmResult> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(GcmError::InvalidInput(format!(
            "alpha must lie in (0,1), got {alpha}"
        )));
    }
    if b < 1000 {
        return Err(GcmError::InvalidInput(format!(
            "need at least 1000 Monte-Carlo draws, got {b}"
        )));
    }
    let lifted;
    let data = match lift {
        Some(l) => {
            lifted = feature_lift_apply(data, l)?;
            &lifted
        }
        None => data,
    };
    let matrix = gcm_matrix(data, backend_x, backend_y)?;
    let s_n = matrix.t_matrix.iter().fold(0.0f64, |m, &t| m.max(t.abs()));
    let sigma_hat = residual_correlation(&matrix.r_store)?;
    let sqrt_sigma = repaired_sqrt(&sigma_hat)?;
    let mut draws = max_abs_draws(&sqrt_sigma, b, seed);
    let exceed = draws.iter().filter(|&&d| d >= s_n).count();
    draws.sort_by(f64::total_cmp);
    let g_quantile = empirical_quantile(&draws, 1.0 - alpha);
    let p_value = (1 + exceed) as f64 / (b + 1) as f64;
    Ok(MultiGcmResult {
        t_matrix: matrix.t_matrix,
        s_n,
        sigma_hat,
        g_quantile,
        p_value,
        draws: b,
        reject: s_n > g_quantile,
        alpha,
    })
}
