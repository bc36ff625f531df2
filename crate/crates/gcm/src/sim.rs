//! Simulation lab: the level/power generative models, a seeded
//! rejection-rate engine with the binomial acceptance band, and truth-aware
//! prediction-error diagnostics.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::data::DataSet;
use crate::error::{GcmError, Result};
use crate::gcm::{gcm_test, naive_resid_corr_test, Diagnostics};
use crate::multi::{multi_gcm_test, FeatureLift};
use crate::nfl::f_a;
use crate::regression::{Backend, RegressionFit};
use crate::rng::{substream, Stream};
use crate::stat::binomial_upper_tail;

/// The named data-generating processes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelName {
    /// `Z ~ N(0,1), X = f_2(Z) + 0.3 N, Y = f_2(Z) + 0.3 N`.
    A,
    /// Same with `f_4`.
    B,
    /// Bivariate Z: `X = f_1(Z_1) - f_1(Z_2) + 0.3 N`, `Y = f_1(Z_1) + f_1(Z_2) + 0.3 N`.
    C,
    /// Bivariate X and Y built from `f_1(Z)` with chained noise.
    D,
    /// Multiplicative noise: `X = f_2(Z) N_X`, `Y = f_2(Z) N_Y`.
    E,
    /// The heteroskedastic example: `X = Z N_X`, `Y = Z N_Y`.
    Example1,
    /// The hard-null family: unit noise around `f_a(Z)`, `a` a parameter.
    Nfl,
}

impl ModelName {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "a" => Ok(ModelName::A),
            "b" => Ok(ModelName::B),
            "c" => Ok(ModelName::C),
            "d" => Ok(ModelName::D),
            "e" => Ok(ModelName::E),
            "example1" => Ok(ModelName::Example1),
            "nfl" => Ok(ModelName::Nfl),
            other => Err(GcmError::InvalidInput(format!(
                "unknown model '{other}' (expected a, b, c, d, e, example1 or nfl)"
            ))),
        }
    }
}

/// A model plus its variant switches.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ModelSpec {
    pub name: ModelName,
    /// Adds `+0.2 X` to the Y equation (`+0.2 X_2` to `Y_2` for the
    /// bivariate model), breaking conditional independence.
    pub power_variant: bool,
    /// Frequency parameter; required for `nfl`, optional override for the
    /// `a`/`b` models, rejected elsewhere.
    pub a_param: Option<f64>,
    pub n: usize,
}

impl ModelSpec {
    pub fn new(name: ModelName, power_variant: bool, a_param: Option<f64>, n: usize) -> Result<Self> {
        match name {
            ModelName::Nfl => {
                let a = a_param.ok_or_else(|| {
                    GcmError::InvalidInput("model nfl requires the a parameter".into())
                })?;
                if !(a > 0.0) {
                    return Err(GcmError::InvalidInput(format!(
                        "a must be positive, got {a}"
                    )));
                }
            }
            ModelName::A | ModelName::B => {
                if let Some(a) = a_param {
                    if !(a > 0.0) {
                        return Err(GcmError::InvalidInput(format!(
                            "a must be positive, got {a}"
                        )));
                    }
                }
            }
            _ => {
                if a_param.is_some() {
                    return Err(GcmError::InvalidInput(format!(
                        "model {name:?} does not take an a parameter"
                    )));
                }
            }
        }
        if n < 2 {
            return Err(GcmError::InvalidInput("n must be at least 2".into()));
        }
        Ok(ModelSpec {
            name,
            power_variant,
            a_param,
            n,
        })
    }

    fn a(&self) -> f64 {
        match self.name {
            ModelName::A => self.a_param.unwrap_or(2.0),
            ModelName::B => self.a_param.unwrap_or(4.0),
            ModelName::Nfl => self.a_param.expect("validated"),
            _ => f64::NAN,
        }
    }

    pub fn tag(&self) -> String {
        let base = match self.name {
            ModelName::A => "a".to_string(),
            ModelName::B => "b".to_string(),
            ModelName::C => "c".to_string(),
            ModelName::D => "d".to_string(),
            ModelName::E => "e".to_string(),
            ModelName::Example1 => "example1".to_string(),
            ModelName::Nfl => format!("nfl(a={})", self.a()),
        };
        if self.power_variant {
            format!("{base}+power")
        } else {
            base
        }
    }
}

/// Draws one dataset from the model, consuming the given stream.
pub fn gen_model(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Result<DataSet> {
    let n = spec.n;
    let power = if spec.power_variant { 0.2 } else { 0.0 };
    let norm = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };
    match spec.name {
        ModelName::A | ModelName::B | ModelName::Nfl => {
            let a = spec.a();
            let noise_sd = if spec.name == ModelName::Nfl { 1.0 } else { 0.3 };
            let mut z = Vec::with_capacity(n);
            let mut x = Vec::with_capacity(n);
            let mut y = Vec::with_capacity(n);
            for _ in 0..n {
                let zi = norm(rng);
                let fz = f_a(zi, a);
                let xi = fz + noise_sd * norm(rng);
                let yi = fz + power * xi + noise_sd * norm(rng);
                z.push(zi);
                x.push(xi);
                y.push(yi);
            }
            DataSet::from_univariate(x, y, z)
        }
        ModelName::C => {
            let mut z = nalgebra::DMatrix::zeros(n, 2);
            let mut x = Vec::with_capacity(n);
            let mut y = Vec::with_capacity(n);
            for i in 0..n {
                let (z1, z2) = (norm(rng), norm(rng));
                z[(i, 0)] = z1;
                z[(i, 1)] = z2;
                let xi = f_a(z1, 1.0) - f_a(z2, 1.0) + 0.3 * norm(rng);
                let yi = f_a(z1, 1.0) + f_a(z2, 1.0) + power * xi + 0.3 * norm(rng);
                x.push(xi);
                y.push(yi);
            }
            DataSet::new(
                nalgebra::DMatrix::from_vec(n, 1, x),
                nalgebra::DMatrix::from_vec(n, 1, y),
                z,
            )
        }
        ModelName::D => {
            let mut z = Vec::with_capacity(n);
            let mut xb = nalgebra::DMatrix::zeros(n, 2);
            let mut yb = nalgebra::DMatrix::zeros(n, 2);
            for i in 0..n {
                let zi = norm(rng);
                let fz = f_a(zi, 1.0);
                let x1 = fz + 0.3 * norm(rng);
                let x2 = fz + x1 + 0.3 * norm(rng);
                let y1 = fz + 0.3 * norm(rng);
                let y2 = fz + y1 + power * x2 + 0.3 * norm(rng);
                z.push(zi);
                xb[(i, 0)] = x1;
                xb[(i, 1)] = x2;
                yb[(i, 0)] = y1;
                yb[(i, 1)] = y2;
            }
            DataSet::new(xb, yb, nalgebra::DMatrix::from_vec(n, 1, z))
        }
        ModelName::E | ModelName::Example1 => {
            let mut z = Vec::with_capacity(n);
            let mut x = Vec::with_capacity(n);
            let mut y = Vec::with_capacity(n);
            for _ in 0..n {
                let zi = norm(rng);
                let scale = if spec.name == ModelName::E {
                    f_a(zi, 2.0)
                } else {
                    zi
                };
                let xi = scale * norm(rng);
                let yi = scale * norm(rng) + power * xi;
                z.push(zi);
                x.push(xi);
                y.push(yi);
            }
            DataSet::from_univariate(x, y, z)
        }
    }
}

/// True conditional mean of the given X column at a z row.
pub fn true_mean_x(spec: &ModelSpec, z_row: &[f64], col: usize) -> Result<f64> {
    match spec.name {
        ModelName::A | ModelName::B | ModelName::Nfl => Ok(f_a(z_row[0], spec.a())),
        ModelName::C => Ok(f_a(z_row[0], 1.0) - f_a(z_row[1], 1.0)),
        ModelName::D => {
            let fz = f_a(z_row[0], 1.0);
            match col {
                0 => Ok(fz),
                1 => Ok(2.0 * fz),
                _ => Err(GcmError::InvalidInput("model d has two X columns".into())),
            }
        }
        ModelName::E | ModelName::Example1 => Ok(0.0),
    }
}

/// True conditional mean of the given Y column at a z row; the power
/// variant shifts it by `0.2 E[X|Z]` where the extra term applies.
pub fn true_mean_y(spec: &ModelSpec, z_row: &[f64], col: usize) -> Result<f64> {
    let power = if spec.power_variant { 0.2 } else { 0.0 };
    match spec.name {
        ModelName::A | ModelName::B | ModelName::Nfl => {
            let fz = f_a(z_row[0], spec.a());
            Ok(fz + power * fz)
        }
        ModelName::C => {
            let base = f_a(z_row[0], 1.0) + f_a(z_row[1], 1.0);
            Ok(base + power * (f_a(z_row[0], 1.0) - f_a(z_row[1], 1.0)))
        }
        ModelName::D => {
            let fz = f_a(z_row[0], 1.0);
            match col {
                0 => Ok(fz),
                1 => Ok(2.0 * fz + power * 2.0 * fz),
                _ => Err(GcmError::InvalidInput("model d has two Y columns".into())),
            }
        }
        // Multiplicative models have zero conditional means either way.
        ModelName::E | ModelName::Example1 => Ok(0.0),
    }
}

/// MSPE diagnostics of a fitted pair against the model's known truth.
pub fn truth_diagnostics(
    spec: &ModelSpec,
    data: &DataSet,
    fit_x: &RegressionFit,
    fit_y: &RegressionFit,
    x_col: usize,
    y_col: usize,
) -> Result<Diagnostics> {
    let n = data.n();
    let mut true_f = Vec::with_capacity(n);
    let mut true_g = Vec::with_capacity(n);
    for i in 0..n {
        let z_row: Vec<f64> = (0..data.d_z()).map(|c| data.z_block()[(i, c)]).collect();
        true_f.push(true_mean_x(spec, &z_row, x_col)?);
        true_g.push(true_mean_y(spec, &z_row, y_col)?);
    }
    Diagnostics::from_truth(&true_f, &true_g, fit_x, fit_y)
}

/// Which test the engine runs on each replication.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    /// The GCM; routed to the max-statistic version when the model is
    /// multivariate.
    Gcm,
    /// The product-of-standard-deviations baseline (univariate only).
    NaiveResidCorr,
    /// Force the multivariate machinery even for scalar data.
    MultiGcm,
}

/// Test configuration for the rejection-rate engine.
#[derive(Clone)]
pub struct TestConfig {
    pub kind: TestKind,
    pub backend: Backend,
    /// Monte-Carlo draws for the multivariate quantile.
    pub mc_draws: usize,
    /// Optional feature lift applied before testing.
    pub lift: Option<FeatureLift>,
}

impl TestConfig {
    pub fn gcm(backend: Backend) -> Self {
        TestConfig {
            kind: TestKind::Gcm,
            backend,
            mc_draws: 5000,
            lift: None,
        }
    }

    pub fn naive(backend: Backend) -> Self {
        TestConfig {
            kind: TestKind::NaiveResidCorr,
            backend,
            mc_draws: 5000,
            lift: None,
        }
    }

    pub fn tag(&self) -> String {
        let kind = match self.kind {
            TestKind::Gcm => "gcm",
            TestKind::NaiveResidCorr => "naive",
            TestKind::MultiGcm => "multi-gcm",
        };
        let lift = match &self.lift {
            Some(l) => format!("+lift({},{})", l.map_x.tag(), l.map_y.tag()),
            None => String::new(),
        };
        format!("{kind}-{}{lift}", self.backend.tag())
    }
}

/// Rejection rates of one test over a grid of sample sizes.
#[derive(Debug, Clone, Serialize)]
pub struct RejectionReport {
    pub model: String,
    pub test_tag: String,
    pub n_values: Vec<usize>,
    pub reps: usize,
    pub alpha: f64,
    /// Fraction of replications that rejected, per n.
    pub rates: Vec<f64>,
    /// `sqrt(rate (1-rate) / reps)`, per n.
    pub mc_stderr: Vec<f64>,
    /// Exclusive upper bound: a null-model rate below this is consistent
    /// with valid size (0.11 at 100 replications and level 0.05; the exact
    /// binomial 0.99-bound otherwise).
    pub band: f64,
    /// `rate < band`, per n.
    pub band_pass: Vec<bool>,
    /// Replications that errored (counted as non-rejections), per n.
    pub errored: Vec<usize>,
    /// First few error messages, for the log.
    pub warnings: Vec<String>,
    pub seed: u64,
}

impl RejectionReport {
    /// CSV with columns model, test, n, reps, rate, stderr, band, pass.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,test,n,reps,rate,stderr,band,pass\n");
        for (i, &n) in self.n_values.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{:.6},{:.6},{:.6},{}\n",
                self.model,
                self.test_tag,
                n,
                self.reps,
                self.rates[i],
                self.mc_stderr[i],
                self.band,
                self.band_pass[i]
            ));
        }
        out
    }
}

/// The acceptance band on an observed rejection rate: at 100 replications
/// and level 0.05 the printed 0.11; otherwise the smallest `c/reps` whose
/// one-sided exact binomial tail under `p = alpha` is at most 0.01.
pub fn acceptance_band(reps: usize, alpha: f64) -> f64 {
    if reps == 100 && alpha == 0.05 {
        return 0.11;
    }
    let mut c = (alpha * reps as f64).ceil() as u64;
    while c <= reps as u64 {
        if binomial_upper_tail(reps as u64, alpha, c) <= 0.01 {
            return c as f64 / reps as f64;
        }
        c += 1;
    }
    1.0
}

/// Runs `reps` independent replications of the configured test per sample
/// size. Replications are keyed by `(seed, n index, replication index)`
/// through named substreams, so reports are reproducible bit for bit. A
/// replication that errors counts as a non-rejection and is tallied in
/// `errored`.
pub fn rejection_rate(
    spec: &ModelSpec,
    test: &TestConfig,
    n_values: &[usize],
    reps: usize,
    alpha: f64,
    seed: u64,
) -> Result<RejectionReport> {
    if reps == 0 {
        return Err(GcmError::InvalidInput("need at least one replication".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(GcmError::InvalidInput(format!(
            "alpha must lie in (0,1), got {alpha}"
        )));
    }
    let mut rates = Vec::with_capacity(n_values.len());
    let mut stderrs = Vec::with_capacity(n_values.len());
    let mut errored = Vec::with_capacity(n_values.len());
    let mut warnings = Vec::new();
    for (ni, &n) in n_values.iter().enumerate() {
        let spec_n = ModelSpec { n, ..*spec };
        let mut rejects = 0usize;
        let mut errors = 0usize;
        for rep in 0..reps {
            let index = ((ni as u64) << 32) | rep as u64;
            let mut model_rng = substream(seed, Stream::Model, index);
            let data = gen_model(&spec_n, &mut model_rng)?;
            match run_one(&data, test, alpha, seed, index) {
                Ok(reject) => {
                    if reject {
                        rejects += 1;
                    }
                }
                Err(e) => {
                    errors += 1;
                    if warnings.len() < 8 {
                        warnings.push(format!("n={n} rep={rep}: {e}"));
                    }
                }
            }
        }
        let rate = rejects as f64 / reps as f64;
        rates.push(rate);
        stderrs.push((rate * (1.0 - rate) / reps as f64).sqrt());
        errored.push(errors);
    }
    let band = acceptance_band(reps, alpha);
    Ok(RejectionReport {
        model: spec.tag(),
        test_tag: test.tag(),
        n_values: n_values.to_vec(),
        reps,
        alpha,
        band,
        band_pass: rates.iter().map(|&r| r < band).collect(),
        rates,
        mc_stderr: stderrs,
        errored,
        warnings,
        seed,
    })
}

fn run_one(
    data: &DataSet,
    test: &TestConfig,
    alpha: f64,
    seed: u64,
    index: u64,
) -> Result<bool> {
    let univariate = data.d_x() == 1 && data.d_y() == 1 && test.lift.is_none();
    match test.kind {
        TestKind::Gcm if univariate => {
            gcm_test(data, &test.backend, &test.backend, alpha).map(|r| r.reject)
        }
        TestKind::Gcm | TestKind::MultiGcm => {
            let mc_seed = substream(seed, Stream::Test, index).next_u64();
            multi_gcm_test(
                data,
                &test.backend,
                &test.backend,
                alpha,
                test.mc_draws,
                mc_seed,
                test.lift.as_ref(),
            )
            .map(|r| r.reject)
        }
        TestKind::NaiveResidCorr => {
            if data.d_x() != 1 || data.d_y() != 1 {
                return Err(GcmError::InvalidInput(
                    "the naive baseline is univariate only".into(),
                ));
            }
            naive_resid_corr_test(data, &test.backend, &test.backend, alpha).map(|r| r.reject)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(name: ModelName, power: bool, a: Option<f64>, n: usize) -> ModelSpec {
        ModelSpec::new(name, power, a, n).unwrap()
    }

    #[test]
    fn shapes_match_the_model_definitions() {
        let mut rng = substream(1, Stream::Model, 0);
        let c = gen_model(&spec(ModelName::C, false, None, 50), &mut rng).unwrap();
        assert_eq!((c.d_x(), c.d_y(), c.d_z()), (1, 1, 2));
        let d = gen_model(&spec(ModelName::D, false, None, 50), &mut rng).unwrap();
        assert_eq!((d.d_x(), d.d_y(), d.d_z()), (2, 2, 1));
    }

    #[test]
    fn model_spec_rejects_incompatible_parameters() {
        assert!(ModelSpec::new(ModelName::C, false, Some(2.0), 50).is_err());
        assert!(ModelSpec::new(ModelName::Nfl, false, None, 50).is_err());
        assert!(ModelSpec::new(ModelName::Nfl, false, Some(-1.0), 50).is_err());
        assert!(ModelSpec::new(ModelName::A, false, Some(3.0), 50).is_ok());
    }

    #[test]
    fn model_e_null_moments() {
        let mut rng = substream(5, Stream::Model, 0);
        let n = 10_000;
        let data = gen_model(&spec(ModelName::E, false, None, n), &mut rng).unwrap();
        let x = data.x_col(0);
        let y = data.y_col(0);
        let corr = |u: &[f64], v: &[f64]| {
            let mu = u.iter().sum::<f64>() / n as f64;
            let mv = v.iter().sum::<f64>() / n as f64;
            let cov = u
                .iter()
                .zip(v)
                .map(|(a, b)| (a - mu) * (b - mv))
                .sum::<f64>();
            let su = u.iter().map(|a| (a - mu) * (a - mu)).sum::<f64>();
            let sv = v.iter().map(|b| (b - mv) * (b - mv)).sum::<f64>();
            cov / (su * sv).sqrt()
        };
        assert!(corr(&x, &y).abs() < 4.0 / (n as f64).sqrt());
        let x_sq: Vec<f64> = x.iter().map(|v| v * v).collect();
        let y_sq: Vec<f64> = y.iter().map(|v| v * v).collect();
        assert!(corr(&x_sq, &y_sq) > 0.1, "squared correlation");
    }

    #[test]
    fn acceptance_band_paper_case_and_binomial() {
        assert_eq!(acceptance_band(100, 0.05), 0.11);
        // smallest c with P(Bin(500, 0.05) >= c) <= 0.01 is 38
        let band500 = acceptance_band(500, 0.05);
        assert!(binomial_upper_tail(500, 0.05, (band500 * 500.0).round() as u64) <= 0.01);
        assert!(
            binomial_upper_tail(500, 0.05, (band500 * 500.0).round() as u64 - 1) > 0.01
        );
    }

    #[test]
    fn extreme_alpha_pins_rates() {
        let model = spec(ModelName::Example1, false, None, 60);
        let config = TestConfig::gcm(Backend::Linear);
        let never = rejection_rate(&model, &config, &[60], 40, 1e-9, 3).unwrap();
        assert_eq!(never.rates, vec![0.0]);
        let always = rejection_rate(&model, &config, &[60], 40, 1.0 - 1e-9, 3).unwrap();
        assert_eq!(always.rates, vec![1.0]);
        assert_eq!(always.errored, vec![0]);
    }

    #[test]
    fn engine_counts_errors_as_non_rejections() {
        // n = 2 makes the linear backend fail every replication.
        let model = spec(ModelName::Example1, false, None, 2);
        let config = TestConfig::gcm(Backend::Linear);
        let report = rejection_rate(&model, &config, &[2], 25, 0.05, 9).unwrap();
        assert_eq!(report.errored, vec![25]);
        assert_eq!(report.rates, vec![0.0]);
        assert!(!report.warnings.is_empty());
    }

    #[test]
    fn reports_are_bit_reproducible() {
        let model = spec(ModelName::A, false, None, 80);
        let config = TestConfig::gcm(Backend::Linear);
        let a = rejection_rate(&model, &config, &[40, 80], 30, 0.05, 12).unwrap();
        let b = rejection_rate(&model, &config, &[40, 80], 30, 0.05, 12).unwrap();
        assert_eq!(a.rates, b.rates);
        assert_eq!(a.mc_stderr, b.mc_stderr);
        assert_eq!(a.to_csv(), b.to_csv());
    }

    #[test]
    fn null_level_in_binomial_interval() {
        let model = spec(ModelName::Example1, false, None, 200);
        let config = TestConfig::gcm(Backend::Linear);
        let report = rejection_rate(&model, &config, &[200], 500, 0.05, 4).unwrap();
        assert!(
            (0.03..=0.08).contains(&report.rates[0]),
            "rate = {}",
            report.rates[0]
        );
    }

    #[test]
    fn power_variant_rejects_more() {
        let null = spec(ModelName::Example1, false, None, 200);
        let power = spec(ModelName::Example1, true, None, 200);
        let config = TestConfig::gcm(Backend::Linear);
        let r0 = rejection_rate(&null, &config, &[200], 100, 0.05, 6).unwrap();
        let r1 = rejection_rate(&power, &config, &[200], 100, 0.05, 6).unwrap();
        assert!(
            r1.rates[0] >= r0.rates[0],
            "power {} vs null {}",
            r1.rates[0],
            r0.rates[0]
        );
    }

    #[test]
    fn multivariate_model_routes_to_max_statistic() {
        let model = spec(ModelName::D, false, None, 120);
        let config = TestConfig::gcm(Backend::Linear);
        let report = rejection_rate(&model, &config, &[120], 20, 0.05, 8).unwrap();
        assert_eq!(report.errored, vec![0]);
    }

    #[test]
    fn csv_layout_is_stable() {
        let model = spec(ModelName::Example1, false, None, 50);
        let config = TestConfig::gcm(Backend::Linear);
        let report = rejection_rate(&model, &config, &[50, 100], 10, 0.05, 2).unwrap();
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "model,test,n,reps,rate,stderr,band,pass");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("example1,gcm-linear,50,10,"));
    }

    #[test]
    fn truth_diagnostics_zero_mean_models() {
        let model = spec(ModelName::E, false, None, 40);
        let mut rng = substream(3, Stream::Model, 0);
        let data = gen_model(&model, &mut rng).unwrap();
        // constant-zero predictions match the zero conditional means
        let zero_fit = RegressionFit {
            predictions: vec![0.0; 40],
            residuals: data.x_col(0),
            backend_tag: "zero".into(),
            lambda_used: None,
            in_sample: true,
        };
        let d = truth_diagnostics(&model, &data, &zero_fit, &zero_fit, 0, 0).unwrap();
        assert_eq!(d.a_f, 0.0);
        assert_eq!(d.a_g, 0.0);
        assert_eq!(d.product_check, 0.0);
    }
}
