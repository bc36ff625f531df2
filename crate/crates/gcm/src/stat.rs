//! Standard-normal distribution function and quantile.
//!
//! Both are classic rational approximations: Cody's Chebyshev rationals for
//! the error function and Wichura's PPND16 for the quantile. Accuracy is far
//! below the 1e-9 the tests require; the test suite cross-checks both
//! against an independent high-precision oracle.

/// Complementary error function, Cody (1969) three-branch rational fit.
pub fn erfc(x: f64) -> f64 {
    const THRESH: f64 = 0.46875;
    let y = x.abs();
    let res = if y <= THRESH {
        1.0 - erf_small(x)
    } else if y <= 4.0 {
        erfc_mid(y)
    } else {
        erfc_far(y)
    };
    if x < -THRESH {
        2.0 - res
    } else {
        res
    }
}

/// Error function.
pub fn erf(x: f64) -> f64 {
    if x.abs() <= 0.46875 {
        erf_small(x)
    } else {
        1.0 - erfc(x)
    }
}

// |x| <= 0.46875
fn erf_small(x: f64) -> f64 {
    const A: [f64; 5] = [
        3.16112374387056560e0,
        1.13864154151050156e2,
        3.77485237685302021e2,
        3.20937758913846947e3,
        1.85777706184603153e-1,
    ];
    const B: [f64; 4] = [
        2.36012909523441209e1,
        2.44024637934444173e2,
        1.28261652607737228e3,
        2.84423683343917062e3,
    ];
    let z = x * x;
    let mut num = A[4] * z;
    let mut den = z;
    for i in 0..3 {
        num = (num + A[i]) * z;
        den = (den + B[i]) * z;
    }
    x * (num + A[3]) / (den + B[3])
}

// 0.46875 < y <= 4
fn erfc_mid(y: f64) -> f64 {
    const C: [f64; 9] = [
        5.64188496988670089e-1,
        8.88314979438837594e0,
        6.61191906371416295e1,
        2.98635138197400131e2,
        8.81952221241769090e2,
        1.71204761263407058e3,
        2.05107837782607147e3,
        1.23033935479799725e3,
        2.15311535474403846e-8,
    ];
    const D: [f64; 8] = [
        1.57449261107098347e1,
        1.17693950891312499e2,
        5.37181101862009858e2,
        1.62138957456669019e3,
        3.29079923573345963e3,
        4.36261909014324716e3,
        3.43936767414372164e3,
        1.23033935480374942e3,
    ];
    let mut num = C[8] * y;
    let mut den = y;
    for i in 0..7 {
        num = (num + C[i]) * y;
        den = (den + D[i]) * y;
    }
    exp_nx2(y) * (num + C[7]) / (den + D[7])
}

// y > 4
fn erfc_far(y: f64) -> f64 {
    const SQRPI: f64 = 5.6418958354775628695e-1; // 1/sqrt(pi)
    const P: [f64; 6] = [
        3.05326634961232344e-1,
        3.60344899949804439e-1,
        1.25781726111229246e-1,
        1.60837851487422766e-2,
        6.58749161529837803e-4,
        1.63153871373020978e-2,
    ];
    const Q: [f64; 5] = [
        2.56852019228982242e0,
        1.87295284992346047e0,
        5.27905102951428412e-1,
        6.05183413124413191e-2,
        2.33520497626869185e-3,
    ];
    if y >= 26.5 {
        return 0.0;
    }
    let z = 1.0 / (y * y);
    let mut num = P[5] * z;
    let mut den = z;
    for i in 0..4 {
        num = (num + P[i]) * z;
        den = (den + Q[i]) * z;
    }
    let r = z * (num + P[4]) / (den + Q[4]);
    exp_nx2(y) * (SQRPI - r) / y
}

// exp(-y^2) with the argument split to limit rounding in y*y.
fn exp_nx2(y: f64) -> f64 {
    let ysq = (y * 16.0).trunc() / 16.0;
    let del = (y - ysq) * (y + ysq);
    (-ysq * ysq).exp() * (-del).exp()
}

/// Standard normal cumulative distribution function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

/// Standard normal quantile, Wichura's algorithm AS 241 (PPND16).
///
/// Returns `NaN` outside `(0, 1)` and the signed infinities at the
/// endpoints.
pub fn normal_quantile(p: f64) -> f64 {
    if !(0.0..=1.0).contains(&p) || p.is_nan() {
        return f64::NAN;
    }
    if p == 0.0 {
        return f64::NEG_INFINITY;
    }
    if p == 1.0 {
        return f64::INFINITY;
    }

    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q * poly(&PPND_A, r) / poly(&PPND_B, r);
    }

    let mut r = if q < 0.0 { p } else { 1.0 - p };
    r = (-r.ln()).sqrt();
    let x = if r <= 5.0 {
        let r = r - 1.6;
        poly(&PPND_C, r) / poly(&PPND_D, r)
    } else {
        let r = r - 5.0;
        poly(&PPND_E, r) / poly(&PPND_F, r)
    };
    if q < 0.0 {
        -x
    } else {
        x
    }
}

fn poly(coeffs: &[f64; 8], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

const PPND_A: [f64; 8] = [
    3.3871328727963666080e0,
    1.3314166789178437745e2,
    1.9715909503065514427e3,
    1.3731693765509461125e4,
    4.5921953931549871457e4,
    6.7265770927008700853e4,
    3.3430575583588128105e4,
    2.5090809287301226727e3,
];
const PPND_B: [f64; 8] = [
    1.0,
    4.2313330701600911252e1,
    6.8718700749205790830e2,
    5.3941960214247511077e3,
    2.1213794301586595867e4,
    3.9307895800092710610e4,
    2.8729085735721942674e4,
    5.2264952788528545610e3,
];
const PPND_C: [f64; 8] = [
    1.42343711074968357734e0,
    4.63033784615654529590e0,
    5.76949722146069140550e0,
    3.64784832476320460504e0,
    1.27045825245236838258e0,
    2.41780725177450611770e-1,
    2.27238449892691845833e-2,
    7.74545014278341407640e-4,
];
const PPND_D: [f64; 8] = [
    1.0,
    2.05319162663775882187e0,
    1.67638483018380384940e0,
    6.89767334985100004550e-1,
    1.48103976427480074590e-1,
    1.51986665636164571966e-2,
    5.47593808499534494600e-4,
    1.05075007164441684324e-9,
];
const PPND_E: [f64; 8] = [
    6.65790464350110377720e0,
    5.46378491116411436990e0,
    1.78482653991729133580e0,
    2.96560571828504891230e-1,
    2.65321895265761230930e-2,
    1.24266094738807843860e-3,
    2.71155556874348757815e-5,
    2.01033439929228813265e-7,
];
const PPND_F: [f64; 8] = [
    1.0,
    5.99832206555887937690e-1,
    1.36929880922735805310e-1,
    1.48753612908506148525e-2,
    7.86869131145613259100e-4,
    1.84631831751005468180e-6,
    1.42151175831644588870e-7,
    2.04426310338993978564e-15,
];

/// Two-sided normal p-value for an observed statistic `t`.
pub fn two_sided_p(t: f64) -> f64 {
    (2.0 * (1.0 - normal_cdf(t.abs()))).clamp(0.0, 1.0)
}

/// Upper tail `P(Bin(n, p) >= c)`, computed by a log-space pmf recursion.
pub fn binomial_upper_tail(n: u64, p: f64, c: u64) -> f64 {
    if c == 0 {
        return 1.0;
    }
    if c > n {
        return 0.0;
    }
    let logit = (p / (1.0 - p)).ln();
    let mut log_pmf = (n as f64) * (1.0 - p).ln();
    let mut tail = 0.0;
    for k in 0..=n {
        if k >= c {
            tail += log_pmf.exp();
        }
        if k < n {
            log_pmf += ((n - k) as f64 / (k + 1) as f64).ln() + logit;
        }
    }
    tail.min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{Binomial, ContinuousCDF, DiscreteCDF, Normal};

    #[test]
    fn cdf_matches_reference_to_1e9() {
        let reference = Normal::new(0.0, 1.0).unwrap();
        let mut x = -8.0;
        while x <= 8.0 {
            let got = normal_cdf(x);
            let want = reference.cdf(x);
            assert!(
                (got - want).abs() < 1e-9,
                "cdf({x}) = {got}, reference {want}"
            );
            x += 0.0117;
        }
    }

    #[test]
    fn quantile_matches_reference_to_1e9() {
        let reference = Normal::new(0.0, 1.0).unwrap();
        for i in 1..2000 {
            let p = i as f64 / 2000.0;
            let got = normal_quantile(p);
            let want = reference.inverse_cdf(p);
            assert!(
                (got - want).abs() < 1e-9,
                "quantile({p}) = {got}, reference {want}"
            );
        }
    }

    #[test]
    fn quantile_inverts_cdf() {
        for &p in &[1e-10, 1e-6, 0.025, 0.5, 0.975, 1.0 - 1e-6] {
            let x = normal_quantile(p);
            assert!((normal_cdf(x) - p).abs() < 1e-12 * (1.0 + 1.0 / p.min(1.0 - p)));
        }
    }

    #[test]
    fn known_two_sided_points() {
        assert!((two_sided_p(1.959963984540054) - 0.05).abs() < 1e-9);
        assert!((two_sided_p(0.0) - 1.0).abs() < 1e-15);
        assert!(two_sided_p(10.0) < 1e-20);
    }

    #[test]
    fn quantile_rejects_out_of_range() {
        assert!(normal_quantile(-0.1).is_nan());
        assert!(normal_quantile(1.1).is_nan());
        assert_eq!(normal_quantile(0.0), f64::NEG_INFINITY);
    }

    #[test]
    fn binomial_tail_matches_reference() {
        for &(n, c) in &[(100u64, 11u64), (100, 12), (500, 40), (10_000, 550)] {
            let want = 1.0 - Binomial::new(0.05, n).unwrap().cdf(c - 1);
            let got = binomial_upper_tail(n, 0.05, c);
            assert!(
                (got - want).abs() < 1e-10,
                "tail(n={n}, c={c}) = {got}, reference {want}"
            );
        }
    }
}
