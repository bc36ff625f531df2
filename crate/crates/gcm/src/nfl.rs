//! The hard-null construction: the `f_a` family whose RKHS norm grows like
//! `exp(a^2)`, and the digit-hiding sampler that turns any alternative into
//! a conditional-independence null arbitrarily close in sup norm.
//!
//! The hiding machinery works on dyadic grids. A value `w` on the grid
//! `2^-r Z` is represented by the integer `2^r w`; the embedded digit
//! vector is packed into an integer `N` below `K = 2^(d t)`; the hidden
//! value is `w + 2^-r K^-2 N_m`, stored exactly in an `f64` (construction
//! validates that the total number of significant bits fits the 52-bit
//! mantissa, so hide/recover is an exact bijection, not a numerical one).

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::data::DataSet;
use crate::error::{GcmError, Result};
use crate::rng::{substream, Stream};

/// `f_a(z) = exp(-z^2/2) sin(a z)`.
pub fn f_a(z: f64, a: f64) -> f64 {
    (-z * z / 2.0).exp() * (a * z).sin()
}

/// Squared RKHS norm of `f_a` in the Gaussian-kernel space.
#[derive(Debug, Clone, Copy)]
pub struct RkhsNormSq {
    /// `sqrt(8 pi) (exp(a^2) + exp(-a^2))`; overflows to +inf for a^2 > 700.
    pub value: f64,
    /// `log` of the same quantity, always finite.
    pub log_value: f64,
}

/// Squared RKHS norm of `f_a` for the Gaussian kernel with bandwidth 1.
///
/// The closed form is stated for bandwidth 1 only; any other `sigma` is an
/// error.
pub fn rkhs_norm_sq(a: f64, sigma: f64) -> Result<RkhsNormSq> {
    if sigma != 1.0 {
        return Err(GcmError::InvalidInput(format!(
            "closed-form RKHS norm requires bandwidth 1, got {sigma}"
        )));
    }
    let sqrt_8pi = (8.0 * std::f64::consts::PI).sqrt();
    let a_sq = a * a;
    let log_value = 0.5 * (8.0 * std::f64::consts::PI).ln() + a_sq + (-2.0 * a_sq).exp().ln_1p();
    let value = if a_sq > 700.0 {
        f64::INFINITY
    } else {
        sqrt_8pi * (a_sq.exp() + (-a_sq).exp())
    };
    Ok(RkhsNormSq { value, log_value })
}

// Noise depth for the fine component added to the hidden coordinate. The
// noise is uniform on {0, .., 2^16 - 1} / 2^16 so that truncating it back
// off is exact integer arithmetic.
const NOISE_BITS: u32 = 16;
const MANTISSA_BUDGET: u32 = 52;

/// Parameters of the hiding construction.
#[derive(Debug, Clone)]
pub struct HidingSpec {
    /// Grid exponent: values are discretised to `2^-r Z`.
    pub r: u32,
    /// Digit width per embedded component.
    pub t: u32,
    /// Number of embedded components.
    pub d: u32,
    /// Sup-norm proximity the construction guarantees off the clip event.
    pub epsilon: f64,
    /// Failure budget for the proximity guarantee.
    pub delta: f64,
    /// Values are clipped to `[-m2, m2]` before discretisation.
    pub m2: f64,
    /// Grid shift (in `2^-r` units) making embedded components nonnegative.
    shift_units: i64,
    /// Embedding permutation of `{0, .., K-1}` and its inverse; `None`
    /// means the identity embedding.
    perm: Option<(Vec<u32>, Vec<u32>)>,
}

impl HidingSpec {
    /// `K = 2^(d t)`, the embedding base.
    pub fn k(&self) -> u64 {
        1u64 << (self.d * self.t)
    }

    /// Grid mesh `2^-r`.
    pub fn grid(&self) -> f64 {
        0.5f64.powi(self.r as i32)
    }

    /// Builds a spec for scalar hiding (`d = 1`) from the proximity budget:
    /// `r` is the smallest integer with `2^-r < min(epsilon/3, 1/n_target)`
    /// and `t` the smallest with `2^t > 2^r max(1, bound of the shifted
    /// digits)`. `m_seed` selects one of the `K!` embeddings by seeding a
    /// shuffle; `None` is the identity embedding.
    pub fn derive(
        epsilon: f64,
        delta: f64,
        n_target: usize,
        m2: f64,
        m_seed: Option<u64>,
    ) -> Result<Self> {
        if !(epsilon > 0.0) || !(delta > 0.0 && delta < 1.0) || !(m2 > 0.0) || n_target == 0 {
            return Err(GcmError::Hiding(
                "need epsilon > 0, delta in (0,1), m2 > 0, n_target >= 1".into(),
            ));
        }
        let bound = (epsilon / 3.0).min(1.0 / n_target as f64);
        let mut r = 1u32;
        while 0.5f64.powi(r as i32) >= bound {
            r += 1;
            if r > 40 {
                return Err(GcmError::Hiding("grid exponent exceeds 40".into()));
            }
        }
        Self::with_grid(r, epsilon, delta, m2, m_seed)
    }

    /// Same as [`HidingSpec::derive`] but with the grid exponent pinned.
    pub fn with_grid(
        r: u32,
        epsilon: f64,
        delta: f64,
        m2: f64,
        m_seed: Option<u64>,
    ) -> Result<Self> {
        let d = 1u32;
        let shift_units = (m2 * 2f64.powi(r as i32)).ceil() as i64;
        let max_units = (m2 * 2f64.powi(r as i32)).floor() as i64 + shift_units;
        let mut t = 1u32;
        while (1i64 << t) <= max_units.max(1 << r) {
            t += 1;
            if d * t >= 30 {
                return Err(GcmError::Hiding(format!(
                    "digit width {t} too large for exact float arithmetic"
                )));
            }
        }
        let spec = HidingSpec {
            r,
            t,
            d,
            epsilon,
            delta,
            m2,
            shift_units,
            perm: None,
        };
        spec.validated()?.with_permutation(m_seed)
    }

    /// Assembles a spec with explicit grid and digit parameters; used by
    /// tests of the raw hide/recover machinery (`d` may exceed 1 here).
    pub fn manual(r: u32, t: u32, d: u32, m_seed: Option<u64>) -> Result<Self> {
        let spec = HidingSpec {
            r,
            t,
            d,
            epsilon: 3.0 * 0.5f64.powi(r as i32),
            delta: 0.5,
            m2: 2f64.powi(t as i32 - r as i32),
            shift_units: 0,
            perm: None,
        };
        spec.validated()?.with_permutation(m_seed)
    }

    fn validated(self) -> Result<Self> {
        if self.d == 0 || self.t == 0 {
            return Err(GcmError::Hiding("d and t must be positive".into()));
        }
        // |2^r w| K^2 * 2^NOISE_BITS must stay below the f64 mantissa.
        let w_bits = 64 - ((self.m2 + 2.0) as u64).leading_zeros() + self.r;
        let total_bits = w_bits + 2 * self.d * self.t + NOISE_BITS;
        if total_bits > MANTISSA_BUDGET {
            return Err(GcmError::Hiding(format!(
                "configuration needs {total_bits} mantissa bits, budget is {MANTISSA_BUDGET}; \
                 lower the grid resolution or the clip bound"
            )));
        }
        Ok(self)
    }

    fn with_permutation(mut self, m_seed: Option<u64>) -> Result<Self> {
        match m_seed {
            None => Ok(self),
            Some(seed) => {
                let k = self.k();
                if k > (1 << 20) {
                    return Err(GcmError::Hiding(format!(
                        "seeded embedding permutations supported up to K = 2^20, got K = {k}"
                    )));
                }
                let mut perm: Vec<u32> = (0..k as u32).collect();
                let mut rng = substream(seed, Stream::Hiding, (1 << 56) - 1);
                perm.shuffle(&mut rng);
                let mut inverse = vec![0u32; k as usize];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p as usize] = i as u32;
                }
                self.perm = Some((perm, inverse));
                Ok(self)
            }
        }
    }

    fn pi(&self, e: u64) -> u64 {
        match &self.perm {
            None => e,
            Some((perm, _)) => perm[e as usize] as u64,
        }
    }

    fn pi_inverse(&self, j: u64) -> u64 {
        match &self.perm {
            None => j,
            Some((_, inv)) => inv[j as usize] as u64,
        }
    }

    fn units_of_grid(&self, value: f64, what: &str) -> Result<i64> {
        let scaled = value * 2f64.powi(self.r as i32);
        let units = scaled.round();
        if (scaled - units).abs() > 1e-9 {
            return Err(GcmError::Hiding(format!(
                "{what} = {value} is not on the grid 2^-{} Z",
                self.r
            )));
        }
        Ok(units as i64)
    }
}

/// Packs grid components (each with `2^r n_j` in `{0, .., 2^t - 1}`) into a
/// single integer below `K` by concatenating their binary digits.
pub fn embed_digits(n_vec: &[f64], spec: &HidingSpec) -> Result<u64> {
    if n_vec.len() != spec.d as usize {
        return Err(GcmError::Hiding(format!(
            "expected {} components, got {}",
            spec.d,
            n_vec.len()
        )));
    }
    let mut packed = 0u64;
    for (j, &value) in n_vec.iter().enumerate() {
        let units = spec.units_of_grid(value, "digit component")?;
        if units < 0 || units >= (1 << spec.t) {
            return Err(GcmError::Hiding(format!(
                "component {j} out of digit range: {units} not in [0, 2^{})",
                spec.t
            )));
        }
        packed |= (units as u64) << (spec.t * j as u32);
    }
    Ok(packed)
}

/// Inverse of [`embed_digits`]: the `j`th component (1-indexed in the
/// construction) is the residue modulo `2^t` of `floor(N / 2^(t(j-1)))`.
pub fn extract_digits(packed: u64, spec: &HidingSpec) -> Vec<f64> {
    let mask = (1u64 << spec.t) - 1;
    (0..spec.d)
        .map(|j| ((packed >> (spec.t * j)) & mask) as f64 * spec.grid())
        .collect()
}

/// Hides the digit vector in the low-order digits of `w_last`:
/// `w + 2^-r K^-2 N_m` with `N_m = ((N + e) mod K) + K pi(e)`.
pub fn hide(w_last: f64, n_vec: &[f64], e: u64, spec: &HidingSpec) -> Result<f64> {
    let k = spec.k();
    if e >= k {
        return Err(GcmError::Hiding(format!("e = {e} not below K = {k}")));
    }
    let w_units = spec.units_of_grid(w_last, "w_last")?;
    let packed = embed_digits(n_vec, spec)?;
    let shifted = (packed + e) % k + k * spec.pi(e);
    let total = w_units as i128 * (k * k) as i128 + shifted as i128;
    let denom = 2f64.powi(spec.r as i32) * (k * k) as f64;
    Ok(total as f64 / denom)
}

/// Inverts [`hide`]: recovers the coarse value, the digit vector and the
/// uniform index. Values farther than `2^-r K^-2 / 4` from the fine grid
/// are rejected.
pub fn recover(w_hidden: f64, spec: &HidingSpec) -> Result<(f64, Vec<f64>, u64)> {
    let k = spec.k();
    let scaled = w_hidden * 2f64.powi(spec.r as i32) * (k * k) as f64;
    let total = scaled.round();
    if (scaled - total).abs() > 0.25 {
        return Err(GcmError::Hiding(format!(
            "value {w_hidden} lies {:.3} fine-grid units off the grid",
            (scaled - total).abs()
        )));
    }
    let total = total as i128;
    let ksq = (k * k) as i128;
    let w_units = total.div_euclid(ksq);
    let shifted = total.rem_euclid(ksq) as u64;
    let e = spec.pi_inverse(shifted / k);
    let packed = (shifted % k + k - e % k) % k;
    let w_last = w_units as f64 * spec.grid();
    Ok((w_last, extract_digits(packed, spec), e))
}

/// One observation from the hidden-null sampler.
#[derive(Debug, Clone)]
pub struct HiddenSample {
    /// The absolutely continuous triple `(x~, y~, z~)` actually emitted.
    pub v_tilde: (f64, f64, f64),
    /// The raw draw from the alternative.
    pub v_orig: (f64, f64, f64),
    /// The discretised X value that was embedded into Z.
    pub x_ring: f64,
    /// Whether truncating the noise off `z~` and inverting the embedding
    /// reproduces `x_ring` exactly.
    pub recovered_ok: bool,
}

/// A black-box sampler for the alternative distribution of `(X, Y, Z)`.
pub type TripleSampler<'a> = dyn FnMut(&mut ChaCha8Rng) -> Result<(f64, f64, f64)> + 'a;

/// Draws `n` observations from the conditional-independence null obtained
/// by clipping, discretising, hiding the discretised X inside Z, and adding
/// fine uniform noise.
///
/// Off the clipping event, each coordinate of the emitted triple is within
/// `3 * 2^-r < epsilon` of the original draw, yet the discretised X is an
/// exact function of the emitted Z, so the construction satisfies
/// conditional independence by design.
pub fn sample_hidden_null(
    q_sampler: &mut TripleSampler,
    spec: &HidingSpec,
    n: usize,
    seed: u64,
) -> Result<Vec<HiddenSample>> {
    if spec.d != 1 {
        return Err(GcmError::Hiding(
            "the sampler embeds a scalar X; build the spec with d = 1".into(),
        ));
    }
    let k = spec.k();
    let grid = spec.grid();
    let fine = grid / (k * k) as f64;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = substream(seed, Stream::Hiding, i as u64);
        let (x, y, z) = q_sampler(&mut rng)?;
        if !(x.is_finite() && y.is_finite() && z.is_finite()) {
            return Err(GcmError::NonFinite {
                context: "triple sampler output".into(),
            });
        }
        let clip = |v: f64| v.clamp(-spec.m2, spec.m2);
        let floor_grid = |v: f64| (v * 2f64.powi(spec.r as i32)).floor() * grid;
        let (x_ring, y_ring, z_ring) = (clip(x), clip(y), clip(z));
        let (x_ring, y_ring, z_ring) = (floor_grid(x_ring), floor_grid(y_ring), floor_grid(z_ring));

        // Embed the shifted X digits into Z.
        let shifted_x = x_ring + spec.shift_units as f64 * grid;
        let e = rng.gen_range(0..k);
        let z_hidden = hide(z_ring, &[shifted_x], e, spec)?;

        // Fine noise on Z is dyadic with NOISE_BITS depth so that
        // truncation removes it exactly.
        let noise_units = rng.gen_range(0u64..(1 << NOISE_BITS));
        let z_tilde = z_hidden + fine * (noise_units as f64 / (1u64 << NOISE_BITS) as f64);
        let x_tilde = x_ring + grid * rng.gen::<f64>();
        let y_tilde = y_ring + grid * rng.gen::<f64>();

        // Truncate the noise digits and invert the embedding.
        let z_trunc = (z_tilde / fine).floor() * fine;
        let recovered_ok = match recover(z_trunc, spec) {
            Ok((w, digits, e_rec)) => {
                w == z_ring && e_rec == e && digits[0] == shifted_x
            }
            Err(_) => false,
        };
        out.push(HiddenSample {
            v_tilde: (x_tilde, y_tilde, z_tilde),
            v_orig: (x, y, z),
            x_ring,
            recovered_ok,
        });
    }
    Ok(out)
}

/// Empirical `1 - delta/(2n)` quantile of `||V||_inf` over a pilot run,
/// used as the default clip bound.
pub fn pilot_clip_bound(
    q_sampler: &mut TripleSampler,
    delta: f64,
    n_target: usize,
    seed: u64,
) -> Result<f64> {
    const PILOT: usize = 10_000;
    let mut maxima = Vec::with_capacity(PILOT);
    for i in 0..PILOT {
        let mut rng = substream(seed, Stream::Hiding, (1 << 40) + i as u64);
        let (x, y, z) = q_sampler(&mut rng)?;
        maxima.push(x.abs().max(y.abs()).max(z.abs()));
    }
    maxima.sort_by(f64::total_cmp);
    let level = 1.0 - delta / (2.0 * n_target as f64);
    let idx = ((level * PILOT as f64).ceil() as usize).clamp(1, PILOT) - 1;
    Ok(maxima[idx])
}

/// Packs hidden samples into a dataset.
pub fn hidden_to_dataset(samples: &[HiddenSample]) -> Result<DataSet> {
    DataSet::from_univariate(
        samples.iter().map(|s| s.v_tilde.0).collect(),
        samples.iter().map(|s| s.v_tilde.1).collect(),
        samples.iter().map(|s| s.v_tilde.2).collect(),
    )
}

/// The hard-null generative model: `Z = N_Z`, `X = f_a(Z) + N_X`,
/// `Y = f_a(Z) + N_Y` with independent standard normals. Conditionally
/// independent for every `a`, but the conditional mean gets harder to
/// estimate as `a` grows.
pub fn nfl_null_model(a: f64, n: usize, rng: &mut ChaCha8Rng) -> Result<DataSet> {
    use rand_distr::StandardNormal;
    if !(a > 0.0) {
        return Err(GcmError::InvalidInput(format!(
            "a must be positive, got {a}"
        )));
    }
    let mut z = Vec::with_capacity(n);
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let zi: f64 = rng.sample(StandardNormal);
        let fz = f_a(zi, a);
        x.push(fz + rng.sample::<f64, _>(StandardNormal));
        y.push(fz + rng.sample::<f64, _>(StandardNormal));
        z.push(zi);
    }
    DataSet::from_univariate(x, y, z)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f_a_basics() {
        for a in [0.5, 2.0, 6.0, 18.0] {
            assert_eq!(f_a(0.0, a), 0.0);
            for z in [0.3, 1.7, -2.2] {
                assert!((f_a(-z, a) + f_a(z, a)).abs() < 1e-15);
            }
        }
        // direct evaluation: exp(-0.03125) * sin(1.5)
        assert!((f_a(0.25, 6.0) - 0.9668051).abs() < 1e-6);
    }

    #[test]
    fn rkhs_norm_closed_form_values() {
        let at0 = rkhs_norm_sq(0.0, 1.0).unwrap();
        assert!((at0.value - 2.0 * (8.0 * std::f64::consts::PI).sqrt()).abs() < 1e-12);
        assert!((at0.value - 10.0265).abs() < 1e-3);

        let at6 = rkhs_norm_sq(6.0, 1.0).unwrap();
        let want = (8.0 * std::f64::consts::PI).sqrt() * (36f64.exp() + (-36f64).exp());
        assert!((at6.value - want).abs() < 1e-3 * want);
        assert!((at6.log_value - at6.value.ln()).abs() < 1e-9);
    }

    #[test]
    fn rkhs_norm_monotone_and_overflow() {
        let mut last = 0.0;
        for i in 0..40 {
            let a = i as f64 * 0.5;
            let norm = rkhs_norm_sq(a, 1.0).unwrap();
            assert!(norm.log_value >= last);
            last = norm.log_value;
        }
        let big = rkhs_norm_sq(30.0, 1.0).unwrap();
        assert!(big.value.is_infinite());
        assert!(big.log_value.is_finite());
        assert!((big.log_value - (0.5 * (8.0 * std::f64::consts::PI).ln() + 900.0)).abs() < 1e-9);
    }

    #[test]
    fn rkhs_norm_rejects_other_bandwidths() {
        assert!(rkhs_norm_sq(2.0, 0.5).is_err());
    }

    // Simpson quadrature of the Fourier-domain integral defining the norm.
    fn quadrature_norm_sq(a: f64) -> f64 {
        let f = |w: f64| {
            let fa = (-(w - a) * (w - a) / 2.0).exp() + (-(w + a) * (w + a) / 2.0).exp();
            fa * fa * (w * w / 2.0).exp()
        };
        let lo = -(2.0 * a + 30.0);
        let hi = 2.0 * a + 30.0;
        let steps = 200_000;
        let h = (hi - lo) / steps as f64;
        let mut acc = f(lo) + f(hi);
        for i in 1..steps {
            let w = lo + i as f64 * h;
            acc += f(w) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    }

    #[test]
    fn rkhs_norm_agrees_with_quadrature() {
        for a in [0.0, 0.7, 1.5, 2.4, 3.0] {
            let closed = rkhs_norm_sq(a, 1.0).unwrap().value;
            let quad = quadrature_norm_sq(a);
            assert!(
                (closed - quad).abs() < 0.01 * closed,
                "a={a}: closed {closed}, quadrature {quad}"
            );
        }
    }

    #[test]
    fn embed_digits_hand_cases() {
        let spec1 = HidingSpec::manual(0, 2, 1, None).unwrap();
        assert_eq!(embed_digits(&[3.0], &spec1).unwrap(), 3);
        let spec2 = HidingSpec::manual(0, 2, 2, None).unwrap();
        assert_eq!(embed_digits(&[3.0, 2.0], &spec2).unwrap(), 11);
        assert_eq!(extract_digits(11, &spec2), vec![3.0, 2.0]);
        assert_eq!(embed_digits(&[0.0, 0.0], &spec2).unwrap(), 0);
    }

    #[test]
    fn embed_digits_rejects_out_of_range() {
        let spec = HidingSpec::manual(0, 2, 1, None).unwrap();
        assert!(embed_digits(&[4.0], &spec).is_err());
        assert!(embed_digits(&[-1.0], &spec).is_err());
        assert!(embed_digits(&[0.3], &spec).is_err());
    }

    #[test]
    fn hide_hand_case() {
        // r=1, t=2, K=4, identity embedding, e=0, digits N=1.5 (3 units).
        let spec = HidingSpec::manual(1, 2, 1, None).unwrap();
        let hidden = hide(0.5, &[1.5], 0, &spec).unwrap();
        assert_eq!(hidden, 0.5 + 3.0 / 32.0);
        let (w, digits, e) = recover(hidden, &spec).unwrap();
        assert_eq!(w, 0.5);
        assert_eq!(digits, vec![1.5]);
        assert_eq!(e, 0);
    }

    #[test]
    fn hide_recover_exhaustive_small_grids() {
        for r in 1..=3u32 {
            for t in [2u32, 3] {
                for m_seed in [None, Some(13u64)] {
                    let spec = HidingSpec::manual(r, t, 1, m_seed).unwrap();
                    let k = spec.k();
                    let grid = spec.grid();
                    for w_units in -6i64..=6 {
                        let w = w_units as f64 * grid;
                        for digit_units in 0..(1u64 << t) {
                            let n = digit_units as f64 * grid;
                            for e in 0..k {
                                let hidden = hide(w, &[n], e, &spec).unwrap();
                                assert!((hidden - w).abs() < grid, "perturbation bound");
                                let (w2, n2, e2) = recover(hidden, &spec).unwrap();
                                assert_eq!(w2, w);
                                assert_eq!(n2[0], n);
                                assert_eq!(e2, e);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn hide_recover_random_larger_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for (r, t, d) in [(4u32, 5u32, 1u32), (6, 7, 1), (2, 3, 2), (3, 4, 2)] {
            let spec = HidingSpec::manual(r, t, d, Some(5)).unwrap();
            let k = spec.k();
            let grid = spec.grid();
            for _ in 0..250 {
                let w = rng.gen_range(-40i64..40) as f64 * grid;
                let digits: Vec<f64> = (0..d)
                    .map(|_| rng.gen_range(0..(1u64 << t)) as f64 * grid)
                    .collect();
                let e = rng.gen_range(0..k);
                let hidden = hide(w, &digits, e, &spec).unwrap();
                let (w2, d2, e2) = recover(hidden, &spec).unwrap();
                assert_eq!(w2, w);
                assert_eq!(d2, digits);
                assert_eq!(e2, e);
            }
        }
    }

    #[test]
    fn recover_rejects_off_grid_values() {
        let spec = HidingSpec::manual(1, 2, 1, None).unwrap();
        let hidden = hide(0.5, &[1.5], 2, &spec).unwrap();
        let fine = spec.grid() / (spec.k() * spec.k()) as f64;
        assert!(recover(hidden + fine / 3.0, &spec).is_err());
        assert!(recover(hidden + fine / 8.0, &spec).is_ok());
    }

    #[test]
    fn hide_rejects_off_grid_w() {
        let spec = HidingSpec::manual(1, 2, 1, None).unwrap();
        assert!(hide(0.3, &[1.5], 0, &spec).is_err());
    }

    #[test]
    fn derive_respects_stated_inequalities() {
        let spec = HidingSpec::derive(0.1, 0.05, 200, 3.5, None).unwrap();
        let mesh = spec.grid();
        let bound = (0.1f64 / 3.0).min(1.0 / 200.0);
        assert!(mesh < bound);
        assert!(2.0 * mesh >= bound, "r is smallest");
        // 2^t must exceed the shifted digit bound and 2^r.
        let max_units = (3.5 * 2f64.powi(spec.r as i32)).floor() as i64 + spec.shift_units;
        assert!((1i64 << spec.t) > max_units);
        assert!(spec.t > spec.r);
        assert!(spec.k() as f64 > 2f64.powi(spec.r as i32));
    }

    #[test]
    fn derive_rejects_unrepresentable_configs() {
        // n_target = 10^5 forces r ~ 17; with m2 = 4 the budget blows up.
        assert!(HidingSpec::derive(0.3, 0.05, 100_000, 4.0, None).is_err());
    }

    fn gaussian_alternative() -> impl FnMut(&mut ChaCha8Rng) -> Result<(f64, f64, f64)> {
        use rand_distr::StandardNormal;
        |rng: &mut ChaCha8Rng| {
            let x: f64 = rng.sample(StandardNormal);
            let y = x + 0.1 * rng.sample::<f64, _>(StandardNormal);
            let z: f64 = rng.sample(StandardNormal);
            Ok((x, y, z))
        }
    }

    #[test]
    fn sampler_recovers_every_draw_and_stays_close() {
        let mut q = gaussian_alternative();
        let m2 = pilot_clip_bound(&mut q, 0.05, 200, 7).unwrap();
        let spec = HidingSpec::derive(0.1, 0.05, 200, m2, None).unwrap();
        let samples = sample_hidden_null(&mut q, &spec, 2000, 21).unwrap();
        assert!(samples.iter().all(|s| s.recovered_ok), "exact recovery");
        let close = samples
            .iter()
            .filter(|s| {
                let d0 = (s.v_tilde.0 - s.v_orig.0).abs();
                let d1 = (s.v_tilde.1 - s.v_orig.1).abs();
                let d2 = (s.v_tilde.2 - s.v_orig.2).abs();
                d0.max(d1).max(d2) <= 0.1
            })
            .count();
        assert!(
            close as f64 >= (1.0 - 0.05) * samples.len() as f64,
            "proximity: {close}/2000"
        );
        // off the clip event the bound is 3 * 2^-r
        let mesh = spec.grid();
        for s in &samples {
            if s.v_orig.0.abs() <= spec.m2
                && s.v_orig.1.abs() <= spec.m2
                && s.v_orig.2.abs() <= spec.m2
            {
                assert!((s.v_tilde.0 - s.v_orig.0).abs() <= 3.0 * mesh);
                assert!((s.v_tilde.1 - s.v_orig.1).abs() <= 3.0 * mesh);
                assert!((s.v_tilde.2 - s.v_orig.2).abs() <= 3.0 * mesh);
            }
        }
    }

    #[test]
    fn sampler_with_seeded_embedding_still_recovers() {
        let mut q = gaussian_alternative();
        let spec = HidingSpec::derive(0.2, 0.1, 50, 3.0, Some(3)).unwrap();
        let samples = sample_hidden_null(&mut q, &spec, 500, 5).unwrap();
        assert!(samples.iter().all(|s| s.recovered_ok));
    }

    #[test]
    fn nfl_model_shape_and_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let n = 10_000;
        let data = nfl_null_model(2.0, n, &mut rng).unwrap();
        assert_eq!((data.n(), data.d_x(), data.d_y(), data.d_z()), (n, 1, 1, 1));
        let x = data.x_col(0);
        let y = data.y_col(0);
        let mean_diff = x
            .iter()
            .zip(&y)
            .map(|(a, b)| a - b)
            .sum::<f64>()
            / n as f64;
        assert!(mean_diff.abs() < 4.0 / (n as f64).sqrt());
        // corr(X, Y) = Var(f_2(Z)) / (Var(f_2(Z)) + 1) ~= 0.212 with
        // E[f_2(Z)^2] = (1/sqrt(3)) (1 - exp(-8/3)) / 2 ~= 0.2685.
        let mx = x.iter().sum::<f64>() / n as f64;
        let my = y.iter().sum::<f64>() / n as f64;
        let cov = x
            .iter()
            .zip(&y)
            .map(|(a, b)| (a - mx) * (b - my))
            .sum::<f64>()
            / n as f64;
        let vx = x.iter().map(|a| (a - mx) * (a - mx)).sum::<f64>() / n as f64;
        let vy = y.iter().map(|b| (b - my) * (b - my)).sum::<f64>() / n as f64;
        let corr = cov / (vx * vy).sqrt();
        let e_f_sq = (1.0 - (-8.0f64 / 3.0).exp()) / (2.0 * 3f64.sqrt());
        let want = e_f_sq / (e_f_sq + 1.0);
        assert!((corr - want).abs() < 0.03, "corr {corr}, analytic {want}");
        assert!(corr > 0.15);
    }

    #[test]
    fn nfl_model_rejects_nonpositive_a() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(nfl_null_model(0.0, 10, &mut rng).is_err());
    }
}
