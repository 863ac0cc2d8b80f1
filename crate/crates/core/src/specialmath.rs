//! Scalar special functions and the closed-form divergences built on them.
//!
//! Everything here is plain `f64` and stateless. Functions with a restricted
//! domain return [`MathError::Domain`] instead of silently producing NaN.

use std::f64::consts::PI;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MathError {
    #[error("{func}: argument {value} outside domain ({reason})")]
    Domain {
        func: &'static str,
        value: f64,
        reason: &'static str,
    },
}

pub type Result<T> = std::result::Result<T, MathError>;

fn require_positive(func: &'static str, value: f64) -> Result<f64> {
    if value.is_finite() && value > 0.0 {
        Ok(value)
    } else {
        Err(MathError::Domain {
            func,
            value,
            reason: "must be finite and > 0",
        })
    }
}

/// Gamma distribution in shape/rate form: `b^a x^(a-1) e^(-bx) / Γ(a)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaLaw {
    pub shape: f64,
    pub rate: f64,
}

impl GammaLaw {
    pub fn new(shape: f64, rate: f64) -> Result<Self> {
        require_positive("GammaLaw::shape", shape)?;
        require_positive("GammaLaw::rate", rate)?;
        Ok(Self { shape, rate })
    }

    pub fn mean(&self) -> f64 {
        self.shape / self.rate
    }

    /// `E[ln x] = ψ(a) − ln b`.
    pub fn mean_log(&self) -> f64 {
        digamma_unchecked(self.shape) - self.rate.ln()
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return f64::NEG_INFINITY;
        }
        self.shape * self.rate.ln() + (self.shape - 1.0) * x.ln()
            - self.rate * x
            - log_gamma_unchecked(self.shape)
    }
}

/// Univariate normal law. A zero variance is representable (it is the
/// degenerate σ² = 0 case of the model-error expectation) but every density
/// or divergence routine rejects it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianLaw {
    pub mean: f64,
    pub variance: f64,
}

impl GaussianLaw {
    pub fn new(mean: f64, variance: f64) -> Result<Self> {
        if !mean.is_finite() {
            return Err(MathError::Domain {
                func: "GaussianLaw::mean",
                value: mean,
                reason: "must be finite",
            });
        }
        if !(variance.is_finite() && variance >= 0.0) {
            return Err(MathError::Domain {
                func: "GaussianLaw::variance",
                value: variance,
                reason: "must be finite and >= 0",
            });
        }
        Ok(Self { mean, variance })
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        let d = x - self.mean;
        -0.5 * (2.0 * PI * self.variance).ln() - 0.5 * d * d / self.variance
    }
}

// Lanczos approximation, g = 7, n = 9 (Godfrey's coefficient set).
const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

pub(crate) fn log_gamma_unchecked(x: f64) -> f64 {
    if x < 0.5 {
        // Γ(x)Γ(1−x) = π / sin(πx); x in (0, 0.5) so sin(πx) > 0.
        return PI.ln() - (PI * x).sin().ln() - log_gamma_unchecked(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS_COEF[0];
    for (i, c) in LANCZOS_COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// `ln Γ(x)` for `x > 0`.
pub fn log_gamma(x: f64) -> Result<f64> {
    require_positive("log_gamma", x)?;
    Ok(log_gamma_unchecked(x))
}

const PSI_SHIFT: f64 = 10.0;

pub(crate) fn digamma_unchecked(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < PSI_SHIFT {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // ψ(x) ~ ln x − 1/(2x) − Σ B_2n / (2n x^2n)
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2
                                * (1.0 / 240.0
                                    - inv2 * (1.0 / 132.0 - inv2 * (691.0 / 32760.0 - inv2 / 12.0))))));
    acc + x.ln() - 0.5 * inv - series
}

/// Digamma ψ(x) = d/dx ln Γ(x) for `x > 0`.
pub fn digamma(x: f64) -> Result<f64> {
    require_positive("digamma", x)?;
    Ok(digamma_unchecked(x))
}

pub(crate) fn trigamma_unchecked(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < PSI_SHIFT {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // ψ'(x) ~ 1/x + 1/(2x²) + Σ B_2n / x^(2n+1)
    let series = inv
        * inv2
        * (1.0 / 6.0
            - inv2
                * (1.0 / 30.0
                    - inv2
                        * (1.0 / 42.0
                            - inv2 * (1.0 / 30.0 - inv2 * (5.0 / 66.0 - inv2 * (691.0 / 2730.0 - inv2 * 7.0 / 6.0))))));
    acc + inv + 0.5 * inv2 + series
}

/// Trigamma ψ'(x); the derivative used when back-propagating through ψ.
pub fn trigamma(x: f64) -> Result<f64> {
    require_positive("trigamma", x)?;
    Ok(trigamma_unchecked(x))
}

/// `KL(p ‖ q)` for two normals:
/// `ln(σ_q/σ_p) + σ_p²/(2σ_q²) − ½ + (μ_p − μ_q)²/(2σ_q²)`.
pub fn kl_gaussian(p: GaussianLaw, q: GaussianLaw) -> Result<f64> {
    require_positive("kl_gaussian(p.variance)", p.variance)?;
    require_positive("kl_gaussian(q.variance)", q.variance)?;
    let d = p.mean - q.mean;
    let kl = 0.5 * (q.variance / p.variance).ln() + (p.variance + d * d) / (2.0 * q.variance) - 0.5;
    Ok(kl.max(0.0))
}

/// `KL(p ‖ q)` for two shape/rate Gamma laws:
///
/// `(a_p − a_q)ψ(a_p) − ln Γ(a_p) + ln Γ(a_q) + a_q ln(b_p/b_q) + a_p (b_q − b_p)/b_p`.
pub fn kl_gamma(p: GammaLaw, q: GammaLaw) -> Result<f64> {
    for (name, v) in [
        ("kl_gamma(p.shape)", p.shape),
        ("kl_gamma(p.rate)", p.rate),
        ("kl_gamma(q.shape)", q.shape),
        ("kl_gamma(q.rate)", q.rate),
    ] {
        require_positive(name, v)?;
    }
    let kl = (p.shape - q.shape) * digamma_unchecked(p.shape) - log_gamma_unchecked(p.shape)
        + log_gamma_unchecked(q.shape)
        + q.shape * (p.rate / q.rate).ln()
        + p.shape * (q.rate - p.rate) / p.rate;
    Ok(kl.max(0.0))
}

/// Location/precision Student-t, `T(y | μ, s, ν)`.
///
/// `precision` is the `s` of the predictive law: the density is
/// `Γ((ν+1)/2)/Γ(ν/2) · (s/(πν))^½ · (1 + s(y−μ)²/ν)^(−(ν+1)/2)`,
/// so the ordinary scale is `1/√s` and for `ν > 2` the variance is
/// `ν/(ν−2) · 1/s`.
pub fn student_t_logpdf(y: f64, mean: f64, precision: f64, dof: f64) -> Result<f64> {
    require_positive("student_t_logpdf(precision)", precision)?;
    require_positive("student_t_logpdf(dof)", dof)?;
    let d = y - mean;
    Ok(log_gamma_unchecked(0.5 * (dof + 1.0)) - log_gamma_unchecked(0.5 * dof)
        + 0.5 * (precision / (PI * dof)).ln()
        - 0.5 * (dof + 1.0) * (precision * d * d / dof).ln_1p())
}

/// Regularized incomplete beta `I_x(a, b)` by Lentz's continued fraction.
pub fn incomplete_beta(x: f64, a: f64, b: f64) -> Result<f64> {
    require_positive("incomplete_beta(a)", a)?;
    require_positive("incomplete_beta(b)", b)?;
    if !(0.0..=1.0).contains(&x) {
        return Err(MathError::Domain {
            func: "incomplete_beta",
            value: x,
            reason: "x must lie in [0, 1]",
        });
    }
    if x == 0.0 || x == 1.0 {
        return Ok(x);
    }
    let ln_front = log_gamma_unchecked(a + b) - log_gamma_unchecked(a) - log_gamma_unchecked(b)
        + a * x.ln()
        + b * (1.0 - x).ln();
    // The fraction converges fast for x < (a+1)/(a+b+2); use symmetry otherwise.
    if x < (a + 1.0) / (a + b + 2.0) {
        Ok(ln_front.exp() * beta_cf(x, a, b) / a)
    } else {
        Ok(1.0 - ln_front.exp() * beta_cf(1.0 - x, b, a) / b)
    }
}

fn beta_cf(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// CDF of the location/precision Student-t (same convention as
/// [`student_t_logpdf`]).
pub fn student_t_cdf(y: f64, mean: f64, precision: f64, dof: f64) -> Result<f64> {
    require_positive("student_t_cdf(precision)", precision)?;
    require_positive("student_t_cdf(dof)", dof)?;
    let z = (y - mean) * precision.sqrt();
    let z2 = z * z;
    if z2 < dof {
        // near the centre: P(|T| < |z|) = I_{z²/(ν+z²)}(1/2, ν/2), which
        // keeps full precision when ν/(ν+z²) would round to 1
        let inner = 0.5 * incomplete_beta(z2 / (dof + z2), 0.5, 0.5 * dof)?;
        return Ok(if z > 0.0 { 0.5 + inner } else { 0.5 - inner });
    }
    let tail = 0.5 * incomplete_beta(dof / (dof + z2), 0.5 * dof, 0.5)?;
    Ok(if z > 0.0 { 1.0 - tail } else { tail })
}

/// Inverse CDF by bracketing and bisection on the standardized variable.
pub fn student_t_quantile(p: f64, mean: f64, precision: f64, dof: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(MathError::Domain {
            func: "student_t_quantile",
            value: p,
            reason: "probability must lie in (0, 1)",
        });
    }
    require_positive("student_t_quantile(precision)", precision)?;
    require_positive("student_t_quantile(dof)", dof)?;
    if p == 0.5 {
        return Ok(mean);
    }
    let cdf = |z: f64| student_t_cdf(z, 0.0, 1.0, dof);
    let (mut lo, mut hi) = (-1.0, 1.0);
    while cdf(lo)? > p {
        lo *= 2.0;
    }
    while cdf(hi)? < p {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid)? < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 * (1.0 + mid.abs()) {
            break;
        }
    }
    Ok(mean + 0.5 * (lo + hi) / precision.sqrt())
}
