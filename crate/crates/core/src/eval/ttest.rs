//! Two-sided t-tests with p-values from the regularized incomplete beta
//! function (continued fraction, Lentz's method).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TTestError {
    #[error("each sample needs at least 2 observations, got {0}")]
    Undersized(usize),
    #[error("samples must be the same length for a paired test ({0} vs {1})")]
    UnpairedLengths(usize, usize),
}

/// Outcome of a two-sided test at the 0.05 level.
#[derive(Debug, Clone, PartialEq)]
pub struct SignificanceResult {
    pub mean_a: f64,
    pub mean_b: f64,
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
    pub significant: bool,
}

impl SignificanceResult {
    fn from_t(mean_a: f64, mean_b: f64, t: f64, df: f64) -> Self {
        let p_value = two_sided_p(t, df);
        SignificanceResult { mean_a, mean_b, t, df, p_value, significant: p_value <= 0.05 }
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_var(xs: &[f64], m: f64) -> f64 {
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Welch's unequal-variance t-test with Welch-Satterthwaite degrees of
/// freedom. Two zero-variance samples with equal means give p = 1 by
/// convention; with different means, p = 0.
pub fn t_test_two_sided(a: &[f64], b: &[f64]) -> Result<SignificanceResult, TTestError> {
    if a.len() < 2 {
        return Err(TTestError::Undersized(a.len()));
    }
    if b.len() < 2 {
        return Err(TTestError::Undersized(b.len()));
    }
    let (ma, mb) = (mean(a), mean(b));
    let (va, vb) = (sample_var(a, ma), sample_var(b, mb));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let se2 = va / na + vb / nb;
    if se2 == 0.0 {
        let p = if ma == mb { 1.0 } else { 0.0 };
        return Ok(SignificanceResult {
            mean_a: ma,
            mean_b: mb,
            t: if ma == mb { 0.0 } else { f64::INFINITY * (ma - mb).signum() },
            df: na + nb - 2.0,
            p_value: p,
            significant: p <= 0.05,
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    Ok(SignificanceResult::from_t(ma, mb, t, df))
}

/// Paired two-sided t-test: one-sample t on the per-instance differences,
/// df = n - 1.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<SignificanceResult, TTestError> {
    if a.len() != b.len() {
        return Err(TTestError::UnpairedLengths(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(TTestError::Undersized(a.len()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let md = mean(&diffs);
    let vd = sample_var(&diffs, md);
    let n = diffs.len() as f64;
    let (ma, mb) = (mean(a), mean(b));
    if vd == 0.0 {
        let p = if md == 0.0 { 1.0 } else { 0.0 };
        return Ok(SignificanceResult {
            mean_a: ma,
            mean_b: mb,
            t: if md == 0.0 { 0.0 } else { f64::INFINITY * md.signum() },
            df: n - 1.0,
            p_value: p,
            significant: p <= 0.05,
        });
    }
    let t = md / (vd / n).sqrt();
    Ok(SignificanceResult::from_t(ma, mb, t, n - 1.0))
}

/// `P(|T_df| >= |t|)` via the survival identity
/// `p = I_{df/(df+t^2)}(df/2, 1/2)`.
pub fn two_sided_p(t: f64, df: f64) -> f64 {
    if !t.is_finite() {
        return 0.0;
    }
    if t == 0.0 {
        return 1.0;
    }
    let x = df / (df + t * t);
    reg_inc_beta(df / 2.0, 0.5, x).clamp(0.0, 1.0)
}

/// Regularized incomplete beta `I_x(a, b)`, accurate to about 1e-12.
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    assert!(a > 0.0 && b > 0.0, "beta parameters must be positive");
    assert!((0.0..=1.0).contains(&x), "x in [0, 1]");
    if x == 0.0 {
        return 0.0;
    }
    if x == 1.0 {
        return 1.0;
    }
    let ln_prefactor = a * x.ln() + b * (1.0 - x).ln() - ln_beta(a, b);
    // The continued fraction converges fast for x < (a + 1) / (a + b + 2);
    // otherwise use the symmetry I_x(a,b) = 1 - I_{1-x}(b,a).
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_prefactor.exp() * beta_cf(a, b, x) / a
    } else {
        let ln_sym = b * (1.0 - x).ln() + a * x.ln() - ln_beta(b, a);
        1.0 - ln_sym.exp() * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Continued fraction for the incomplete beta (Lentz's algorithm).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 1e-15;
    const TINY: f64 = 1e-300;

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
    for m in 1..=MAX_ITER {
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
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Lanczos approximation (g = 7, n = 9), |error| < 1e-13 on the reals we use.
fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection
        return std::f64::consts::PI.ln() - (std::f64::consts::PI * x).sin().ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEFFS[0];
    for (i, &c) in COEFFS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}
