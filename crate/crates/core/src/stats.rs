//! Deterministic statistics kernel shared by the analysis modules.
//!
//! Every reduction goes through [`CompensatedSum`] so results do not depend on
//! accumulation error that differs between platforms. p-values come from the
//! Student-t distribution evaluated through the regularized incomplete beta
//! function.

use serde::Serialize;
use thiserror::Error;

/// p-values below this are reported as exactly zero with `p_clamped` set.
pub const P_UNDERFLOW: f64 = 1e-300;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("series lengths differ ({x} vs {y})")]
    LengthMismatch { x: usize, y: usize },
    #[error("need at least {needed} observations, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("zero variance in {0} series")]
    ZeroVariance(&'static str),
    #[error("degrees of freedom must be >= 1, got {0}")]
    InvalidDf(f64),
    #[error("non-finite value in input")]
    NonFinite,
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, value: f64) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.comp += (self.sum - t) + value;
        } else {
            self.comp += (value - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn total(&self) -> f64 {
        self.sum + self.comp
    }
}

impl<'a> FromIterator<&'a f64> for CompensatedSum {
    fn from_iter<T: IntoIterator<Item = &'a f64>>(iter: T) -> Self {
        iter.into_iter().copied().collect()
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = CompensatedSum::new();
        for v in iter {
            acc.add(v);
        }
        acc
    }
}

/// Compensated sum of a slice.
pub fn sum(values: &[f64]) -> f64 {
    values.iter().copied().collect::<CompensatedSum>().total()
}

/// Arithmetic mean; `None` for an empty slice.
pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(sum(values) / values.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CorrelationResult {
    pub r: f64,
    /// Two-sided p-value for r != 0.
    pub p: f64,
    pub n: usize,
    /// Set when the exact p-value fell below [`P_UNDERFLOW`].
    pub p_clamped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OlsResult {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Two-sided p-value for slope != 0. `None` when the response is constant,
    /// which leaves the test undefined.
    pub p_slope: Option<f64>,
    pub n: usize,
    pub p_clamped: bool,
}

struct Moments {
    n: usize,
    mean_x: f64,
    mean_y: f64,
    sxx: f64,
    syy: f64,
    sxy: f64,
}

fn check_pair(x: &[f64], y: &[f64], min_n: usize) -> Result<(), StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch {
            x: x.len(),
            y: y.len(),
        });
    }
    if x.len() < min_n {
        return Err(StatsError::TooFew {
            needed: min_n,
            got: x.len(),
        });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    Ok(())
}

fn is_constant(values: &[f64]) -> bool {
    values.iter().all(|&v| v == values[0])
}

fn moments(x: &[f64], y: &[f64]) -> Moments {
    let n = x.len();
    let mean_x = sum(x) / n as f64;
    let mean_y = sum(y) / n as f64;
    let mut sxx = CompensatedSum::new();
    let mut syy = CompensatedSum::new();
    let mut sxy = CompensatedSum::new();
    for (&a, &b) in x.iter().zip(y) {
        let dx = a - mean_x;
        let dy = b - mean_y;
        sxx.add(dx * dx);
        syy.add(dy * dy);
        sxy.add(dx * dy);
    }
    Moments {
        n,
        mean_x,
        mean_y,
        sxx: sxx.total(),
        syy: syy.total(),
        sxy: sxy.total(),
    }
}

fn clamp_p(p: f64) -> (f64, bool) {
    if p < P_UNDERFLOW {
        (0.0, p > 0.0)
    } else {
        (p.min(1.0), false)
    }
}

/// Two-sided p-value of a correlation coefficient with `n - 2` degrees of freedom.
fn correlation_p(r: f64, n: usize) -> f64 {
    let df = (n - 2) as f64;
    let one_minus = 1.0 - r * r;
    if one_minus <= 0.0 {
        return 0.0;
    }
    let t = r * (df / one_minus).sqrt();
    // df >= 1 is guaranteed by the n >= 3 precondition.
    student_t_sf(t, df).unwrap_or(0.0)
}

/// Sample Pearson correlation with a two-sided t-test p-value.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<CorrelationResult, StatsError> {
    check_pair(x, y, 3)?;
    if is_constant(x) {
        return Err(StatsError::ZeroVariance("x"));
    }
    if is_constant(y) {
        return Err(StatsError::ZeroVariance("y"));
    }
    let m = moments(x, y);
    if m.sxx <= 0.0 {
        return Err(StatsError::ZeroVariance("x"));
    }
    if m.syy <= 0.0 {
        return Err(StatsError::ZeroVariance("y"));
    }
    let r = (m.sxy / (m.sxx.sqrt() * m.syy.sqrt())).clamp(-1.0, 1.0);
    let (p, p_clamped) = clamp_p(correlation_p(r, m.n));
    Ok(CorrelationResult {
        r,
        p,
        n: m.n,
        p_clamped,
    })
}

/// Simple least-squares regression of `y` on `x`.
pub fn ols(x: &[f64], y: &[f64]) -> Result<OlsResult, StatsError> {
    check_pair(x, y, 3)?;
    if is_constant(x) {
        return Err(StatsError::ZeroVariance("x"));
    }
    let m = moments(x, y);
    if m.sxx <= 0.0 {
        return Err(StatsError::ZeroVariance("x"));
    }
    if is_constant(y) {
        return Ok(OlsResult {
            slope: 0.0,
            intercept: y[0],
            r_squared: 0.0,
            p_slope: None,
            n: m.n,
            p_clamped: false,
        });
    }
    let slope = m.sxy / m.sxx;
    let intercept = m.mean_y - slope * m.mean_x;
    let r_squared = ((m.sxy * m.sxy) / (m.sxx * m.syy)).clamp(0.0, 1.0);
    let sse: CompensatedSum = x
        .iter()
        .zip(y)
        .map(|(&a, &b)| {
            let e = b - (intercept + slope * a);
            e * e
        })
        .collect();
    let sse = sse.total();
    let df = (m.n - 2) as f64;
    let p = if sse <= 0.0 {
        0.0
    } else {
        let se = (sse / df / m.sxx).sqrt();
        student_t_sf(slope / se, df).unwrap_or(0.0)
    };
    let (p, p_clamped) = clamp_p(p);
    Ok(OlsResult {
        slope,
        intercept,
        r_squared,
        p_slope: Some(p),
        n: m.n,
        p_clamped,
    })
}

/// Mid-rank assignment (1-based), ties share the average of their positions.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            out[idx] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (Pearson r of mid-ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    check_pair(x, y, 3)?;
    Ok(pearson(&ranks(x), &ranks(y))?.r)
}

/// Two-sided survival probability `P(|T| >= |t|)` for Student's t with `df`
/// degrees of freedom.
pub fn student_t_sf(t: f64, df: f64) -> Result<f64, StatsError> {
    if df.is_nan() || df < 1.0 {
        return Err(StatsError::InvalidDf(df));
    }
    if t.is_nan() {
        return Err(StatsError::NonFinite);
    }
    if t.is_infinite() {
        return Ok(0.0);
    }
    if t == 0.0 {
        return Ok(1.0);
    }
    let t2 = t * t;
    // I_x(df/2, 1/2) with x = df / (df + t^2); the complement is formed
    // directly so neither tail loses precision to cancellation.
    let denom = df + t2;
    let x = df / denom;
    let x_complement = t2 / denom;
    Ok(incomplete_beta_split(x, x_complement, 0.5 * df, 0.5).clamp(0.0, 1.0))
}

/// Natural log of the gamma function for `z > 0` (Lanczos, g = 7, n = 9).
pub fn ln_gamma(z: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
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
    if z < 0.5 {
        // Reflection keeps the series in its accurate range.
        let pi = std::f64::consts::PI;
        return (pi / (pi * z).sin()).ln() - ln_gamma(1.0 - z);
    }
    let z = z - 1.0;
    let mut acc = COEF[0];
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        acc += c / (z + i as f64);
    }
    let t = z + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (z + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized incomplete beta function `I_x(a, b)`.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if !(0.0..=1.0).contains(&x) || a <= 0.0 || b <= 0.0 {
        return f64::NAN;
    }
    incomplete_beta_split(x, 1.0 - x, a, b)
}

fn incomplete_beta_split(x: f64, x_complement: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x_complement <= 0.0 {
        return 1.0;
    }
    if x > (a + 1.0) / (a + b + 2.0) {
        return 1.0 - incomplete_beta_split(x_complement, x, b, a);
    }
    let ln_front =
        a * x.ln() + b * x_complement.ln() - (ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b));
    ln_front.exp() * beta_continued_fraction(x, a, b) / a
}

/// Continued fraction for the incomplete beta, modified Lentz evaluation.
fn beta_continued_fraction(x: f64, a: f64, b: f64) -> f64 {
    const MAX_ITER: usize = 10_000;
    const EPS: f64 = 1e-16;
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

/// Standard normal CDF, through `erfc(x) = Q(1/2, x^2)` so the lower tail keeps
/// relative precision.
pub fn normal_cdf(z: f64) -> f64 {
    if z.is_nan() {
        return f64::NAN;
    }
    let x = z / std::f64::consts::SQRT_2;
    if x < 0.0 {
        0.5 * upper_incomplete_gamma(0.5, x * x)
    } else {
        1.0 - 0.5 * upper_incomplete_gamma(0.5, x * x)
    }
}

/// Regularized upper incomplete gamma `Q(a, x)` for `a > 0`, `x >= 0`.
fn upper_incomplete_gamma(a: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 10_000;
    const EPS: f64 = 1e-16;
    const TINY: f64 = 1e-300;
    if x <= 0.0 {
        return 1.0;
    }
    if x.is_infinite() {
        return 0.0;
    }
    let ln_front = a * x.ln() - x - ln_gamma(a);
    if x < a + 1.0 {
        let mut term = 1.0 / a;
        let mut total = term;
        for n in 1..MAX_ITER {
            term *= x / (a + n as f64);
            total += term;
            if term.abs() < total.abs() * EPS {
                break;
            }
        }
        return 1.0 - total * ln_front.exp();
    }
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
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
    ln_front.exp() * h
}

#[cfg(test)]
mod tests {
    use super::*;

    /// High-precision two-sided values `(t, df, p)` computed with 40-digit
    /// arithmetic on the incomplete beta representation.
    #[allow(clippy::excessive_precision)]
    const T_TABLE: &[(f64, f64, f64)] = &[
        (0.0, 1.0, 1.0),
        (0.5, 1.0, 0.704_832_764_699_133_45),
        (1.0, 1.0, 0.5),
        (3.0, 1.0, 0.204_832_764_699_133_45),
        (100.0, 1.0, 0.006_365_985_529_816_510_3),
        (0.25, 2.0, 0.825_922_344_044_302_16),
        (1.5, 3.0, 0.230_583_865_244_823_05),
        (2.086, 20.0, 0.049_996_354_457_440_225),
        (2.0, 5.0, 0.101_939_478_829_858_36),
        (2.5, 10.0, 0.031_446_844_236_608_804),
        (1.0, 30.0, 0.325_308_615_426_029_89),
        (4.0, 7.0, 0.005_189_913_349_296_811_6),
        (6.0, 50.0, 2.188_939_485_079_992_7e-7),
        (10.0, 4.0, 0.000_562_003_622_715_991_16),
        (0.1, 200.0, 0.920_444_492_504_321_04),
        (3.3, 1000.0, 0.001_000_996_725_002_09),
        (8.0, 3.0, 0.004_076_577_587_785_468_2),
        (20.0, 12.0, 1.394_788_599_251_148e-10),
        (1.96, 100_000.0, 0.049_998_563_194_301_638),
        (0.7, 2.5, 0.543_404_943_189_548_08),
    ];

    #[test]
    fn t_sf_matches_high_precision_table() {
        for &(t, df, expected) in T_TABLE {
            let got = student_t_sf(t, df).unwrap();
            assert!(
                (got - expected).abs() <= 1e-10,
                "t={t} df={df}: got {got}, expected {expected}"
            );
            assert_eq!(got, student_t_sf(-t, df).unwrap());
        }
    }

    #[test]
    fn t_sf_limits_and_errors() {
        assert_eq!(student_t_sf(0.0, 17.0).unwrap(), 1.0);
        assert_eq!(student_t_sf(f64::INFINITY, 3.0).unwrap(), 0.0);
        assert!(student_t_sf(1e8, 3.0).unwrap() < 1e-20);
        assert_eq!(student_t_sf(1.0, 0.5), Err(StatsError::InvalidDf(0.5)));
        assert!(student_t_sf(f64::NAN, 3.0).is_err());
    }

    #[test]
    fn t_sf_reference_quantile() {
        let p = student_t_sf(2.086, 20.0).unwrap();
        assert!((p - 0.05).abs() <= 5e-4);
    }

    #[test]
    fn ln_gamma_known_values() {
        assert!((ln_gamma(1.0)).abs() < 1e-14);
        assert!((ln_gamma(5.0) - 24f64.ln()).abs() < 1e-13);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-14);
    }

    #[test]
    fn pearson_exact_lines() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let c = pearson(&x, &y).unwrap();
        assert!((c.r - 1.0).abs() < 1e-15);
        assert!(c.p < 1e-10);

        let c = pearson(&[1.0, 2.0, 3.0], &[6.0, 4.0, 2.0]).unwrap();
        assert!((c.r + 1.0).abs() < 1e-15);
    }

    #[test]
    fn pearson_errors() {
        assert_eq!(
            pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(StatsError::ZeroVariance("x"))
        );
        assert_eq!(
            pearson(&[1.0, 2.0, 3.0], &[0.3, 0.3, 0.3]),
            Err(StatsError::ZeroVariance("y"))
        );
        assert!(matches!(
            pearson(&[1.0, 2.0], &[1.0, 2.0]),
            Err(StatsError::TooFew { .. })
        ));
        assert!(matches!(
            pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0]),
            Err(StatsError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn ols_exact_and_flat() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y: Vec<f64> = x.iter().map(|v| -1.048 * v + 3.0).collect();
        let fit = ols(&x, &y).unwrap();
        assert!((fit.slope + 1.048).abs() < 1e-12);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);

        let fit = ols(&x, &[2.0; 5]).unwrap();
        assert_eq!(fit.slope, 0.0);
        assert_eq!(fit.r_squared, 0.0);
        assert_eq!(fit.p_slope, None);

        let fit = ols(&x, &x).unwrap();
        assert_eq!(fit.slope, 1.0);
        assert_eq!(fit.r_squared, 1.0);
    }

    #[test]
    fn spearman_monotone_and_ties() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&x, &[1.0, 4.0, 9.0, 16.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&x, &[4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let mut values = vec![1e16, 1.0, -1e16];
        values.extend(std::iter::repeat_n(1e-3, 1000));
        assert!((sum(&values) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn normal_cdf_matches_reference_and_independent_route() {
        assert!((normal_cdf(1.96) - 0.975_002_104_851_780_1).abs() < 1e-15);
        assert_eq!(normal_cdf(0.0), 0.5);
        assert!((normal_cdf(-8.0) / 6.220_960_574_271_784e-16 - 1.0).abs() < 1e-12);
        // 30-digit reference values.
        for (z, want) in [
            (-3.66, 1.261_076_241_384_866_7e-4),
            (-3.0, 1.349_898_031_630_094_5e-3),
            (-2.0, 2.275_013_194_817_921e-2),
            (-1.0, 0.158_655_253_931_457_05),
            (2.5, 0.993_790_334_674_223_8),
            (5.0, 0.999_999_713_348_428_1),
        ] {
            assert!((normal_cdf(z) / want - 1.0).abs() < 1e-14, "z = {z}");
        }
        // statrs goes through a different erf approximation, good to ~1e-11.
        use statrs::distribution::{ContinuousCDF, Normal};
        let oracle = Normal::new(0.0, 1.0).unwrap();
        for k in -600..=600 {
            let z = f64::from(k) * 0.01;
            assert!((normal_cdf(z) - oracle.cdf(z)).abs() < 1e-9, "z = {z}");
        }
    }
}
