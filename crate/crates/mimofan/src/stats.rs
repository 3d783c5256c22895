//! Paired Student t-test.
//!
//! The two-tailed p-value comes from the regularized incomplete beta
//! function, `p = I_{v/(v+t^2)}(v/2, 1/2)` with `v = n - 1` degrees of
//! freedom; the incomplete beta is evaluated with the continued-fraction
//! expansion and a Lanczos log-gamma.
//!
//! ```
//! use mimofan::stats::paired_t_test;
//!
//! let a = [1.0, 0.0, 1.0, 0.0, 1.0];
//! let b = [0.0; 5];
//! let (t, p) = paired_t_test(&a, &b).unwrap();
//! assert!((t - 2.449).abs() < 1e-3);
//! assert!((p - 0.0705).abs() < 1e-3);
//! ```

use crate::error::{Error, Result};

/// Lanczos approximation (g = 7, 9 coefficients), accurate to ~1e-13 for
/// positive arguments.
fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 8] = [
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        // reflection formula
        return std::f64::consts::PI.ln() - (std::f64::consts::PI * x).sin().ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = 0.99999999999980993;
    for (i, &c) in COEFFS.iter().enumerate() {
        acc += c / (x + i as f64 + 1.0);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Continued fraction for the incomplete beta (modified Lentz method).
fn betacf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 200;
    const EPS: f64 = 3e-16;
    const FPMIN: f64 = 1e-300;

    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < FPMIN {
        d = FPMIN;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
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

/// Regularized incomplete beta function `I_x(a, b)`.
pub fn betainc(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let front =
        (ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln()).exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * betacf(a, b, x) / a
    } else {
        1.0 - front * betacf(b, a, 1.0 - x) / b
    }
}

/// Paired two-tailed Student t-test on matched samples. Returns `(t, p)`
/// with `n - 1` degrees of freedom. Errors if the pairwise differences have
/// zero variance (the statistic is undefined there).
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() {
        return Err(Error::Usage(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Usage("paired t-test needs at least 2 pairs".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n as f64 - 1.0);
    if var == 0.0 {
        return Err(Error::DegenerateSample(
            "pairwise differences are all identical".into(),
        ));
    }
    let t = mean / (var / n as f64).sqrt();
    let df = (n - 1) as f64;
    let p = betainc(df / 2.0, 0.5, df / (df + t * t));
    Ok((t, p))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textbook_case() {
        // d = [1,0,1,0,1]: mean 0.6, sample sd sqrt(0.3), t = 2.4495
        let a = [1.0, 0.0, 1.0, 0.0, 1.0];
        let b = [0.0; 5];
        let (t, p) = paired_t_test(&a, &b).unwrap();
        assert!((t - 2.449489742783178).abs() < 1e-9);
        assert!((p - 0.0705).abs() < 1e-3);
    }

    #[test]
    fn identical_samples_are_degenerate() {
        let a = [0.3, 0.5, 0.9];
        assert!(matches!(
            paired_t_test(&a, &a),
            Err(Error::DegenerateSample(_))
        ));
    }

    #[test]
    fn swapping_negates_t_keeps_p() {
        let a = [0.95, 0.97, 0.94, 0.96, 0.99];
        let b = [0.94, 0.95, 0.95, 0.93, 0.96];
        let (t_ab, p_ab) = paired_t_test(&a, &b).unwrap();
        let (t_ba, p_ba) = paired_t_test(&b, &a).unwrap();
        assert!((t_ab + t_ba).abs() < 1e-12);
        assert!((p_ab - p_ba).abs() < 1e-12);
    }

    #[test]
    fn shift_invariance() {
        let a = [0.1, 0.4, 0.2, 0.8];
        let b = [0.0, 0.5, 0.1, 0.6];
        let shifted_a: Vec<f64> = a.iter().map(|v| v + 10.0).collect();
        let shifted_b: Vec<f64> = b.iter().map(|v| v + 10.0).collect();
        let (t1, _) = paired_t_test(&a, &b).unwrap();
        let (t2, _) = paired_t_test(&shifted_a, &shifted_b).unwrap();
        assert!((t1 - t2).abs() < 1e-9);
    }

    #[test]
    fn betainc_endpoints() {
        assert_eq!(betainc(2.0, 0.5, 0.0), 0.0);
        assert_eq!(betainc(2.0, 0.5, 1.0), 1.0);
        // I_x(1,1) = x
        assert!((betainc(1.0, 1.0, 0.3) - 0.3).abs() < 1e-12);
    }
}
