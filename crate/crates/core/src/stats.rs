//! Scalar-sequence statistics used by the cohort evaluation: Pearson
//! correlation and Welch's unequal-variance t-test reported as -log10(p).
//!
//! The p-value comes from the regularized incomplete beta function,
//! evaluated in log space so extreme group separations do not underflow.

use crate::error::{Error, Result};

/// Pearson correlation coefficient, serial f64 accumulation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Dim(format!("sequence lengths {} vs {}", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::Domain(format!("pearson needs >= 3 points, got {}", x.len())));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (a, b) in x.iter().zip(y) {
        let dx = a - mx;
        let dy = b - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Domain("zero variance in pearson input".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Two-sided Welch t-test between two groups, returned as -log10(p).
///
/// Each group needs at least two elements. The test degenerates only when
/// both groups are constant (zero pooled standard error); a single constant
/// group is accepted so that an all-zero proxy group can still be compared
/// against a varying one.
pub fn welch_neglog_p(group_a: &[f64], group_b: &[f64]) -> Result<f64> {
    if group_a.len() < 2 || group_b.len() < 2 {
        return Err(Error::Domain(format!(
            "welch needs >= 2 per group, got {} and {}",
            group_a.len(),
            group_b.len()
        )));
    }
    let (m1, v1) = mean_var(group_a);
    let (m2, v2) = mean_var(group_b);
    let n1 = group_a.len() as f64;
    let n2 = group_b.len() as f64;
    let se1 = v1 / n1;
    let se2 = v2 / n2;
    let se_sq = se1 + se2;
    if se_sq == 0.0 {
        return Err(Error::Domain("both groups are constant; t statistic undefined".into()));
    }
    let t = (m1 - m2) / se_sq.sqrt();
    if t == 0.0 {
        return Ok(0.0);
    }
    // Welch-Satterthwaite degrees of freedom.
    let df = se_sq * se_sq / (se1 * se1 / (n1 - 1.0) + se2 * se2 / (n2 - 1.0));
    let x = df / (df + t * t);
    let ln_p = ln_reg_inc_beta(0.5 * df, 0.5, x)?;
    Ok((-ln_p / std::f64::consts::LN_10).max(0.0))
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let ss = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>();
    (mean, ss / (n - 1.0))
}

// Lanczos approximation, g = 7, 9 coefficients.
fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 8] = [
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
        // Reflection formula.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = 0.99999999999980993;
    for (i, c) in COEF.iter().enumerate() {
        acc += c / (x + i as f64 + 1.0);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

// Continued fraction for the incomplete beta function (modified Lentz).
fn betacf(a: f64, b: f64, x: f64) -> Result<f64> {
    const MAX_ITER: usize = 400;
    const EPS: f64 = 3.0e-16;
    const FPMIN: f64 = 1.0e-300;

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
        let mf = m as f64;
        let m2 = 2.0 * mf;
        let aa = mf * (b - mf) * x / ((qam + m2) * (a + m2));
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
        let aa = -(a + mf) * (qab + mf) * x / ((a + m2) * (qap + m2));
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
            return Ok(h);
        }
    }
    Err(Error::Numeric(format!("incomplete beta did not converge (a={a}, b={b}, x={x})")))
}

/// ln of the regularized incomplete beta I_x(a, b).
fn ln_reg_inc_beta(a: f64, b: f64, x: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::Domain(format!("incomplete beta x={x} outside [0, 1]")));
    }
    if x == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    if x == 1.0 {
        return Ok(0.0);
    }
    let ln_front =
        ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        Ok(ln_front + (betacf(a, b, x)? / a).ln())
    } else {
        let tail = (ln_front + (betacf(b, a, 1.0 - x)? / b).ln()).exp();
        Ok((1.0 - tail).ln())
    }
}
