//! Paired two-sided t-test with a 95% confidence interval.

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub mean_diff: f64,
    /// Differences had zero variance, so `t` is 0 or infinite by convention.
    pub degenerate: bool,
}

/// Two-sided paired t-test on `a - b`.
///
/// Zero-variance differences follow fixed conventions: all zero gives
/// `t = 0, p = 1` and a `[0, 0]` interval; a non-zero constant gives an
/// infinite `t`, `p = 0` and a point interval at the mean.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Statistics(format!("length mismatch: {} vs {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Statistics(format!("need at least 2 pairs, got {n}")));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let nf = n as f64;
    let mean = d.iter().sum::<f64>() / nf;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let se = (var / nf).sqrt();
    if se == 0.0 {
        let t = if mean == 0.0 { 0.0 } else { f64::INFINITY.copysign(mean) };
        return Ok(TTest {
            t,
            p: if mean == 0.0 { 1.0 } else { 0.0 },
            ci_low: mean,
            ci_high: mean,
            mean_diff: mean,
            degenerate: true,
        });
    }
    let dist = StudentsT::new(0.0, 1.0, nf - 1.0).map_err(|e| Error::Statistics(e.to_string()))?;
    let t = mean / se;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    let q = dist.inverse_cdf(0.975);
    Ok(TTest {
        t,
        p,
        ci_low: mean - q * se,
        ci_high: mean + q * se,
        mean_diff: mean,
        degenerate: false,
    })
}
