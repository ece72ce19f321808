//! Descriptive statistics and the two-tailed paired t-test.

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StatsError {
    #[error("paired samples differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("paired t-test needs at least 2 pairs, got {0}")]
    TooFewPairs(usize),
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn all_equal(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[0] == w[1])
}

/// Standard deviation dividing by n. Exactly zero for constant input, where
/// rounding in the mean would otherwise leave a residue.
pub fn population_std(xs: &[f64]) -> f64 {
    if !xs.is_empty() && all_equal(xs) {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Standard deviation dividing by n − 1; exactly zero for constant input.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() > 1 && all_equal(xs) {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)).sqrt()
}

/// Two-tailed tail probability `P(|T| >= |t|)` of Student's t with `df`
/// degrees of freedom, via the regularized incomplete beta function.
pub fn student_t_two_tailed(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    let x = df / (df + t * t);
    beta_reg(df / 2.0, 0.5, x).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: usize,
    /// Differences had zero variance; `p` follows the fixed convention
    /// (1.0 for zero mean, 0.0 otherwise) instead of the t distribution.
    pub degenerate: bool,
}

/// Two-tailed paired t-test on positionally paired samples.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTest, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return Err(StatsError::TooFewPairs(n));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let df = n - 1;
    let md = mean(&d);
    let sd = sample_std(&d);
    if sd == 0.0 {
        return Ok(if md == 0.0 {
            TTest {
                t: 0.0,
                p: 1.0,
                df,
                degenerate: true,
            }
        } else {
            TTest {
                t: md.signum() * f64::INFINITY,
                p: 0.0,
                df,
                degenerate: true,
            }
        });
    }
    let t = md / (sd / (n as f64).sqrt());
    Ok(TTest {
        t,
        p: student_t_two_tailed(t, df as f64),
        df,
        degenerate: false,
    })
}
