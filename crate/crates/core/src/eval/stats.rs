use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use super::EvalError;

/// A two-sided test outcome. `statistic > 0` means the first group is
/// larger.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
}

impl TestResult {
    /// First group significantly greater at `alpha`.
    pub fn greater_at(&self, alpha: f64) -> bool {
        self.statistic > 0.0 && self.p_value < alpha
    }
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Degenerate case shared by both tests: no spread at all.
fn no_spread(diff: f64) -> TestResult {
    if diff == 0.0 {
        TestResult {
            statistic: 0.0,
            p_value: 1.0,
        }
    } else {
        TestResult {
            statistic: diff.signum() * f64::INFINITY,
            p_value: 0.0,
        }
    }
}

/// Welch's unequal-variance t-test.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<TestResult, EvalError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(EvalError::InsufficientSamples {
            left: a.len(),
            right: b.len(),
        });
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = sa + sb;
    if se2 == 0.0 {
        return Ok(no_spread(ma - mb));
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    Ok(TestResult {
        statistic: t,
        p_value: (2.0 * dist.sf(t.abs())).min(1.0),
    })
}

/// Pooled two-proportion z-test of `x1/n1` against `x2/n2`.
pub fn two_proportion_z_test(x1: usize, n1: usize, x2: usize, n2: usize) -> Result<TestResult, EvalError> {
    if n1 < 2 || n2 < 2 {
        return Err(EvalError::InsufficientSamples { left: n1, right: n2 });
    }
    if x1 > n1 || x2 > n2 {
        return Err(EvalError::InvalidArgument("successes exceed trials".into()));
    }
    two_proportion_z_rates(x1 as f64 / n1 as f64, n1, x2 as f64 / n2 as f64, n2)
}

/// Pooled two-proportion z-test on observed rates. Lets a rate be compared
/// against a reference proportion such as an even split over the same
/// number of trials.
pub fn two_proportion_z_rates(p1: f64, n1: usize, p2: f64, n2: usize) -> Result<TestResult, EvalError> {
    if n1 < 2 || n2 < 2 {
        return Err(EvalError::InsufficientSamples { left: n1, right: n2 });
    }
    if !(0.0..=1.0).contains(&p1) || !(0.0..=1.0).contains(&p2) {
        return Err(EvalError::InvalidArgument("proportions must lie in [0, 1]".into()));
    }
    let pooled = (p1 * n1 as f64 + p2 * n2 as f64) / (n1 + n2) as f64;
    let se = (pooled * (1.0 - pooled) * (1.0 / n1 as f64 + 1.0 / n2 as f64)).sqrt();
    if se == 0.0 {
        return Ok(no_spread(p1 - p2));
    }
    let z = (p1 - p2) / se;
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(TestResult {
        statistic: z,
        p_value: (2.0 * normal.sf(z.abs())).min(1.0),
    })
}
