use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};

/// Paired t statistic on `a - b` with its two-sided p-value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: usize,
    /// Set when every difference is the same nonzero value: `t` is ±∞ and
    /// `p` is 0.
    pub infinite: bool,
}

impl TTest {
    pub fn significant(&self, level: f64) -> bool {
        self.p <= level
    }
}

/// Two-sided tail probability `P(|T| ≥ |t|)` for Student's t with `df`
/// degrees of freedom, via the regularized incomplete beta function.
pub fn t_two_sided_p(t: f64, df: usize) -> f64 {
    assert!(df >= 1, "df must be >= 1");
    if t.is_infinite() {
        return 0.0;
    }
    let nu = df as f64;
    let x = nu / (nu + t * t);
    beta_reg(nu / 2.0, 0.5, x).clamp(0.0, 1.0)
}

pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Degenerate(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Degenerate(format!(
            "paired t-test needs n >= 2, got {n}"
        )));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let df = n - 1;
    if var == 0.0 {
        if mean == 0.0 {
            return Err(Error::Degenerate("all paired differences are zero".into()));
        }
        return Ok(TTest {
            t: mean.signum() * f64::INFINITY,
            p: 0.0,
            df,
            infinite: true,
        });
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    Ok(TTest {
        t,
        p: t_two_sided_p(t, df),
        df,
        infinite: false,
    })
}
