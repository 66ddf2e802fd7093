//! Summary statistics for experiment reports.

use serde::{Deserialize, Serialize};

use super::HarnessError;

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Unbiased sample variance; 0 for fewer than two values.
pub fn sample_variance(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() - 1) as f64
}

/// Sample Pearson correlation. `NaN` when either side has zero variance.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64, HarnessError> {
    if x.len() != y.len() {
        return Err(HarnessError::Usage(format!(
            "pearson_r needs equal lengths, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(HarnessError::Usage("pearson_r needs at least two points".into()));
    }
    let (mx, my) = (mean(x), mean(y));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(f64::NAN);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchT {
    pub t: f64,
    pub dof: f64,
}

/// Welch's unequal-variance t statistic for `mean(a) - mean(b)`, with
/// Welch-Satterthwaite degrees of freedom.
///
/// When both samples have zero variance the statistic is 0 for equal means
/// and infinite otherwise, and `dof` falls back to `n_a + n_b - 2`.
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<WelchT, HarnessError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(HarnessError::Usage(format!(
            "welch_t needs at least two values per sample, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let diff = mean(a) - mean(b);
    let qa = sample_variance(a) / na;
    let qb = sample_variance(b) / nb;
    let se2 = qa + qb;
    if se2 == 0.0 {
        let t = if diff == 0.0 { 0.0 } else { diff.signum() * f64::INFINITY };
        return Ok(WelchT { t, dof: na + nb - 2.0 });
    }
    let t = if diff == 0.0 { 0.0 } else { diff / se2.sqrt() };
    let dof = se2 * se2 / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0));
    Ok(WelchT { t, dof })
}
