//! Closed-form maximum likelihood for increasing concave three-point data.
//!
//! When the means are increasing and concave there is a unique Emax curve
//! through all three points, and it is the MLE. In the frame shifted by the
//! lowest dose:
//!
//! ```text
//! t0 = y1
//! t1 = m1 m2 / (m1 - m2) * (x3 - x2)
//! t2 = (y3 - y2) / (m1 - m2)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{eta, from_tilde, EmaxParams, TildeParams};
use crate::shape::{classify, LimitingFit, ShapeClass, SufficientStats};

/// Outcome of an estimation attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FitResult {
    ExactMle { params: EmaxParams, tilde: TildeParams },
    NoMle { class: ShapeClass, limit: LimitingFit },
    FirthEstimate { params: EmaxParams, score_norm: f64, iterations: usize },
    FirthFailure { reason: String },
}

impl FitResult {
    pub fn params(&self) -> Option<&EmaxParams> {
        match self {
            FitResult::ExactMle { params, .. } | FitResult::FirthEstimate { params, .. } => Some(params),
            _ => None,
        }
    }

    pub fn is_estimate(&self) -> bool {
        self.params().is_some()
    }
}

/// Relative gap below which `m1 - m2` is treated as a collinear boundary.
const SLOPE_GAP: f64 = 1e-12;

fn checked_slopes(s: &SufficientStats) -> Result<(f64, f64)> {
    let c = classify(s);
    if c.class != ShapeClass::IncreasingConcave {
        return Err(Error::MleDoesNotExist);
    }
    let (m1, m2) = (c.stats.m1, c.stats.m2);
    if m1 - m2 < SLOPE_GAP * m1.abs() {
        return Err(Error::NearDegenerate(format!(
            "chord slopes m1 = {m1} and m2 = {m2} are numerically equal; the best fit is a straight line"
        )));
    }
    Ok((m1, m2))
}

/// MLE in the frame `x - x1`.
pub fn mle_tilde(s: &SufficientStats) -> Result<TildeParams> {
    let (m1, m2) = checked_slopes(s)?;
    let [_, x2, x3] = s.doses;
    let [y1, y2, y3] = s.means;
    let gap = m1 - m2;
    Ok(TildeParams::new(y1, m1 * m2 / gap * (x3 - x2), (y3 - y2) / gap))
}

/// MLE in the original parametrization, mapped back from the shifted frame.
pub fn mle(s: &SufficientStats) -> Result<EmaxParams> {
    from_tilde(&mle_tilde(s)?, s.doses[0])
}

/// MLE in the original parametrization from the explicit formulas with `a = x1`, `b = x3`.
pub fn mle_direct(s: &SufficientStats) -> Result<EmaxParams> {
    let (m1, m2) = checked_slopes(s)?;
    let [a, x2, b] = s.doses;
    let [y1, y2, y3] = s.means;
    let gap = m1 - m2;
    let correction = a * m1 * m2 * (b - x2) / ((y3 - y2) - a * gap);
    Ok(EmaxParams::new(y1 - correction, m1 * m2 / gap * (b - x2) + correction, (y3 - y2) / gap - a))
}

/// Largest absolute residual of `p` at the three design points.
pub fn interpolation_check(s: &SufficientStats, p: &EmaxParams) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        worst = worst.max((s.means[i] - eta(s.doses[i], p)?).abs());
    }
    Ok(worst)
}

/// Maximum likelihood estimate of the noise variance from within-dose spread,
/// `(1/n) sum_i sum_j (y_ij - ybar_i)^2`.
///
/// Returns `None` when no dose has replicates.
pub fn sigma2_hat(raw: &[(f64, Vec<f64>)]) -> Option<f64> {
    let mut ss = 0.0;
    let mut n = 0usize;
    let mut replicated = false;
    for (_, ys) in raw {
        if ys.is_empty() {
            continue;
        }
        let mean = ys.iter().sum::<f64>() / ys.len() as f64;
        ss += ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>();
        n += ys.len();
        replicated |= ys.len() > 1;
    }
    (replicated && ss > 0.0).then(|| ss / n as f64)
}

/// Exact MLE when it exists, otherwise the limiting best fit.
pub fn fit_or_limit(s: &SufficientStats) -> Result<FitResult> {
    let c = classify(s);
    if c.class == ShapeClass::IncreasingConcave {
        let tilde = mle_tilde(s)?;
        let params = from_tilde(&tilde, s.doses[0])?;
        return Ok(FitResult::ExactMle { params, tilde });
    }
    let limit = crate::shape::limiting_fit(s, &c)?;
    Ok(FitResult::NoMle { class: c.class, limit })
}
