//! The Emax mean function, its parametrizations, and locally D-optimal designs.
//!
//! The mean response is `eta(x) = theta0 + theta1 * x / (x + theta2)` on a dose
//! domain `[a, b]`. Shifting the dose origin to `a` gives the tilde frame
//! `eta(x) = t0 + t1 * (x - a) / ((x - a) + t2)` in which admissibility reads
//! `t1 > 0, t2 > 0`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmaxParams {
    pub theta0: f64,
    pub theta1: f64,
    pub theta2: f64,
}

/// Parameters in the frame shifted by the lowest dose `a`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TildeParams {
    pub t0: f64,
    pub t1: f64,
    pub t2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoseDomain {
    pub a: f64,
    pub b: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThreePointDesign {
    pub domain: DoseDomain,
    pub x2: f64,
    pub weights: [f64; 3],
}

/// Homoscedastic Gaussian noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub sigma: f64,
}

/// How strictly [`EmaxParams::check`] enforces the parameter space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Admissibility {
    /// `theta1 > 0` and `theta2 > -a`.
    Strict,
    /// Only forbids hitting an asymptote at one of the given doses.
    Relaxed,
}

impl EmaxParams {
    pub fn new(theta0: f64, theta1: f64, theta2: f64) -> Self {
        Self { theta0, theta1, theta2 }
    }

    pub fn to_vector(&self) -> Vector3<f64> {
        Vector3::new(self.theta0, self.theta1, self.theta2)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    /// Increasing concave on `[a, b]`: the shifted parameters `t1`, `t2` are
    /// both positive, i.e. `theta2 > -a` and `theta1 * theta2 > 0`. For `a > 0`
    /// this admits `theta1 < 0` with the asymptote in `(-a, 0)`.
    pub fn is_admissible(&self, domain: &DoseDomain) -> bool {
        admissible_at(self, domain.a)
    }

    pub fn check(&self, domain: &DoseDomain, mode: Admissibility, doses: &[f64]) -> Result<()> {
        if !(self.theta0.is_finite() && self.theta1.is_finite() && self.theta2.is_finite()) {
            return Err(Error::Domain(format!("non-finite parameters {self:?}")));
        }
        if let Some(&x) = doses.iter().find(|&&x| x + self.theta2 == 0.0) {
            return Err(Error::Singularity { x, theta2: self.theta2 });
        }
        if mode == Admissibility::Strict && !self.is_admissible(domain) {
            return Err(Error::Domain(format!(
                "parameters not admissible on [{}, {}]: need theta2 > -a and theta1 * theta2 > 0, got {self:?}",
                domain.a, domain.b
            )));
        }
        Ok(())
    }
}

pub(crate) fn admissible_at(p: &EmaxParams, a: f64) -> bool {
    p.theta1.is_finite() && p.theta2.is_finite() && p.theta2 > -a && p.theta1 * p.theta2 > 0.0
}

impl TildeParams {
    pub fn new(t0: f64, t1: f64, t2: f64) -> Self {
        Self { t0, t1, t2 }
    }

    pub fn is_admissible(&self) -> bool {
        self.t1 > 0.0 && self.t2 > 0.0 && self.t1.is_finite() && self.t2.is_finite()
    }
}

impl DoseDomain {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a.is_finite() && b.is_finite()) || a < 0.0 || b <= a {
            return Err(Error::InvalidInput(format!("dose domain needs 0 <= a < b, got [{a}, {b}]")));
        }
        Ok(Self { a, b })
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.a + self.b)
    }
}

impl ThreePointDesign {
    pub fn new(domain: DoseDomain, x2: f64, weights: [f64; 3]) -> Result<Self> {
        if !(x2 > domain.a && x2 < domain.b) {
            return Err(Error::InvalidInput(format!(
                "central dose {x2} must lie strictly inside ({}, {})",
                domain.a, domain.b
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidInput(format!("design weights must be non-negative, got {weights:?}")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!("design weights must sum to 1, got {total}")));
        }
        Ok(Self { domain, x2, weights })
    }

    pub fn equal_weights(domain: DoseDomain, x2: f64) -> Result<Self> {
        Self::new(domain, x2, [1.0 / 3.0; 3])
    }

    pub fn points(&self) -> [f64; 3] {
        [self.domain.a, self.x2, self.domain.b]
    }
}

impl NoiseModel {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidInput(format!("sigma must be positive, got {sigma}")));
        }
        Ok(Self { sigma })
    }

    pub fn variance(&self) -> f64 {
        self.sigma * self.sigma
    }
}

fn shifted(x: f64, p: &EmaxParams) -> Result<f64> {
    let d = x + p.theta2;
    if d == 0.0 {
        return Err(Error::Singularity { x, theta2: p.theta2 });
    }
    Ok(d)
}

/// Mean response at dose `x`.
pub fn eta(x: f64, p: &EmaxParams) -> Result<f64> {
    let d = shifted(x, p)?;
    Ok(p.theta0 + p.theta1 * x / d)
}

/// Gradient of the mean with respect to `(theta0, theta1, theta2)`.
pub fn eta_gradient(x: f64, p: &EmaxParams) -> Result<Vector3<f64>> {
    let d = shifted(x, p)?;
    Ok(Vector3::new(1.0, x / d, -p.theta1 * x / (d * d)))
}

/// Second derivatives of the mean with respect to the parameters.
///
/// Only the `(theta1, theta2)` and `(theta2, theta2)` entries are nonzero.
pub fn eta_hessian(x: f64, p: &EmaxParams) -> Result<Matrix3<f64>> {
    let d = shifted(x, p)?;
    let cross = -x / (d * d);
    let mut h = Matrix3::zeros();
    h[(1, 2)] = cross;
    h[(2, 1)] = cross;
    h[(2, 2)] = 2.0 * p.theta1 * x / (d * d * d);
    Ok(h)
}

pub fn to_tilde(p: &EmaxParams, a: f64) -> Result<TildeParams> {
    let t2 = p.theta2 + a;
    if t2 == 0.0 {
        return Err(Error::Singularity { x: a, theta2: p.theta2 });
    }
    let shift = a * p.theta1 / t2;
    Ok(TildeParams::new(p.theta0 + shift, p.theta1 - shift, t2))
}

pub fn from_tilde(t: &TildeParams, a: f64) -> Result<EmaxParams> {
    if a == 0.0 {
        return Ok(EmaxParams::new(t.t0, t.t1, t.t2));
    }
    let theta2 = t.t2 - a;
    if theta2 == 0.0 {
        // theta2 = 0 collapses the original frame to a constant curve on (0, inf).
        return Err(Error::Domain(format!("tilde parameters with t2 = a = {a} have no original-frame image")));
    }
    let shift = a * t.t1 / theta2;
    Ok(EmaxParams::new(t.t0 - shift, t.t1 + shift, theta2))
}

/// Central support point of the locally D-optimal design.
pub fn d_optimal_x2(domain: &DoseDomain, theta2: f64) -> Result<f64> {
    if !(theta2 > -domain.a) || !theta2.is_finite() {
        return Err(Error::Domain(format!("theta2 = {theta2} must exceed -a = {}", -domain.a)));
    }
    let (a, b) = (domain.a, domain.b);
    let (ua, ub) = (a + theta2, b + theta2);
    Ok((b * ua + a * ub) / (ua + ub))
}

pub fn d_optimal_design(domain: &DoseDomain, theta2: f64) -> Result<ThreePointDesign> {
    let x2 = d_optimal_x2(domain, theta2)?;
    ThreePointDesign::equal_weights(*domain, x2)
}

/// The `theta2` whose D-optimal central point is `x2`; inverse of [`d_optimal_x2`].
pub fn implied_theta2(domain: &DoseDomain, x2: f64) -> Result<f64> {
    let (a, b) = (domain.a, domain.b);
    if !(x2 > a && x2 < domain.midpoint()) {
        return Err(Error::Domain(format!("x2 = {x2} is not in (a, (a+b)/2) = ({a}, {})", domain.midpoint())));
    }
    Ok((2.0 * a * b - x2 * (a + b)) / (2.0 * x2 - a - b))
}

/// `(n / sigma^2) * sum_i w_i grad_i grad_i^T` over arbitrary support points.
pub fn weighted_information(
    points: &[f64],
    weights: &[f64],
    p: &EmaxParams,
    noise: &NoiseModel,
    n: f64,
) -> Result<Matrix3<f64>> {
    let mut info = Matrix3::zeros();
    for (&x, &w) in points.iter().zip(weights) {
        let g = eta_gradient(x, p)?;
        info += w * g * g.transpose();
    }
    Ok(info * (n / noise.variance()))
}

/// Expected (Fisher) information of `n` observations allocated by the design weights.
pub fn fisher_information(
    design: &ThreePointDesign,
    p: &EmaxParams,
    noise: &NoiseModel,
    n: f64,
) -> Result<Matrix3<f64>> {
    weighted_information(&design.points(), &design.weights, p, noise, n)
}
