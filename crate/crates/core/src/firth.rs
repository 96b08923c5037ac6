//! Firth's modified score for the Emax model.
//!
//! The score `U` is shifted by `A_t = 1/2 tr(I^-1 Q_t)` with
//! `Q_t = E(-O U_t)`. For Gaussian errors only the `(2,3)` and `(3,3)` entries
//! of `Q_t` survive, and `A` reduces to moments of the design under
//! `theta2`:
//!
//! ```text
//! M[l1][l2] = E_xi[ x^l1 / (theta2 + x)^l2 ]
//! V11 = M[2][2] - M[1][1]^2,  V12 = M[2][4] - M[1][2]^2
//! Cov12 = M[2][3] - M[1][1] M[1][2],  D = V11 V12 - Cov12^2
//! A1 = (V11 M[1][3] - Cov12 M[1][2]) / (theta1 D)
//! A2 = (V11 M[2][4] - Cov12 M[2][3]) / (theta1 D)
//! A3 = -(V11 M[2][5] - Cov12 M[2][4]) / D
//! ```
//!
//! [`correction_via_trace`] rebuilds `A` from explicit `I` and `Q_t` matrices
//! and serves as an independent check of the closed form.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mle::FitResult;
use crate::model::{eta, eta_gradient, eta_hessian, weighted_information, EmaxParams, NoiseModel, ThreePointDesign};
use crate::shape::SufficientStats;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignMoments {
    /// `m[l1][l2]` for `l1 in 0..=2`, `l2 in 0..=5`; index 0 rows are unused.
    pub m: [[f64; 6]; 3],
    pub v11: f64,
    pub v12: f64,
    pub cov12: f64,
    pub d: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FirthCorrection {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
}

impl FirthCorrection {
    pub fn to_vector(&self) -> Vector3<f64> {
        Vector3::new(self.a1, self.a2, self.a3)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfoMatrices {
    pub observed: Matrix3<f64>,
    pub expected: Matrix3<f64>,
    pub q: [Matrix3<f64>; 3],
}

impl DesignMoments {
    pub fn new(points: &[f64], weights: &[f64], theta2: f64) -> Result<Self> {
        let mut m = [[0.0; 6]; 3];
        for (&x, &w) in points.iter().zip(weights) {
            let d = x + theta2;
            if d == 0.0 {
                return Err(Error::Singularity { x, theta2 });
            }
            for (l1, row) in m.iter_mut().enumerate() {
                for (l2, cell) in row.iter_mut().enumerate() {
                    *cell += w * x.powi(l1 as i32) / d.powi(l2 as i32);
                }
            }
        }
        // Centered second moments and their Gram determinant from pairwise and
        // triple differences, which avoids the cancellation in `M22 - M11^2`
        // and `V11 V12 - Cov12^2` on nearly degenerate designs.
        let total: f64 = weights.iter().sum();
        let (mut v11, mut v12, mut cov12, mut d) = (0.0, 0.0, 0.0, 0.0);
        let k = points.len();
        for i in 0..k {
            for j in i + 1..k {
                let (du, dv) = pair_differences(points[i], points[j], theta2);
                let w = weights[i] * weights[j];
                v11 += w * du * du;
                v12 += w * dv * dv;
                cov12 += w * du * dv;
                for l in j + 1..k {
                    let det = triple_determinant(points[i], points[j], points[l], theta2);
                    d += w * weights[l] * det * det;
                }
            }
        }
        let (t2, t3) = (total * total, total * total * total);
        Ok(Self { m, v11: v11 / t2, v12: v12 / t2, cov12: cov12 / t2, d: d / t3 })
    }

    pub fn for_design(design: &ThreePointDesign, theta2: f64) -> Result<Self> {
        Self::new(&design.points(), &design.weights, theta2)
    }

    pub fn for_stats(s: &SufficientStats, theta2: f64) -> Result<Self> {
        Self::new(&s.doses, &s.weights(), theta2)
    }

    /// Positive up to rounding relative to `V11 V12`.
    pub fn is_degenerate(&self) -> bool {
        !(self.d > 1e-12 * (self.v11 * self.v12).abs()) || !self.d.is_finite()
    }
}

/// `(u_j - u_i, v_j - v_i)` for `u = x / (x + theta2)`, `v = x / (x + theta2)^2`.
fn pair_differences(xi: f64, xj: f64, theta2: f64) -> (f64, f64) {
    let (di, dj) = (xi + theta2, xj + theta2);
    let dx = xj - xi;
    let p = di * dj;
    (theta2 * dx / p, dx * (theta2 * theta2 - xi * xj) / (p * p))
}

/// `det [1 u v]` over three points. The points `(u, v)` lie on the parabola
/// `v = u (1 - u) / theta2`, so the determinant is a Vandermonde product.
fn triple_determinant(xi: f64, xj: f64, xk: f64, theta2: f64) -> f64 {
    let p = (xi + theta2) * (xj + theta2) * (xk + theta2);
    -theta2 * theta2 * ((xj - xi) * (xk - xi) * (xk - xj)) / (p * p)
}

/// `V11 M13 - Cov12 M12`, `V11 M24 - Cov12 M23` and `V11 M25 - Cov12 M24`.
///
/// Each is `sum_{i<j} w_i w_j du_ij sum_k w_k f_k v_k (du_ij / d_k - dv_ij)`
/// with `f = 1, u, v`, and the inner difference is expanded exactly.
fn numerators(points: &[f64], weights: &[f64], theta2: f64) -> [f64; 3] {
    let total: f64 = weights.iter().sum();
    let mut out = [0.0; 3];
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let (xi, xj) = (points[i], points[j]);
            let (di, dj) = (xi + theta2, xj + theta2);
            let (du, _) = pair_differences(xi, xj, theta2);
            let scale = weights[i] * weights[j] * du * (xj - xi) / (di * di * dj * dj);
            for (&xk, &wk) in points.iter().zip(weights) {
                let dk = xk + theta2;
                let c = if theta2 < 0.0 {
                    di * dj * dk + theta2 * (di * dj - di * dk - dj * dk)
                } else {
                    theta2 * theta2 * (xi + xj - xk) + 2.0 * theta2 * xi * xj + xi * xj * xk
                };
                let (u, v) = (xk / dk, xk / (dk * dk));
                let base = scale * wk * v * c / dk;
                out[0] += base;
                out[1] += base * u;
                out[2] += base * v;
            }
        }
    }
    out.map(|n| n / (total * total * total))
}

/// Closed-form score modification for a design given by points and weights.
pub fn firth_correction(points: &[f64], weights: &[f64], p: &EmaxParams) -> Result<FirthCorrection> {
    if p.theta1 == 0.0 {
        return Err(Error::Domain("Firth correction needs theta1 != 0".into()));
    }
    let mo = DesignMoments::new(points, weights, p.theta2)?;
    if mo.is_degenerate() {
        return Err(Error::DegenerateDesign(mo.d));
    }
    let [n1, n2, n3] = numerators(points, weights, p.theta2);
    let k = 1.0 / (p.theta1 * mo.d);
    Ok(FirthCorrection { a1: k * n1, a2: k * n2, a3: -n3 / mo.d })
}

pub fn correction_for_design(design: &ThreePointDesign, p: &EmaxParams) -> Result<FirthCorrection> {
    firth_correction(&design.points(), &design.weights, p)
}

pub fn correction_for_stats(s: &SufficientStats, p: &EmaxParams) -> Result<FirthCorrection> {
    firth_correction(&s.doses, &s.weights(), p)
}

/// `Q_t = E(-O U_t)` for `n` observations spread by `weights`, built from the
/// parameter Hessian of the mean: `Q_t = (n / sigma^2) sum_i w_i H_i g_{i,t}`.
pub fn q_matrices(
    points: &[f64],
    weights: &[f64],
    p: &EmaxParams,
    noise: &NoiseModel,
    n: f64,
) -> Result<[Matrix3<f64>; 3]> {
    let mut q = [Matrix3::zeros(); 3];
    for (&x, &w) in points.iter().zip(weights) {
        let g = eta_gradient(x, p)?;
        let h = eta_hessian(x, p)?;
        for (t, qt) in q.iter_mut().enumerate() {
            *qt += w * g[t] * h;
        }
    }
    let scale = n / noise.variance();
    Ok(q.map(|qt| qt * scale))
}

/// `A_t = 1/2 tr(I^-1 Q_t)` from explicit matrices.
pub fn correction_via_trace(
    points: &[f64],
    weights: &[f64],
    p: &EmaxParams,
    noise: &NoiseModel,
    n: f64,
) -> Result<FirthCorrection> {
    let info = weighted_information(points, weights, p, noise, n)?;
    // tr(I^-1 Q) is unchanged by I -> S I S, Q -> S Q S; unit diagonal keeps
    // the Cholesky solve well scaled.
    let s = Matrix3::from_diagonal(&info.diagonal().map(|v| 1.0 / v.sqrt()));
    let chol = (s * info * s).cholesky().ok_or_else(|| Error::DegenerateDesign(info.determinant()))?;
    let q = q_matrices(points, weights, p, noise, n)?;
    let a = q.map(|qt| 0.5 * chol.solve(&(s * qt * s)).trace());
    Ok(FirthCorrection { a1: a[0], a2: a[1], a3: a[2] })
}

/// Score `U = (1/sigma^2) sum_i n_i (ybar_i - eta_i) grad_i`.
pub fn score(s: &SufficientStats, p: &EmaxParams, noise: &NoiseModel) -> Result<Vector3<f64>> {
    let mut u = Vector3::zeros();
    for i in 0..3 {
        let x = s.doses[i];
        let r = s.means[i] - eta(x, p)?;
        u += s.counts[i] as f64 * r * eta_gradient(x, p)?;
    }
    Ok(u / noise.variance())
}

/// Score from individual `(dose, response)` observations.
pub fn score_raw(obs: &[(f64, f64)], p: &EmaxParams, noise: &NoiseModel) -> Result<Vector3<f64>> {
    let mut u = Vector3::zeros();
    for &(x, y) in obs {
        u += (y - eta(x, p)?) * eta_gradient(x, p)?;
    }
    Ok(u / noise.variance())
}

/// Observed information `-d^2 log L` from individual observations.
pub fn observed_information_raw(obs: &[(f64, f64)], p: &EmaxParams, noise: &NoiseModel) -> Result<Matrix3<f64>> {
    let mut o = Matrix3::zeros();
    for &(x, y) in obs {
        let g = eta_gradient(x, p)?;
        o += g * g.transpose() - (y - eta(x, p)?) * eta_hessian(x, p)?;
    }
    Ok(o / noise.variance())
}

/// Observed information from sufficient statistics; exact since `O` is linear in `y`.
pub fn observed_information(s: &SufficientStats, p: &EmaxParams, noise: &NoiseModel) -> Result<Matrix3<f64>> {
    let mut o = Matrix3::zeros();
    for i in 0..3 {
        let x = s.doses[i];
        let g = eta_gradient(x, p)?;
        let r = s.means[i] - eta(x, p)?;
        o += s.counts[i] as f64 * (g * g.transpose() - r * eta_hessian(x, p)?);
    }
    Ok(o / noise.variance())
}

pub fn info_matrices(s: &SufficientStats, p: &EmaxParams, noise: &NoiseModel) -> Result<InfoMatrices> {
    let n = s.total() as f64;
    let w = s.weights();
    Ok(InfoMatrices {
        observed: observed_information(s, p, noise)?,
        expected: weighted_information(&s.doses, &w, p, noise, n)?,
        q: q_matrices(&s.doses, &w, p, noise, n)?,
    })
}

/// `U* = U + A` with `A` evaluated at the empirical design `n_i / n`.
pub fn modified_score(s: &SufficientStats, p: &EmaxParams, noise: &NoiseModel) -> Result<Vector3<f64>> {
    Ok(score(s, p, noise)? + correction_for_stats(s, p)?.to_vector())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOpts {
    /// Convergence threshold on `max |U*_t|`.
    pub tol: f64,
    pub max_iter: usize,
    /// Largest admissible `|theta2|`; `None` means `1e6 * (x3 - x1)`.
    pub theta2_cap: Option<f64>,
    /// Grid starts use `theta2 + x1 = (x3 - x1) 2^k` for `k in -starts..=starts`.
    pub starts: i32,
}

impl Default for SolverOpts {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 200, theta2_cap: None, starts: 6 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    /// A root exists but lies outside `theta1 > 0, theta2 > -a`.
    InadmissibleRoot,
    /// Iterates ran off towards a limit curve (`|theta2|` beyond the cap).
    Divergence,
    IterationCap,
    /// The line search could not reduce `|U*|`.
    Stalled,
}

impl std::fmt::Display for FailureReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FailureReason::InadmissibleRoot => "inadmissible root",
            FailureReason::Divergence => "divergence",
            FailureReason::IterationCap => "iteration cap",
            FailureReason::Stalled => "stalled line search",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FirthRoot {
    pub params: EmaxParams,
    pub score_norm: f64,
    pub iterations: usize,
}

/// Start points in the order they are tried.
pub fn start_points(s: &SufficientStats, init: Option<&EmaxParams>, opts: &SolverOpts) -> Vec<EmaxParams> {
    let mut out = Vec::new();
    if let Some(p) = init {
        out.push(*p);
    }
    if let Some(p) = hyperbola_interpolant(s) {
        out.push(p);
    }
    let [x1, _, x3] = s.doses;
    for k in -opts.starts..=opts.starts {
        let theta2 = (x3 - x1) * 2f64.powi(k) - x1;
        if let Some((t0, t1)) = linear_given_theta2(s, theta2) {
            out.push(EmaxParams::new(t0, t1, theta2));
        }
    }
    out
}

/// The unconstrained hyperbola through the three means, if it exists and keeps
/// every dose on the right of its asymptote.
fn hyperbola_interpolant(s: &SufficientStats) -> Option<EmaxParams> {
    let [x1, x2, x3] = s.doses;
    let [y1, y2, y3] = s.means;
    let m1 = (y2 - y1) / (x2 - x1);
    let m2 = (y3 - y1) / (x3 - x1);
    let gap = m1 - m2;
    if gap == 0.0 {
        return None;
    }
    let t2 = (y3 - y2) / gap;
    let t1 = m1 * m2 / gap * (x3 - x2);
    if !(t2 > 0.0 && t1.is_finite() && t1 != 0.0) {
        return None;
    }
    let theta2 = t2 - x1;
    let shift = if x1 == 0.0 { 0.0 } else { x1 * t1 / theta2 };
    let p = EmaxParams::new(y1 - shift, t1 + shift, theta2);
    (p.theta0.is_finite() && p.theta1.is_finite() && p.theta1 != 0.0).then_some(p)
}

/// Weighted least squares for `(theta0, theta1)` with `theta2` held fixed.
fn linear_given_theta2(s: &SufficientStats, theta2: f64) -> Option<(f64, f64)> {
    let (mut sw, mut sg, mut sgg, mut sy, mut sgy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..3 {
        let w = s.counts[i] as f64;
        let g = s.doses[i] / (s.doses[i] + theta2);
        sw += w;
        sg += w * g;
        sgg += w * g * g;
        sy += w * s.means[i];
        sgy += w * g * s.means[i];
    }
    let det = sw * sgg - sg * sg;
    if !(det.abs() > 0.0) {
        return None;
    }
    let t1 = (sw * sgy - sg * sy) / det;
    let t0 = (sy - t1 * sg) / sw;
    (t0.is_finite() && t1.is_finite() && t1 != 0.0).then_some((t0, t1))
}

enum Attempt {
    Root(FirthRoot),
    Failed(FailureReason),
}

fn sup_norm(v: &Vector3<f64>) -> f64 {
    v.amax()
}

/// Central-difference Jacobian of `f` at `p`, step kept inside `x1 + theta2 > 0`.
fn jacobian(f: &impl Fn(&Vector3<f64>) -> Option<Vector3<f64>>, p: &Vector3<f64>, wall: f64) -> Option<Matrix3<f64>> {
    let mut jac = Matrix3::zeros();
    for k in 0..3 {
        let mut h = 1e-6 * p[k].abs().max(1e-3);
        if k == 2 {
            h = h.min(0.25 * (p[2] - wall));
        }
        let mut up = *p;
        let mut dn = *p;
        up[k] += h;
        dn[k] -= h;
        let col = (f(&up)? - f(&dn)?) / (2.0 * h);
        jac.set_column(k, &col);
    }
    Some(jac)
}

fn newton(s: &SufficientStats, noise: &NoiseModel, start: EmaxParams, opts: &SolverOpts, cap: f64) -> Attempt {
    let x1 = s.doses[0];
    // theta2 must stay above -x1 so no dose meets the asymptote
    let wall = -x1;
    let f = |v: &Vector3<f64>| -> Option<Vector3<f64>> {
        if !(v[2] > wall) {
            return None;
        }
        let u = modified_score(s, &EmaxParams::from_vector(v), noise).ok()?;
        u.iter().all(|c| c.is_finite()).then_some(u)
    };
    let mut p = start.to_vector();
    let Some(mut fp) = f(&p) else {
        return Attempt::Failed(FailureReason::Stalled);
    };
    for iter in 0..opts.max_iter {
        let norm = sup_norm(&fp);
        if norm < opts.tol {
            return classify_root(
                FirthRoot { params: EmaxParams::from_vector(&p), score_norm: norm, iterations: iter },
                x1,
                cap,
            );
        }
        if p[2].abs() > cap {
            return Attempt::Failed(FailureReason::Divergence);
        }
        let Some(jac) = jacobian(&f, &p, wall) else {
            return Attempt::Failed(FailureReason::Stalled);
        };
        let Some(mut step) = jac.lu().solve(&(-fp)) else {
            return Attempt::Failed(FailureReason::Stalled);
        };
        let dist = p[2] - wall;
        if p[2] + step[2] - wall <= 0.1 * dist {
            // near the wall: Newton step in phi = ln(theta2 + x1)
            let mut jphi = jac;
            let c = jac.column(2) * dist;
            jphi.set_column(2, &c);
            if let Some(sphi) = jphi.lu().solve(&(-fp)) {
                step = Vector3::new(sphi[0], sphi[1], dist * (sphi[2].exp() - 1.0));
            }
        }
        let base = fp.norm_squared();
        let mut lambda = 1.0;
        let mut accepted = None;
        while lambda > 1e-10 {
            let trial = if p[2] + step[2] - wall <= 0.0 {
                None
            } else {
                let q = p + lambda * step;
                f(&q).map(|fq| (q, fq))
            };
            if let Some((q, fq)) = trial {
                if fq.norm_squared() < base * (1.0 - 1e-4 * lambda) {
                    accepted = Some((q, fq));
                    break;
                }
            }
            lambda *= 0.5;
            // retreat the theta2 component if the full step crossed the wall
            if p[2] + step[2] - wall <= 0.0 {
                step *= 0.5;
                lambda *= 2.0;
                if step.norm() < 1e-300 {
                    break;
                }
            }
        }
        match accepted {
            Some((q, fq)) => {
                p = q;
                fp = fq;
            }
            None => return Attempt::Failed(FailureReason::Stalled),
        }
    }
    let norm = sup_norm(&fp);
    if norm < opts.tol {
        return classify_root(
            FirthRoot { params: EmaxParams::from_vector(&p), score_norm: norm, iterations: opts.max_iter },
            x1,
            cap,
        );
    }
    if p[2].abs() > cap {
        Attempt::Failed(FailureReason::Divergence)
    } else {
        Attempt::Failed(FailureReason::IterationCap)
    }
}

fn classify_root(root: FirthRoot, x1: f64, cap: f64) -> Attempt {
    let p = root.params;
    if !(p.theta2.abs() < cap) {
        Attempt::Failed(FailureReason::Divergence)
    } else if crate::model::admissible_at(&p, x1) {
        Attempt::Root(root)
    } else {
        Attempt::Failed(FailureReason::InadmissibleRoot)
    }
}

/// Solve `U* = 0` by damped Newton from several starts.
///
/// Returns the first admissible root, or the most informative failure reason
/// over all starts.
pub fn firth_root(
    s: &SufficientStats,
    noise: &NoiseModel,
    init: Option<&EmaxParams>,
    opts: &SolverOpts,
) -> std::result::Result<FirthRoot, FailureReason> {
    let cap = opts.theta2_cap.unwrap_or(1e6 * (s.doses[2] - s.doses[0]));
    let mut worst: Option<FailureReason> = None;
    let rank = |r: FailureReason| match r {
        FailureReason::InadmissibleRoot => 3,
        FailureReason::Divergence => 2,
        FailureReason::IterationCap => 1,
        FailureReason::Stalled => 0,
    };
    for start in start_points(s, init, opts) {
        if !(start.theta2 > -s.doses[0]) {
            continue;
        }
        match newton(s, noise, start, opts, cap) {
            Attempt::Root(r) => return Ok(r),
            Attempt::Failed(reason) => {
                if worst.is_none_or(|w| rank(reason) > rank(w)) {
                    worst = Some(reason);
                }
            }
        }
    }
    Err(worst.unwrap_or(FailureReason::Stalled))
}

pub fn firth_solve(s: &SufficientStats, noise: &NoiseModel, init: Option<&EmaxParams>, opts: &SolverOpts) -> FitResult {
    match firth_root(s, noise, init, opts) {
        Ok(r) => FitResult::FirthEstimate { params: r.params, score_norm: r.score_norm, iterations: r.iterations },
        Err(reason) => FitResult::FirthFailure { reason: reason.to_string() },
    }
}
