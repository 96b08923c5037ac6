//! Probabilities of the shape classes under the Gaussian model for the means.
//!
//! Every inequality that defines a class is a contrast of the means, so each
//! class is a polygon in the plane of `(u, v) = (ybar2 - ybar1, ybar3 - ybar1)`.
//! The deterministic mode whitens `(u, v)` and integrates the standard
//! bivariate normal over that polygon as a one-dimensional integral of normal
//! interval probabilities. The default mode is plain Monte Carlo on the means.

use nalgebra::{RowVector3, Vector3};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{d_optimal_x2, eta, DoseDomain, EmaxParams, NoiseModel, ThreePointDesign};
use crate::quad::{integrate, norm_interval};
use crate::rng::{domain, stream};
use crate::shape::{class_inequalities, ClassInequalities, ShapeClass};

/// Data-generating setting for one three-point experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub truth: EmaxParams,
    pub design: ThreePointDesign,
    pub noise: NoiseModel,
    pub n_per_point: [usize; 3],
}

impl Scenario {
    pub fn new(
        truth: EmaxParams,
        design: ThreePointDesign,
        noise: NoiseModel,
        n_per_point: [usize; 3],
    ) -> Result<Self> {
        if n_per_point.contains(&0) {
            return Err(Error::InvalidInput(format!("every dose needs at least one observation, got {n_per_point:?}")));
        }
        if !truth.is_admissible(&design.domain) {
            return Err(Error::Domain(format!("true parameters {truth:?} are not admissible on {:?}", design.domain)));
        }
        ThreePointDesign::new(design.domain, design.x2, design.weights)?;
        NoiseModel::new(noise.sigma)?;
        Ok(Self { truth, design, noise, n_per_point })
    }

    /// Same scenario with the central dose moved to `x2`.
    pub fn with_x2(&self, x2: f64) -> Result<Self> {
        let design = ThreePointDesign::new(self.design.domain, x2, self.design.weights)?;
        Ok(Self { design, ..*self })
    }

    /// Same scenario with the true `theta2` replaced.
    pub fn with_theta2(&self, theta2: f64) -> Result<Self> {
        let truth = EmaxParams { theta2, ..self.truth };
        Self::new(truth, self.design, self.noise, self.n_per_point)
    }

    pub fn domain(&self) -> DoseDomain {
        self.design.domain
    }

    /// Expected dose means.
    pub fn mean(&self) -> Result<[f64; 3]> {
        let x = self.design.points();
        Ok([eta(x[0], &self.truth)?, eta(x[1], &self.truth)?, eta(x[2], &self.truth)?])
    }

    /// Standard deviations of the dose means.
    pub fn mean_sd(&self) -> [f64; 3] {
        self.n_per_point.map(|n| self.noise.sigma / (n as f64).sqrt())
    }

    pub fn inequalities(&self) -> ClassInequalities {
        class_inequalities(self.design.points(), self.n_per_point)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum ProbMethod {
    MonteCarlo { draws: u64, seed: u64 },
    Quadrature { tol: f64 },
}

impl ProbMethod {
    pub fn monte_carlo(seed: u64) -> Self {
        ProbMethod::MonteCarlo { draws: 1_000_000, seed }
    }

    pub fn quadrature() -> Self {
        ProbMethod::Quadrature { tol: 1e-10 }
    }
}

impl Default for ProbMethod {
    fn default() -> Self {
        Self::monte_carlo(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeProbabilities {
    pub p_exists: f64,
    pub p_case1a: f64,
    pub p_case1b: f64,
    pub p_case2: f64,
    pub p_case2a: f64,
    pub p_case2b: f64,
    pub se_exists: f64,
    pub se_case1a: f64,
    pub se_case1b: f64,
    pub se_case2: f64,
    pub method: ProbMethod,
}

impl ShapeProbabilities {
    pub fn p_case1(&self) -> f64 {
        self.p_case1a + self.p_case1b
    }

    /// Standard error of an arbitrary class union; zero in quadrature mode.
    pub fn se_of(&self, p: f64) -> f64 {
        match self.method {
            ProbMethod::MonteCarlo { draws, .. } => binomial_se(p, draws),
            ProbMethod::Quadrature { .. } => 0.0,
        }
    }

    pub fn se_case1(&self) -> f64 {
        self.se_of(self.p_case1())
    }

    pub fn total(&self) -> f64 {
        self.p_exists + self.p_case1a + self.p_case1b + self.p_case2
    }
}

pub fn binomial_se(p: f64, n: u64) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

pub fn shape_probabilities(sc: &Scenario, method: &ProbMethod) -> Result<ShapeProbabilities> {
    match *method {
        ProbMethod::MonteCarlo { draws, seed } => monte_carlo(sc, draws, seed),
        ProbMethod::Quadrature { tol } => quadrature(sc, tol),
    }
}

/// Counts of each class in `draws` simulated mean triples, in the order
/// exists, 1a, 1b, 2a, 2b, boundary.
pub fn class_counts(sc: &Scenario, draws: u64, seed: u64) -> Result<[u64; 6]> {
    const CHUNK: u64 = 1 << 16;
    let mu = sc.mean()?;
    let sd = sc.mean_sd();
    let ineq = sc.inequalities();
    let chunks = draws.div_ceil(CHUNK);
    let counts = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream(seed, domain::SHAPE_PROBABILITIES, 0, c);
            let len = CHUNK.min(draws - c * CHUNK);
            let mut k = [0u64; 6];
            for _ in 0..len {
                let y = Vector3::from_fn(|i, _| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    mu[i] + sd[i] * z
                });
                k[class_index(ineq.classify_means(&y))] += 1;
            }
            k
        })
        .reduce(|| [0u64; 6], |a, b| std::array::from_fn(|i| a[i] + b[i]));
    Ok(counts)
}

fn class_index(c: Option<ShapeClass>) -> usize {
    match c {
        Some(ShapeClass::IncreasingConcave) => 0,
        Some(ShapeClass::Case1a) => 1,
        Some(ShapeClass::Case1b) => 2,
        Some(ShapeClass::Case2a) => 3,
        Some(ShapeClass::Case2b) => 4,
        None => 5,
    }
}

fn monte_carlo(sc: &Scenario, draws: u64, seed: u64) -> Result<ShapeProbabilities> {
    if draws == 0 {
        return Err(Error::InvalidInput("Monte Carlo needs at least one draw".into()));
    }
    let k = class_counts(sc, draws, seed)?;
    let n = draws as f64;
    let p = k.map(|c| c as f64 / n);
    let p_case2 = p[3] + p[4];
    Ok(ShapeProbabilities {
        p_exists: p[0],
        p_case1a: p[1],
        p_case1b: p[2],
        p_case2,
        p_case2a: p[3],
        p_case2b: p[4],
        se_exists: binomial_se(p[0], draws),
        se_case1a: binomial_se(p[1], draws),
        se_case1b: binomial_se(p[2], draws),
        se_case2: binomial_se(p_case2, draws),
        method: ProbMethod::MonteCarlo { draws, seed },
    })
}

/// Half-plane `c1 z1 + c2 z2 < d` in whitened coordinates.
#[derive(Debug, Clone, Copy)]
struct HalfPlane {
    c1: f64,
    c2: f64,
    d: f64,
}

/// Whitening of `(u, v)`: `u = mu_u + l11 z1`, `v = mu_v + l21 z1 + l22 z2`.
struct Frame {
    mu: [f64; 2],
    l11: f64,
    l21: f64,
    l22: f64,
}

impl Frame {
    fn new(sc: &Scenario) -> Result<Self> {
        let m = sc.mean()?;
        let s = sc.mean_sd().map(|x| x * x);
        let l11 = (s[0] + s[1]).sqrt();
        let l21 = s[0] / l11;
        let l22 = (s[0] + s[2] - l21 * l21).max(0.0).sqrt();
        Ok(Self { mu: [m[1] - m[0], m[2] - m[0]], l11, l21, l22 })
    }

    /// `r . ybar < 0` for a contrast row `r`.
    fn below(&self, r: &RowVector3<f64>) -> HalfPlane {
        let (r2, r3) = (r[1], r[2]);
        HalfPlane { c1: r2 * self.l11 + r3 * self.l21, c2: r3 * self.l22, d: -(r2 * self.mu[0] + r3 * self.mu[1]) }
    }

    fn above(&self, r: &RowVector3<f64>) -> HalfPlane {
        self.below(&(-r))
    }
}

const Z_MAX: f64 = 9.0;

/// Rotation of the `(z1, z2)` plane that keeps every boundary line as far from
/// vertical as possible, so the inner normal interval never switches abruptly.
fn best_rotation(planes: &[HalfPlane]) -> Vec<HalfPlane> {
    const STEPS: usize = 72;
    let rotate = |h: &HalfPlane, phi: f64| {
        let (s, c) = phi.sin_cos();
        HalfPlane { c1: h.c1 * c + h.c2 * s, c2: -h.c1 * s + h.c2 * c, d: h.d }
    };
    let worst = |phi: f64| {
        planes
            .iter()
            .map(|h| {
                let r = rotate(h, phi);
                r.c2.abs() / r.c1.hypot(r.c2).max(f64::MIN_POSITIVE)
            })
            .fold(f64::INFINITY, f64::min)
    };
    let phi = (0..STEPS)
        .map(|k| std::f64::consts::PI * k as f64 / STEPS as f64)
        .max_by(|a, b| worst(*a).total_cmp(&worst(*b)))
        .unwrap_or(0.0);
    planes.iter().map(|h| rotate(h, phi)).collect()
}

/// Standard bivariate normal mass of an intersection of half-planes.
fn polygon_mass(planes: &[HalfPlane], tol: f64) -> f64 {
    let planes = best_rotation(planes);
    let (mut lo, mut hi) = (-Z_MAX, Z_MAX);
    let mut sloped = Vec::new();
    for h in &planes {
        let scale = h.c1.abs().max(h.c2.abs());
        if scale == 0.0 {
            if h.d <= 0.0 {
                return 0.0;
            }
            continue;
        }
        if h.c2.abs() <= 1e-14 * scale {
            // vertical line in the (z1, z2) plane
            let cut = h.d / h.c1;
            if h.c1 > 0.0 {
                hi = hi.min(cut);
            } else {
                lo = lo.max(cut);
            }
        } else {
            sloped.push(*h);
        }
    }
    if hi <= lo {
        return 0.0;
    }
    let mut cuts = vec![lo, hi];
    for (i, a) in sloped.iter().enumerate() {
        if a.c1 != 0.0 {
            cuts.push(a.d / a.c1);
        }
        for b in &sloped[i + 1..] {
            let det = a.c1 * b.c2 - b.c1 * a.c2;
            if det != 0.0 {
                cuts.push((a.d * b.c2 - b.d * a.c2) / det);
            }
        }
    }
    cuts.retain(|z| z.is_finite() && *z >= lo && *z <= hi);
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let inner = |z1: f64| {
        let (mut a, mut b) = (f64::NEG_INFINITY, f64::INFINITY);
        for h in &sloped {
            let bound = (h.d - h.c1 * z1) / h.c2;
            if h.c2 > 0.0 {
                b = b.min(bound);
            } else {
                a = a.max(bound);
            }
        }
        crate::quad::norm_pdf(z1) * norm_interval(a, b)
    };
    let pieces = (cuts.len() - 1).max(1) as f64;
    cuts.windows(2).map(|w| integrate(inner, w[0], w[1], tol / pieces)).sum::<f64>().clamp(0.0, 1.0)
}

fn quadrature(sc: &Scenario, tol: f64) -> Result<ShapeProbabilities> {
    if !(tol > 0.0) {
        return Err(Error::InvalidInput(format!("quadrature tolerance must be positive, got {tol}")));
    }
    let f = Frame::new(sc)?;
    let ineq = sc.inequalities();
    let system =
        |m: &nalgebra::Matrix3<f64>| -> Vec<HalfPlane> { (0..3).map(|i| f.below(&m.row(i).into_owned())).collect() };
    let p_exists = polygon_mass(&system(&ineq.exists), tol);
    let p_case1a = polygon_mass(&system(&ineq.case1a), tol);
    let p_case1b = polygon_mass(&system(&ineq.case1b), tol);
    let p_case2a = polygon_mass(&[f.above(&ineq.convex), f.above(&ineq.ols_slope)], tol);
    let p_case2b = polygon_mass(&[f.above(&ineq.convex), f.below(&ineq.ols_slope)], tol);
    let p_case2 = polygon_mass(&[f.above(&ineq.convex)], tol);
    Ok(ShapeProbabilities {
        p_exists,
        p_case1a,
        p_case1b,
        p_case2,
        p_case2a,
        p_case2b,
        se_exists: 0.0,
        se_case1a: 0.0,
        se_case1b: 0.0,
        se_case2: 0.0,
        method: ProbMethod::Quadrature { tol },
    })
}

/// Probability of a Case 1 sample when the true half-effect parameter is
/// `theta2` and the central dose is `x2`; the truth and design otherwise come
/// from `base`.
pub fn power_function(theta2: f64, x2: f64, base: &Scenario, method: &ProbMethod) -> Result<f64> {
    let dom = base.domain();
    if !(x2 > dom.a && x2 < dom.b) {
        return Err(Error::Domain(format!("x2 = {x2} must lie in ({}, {})", dom.a, dom.b)));
    }
    let sc = base.with_theta2(theta2)?.with_x2(x2)?;
    Ok(shape_probabilities(&sc, method)?.p_case1())
}

/// Scan points used to bracket `alpha`: `a + (b - a) f` with `f` log-spaced
/// on `[1e-4, 0.999]`.
pub fn alpha_scan_grid(dom: &DoseDomain) -> Vec<f64> {
    const POINTS: usize = 64;
    let (f0, f1) = (1e-4f64.ln(), 0.999f64.ln());
    (0..POINTS).map(|i| dom.a + (dom.b - dom.a) * (f0 + (f1 - f0) * i as f64 / (POINTS - 1) as f64).exp()).collect()
}

/// Central dose at which the Case 1 test has size `alpha` under `theta2_g`.
///
/// Brackets the first sign change of `beta - alpha` on [`alpha_scan_grid`]
/// from the left, then bisects to a dose tolerance of `1e-12 (b - a)`.
pub fn x2_for_alpha(theta2_g: f64, alpha: f64, base: &Scenario, method: &ProbMethod) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidInput(format!("alpha = {alpha} must lie in (0, 1)")));
    }
    let dom = base.domain();
    let grid = alpha_scan_grid(&dom);
    let beta = |x: f64| power_function(theta2_g, x, base, method);
    let vals = grid.iter().map(|&x| beta(x)).collect::<Result<Vec<_>>>()?;
    let idx = vals.windows(2).position(|w| (w[0] - alpha) * (w[1] - alpha) <= 0.0);
    let Some(i) = idx else {
        let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        return Err(Error::NoBracket { alpha, min, max });
    };
    let (mut lo, mut hi) = (grid[i], grid[i + 1]);
    let mut g_lo = vals[i] - alpha;
    if g_lo == 0.0 {
        return Ok(lo);
    }
    if vals[i + 1] == alpha {
        return Ok(hi);
    }
    let tol = 1e-12 * (dom.b - dom.a);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        let g = beta(mid)? - alpha;
        if g == 0.0 {
            return Ok(mid);
        }
        if (g < 0.0) == (g_lo < 0.0) {
            lo = mid;
            g_lo = g;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    pub x2: f64,
    /// Size-`alpha` central dose under the original guess, for reference.
    pub x2_guess: f64,
    pub warning: Option<String>,
}

/// Extra dose suggested after a Case 1 sample: the size-`alpha` central dose
/// under a smaller guess `theta2_1`, which should sit left of the one under
/// `theta2_g`.
pub fn augmentation_point(
    theta2_g: f64,
    theta2_1: f64,
    alpha: f64,
    base: &Scenario,
    method: &ProbMethod,
) -> Result<Augmentation> {
    if theta2_1 > theta2_g {
        return Err(Error::InvalidInput(format!("theta2_1 = {theta2_1} must not exceed theta2_g = {theta2_g}")));
    }
    let x2_guess = x2_for_alpha(theta2_g, alpha, base, method)?;
    let x2 = x2_for_alpha(theta2_1, alpha, base, method)?;
    let warning = (theta2_1 < theta2_g && x2 >= x2_guess)
        .then(|| format!("augmentation dose {x2} is not left of the original size-alpha dose {x2_guess}"));
    Ok(Augmentation { x2, x2_guess, warning })
}

/// One row of a sweep over central doses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub x2: f64,
    pub theta2_true: f64,
    pub p_exists: f64,
    pub p_case1a: f64,
    pub p_case1b: f64,
    pub p_case2: f64,
    pub se_exists: f64,
    pub se_case1a: f64,
    pub se_case1b: f64,
    pub se_case2: f64,
    /// `p_case1a + p_case1b`, the power of the Case 1 test.
    pub power: f64,
    /// D-optimal central dose for `theta2_true`.
    pub x2_dopt: f64,
}

/// `n` doses log-spaced on `(a, b)` as `a + (b - a) f`, `f` in `[1e-3, 0.999]`.
pub fn x2_log_grid(dom: &DoseDomain, n: usize) -> Vec<f64> {
    let (f0, f1) = (1e-3f64.ln(), 0.999f64.ln());
    let n = n.max(2);
    (0..n).map(|i| dom.a + (dom.b - dom.a) * (f0 + (f1 - f0) * i as f64 / (n - 1) as f64).exp()).collect()
}

/// Class probabilities over `x2_grid` for each true `theta2`.
pub fn sweep(theta2_list: &[f64], x2_grid: &[f64], base: &Scenario, method: &ProbMethod) -> Result<Vec<SweepRow>> {
    let cells: Vec<(f64, f64)> = theta2_list.iter().flat_map(|&t| x2_grid.iter().map(move |&x| (t, x))).collect();
    cells
        .par_iter()
        .map(|&(t, x)| {
            let sc = base.with_theta2(t)?.with_x2(x)?;
            let p = shape_probabilities(&sc, method)?;
            Ok(SweepRow {
                x2: x,
                theta2_true: t,
                p_exists: p.p_exists,
                p_case1a: p.p_case1a,
                p_case1b: p.p_case1b,
                p_case2: p.p_case2,
                se_exists: p.se_exists,
                se_case1a: p.se_case1a,
                se_case1b: p.se_case1b,
                se_case2: p.se_case2,
                power: p.p_case1(),
                x2_dopt: d_optimal_x2(&base.domain(), t)?,
            })
        })
        .collect()
}

/// One row of a significance-level sweep: the size-`alpha` central dose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaRow {
    pub alpha: f64,
    pub theta2_g: f64,
    pub x2: Option<f64>,
}

pub fn alpha_sweep(theta2_list: &[f64], alphas: &[f64], base: &Scenario, method: &ProbMethod) -> Vec<AlphaRow> {
    let cells: Vec<(f64, f64)> = theta2_list.iter().flat_map(|&t| alphas.iter().map(move |&a| (t, a))).collect();
    cells
        .par_iter()
        .map(|&(t, a)| AlphaRow { alpha: a, theta2_g: t, x2: x2_for_alpha(t, a, base, method).ok() })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::d_optimal_design;

    pub(crate) fn table1_scenario(theta2_g: f64) -> Scenario {
        let dom = DoseDomain::new(0.001, 150.0).unwrap();
        Scenario::new(
            EmaxParams::new(2.0, 0.467, 50.0),
            d_optimal_design(&dom, theta2_g).unwrap(),
            NoiseModel::new(0.1).unwrap(),
            [6, 6, 6],
        )
        .unwrap()
    }

    #[test]
    fn polygon_mass_simple_regions() {
        let half = polygon_mass(&[HalfPlane { c1: 1.0, c2: 0.0, d: 0.0 }], 1e-12);
        assert!((half - 0.5).abs() < 1e-12);
        let quadrant =
            polygon_mass(&[HalfPlane { c1: 1.0, c2: 0.0, d: 0.0 }, HalfPlane { c1: 0.0, c2: 1.0, d: 0.0 }], 1e-12);
        assert!((quadrant - 0.25).abs() < 1e-12);
        // wedge of angle pi/4 between z2 = 0 and z2 = z1 for z1 > 0
        let wedge =
            polygon_mass(&[HalfPlane { c1: 0.0, c2: -1.0, d: 0.0 }, HalfPlane { c1: -1.0, c2: 1.0, d: 0.0 }], 1e-12);
        assert!((wedge - 0.125).abs() < 1e-12);
        let band =
            polygon_mass(&[HalfPlane { c1: 0.0, c2: 1.0, d: 1.0 }, HalfPlane { c1: 0.0, c2: -1.0, d: 1.0 }], 1e-12);
        assert!((band - 0.682_689_492_137_085_9).abs() < 1e-12);
        assert_eq!(
            polygon_mass(&[HalfPlane { c1: 1.0, c2: 0.0, d: -1.0 }, HalfPlane { c1: -1.0, c2: 0.0, d: -1.0 }], 1e-12),
            0.0
        );
    }

    #[test]
    fn quadrature_partitions_unity() {
        for t in [12.5, 50.0, 100.0] {
            let p = shape_probabilities(&table1_scenario(t), &ProbMethod::quadrature()).unwrap();
            assert!((p.total() - 1.0).abs() < 1e-8, "{t}: {}", p.total());
            assert!((p.p_case2a + p.p_case2b - p.p_case2).abs() < 1e-8);
        }
    }

    #[test]
    fn near_noise_free_data_is_concave() {
        let mut sc = table1_scenario(50.0);
        sc.noise = NoiseModel::new(1e-6).unwrap();
        let p = shape_probabilities(&sc, &ProbMethod::quadrature()).unwrap();
        assert!(p.p_exists > 1.0 - 1e-12);
        let beta = power_function(50.0, 10.0, &sc, &ProbMethod::quadrature()).unwrap();
        assert!(beta < 1e-12);
    }

    #[test]
    fn monte_carlo_is_thread_count_independent() {
        let sc = table1_scenario(50.0);
        let method = ProbMethod::MonteCarlo { draws: 200_000, seed: 11 };
        let a = shape_probabilities(&sc, &method).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| shape_probabilities(&sc, &method).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn scenario_validation() {
        let sc = table1_scenario(50.0);
        assert!(Scenario::new(sc.truth, sc.design, sc.noise, [6, 0, 6]).is_err());
        assert!(sc.with_theta2(-1.0).is_err());
        assert!(sc.with_x2(150.0).is_err());
    }

    #[test]
    fn alpha_outside_range_has_no_bracket() {
        let sc = table1_scenario(50.0);
        let err = x2_for_alpha(50.0, 0.9, &sc, &ProbMethod::quadrature()).unwrap_err();
        assert!(matches!(err, Error::NoBracket { .. }), "{err}");
        assert!(x2_for_alpha(50.0, 0.0, &sc, &ProbMethod::quadrature()).is_err());
    }
}
