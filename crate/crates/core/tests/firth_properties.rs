use emax_core::firth::{
    correction_via_trace, firth_correction, firth_root, modified_score, observed_information_raw, score, score_raw,
    DesignMoments, SolverOpts,
};
use emax_core::mle::mle;
use emax_core::model::{d_optimal_design, eta, DoseDomain, EmaxParams, NoiseModel};
use emax_core::shape::{classify, ShapeClass, SufficientStats};
use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

mod common;

use common::{exact_correction, max_rel, random_setting};

/// Gradient and Hessian of the mean written out by hand.
fn derivs(x: f64, p: &EmaxParams) -> (Vector3<f64>, Matrix3<f64>) {
    let d = x + p.theta2;
    let g = Vector3::new(1.0, x / d, -p.theta1 * x / (d * d));
    let mut h = Matrix3::zeros();
    h[(1, 2)] = -x / (d * d);
    h[(2, 1)] = h[(1, 2)];
    h[(2, 2)] = 2.0 * p.theta1 * x / (d * d * d);
    (g, h)
}

#[test]
fn closed_form_matches_exact_trace_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst: f64 = 0.0;
    for _ in 0..300 {
        let (x, w, p) = random_setting(&mut rng);
        let closed = firth_correction(&x, &w, &p).unwrap().to_vector();
        let exact = exact_correction(&x, &w, &p, 0.1, 18.0);
        worst = worst.max(max_rel(closed.as_slice(), &exact));
    }
    assert!(worst < 1e-10, "worst relative error {worst:e}");
}

#[test]
fn trace_route_agrees_on_reference_designs() {
    let dom = DoseDomain::new(0.001, 150.0).unwrap();
    let noise = NoiseModel::new(0.1).unwrap();
    for theta2 in [1.0, 12.5, 25.0, 50.0, 75.0, 100.0, 1000.0] {
        for theta2_g in [12.5, 50.0, 100.0] {
            let design = d_optimal_design(&dom, theta2_g).unwrap();
            let p = EmaxParams::new(2.0, 0.467, theta2);
            let closed = firth_correction(&design.points(), &design.weights, &p).unwrap().to_vector();
            let trace = correction_via_trace(&design.points(), &design.weights, &p, &noise, 18.0).unwrap().to_vector();
            assert!(max_rel(closed.as_slice(), trace.as_slice()) < 1e-10, "{theta2} {theta2_g}: {closed} vs {trace}");
        }
    }
}

#[test]
fn correction_ignores_sigma_and_sample_size() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for _ in 0..50 {
        let (x, w, p) = random_setting(&mut rng);
        let base = exact_correction(&x, &w, &p, 1.0, 1.0);
        for (sigma, n) in [(0.01, 3.0), (0.1, 18.0), (7.0, 1000.0), (0.3, 2.5)] {
            assert_eq!(base, exact_correction(&x, &w, &p, sigma, n), "sigma {sigma} n {n}");
        }
    }
    let dom = DoseDomain::new(0.001, 150.0).unwrap();
    let design = d_optimal_design(&dom, 50.0).unwrap();
    let p = EmaxParams::new(2.0, 0.467, 50.0);
    let closed = firth_correction(&design.points(), &design.weights, &p).unwrap().to_vector();
    for (sigma, n) in [(0.01, 3.0), (0.1, 18.0), (7.0, 1000.0)] {
        let noise = NoiseModel::new(sigma).unwrap();
        let trace = correction_via_trace(&design.points(), &design.weights, &p, &noise, n).unwrap().to_vector();
        assert!(max_rel(closed.as_slice(), trace.as_slice()) < 1e-12);
    }
}

#[test]
fn correction_ignores_point_labels() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for _ in 0..1000 {
        let (x, w, p) = random_setting(&mut rng);
        let base = firth_correction(&x, &w, &p).unwrap().to_vector();
        for perm in [[0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
            let xp: Vec<f64> = perm.iter().map(|&i| x[i]).collect();
            let wp: Vec<f64> = perm.iter().map(|&i| w[i]).collect();
            let other = firth_correction(&xp, &wp, &p).unwrap().to_vector();
            assert!(max_rel(base.as_slice(), other.as_slice()) < 1e-12, "{base} vs {other}");
        }
    }
}

#[test]
fn moments_satisfy_cauchy_schwarz() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    for _ in 0..1000 {
        let (x, mut w, p) = random_setting(&mut rng);
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= total);
        let m = DesignMoments::new(&x, &w, p.theta2).unwrap();
        assert!(m.v11 > 0.0 && m.v12 > 0.0 && m.d > 0.0);
        assert!((m.v11 - (m.m[2][2] - m.m[1][1].powi(2))).abs() < 1e-14 * m.m[2][2]);
        assert!((m.v12 - (m.m[2][4] - m.m[1][2].powi(2))).abs() < 1e-14 * m.m[2][4]);
        assert!(
            (m.cov12 - (m.m[2][3] - m.m[1][1] * m.m[1][2])).abs() < 1e-14 * m.m[2][3].abs().max(m.m[1][1] * m.m[1][2])
        );
    }
    let m = DesignMoments::new(&[2.0, 2.0, 2.0], &[0.2, 0.3, 0.5], 1.0).unwrap();
    assert!(m.is_degenerate());
    // two support points leave the Gram determinant at zero
    let m = DesignMoments::new(&[0.0, 5.0, 5.0], &[0.5, 0.25, 0.25], 3.0).unwrap();
    assert!(m.v11 > 0.0 && m.d == 0.0 && m.is_degenerate());
    assert!(firth_correction(&[0.0, 5.0, 5.0], &[0.5, 0.25, 0.25], &EmaxParams::new(0.0, 1.0, 3.0)).is_err());
}

#[test]
fn score_vanishes_at_the_mle() {
    let p = EmaxParams::new(2.0, 0.467, 50.0);
    let dom = DoseDomain::new(0.001, 150.0).unwrap();
    let x = d_optimal_design(&dom, 50.0).unwrap().points();
    let s = SufficientStats::new(x, [6, 6, 6], x.map(|x| eta(x, &p).unwrap() + 0.01 * x.sin())).unwrap();
    assert_eq!(classify(&s).class, ShapeClass::IncreasingConcave);
    let hat = mle(&s).unwrap();
    let u = score(&s, &hat, &NoiseModel::new(0.1).unwrap()).unwrap();
    assert!(u.amax() < 1e-8, "{u}");
}

#[test]
fn modified_score_jacobian_is_not_symmetric() {
    let s = SufficientStats::new([0.001, 30.0, 150.0], [6, 6, 6], [2.0, 2.1, 2.5]).unwrap();
    let noise = NoiseModel::new(0.1).unwrap();
    let p = EmaxParams::new(2.0, 0.6, 40.0);
    let v = p.to_vector();
    let mut jac = Matrix3::zeros();
    for k in 0..3 {
        let h = 1e-6 * v[k].abs().max(1.0);
        let (mut up, mut dn) = (v, v);
        up[k] += h;
        dn[k] -= h;
        let col = (modified_score(&s, &EmaxParams::from_vector(&up), &noise).unwrap()
            - modified_score(&s, &EmaxParams::from_vector(&dn), &noise).unwrap())
            / (2.0 * h);
        jac.set_column(k, &col);
    }
    let asym = (jac - jac.transpose()).amax();
    assert!(asym > 1e-4 * jac.amax(), "jacobian {jac}");
}

#[test]
fn solver_handles_convex_samples() {
    let truth = EmaxParams::new(2.0, 0.467, 50.0);
    let dom = DoseDomain::new(0.001, 150.0).unwrap();
    let x = d_optimal_design(&dom, 12.5).unwrap().points();
    let noise = NoiseModel::new(0.1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let opts = SolverOpts::default();
    let (mut tried, mut solved) = (0, 0);
    while tried < 200 {
        let y = x.map(|x| {
            let d = Normal::new(eta(x, &truth).unwrap(), 0.1 / 6f64.sqrt()).unwrap();
            d.sample(&mut rng)
        });
        let s = SufficientStats::new(x, [6, 6, 6], y).unwrap();
        if !classify(&s).class.is_case2() {
            continue;
        }
        tried += 1;
        if let Ok(r) = firth_root(&s, &noise, None, &opts) {
            solved += 1;
            assert!(r.params.is_admissible(&dom));
            let u = modified_score(&s, &r.params, &noise).unwrap();
            assert!(u.amax() <= opts.tol, "{u}");
        }
    }
    assert!(solved >= 198, "{solved} of {tried}");
}

#[test]
fn firth_root_differs_from_mle_on_concave_data() {
    let truth = EmaxParams::new(2.0, 0.467, 50.0);
    let x = [0.001, 30.0, 150.0];
    let s = SufficientStats::new(x, [6, 6, 6], x.map(|x| eta(x, &truth).unwrap())).unwrap();
    let noise = NoiseModel::new(0.1).unwrap();
    let hat = mle(&s).unwrap();
    let r = firth_root(&s, &noise, Some(&hat), &SolverOpts::default()).unwrap();
    let diff = (r.params.to_vector() - hat.to_vector()).abs();
    assert!(diff.amax() > 0.0);
    assert!((r.params.theta2 - hat.theta2).abs() < 0.5 * hat.theta2, "{:?} vs {hat:?}", r.params);
}

/// Draws of the raw-data score and observed information at the truth.
struct Draws {
    o: Vec<Matrix3<f64>>,
    u: Vec<Vector3<f64>>,
}

fn draw_scores(p: &EmaxParams, x: [f64; 3], n_each: usize, sigma: f64, draws: usize, seed: u64) -> Draws {
    let noise = NoiseModel::new(sigma).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Draws { o: Vec::with_capacity(draws), u: Vec::with_capacity(draws) };
    let mut obs = Vec::with_capacity(3 * n_each);
    for _ in 0..draws {
        obs.clear();
        for &xi in &x {
            let d = Normal::new(eta(xi, p).unwrap(), sigma).unwrap();
            for _ in 0..n_each {
                obs.push((xi, d.sample(&mut rng)));
            }
        }
        out.o.push(observed_information_raw(&obs, p, &noise).unwrap());
        out.u.push(score_raw(&obs, p, &noise).unwrap());
    }
    out
}

fn mean_se(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = v.clone().count() as f64;
    let m = v.clone().sum::<f64>() / n;
    let var = v.map(|z| (z - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

#[test]
fn moments_of_score_match_information_small_sample() {
    let p = EmaxParams::new(2.0, 0.467, 50.0);
    let x = [0.001, 30.00128, 150.0];
    let d = draw_scores(&p, x, 6, 0.1, 20_000, 36);
    let mut info = Matrix3::zeros();
    for &xi in &x {
        let (g, _) = derivs(xi, &p);
        info += 6.0 / 0.01 * g * g.transpose();
    }
    for (i, j) in [(1, 2), (2, 2)] {
        let (m, se) = mean_se(d.o.iter().map(|o| o[(i, j)]));
        assert!((m - info[(i, j)]).abs() <= 3.0 * se, "O[{i},{j}] {m} vs {} (se {se})", info[(i, j)]);
    }
}
