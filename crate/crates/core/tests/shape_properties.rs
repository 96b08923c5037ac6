use emax_core::model::{eta, DoseDomain, EmaxParams};
use emax_core::shape::{
    class_inequalities, classify, limiting_fit, reduce, reduce_pairs, LimitingFit, ShapeClass, SufficientStats,
};
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn design() -> impl Strategy<Value = ([f64; 3], [usize; 3])> {
    (0.0f64..5.0, 0.01f64..0.99, 1.0f64..200.0, 1usize..10, 1usize..10, 1usize..10)
        .prop_map(|(a, f, w, n1, n2, n3)| ([a, a + f * w, a + w], [n1, n2, n3]))
}

fn means() -> impl Strategy<Value = [f64; 3]> {
    prop::array::uniform3(-3.0f64..3.0)
}

/// Random increasing concave curve on the design's domain, both signs of the
/// asymptote allowed.
fn random_curve(rng: &mut impl Rng, a: f64, b: f64) -> EmaxParams {
    let theta2 = -a + (b - a) * 10f64.powf(rng.random_range(-3.0..3.0));
    let theta1 = rng.random_range(0.01..5.0f64).copysign(theta2);
    EmaxParams::new(rng.random_range(-3.0..3.0), theta1, theta2)
}

fn sse_curve(s: &SufficientStats, p: &EmaxParams) -> f64 {
    s.weighted_sse(|x| eta(x, p).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn exactly_one_class((x, n) in design(), y in means()) {
        let s = SufficientStats::new(x, n, y).unwrap();
        let c = classify(&s);
        prop_assert!(c.ties.is_empty());
        let flags = [
            c.class == ShapeClass::IncreasingConcave,
            c.class.is_case1(),
            c.class.is_case2(),
        ];
        prop_assert_eq!(flags.iter().filter(|&&f| f).count(), 1);
    }

    #[test]
    fn case1_has_y2_at_least_y3((x, n) in design(), y in means()) {
        let s = SufficientStats::new(x, n, y).unwrap();
        if classify(&s).class.is_case1() {
            prop_assert!(y[1] >= y[2]);
        }
    }

    #[test]
    fn limiting_fit_contracts((x, n) in design(), y in means()) {
        let s = SufficientStats::new(x, n, y).unwrap();
        let c = classify(&s);
        match (c.class, limiting_fit(&s, &c)) {
            (ShapeClass::IncreasingConcave, r) => prop_assert!(r.is_err()),
            (ShapeClass::Case1a, Ok(LimitingFit::StepAtA { low, high, .. })) => prop_assert!(low <= high),
            (ShapeClass::Case2a, Ok(LimitingFit::Line { slope, .. })) => prop_assert!(slope > 0.0),
            (ShapeClass::Case1b | ShapeClass::Case2b, Ok(LimitingFit::Constant { .. })) => {}
            (class, fit) => prop_assert!(false, "{:?} gave {:?}", class, fit),
        }
    }

    #[test]
    fn classification_ignores_observation_order(ys in prop::collection::vec(-3.0f64..3.0, 6), perm in Just(()).prop_perturb(|_, mut r| {
        let mut v: Vec<usize> = (0..6).collect();
        for i in (1..6).rev() { v.swap(i, r.random_range(0..=i)); }
        v
    })) {
        let doses = [0.0, 0.0, 1.0, 1.0, 4.0, 4.0];
        let pairs: Vec<_> = doses.iter().copied().zip(ys.iter().copied()).collect();
        let shuffled: Vec<_> = perm.iter().map(|&i| pairs[i]).collect();
        let a = reduce_pairs(&pairs).unwrap();
        let b = reduce_pairs(&shuffled).unwrap();
        prop_assert_eq!(a.doses, b.doses);
        prop_assert_eq!(a.counts, b.counts);
        for i in 0..3 {
            prop_assert!((a.means[i] - b.means[i]).abs() < 1e-14);
        }
        prop_assert_eq!(classify(&a).class, classify(&b).class);
    }
}

#[test]
fn matrix_route_matches_direct_route() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut seen = [0usize; 5];
    for _ in 0..100_000 {
        let a = rng.random_range(0.0..2.0);
        let w: f64 = rng.random_range(1.0..200.0);
        let x = [a, a + rng.random_range(0.01..0.99) * w, a + w];
        let n = [rng.random_range(1..8), rng.random_range(1..8), rng.random_range(1..8)];
        let scale: f64 = rng.random_range(0.01..1.0);
        let y: [f64; 3] = std::array::from_fn(|i| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (x[i] / w).sqrt() + scale * z
        });
        let s = SufficientStats::new(x, n, y).unwrap();
        let direct = classify(&s).class;
        let by_matrix = class_inequalities(x, n).classify_means(&Vector3::from(y)).unwrap();
        assert_eq!(direct, by_matrix, "x={x:?} n={n:?} y={y:?}");
        seen[direct as usize] += 1;
    }
    assert!(seen.iter().all(|&k| k > 0), "some class never occurred: {seen:?}");
}

#[test]
fn limiting_fit_beats_every_curve_off_the_concave_increasing_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut samples = 0;
    while samples < 2000 {
        let a = rng.random_range(0.0..2.0);
        let w: f64 = rng.random_range(1.0..200.0);
        let x = [a, a + rng.random_range(0.01..0.99) * w, a + w];
        let n = [rng.random_range(1..8), rng.random_range(1..8), rng.random_range(1..8)];
        let y: [f64; 3] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
        let s = SufficientStats::new(x, n, y).unwrap();
        let c = classify(&s);
        if c.class == ShapeClass::IncreasingConcave {
            continue;
        }
        samples += 1;
        let fit = limiting_fit(&s, &c).unwrap();
        let best = s.weighted_sse(|t| fit.value(t));
        for _ in 0..100 {
            let p = random_curve(&mut rng, a, a + w);
            assert!(p.is_admissible(&DoseDomain::new(a, a + w).unwrap()));
            let other = sse_curve(&s, &p);
            assert!(best < other, "{:?} fit {fit:?} sse {best} vs {p:?} sse {other}", c.class);
        }
    }
}

#[test]
fn reduce_examples() {
    let raw = vec![(0.0, vec![1.0]), (1.0, vec![2.0]), (2.0, vec![1.5])];
    let s = reduce(&raw).unwrap();
    let c = classify(&s);
    assert_eq!(c.class, ShapeClass::Case1a);
    assert_eq!(limiting_fit(&s, &c).unwrap(), LimitingFit::StepAtA { knot: 0.0, low: 1.0, high: 1.75 });

    assert!(reduce(&[(0.0, vec![1.0]), (1.0, vec![2.0])]).is_err());
    assert!(reduce(&[(0.0, vec![1.0]), (1.0, vec![]), (2.0, vec![3.0])]).is_err());
}

/// Two-point lemma: with `y_* >= y^*` and `z_* < z^*`, replacing the pair
/// `(z_*, z^*)` by its weighted mean lowers the weighted squared error.
#[test]
fn pooling_an_increasing_pair_reduces_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..10_000 {
        let n_lo: f64 = rng.random_range(0.1..20.0);
        let n_hi: f64 = rng.random_range(0.1..20.0);
        let y_hi_dose: f64 = rng.random_range(-5.0..5.0);
        let y_lo_dose = y_hi_dose + rng.random_range(0.0..5.0);
        let z_lo: f64 = rng.random_range(-5.0..5.0);
        let z_hi = z_lo + rng.random_range(1e-6..5.0);
        let zbar = (n_lo * z_lo + n_hi * z_hi) / (n_lo + n_hi);
        let lhs = n_lo * (y_lo_dose - z_lo).powi(2) + n_hi * (y_hi_dose - z_hi).powi(2);
        let rhs = n_lo * (y_lo_dose - zbar).powi(2) + n_hi * (y_hi_dose - zbar).powi(2);
        assert!(lhs > rhs, "lhs {lhs} rhs {rhs}");
        let direct = n_lo * n_hi / (n_lo + n_hi) * (z_hi - z_lo) * (2.0 * (y_lo_dose - y_hi_dose) + (z_hi - z_lo));
        assert!((lhs - rhs - direct).abs() <= 1e-9 * lhs.max(1.0));
    }
}

fn weighted_ols(x: &[f64], y: &[f64], w: &[f64]) -> (f64, f64) {
    let sw: f64 = w.iter().sum();
    let xm = x.iter().zip(w).map(|(x, w)| x * w).sum::<f64>() / sw;
    let ym = y.iter().zip(w).map(|(y, w)| y * w).sum::<f64>() / sw;
    let sxy: f64 = (0..x.len()).map(|i| w[i] * (x[i] - xm) * (y[i] - ym)).sum();
    let sxx: f64 = (0..x.len()).map(|i| w[i] * (x[i] - xm).powi(2)).sum();
    let m = sxy / sxx;
    (m, ym - m * xm)
}

/// A line whose slope opposes the least-squares slope is beaten by the
/// constant `t q + (1 - t) q0`, `t = |m0| / (|m| + |m0|)`.
#[test]
fn constant_beats_line_of_opposite_slope() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..10_000 {
        let k = rng.random_range(3..8);
        let x: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..10.0)).collect();
        let y: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
        let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..5.0)).collect();
        let (m0, q0) = weighted_ols(&x, &y, &w);
        let m = -m0.signum() * rng.random_range(0.0..3.0);
        let q = rng.random_range(-5.0..5.0);
        assert!(m * m0 <= 0.0);
        let denom = m.abs() + m0.abs();
        let t = if denom == 0.0 { 0.0 } else { m0.abs() / denom };
        let c = t * q + (1.0 - t) * q0;
        let sse = |f: &dyn Fn(f64) -> f64| (0..k).map(|i| w[i] * (y[i] - f(x[i])).powi(2)).sum::<f64>();
        let line = sse(&|s| m * s + q);
        let constant = sse(&|_| c);
        assert!(line >= constant - 1e-12 * line.max(1.0), "line {line} constant {constant}");
        if (m - m0).abs() > 1e-9 || (q - q0).abs() > 1e-9 {
            assert!(line > constant);
        }
    }
}
