//! Helpers shared by the integration tests.
#![allow(dead_code, clippy::needless_range_loop)]

use emax_core::model::EmaxParams;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use rand::Rng;

type Q = BigRational;

fn q(x: f64) -> Q {
    Q::from_float(x).expect("finite input")
}

/// `v` rounded to a 24-bit mantissa, which keeps exact rational arithmetic on
/// random inputs cheap.
pub fn short(v: f64) -> f64 {
    if v == 0.0 {
        return 0.0;
    }
    let e = v.abs().log2().floor() as i32 - 23;
    (v / 2f64.powi(e)).round() * 2f64.powi(e)
}

/// `A_t = 1/2 tr(I^-1 Q_t)` in exact rational arithmetic, with
/// `I = (n / sigma^2) sum_i w_i g_i g_i'` and
/// `Q_t = (n / sigma^2) sum_i w_i g_{i,t} H_i` built from the gradient `g` and
/// Hessian `H` of the mean written out by hand.
pub fn exact_correction(x: &[f64], w: &[f64], p: &EmaxParams, sigma: f64, n: f64) -> [f64; 3] {
    let (t1, t2) = (q(p.theta1), q(p.theta2));
    let scale = q(n) / (q(sigma) * q(sigma));
    let two = Q::from_integer(2.into());
    let mut info = vec![vec![Q::zero(); 3]; 3];
    let mut qm = vec![vec![vec![Q::zero(); 3]; 3]; 3];
    for (&xi, &wi) in x.iter().zip(w) {
        let xq = q(xi);
        let wq = q(wi) * &scale;
        let d = &xq + &t2;
        let g = [Q::one(), &xq / &d, -(&t1 * &xq) / (&d * &d)];
        let mut h = vec![vec![Q::zero(); 3]; 3];
        h[1][2] = -(&xq) / (&d * &d);
        h[2][1] = h[1][2].clone();
        h[2][2] = &two * &t1 * &xq / (&d * &d * &d);
        for i in 0..3 {
            for j in 0..3 {
                info[i][j] += &wq * &g[i] * &g[j];
                for t in 0..3 {
                    qm[t][i][j] += &wq * &g[t] * &h[i][j];
                }
            }
        }
    }
    let cof = |i: usize, j: usize| {
        let r: Vec<usize> = (0..3).filter(|&k| k != i).collect();
        let s: Vec<usize> = (0..3).filter(|&k| k != j).collect();
        let v = &info[r[0]][s[0]] * &info[r[1]][s[1]] - &info[r[0]][s[1]] * &info[r[1]][s[0]];
        if (i + j).is_multiple_of(2) {
            v
        } else {
            -v
        }
    };
    let det = &info[0][0] * cof(0, 0) + &info[0][1] * cof(0, 1) + &info[0][2] * cof(0, 2);
    let mut out = [0.0; 3];
    for (t, o) in out.iter_mut().enumerate() {
        // (I^-1)_{ik} = cof(k, i) / det
        let mut tr = Q::zero();
        for i in 0..3 {
            for k in 0..3 {
                tr += cof(k, i) * &qm[t][k][i];
            }
        }
        *o = (tr / (&det * &two)).to_f64().expect("finite correction");
    }
    out
}

/// Random three-point design and admissible parameters, with the asymptote
/// anywhere from `1e-4 (b - a)` to `1e4 (b - a)` right of the lowest dose.
pub fn random_setting(rng: &mut impl Rng) -> (Vec<f64>, Vec<f64>, EmaxParams) {
    let a = if rng.random_bool(0.3) { 0.0 } else { short(rng.random_range(0.0..5.0)) };
    let b = a + short(rng.random_range(1.0..300.0));
    let x = vec![a, short(a + rng.random_range(0.02..0.98) * (b - a)), b];
    let w = (0..3).map(|_| short(rng.random_range(0.05..1.0))).collect();
    let theta2 = -a + short((b - a) * 10f64.powf(rng.random_range(-4.0..4.0)));
    let theta1 = short(rng.random_range(0.05..5.0f64)).copysign(theta2);
    (x, w, EmaxParams::new(short(rng.random_range(-3.0..3.0)), theta1, theta2))
}

pub fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-300)).fold(0.0, f64::max)
}
