//! Sufficient statistics and the geometric shape of three sample means.
//!
//! Three means either lie on an increasing concave curve (the MLE exists and
//! interpolates them) or fall into one of the non-existence cases, each with a
//! best-fitting limit curve outside the Emax family:
//!
//! | class    | condition                          | limiting fit            |
//! |----------|------------------------------------|-------------------------|
//! | Case 1a  | `m1 > m2`, not increasing, `y1 < y23` | step at the lowest dose |
//! | Case 1b  | `m1 > m2`, not increasing, `y1 >= y23` | constant (grand mean) |
//! | Case 2a  | `m1 <= m2`, `m0 > 0`                | weighted OLS line       |
//! | Case 2b  | `m1 <= m2`, `m0 <= 0`               | constant (grand mean)   |

use nalgebra::{Matrix3, RowVector3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SufficientStats {
    pub doses: [f64; 3],
    pub counts: [usize; 3],
    pub means: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeStats {
    /// Slope of the chord from the first to the second point.
    pub m1: f64,
    /// Slope of the chord from the first to the third point.
    pub m2: f64,
    pub m0: f64,
    pub q0: f64,
    pub ybar23: f64,
    pub ybar: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeClass {
    IncreasingConcave,
    Case1a,
    Case1b,
    Case2a,
    Case2b,
}

/// An exact tie in one of the defining inequalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tie {
    SlopesEqual,
    Y1EqualsY2,
    Y2EqualsY3,
    Y1EqualsY23,
    ZeroOlsSlope,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub class: ShapeClass,
    pub stats: ShapeStats,
    /// Ties that were resolved by the tie-break rule; empty almost surely.
    pub ties: Vec<Tie>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LimitingFit {
    /// `low` at `knot`, `high` everywhere to its right.
    StepAtA {
        knot: f64,
        low: f64,
        high: f64,
    },
    Constant {
        level: f64,
    },
    Line {
        slope: f64,
        intercept: f64,
    },
}

impl ShapeClass {
    pub fn is_case1(self) -> bool {
        matches!(self, ShapeClass::Case1a | ShapeClass::Case1b)
    }

    pub fn is_case2(self) -> bool {
        matches!(self, ShapeClass::Case2a | ShapeClass::Case2b)
    }

    pub fn label(self) -> &'static str {
        match self {
            ShapeClass::IncreasingConcave => "increasing_concave",
            ShapeClass::Case1a => "case1a",
            ShapeClass::Case1b => "case1b",
            ShapeClass::Case2a => "case2a",
            ShapeClass::Case2b => "case2b",
        }
    }
}

impl SufficientStats {
    pub fn new(doses: [f64; 3], counts: [usize; 3], means: [f64; 3]) -> Result<Self> {
        if doses.iter().chain(means.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("doses and means must be finite".into()));
        }
        if !(doses[0] < doses[1] && doses[1] < doses[2]) {
            return Err(Error::InvalidInput(format!("doses must be strictly increasing, got {doses:?}")));
        }
        if counts.contains(&0) {
            return Err(Error::InvalidInput("every dose needs at least one response".into()));
        }
        Ok(Self { doses, counts, means })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Empirical design weights `n_i / n`.
    pub fn weights(&self) -> [f64; 3] {
        let n = self.total() as f64;
        self.counts.map(|c| c as f64 / n)
    }

    /// `sum_i n_i (ybar_i - f(x_i))^2`.
    pub fn weighted_sse(&self, f: impl Fn(f64) -> f64) -> f64 {
        (0..3)
            .map(|i| {
                let r = self.means[i] - f(self.doses[i]);
                self.counts[i] as f64 * r * r
            })
            .sum()
    }
}

/// Group raw observations by dose and reduce them to means and counts.
pub fn reduce(raw: &[(f64, Vec<f64>)]) -> Result<SufficientStats> {
    let mut groups: Vec<(f64, usize, f64)> = Vec::new();
    for (dose, responses) in raw {
        if !dose.is_finite() || responses.iter().any(|y| !y.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite value in group at dose {dose}")));
        }
        if responses.is_empty() {
            return Err(Error::InvalidInput(format!("no responses at dose {dose}")));
        }
        let sum: f64 = responses.iter().sum();
        match groups.iter_mut().find(|g| g.0 == *dose) {
            Some(g) => {
                g.1 += responses.len();
                g.2 += sum;
            }
            None => groups.push((*dose, responses.len(), sum)),
        }
    }
    if groups.len() != 3 {
        return Err(Error::InvalidInput(format!("expected exactly 3 distinct doses, found {}", groups.len())));
    }
    groups.sort_by(|a, b| a.0.total_cmp(&b.0));
    SufficientStats::new(
        [groups[0].0, groups[1].0, groups[2].0],
        [groups[0].1, groups[1].1, groups[2].1],
        [0, 1, 2].map(|i| groups[i].2 / groups[i].1 as f64),
    )
}

/// Same as [`reduce`] for a flat list of `(dose, response)` pairs.
pub fn reduce_pairs(pairs: &[(f64, f64)]) -> Result<SufficientStats> {
    reduce(&group_pairs(pairs))
}

pub fn group_pairs(pairs: &[(f64, f64)]) -> Vec<(f64, Vec<f64>)> {
    let mut groups: Vec<(f64, Vec<f64>)> = Vec::new();
    for &(x, y) in pairs {
        match groups.iter_mut().find(|g| g.0 == x) {
            Some(g) => g.1.push(y),
            None => groups.push((x, vec![y])),
        }
    }
    groups
}

pub fn shape_stats(s: &SufficientStats) -> ShapeStats {
    let [x1, x2, x3] = s.doses;
    let [y1, y2, y3] = s.means;
    let n = s.counts.map(|c| c as f64);
    let m1 = (y2 - y1) / (x2 - x1);
    let m2 = (y3 - y1) / (x3 - x1);

    let total: f64 = n.iter().sum();
    let xw = (0..3).map(|i| n[i] * s.doses[i]).sum::<f64>() / total;
    let ybar = (0..3).map(|i| n[i] * s.means[i]).sum::<f64>() / total;
    let sxy: f64 = (0..3).map(|i| n[i] * (s.doses[i] - xw) * (s.means[i] - ybar)).sum();
    let sxx: f64 = (0..3).map(|i| n[i] * (s.doses[i] - xw).powi(2)).sum();
    let m0 = sxy / sxx;
    let q0 = ybar - m0 * xw;

    let ybar23 = (n[1] * y2 + n[2] * y3) / (n[1] + n[2]);
    ShapeStats { m1, m2, m0, q0, ybar23, ybar }
}

/// Classify the three means, resolving exact ties toward the non-strict side.
pub fn classify(s: &SufficientStats) -> Classification {
    let st = shape_stats(s);
    let [y1, y2, y3] = s.means;
    let mut ties = Vec::new();
    if st.m1 == st.m2 {
        ties.push(Tie::SlopesEqual);
    }
    let class = if st.m1 <= st.m2 {
        if st.m0 == 0.0 {
            ties.push(Tie::ZeroOlsSlope);
        }
        if st.m0 > 0.0 {
            ShapeClass::Case2a
        } else {
            ShapeClass::Case2b
        }
    } else {
        if y1 == y2 {
            ties.push(Tie::Y1EqualsY2);
        }
        if y2 == y3 {
            ties.push(Tie::Y2EqualsY3);
        }
        if y1 < y2 && y2 < y3 {
            ShapeClass::IncreasingConcave
        } else {
            if y1 == st.ybar23 {
                ties.push(Tie::Y1EqualsY23);
            }
            if y1 < st.ybar23 {
                ShapeClass::Case1a
            } else {
                ShapeClass::Case1b
            }
        }
    };
    Classification { class, stats: st, ties }
}

/// Linear-inequality systems `A ybar < 0` for each class of a fixed design.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassInequalities {
    pub exists: Matrix3<f64>,
    pub case1a: Matrix3<f64>,
    pub case1b: Matrix3<f64>,
    /// Case 2 holds iff `convex · ybar >= 0`.
    pub convex: RowVector3<f64>,
    /// Proportional to the weighted OLS slope `m0`.
    pub ols_slope: RowVector3<f64>,
}

pub fn class_inequalities(doses: [f64; 3], counts: [usize; 3]) -> ClassInequalities {
    let d1 = 1.0 / (doses[1] - doses[0]);
    let d2 = 1.0 / (doses[2] - doses[0]);
    let concavity = RowVector3::new(d1 - d2, -d1, d2);
    let n23 = (counts[1] + counts[2]) as f64;
    let (w2, w3) = (counts[1] as f64 / n23, counts[2] as f64 / n23);
    let below_y23 = RowVector3::new(1.0, -w2, -w3);
    let y3_below_y2 = RowVector3::new(0.0, -1.0, 1.0);
    ClassInequalities {
        exists: Matrix3::from_rows(&[concavity, RowVector3::new(1.0, -1.0, 0.0), RowVector3::new(0.0, 1.0, -1.0)]),
        case1a: Matrix3::from_rows(&[concavity, below_y23, y3_below_y2]),
        case1b: Matrix3::from_rows(&[concavity, -below_y23, y3_below_y2]),
        convex: concavity,
        ols_slope: {
            let n = counts.map(|c| c as f64);
            let xw = (0..3).map(|i| n[i] * doses[i]).sum::<f64>() / n.iter().sum::<f64>();
            RowVector3::new(n[0] * (doses[0] - xw), n[1] * (doses[1] - xw), n[2] * (doses[2] - xw))
        },
    }
}

impl ClassInequalities {
    /// Classification by the inequality systems alone; `None` on a boundary.
    pub fn classify_means(&self, means: &Vector3<f64>) -> Option<ShapeClass> {
        let neg = |v: Vector3<f64>| v.iter().all(|&c| c < 0.0);
        if neg(self.exists * means) {
            Some(ShapeClass::IncreasingConcave)
        } else if neg(self.case1a * means) {
            Some(ShapeClass::Case1a)
        } else if neg(self.case1b * means) {
            Some(ShapeClass::Case1b)
        } else if (self.convex * means)[0] >= 0.0 {
            if (self.ols_slope * means)[0] > 0.0 {
                Some(ShapeClass::Case2a)
            } else {
                Some(ShapeClass::Case2b)
            }
        } else {
            None
        }
    }
}

/// Best fit from the limit classes of the Emax family.
pub fn limiting_fit(s: &SufficientStats, c: &Classification) -> Result<LimitingFit> {
    let st = &c.stats;
    match c.class {
        ShapeClass::IncreasingConcave => Err(Error::NotApplicable),
        ShapeClass::Case1a => Ok(LimitingFit::StepAtA { knot: s.doses[0], low: s.means[0], high: st.ybar23 }),
        ShapeClass::Case1b | ShapeClass::Case2b => Ok(LimitingFit::Constant { level: st.ybar }),
        ShapeClass::Case2a => Ok(LimitingFit::Line { slope: st.m0, intercept: st.q0 }),
    }
}

impl LimitingFit {
    pub fn value(&self, x: f64) -> f64 {
        match *self {
            LimitingFit::StepAtA { knot, low, high } => {
                if x <= knot {
                    low
                } else {
                    high
                }
            }
            LimitingFit::Constant { level } => level,
            LimitingFit::Line { slope, intercept } => slope * x + intercept,
        }
    }
}
