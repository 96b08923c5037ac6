//! Replication study over guessed `theta2` values and the data-analysis
//! workflow that turns a sample into an estimate or a new-dose recommendation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::firth::{firth_root, FailureReason, SolverOpts};
use crate::mle::{fit_or_limit, mle, FitResult};
use crate::model::{d_optimal_design, d_optimal_x2, eta, DoseDomain, EmaxParams, NoiseModel, ThreePointDesign};
use crate::prob::{augmentation_point, shape_probabilities, ProbMethod, Scenario};
use crate::rng::{domain, stream};
use crate::shape::{classify, reduce, Classification, ShapeClass, SufficientStats};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Truth, domain, noise and replicates per dose; the central dose is
    /// replaced row by row.
    pub scenario: Scenario,
    pub theta2_g_list: Vec<f64>,
    pub replicates: usize,
    pub seed: u64,
    pub solver: SolverOpts,
    /// Method for the theoretical columns.
    pub theory: ProbMethod,
}

impl SimConfig {
    /// The reference setting: `a = 0.001`, `b = 150`, truth `(2, 0.467, 50)`,
    /// `sigma = 0.1`, six responses per dose.
    pub fn reference(seed: u64) -> Self {
        let dom = DoseDomain { a: 0.001, b: 150.0 };
        let truth = EmaxParams::new(2.0, 0.467, 50.0);
        let design = d_optimal_design(&dom, truth.theta2).expect("valid reference design");
        Self {
            scenario: Scenario { truth, design, noise: NoiseModel { sigma: 0.1 }, n_per_point: [6, 6, 6] },
            theta2_g_list: vec![12.5, 25.0, 50.0, 75.0, 100.0],
            replicates: 10_000,
            seed,
            solver: SolverOpts::default(),
            theory: ProbMethod::quadrature(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::InvalidInput("replicates must be at least 1".into()));
        }
        if self.theta2_g_list.is_empty() {
            return Err(Error::InvalidInput("theta2_g list is empty".into()));
        }
        if self.theta2_g_list.len() >= 1 << 24 || self.replicates as u64 >= 1 << 32 {
            return Err(Error::InvalidInput("too many rows or replicates for the keyed random streams".into()));
        }
        Scenario::new(self.scenario.truth, self.scenario.design, self.scenario.noise, self.scenario.n_per_point)?;
        for &t in &self.theta2_g_list {
            d_optimal_x2(&self.scenario.domain(), t)?;
        }
        Ok(())
    }

    fn row_scenario(&self, theta2_g: f64) -> Result<Scenario> {
        self.scenario.with_x2(d_optimal_x2(&self.scenario.domain(), theta2_g)?)
    }
}

/// What happened to one simulated sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub row: usize,
    pub replicate: usize,
    pub doses: [f64; 3],
    pub responses: [Vec<f64>; 3],
    pub stats: SufficientStats,
    pub class: ShapeClass,
    pub fit: FitResult,
    pub firth_failure: Option<FailureReason>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRow {
    pub theta2_g: f64,
    pub x2: f64,
    pub replicates: usize,
    pub n_exists: usize,
    pub n_case1: usize,
    pub n_case2: usize,
    pub n_firth_success_case1: usize,
    pub n_firth_success_case2: usize,
    /// Exact MLEs refused as numerically collinear.
    pub n_mle_degenerate: usize,
    pub firth_failures_case1: BTreeMap<FailureReason, usize>,
    pub firth_failures_case2: BTreeMap<FailureReason, usize>,
    pub pct_mle_exists: f64,
    pub pct_case1: f64,
    pub pct_case2: f64,
    /// `None` when no sample of the class occurred.
    pub pct_firth_success_case1: Option<f64>,
    pub pct_firth_success_case2: Option<f64>,
    pub theory_mle_exists: f64,
    pub theory_case1: f64,
    pub theory_case2: f64,
}

/// Draw, classify and estimate one replicate. Keyed by `(seed, row, replicate)`
/// so it can be replayed alone.
pub fn run_replicate(cfg: &SimConfig, row: usize, replicate: usize) -> Result<ReplicateOutcome> {
    let theta2_g = *cfg.theta2_g_list.get(row).ok_or_else(|| Error::InvalidInput(format!("row {row} out of range")))?;
    let sc = cfg.row_scenario(theta2_g)?;
    let doses = sc.design.points();
    let mut rng = stream(cfg.seed, domain::SIMULATION, row as u64, replicate as u64);
    let mut responses: [Vec<f64>; 3] = Default::default();
    for (i, ys) in responses.iter_mut().enumerate() {
        let normal =
            Normal::new(eta(doses[i], &sc.truth)?, sc.noise.sigma).map_err(|e| Error::InvalidInput(e.to_string()))?;
        *ys = (0..sc.n_per_point[i]).map(|_| normal.sample(&mut rng)).collect();
    }
    let raw: Vec<(f64, Vec<f64>)> = doses.iter().copied().zip(responses.iter().cloned()).collect();
    let stats = reduce(&raw)?;
    let c = classify(&stats);
    let (fit, firth_failure) = if c.class == ShapeClass::IncreasingConcave {
        (fit_or_limit(&stats).unwrap_or_else(|e| FitResult::FirthFailure { reason: e.to_string() }), None)
    } else {
        match firth_root(&stats, &sc.noise, None, &cfg.solver) {
            Ok(r) => (
                FitResult::FirthEstimate { params: r.params, score_norm: r.score_norm, iterations: r.iterations },
                None,
            ),
            Err(reason) => (FitResult::FirthFailure { reason: reason.to_string() }, Some(reason)),
        }
    };
    Ok(ReplicateOutcome { row, replicate, doses, responses, stats, class: c.class, fit, firth_failure })
}

fn pct(k: usize, n: usize) -> f64 {
    100.0 * k as f64 / n as f64
}

pub fn run_row(cfg: &SimConfig, row: usize) -> Result<SimRow> {
    let theta2_g = cfg.theta2_g_list[row];
    let sc = cfg.row_scenario(theta2_g)?;
    let outcomes =
        (0..cfg.replicates).into_par_iter().map(|r| run_replicate(cfg, row, r)).collect::<Result<Vec<_>>>()?;
    let mut out = SimRow {
        theta2_g,
        x2: sc.design.x2,
        replicates: cfg.replicates,
        n_exists: 0,
        n_case1: 0,
        n_case2: 0,
        n_firth_success_case1: 0,
        n_firth_success_case2: 0,
        n_mle_degenerate: 0,
        firth_failures_case1: BTreeMap::new(),
        firth_failures_case2: BTreeMap::new(),
        pct_mle_exists: 0.0,
        pct_case1: 0.0,
        pct_case2: 0.0,
        pct_firth_success_case1: None,
        pct_firth_success_case2: None,
        theory_mle_exists: 0.0,
        theory_case1: 0.0,
        theory_case2: 0.0,
    };
    for o in &outcomes {
        let success = o.fit.is_estimate();
        match o.class {
            ShapeClass::IncreasingConcave => {
                out.n_exists += 1;
                if !success {
                    out.n_mle_degenerate += 1;
                }
            }
            c if c.is_case1() => {
                out.n_case1 += 1;
                if success {
                    out.n_firth_success_case1 += 1;
                } else if let Some(r) = o.firth_failure {
                    *out.firth_failures_case1.entry(r).or_default() += 1;
                }
            }
            _ => {
                out.n_case2 += 1;
                if success {
                    out.n_firth_success_case2 += 1;
                } else if let Some(r) = o.firth_failure {
                    *out.firth_failures_case2.entry(r).or_default() += 1;
                }
            }
        }
    }
    let n = cfg.replicates;
    out.pct_mle_exists = pct(out.n_exists, n);
    out.pct_case1 = pct(out.n_case1, n);
    out.pct_case2 = pct(out.n_case2, n);
    out.pct_firth_success_case1 = (out.n_case1 > 0).then(|| pct(out.n_firth_success_case1, out.n_case1));
    out.pct_firth_success_case2 = (out.n_case2 > 0).then(|| pct(out.n_firth_success_case2, out.n_case2));
    let p = shape_probabilities(&sc, &cfg.theory)?;
    out.theory_mle_exists = 100.0 * p.p_exists;
    out.theory_case1 = 100.0 * p.p_case1();
    out.theory_case2 = 100.0 * p.p_case2;
    Ok(out)
}

/// One row per guessed `theta2`; identical for identical configs regardless of
/// thread count.
pub fn run_table1(cfg: &SimConfig) -> Result<Vec<SimRow>> {
    cfg.validate()?;
    (0..cfg.theta2_g_list.len()).map(|row| run_row(cfg, row)).collect()
}

pub fn format_pct(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.2}"))
}

/// Aligned text table in the usual layout: empirical percentages with the
/// theoretical value in parentheses.
pub fn table1_text(rows: &[SimRow]) -> String {
    let head = ["theta2_g", "% MLE exists", "% Case 1", "% Firth ok (Case 1)", "% Case 2", "% Firth ok (Case 2)"];
    let body: Vec<[String; 6]> = rows
        .iter()
        .map(|r| {
            [
                format!("{}", r.theta2_g),
                format!("{:.2} ({:.2})", r.pct_mle_exists, r.theory_mle_exists),
                format!("{:.2} ({:.2})", r.pct_case1, r.theory_case1),
                format_pct(r.pct_firth_success_case1),
                format!("{:.2} ({:.2})", r.pct_case2, r.theory_case2),
                format_pct(r.pct_firth_success_case2),
            ]
        })
        .collect();
    let widths: Vec<usize> =
        (0..6).map(|j| body.iter().map(|r| r[j].len()).chain([head[j].len()]).max().unwrap_or(0)).collect();
    let mut s = String::new();
    let line = |cells: &[&str], s: &mut String| {
        let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
        let _ = writeln!(s, "{}", parts.join("  "));
    };
    line(&head, &mut s);
    let _ = writeln!(s, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
    for r in &body {
        line(&r.iter().map(String::as_str).collect::<Vec<_>>(), &mut s);
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidelineConfig {
    /// Guess used to place the central dose.
    pub theta2_g: f64,
    /// Smaller guess for the follow-up dose; defaults to `theta2_g / 2`.
    pub theta2_1: Option<f64>,
    /// When set together with `theta1`, the follow-up dose is the size-`alpha`
    /// central dose rather than the D-optimal one.
    pub alpha: Option<f64>,
    pub theta1: Option<f64>,
    pub noise: Option<NoiseModel>,
    pub solver: SolverOpts,
    pub method: ProbMethod,
}

impl GuidelineConfig {
    pub fn new(theta2_g: f64) -> Self {
        Self {
            theta2_g,
            theta2_1: None,
            alpha: None,
            theta1: None,
            noise: None,
            solver: SolverOpts::default(),
            method: ProbMethod::quadrature(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rationale {
    /// Concave but not increasing: the guess is likely too high.
    Case1SmallerTheta2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub x2: f64,
    pub theta2_1: f64,
    pub rationale: Rationale,
    /// Upper end of the interval `(a, x)` the new dose is expected in.
    pub upper: f64,
    pub within_range: bool,
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidelineReport {
    pub stats: SufficientStats,
    pub classification: Classification,
    pub fit: FitResult,
    /// Limiting fit reported alongside any Firth attempt.
    pub limit: Option<FitResult>,
    pub recommendation: Option<Recommendation>,
}

/// Input to the guideline workflow.
#[derive(Debug, Clone, PartialEq)]
pub enum GuidelineInput {
    Data(Vec<(f64, Vec<f64>)>),
    /// Simulate one sample from the scenario with the given seed.
    Simulated {
        scenario: Scenario,
        seed: u64,
    },
}

fn simulate_sample(sc: &Scenario, seed: u64) -> Result<Vec<(f64, Vec<f64>)>> {
    let mut rng = stream(seed, domain::SIMULATION, 0xff_ffff, 0);
    sc.design
        .points()
        .iter()
        .zip(sc.n_per_point)
        .map(|(&x, n)| {
            let normal =
                Normal::new(eta(x, &sc.truth)?, sc.noise.sigma).map_err(|e| Error::InvalidInput(e.to_string()))?;
            Ok((x, (0..n).map(|_| normal.sample(&mut rng)).collect()))
        })
        .collect()
}

/// Classify, then compute the MLE, attempt Firth on convex data, or recommend
/// a follow-up dose on concave non-increasing data.
pub fn guideline_run(input: &GuidelineInput, cfg: &GuidelineConfig) -> Result<GuidelineReport> {
    let (raw, default_noise) = match input {
        GuidelineInput::Data(raw) => (raw.clone(), None),
        GuidelineInput::Simulated { scenario, seed } => (simulate_sample(scenario, *seed)?, Some(scenario.noise)),
    };
    let stats = reduce(&raw)?;
    let classification = classify(&stats);
    let dom = DoseDomain::new(stats.doses[0], stats.doses[2])?;
    let noise = cfg.noise.or(default_noise);
    let limit = fit_or_limit(&stats)?;
    let class = classification.class;
    if class == ShapeClass::IncreasingConcave {
        let fit = match mle(&stats) {
            Ok(_) => limit,
            Err(e) => FitResult::FirthFailure { reason: e.to_string() },
        };
        return Ok(GuidelineReport { stats, classification, fit, limit: None, recommendation: None });
    }
    if class.is_case2() {
        let noise = noise.ok_or_else(|| Error::InvalidInput("Firth's modified score needs sigma".into()))?;
        let fit = crate::firth::firth_solve(&stats, &noise, None, &cfg.solver);
        return Ok(GuidelineReport { stats, classification, fit, limit: Some(limit), recommendation: None });
    }
    let theta2_1 = cfg.theta2_1.unwrap_or(0.5 * cfg.theta2_g);
    let recommendation = match (cfg.alpha, cfg.theta1, noise) {
        (Some(alpha), Some(theta1), Some(noise)) => {
            let truth = EmaxParams::new(0.0, theta1, cfg.theta2_g);
            let design = ThreePointDesign::equal_weights(dom, stats.doses[1])?;
            let base = Scenario::new(truth, design, noise, stats.counts)?;
            let aug = augmentation_point(cfg.theta2_g, theta2_1, alpha, &base, &cfg.method)?;
            Recommendation {
                x2: aug.x2,
                theta2_1,
                rationale: Rationale::Case1SmallerTheta2,
                upper: aug.x2_guess,
                within_range: aug.x2 > dom.a && aug.x2 < aug.x2_guess,
                warning: aug.warning,
            }
        }
        (Some(_), _, _) => {
            return Err(Error::InvalidInput("alpha-based recommendation needs theta1 and sigma".into()));
        }
        _ => {
            let x2 = d_optimal_x2(&dom, theta2_1)?;
            let upper = d_optimal_x2(&dom, cfg.theta2_g)?;
            let within_range = x2 > dom.a && x2 < upper;
            let warning = (!within_range).then(|| format!("recommended dose {x2} is not in ({}, {upper})", dom.a));
            Recommendation { x2, theta2_1, rationale: Rationale::Case1SmallerTheta2, upper, within_range, warning }
        }
    };
    Ok(GuidelineReport { stats, classification, fit: limit, limit: None, recommendation: Some(recommendation) })
}
