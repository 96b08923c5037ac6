use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use clap::Parser;
use serde_json::{json, Value};

use emax_core::firth::{firth_solve, SolverOpts};
use emax_core::mle::{fit_or_limit, interpolation_check, mle, sigma2_hat, FitResult};
use emax_core::model::{d_optimal_x2, implied_theta2, DoseDomain, EmaxParams, NoiseModel, ThreePointDesign};
use emax_core::prob::{
    alpha_sweep, power_function, shape_probabilities, sweep, x2_for_alpha, x2_log_grid, ProbMethod, Scenario,
};
use emax_core::shape::{classify, group_pairs, limiting_fit, reduce, ShapeClass};
use emax_core::sim::{guideline_run, run_table1, table1_text, GuidelineConfig, GuidelineInput, SimConfig, SimRow};
use emax_core::Error as CoreError;

use crate::data::read_data;
use crate::manifest::{sidecar, RunManifest};
use crate::{
    Cli, Command, DesignArgs, DesignMode, FitArgs, FitMethod, Format, MethodArgs, ProbKind, ScenarioArgs, SimulateArgs,
    SolverArgs, SweepArgs, DEFAULT_SEED,
};

/// Exit code for a sample that yields no estimate.
const ESTIMATION_FAILURE: u8 = 3;

struct Outcome {
    config: Value,
    result: Value,
    exit: u8,
    text: Option<String>,
    csv: Option<String>,
    format: Format,
}

impl Outcome {
    fn json(config: Value, result: Value) -> Self {
        Self { config, result, exit: 0, text: None, csv: None, format: Format::Json }
    }
}

/// Arguments with `--seed` pinned so that a rerun does not depend on the
/// environment.
fn pin_seed(args: &[String], seed: u64) -> Vec<String> {
    let mut out = Vec::with_capacity(args.len() + 2);
    let mut it = args.iter();
    while let Some(a) = it.next() {
        if a == "--seed" {
            it.next();
        } else if !a.starts_with("--seed=") {
            out.push(a.clone());
        }
    }
    out.push("--seed".into());
    out.push(seed.to_string());
    out
}

fn replace_out(args: &[String], out: &Path) -> Vec<String> {
    let mut res = Vec::with_capacity(args.len() + 2);
    let mut it = args.iter();
    while let Some(a) = it.next() {
        if a == "--out" {
            it.next();
        } else if !a.starts_with("--out=") {
            res.push(a.clone());
        }
    }
    res.push("--out".into());
    res.push(out.display().to_string());
    res
}

pub fn run(cli: Cli, args: Vec<String>) -> Result<u8> {
    if let Command::Replay { manifest } = &cli.command {
        let m = RunManifest::read(manifest)?;
        let mut replay_args = m.args.clone();
        if let Some(out) = &cli.out {
            replay_args = replace_out(&replay_args, out);
        }
        let argv = std::iter::once("emax".to_string()).chain(replay_args.iter().cloned());
        let inner = Cli::try_parse_from(argv).map_err(|e| anyhow!("manifest arguments do not parse: {e}"))?;
        if matches!(inner.command, Command::Replay { .. }) {
            bail!("a manifest cannot replay another manifest");
        }
        return run(inner, replay_args);
    }

    let (name, outcome, seed) = match &cli.command {
        Command::Classify { data, format } => ("classify", cmd_classify(data, *format)?, seed_or_default(&cli)),
        Command::Fit(a) => ("fit", cmd_fit(a)?, seed_or_default(&cli)),
        Command::Design(a) => ("design", cmd_design(a, seed_or_default(&cli))?, seed_or_default(&cli)),
        Command::Prob { scenario, method } => {
            let seed = seed_or_default(&cli);
            ("prob", cmd_prob(scenario, method, seed)?, seed)
        }
        Command::Simulate(a) => {
            let (o, seed) = cmd_simulate(a, cli.seed)?;
            let Some(o) = o else { return Ok(0) };
            ("simulate", o, seed)
        }
        Command::Sweep(a) => {
            let seed = seed_or_default(&cli);
            ("sweep", cmd_sweep(a, seed)?, seed)
        }
        Command::Replay { .. } => unreachable!(),
    };
    let manifest = RunManifest::new(name, pin_seed(&args, seed), outcome.config.clone(), seed);
    emit(&manifest, &outcome, cli.out.as_deref())?;
    Ok(outcome.exit)
}

fn seed_or_default(cli: &Cli) -> u64 {
    cli.seed.unwrap_or(DEFAULT_SEED)
}

fn write_to(path: Option<&Path>, body: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, body).with_context(|| format!("cannot write {}", p.display())),
        None => {
            let mut so = std::io::stdout().lock();
            so.write_all(body.as_bytes())?;
            so.flush()?;
            Ok(())
        }
    }
}

fn emit(manifest: &RunManifest, o: &Outcome, out: Option<&Path>) -> Result<()> {
    let tabular = o.csv.as_deref().or(if o.format == Format::Text { o.text.as_deref() } else { None });
    match tabular {
        Some(body) => {
            write_to(out, body)?;
            match out {
                Some(p) => {
                    manifest.write(&sidecar(p))?;
                    if o.csv.is_some() {
                        if let Some(t) = &o.text {
                            print!("{t}");
                        }
                    }
                }
                None => eprintln!("{}", serde_json::to_string_pretty(manifest)?),
            }
        }
        None => {
            let doc = json!({ "manifest": manifest, "result": o.result });
            write_to(out, &(serde_json::to_string_pretty(&doc)? + "\n"))?;
        }
    }
    Ok(())
}

fn solver_opts(a: &SolverArgs) -> Result<SolverOpts> {
    if !(a.tol > 0.0) || a.max_iter == 0 || a.starts < 0 {
        bail!("solver options need tol > 0, max-iter >= 1 and starts >= 0");
    }
    if let Some(c) = a.theta2_cap {
        if !(c > 0.0) {
            bail!("theta2-cap must be positive");
        }
    }
    Ok(SolverOpts { tol: a.tol, max_iter: a.max_iter, theta2_cap: a.theta2_cap, starts: a.starts })
}

fn prob_method(a: &MethodArgs, default: ProbKind, seed: u64) -> ProbMethod {
    match a.method.unwrap_or(default) {
        ProbKind::Mc => ProbMethod::MonteCarlo { draws: a.draws, seed },
        ProbKind::Quad => ProbMethod::Quadrature { tol: a.quad_tol },
    }
}

fn per_point(n: &[usize]) -> Result<[usize; 3]> {
    match *n {
        [k] => Ok([k; 3]),
        [a, b, c] => Ok([a, b, c]),
        _ => bail!("--n takes one value or three comma-separated values, got {}", n.len()),
    }
}

fn scenario(a: &ScenarioArgs) -> Result<Scenario> {
    let dom = DoseDomain::new(a.a, a.b)?;
    let x2 = match a.x2 {
        Some(x) => x,
        None => d_optimal_x2(&dom, a.theta2_g.unwrap_or(a.theta2))?,
    };
    let design = ThreePointDesign::equal_weights(dom, x2)?;
    Ok(Scenario::new(
        EmaxParams::new(a.theta0, a.theta1, a.theta2),
        design,
        NoiseModel::new(a.sigma)?,
        per_point(&a.n)?,
    )?)
}

/// Responses grouped by dose.
type Grouped = Vec<(f64, Vec<f64>)>;

fn load_stats(path: &Path) -> Result<(Grouped, emax_core::SufficientStats)> {
    let raw = group_pairs(&read_data(path)?);
    let stats = reduce(&raw)?;
    Ok((raw, stats))
}

fn fmt_params(p: &EmaxParams) -> String {
    format!("theta0 = {}, theta1 = {}, theta2 = {}", p.theta0, p.theta1, p.theta2)
}

fn cmd_classify(data: &Path, format: Format) -> Result<Outcome> {
    let (_, s) = load_stats(data)?;
    let c = classify(&s);
    let limit = (c.class != ShapeClass::IncreasingConcave).then(|| limiting_fit(&s, &c)).transpose()?;
    let mut text = String::new();
    writeln!(text, "class: {}", c.class.label())?;
    writeln!(text, "doses: {:?}", s.doses)?;
    writeln!(text, "counts: {:?}", s.counts)?;
    writeln!(text, "means: {:?}", s.means)?;
    writeln!(text, "m1 = {}, m2 = {}, m0 = {}", c.stats.m1, c.stats.m2, c.stats.m0)?;
    if !c.ties.is_empty() {
        writeln!(text, "ties: {:?}", c.ties)?;
    }
    if let Some(l) = &limit {
        writeln!(text, "limiting fit: {l:?}")?;
    }
    Ok(Outcome {
        format,
        text: Some(text),
        ..Outcome::json(
            json!({ "data": data }),
            json!({
                "class": c.class,
                "stats": s,
                "shape": c.stats,
                "ties": c.ties,
                "limit": limit,
            }),
        )
    })
}

fn cmd_fit(a: &FitArgs) -> Result<Outcome> {
    let (raw, s) = load_stats(&a.data)?;
    let opts = solver_opts(&a.solver)?;
    let (noise, sigma_source) = match a.sigma {
        Some(sig) => (Some(NoiseModel::new(sig)?), "given"),
        None => match sigma2_hat(&raw) {
            Some(v) => (Some(NoiseModel::new(v.sqrt())?), "estimated"),
            None => (None, "unavailable"),
        },
    };
    let c = classify(&s);
    let mut result = json!({
        "method": format!("{:?}", a.method).to_lowercase(),
        "class": c.class,
        "stats": s,
        "sigma": noise.map(|n| n.sigma),
        "sigma_source": sigma_source,
    });
    let fit = match a.method {
        FitMethod::Mle => match fit_or_limit(&s) {
            Ok(f) => f,
            Err(e @ CoreError::NearDegenerate(_)) => FitResult::FirthFailure { reason: e.to_string() },
            Err(e) => return Err(e.into()),
        },
        FitMethod::Firth => {
            let noise = noise.ok_or_else(|| anyhow!("Firth's method needs --sigma or replicated doses"))?;
            let f = firth_solve(&s, &noise, None, &opts);
            if let (Ok(m), Some(p)) = (mle(&s), f.params()) {
                result["mle"] = json!(m);
                result["firth_minus_mle"] = json!({ "theta0": p.theta0 - m.theta0, "theta1": p.theta1 - m.theta1, "theta2": p.theta2 - m.theta2 });
            }
            f
        }
        FitMethod::Auto => {
            let dom = DoseDomain::new(s.doses[0], s.doses[2])?;
            let theta2_g = match a.theta2_g {
                Some(t) => t,
                None => match implied_theta2(&dom, s.doses[1]) {
                    Ok(t) => t,
                    Err(_) if c.class.is_case1() => {
                        bail!("x2 = {} is not a D-optimal central dose; pass --theta2-g", s.doses[1])
                    }
                    Err(_) => f64::NAN,
                },
            };
            let cfg = GuidelineConfig {
                theta2_g,
                theta2_1: a.theta2_1,
                alpha: a.alpha,
                theta1: a.theta1,
                noise,
                solver: opts,
                method: ProbMethod::quadrature(),
            };
            let report = guideline_run(&GuidelineInput::Data(raw.clone()), &cfg)?;
            if c.class.is_case1() {
                result["theta2_g"] = json!(theta2_g);
            }
            result["limit"] = json!(report.limit);
            result["recommendation"] = json!(report.recommendation);
            report.fit
        }
    };
    if let FitResult::ExactMle { params, .. } = &fit {
        result["max_abs_residual"] = json!(interpolation_check(&s, params)?);
    }
    let exit = if fit.is_estimate() { 0 } else { ESTIMATION_FAILURE };

    let mut text = String::new();
    writeln!(text, "class: {}", c.class.label())?;
    match &fit {
        FitResult::ExactMle { params, .. } => writeln!(text, "exact MLE: {}", fmt_params(params))?,
        FitResult::FirthEstimate { params, iterations, .. } => {
            writeln!(text, "Firth estimate: {} ({iterations} iterations)", fmt_params(params))?
        }
        FitResult::FirthFailure { reason } => writeln!(text, "no estimate: {reason}")?,
        FitResult::NoMle { limit, .. } => writeln!(text, "no MLE; limiting fit {limit:?}")?,
    }
    if let Some(r) = result.get("recommendation").filter(|r| !r.is_null()) {
        writeln!(text, "recommended additional dose: {}", r["x2"])?;
    }
    result["fit"] = json!(fit);
    Ok(Outcome {
        exit,
        format: a.format,
        text: Some(text),
        ..Outcome::json(json!({ "data": a.data, "solver": opts }), result)
    })
}

fn cmd_design(a: &DesignArgs, seed: u64) -> Result<Outcome> {
    let dom = DoseDomain::new(a.a, a.b)?;
    let x_dopt = d_optimal_x2(&dom, a.theta2)?;
    match a.mode {
        DesignMode::Dopt => Ok(Outcome::json(
            json!({ "a": a.a, "b": a.b, "theta2": a.theta2, "mode": "dopt" }),
            json!({ "x2": x_dopt, "design": ThreePointDesign::equal_weights(dom, x_dopt)? }),
        )),
        DesignMode::Alpha => {
            let alpha = a.alpha.ok_or_else(|| anyhow!("--mode alpha needs --alpha"))?;
            let base = Scenario::new(
                EmaxParams::new(0.0, a.theta1, a.theta2),
                ThreePointDesign::equal_weights(dom, x_dopt)?,
                NoiseModel::new(a.sigma)?,
                [a.n; 3],
            )?;
            let method = prob_method(&a.method, ProbKind::Quad, seed);
            let x2 = x2_for_alpha(a.theta2, alpha, &base, &method)?;
            Ok(Outcome::json(
                json!({ "a": a.a, "b": a.b, "theta2": a.theta2, "mode": "alpha", "alpha": alpha,
                        "theta1": a.theta1, "sigma": a.sigma, "n": a.n, "method": method }),
                json!({
                    "x2": x2,
                    "power_at_x2": power_function(a.theta2, x2, &base, &method)?,
                    "x2_dopt": x_dopt,
                    "power_at_x2_dopt": power_function(a.theta2, x_dopt, &base, &method)?,
                    "design": ThreePointDesign::equal_weights(dom, x2)?,
                }),
            ))
        }
    }
}

fn cmd_prob(a: &ScenarioArgs, m: &MethodArgs, seed: u64) -> Result<Outcome> {
    let sc = scenario(a)?;
    let method = prob_method(m, ProbKind::Mc, seed);
    let p = shape_probabilities(&sc, &method)?;
    let mut result = serde_json::to_value(p)?;
    result["p_case1"] = json!(p.p_case1());
    result["se_case1"] = json!(p.se_case1());
    Ok(Outcome::json(json!({ "scenario": sc, "method": method }), result))
}

fn sim_config(a: &SimulateArgs, seed: Option<u64>) -> Result<SimConfig> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
            serde_json::from_str::<SimConfig>(&text)
                .with_context(|| format!("{} is not a simulation config", path.display()))?
        }
        None => SimConfig {
            scenario: scenario(&a.scenario)?,
            theta2_g_list: a.theta2_g_list.clone(),
            replicates: a.replicates,
            solver: solver_opts(&a.solver)?,
            ..SimConfig::reference(DEFAULT_SEED)
        },
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn opt_cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| x.to_string())
}

pub fn table1_csv(rows: &[SimRow]) -> Result<String> {
    use emax_core::FailureReason as R;
    let reasons = [R::InadmissibleRoot, R::Divergence, R::IterationCap, R::Stalled];
    let tag = |r: R| serde_json::to_value(r).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut head: Vec<String> = [
        "theta2_g",
        "x2",
        "replicates",
        "n_exists",
        "n_case1",
        "n_case2",
        "n_firth_success_case1",
        "n_firth_success_case2",
        "pct_mle_exists",
        "theory_mle_exists",
        "pct_case1",
        "theory_case1",
        "pct_firth_success_case1",
        "pct_case2",
        "theory_case2",
        "pct_firth_success_case2",
        "n_mle_degenerate",
    ]
    .map(String::from)
    .to_vec();
    for case in ["case1", "case2"] {
        head.extend(reasons.iter().map(|&r| format!("{case}_{}", tag(r))));
    }
    w.write_record(&head)?;
    for r in rows {
        let mut rec = vec![
            r.theta2_g.to_string(),
            r.x2.to_string(),
            r.replicates.to_string(),
            r.n_exists.to_string(),
            r.n_case1.to_string(),
            r.n_case2.to_string(),
            r.n_firth_success_case1.to_string(),
            r.n_firth_success_case2.to_string(),
            r.pct_mle_exists.to_string(),
            r.theory_mle_exists.to_string(),
            r.pct_case1.to_string(),
            r.theory_case1.to_string(),
            opt_cell(r.pct_firth_success_case1),
            r.pct_case2.to_string(),
            r.theory_case2.to_string(),
            opt_cell(r.pct_firth_success_case2),
            r.n_mle_degenerate.to_string(),
        ];
        for map in [&r.firth_failures_case1, &r.firth_failures_case2] {
            rec.extend(reasons.iter().map(|k| map.get(k).copied().unwrap_or(0).to_string()));
        }
        w.write_record(&rec)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn cmd_simulate(a: &SimulateArgs, seed: Option<u64>) -> Result<(Option<Outcome>, u64)> {
    let cfg = sim_config(a, seed)?;
    if a.print_config {
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok((None, cfg.seed));
    }
    let rows = run_table1(&cfg)?;
    let csv = table1_csv(&rows)?;
    let seed = cfg.seed;
    Ok((
        Some(Outcome {
            csv: Some(csv),
            text: Some(table1_text(&rows)),
            ..Outcome::json(serde_json::to_value(&cfg)?, serde_json::to_value(&rows)?)
        }),
        seed,
    ))
}

fn parse_grid(spec: &str, dom: &DoseDomain) -> Result<Vec<f64>> {
    if let Some(n) = spec.strip_prefix("log:") {
        let n: usize = n.trim().parse().with_context(|| format!("bad grid size in `{spec}`"))?;
        if n < 2 {
            bail!("a log grid needs at least 2 points");
        }
        return Ok(x2_log_grid(dom, n));
    }
    spec.split(',')
        .map(|t| t.trim().parse::<f64>().with_context(|| format!("`{t}` in --x2-grid is not a number")))
        .collect()
}

fn cmd_sweep(a: &SweepArgs, seed: u64) -> Result<Outcome> {
    let base = scenario(&a.scenario)?;
    let method = prob_method(&a.method, ProbKind::Quad, seed);
    let mut w = csv::Writer::from_writer(Vec::new());
    let config;
    match &a.alpha_grid {
        Some(alphas) => {
            config = json!({ "scenario": base, "theta2_list": a.theta2_list, "alpha_grid": alphas, "method": method });
            w.write_record(["alpha", "theta2_g", "x2", "x2_dopt"])?;
            for r in alpha_sweep(&a.theta2_list, alphas, &base, &method) {
                w.write_record([
                    r.alpha.to_string(),
                    r.theta2_g.to_string(),
                    opt_cell(r.x2),
                    d_optimal_x2(&base.domain(), r.theta2_g)?.to_string(),
                ])?;
            }
        }
        None => {
            let grid = parse_grid(&a.x2_grid, &base.domain())?;
            config = json!({ "scenario": base, "theta2_list": a.theta2_list, "x2_grid": grid, "method": method });
            for r in sweep(&a.theta2_list, &grid, &base, &method)? {
                w.serialize(r)?;
            }
        }
    }
    let csv = String::from_utf8(w.into_inner()?)?;
    Ok(Outcome { csv: Some(csv), ..Outcome::json(config, Value::Null) })
}
