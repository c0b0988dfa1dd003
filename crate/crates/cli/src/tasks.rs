//! Task runners: each reads its parameters, calls into the core crate and writes artifacts.

use anyhow::anyhow;
use serde::Serialize;
use switchlab_core::elliptic::{
    recurrence_indicator, DomainInterval, EllipticError, EllipticSpec, EllipticSystem, RecurrenceOptions, Verdict,
};
use switchlab_core::ergostats::{fit_exponential_rate, hitting_stats, tv_curve, ErgoError};
use switchlab_core::lyapunov::{coercivity, dynkin_residual, evaluate_points, sample_points, LyapunovError};
use switchlab_core::simulate::{first_hit_batch, simulate_batch, HitTarget, PathInit, SimConfig, SimError};
use switchlab_core::{Expr, ModelError, RegimeSwitchingModel};

use crate::config::{
    DynkinParams, ExitTimeParams, ExperimentConfig, HittingParams, RecurrenceParams, ScanParams, SimulateParams,
    TaskParams, TvParams,
};
use crate::output::{Cell, Csv, OutDir};
use crate::Failure;

/// Whether an error reflects a bad setup rather than a numerical breakdown.
trait Setup {
    fn is_setup(&self) -> bool;
}

impl Setup for ModelError {
    fn is_setup(&self) -> bool {
        !matches!(self, ModelError::Eval { .. } | ModelError::NegativeRate { .. })
    }
}

impl Setup for SimError {
    fn is_setup(&self) -> bool {
        match self {
            SimError::Model(e) => e.is_setup(),
            SimError::Segment(_) | SimError::NoBound | SimError::Config(_) | SimError::ThreadPool(_) => true,
            SimError::Explosion { .. } | SimError::BoundViolated { .. } => false,
        }
    }
}

impl Setup for LyapunovError {
    fn is_setup(&self) -> bool {
        match self {
            LyapunovError::Model(e) => e.is_setup(),
            LyapunovError::Sim(e) => e.is_setup(),
            LyapunovError::Segment(_)
            | LyapunovError::Parse { .. }
            | LyapunovError::NoPoints
            | LyapunovError::Invalid(_) => true,
            LyapunovError::Eval { .. } => false,
        }
    }
}

impl Setup for ErgoError {
    fn is_setup(&self) -> bool {
        match self {
            ErgoError::Sim(e) => e.is_setup(),
            ErgoError::Binning(_) | ErgoError::Invalid(_) => true,
            ErgoError::Empty | ErgoError::TooFewPoints { .. } => false,
        }
    }
}

impl Setup for EllipticError {
    fn is_setup(&self) -> bool {
        match self {
            EllipticError::Model(e) => e.is_setup(),
            EllipticError::Sim(e) => e.is_setup(),
            EllipticError::Parse { .. }
            | EllipticError::NotScalar(_)
            | EllipticError::PastDependent
            | EllipticError::NotElliptic { .. }
            | EllipticError::Invalid(_) => true,
            EllipticError::Eval { .. }
            | EllipticError::Tridiag(_)
            | EllipticError::NotMonotone { .. }
            | EllipticError::NotConverged { .. } => false,
        }
    }
}

fn fail<E: Setup + std::error::Error + Send + Sync + 'static>(e: E) -> Failure {
    if e.is_setup() {
        Failure::Config(e.into())
    } else {
        Failure::Numeric(e.into())
    }
}

fn io(e: anyhow::Error) -> Failure {
    Failure::Io(e)
}

pub fn run_task(cfg: &ExperimentConfig, model: &RegimeSwitchingModel, out: &mut OutDir) -> Result<(), Failure> {
    match &cfg.params {
        TaskParams::Simulate(p) => simulate(cfg, model, p, out),
        TaskParams::LyapunovScan(p) => scan(model, p, out),
        TaskParams::Dynkin(p) => dynkin(cfg, model, p, out),
        TaskParams::Hitting(p) => hitting(cfg, model, p, out),
        TaskParams::TvDecay(p) => tv(cfg, model, p, out),
        TaskParams::ExitTime(p) => exit_time(model, p, out),
        TaskParams::Recurrence(p) => recurrence(model, p, out),
    }
}

fn init(model: &RegimeSwitchingModel, x0: &[f64], regime: usize, dt: f64) -> Result<PathInit, Failure> {
    if x0.len() != model.dim {
        return Err(Failure::Config(anyhow!("x0 has {} components, the model has {}", x0.len(), model.dim)));
    }
    PathInit::constant(model, x0, regime, dt).map_err(fail)
}

fn sim_config(cfg: &ExperimentConfig, mode: switchlab_core::JumpMode, h_cap: f64) -> SimConfig {
    SimConfig { h_cap, ..SimConfig::new(cfg.dt).with_mode(mode) }
}

#[derive(Serialize)]
struct BatchSummary {
    n_paths: usize,
    censored: usize,
    seed: u64,
    dt: f64,
    mode: String,
}

fn x_header(first: &[&str], n: usize, last: &[&str]) -> Vec<String> {
    first
        .iter()
        .map(|s| s.to_string())
        .chain((1..=n).map(|k| format!("x_{k}")))
        .chain(last.iter().map(|s| s.to_string()))
        .collect()
}

fn simulate(
    cfg: &ExperimentConfig,
    model: &RegimeSwitchingModel,
    p: &SimulateParams,
    out: &mut OutDir,
) -> Result<(), Failure> {
    let start = init(model, &p.x0, p.regime, cfg.dt)?;
    let sc = SimConfig { record_stride: p.record_stride, ..sim_config(cfg, p.mode, p.h_cap) };
    let paths = simulate_batch(model, &start, p.t_end, &sc, cfg.seed, p.n_paths, cfg.threads).map_err(fail)?;
    let n = model.dim;
    let first = &paths[0];
    let mut traj = Csv::new(&x_header(&["t"], n, &["alpha"]));
    for k in 0..first.len() {
        let row = std::iter::once(Cell::F(first.times[k]))
            .chain(first.x(k).iter().map(|v| Cell::F(*v)))
            .chain(std::iter::once(Cell::from(first.regimes[k])));
        traj.row(row);
    }
    out.write_csv("trajectory.csv", traj).map_err(io)?;
    let mut jumps = Csv::new(&["t", "from", "to"]);
    for j in &first.jumps {
        jumps.row([Cell::F(j.t), j.from.into(), j.to.into()]);
    }
    out.write_csv("jumps.csv", jumps).map_err(io)?;
    if p.n_paths > 1 {
        let mut term = Csv::new(&x_header(&["path", "t"], n, &["alpha", "censored"]));
        for (path, tr) in paths.iter().enumerate() {
            let k = tr.len() - 1;
            let row = [Cell::from(path), Cell::F(tr.times[k])]
                .into_iter()
                .chain(tr.x(k).iter().map(|v| Cell::F(*v)))
                .chain([Cell::from(tr.regimes[k]), Cell::B(tr.censored)]);
            term.row(row);
        }
        out.write_csv("terminal.csv", term).map_err(io)?;
    }
    let summary = BatchSummary {
        n_paths: p.n_paths,
        censored: paths.iter().filter(|t| t.censored).count(),
        seed: cfg.seed,
        dt: cfg.dt,
        mode: p.mode.to_string(),
    };
    out.write_json("summary.json", &summary).map_err(io)
}

#[derive(Serialize)]
struct ScanSummary {
    coercive_in_state: bool,
    coercive_in_regime: bool,
    n_points: usize,
    n_violations: usize,
}

fn scan(model: &RegimeSwitchingModel, p: &ScanParams, out: &mut OutDir) -> Result<(), Failure> {
    let v = p.lyapunov.build(model, "params.lyapunov").map_err(|e| Failure::Config(e.into()))?;
    let points = sample_points(&p.sampler, model).map_err(fail)?;
    let report = switchlab_core::scan_drift_condition(&v, model, &points, p.kind, p.constants, &p.fit).map_err(fail)?;
    let values = evaluate_points(&v, model, &points).map_err(fail)?;
    let mut csv = Csv::new(&["phi0", "phi_r", "sup_norm", "i", "v", "lv"]);
    for ((seg, i), (val, lv)) in points.iter().zip(&values) {
        csv.row([
            Cell::F(seg.current()[0]),
            Cell::F(seg.oldest()[0]),
            Cell::F(seg.sup_norm()),
            (*i).into(),
            Cell::F(*val),
            Cell::F(*lv),
        ]);
    }
    let x_max = p.sampler.x_min.abs().max(p.sampler.x_max.abs()).max(1.0);
    let coer = coercivity(&v, model, x_max, p.sampler.i_max.max(2)).map_err(fail)?;
    out.write_csv("scan_points.csv", csv).map_err(io)?;
    out.write_json("drift_report.json", &report).map_err(io)?;
    let summary = ScanSummary {
        coercive_in_state: coer.state,
        coercive_in_regime: coer.regime,
        n_points: report.n_points,
        n_violations: report.violations.len(),
    };
    out.write_json("scan_summary.json", &summary).map_err(io)
}

fn dynkin(
    cfg: &ExperimentConfig,
    model: &RegimeSwitchingModel,
    p: &DynkinParams,
    out: &mut OutDir,
) -> Result<(), Failure> {
    let v = p.lyapunov.build(model, "params.lyapunov").map_err(|e| Failure::Config(e.into()))?;
    let start = init(model, &p.x0, p.regime, cfg.dt)?;
    let sc = sim_config(cfg, p.mode, p.h_cap);
    let res = dynkin_residual(&v, model, &start, p.t_end, &sc, p.n_paths, cfg.seed, cfg.threads).map_err(fail)?;
    let mut csv = Csv::new(&["path", "residual", "predictable", "censored"]);
    for (k, row) in res.per_path.iter().enumerate() {
        let (a, b) = row.unwrap_or((f64::NAN, f64::NAN));
        csv.row([Cell::U(k as u64), Cell::F(a), Cell::F(b), Cell::B(row.is_none())]);
    }
    out.write_csv("dynkin_paths.csv", csv).map_err(io)?;
    out.write_json("dynkin.json", &res).map_err(io)
}

fn hitting(
    cfg: &ExperimentConfig,
    model: &RegimeSwitchingModel,
    p: &HittingParams,
    out: &mut OutDir,
) -> Result<(), Failure> {
    let start = init(model, &p.x0, p.regime, cfg.dt)?;
    let sc = sim_config(cfg, p.mode, p.h_cap);
    let target = HitTarget {
        region: p.target.region.clone(),
        regimes: p.target.regimes.clone(),
        whole_segment: p.target.whole_segment,
        bridge: p.target.bridge,
    };
    let batch =
        first_hit_batch(model, &start, &target, &sc, p.t_max, cfg.seed, p.n_paths, cfg.threads).map_err(fail)?;
    let mut csv = Csv::new(&["path", "tau", "censored"]);
    for (k, h) in batch.iter().enumerate() {
        csv.row([k.into(), Cell::F(h.tau), Cell::B(h.censored)]);
    }
    out.write_csv("hitting.csv", csv).map_err(io)?;
    let stats = hitting_stats(&batch).map_err(fail)?;
    out.write_json("hitting_stats.json", &stats).map_err(io)?;
    let summary = BatchSummary {
        n_paths: p.n_paths,
        censored: batch.iter().filter(|h| h.censored).count(),
        seed: cfg.seed,
        dt: cfg.dt,
        mode: p.mode.to_string(),
    };
    out.write_json("summary.json", &summary).map_err(io)
}

#[derive(Serialize)]
struct TvFit {
    fitted: bool,
    theta_hat: Option<f64>,
    r_squared: Option<f64>,
    n_used: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    reason: Option<String>,
}

fn tv(cfg: &ExperimentConfig, model: &RegimeSwitchingModel, p: &TvParams, out: &mut OutDir) -> Result<(), Failure> {
    let a = init(model, &p.start_a.x0, p.start_a.regime, cfg.dt)?;
    let b = init(model, &p.start_b.x0, p.start_b.regime, cfg.dt)?;
    let sc = sim_config(cfg, p.mode, p.h_cap);
    let curve = tv_curve(model, &a, &b, &p.times, &sc, cfg.seed, p.n_paths, cfg.threads, &p.binning).map_err(fail)?;
    let mut csv = Csv::new(&["t", "tv", "n_a", "n_b"]);
    for pt in &curve.points {
        csv.row([Cell::F(pt.t), Cell::F(pt.tv), pt.n_a.into(), pt.n_b.into()]);
    }
    out.write_csv("tv_curve.csv", csv).map_err(io)?;
    let fit = match fit_exponential_rate(&curve, p.floor) {
        Ok(f) => TvFit {
            fitted: true,
            theta_hat: Some(f.theta_hat),
            r_squared: Some(f.r_squared),
            n_used: Some(f.n_used),
            reason: None,
        },
        Err(e @ ErgoError::TooFewPoints { .. }) => {
            TvFit { fitted: false, theta_hat: None, r_squared: None, n_used: None, reason: Some(e.to_string()) }
        }
        Err(e) => return Err(fail(e)),
    };
    out.write_json("tv_fit.json", &fit).map_err(io)
}

fn write_trace(out: &mut OutDir, trace: &switchlab_core::IterationTrace) -> Result<(), Failure> {
    let mut csv = Csv::new(&["m", "delta", "ratio"]);
    for (m, d) in trace.deltas.iter().enumerate() {
        let ratio = if m >= 2 { trace.ratios.get(m - 2).copied().unwrap_or(f64::NAN) } else { f64::NAN };
        csv.row([m.into(), Cell::F(*d), Cell::F(ratio)]);
    }
    out.write_csv("trace.csv", csv).map_err(io)
}

#[derive(Serialize)]
struct ExitSummary {
    h: f64,
    k: usize,
    iterations: usize,
    contraction: Option<switchlab_core::ContractionBound>,
}

fn exit_time(model: &RegimeSwitchingModel, p: &ExitTimeParams, out: &mut OutDir) -> Result<(), Failure> {
    let spec = EllipticSpec::new(vec![DomainInterval::with_values(p.lo, p.hi, 0.0, 0.0)], p.h, p.k, Expr::num(-1.0));
    let sys = EllipticSystem::assemble(model, &spec).map_err(fail)?;
    let sol = match sys.solve_fixed_point(p.tol, p.max_iter) {
        Ok(s) => s,
        Err(EllipticError::NotConverged { trace, iterations, last_delta }) => {
            write_trace(out, &trace)?;
            return Err(fail(EllipticError::NotConverged { trace, iterations, last_delta }));
        }
        Err(e) => return Err(fail(e)),
    };
    let mut csv = Csv::new(&["x", "i", "u"]);
    for (x, i, u) in sol.rows() {
        csv.row([Cell::F(x), i.into(), Cell::F(u)]);
    }
    out.write_csv("solution.csv", csv).map_err(io)?;
    write_trace(out, &sol.trace)?;
    let summary =
        ExitSummary { h: sys.h, k: p.k, iterations: sol.trace.deltas.len(), contraction: sys.contraction_bound().ok() };
    out.write_json("exit_time.json", &summary).map_err(io)
}

#[derive(Serialize)]
struct VerdictFile {
    #[serde(rename = "D1")]
    d1: (f64, f64),
    ks: Vec<f64>,
    deficits: Vec<f64>,
    verdict: Verdict,
}

fn recurrence(model: &RegimeSwitchingModel, p: &RecurrenceParams, out: &mut OutDir) -> Result<(), Failure> {
    let opts = RecurrenceOptions { h: p.h, k_regimes: p.k, probes: p.probes.clone(), tol_rec: p.tol_rec };
    let rep = recurrence_indicator(model, p.d1, &p.ks, &opts).map_err(fail)?;
    let mut csv = Csv::new(&["k", "x", "i", "v"]);
    for (k, at_k) in rep.ks.iter().zip(&rep.values) {
        for (x, vi) in rep.probes.iter().zip(at_k) {
            for (i, v) in vi.iter().enumerate() {
                csv.row([Cell::F(*k), Cell::F(*x), (i + 1).into(), Cell::F(*v)]);
            }
        }
    }
    out.write_csv("recurrence_values.csv", csv).map_err(io)?;
    let file = VerdictFile { d1: rep.d1, ks: rep.ks, deficits: rep.deficits, verdict: rep.verdict };
    out.write_json("verdict.json", &file).map_err(io)
}
