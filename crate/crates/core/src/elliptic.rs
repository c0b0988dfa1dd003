//! One-dimensional weakly coupled Dirichlet systems
//! `½σ²(x,i)u″ + b(x,i)u′ − q_i(x)u + Σ_j q_ij(x)u(x,j) = g(x,i)`
//! for switching rates that depend on the current state only.
//!
//! Each regime is discretised by central differences on every interval of the
//! domain; boundary nodes are pinned to Dirichlet data. The coupled system is
//! solved by successive approximation: each sweep solves the scalar problems
//! with the coupling term taken from the previous iterate.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{EvalError, Expr, ExprKind, ParseError, Scope};
use crate::model::{ModelError, Regime, RegimeSwitchingModel};
use crate::rng::{stream, Purpose};
use crate::simulate::{par_paths, SimError};
use crate::tridiag::{TridiagError, Tridiagonal};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EllipticError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Tridiag(#[from] TridiagError),
    #[error("evaluation error in {context}: {source}")]
    Eval { context: &'static str, source: EvalError },
    #[error("parse error in {context}: {source}")]
    Parse { context: &'static str, source: ParseError },
    #[error("finite differences need a scalar model, got dimension {0}")]
    NotScalar(usize),
    #[error("switching rates depend on the past; the elliptic system needs state-only rates")]
    PastDependent,
    #[error("σ² = {value} < θ = {theta} at x = {x}, regime {regime}")]
    NotElliptic { x: f64, regime: Regime, value: f64, theta: f64 },
    #[error("central differences are not monotone at x = {x}, regime {regime} even with step {h}")]
    NotMonotone { x: f64, regime: Regime, h: f64 },
    #[error("no convergence after {iterations} sweeps (last delta {last_delta})")]
    NotConverged { iterations: usize, last_delta: f64, trace: Box<IterationTrace> },
    #[error("invalid elliptic setup: {0}")]
    Invalid(String),
}

fn ev(context: &'static str) -> impl Fn(EvalError) -> EllipticError {
    move |source| EllipticError::Eval { context, source }
}

/// `(lo, hi)` with Dirichlet data at both ends, each a point expression in `x` and `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainInterval {
    pub lo: f64,
    pub hi: f64,
    pub left: Expr,
    pub right: Expr,
}

impl DomainInterval {
    pub fn with_values(lo: f64, hi: f64, left: f64, right: f64) -> Self {
        DomainInterval { lo, hi, left: Expr::num(left), right: Expr::num(right) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EllipticSpec {
    pub intervals: Vec<DomainInterval>,
    /// Target grid step; halved up to four times if central differences lose monotonicity.
    pub h: f64,
    /// Regimes `1..=k` are kept; jumps above `k` are dropped.
    pub k: Regime,
    /// Right-hand side `g(x, i)`.
    pub rhs: Expr,
    /// Lower bound required of `σ²` on the grid.
    pub theta: f64,
    /// Extra nonnegative discount `c(x, i)` added to `q_i`; it does not couple regimes.
    pub killing: Option<Expr>,
}

impl EllipticSpec {
    pub fn new(intervals: Vec<DomainInterval>, h: f64, k: Regime, rhs: Expr) -> Self {
        EllipticSpec { intervals, h, k, rhs, theta: 1e-10, killing: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationTrace {
    /// `Δ_m = max |u_{m+1} − u_m|`.
    pub deltas: Vec<f64>,
    /// `Δ_{m+2} / Δ_m`.
    pub ratios: Vec<f64>,
    pub bound: Option<f64>,
}

/// Contraction factor for two sweeps: `p + (1 − p)ε₁` with `ε₁ = 1 − ε₀/M_D`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ContractionBound {
    pub n0: Regime,
    pub eps0: f64,
    pub m_d: f64,
    pub eps1: f64,
    /// Largest probability of a switch before leaving the domain, over regimes `≤ n0`.
    pub p: f64,
    pub bound: f64,
}

#[derive(Debug, Clone)]
struct Block {
    start: usize,
    len: usize,
}

/// Assembled grid and per-regime operators.
#[derive(Debug, Clone)]
pub struct EllipticSystem {
    pub k: Regime,
    pub h: f64,
    pub xs: Vec<f64>,
    blocks: Vec<Block>,
    is_boundary: Vec<bool>,
    /// `[regime][node]`, regime 0-based.
    boundary_values: Vec<Vec<f64>>,
    rhs: Vec<Vec<f64>>,
    totals: Vec<Vec<f64>>,
    /// Couplings `(j, q_ij)` per node, CSR by `regime * n_nodes + node`.
    coupling: Vec<(Regime, f64)>,
    coupling_start: Vec<usize>,
    factors: Vec<Tridiagonal>,
}

struct Coeffs {
    a: Vec<f64>,
    b: Vec<f64>,
}

impl EllipticSystem {
    pub fn assemble(model: &RegimeSwitchingModel, spec: &EllipticSpec) -> Result<Self, EllipticError> {
        if model.dim != 1 {
            return Err(EllipticError::NotScalar(model.dim));
        }
        if !model.is_past_independent() {
            return Err(EllipticError::PastDependent);
        }
        if spec.k == 0 || spec.intervals.is_empty() || !(spec.h > 0.0) {
            return Err(EllipticError::Invalid("need K ≥ 1, h > 0 and at least one interval".into()));
        }
        let mut sorted: Vec<&DomainInterval> = spec.intervals.iter().collect();
        sorted.sort_by(|a, b| a.lo.total_cmp(&b.lo));
        for w in sorted.windows(2) {
            if w[1].lo < w[0].hi {
                return Err(EllipticError::Invalid("intervals overlap".into()));
            }
        }
        if spec.intervals.iter().any(|iv| !(iv.lo < iv.hi) || !iv.lo.is_finite() || !iv.hi.is_finite()) {
            return Err(EllipticError::Invalid("every interval needs finite lo < hi".into()));
        }
        let mut h = spec.h;
        for attempt in 0..=4 {
            match Self::build(model, spec, h) {
                Err(EllipticError::NotMonotone { .. }) if attempt < 4 => h /= 2.0,
                other => return other,
            }
        }
        unreachable!()
    }

    fn build(model: &RegimeSwitchingModel, spec: &EllipticSpec, h: f64) -> Result<Self, EllipticError> {
        let mut xs = Vec::new();
        let mut blocks = Vec::new();
        let mut is_boundary = Vec::new();
        for iv in &spec.intervals {
            let n = ((iv.hi - iv.lo) / h).ceil().max(2.0) as usize;
            let step = (iv.hi - iv.lo) / n as f64;
            blocks.push(Block { start: xs.len(), len: n + 1 });
            for p in 0..=n {
                xs.push(if p == n { iv.hi } else { iv.lo + p as f64 * step });
                is_boundary.push(p == 0 || p == n);
            }
        }
        let n_nodes = xs.len();
        let k = spec.k;
        let mut boundary_values = vec![vec![0.0; n_nodes]; k];
        let mut rhs = vec![vec![0.0; n_nodes]; k];
        let mut totals = vec![vec![0.0; n_nodes]; k];
        let mut kill = vec![0.0; n_nodes];
        let mut coupling = Vec::new();
        let mut coupling_start = Vec::with_capacity(k * n_nodes + 1);
        let mut factors = Vec::with_capacity(k);
        let mut kernel = model.kernel.clone();
        kernel.truncation = Some(kernel.truncation.map_or(k, |t| t.min(k)));
        let mut row = Vec::new();
        let mut sigma = vec![0.0; model.noise_dim];
        for i in 1..=k {
            let mut c = Coeffs { a: vec![0.0; n_nodes], b: vec![0.0; n_nodes] };
            for (p, &x) in xs.iter().enumerate() {
                let pt = [x];
                let scope = Scope::constant_segment(&pt, model.delay, i);
                coupling_start.push(coupling.len());
                if is_boundary[p] {
                    continue;
                }
                let mut bb = [0.0];
                model.drift_into(&pt, i, &mut bb)?;
                model.diffusion_into(&pt, i, &mut sigma)?;
                c.b[p] = bb[0];
                c.a[p] = sigma.iter().map(|s| s * s).sum();
                if !(c.a[p] >= spec.theta) {
                    return Err(EllipticError::NotElliptic { x, regime: i, value: c.a[p], theta: spec.theta });
                }
                totals[i - 1][p] = kernel.rate_row(&scope, &mut row)?;
                coupling.extend_from_slice(&row);
                rhs[i - 1][p] = spec.rhs.evaluate(&Scope::point(&pt, i)).map_err(ev("rhs"))?;
                kill[p] = match &spec.killing {
                    Some(e) => e.evaluate(&Scope::point(&pt, i)).map_err(ev("killing"))?,
                    None => 0.0,
                };
                if kill[p] < 0.0 {
                    return Err(EllipticError::Invalid(format!("negative killing rate at x = {x}, regime {i}")));
                }
            }
            for (blk, iv) in blocks.iter().zip(&spec.intervals) {
                let (l, r) = (blk.start, blk.start + blk.len - 1);
                boundary_values[i - 1][l] = iv.left.evaluate(&Scope::point(&[xs[l]], i)).map_err(ev("boundary"))?;
                boundary_values[i - 1][r] = iv.right.evaluate(&Scope::point(&[xs[r]], i)).map_err(ev("boundary"))?;
            }
            let (mut sub, mut diag, mut sup) = (vec![0.0; n_nodes], vec![1.0; n_nodes], vec![0.0; n_nodes]);
            for blk in &blocks {
                let step = xs[blk.start + 1] - xs[blk.start];
                for p in blk.start + 1..blk.start + blk.len - 1 {
                    let (a, b) = (c.a[p], c.b[p]);
                    if b.abs() * step > a {
                        return Err(EllipticError::NotMonotone { x: xs[p], regime: i, h: step });
                    }
                    let second = 0.5 * a / (step * step);
                    let first = 0.5 * b / step;
                    sub[p] = second - first;
                    sup[p] = second + first;
                    diag[p] = -2.0 * second - totals[i - 1][p] - kill[p];
                }
            }
            factors.push(Tridiagonal::factor(&sub, &diag, &sup)?);
        }
        coupling_start.push(coupling.len());
        Ok(EllipticSystem {
            k,
            h,
            xs,
            blocks,
            is_boundary,
            boundary_values,
            rhs,
            totals,
            coupling,
            coupling_start,
            factors,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.xs.len()
    }

    fn couplings(&self, i: Regime, p: usize) -> &[(Regime, f64)] {
        let idx = (i - 1) * self.n_nodes() + p;
        &self.coupling[self.coupling_start[idx]..self.coupling_start[idx + 1]]
    }

    /// Solves `L_i u − q_i u = rhs` with boundary nodes taken from `rhs` as values.
    pub fn solve_scalar_dirichlet(&self, i: Regime, rhs: &[f64]) -> Vec<f64> {
        let mut u = rhs.to_vec();
        self.factors[i - 1].solve_in_place(&mut u);
        u
    }

    fn sweep(&self, prev: Option<&[Vec<f64>]>, boundary: bool) -> Vec<Vec<f64>> {
        (1..=self.k)
            .map(|i| {
                let mut r = vec![0.0; self.n_nodes()];
                for p in 0..self.n_nodes() {
                    r[p] = if self.is_boundary[p] {
                        if boundary {
                            self.boundary_values[i - 1][p]
                        } else {
                            0.0
                        }
                    } else {
                        let mut v = self.rhs[i - 1][p];
                        if let Some(u) = prev {
                            for &(j, q) in self.couplings(i, p) {
                                v -= q * u[j - 1][p];
                            }
                        }
                        v
                    };
                }
                self.solve_scalar_dirichlet(i, &r)
            })
            .collect()
    }

    /// Successive approximation until `Δ_m ≤ tol·(1 + max|u|)`.
    pub fn solve_fixed_point(&self, tol: f64, max_iter: usize) -> Result<Solution, EllipticError> {
        let mut u = self.sweep(None, true);
        let mut deltas: Vec<f64> = Vec::new();
        let bound = self.contraction_bound().ok().map(|b| b.bound);
        loop {
            let next = self.sweep(Some(&u), true);
            let mut delta = 0.0f64;
            let mut size = 0.0f64;
            for (a, b) in next.iter().zip(&u) {
                for (x, y) in a.iter().zip(b) {
                    delta = delta.max((x - y).abs());
                    size = size.max(x.abs());
                }
            }
            deltas.push(delta);
            u = next;
            let done = delta <= tol * (1.0 + size);
            if done || deltas.len() >= max_iter {
                let ratios = deltas.windows(3).map(|w| if w[0] > 0.0 { w[2] / w[0] } else { 0.0 }).collect();
                let trace = IterationTrace { deltas, ratios, bound };
                if !done {
                    let last_delta = *trace.deltas.last().unwrap_or(&f64::NAN);
                    return Err(EllipticError::NotConverged {
                        iterations: trace.deltas.len(),
                        last_delta,
                        trace: Box::new(trace),
                    });
                }
                return Ok(Solution { xs: self.xs.clone(), blocks: self.blocks.clone(), u, trace });
            }
        }
    }

    /// Smallest `ε₀` with `Σ_{j≤n0} q_ij(x) ≥ ε₀` for all `i ∈ (n0, K]` and interior `x`, per `n0`.
    pub fn tail_rates(&self) -> Vec<(Regime, f64)> {
        (1..=self.k)
            .map(|n0| {
                let mut eps = f64::INFINITY;
                for i in n0 + 1..=self.k {
                    for p in (0..self.n_nodes()).filter(|&p| !self.is_boundary[p]) {
                        let s: f64 = self.couplings(i, p).iter().filter(|(j, _)| *j <= n0).map(|(_, q)| q).sum();
                        eps = eps.min(s);
                    }
                }
                (n0, eps)
            })
            .collect()
    }

    /// `M_D = max q_i(x)` over interior nodes and retained regimes.
    pub fn max_rate(&self) -> f64 {
        self.totals.iter().flat_map(|t| t.iter()).fold(0.0, |a, &b| a.max(b))
    }

    /// `w_i` solving `L_i w − q_i w = −q_i` with zero boundary data.
    pub fn switch_before_exit(&self, i: Regime) -> Vec<f64> {
        let r: Vec<f64> =
            (0..self.n_nodes()).map(|p| if self.is_boundary[p] { 0.0 } else { -self.totals[i - 1][p] }).collect();
        self.solve_scalar_dirichlet(i, &r)
    }

    /// Best two-sweep contraction factor over admissible `n0`.
    pub fn contraction_bound(&self) -> Result<ContractionBound, EllipticError> {
        let m_d = self.max_rate();
        let mut p_prefix = Vec::with_capacity(self.k);
        let mut running = 0.0f64;
        for i in 1..=self.k {
            running = running.max(self.switch_before_exit(i).into_iter().fold(0.0, f64::max));
            p_prefix.push(running);
        }
        let mut best: Option<ContractionBound> = None;
        for (n0, eps0) in self.tail_rates() {
            let p = p_prefix[n0 - 1];
            let (eps0, eps1) = if n0 == self.k {
                (f64::INFINITY, 0.0)
            } else if eps0 > 0.0 && m_d > 0.0 {
                (eps0, 1.0 - eps0 / m_d)
            } else {
                continue;
            };
            let bound = p + (1.0 - p) * eps1;
            if best.is_none_or(|b| bound < b.bound) {
                best = Some(ContractionBound { n0, eps0, m_d, eps1, p, bound });
            }
        }
        best.ok_or_else(|| EllipticError::Invalid("no admissible n0".into()))
    }
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub xs: Vec<f64>,
    blocks: Vec<Block>,
    /// `u[i-1][node]`.
    pub u: Vec<Vec<f64>>,
    pub trace: IterationTrace,
}

impl Solution {
    /// Linear interpolation of `u(·, i)` at `x`; `None` outside the domain.
    pub fn value_at(&self, x: f64, i: Regime) -> Option<f64> {
        let ui = self.u.get(i.checked_sub(1)?)?;
        for blk in &self.blocks {
            let nodes = &self.xs[blk.start..blk.start + blk.len];
            let (lo, hi) = (nodes[0], nodes[nodes.len() - 1]);
            if x < lo || x > hi {
                continue;
            }
            let step = nodes[1] - nodes[0];
            let pos = ((x - lo) / step).clamp(0.0, (blk.len - 1) as f64);
            let mut p = pos.floor() as usize;
            if p >= blk.len - 1 {
                p = blk.len - 2;
            }
            let w = pos - p as f64;
            let (a, b) = (ui[blk.start + p], ui[blk.start + p + 1]);
            return Some(if w <= 1e-12 {
                a
            } else if w >= 1.0 - 1e-12 {
                b
            } else {
                a + w * (b - a)
            });
        }
        None
    }

    /// Rows `(x, i, u)` ordered by regime then node.
    pub fn rows(&self) -> impl Iterator<Item = (f64, Regime, f64)> + '_ {
        self.u.iter().enumerate().flat_map(move |(k, ui)| self.xs.iter().zip(ui).map(move |(x, u)| (*x, k + 1, *u)))
    }
}

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 10_000;

/// `E_{x,i} τ_D` on `(lo, hi)`: right-hand side `−1`, zero boundary data.
pub fn mean_exit_time(
    model: &RegimeSwitchingModel,
    lo: f64,
    hi: f64,
    h: f64,
    k: Regime,
) -> Result<Solution, EllipticError> {
    let spec = EllipticSpec::new(vec![DomainInterval::with_values(lo, hi, 0.0, 0.0)], h, k, Expr::num(-1.0));
    EllipticSystem::assemble(model, &spec)?.solve_fixed_point(DEFAULT_TOL, DEFAULT_MAX_ITER)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Recurrent,
    Transient,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecurrenceReport {
    #[serde(rename = "D1")]
    pub d1: (f64, f64),
    pub ks: Vec<f64>,
    /// `max_{probe, i} (1 − v_k(x, i))` per `k`.
    pub deficits: Vec<f64>,
    /// `v_k` at each probe for each regime: `values[k][probe][i-1]`.
    pub values: Vec<Vec<Vec<f64>>>,
    pub probes: Vec<f64>,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecurrenceOptions {
    pub h: f64,
    pub k_regimes: Regime,
    pub probes: Vec<f64>,
    pub tol_rec: f64,
}

/// Solves for `v_k(x, i) = P_{x,i}(exit through D₁)` on `D_k = (−k, l) ∪ (u, k)` for each `k`.
///
/// Recurrent when the last deficit is at most `tol_rec` and deficits shrink in
/// `k`; transient when the last two deficits agree to 5% and exceed `10·tol_rec`.
pub fn recurrence_indicator(
    model: &RegimeSwitchingModel,
    d1: (f64, f64),
    ks: &[f64],
    opts: &RecurrenceOptions,
) -> Result<RecurrenceReport, EllipticError> {
    let (l, u) = d1;
    if !(l < u) || ks.is_empty() || ks.windows(2).any(|w| w[1] <= w[0]) || ks[0] <= u.abs().max(l.abs()) {
        return Err(EllipticError::Invalid("need l < u and an increasing k schedule beyond D1".into()));
    }
    let mut deficits = Vec::with_capacity(ks.len());
    let mut values = Vec::with_capacity(ks.len());
    for &k in ks {
        if opts.probes.iter().any(|x| !(*x > -k && *x < k) || (*x >= l && *x <= u)) {
            return Err(EllipticError::Invalid(format!("probes must lie in D_k for k = {k}")));
        }
        let spec = EllipticSpec::new(
            vec![DomainInterval::with_values(-k, l, 0.0, 1.0), DomainInterval::with_values(u, k, 1.0, 0.0)],
            opts.h,
            opts.k_regimes,
            Expr::num(0.0),
        );
        let sol = EllipticSystem::assemble(model, &spec)?.solve_fixed_point(DEFAULT_TOL, DEFAULT_MAX_ITER)?;
        let mut at_k = Vec::with_capacity(opts.probes.len());
        let mut worst = 0.0f64;
        for &x in &opts.probes {
            let vi: Vec<f64> = (1..=opts.k_regimes).map(|i| sol.value_at(x, i).expect("probe inside domain")).collect();
            worst = vi.iter().fold(worst, |w, v| w.max(1.0 - v));
            at_k.push(vi);
        }
        deficits.push(worst);
        values.push(at_k);
    }
    let last = *deficits.last().expect("nonempty");
    let shrinking = deficits.windows(2).all(|w| w[1] < w[0]);
    let verdict = if last <= opts.tol_rec && (deficits.len() == 1 || shrinking) {
        Verdict::Recurrent
    } else if deficits.len() >= 2 && last > 10.0 * opts.tol_rec && {
        let prev = deficits[deficits.len() - 2];
        (last - prev).abs() <= 0.05 * last
    } {
        Verdict::Transient
    } else {
        Verdict::Inconclusive
    };
    Ok(RecurrenceReport { d1, ks: ks.to_vec(), deficits, values, probes: opts.probes.clone(), verdict })
}

/// Monte-Carlo estimate of `E[1 − exp(−∫_0^{τ} q_i(Y_s) ds)]` for the diffusion frozen in
/// regime `i` started at `x0` and stopped on leaving `(lo, hi)`. Returns mean and standard error.
pub fn switch_before_exit_mc(
    model: &RegimeSwitchingModel,
    lo: f64,
    hi: f64,
    i: Regime,
    x0: f64,
    dt: f64,
    n_paths: usize,
    seed: u64,
    threads: usize,
) -> Result<(f64, f64), EllipticError> {
    if model.dim != 1 {
        return Err(EllipticError::NotScalar(model.dim));
    }
    if !model.is_past_independent() {
        return Err(EllipticError::PastDependent);
    }
    let sqrt_dt = dt.sqrt();
    let samples = par_paths(n_paths, threads, |p| -> Result<f64, EllipticError> {
        let mut rng = stream(seed, Purpose::Dynamics, p);
        let mut x = x0;
        let mut acc = 0.0;
        let mut row = Vec::new();
        let (mut b, mut s) = ([0.0], vec![0.0; model.noise_dim]);
        while x > lo && x < hi {
            let pt = [x];
            let q = model.kernel.rate_row(&Scope::constant_segment(&pt, model.delay, i), &mut row)?;
            model.drift_into(&pt, i, &mut b)?;
            model.diffusion_into(&pt, i, &mut s)?;
            acc += q * dt;
            let noise: f64 = s
                .iter()
                .map(|sc| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    sc * z
                })
                .sum::<f64>();
            x += b[0] * dt + noise * sqrt_dt;
            if acc > 50.0 {
                break;
            }
        }
        Ok(1.0 - (-acc).exp())
    })?
    .into_iter()
    .collect::<Result<Vec<f64>, _>>()?;
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok((mean, (var / n).sqrt()))
}

pub fn parse_point(text: &str, context: &'static str) -> Result<Expr, EllipticError> {
    Expr::parse(text, ExprKind::Point).map_err(|source| EllipticError::Parse { context, source })
}
