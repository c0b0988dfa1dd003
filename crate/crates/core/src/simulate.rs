//! Path simulation of `(X(t), α(t))`.
//!
//! The continuous part uses Euler–Maruyama with the pre-jump regime. The
//! regime jumps through the interval lookup `z ∈ Δ_ij(φ)` on the rate row of the
//! frozen pre-step segment, either with the per-step rate `1 − e^{−q_i dt}`
//! (`euler-rate`) or by thinning candidate times against a rate bound.
//! Batches run on a rayon pool and are merged by path index.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, RateBound, Regime, RegimeSwitchingModel};
use crate::rng::{stream, Purpose};
use crate::segment::{SegmentError, SegmentPath};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Segment(#[from] SegmentError),
    #[error("segment norm {norm} exceeds the explosion cap {cap}")]
    Explosion { norm: f64, cap: f64 },
    #[error("total rate {total} in regime {regime} exceeds the dominating bound {bound}")]
    BoundViolated { regime: Regime, total: f64, bound: f64 },
    #[error("thinning needs a rate bound but the kernel declares none")]
    NoBound,
    #[error("invalid simulation setup: {0}")]
    Config(String),
    #[error("failed to build thread pool: {0}")]
    ThreadPool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum JumpMode {
    #[default]
    EulerRate,
    Thinning,
}

impl std::str::FromStr for JumpMode {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "euler-rate" => Ok(JumpMode::EulerRate),
            "thinning" => Ok(JumpMode::Thinning),
            other => Err(SimError::Config(format!("unknown jump mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for JumpMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            JumpMode::EulerRate => "euler-rate",
            JumpMode::Thinning => "thinning",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub dt: f64,
    pub mode: JumpMode,
    /// Paths whose segment norm passes this are censored.
    pub h_cap: f64,
    /// Added to `‖φ‖` when evaluating a local rate bound.
    pub bound_margin: f64,
    /// Keep every `record_stride`-th grid point in trajectories.
    pub record_stride: usize,
}

impl SimConfig {
    pub fn new(dt: f64) -> Self {
        SimConfig { dt, mode: JumpMode::EulerRate, h_cap: 1e6, bound_margin: 1.0, record_stride: 1 }
    }

    pub fn with_mode(mut self, mode: JumpMode) -> Self {
        self.mode = mode;
        self
    }

    fn validate(&self) -> Result<(), SimError> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(SimError::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.h_cap > 0.0) || !(self.bound_margin >= 0.0) || self.record_stride == 0 {
            return Err(SimError::Config("h_cap, bound_margin and record_stride must be positive".into()));
        }
        Ok(())
    }
}

/// Number of grid steps covering `[0, t]`: `t/dt` when it is an integer up to rounding, else rounded up.
pub fn steps_for(t: f64, dt: f64) -> usize {
    let q = t / dt;
    let r = q.round();
    if (q - r).abs() <= 1e-9 * r.max(1.0) {
        r as usize
    } else {
        q.ceil() as usize
    }
}

/// Returns the `j` whose interval `Δ_ij = [Σ_{k<j} q_ik, Σ_{k≤j} q_ik)` contains `z`.
pub fn sample_regime_jump(row: &[(Regime, f64)], total: f64, z: f64) -> Option<Regime> {
    if !(z >= 0.0) || z >= total {
        return None;
    }
    let mut acc = 0.0;
    for &(j, q) in row {
        acc += q;
        if z < acc {
            return Some(j);
        }
    }
    // z < total but rounding left it past the last cumulative sum.
    row.last().map(|&(j, _)| j)
}

/// Starting data: the segment on `[-r, 0]` and `α(0)`.
#[derive(Debug, Clone)]
pub struct PathInit {
    pub segment: SegmentPath,
    pub regime: Regime,
}

impl PathInit {
    /// `φ ≡ x` on the grid of step `dt`.
    pub fn constant(model: &RegimeSwitchingModel, x: &[f64], regime: Regime, dt: f64) -> Result<Self, SimError> {
        let m = SegmentPath::intervals_for(model.delay, dt)?;
        Ok(PathInit { segment: SegmentPath::constant(model.delay, m, x)?, regime })
    }
}

#[derive(Debug, Clone)]
pub struct HybridState {
    pub seg: SegmentPath,
    pub regime: Regime,
    pub steps: u64,
    pub time: f64,
    pub rng: ChaCha8Rng,
}

impl HybridState {
    pub fn new(init: &PathInit, seed: u64, path: u64) -> Self {
        HybridState {
            seg: init.segment.clone(),
            regime: init.regime,
            steps: 0,
            time: 0.0,
            rng: stream(seed, Purpose::Dynamics, path),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JumpEvent {
    pub t: f64,
    pub from: Regime,
    pub to: Regime,
}

/// One-step driver with reusable buffers; the model is only read.
pub struct Stepper<'m> {
    pub model: &'m RegimeSwitchingModel,
    pub cfg: SimConfig,
    row: Vec<(Regime, f64)>,
    b: Vec<f64>,
    s: Vec<f64>,
    xi: Vec<f64>,
    next: Vec<f64>,
    sqrt_dt: f64,
    exp_unit: Exp<f64>,
}

impl<'m> Stepper<'m> {
    pub fn new(model: &'m RegimeSwitchingModel, cfg: SimConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        if cfg.mode == JumpMode::Thinning && matches!(model.kernel.bound, RateBound::None) {
            return Err(SimError::NoBound);
        }
        let (n, d) = (model.dim, model.noise_dim);
        Ok(Stepper {
            model,
            row: Vec::with_capacity(4),
            b: vec![0.0; n],
            s: vec![0.0; n * d],
            xi: vec![0.0; d],
            next: vec![0.0; n],
            sqrt_dt: cfg.dt.sqrt(),
            exp_unit: Exp::new(1.0).expect("unit rate"),
            cfg,
        })
    }

    /// Checks that `init` fits the model and the step size.
    pub fn check_init(&self, init: &PathInit) -> Result<(), SimError> {
        let seg = &init.segment;
        if seg.dim() != self.model.dim {
            return Err(SimError::Config(format!(
                "initial segment has dimension {}, model has {}",
                seg.dim(),
                self.model.dim
            )));
        }
        if (seg.delay() - self.model.delay).abs() > 1e-12 * self.model.delay {
            return Err(SimError::Config(format!(
                "initial segment covers delay {}, model has {}",
                seg.delay(),
                self.model.delay
            )));
        }
        if (seg.step() - self.cfg.dt).abs() > 1e-12 * self.cfg.dt.max(seg.step()) {
            return Err(SimError::Config(format!("segment step {} differs from dt {}", seg.step(), self.cfg.dt)));
        }
        if init.regime == 0 {
            return Err(ModelError::BadRegime(0).into());
        }
        Ok(())
    }

    /// Rate row of the frozen segment; the row is left in the internal buffer.
    pub fn rates(&mut self, seg: &SegmentPath, i: Regime) -> Result<f64, SimError> {
        Ok(self.model.rate_row(seg, i, &mut self.row)?)
    }

    pub fn row(&self) -> &[(Regime, f64)] {
        &self.row
    }

    fn bound(&self, seg: &SegmentPath, i: Regime) -> Result<f64, SimError> {
        let h = seg.sup_norm() + self.cfg.bound_margin;
        self.model.kernel.bound_at(h, i)?.ok_or(SimError::NoBound)
    }

    /// Advances `state` by one grid step, appending any regime jumps to `jumps`.
    pub fn step(&mut self, state: &mut HybridState, jumps: &mut Vec<JumpEvent>) -> Result<(), SimError> {
        let norm = state.seg.sup_norm();
        if norm > self.cfg.h_cap {
            return Err(SimError::Explosion { norm, cap: self.cfg.h_cap });
        }
        let (n, d) = (self.model.dim, self.model.noise_dim);
        let i = state.regime;
        let dt = self.cfg.dt;
        let x = state.seg.current();
        self.model.drift_into(x, i, &mut self.b)?;
        self.model.diffusion_into(x, i, &mut self.s)?;
        for v in self.xi.iter_mut() {
            *v = StandardNormal.sample(&mut state.rng);
        }
        for k in 0..n {
            let noise: f64 = (0..d).map(|c| self.s[k * d + c] * self.xi[c]).sum();
            self.next[k] = x[k] + self.b[k] * dt + noise * self.sqrt_dt;
        }
        let t_after = (state.steps + 1) as f64 * dt;

        match self.cfg.mode {
            JumpMode::EulerRate => {
                let total = self.rates(&state.seg, i)?;
                let u: f64 = state.rng.random();
                let p = -(-total * dt).exp_m1();
                if u < p {
                    let z = (u / p) * total;
                    if let Some(j) = sample_regime_jump(&self.row, total, z) {
                        jumps.push(JumpEvent { t: t_after, from: i, to: j });
                        state.regime = j;
                    }
                }
            }
            JumpMode::Thinning => {
                let mut regime = i;
                let mut bound = self.bound(&state.seg, regime)?;
                let mut t = 0.0;
                loop {
                    if bound <= 0.0 {
                        break;
                    }
                    t += self.exp_unit.sample(&mut state.rng) / bound;
                    if t >= dt {
                        break;
                    }
                    let total = self.rates(&state.seg, regime)?;
                    if total > bound * (1.0 + 1e-12) {
                        return Err(SimError::BoundViolated { regime, total, bound });
                    }
                    let z = state.rng.random::<f64>() * bound;
                    if let Some(j) = sample_regime_jump(&self.row, total, z) {
                        jumps.push(JumpEvent { t: t_after, from: regime, to: j });
                        regime = j;
                        bound = self.bound(&state.seg, regime)?;
                    }
                }
                state.regime = regime;
            }
        }

        if self.next.iter().any(|v| !v.is_finite()) {
            return Err(SimError::Explosion { norm: f64::INFINITY, cap: self.cfg.h_cap });
        }
        state.seg.advance(&self.next)?;
        state.steps += 1;
        state.time = t_after;
        Ok(())
    }
}

/// Recorded sample path.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dim: usize,
    pub times: Vec<f64>,
    /// Row-major, `dim` values per recorded time.
    pub xs: Vec<f64>,
    pub regimes: Vec<Regime>,
    pub jumps: Vec<JumpEvent>,
    pub censored: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn x(&self, k: usize) -> &[f64] {
        &self.xs[k * self.dim..(k + 1) * self.dim]
    }

    fn record(&mut self, state: &HybridState) {
        self.times.push(state.time);
        self.xs.extend_from_slice(state.seg.current());
        self.regimes.push(state.regime);
    }

    /// Final recorded `(X, α)`.
    pub fn terminal(&self) -> (&[f64], Regime) {
        let k = self.len() - 1;
        (self.x(k), self.regimes[k])
    }
}

/// Simulates one path on `[0, t_end]`.
///
/// An explosion-guard hit ends the path early with `censored = true`.
pub fn simulate_path(
    model: &RegimeSwitchingModel,
    init: &PathInit,
    t_end: f64,
    cfg: &SimConfig,
    seed: u64,
    path: u64,
) -> Result<Trajectory, SimError> {
    if !(t_end >= 0.0) {
        return Err(SimError::Config(format!("horizon must be nonnegative, got {t_end}")));
    }
    let mut stepper = Stepper::new(model, cfg.clone())?;
    stepper.check_init(init)?;
    let n_steps = steps_for(t_end, cfg.dt);
    let mut state = HybridState::new(init, seed, path);
    let mut traj = Trajectory {
        dim: model.dim,
        times: Vec::with_capacity(n_steps / cfg.record_stride + 2),
        xs: Vec::new(),
        regimes: Vec::new(),
        jumps: Vec::new(),
        censored: false,
    };
    traj.record(&state);
    for k in 1..=n_steps {
        match stepper.step(&mut state, &mut traj.jumps) {
            Ok(()) => {}
            Err(SimError::Explosion { .. }) => {
                traj.censored = true;
                break;
            }
            Err(e) => return Err(e),
        }
        if k % cfg.record_stride == 0 || k == n_steps {
            traj.record(&state);
        }
    }
    if traj.censored && traj.times.last() != Some(&state.time) {
        traj.record(&state);
    }
    Ok(traj)
}

/// Runs `f(path)` for `path in 0..n_paths` on `threads` workers and returns results in path order.
pub fn par_paths<T, F>(n_paths: usize, threads: usize, f: F) -> Result<Vec<T>, SimError>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| SimError::ThreadPool(e.to_string()))?;
    Ok(pool.install(|| (0..n_paths as u64).into_par_iter().map(&f).collect()))
}

pub fn simulate_batch(
    model: &RegimeSwitchingModel,
    init: &PathInit,
    t_end: f64,
    cfg: &SimConfig,
    seed: u64,
    n_paths: usize,
    threads: usize,
) -> Result<Vec<Trajectory>, SimError> {
    par_paths(n_paths, threads, |p| simulate_path(model, init, t_end, cfg, seed, p))?.into_iter().collect()
}

// ---------------------------------------------------------------------------
// Hitting times

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "kebab-case")]
pub enum Region {
    /// `{lo ≤ x ≤ hi}` componentwise; infinite bounds allowed.
    Box { lo: Vec<f64>, hi: Vec<f64> },
    /// `{|x − center| ≤ radius}`.
    Ball { center: Vec<f64>, radius: f64 },
    /// Complement of the open box `{lo < x < hi}`: hitting it is leaving the box.
    OutsideBox { lo: Vec<f64>, hi: Vec<f64> },
}

impl Region {
    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            Region::Box { lo, hi } => x.iter().zip(lo.iter().zip(hi)).all(|(v, (a, b))| *a <= *v && *v <= *b),
            Region::Ball { center, radius } => {
                x.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() <= radius * radius
            }
            Region::OutsideBox { lo, hi } => !x.iter().zip(lo.iter().zip(hi)).all(|(v, (a, b))| *a < *v && *v < *b),
        }
    }

    fn dim(&self) -> usize {
        match self {
            Region::Box { lo, .. } | Region::OutsideBox { lo, .. } => lo.len(),
            Region::Ball { center, .. } => center.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HitTarget {
    pub region: Region,
    /// `None` accepts every regime.
    pub regimes: Option<Vec<Regime>>,
    /// Require every node of the segment to lie in the region, not just `φ(0)`.
    pub whole_segment: bool,
    /// For exit targets, also count excursions between grid points using the
    /// Brownian-bridge crossing probability with the frozen diffusion.
    pub bridge: bool,
}

impl HitTarget {
    pub fn point(region: Region) -> Self {
        HitTarget { region, regimes: None, whole_segment: false, bridge: false }
    }

    fn regime_ok(&self, i: Regime) -> bool {
        self.regimes.as_ref().is_none_or(|set| set.contains(&i))
    }

    fn hit(&self, state: &HybridState) -> bool {
        if !self.regime_ok(state.regime) {
            return false;
        }
        if self.whole_segment {
            state.seg.values().all(|v| self.region.contains(v))
        } else {
            self.region.contains(state.seg.current())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HitResult {
    pub tau: f64,
    pub censored: bool,
}

/// Probability that a Brownian bridge from `x` to `y` with variance rate `a` leaves `(lo, hi)` in time `dt`.
fn bridge_exit_probability(x: f64, y: f64, lo: f64, hi: f64, a: f64, dt: f64) -> f64 {
    if a <= 0.0 {
        return 0.0;
    }
    let mut p = 0.0;
    if lo.is_finite() {
        p += (-2.0 * (x - lo) * (y - lo) / (a * dt)).exp();
    }
    if hi.is_finite() {
        p += (-2.0 * (hi - x) * (hi - y) / (a * dt)).exp();
    }
    p.min(1.0)
}

/// First grid time at which `(X(t), α(t))` lies in the target, or `T_max` censored.
pub fn first_hit(
    model: &RegimeSwitchingModel,
    init: &PathInit,
    target: &HitTarget,
    cfg: &SimConfig,
    t_max: f64,
    seed: u64,
    path: u64,
) -> Result<HitResult, SimError> {
    if !(t_max.is_finite() && t_max >= 0.0) {
        return Err(SimError::Config(format!("T_max must be finite, got {t_max}")));
    }
    if target.region.dim() != model.dim {
        return Err(SimError::Config("target region dimension differs from the model".into()));
    }
    let mut stepper = Stepper::new(model, cfg.clone())?;
    stepper.check_init(init)?;
    let mut state = HybridState::new(init, seed, path);
    if target.hit(&state) {
        return Ok(HitResult { tau: 0.0, censored: false });
    }
    let mut bridge_rng = stream(seed, Purpose::Bridge, path);
    let bridge_box = match (&target.region, target.bridge && !target.whole_segment) {
        (Region::OutsideBox { lo, hi }, true) => Some((lo.clone(), hi.clone())),
        _ => None,
    };
    let n = model.dim;
    let d = model.noise_dim;
    let mut prev = vec![0.0; n];
    let mut sigma = vec![0.0; n * d];
    let mut jumps = Vec::new();
    for _ in 0..steps_for(t_max, cfg.dt) {
        prev.copy_from_slice(state.seg.current());
        let pre_regime = state.regime;
        match stepper.step(&mut state, &mut jumps) {
            Ok(()) => {}
            Err(SimError::Explosion { .. }) => return Ok(HitResult { tau: t_max, censored: true }),
            Err(e) => return Err(e),
        }
        jumps.clear();
        if target.hit(&state) {
            return Ok(HitResult { tau: state.time, censored: false });
        }
        if let Some((lo, hi)) = &bridge_box {
            if target.regime_ok(pre_regime) {
                model.diffusion_into(&prev, pre_regime, &mut sigma)?;
                let y = state.seg.current();
                let mut stay = 1.0;
                for k in 0..n {
                    let a: f64 = sigma[k * d..(k + 1) * d].iter().map(|s| s * s).sum();
                    stay *= 1.0 - bridge_exit_probability(prev[k], y[k], lo[k], hi[k], a, cfg.dt);
                }
                if bridge_rng.random::<f64>() < 1.0 - stay {
                    return Ok(HitResult { tau: state.time, censored: false });
                }
            }
        }
    }
    Ok(HitResult { tau: t_max, censored: true })
}

pub fn first_hit_batch(
    model: &RegimeSwitchingModel,
    init: &PathInit,
    target: &HitTarget,
    cfg: &SimConfig,
    t_max: f64,
    seed: u64,
    n_paths: usize,
    threads: usize,
) -> Result<Vec<HitResult>, SimError> {
    par_paths(n_paths, threads, |p| first_hit(model, init, target, cfg, t_max, seed, p))?.into_iter().collect()
}
