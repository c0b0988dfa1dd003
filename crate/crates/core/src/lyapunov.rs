//! Cylindrical Lyapunov functionals and drift checks.
//!
//! `V(φ, i) = f₁(φ(0), i) + ∫_{-r}^0 g(t) f₂(φ(t), i) dt`. Vertical derivatives
//! only touch `f₁`; the horizontal derivative only touches the integral. The
//! generator adds the drift, diffusion and switching terms at `φ(0)`.
//!
//! Drift scans evaluate `𝓛V` on sampled `(φ, i)` and either report margins for
//! given constants or fit the least-violating ones. The Dynkin check compares
//! `E V(X_T) − V(φ₀)` with `E ∫ 𝓛V ds` along simulated paths.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::expr::{EvalError, Expr, ExprKind, ParseError, Scope};
use crate::model::{ModelError, Regime, RegimeSwitchingModel};
use crate::rng::{stream, Purpose};
use crate::segment::{SegmentError, SegmentPath};
use crate::simulate::{par_paths, HybridState, JumpMode, PathInit, SimConfig, SimError, Stepper};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LyapunovError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Segment(#[from] SegmentError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("evaluation error in {context}: {source}")]
    Eval { context: &'static str, source: EvalError },
    #[error("parse error in {context}: {source}")]
    Parse { context: &'static str, source: ParseError },
    #[error("sampler produced no points")]
    NoPoints,
    #[error("{0}")]
    Invalid(String),
}

fn ev(context: &'static str) -> impl Fn(EvalError) -> LyapunovError {
    move |source| LyapunovError::Eval { context, source }
}

/// Point part `f₁(x, i)` of the functional.
#[derive(Debug, Clone, PartialEq)]
pub enum F1 {
    /// `f(|x|) + w·i` with the C² quartic cap: `(−ρ⁴ + 6ρ² + 3)/8` for `ρ < 1`, `ρ` otherwise.
    QuarticCap { regime_weight: f64 },
    /// `|x|² + w·i`.
    Quadratic { regime_weight: f64 },
    /// Arbitrary point expression; derivatives by central differences.
    Expr(Expr),
    /// `Σ c_k f_k`.
    Sum(Vec<(f64, F1)>),
}

/// Quartic cap of `ρ ≥ 0` with its first two derivatives.
pub fn quartic_cap(rho: f64) -> (f64, f64, f64) {
    if rho < 1.0 {
        let r2 = rho * rho;
        ((-r2 * r2 + 6.0 * r2 + 3.0) / 8.0, rho * (3.0 - r2) / 2.0, 1.5 * (1.0 - r2))
    } else {
        (rho, 1.0, 0.0)
    }
}

/// Step used for finite-difference derivatives of expression-valued `f₁`.
pub const FD_STEP: f64 = 1e-4;

impl F1 {
    pub fn value(&self, x: &[f64], i: Regime) -> Result<f64, LyapunovError> {
        Ok(match self {
            F1::QuarticCap { regime_weight } => quartic_cap(norm(x)).0 + regime_weight * i as f64,
            F1::Quadratic { regime_weight } => x.iter().map(|v| v * v).sum::<f64>() + regime_weight * i as f64,
            F1::Expr(e) => e.evaluate(&Scope::point(x, i)).map_err(ev("f1"))?,
            F1::Sum(parts) => {
                let mut acc = 0.0;
                for (c, f) in parts {
                    acc += c * f.value(x, i)?;
                }
                acc
            }
        })
    }

    /// Adds `scale·∇f₁` to `grad` and `scale·∇²f₁` (row-major) to `hess`.
    pub fn add_derivatives(
        &self,
        x: &[f64],
        i: Regime,
        scale: f64,
        grad: &mut [f64],
        hess: &mut [f64],
    ) -> Result<(), LyapunovError> {
        let n = x.len();
        match self {
            F1::QuarticCap { .. } => {
                let rho = norm(x);
                if rho < 1.0 {
                    let c = (3.0 - rho * rho) / 2.0;
                    for k in 0..n {
                        grad[k] += scale * c * x[k];
                        for l in 0..n {
                            let id = if k == l { c } else { 0.0 };
                            hess[k * n + l] += scale * (id - x[k] * x[l]);
                        }
                    }
                } else {
                    for k in 0..n {
                        grad[k] += scale * x[k] / rho;
                        for l in 0..n {
                            let id = if k == l { 1.0 } else { 0.0 };
                            hess[k * n + l] += scale * (id - x[k] * x[l] / (rho * rho)) / rho;
                        }
                    }
                }
            }
            F1::Quadratic { .. } => {
                for k in 0..n {
                    grad[k] += scale * 2.0 * x[k];
                    hess[k * n + k] += scale * 2.0;
                }
            }
            F1::Expr(e) => {
                let (g, h) = fd_derivatives(e, x, i, FD_STEP)?;
                for k in 0..n {
                    grad[k] += scale * g[k];
                }
                for (a, b) in hess.iter_mut().zip(h) {
                    *a += scale * b;
                }
            }
            F1::Sum(parts) => {
                for (c, f) in parts {
                    f.add_derivatives(x, i, scale * c, grad, hess)?;
                }
            }
        }
        Ok(())
    }
}

fn norm(x: &[f64]) -> f64 {
    if x.len() == 1 {
        x[0].abs()
    } else {
        x.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Central-difference gradient and Hessian of a point expression, step `h·max(1, |x_k|)`.
pub fn fd_derivatives(e: &Expr, x: &[f64], i: Regime, h: f64) -> Result<(Vec<f64>, Vec<f64>), LyapunovError> {
    let n = x.len();
    let mut y = x.to_vec();
    let f = |y: &[f64]| e.evaluate(&Scope::point(y, i)).map_err(ev("f1"));
    let f0 = f(x)?;
    let hs: Vec<f64> = x.iter().map(|v| h * v.abs().max(1.0)).collect();
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n * n];
    for k in 0..n {
        y[k] = x[k] + hs[k];
        let fp = f(&y)?;
        y[k] = x[k] - hs[k];
        let fm = f(&y)?;
        y[k] = x[k];
        grad[k] = (fp - fm) / (2.0 * hs[k]);
        hess[k * n + k] = (fp - 2.0 * f0 + fm) / (hs[k] * hs[k]);
        for l in 0..k {
            let mut corner = |sk: f64, sl: f64| -> Result<f64, LyapunovError> {
                y[k] = x[k] + sk * hs[k];
                y[l] = x[l] + sl * hs[l];
                let v = f(&y);
                y[k] = x[k];
                y[l] = x[l];
                v
            };
            let mixed = (corner(1.0, 1.0)? - corner(1.0, -1.0)? - corner(-1.0, 1.0)? + corner(-1.0, -1.0)?)
                / (4.0 * hs[k] * hs[l]);
            hess[k * n + l] = mixed;
            hess[l * n + k] = mixed;
        }
    }
    Ok((grad, hess))
}

/// Time weight `g(t)` on `[-r, 0]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TimeWeight {
    Constant {
        value: f64,
    },
    /// `weight · exp(rate · (t + r))`.
    Exponential {
        weight: f64,
        rate: f64,
    },
}

impl TimeWeight {
    pub fn at(self, t: f64, delay: f64) -> f64 {
        match self {
            TimeWeight::Constant { value } => value,
            TimeWeight::Exponential { weight, rate } => weight * (rate * (t + delay)).exp(),
        }
    }

    pub fn derivative(self, t: f64, delay: f64) -> f64 {
        match self {
            TimeWeight::Constant { .. } => 0.0,
            TimeWeight::Exponential { rate, .. } => rate * self.at(t, delay),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CylindricalLyapunov {
    pub f1: F1,
    pub f2: Option<Expr>,
    pub g: TimeWeight,
}

impl CylindricalLyapunov {
    /// `V(φ, i) = f₁(φ(0), i)`.
    pub fn point(f1: F1) -> Self {
        CylindricalLyapunov { f1, f2: None, g: TimeWeight::Constant { value: 0.0 } }
    }

    /// `a·V + b·W`; both must share the time weight.
    pub fn combine(a: f64, v: &Self, b: f64, w: &Self) -> Result<Self, LyapunovError> {
        let f2 = match (&v.f2, &w.f2) {
            (None, None) => None,
            (Some(p), None) => Some(Expr::num(a) * p.clone()),
            (None, Some(q)) => Some(Expr::num(b) * q.clone()),
            (Some(p), Some(q)) if v.g == w.g => Some(Expr::num(a) * p.clone() + Expr::num(b) * q.clone()),
            _ => return Err(LyapunovError::Invalid("cannot combine functionals with different time weights".into())),
        };
        let g = if v.f2.is_some() { v.g } else { w.g };
        Ok(CylindricalLyapunov { f1: F1::Sum(vec![(a, v.f1.clone()), (b, w.f1.clone())]), f2, g })
    }

    fn f2_at(&self, f2: &Expr, x: &[f64], i: Regime) -> Result<f64, LyapunovError> {
        f2.evaluate(&Scope::point(x, i)).map_err(ev("f2"))
    }

    /// Trapezoidal `∫ g(t) f₂(φ(t), i) dt`.
    pub fn integral(&self, seg: &SegmentPath, i: Regime) -> Result<f64, LyapunovError> {
        let Some(f2) = &self.f2 else { return Ok(0.0) };
        let (m, r) = (seg.intervals(), seg.delay());
        let mut acc = 0.0;
        for k in 0..=m {
            let w = if k == 0 || k == m { 0.5 } else { 1.0 };
            acc += w * self.g.at(seg.node_time(k), r) * self.f2_at(f2, seg.node(k), i)?;
        }
        Ok(acc * seg.step())
    }

    pub fn value(&self, seg: &SegmentPath, i: Regime) -> Result<f64, LyapunovError> {
        Ok(self.f1.value(seg.current(), i)? + self.integral(seg, i)?)
    }

    /// `V_t = g(0)f₂(φ(0)) − g(−r)f₂(φ(−r)) − ∫ f₂(φ(t)) g′(t) dt`.
    pub fn horizontal_derivative(&self, seg: &SegmentPath, i: Regime) -> Result<f64, LyapunovError> {
        let Some(f2) = &self.f2 else { return Ok(0.0) };
        let r = seg.delay();
        let ends = self.g.at(0.0, r) * self.f2_at(f2, seg.current(), i)?
            - self.g.at(-r, r) * self.f2_at(f2, seg.oldest(), i)?;
        if matches!(self.g, TimeWeight::Constant { .. }) {
            return Ok(ends);
        }
        let m = seg.intervals();
        let mut acc = 0.0;
        for k in 0..=m {
            let w = if k == 0 || k == m { 0.5 } else { 1.0 };
            acc += w * self.g.derivative(seg.node_time(k), r) * self.f2_at(f2, seg.node(k), i)?;
        }
        Ok(ends - acc * seg.step())
    }

    /// `V(φ, j) − V(φ, i)`.
    pub fn regime_difference(&self, seg: &SegmentPath, i: Regime, j: Regime) -> Result<f64, LyapunovError> {
        let x = seg.current();
        let mut d = self.f1.value(x, j)? - self.f1.value(x, i)?;
        if self.f2.as_ref().is_some_and(Expr::uses_regime) {
            d += self.integral(seg, j)? - self.integral(seg, i)?;
        }
        Ok(d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct GeneratorTerms {
    pub horizontal: f64,
    pub drift: f64,
    pub diffusion: f64,
    pub jump: f64,
}

impl GeneratorTerms {
    pub fn total(&self) -> f64 {
        self.horizontal + self.drift + self.diffusion + self.jump
    }
}

/// `𝓛V` evaluator with reusable buffers.
pub struct Generator<'a> {
    pub lyapunov: &'a CylindricalLyapunov,
    pub model: &'a RegimeSwitchingModel,
    b: Vec<f64>,
    s: Vec<f64>,
    grad: Vec<f64>,
    hess: Vec<f64>,
    row: Vec<(Regime, f64)>,
}

impl<'a> Generator<'a> {
    pub fn new(lyapunov: &'a CylindricalLyapunov, model: &'a RegimeSwitchingModel) -> Self {
        let (n, d) = (model.dim, model.noise_dim);
        Generator {
            lyapunov,
            model,
            b: vec![0.0; n],
            s: vec![0.0; n * d],
            grad: vec![0.0; n],
            hess: vec![0.0; n * n],
            row: Vec::new(),
        }
    }

    /// Rate row from the last call to [`Generator::terms`].
    pub fn row(&self) -> &[(Regime, f64)] {
        &self.row
    }

    pub fn terms(&mut self, seg: &SegmentPath, i: Regime) -> Result<GeneratorTerms, LyapunovError> {
        let (n, d) = (self.model.dim, self.model.noise_dim);
        let x = seg.current();
        self.model.drift_into(x, i, &mut self.b)?;
        self.model.diffusion_into(x, i, &mut self.s)?;
        self.grad.fill(0.0);
        self.hess.fill(0.0);
        self.lyapunov.f1.add_derivatives(x, i, 1.0, &mut self.grad, &mut self.hess)?;
        let drift = self.b.iter().zip(&self.grad).map(|(b, g)| b * g).sum();
        let mut diffusion = 0.0;
        for k in 0..n {
            for l in 0..n {
                let a: f64 = (0..d).map(|c| self.s[k * d + c] * self.s[l * d + c]).sum();
                diffusion += a * self.hess[k * n + l];
            }
        }
        diffusion *= 0.5;
        self.model.rate_row(seg, i, &mut self.row)?;
        let mut jump = 0.0;
        for &(j, q) in &self.row {
            jump += q * self.lyapunov.regime_difference(seg, i, j)?;
        }
        Ok(GeneratorTerms { horizontal: self.lyapunov.horizontal_derivative(seg, i)?, drift, diffusion, jump })
    }

    pub fn apply(&mut self, seg: &SegmentPath, i: Regime) -> Result<f64, LyapunovError> {
        Ok(self.terms(seg, i)?.total())
    }
}

pub fn apply_generator(
    v: &CylindricalLyapunov,
    model: &RegimeSwitchingModel,
    seg: &SegmentPath,
    i: Regime,
) -> Result<f64, LyapunovError> {
    Generator::new(v, model).apply(seg, i)
}

/// `κ = sup_{|x| ≤ 1, i ≤ i_max} |f′(x) b(x, i) + ½ f″(x) σ²(x, i)|` for the quartic cap `f`.
///
/// A uniform grid of `n_grid` points is refined twice around the maximiser.
pub fn cap_generator_bound(model: &RegimeSwitchingModel, i_max: Regime, n_grid: usize) -> Result<f64, LyapunovError> {
    if model.dim != 1 {
        return Err(LyapunovError::Invalid("the cap generator bound is defined for scalar models".into()));
    }
    let n_grid = n_grid.max(3);
    let eval = |x: f64, i: Regime| -> Result<f64, LyapunovError> {
        let mut b = [0.0];
        let mut s = vec![0.0; model.noise_dim];
        model.drift_into(&[x], i, &mut b)?;
        model.diffusion_into(&[x], i, &mut s)?;
        let a: f64 = s.iter().map(|v| v * v).sum();
        let (_, d1, d2) = quartic_cap(x.abs());
        Ok((d1 * x.signum() * b[0] + 0.5 * d2 * a).abs())
    };
    let mut best = (0.0f64, 0.0f64, 1usize);
    for i in 1..=i_max.max(1) {
        for k in 0..n_grid {
            let x = -1.0 + 2.0 * k as f64 / (n_grid - 1) as f64;
            let v = eval(x, i)?;
            if v > best.0 {
                best = (v, x, i);
            }
        }
    }
    let mut width = 2.0 / (n_grid - 1) as f64;
    for _ in 0..2 {
        let (_, centre, i) = best;
        for k in 0..n_grid {
            let x = (centre - width + 2.0 * width * k as f64 / (n_grid - 1) as f64).clamp(-1.0, 1.0);
            let v = eval(x, i)?;
            if v > best.0 {
                best = (v, x, i);
            }
        }
        width *= 2.0 / (n_grid - 1) as f64;
    }
    Ok(best.0)
}

// ---------------------------------------------------------------------------
// Drift scans

/// Sampled segment families for drift scans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSpec {
    /// Constant segments `φ ≡ x` (every coordinate equal to `x`) over `[x_min, x_max]`.
    pub x_min: f64,
    pub x_max: f64,
    pub n_grid: usize,
    /// Brownian-bridge segments between uniform endpoints, clipped to `sup_bound`.
    #[serde(default)]
    pub n_rough: usize,
    #[serde(default = "default_sup_bound")]
    pub sup_bound: f64,
    #[serde(default = "default_roughness")]
    pub roughness: f64,
    #[serde(default = "default_intervals")]
    pub intervals: usize,
    pub i_max: Regime,
    #[serde(default = "default_min_regime")]
    pub min_regime: Regime,
    /// Keep only points with `|φ(0)| ≥ min_abs_x0`.
    #[serde(default)]
    pub min_abs_x0: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn default_sup_bound() -> f64 {
    10.0
}
fn default_roughness() -> f64 {
    1.0
}
fn default_intervals() -> usize {
    50
}
fn default_min_regime() -> Regime {
    1
}

impl SamplerSpec {
    pub fn grid(x_min: f64, x_max: f64, n_grid: usize, i_max: Regime) -> Self {
        SamplerSpec {
            x_min,
            x_max,
            n_grid,
            n_rough: 0,
            sup_bound: default_sup_bound(),
            roughness: default_roughness(),
            intervals: default_intervals(),
            i_max,
            min_regime: 1,
            min_abs_x0: None,
            seed: 0,
        }
    }
}

pub fn sample_points(
    spec: &SamplerSpec,
    model: &RegimeSwitchingModel,
) -> Result<Vec<(SegmentPath, Regime)>, LyapunovError> {
    let (n, m, r) = (model.dim, spec.intervals.max(1), model.delay);
    let mut segs = Vec::with_capacity(spec.n_grid + spec.n_rough);
    for k in 0..spec.n_grid {
        let x = if spec.n_grid == 1 {
            spec.x_min
        } else {
            spec.x_min + (spec.x_max - spec.x_min) * k as f64 / (spec.n_grid - 1) as f64
        };
        segs.push(SegmentPath::constant(r, m, &vec![x; n])?);
    }
    for p in 0..spec.n_rough {
        let mut rng = stream(spec.seed, Purpose::Sampler, p as u64);
        let h = r / m as f64;
        let mut nodes = vec![vec![0.0; n]; m + 1];
        for c in 0..n {
            let a = rng.random_range(spec.x_min..=spec.x_max);
            let b = rng.random_range(spec.x_min..=spec.x_max);
            let mut w = vec![0.0; m + 1];
            for k in 1..=m {
                let z: f64 = StandardNormal.sample(&mut rng);
                w[k] = w[k - 1] + spec.roughness * h.sqrt() * z;
            }
            for k in 0..=m {
                let s = k as f64 / m as f64;
                let bridge = w[k] - s * w[m];
                nodes[k][c] = (a + s * (b - a) + bridge).clamp(-spec.sup_bound, spec.sup_bound);
            }
        }
        segs.push(SegmentPath::new(r, h, nodes)?);
    }
    let mut points = Vec::new();
    for seg in segs {
        if spec.min_abs_x0.is_some_and(|lim| norm(seg.current()) < lim) {
            continue;
        }
        for i in spec.min_regime.max(1)..=spec.i_max {
            points.push((seg.clone(), i));
        }
    }
    if points.is_empty() {
        return Err(LyapunovError::NoPoints);
    }
    Ok(points)
}

/// Which drift inequality to check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DriftKind {
    /// `𝓛V ≤ C·1{V ≤ H}` (recurrence).
    Recurrence,
    /// `𝓛V ≤ −C₁ + C₂·1{V ≤ H}` (positive recurrence, ergodicity).
    Ergodic,
    /// `𝓛V ≤ −C₁V + C₂` (exponential ergodicity).
    Exponential,
}

impl std::str::FromStr for DriftKind {
    type Err = LyapunovError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "recurrence" => Ok(DriftKind::Recurrence),
            "ergodic" => Ok(DriftKind::Ergodic),
            "exponential" => Ok(DriftKind::Exponential),
            other => Err(LyapunovError::Invalid(format!("unknown drift kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DriftConstants {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c2: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitOptions {
    /// Ergodic fit: `H` is the largest `V` among points with `𝓛V > −level`.
    pub level: f64,
    /// Exponential fit: `C₁` is searched on `(0, c1_max]`.
    pub c1_max: f64,
    pub c1_steps: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { level: 0.5, c1_max: 5.0, c1_steps: 1000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhiSummary {
    pub phi0: f64,
    pub phi_r: f64,
    pub sup_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub phi_summary: PhiSummary,
    pub i: Regime,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftReport {
    pub kind: DriftKind,
    pub constants: DriftConstants,
    pub n_points: usize,
    pub worst_margin: f64,
    pub violations: Vec<Violation>,
}

/// Whether `V` grows along `|φ(0)| → ∞` and along `i → ∞`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Coercivity {
    pub state: bool,
    pub regime: bool,
}

fn margin(kind: DriftKind, c: &DriftConstants, v: f64, lv: f64) -> f64 {
    let below = |h: Option<f64>| if v <= h.unwrap_or(f64::INFINITY) { 1.0 } else { 0.0 };
    match kind {
        DriftKind::Recurrence => c.c.unwrap_or(0.0) * below(c.h) - lv,
        DriftKind::Ergodic => -c.c1.unwrap_or(0.0) + c.c2.unwrap_or(0.0) * below(c.h) - lv,
        DriftKind::Exponential => -c.c1.unwrap_or(0.0) * v + c.c2.unwrap_or(0.0) - lv,
    }
}

fn fit(kind: DriftKind, vals: &[(f64, f64)], opts: &FitOptions) -> DriftConstants {
    let max_over = |pred: &dyn Fn(f64, f64) -> bool, f: &dyn Fn(f64, f64) -> f64| {
        vals.iter().filter(|(v, lv)| pred(*v, *lv)).map(|(v, lv)| f(*v, *lv)).fold(f64::NEG_INFINITY, f64::max)
    };
    match kind {
        DriftKind::Recurrence => {
            let h = max_over(&|_, lv| lv > 0.0, &|v, _| v);
            let c = max_over(&|v, _| v <= h, &|_, lv| lv).max(0.0);
            DriftConstants { c: Some(c), h: Some(h), ..Default::default() }
        }
        DriftKind::Ergodic => {
            let h = max_over(&|_, lv| lv > -opts.level, &|v, _| v);
            let above = max_over(&|v, _| v > h, &|_, lv| lv);
            let c1 = if above.is_finite() { -above } else { opts.level };
            let c2 = max_over(&|v, _| v <= h, &|_, lv| lv + c1).max(0.0);
            DriftConstants { h: Some(h), c1: Some(c1), c2: Some(c2), ..Default::default() }
        }
        DriftKind::Exponential => {
            let steps = opts.c1_steps.max(1);
            let mut best: Option<(f64, f64)> = None;
            for k in 1..=steps {
                let c1 = opts.c1_max * k as f64 / steps as f64;
                let c2 = max_over(&|_, _| true, &|v, lv| lv + c1 * v).max(0.0);
                if best.is_none_or(|(b1, b2)| c2 * b1 < b2 * c1) {
                    best = Some((c1, c2));
                }
            }
            let (c1, c2) = best.expect("at least one step");
            DriftConstants { c1: Some(c1), c2: Some(c2), ..Default::default() }
        }
    }
}

/// Evaluates `(V, 𝓛V)` on every point.
pub fn evaluate_points(
    v: &CylindricalLyapunov,
    model: &RegimeSwitchingModel,
    points: &[(SegmentPath, Regime)],
) -> Result<Vec<(f64, f64)>, LyapunovError> {
    let mut gen = Generator::new(v, model);
    points.iter().map(|(seg, i)| Ok((v.value(seg, *i)?, gen.apply(seg, *i)?))).collect()
}

/// Margins of the chosen drift inequality; constants are fitted when not given.
pub fn scan_drift_condition(
    v: &CylindricalLyapunov,
    model: &RegimeSwitchingModel,
    points: &[(SegmentPath, Regime)],
    kind: DriftKind,
    constants: Option<DriftConstants>,
    opts: &FitOptions,
) -> Result<DriftReport, LyapunovError> {
    if points.is_empty() {
        return Err(LyapunovError::NoPoints);
    }
    let vals = evaluate_points(v, model, points)?;
    let constants = constants.unwrap_or_else(|| fit(kind, &vals, opts));
    let mut worst = f64::INFINITY;
    let mut violations = Vec::new();
    for ((seg, i), (val, lv)) in points.iter().zip(&vals) {
        let mg = margin(kind, &constants, *val, *lv);
        worst = worst.min(mg);
        if mg < 0.0 {
            violations.push(Violation {
                phi_summary: PhiSummary { phi0: seg.current()[0], phi_r: seg.oldest()[0], sup_norm: seg.sup_norm() },
                i: *i,
                margin: mg,
            });
        }
    }
    Ok(DriftReport { kind, constants, n_points: points.len(), worst_margin: worst, violations })
}

/// Checks that `V(φ ≡ x e, 1)` increases in `|x|` and `V(φ ≡ 0, i)` increases in `i`
/// over the upper half of `[0, x_max]` and `1..=i_max`.
pub fn coercivity(
    v: &CylindricalLyapunov,
    model: &RegimeSwitchingModel,
    x_max: f64,
    i_max: Regime,
) -> Result<Coercivity, LyapunovError> {
    let n = model.dim;
    let m = 20;
    let steps = 40;
    let mut along_x = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let x = x_max * k as f64 / steps as f64;
        let mut lo = f64::INFINITY;
        for sign in [1.0, -1.0] {
            let mut p = vec![0.0; n];
            p[0] = sign * x;
            lo = lo.min(v.value(&SegmentPath::constant(model.delay, m, &p)?, 1)?);
        }
        along_x.push(lo);
    }
    let zero = SegmentPath::constant(model.delay, m, &vec![0.0; n])?;
    let along_i = (1..=i_max.max(2)).map(|i| v.value(&zero, i)).collect::<Result<Vec<_>, _>>()?;
    let increasing = |s: &[f64]| {
        let tail = &s[s.len() / 2..];
        tail.windows(2).all(|w| w[1] > w[0])
    };
    Ok(Coercivity { state: increasing(&along_x), regime: increasing(&along_i) })
}

// ---------------------------------------------------------------------------
// Dynkin check

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `E f(μ + sZ)` for the quartic cap `f`, `Z` standard normal.
pub fn expected_cap(mu: f64, s: f64) -> f64 {
    if s <= 0.0 {
        return quartic_cap(mu.abs()).0;
    }
    let a = (-1.0 - mu) / s;
    let b = (1.0 - mu) / s;
    let (pa, pb) = (std_normal_pdf(a), std_normal_pdf(b));
    let (ca, cb) = (std_normal_cdf(a), std_normal_cdf(b));
    let upper = mu * (1.0 - cb) + s * pb;
    let lower = s * pa - mu * ca;
    // Truncated moments ∫_a^b z^l φ(z) dz.
    let mut mom = [0.0; 5];
    mom[0] = cb - ca;
    mom[1] = pa - pb;
    for l in 2..5 {
        mom[l] = (l - 1) as f64 * mom[l - 2] + a.powi(l as i32 - 1) * pa - b.powi(l as i32 - 1) * pb;
    }
    let raw = |k: usize| -> f64 {
        let mut acc = 0.0;
        let mut binom = 1.0;
        for l in 0..=k {
            acc += binom * mu.powi((k - l) as i32) * s.powi(l as i32) * mom[l];
            binom = binom * (k - l) as f64 / (l + 1) as f64;
        }
        acc
    };
    let inner = (-raw(4) + 6.0 * raw(2) + 3.0 * raw(0)) / 8.0;
    upper + lower + inner
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DynkinResult {
    /// Mean of `V(X_T) − V(φ₀) − Σ 𝓛V dt`.
    pub residual: f64,
    pub std_error: f64,
    /// Mean of `Σ (E_k V_{k+1} − V_k − 𝓛V_k dt)`: the scheme's bias, with the
    /// martingale noise removed. Available for scalar models with a closed-form
    /// `f₁` and no integral part, in `euler-rate` mode.
    pub predictable: Option<f64>,
    pub predictable_std_error: Option<f64>,
    pub n_paths: usize,
    pub censored: usize,
    /// Per-path `(residual, predictable)` in path order; `None` for censored paths.
    /// `predictable` is NaN when unavailable.
    #[serde(skip)]
    pub per_path: Vec<Option<(f64, f64)>>,
}

fn predictable_supported(v: &CylindricalLyapunov, model: &RegimeSwitchingModel, cfg: &SimConfig) -> bool {
    model.dim == 1
        && model.noise_dim == 1
        && v.f2.is_none()
        && cfg.mode == JumpMode::EulerRate
        && matches!(v.f1, F1::QuarticCap { .. } | F1::Quadratic { .. })
}

/// Per-path `(residual, predictable)`; `None` for censored paths.
fn dynkin_path(
    v: &CylindricalLyapunov,
    model: &RegimeSwitchingModel,
    init: &PathInit,
    n_steps: usize,
    cfg: &SimConfig,
    seed: u64,
    path: u64,
    with_predictable: bool,
) -> Result<Option<(f64, f64)>, LyapunovError> {
    let mut stepper = Stepper::new(model, cfg.clone())?;
    let mut gen = Generator::new(v, model);
    let mut state = HybridState::new(init, seed, path);
    let dt = cfg.dt;
    let v0 = v.value(&state.seg, state.regime)?;
    let (mut integral, mut predictable) = (0.0, 0.0);
    let mut jumps = Vec::new();
    let mut b = [0.0];
    let mut s = [0.0];
    for _ in 0..n_steps {
        let i = state.regime;
        let lv = gen.apply(&state.seg, i)?;
        if with_predictable {
            let x = state.seg.current()[0];
            model.drift_into(&[x], i, &mut b)?;
            model.diffusion_into(&[x], i, &mut s)?;
            let mu = x + b[0] * dt;
            let sd = s[0].abs() * dt.sqrt();
            let (spatial, w) = match v.f1 {
                F1::QuarticCap { regime_weight } => (expected_cap(mu, sd), regime_weight),
                F1::Quadratic { regime_weight } => (mu * mu + sd * sd, regime_weight),
                _ => unreachable!(),
            };
            let q: f64 = gen.row().iter().map(|&(_, q)| q).sum();
            let mut shift = 0.0;
            if q > 0.0 {
                let p_jump = -(-q * dt).exp_m1();
                shift = p_jump * gen.row().iter().map(|&(j, qj)| qj / q * (j as f64 - i as f64)).sum::<f64>();
            }
            let next = spatial + w * (i as f64 + shift);
            predictable += next - v.f1.value(&[x], i)? - lv * dt;
        }
        integral += lv * dt;
        match stepper.step(&mut state, &mut jumps) {
            Ok(()) => {}
            Err(SimError::Explosion { .. }) => return Ok(None),
            Err(e) => return Err(e.into()),
        }
        jumps.clear();
    }
    let v_end = v.value(&state.seg, state.regime)?;
    Ok(Some((v_end - v0 - integral, predictable)))
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn dynkin_residual(
    v: &CylindricalLyapunov,
    model: &RegimeSwitchingModel,
    init: &PathInit,
    t_end: f64,
    cfg: &SimConfig,
    n_paths: usize,
    seed: u64,
    threads: usize,
) -> Result<DynkinResult, LyapunovError> {
    if n_paths == 0 {
        return Err(LyapunovError::Invalid("n_paths must be positive".into()));
    }
    Stepper::new(model, cfg.clone())?.check_init(init)?;
    let n_steps = crate::simulate::steps_for(t_end, cfg.dt);
    let with_pred = predictable_supported(v, model, cfg);
    let per_path = par_paths(n_paths, threads, |p| dynkin_path(v, model, init, n_steps, cfg, seed, p, with_pred))?;
    let mut res = Vec::with_capacity(n_paths);
    let mut pred = Vec::with_capacity(n_paths);
    let mut censored = 0;
    let mut rows = Vec::with_capacity(n_paths);
    for r in per_path {
        let r = r?;
        rows.push(r.map(|(a, b)| (a, if with_pred { b } else { f64::NAN })));
        match r {
            Some((a, b)) => {
                res.push(a);
                pred.push(b);
            }
            None => censored += 1,
        }
    }
    if res.is_empty() {
        return Err(LyapunovError::Invalid("every path was censored".into()));
    }
    let (residual, std_error) = mean_se(&res);
    let (pm, ps) = mean_se(&pred);
    Ok(DynkinResult {
        residual,
        std_error,
        predictable: with_pred.then_some(pm),
        predictable_std_error: with_pred.then_some(ps),
        n_paths,
        censored,
        per_path: rows,
    })
}

/// Parses `f₂` text as a point expression.
pub fn parse_f2(text: &str) -> Result<Expr, LyapunovError> {
    Expr::parse(text, ExprKind::Point).map_err(|source| LyapunovError::Parse { context: "f2", source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        builtin_model, BuiltinName, BuiltinParams, CoefficientFamily, KernelEntry, KernelForm, RateBound, RateKernel,
        RegimePattern, Target,
    };
    use proptest::prelude::*;

    fn pexpr(t: &str) -> Expr {
        Expr::parse(t, ExprKind::Point).unwrap()
    }

    fn scalar(drift: &str, sigma: &str, kernel: RateKernel) -> RegimeSwitchingModel {
        RegimeSwitchingModel::new(
            "t",
            1,
            1.0,
            CoefficientFamily::uniform("drift", vec![pexpr(drift)]),
            CoefficientFamily::uniform("diffusion", vec![pexpr(sigma)]),
            kernel,
        )
        .unwrap()
    }

    fn abs_integral() -> CylindricalLyapunov {
        CylindricalLyapunov {
            f1: F1::Expr(pexpr("0")),
            f2: Some(pexpr("abs(x)")),
            g: TimeWeight::Constant { value: 1.0 },
        }
    }

    #[test]
    fn quartic_cap_joins_smoothly() {
        let (f, d1, d2) = quartic_cap(1.0 - 1e-12);
        assert!((f - 1.0).abs() < 1e-11 && (d1 - 1.0).abs() < 1e-11 && d2.abs() < 1e-11);
        assert_eq!(quartic_cap(1.0), (1.0, 1.0, 0.0));
        assert_eq!(quartic_cap(0.0).0, 3.0 / 8.0);
    }

    #[test]
    fn horizontal_derivative_examples() {
        let seg = SegmentPath::constant(1.0, 20, &[2.5]).unwrap();
        assert_eq!(abs_integral().horizontal_derivative(&seg, 1).unwrap(), 0.0);
        let ramp = SegmentPath::from_fn(1.0, 20, |t| vec![t]).unwrap();
        assert_eq!(abs_integral().horizontal_derivative(&ramp, 1).unwrap(), -1.0);
        let v = CylindricalLyapunov::point(F1::QuarticCap { regime_weight: 1.0 });
        assert_eq!(v.horizontal_derivative(&ramp, 2).unwrap(), 0.0);
        let lam = 0.7;
        let ex = CylindricalLyapunov {
            f1: F1::Quadratic { regime_weight: 0.0 },
            f2: Some(pexpr("x")),
            g: TimeWeight::Exponential { weight: (-lam * 1.0f64).exp(), rate: lam },
        };
        // Trapezoid error on ∫ e^{λt}: O(h²).
        let fine = SegmentPath::constant(1.0, 2000, &[1.3]).unwrap();
        assert!(ex.horizontal_derivative(&fine, 1).unwrap().abs() < 1e-6);
    }

    #[test]
    fn generator_examples() {
        let m = builtin_model(BuiltinName::Ex1, &BuiltinParams::default()).unwrap();
        let seg = SegmentPath::constant(1.0, 10, &[2.0]).unwrap();
        let constant = CylindricalLyapunov::point(F1::Expr(pexpr("3")));
        assert_eq!(apply_generator(&constant, &m, &seg, 2).unwrap(), 0.0);

        // Literal kernel: the birth and death terms cancel, leaving the drift part.
        let v = CylindricalLyapunov::point(F1::QuarticCap { regime_weight: 6.0 });
        assert!((apply_generator(&v, &m, &seg, 2).unwrap() + 2.0).abs() < 1e-14);

        // Birth rate C_i without the (1+‖φ‖)^{-1} term.
        let mut kernel = m.kernel.clone();
        kernel.form = KernelForm::ExpressionTable;
        kernel.entries = vec![
            KernelEntry { from: RegimePattern::Exact(1), to: Target::Absolute(2), rate: Expr::num(1.0) },
            KernelEntry {
                from: RegimePattern::From(2),
                to: Target::Relative(-1),
                rate: Expr::parse("1/(1+SUPNORM)", ExprKind::Segment).unwrap(),
            },
            KernelEntry { from: RegimePattern::From(2), to: Target::Relative(1), rate: Expr::num(0.0) },
        ];
        let m2 = RegimeSwitchingModel { kernel, ..m.clone() };
        assert!((apply_generator(&v, &m2, &seg, 2).unwrap() + 4.0).abs() < 1e-14);
    }

    #[test]
    fn generator_reduces_to_diffusion_operator() {
        let m = scalar("-x", "2", RateKernel::zero());
        let v = CylindricalLyapunov::point(F1::Quadratic { regime_weight: 5.0 });
        let seg = SegmentPath::constant(1.0, 10, &[1.5]).unwrap();
        // 2x·(−x) + ½·4·2
        assert!((apply_generator(&v, &m, &seg, 3).unwrap() - (-4.5 + 4.0)).abs() < 1e-14);
    }

    #[test]
    fn finite_differences_are_second_order() {
        let e = pexpr("(-pow(x,4)+6*pow(x,2)+3)/8");
        let x = 0.37;
        let (_, d1, d2) = quartic_cap(x);
        let err = |h: f64| {
            let (g, hs) = fd_derivatives(&e, &[x], 1, h).unwrap();
            ((g[0] - d1).abs(), (hs[0] - d2).abs())
        };
        let (g1, h1) = err(1e-2);
        let (g2, h2) = err(5e-3);
        assert!((g1 / g2).log2() >= 1.8, "gradient order {}", (g1 / g2).log2());
        assert!((h1 / h2).log2() >= 1.8, "hessian order {}", (h1 / h2).log2());
    }

    #[test]
    fn expected_cap_matches_quadrature() {
        for &(mu, s) in &[(0.0, 0.3), (0.95, 0.05), (-1.2, 0.5), (3.0, 1.0), (0.5, 2.0)] {
            let n = 200_000;
            let lim = 10.0;
            let h = 2.0 * lim / n as f64;
            let mut acc = 0.0;
            for k in 0..=n {
                let z = -lim + k as f64 * h;
                let w = if k == 0 || k == n { 0.5 } else { 1.0 };
                acc += w * quartic_cap((mu + s * z).abs()).0 * std_normal_pdf(z);
            }
            acc *= h;
            assert!((expected_cap(mu, s) - acc).abs() < 1e-9, "mu={mu} s={s}");
        }
    }

    #[test]
    fn constant_v_satisfies_exponential_condition() {
        let m = builtin_model(BuiltinName::Ex1, &BuiltinParams::default()).unwrap();
        let v = CylindricalLyapunov::point(F1::Expr(pexpr("2")));
        let pts = sample_points(&SamplerSpec::grid(-3.0, 3.0, 21, 4), &m).unwrap();
        let c = DriftConstants { c1: Some(0.7), c2: Some(1.4), ..Default::default() };
        let rep = scan_drift_condition(&v, &m, &pts, DriftKind::Exponential, Some(c), &FitOptions::default()).unwrap();
        assert!(rep.violations.is_empty());
        assert_eq!(rep.worst_margin, 0.0);
    }

    #[test]
    fn ornstein_uhlenbeck_exponential_scan() {
        let m = builtin_model(BuiltinName::Ex4, &BuiltinParams { b: Some("-x".into()), ..Default::default() }).unwrap();
        let v = CylindricalLyapunov::point(F1::Quadratic { regime_weight: 0.0 });
        let pts = sample_points(&SamplerSpec::grid(-5.0, 5.0, 101, 5), &m).unwrap();
        let c = DriftConstants { c1: Some(1.0), c2: Some(1.0), ..Default::default() };
        let rep = scan_drift_condition(&v, &m, &pts, DriftKind::Exponential, Some(c), &FitOptions::default()).unwrap();
        assert!(rep.violations.is_empty(), "{:?}", rep.violations.first());
    }

    #[test]
    fn violations_are_exactly_negative_margins() {
        let m = scalar("x", "1", RateKernel::zero());
        let v = CylindricalLyapunov::point(F1::Quadratic { regime_weight: 0.0 });
        let pts = sample_points(&SamplerSpec::grid(-2.0, 2.0, 41, 1), &m).unwrap();
        let c = DriftConstants { c: Some(3.0), h: Some(1.0), ..Default::default() };
        let rep = scan_drift_condition(&v, &m, &pts, DriftKind::Recurrence, Some(c), &FitOptions::default()).unwrap();
        let vals = evaluate_points(&v, &m, &pts).unwrap();
        let expected = vals.iter().filter(|(val, lv)| margin(DriftKind::Recurrence, &c, *val, *lv) < 0.0).count();
        assert_eq!(rep.violations.len(), expected);
        assert!(expected > 0);
    }

    #[test]
    fn recurrence_fit_covers_all_points() {
        let m = scalar("-x", "1", RateKernel::zero());
        let v = CylindricalLyapunov::point(F1::Quadratic { regime_weight: 0.0 });
        let pts = sample_points(&SamplerSpec::grid(-4.0, 4.0, 81, 1), &m).unwrap();
        let rep = scan_drift_condition(&v, &m, &pts, DriftKind::Recurrence, None, &FitOptions::default()).unwrap();
        assert!(rep.violations.is_empty());
        let c = rep.constants;
        assert!((c.c.unwrap() - 1.0).abs() < 1e-12);
        assert!(c.h.unwrap() < 0.5 + 1e-12);
    }

    #[test]
    fn coercivity_flags() {
        let m = builtin_model(BuiltinName::Ex1, &BuiltinParams::default()).unwrap();
        let v = CylindricalLyapunov::point(F1::QuarticCap { regime_weight: 1.0 });
        assert_eq!(coercivity(&v, &m, 5.0, 10).unwrap(), Coercivity { state: true, regime: true });
        let u = CylindricalLyapunov::point(F1::Quadratic { regime_weight: 0.0 });
        assert_eq!(coercivity(&u, &m, 5.0, 10).unwrap(), Coercivity { state: true, regime: false });
    }

    #[test]
    fn kappa_for_unit_coefficients() {
        let m = builtin_model(BuiltinName::Ex1, &BuiltinParams::default()).unwrap();
        // f′(x)(−x) + ½f″(x) = −x²(3−x²)/2 + ¾(1−x²) runs from ¾ at 0 to −1 at |x| = 1.
        let k = cap_generator_bound(&m, 5, 401).unwrap();
        assert!((k - 1.0).abs() < 1e-12, "{k}");
    }

    #[test]
    fn dynkin_trivial_cases() {
        let m = builtin_model(BuiltinName::Ex1, &BuiltinParams::default()).unwrap();
        let init = PathInit::constant(&m, &[0.3], 1, 0.01).unwrap();
        let cfg = SimConfig::new(0.01);
        let constant = CylindricalLyapunov::point(F1::Expr(pexpr("4")));
        let r = dynkin_residual(&constant, &m, &init, 0.5, &cfg, 20, 1, 1).unwrap();
        assert_eq!(r.residual, 0.0);

        let frozen = scalar("0", "0", RateKernel::zero());
        let init = PathInit::constant(&frozen, &[0.3], 1, 0.01).unwrap();
        let v = CylindricalLyapunov { f1: F1::QuarticCap { regime_weight: 1.0 }, ..abs_integral() };
        let r = dynkin_residual(&v, &frozen, &init, 0.5, &cfg, 5, 1, 1).unwrap();
        assert_eq!(r.residual, 0.0);
    }

    #[test]
    fn switching_term_vanishes_for_regime_free_v() {
        let m = builtin_model(BuiltinName::Ex3, &BuiltinParams::default()).unwrap();
        let v = CylindricalLyapunov::point(F1::Quadratic { regime_weight: 0.0 });
        let seg = SegmentPath::from_fn(1.0, 10, |t| vec![1.0 + t * t]).unwrap();
        let terms = Generator::new(&v, &m).terms(&seg, 3).unwrap();
        assert_eq!(terms.jump, 0.0);
    }

    #[test]
    fn bound_kinds_are_independent_of_rate_bound() {
        // A kernel without declared bound is fine for generator evaluation.
        let mut m = builtin_model(BuiltinName::Ex1, &BuiltinParams::default()).unwrap();
        m.kernel.bound = RateBound::None;
        let v = CylindricalLyapunov::point(F1::QuarticCap { regime_weight: 1.0 });
        let seg = SegmentPath::constant(1.0, 10, &[0.0]).unwrap();
        assert!(apply_generator(&v, &m, &seg, 1).is_ok());
    }

    proptest! {
        #[test]
        fn generator_is_linear(
            vals in prop::collection::vec(-3.0f64..3.0, 11),
            i in 1usize..8,
            a in -2.0f64..2.0,
            b in -2.0f64..2.0,
        ) {
            let m = builtin_model(BuiltinName::Ex4, &BuiltinParams { b: Some("-x*i".into()), sigma: Some("1+0.5*abs(x)".into()), c: Some(vec![0.3]), ..Default::default() }).unwrap();
            let v = CylindricalLyapunov {
                f1: F1::QuarticCap { regime_weight: 0.8 },
                f2: Some(pexpr("x*x*i")),
                g: TimeWeight::Exponential { weight: 0.5, rate: 0.7 },
            };
            let w = CylindricalLyapunov {
                f1: F1::Quadratic { regime_weight: -0.2 },
                f2: Some(pexpr("abs(x)")),
                g: TimeWeight::Exponential { weight: 0.5, rate: 0.7 },
            };
            let seg = SegmentPath::new(1.0, 0.1, vals.iter().map(|v| vec![*v]).collect()).unwrap();
            let combo = CylindricalLyapunov::combine(a, &v, b, &w).unwrap();
            let lhs = apply_generator(&combo, &m, &seg, i).unwrap();
            let rhs = a * apply_generator(&v, &m, &seg, i).unwrap() + b * apply_generator(&w, &m, &seg, i).unwrap();
            let scale = lhs.abs().max(rhs.abs()).max(1.0);
            prop_assert!((lhs - rhs).abs() <= 1e-10 * scale, "{} vs {}", lhs, rhs);
        }

        #[test]
        fn switching_term_annihilates_when_v_agrees(
            vals in prop::collection::vec(-3.0f64..3.0, 11),
            i in 1usize..8,
        ) {
            let m = builtin_model(BuiltinName::Ex1, &BuiltinParams { c: Some(vec![0.5]), ..Default::default() }).unwrap();
            let v = CylindricalLyapunov { f1: F1::QuarticCap { regime_weight: 0.0 }, ..abs_integral() };
            let seg = SegmentPath::new(1.0, 0.1, vals.iter().map(|v| vec![*v]).collect()).unwrap();
            prop_assert_eq!(Generator::new(&v, &m).terms(&seg, i).unwrap().jump, 0.0);
        }
    }
}
