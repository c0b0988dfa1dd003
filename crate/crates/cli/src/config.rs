//! Experiment configuration: a JSON document naming a model, a task and its parameters.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use switchlab_core::elliptic::{DEFAULT_MAX_ITER, DEFAULT_TOL};
use switchlab_core::lyapunov::{cap_generator_bound, parse_f2, DriftConstants, FitOptions, SamplerSpec};
use switchlab_core::model::{builtin_model, BuiltinName, BuiltinParams, ModelSpec, Regime};
use switchlab_core::simulate::Region;
use switchlab_core::{
    Binning, CylindricalLyapunov, DriftKind, Expr, ExprKind, JumpMode, RegimeSwitchingModel, TimeWeight, F1,
};

/// Invalid configuration, with the JSON path of the offending field when known.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.path.is_empty() || self.path == "." {
            write!(f, "config: {}", self.message)
        } else {
            write!(f, "config field `{}`: {}", self.path, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

fn bad(path: &str, message: impl Into<String>) -> ConfigError {
    ConfigError { path: path.to_string(), message: message.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Simulate,
    LyapunovScan,
    Dynkin,
    Hitting,
    TvDecay,
    ExitTime,
    Recurrence,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Simulate => "simulate",
            TaskKind::LyapunovScan => "lyapunov-scan",
            TaskKind::Dynkin => "dynkin",
            TaskKind::Hitting => "hitting",
            TaskKind::TvDecay => "tv-decay",
            TaskKind::ExitTime => "exit-time",
            TaskKind::Recurrence => "recurrence",
        }
    }
}

/// Exactly one of `builtin`, `file` or `spec`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ModelRef {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub builtin: Option<BuiltinName>,
    #[serde(default, skip_serializing_if = "is_default_params")]
    pub params: BuiltinParams,
    /// Model JSON file; relative paths are resolved against the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<ModelSpec>,
}

fn is_default_params(p: &BuiltinParams) -> bool {
    p.b.is_none() && p.sigma.is_none() && p.c.is_none() && p.r.is_none() && p.truncation.is_none()
}

impl ModelRef {
    pub fn builtin(name: BuiltinName, params: BuiltinParams) -> Self {
        ModelRef { builtin: Some(name), params, ..Default::default() }
    }

    pub fn load(&self, base: &Path) -> Result<RegimeSwitchingModel, ConfigError> {
        let given = [self.builtin.is_some(), self.file.is_some(), self.spec.is_some()];
        if given.iter().filter(|g| **g).count() != 1 {
            return Err(bad("model", "give exactly one of `builtin`, `file` or `spec`"));
        }
        if !is_default_params(&self.params) && self.builtin.is_none() {
            return Err(bad("model.params", "only valid with `builtin`"));
        }
        if let Some(name) = self.builtin {
            return builtin_model(name, &self.params).map_err(|e| bad("model.builtin", e.to_string()));
        }
        if let Some(spec) = &self.spec {
            return spec.build().map_err(|e| bad("model.spec", e.to_string()));
        }
        let file = self.file.as_ref().expect("checked above");
        let path = if file.is_absolute() { file.clone() } else { base.join(file) };
        let text = std::fs::read_to_string(&path).map_err(|e| bad("model.file", format!("{}: {e}", path.display())))?;
        let spec: ModelSpec = parse_json(&text, "model.file")?;
        spec.build().map_err(|e| bad("model.file", e.to_string()))
    }
}

fn parse_json<T: DeserializeOwned>(text: &str, prefix: &str) -> Result<T, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let inner = e.path().to_string();
        let path = match (prefix.is_empty(), inner.as_str()) {
            (true, _) => inner.clone(),
            (false, ".") => prefix.to_string(),
            (false, _) => format!("{prefix}.{inner}"),
        };
        bad(&path, e.into_inner().to_string())
    })
}

fn from_value<T: DeserializeOwned>(value: serde_json::Value, prefix: &str) -> Result<T, ConfigError> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let inner = e.path().to_string();
        let path = if inner == "." { prefix.to_string() } else { format!("{prefix}.{inner}") };
        bad(&path, e.into_inner().to_string())
    })
}

// ---------------------------------------------------------------------------
// Lyapunov functions

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum F1Spec {
    /// Quartic cap of `|x|` plus `w·i`; `w` is either given or `kappa_multiple · κ`.
    QuarticCap {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        regime_weight: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        kappa_multiple: Option<f64>,
    },
    Quadratic {
        #[serde(default)]
        regime_weight: f64,
    },
    Expr {
        expr: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LyapunovSpec {
    pub f1: F1Spec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f2: Option<String>,
    #[serde(default = "zero_weight")]
    pub weight: TimeWeight,
}

fn zero_weight() -> TimeWeight {
    TimeWeight::Constant { value: 0.0 }
}

/// Regimes and grid used to maximise the cap generator when `kappa_multiple` is set.
const KAPPA_I_MAX: Regime = 50;
const KAPPA_GRID: usize = 2001;

impl LyapunovSpec {
    pub fn build(&self, model: &RegimeSwitchingModel, path: &str) -> Result<CylindricalLyapunov, ConfigError> {
        let f1 = match &self.f1 {
            F1Spec::QuarticCap { regime_weight, kappa_multiple } => {
                let w = match (regime_weight, kappa_multiple) {
                    (Some(w), None) => *w,
                    (None, Some(k)) => {
                        let kappa = cap_generator_bound(model, KAPPA_I_MAX, KAPPA_GRID)
                            .map_err(|e| bad(&format!("{path}.f1"), e.to_string()))?;
                        k * kappa
                    }
                    _ => return Err(bad(&format!("{path}.f1"), "give one of `regime_weight` or `kappa_multiple`")),
                };
                F1::QuarticCap { regime_weight: w }
            }
            F1Spec::Quadratic { regime_weight } => F1::Quadratic { regime_weight: *regime_weight },
            F1Spec::Expr { expr } => F1::Expr(
                Expr::parse(expr, ExprKind::Point).map_err(|e| bad(&format!("{path}.f1.expr"), e.to_string()))?,
            ),
        };
        let f2 = match &self.f2 {
            Some(t) => Some(parse_f2(t).map_err(|e| bad(&format!("{path}.f2"), e.to_string()))?),
            None => None,
        };
        Ok(CylindricalLyapunov { f1, f2, g: self.weight })
    }
}

// ---------------------------------------------------------------------------
// Task parameters

fn one() -> usize {
    1
}
fn one_regime() -> Regime {
    1
}
fn default_tol() -> f64 {
    DEFAULT_TOL
}
fn default_max_iter() -> usize {
    DEFAULT_MAX_ITER
}
fn default_tol_rec() -> f64 {
    1e-3
}
fn default_h_cap() -> f64 {
    1e6
}
fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateParams {
    pub t_end: f64,
    #[serde(default = "one")]
    pub n_paths: usize,
    pub x0: Vec<f64>,
    #[serde(default = "one_regime")]
    pub regime: Regime,
    #[serde(default)]
    pub mode: JumpMode,
    #[serde(default = "one")]
    pub record_stride: usize,
    #[serde(default = "default_h_cap")]
    pub h_cap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanParams {
    pub lyapunov: LyapunovSpec,
    pub kind: DriftKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constants: Option<DriftConstants>,
    pub sampler: SamplerSpec,
    #[serde(default)]
    pub fit: FitOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynkinParams {
    pub lyapunov: LyapunovSpec,
    pub t_end: f64,
    pub n_paths: usize,
    pub x0: Vec<f64>,
    #[serde(default = "one_regime")]
    pub regime: Regime,
    #[serde(default)]
    pub mode: JumpMode,
    #[serde(default = "default_h_cap")]
    pub h_cap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub region: Region,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regimes: Option<Vec<Regime>>,
    #[serde(default, skip_serializing_if = "is_false")]
    pub whole_segment: bool,
    #[serde(default, skip_serializing_if = "is_false")]
    pub bridge: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HittingParams {
    pub target: TargetSpec,
    pub t_max: f64,
    pub n_paths: usize,
    pub x0: Vec<f64>,
    #[serde(default = "one_regime")]
    pub regime: Regime,
    #[serde(default)]
    pub mode: JumpMode,
    #[serde(default = "default_h_cap")]
    pub h_cap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartSpec {
    pub x0: Vec<f64>,
    #[serde(default = "one_regime")]
    pub regime: Regime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TvParams {
    pub start_a: StartSpec,
    pub start_b: StartSpec,
    pub times: Vec<f64>,
    pub n_paths: usize,
    pub binning: Binning,
    #[serde(default)]
    pub mode: JumpMode,
    /// Fit floor; `None` uses each point's own noise floor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub floor: Option<f64>,
    #[serde(default = "default_h_cap")]
    pub h_cap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExitTimeParams {
    pub lo: f64,
    pub hi: f64,
    pub h: f64,
    /// Regime truncation level.
    pub k: Regime,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecurrenceParams {
    pub d1: (f64, f64),
    pub ks: Vec<f64>,
    pub h: f64,
    pub k: Regime,
    pub probes: Vec<f64>,
    #[serde(default = "default_tol_rec")]
    pub tol_rec: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskParams {
    Simulate(SimulateParams),
    LyapunovScan(ScanParams),
    Dynkin(DynkinParams),
    Hitting(HittingParams),
    TvDecay(TvParams),
    ExitTime(ExitTimeParams),
    Recurrence(RecurrenceParams),
}

impl TaskParams {
    pub fn kind(&self) -> TaskKind {
        match self {
            TaskParams::Simulate(_) => TaskKind::Simulate,
            TaskParams::LyapunovScan(_) => TaskKind::LyapunovScan,
            TaskParams::Dynkin(_) => TaskKind::Dynkin,
            TaskParams::Hitting(_) => TaskKind::Hitting,
            TaskParams::TvDecay(_) => TaskKind::TvDecay,
            TaskParams::ExitTime(_) => TaskKind::ExitTime,
            TaskParams::Recurrence(_) => TaskKind::Recurrence,
        }
    }

    fn from_value(kind: TaskKind, v: serde_json::Value) -> Result<Self, ConfigError> {
        let p = "params";
        Ok(match kind {
            TaskKind::Simulate => TaskParams::Simulate(from_value(v, p)?),
            TaskKind::LyapunovScan => TaskParams::LyapunovScan(from_value(v, p)?),
            TaskKind::Dynkin => TaskParams::Dynkin(from_value(v, p)?),
            TaskKind::Hitting => TaskParams::Hitting(from_value(v, p)?),
            TaskKind::TvDecay => TaskParams::TvDecay(from_value(v, p)?),
            TaskKind::ExitTime => TaskParams::ExitTime(from_value(v, p)?),
            TaskKind::Recurrence => TaskParams::Recurrence(from_value(v, p)?),
        })
    }

    fn to_value(&self) -> serde_json::Value {
        let v = match self {
            TaskParams::Simulate(p) => serde_json::to_value(p),
            TaskParams::LyapunovScan(p) => serde_json::to_value(p),
            TaskParams::Dynkin(p) => serde_json::to_value(p),
            TaskParams::Hitting(p) => serde_json::to_value(p),
            TaskParams::TvDecay(p) => serde_json::to_value(p),
            TaskParams::ExitTime(p) => serde_json::to_value(p),
            TaskParams::Recurrence(p) => serde_json::to_value(p),
        };
        v.expect("task parameters serialize")
    }
}

pub const DEFAULT_DT: f64 = 1e-3;

fn default_dt() -> f64 {
    DEFAULT_DT
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    model: ModelRef,
    task: TaskKind,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_dt")]
    dt: f64,
    #[serde(default = "one")]
    threads: usize,
    #[serde(default = "default_out")]
    out: PathBuf,
    params: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelRef,
    pub seed: u64,
    pub dt: f64,
    pub threads: usize,
    pub out: PathBuf,
    pub params: TaskParams,
}

/// Command-line overrides; each one beats the config file, which beats the defaults.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub dt: Option<f64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let raw: RawConfig = parse_json(text, "")?;
        let cfg = ExperimentConfig {
            params: TaskParams::from_value(raw.task, raw.params)?,
            model: raw.model,
            seed: raw.seed,
            dt: raw.dt,
            threads: raw.threads,
            out: raw.out,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        let raw = RawConfig {
            model: self.model.clone(),
            task: self.params.kind(),
            seed: self.seed,
            dt: self.dt,
            threads: self.threads,
            out: self.out.clone(),
            params: self.params.to_value(),
        };
        serde_json::to_string_pretty(&raw).expect("config serializes")
    }

    pub fn task(&self) -> TaskKind {
        self.params.kind()
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), ConfigError> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(dt) = o.dt {
            self.dt = dt;
        }
        if let Some(t) = o.threads {
            self.threads = t;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        self.validate()
    }

    /// Checks that do not need the model.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(bad("dt", "must be a positive number"));
        }
        if self.threads == 0 {
            return Err(bad("threads", "must be at least 1"));
        }
        let positive = |v: f64, path: &str| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(bad(path, "must be a positive number"))
            }
        };
        let nonzero = |v: usize, path: &str| if v > 0 { Ok(()) } else { Err(bad(path, "must be at least 1")) };
        match &self.params {
            TaskParams::Simulate(p) => {
                positive(p.t_end, "params.t_end")?;
                nonzero(p.n_paths, "params.n_paths")?;
                nonzero(p.regime, "params.regime")?;
                nonzero(p.record_stride, "params.record_stride")?;
            }
            TaskParams::LyapunovScan(p) => {
                if p.sampler.i_max < p.sampler.min_regime.max(1) {
                    return Err(bad("params.sampler.i_max", "must be at least min_regime"));
                }
            }
            TaskParams::Dynkin(p) => {
                positive(p.t_end, "params.t_end")?;
                nonzero(p.n_paths, "params.n_paths")?;
                nonzero(p.regime, "params.regime")?;
            }
            TaskParams::Hitting(p) => {
                if !(p.t_max.is_finite() && p.t_max >= 0.0) {
                    return Err(bad("params.t_max", "must be finite and nonnegative"));
                }
                nonzero(p.n_paths, "params.n_paths")?;
                nonzero(p.regime, "params.regime")?;
            }
            TaskParams::TvDecay(p) => {
                nonzero(p.n_paths, "params.n_paths")?;
                if p.times.is_empty() || p.times.windows(2).any(|w| w[1] <= w[0]) || p.times[0] < 0.0 {
                    return Err(bad("params.times", "must be nonempty, nonnegative and strictly increasing"));
                }
            }
            TaskParams::ExitTime(p) => {
                if !(p.lo < p.hi) {
                    return Err(bad("params.hi", "must exceed lo"));
                }
                positive(p.h, "params.h")?;
                nonzero(p.k, "params.k")?;
                positive(p.tol, "params.tol")?;
                nonzero(p.max_iter, "params.max_iter")?;
            }
            TaskParams::Recurrence(p) => {
                if !(p.d1.0 < p.d1.1) {
                    return Err(bad("params.d1", "needs l < u"));
                }
                if p.ks.is_empty() || p.ks.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(bad("params.ks", "must be nonempty and strictly increasing"));
                }
                if p.ks[0] <= p.d1.0.abs().max(p.d1.1.abs()) {
                    return Err(bad("params.ks", "must lie beyond D1"));
                }
                positive(p.h, "params.h")?;
                nonzero(p.k, "params.k")?;
                if p.probes.is_empty() {
                    return Err(bad("params.probes", "needs at least one probe"));
                }
            }
        }
        Ok(())
    }
}
