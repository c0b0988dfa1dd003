//! Hybrid model definitions: coefficient families, segment-dependent rate kernels,
//! and the built-in examples.
//!
//! The regime space is `ℤ₊ = {1, 2, …}`. Rows of the rate kernel are finitely
//! supported: a kernel is a list of entries `(from-pattern, target, rate)` and
//! [`RateKernel::rate_row`] enumerates the non-trivial targets of one regime in
//! ascending order. Cumulative sums of that row define the intervals `Δ_ij(φ)`
//! used by the jump construction in [`crate::simulate`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{EvalError, Expr, ExprKind, ParseError, Scope};
use crate::segment::SegmentPath;

pub type Regime = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("parse error in {context}: {source}")]
    Parse { context: String, source: ParseError },
    #[error("evaluation error in {context}: {source}")]
    Eval { context: String, source: EvalError },
    #[error("negative rate q_{{{from},{to}}} = {value}")]
    NegativeRate { from: Regime, to: Regime, value: f64 },
    #[error("regime must be >= 1, got {0}")]
    BadRegime(Regime),
    #[error("no {family} coefficient covers regime {regime}")]
    Uncovered { family: &'static str, regime: Regime },
    #[error("invalid regime pattern `{0}`")]
    BadPattern(String),
    #[error("invalid jump target `{0}`")]
    BadTarget(String),
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("missing parameter `{0}`")]
    MissingParam(&'static str),
    #[error("unknown built-in model `{0}`")]
    UnknownBuiltin(String),
}

fn eval_ctx(context: impl Into<String>) -> impl FnOnce(EvalError) -> ModelError {
    let context = context.into();
    move |source| ModelError::Eval { context, source }
}

/// Set of regimes an entry applies to: `"3"`, `"2.."`, `"2..5"` or `"*"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegimePattern {
    Exact(Regime),
    From(Regime),
    Range(Regime, Regime),
    Any,
}

impl RegimePattern {
    pub fn matches(self, i: Regime) -> bool {
        match self {
            RegimePattern::Exact(a) => i == a,
            RegimePattern::From(a) => i >= a,
            RegimePattern::Range(a, b) => (a..=b).contains(&i),
            RegimePattern::Any => true,
        }
    }
}

impl FromStr for RegimePattern {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        let bad = || ModelError::BadPattern(s.to_string());
        let num = |v: &str| v.trim().parse::<Regime>().ok().filter(|&v| v >= 1).ok_or_else(bad);
        if t == "*" {
            return Ok(RegimePattern::Any);
        }
        if let Some((a, b)) = t.split_once("..") {
            let a = num(a)?;
            if b.trim().is_empty() {
                return Ok(RegimePattern::From(a));
            }
            let b = num(b)?;
            if b < a {
                return Err(bad());
            }
            return Ok(RegimePattern::Range(a, b));
        }
        Ok(RegimePattern::Exact(num(t)?))
    }
}

impl fmt::Display for RegimePattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RegimePattern::Exact(a) => write!(f, "{a}"),
            RegimePattern::From(a) => write!(f, "{a}.."),
            RegimePattern::Range(a, b) => write!(f, "{a}..{b}"),
            RegimePattern::Any => f.write_str("*"),
        }
    }
}

/// Jump target, absolute (`"1"`) or relative to the source regime (`"i+1"`, `"i-1"`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Absolute(Regime),
    Relative(i64),
}

impl Target {
    pub fn resolve(self, i: Regime) -> Option<Regime> {
        match self {
            Target::Absolute(j) => Some(j),
            Target::Relative(d) => {
                let j = i as i64 + d;
                (j >= 1).then_some(j as Regime)
            }
        }
    }
}

impl FromStr for Target {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        let bad = || ModelError::BadTarget(s.to_string());
        if let Some(rest) = t.strip_prefix('i') {
            if rest.is_empty() {
                return Err(bad());
            }
            let d: i64 = rest.strip_prefix('+').unwrap_or(rest).parse().map_err(|_| bad())?;
            if d == 0 {
                return Err(bad());
            }
            return Ok(Target::Relative(d));
        }
        let j: Regime = t.parse().map_err(|_| bad())?;
        if j == 0 {
            return Err(bad());
        }
        Ok(Target::Absolute(j))
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Absolute(j) => write!(f, "{j}"),
            Target::Relative(d) if *d > 0 => write!(f, "i+{d}"),
            Target::Relative(d) => write!(f, "i{d}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelForm {
    BandedBirthDeath,
    JumpToBase,
    DenseTruncated,
    ExpressionTable,
}

#[derive(Debug, Clone)]
pub struct KernelEntry {
    pub from: RegimePattern,
    pub to: Target,
    pub rate: Expr,
}

/// Dominating bound on the total jump intensity.
#[derive(Debug, Clone)]
pub enum RateBound {
    /// `q_i(φ) ≤ M` everywhere.
    Global(f64),
    /// `q_i(φ) ≤ M_H` whenever `‖φ‖ ≤ H`; a point expression in `x = H` and `i`.
    Local(Expr),
    None,
}

#[derive(Debug, Clone)]
pub struct RateKernel {
    pub form: KernelForm,
    pub entries: Vec<KernelEntry>,
    pub bound: RateBound,
    /// Regimes above this level are removed from the state space.
    pub truncation: Option<Regime>,
}

impl RateKernel {
    /// The kernel that never switches.
    pub fn zero() -> Self {
        RateKernel {
            form: KernelForm::ExpressionTable,
            entries: Vec::new(),
            bound: RateBound::Global(0.0),
            truncation: None,
        }
    }

    /// Writes the ascending row `(j, q_ij)` into `row` and returns `q_i`.
    ///
    /// Targets that resolve to `i` itself, to regime 0, or above the truncation
    /// level are dropped; zero rates are kept out of the row.
    pub fn rate_row(&self, scope: &Scope<'_>, row: &mut Vec<(Regime, f64)>) -> Result<f64, ModelError> {
        let i = scope.regime;
        if i == 0 {
            return Err(ModelError::BadRegime(0));
        }
        row.clear();
        for e in &self.entries {
            if !e.from.matches(i) {
                continue;
            }
            let Some(j) = e.to.resolve(i) else { continue };
            if j == i || self.truncation.is_some_and(|k| j > k) {
                continue;
            }
            let q = e.rate.evaluate(scope).map_err(eval_ctx(format!("rate {i}->{j}")))?;
            if q < 0.0 {
                return Err(ModelError::NegativeRate { from: i, to: j, value: q });
            }
            if q == 0.0 {
                continue;
            }
            match row.iter_mut().find(|(k, _)| *k == j) {
                Some(slot) => slot.1 += q,
                None => row.push((j, q)),
            }
        }
        row.sort_unstable_by_key(|&(j, _)| j);
        Ok(row.iter().map(|&(_, q)| q).sum())
    }

    /// `M` or `M_H` at the given `H` and regime.
    pub fn bound_at(&self, h: f64, regime: Regime) -> Result<Option<f64>, ModelError> {
        match &self.bound {
            RateBound::Global(m) => Ok(Some(*m)),
            RateBound::Local(e) => {
                let x = [h];
                e.evaluate(&Scope::point(&x, regime)).map(Some).map_err(eval_ctx("rate bound"))
            }
            RateBound::None => Ok(None),
        }
    }

    /// Explicit support of regime `i`: targets with a rate expression that is not literally zero.
    pub fn support(&self, i: Regime) -> Vec<Regime> {
        let mut out: Vec<Regime> = self
            .entries
            .iter()
            .filter(|e| e.from.matches(i) && e.rate != Expr::Num(0.0))
            .filter_map(|e| e.to.resolve(i))
            .filter(|&j| j != i && self.truncation.is_none_or(|k| j <= k))
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn is_past_independent(&self) -> bool {
        self.entries.iter().all(|e| e.rate.is_past_independent())
    }
}

/// A vector- or matrix-valued point expression, chosen per regime by pattern.
#[derive(Debug, Clone)]
pub struct CoefficientFamily {
    pub name: &'static str,
    pub entries: Vec<(RegimePattern, Vec<Expr>)>,
}

impl CoefficientFamily {
    pub fn uniform(name: &'static str, exprs: Vec<Expr>) -> Self {
        CoefficientFamily { name, entries: vec![(RegimePattern::Any, exprs)] }
    }

    pub fn exprs(&self, i: Regime) -> Result<&[Expr], ModelError> {
        self.entries
            .iter()
            .find(|(p, _)| p.matches(i))
            .map(|(_, e)| e.as_slice())
            .ok_or(ModelError::Uncovered { family: self.name, regime: i })
    }

    pub fn eval_into(&self, x: &[f64], i: Regime, out: &mut [f64]) -> Result<(), ModelError> {
        let exprs = self.exprs(i)?;
        let scope = Scope::point(x, i);
        for (o, e) in out.iter_mut().zip(exprs) {
            *o = e.evaluate(&scope).map_err(eval_ctx(self.name))?;
        }
        Ok(())
    }
}

/// `dX = b(X, α) dt + σ(X, α) dW` with segment-dependent switching intensities.
#[derive(Debug, Clone)]
pub struct RegimeSwitchingModel {
    pub name: String,
    pub dim: usize,
    pub noise_dim: usize,
    pub delay: f64,
    pub drift: CoefficientFamily,
    /// Row-major `n × d` matrix per regime.
    pub diffusion: CoefficientFamily,
    pub kernel: RateKernel,
}

impl RegimeSwitchingModel {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        delay: f64,
        drift: CoefficientFamily,
        diffusion: CoefficientFamily,
        kernel: RateKernel,
    ) -> Result<Self, ModelError> {
        if dim == 0 {
            return Err(ModelError::Invalid("dimension must be positive".into()));
        }
        if !(delay.is_finite() && delay > 0.0) {
            return Err(ModelError::Invalid(format!("delay must be positive, got {delay}")));
        }
        let mut noise_dim = None;
        for (p, e) in &drift.entries {
            if e.len() != dim {
                return Err(ModelError::Invalid(format!(
                    "drift for regimes {p} has {} components, expected {dim}",
                    e.len()
                )));
            }
        }
        for (p, e) in &diffusion.entries {
            if e.is_empty() || e.len() % dim != 0 {
                return Err(ModelError::Invalid(format!("diffusion for regimes {p} is not an {dim} x d matrix")));
            }
            let d = e.len() / dim;
            if *noise_dim.get_or_insert(d) != d {
                return Err(ModelError::Invalid("diffusion matrices disagree on noise dimension".into()));
            }
        }
        let all = drift.entries.iter().chain(&diffusion.entries).flat_map(|(_, e)| e.iter());
        let rates = kernel.entries.iter().map(|e| &e.rate);
        if let Some(k) = all.chain(rates).filter_map(Expr::max_index).max() {
            if k >= dim {
                return Err(ModelError::Invalid(format!(
                    "component {} referenced in a {dim}-dimensional model",
                    k + 1
                )));
            }
        }
        Ok(RegimeSwitchingModel {
            name: name.into(),
            dim,
            noise_dim: noise_dim.ok_or_else(|| ModelError::Invalid("diffusion is empty".into()))?,
            delay,
            drift,
            diffusion,
            kernel,
        })
    }

    pub fn drift_into(&self, x: &[f64], i: Regime, out: &mut [f64]) -> Result<(), ModelError> {
        self.drift.eval_into(x, i, out)
    }

    pub fn diffusion_into(&self, x: &[f64], i: Regime, out: &mut [f64]) -> Result<(), ModelError> {
        self.diffusion.eval_into(x, i, out)
    }

    /// `A = σσᵀ`, row-major `n × n`.
    pub fn covariance(&self, x: &[f64], i: Regime) -> Result<Vec<f64>, ModelError> {
        let (n, d) = (self.dim, self.noise_dim);
        let mut s = vec![0.0; n * d];
        self.diffusion_into(x, i, &mut s)?;
        let mut a = vec![0.0; n * n];
        for k in 0..n {
            for l in 0..n {
                a[k * n + l] = (0..d).map(|c| s[k * d + c] * s[l * d + c]).sum();
            }
        }
        Ok(a)
    }

    /// Rate row at segment `seg` in regime `i`.
    pub fn rate_row(&self, seg: &SegmentPath, i: Regime, row: &mut Vec<(Regime, f64)>) -> Result<f64, ModelError> {
        self.kernel.rate_row(&Scope::segment(seg, i), row)
    }

    pub fn is_past_independent(&self) -> bool {
        self.kernel.is_past_independent()
    }
}

// ---------------------------------------------------------------------------
// Built-in examples

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BuiltinName {
    Ex1,
    Ex2,
    Ex3,
    Ex4,
    Custom,
}

impl FromStr for BuiltinName {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "ex1" => BuiltinName::Ex1,
            "ex2" => BuiltinName::Ex2,
            "ex3" => BuiltinName::Ex3,
            "ex4" => BuiltinName::Ex4,
            "custom" => BuiltinName::Custom,
            other => return Err(ModelError::UnknownBuiltin(other.to_string())),
        })
    }
}

/// Free choices of the built-in examples.
///
/// `b` and `sigma` are point expressions in `x` and `i`. For ex1–ex3 the drift is
/// `-x·b(x, i)`; for ex4 it is `b(x, i)` itself. `c[k]` is `C_{k+2}`, the last
/// entry repeating for all higher regimes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuiltinParams {
    #[serde(default)]
    pub b: Option<String>,
    #[serde(default)]
    pub sigma: Option<String>,
    #[serde(default)]
    pub c: Option<Vec<f64>>,
    #[serde(default)]
    pub r: Option<f64>,
    #[serde(default)]
    pub truncation: Option<Regime>,
}

fn parse(text: &str, kind: ExprKind, context: &str) -> Result<Expr, ModelError> {
    Expr::parse(text, kind).map_err(|source| ModelError::Parse { context: context.to_string(), source })
}

fn birth_death_constants(c: &[f64]) -> Result<Vec<(RegimePattern, f64)>, ModelError> {
    if c.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(ModelError::Invalid("constants C_i must be finite and nonnegative".into()));
    }
    if c.is_empty() {
        return Ok(vec![(RegimePattern::From(2), 0.0)]);
    }
    let last = c.len() - 1;
    Ok(c.iter()
        .enumerate()
        .map(|(k, &v)| {
            let pat = if k == last { RegimePattern::From(k + 2) } else { RegimePattern::Exact(k + 2) };
            (pat, v)
        })
        .collect())
}

/// Builds one of the example models.
pub fn builtin_model(name: BuiltinName, params: &BuiltinParams) -> Result<RegimeSwitchingModel, ModelError> {
    if name == BuiltinName::Custom {
        return Err(ModelError::MissingParam("model file"));
    }
    let r = params.r.unwrap_or(1.0);
    let b = parse(params.b.as_deref().unwrap_or("1"), ExprKind::Point, "b")?;
    let sigma = parse(params.sigma.as_deref().unwrap_or("1"), ExprKind::Point, "sigma")?;
    let consts = birth_death_constants(params.c.as_deref().unwrap_or(&[]))?;
    let c_max = consts.iter().map(|&(_, v)| v).fold(0.0, f64::max);
    let drift = match name {
        BuiltinName::Ex4 => b,
        _ => -Expr::X(0) * b,
    };
    let base = KernelEntry { from: RegimePattern::Exact(1), to: Target::Absolute(2), rate: Expr::num(1.0) };
    let mut entries = vec![base];
    let (form, bound) = match name {
        BuiltinName::Ex1 | BuiltinName::Ex2 => {
            // C_i + (1 + ‖φ‖)^{-1} in both directions.
            let decay = parse("1/(1+SUPNORM)", ExprKind::Segment, "ex1 rate")?;
            for &(pat, c) in &consts {
                for d in [-1, 1] {
                    entries.push(KernelEntry {
                        from: pat,
                        to: Target::Relative(d),
                        rate: Expr::num(c) + decay.clone(),
                    });
                }
            }
            (KernelForm::BandedBirthDeath, RateBound::Global((2.0 * c_max + 2.0).max(1.0)))
        }
        BuiltinName::Ex3 => {
            entries.push(KernelEntry {
                from: RegimePattern::From(2),
                to: Target::Absolute(1),
                rate: parse("2*INTABS", ExprKind::Segment, "ex3 rate")?,
            });
            entries.push(KernelEntry {
                from: RegimePattern::From(2),
                to: Target::Relative(1),
                rate: parse("i*INTABS", ExprKind::Segment, "ex3 rate")?,
            });
            let bound = parse(&format!("max(1, (2+i)*{r:?}*x)"), ExprKind::Point, "ex3 bound")?;
            (KernelForm::JumpToBase, RateBound::Local(bound))
        }
        BuiltinName::Ex4 => {
            let down = parse("2*abs(SEG0)", ExprKind::Segment, "ex4 rate")?;
            let up = parse("abs(SEGR)", ExprKind::Segment, "ex4 rate")?;
            for &(pat, c) in &consts {
                entries.push(KernelEntry { from: pat, to: Target::Relative(-1), rate: Expr::num(c) + down.clone() });
                entries.push(KernelEntry { from: pat, to: Target::Relative(1), rate: Expr::num(c) + up.clone() });
            }
            let bound = parse(&format!("max(1, {:?} + 3*x)", 2.0 * c_max), ExprKind::Point, "ex4 bound")?;
            (KernelForm::BandedBirthDeath, RateBound::Local(bound))
        }
        BuiltinName::Custom => unreachable!(),
    };
    let kernel = RateKernel { form, entries, bound, truncation: params.truncation };
    let label = match name {
        BuiltinName::Ex1 => "ex1",
        BuiltinName::Ex2 => "ex2",
        BuiltinName::Ex3 => "ex3",
        BuiltinName::Ex4 => "ex4",
        BuiltinName::Custom => "custom",
    };
    RegimeSwitchingModel::new(
        label,
        1,
        r,
        CoefficientFamily::uniform("drift", vec![drift]),
        CoefficientFamily::uniform("diffusion", vec![sigma]),
        kernel,
    )
}

// ---------------------------------------------------------------------------
// JSON model files

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CoefficientSpec {
    pub regimes: String,
    pub expr: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EntrySpec {
    pub from: String,
    pub to: String,
    pub rate: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "lowercase")]
pub enum BoundSpec {
    Global(f64),
    Local(String),
    None,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub form: KernelForm,
    pub entries: Vec<EntrySpec>,
    pub bound: BoundSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncation: Option<Regime>,
}

/// On-disk model description.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    pub n: usize,
    pub r: f64,
    pub drift: Vec<CoefficientSpec>,
    pub diffusion: Vec<CoefficientSpec>,
    pub kernel: KernelSpec,
}

fn family(name: &'static str, specs: &[CoefficientSpec]) -> Result<CoefficientFamily, ModelError> {
    let entries = specs
        .iter()
        .map(|s| {
            let pat: RegimePattern = s.regimes.parse()?;
            let exprs = s.expr.iter().map(|t| parse(t, ExprKind::Point, name)).collect::<Result<_, _>>()?;
            Ok((pat, exprs))
        })
        .collect::<Result<_, ModelError>>()?;
    Ok(CoefficientFamily { name, entries })
}

impl ModelSpec {
    pub fn build(&self) -> Result<RegimeSwitchingModel, ModelError> {
        let entries = self
            .kernel
            .entries
            .iter()
            .map(|e| {
                Ok(KernelEntry {
                    from: e.from.parse()?,
                    to: e.to.parse()?,
                    rate: parse(&e.rate, ExprKind::Segment, "rate")?,
                })
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        if self.kernel.form == KernelForm::DenseTruncated && self.kernel.truncation.is_none() {
            return Err(ModelError::Invalid("dense-truncated kernel needs a truncation level".into()));
        }
        let bound = match &self.kernel.bound {
            BoundSpec::Global(m) => RateBound::Global(*m),
            BoundSpec::Local(t) => RateBound::Local(parse(t, ExprKind::Point, "bound")?),
            BoundSpec::None => RateBound::None,
        };
        RegimeSwitchingModel::new(
            self.name.clone(),
            self.n,
            self.r,
            family("drift", &self.drift)?,
            family("diffusion", &self.diffusion)?,
            RateKernel { form: self.kernel.form, entries, bound, truncation: self.kernel.truncation },
        )
    }

    pub fn from_model(m: &RegimeSwitchingModel) -> ModelSpec {
        let fam = |f: &CoefficientFamily| {
            f.entries
                .iter()
                .map(|(p, e)| CoefficientSpec {
                    regimes: p.to_string(),
                    expr: e.iter().map(|e| e.to_string()).collect(),
                })
                .collect()
        };
        ModelSpec {
            name: m.name.clone(),
            n: m.dim,
            r: m.delay,
            drift: fam(&m.drift),
            diffusion: fam(&m.diffusion),
            kernel: KernelSpec {
                form: m.kernel.form,
                entries: m
                    .kernel
                    .entries
                    .iter()
                    .map(|e| EntrySpec { from: e.from.to_string(), to: e.to.to_string(), rate: e.rate.to_string() })
                    .collect(),
                bound: match &m.kernel.bound {
                    RateBound::Global(v) => BoundSpec::Global(*v),
                    RateBound::Local(e) => BoundSpec::Local(e.to_string()),
                    RateBound::None => BoundSpec::None,
                },
                truncation: m.kernel.truncation,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row_at(model: &RegimeSwitchingModel, seg: &SegmentPath, i: Regime) -> (Vec<(Regime, f64)>, f64) {
        let mut row = Vec::new();
        let total = model.rate_row(seg, i, &mut row).unwrap();
        (row, total)
    }

    fn ex(name: BuiltinName, c: f64) -> RegimeSwitchingModel {
        builtin_model(name, &BuiltinParams { c: Some(vec![c]), ..Default::default() }).unwrap()
    }

    #[test]
    fn example1_rows() {
        let m = ex(BuiltinName::Ex1, 0.5);
        let any = SegmentPath::constant(1.0, 10, &[7.0]).unwrap();
        assert_eq!(row_at(&m, &any, 1), (vec![(2, 1.0)], 1.0));
        // ‖φ‖ = 1 from a non-constant segment.
        let seg = SegmentPath::from_fn(1.0, 10, |t| vec![-t]).unwrap();
        assert_eq!(seg.sup_norm(), 1.0);
        assert_eq!(row_at(&m, &seg, 3), (vec![(2, 1.0), (4, 1.0)], 2.0));

        let m0 = builtin_model(
            BuiltinName::Ex1,
            &BuiltinParams {
                b: Some("1".into()),
                sigma: Some("1".into()),
                c: Some(vec![0.0]),
                r: Some(1.0),
                truncation: None,
            },
        )
        .unwrap();
        let zero = SegmentPath::constant(1.0, 10, &[0.0]).unwrap();
        assert_eq!(row_at(&m0, &zero, 2), (vec![(1, 1.0), (3, 1.0)], 2.0));
    }

    #[test]
    fn example3_and_4_rows() {
        let m3 = builtin_model(BuiltinName::Ex3, &BuiltinParams { r: Some(1.0), ..Default::default() }).unwrap();
        let zero = SegmentPath::constant(1.0, 10, &[0.0]).unwrap();
        assert_eq!(row_at(&m3, &zero, 5).1, 0.0);
        let one = SegmentPath::constant(1.0, 10, &[1.0]).unwrap();
        let (row, total) = row_at(&m3, &one, 2);
        assert_eq!(row.len(), 2);
        assert!((row[0].1 - 2.0).abs() < 1e-14 && row[0].0 == 1);
        assert!((row[1].1 - 2.0).abs() < 1e-14 && row[1].0 == 3);
        assert!((total - 4.0).abs() < 1e-14);

        let m4 = ex(BuiltinName::Ex4, 0.0);
        // φ(-r) = 0, φ(0) = 1.
        let seg = SegmentPath::from_fn(1.0, 10, |t| vec![1.0 + t]).unwrap();
        assert_eq!(row_at(&m4, &seg, 2), (vec![(1, 2.0)], 2.0));
        assert_eq!(m4.kernel.support(2), vec![1, 3]);
    }

    #[test]
    fn drift_sign_conventions() {
        let m1 = builtin_model(BuiltinName::Ex1, &BuiltinParams { b: Some("2".into()), ..Default::default() }).unwrap();
        let mut out = [0.0];
        m1.drift_into(&[3.0], 1, &mut out).unwrap();
        assert_eq!(out[0], -6.0);
        let m4 =
            builtin_model(BuiltinName::Ex4, &BuiltinParams { b: Some("-x".into()), ..Default::default() }).unwrap();
        m4.drift_into(&[3.0], 1, &mut out).unwrap();
        assert_eq!(out[0], -3.0);
        assert_eq!(m4.covariance(&[3.0], 1).unwrap(), vec![1.0]);
    }

    #[test]
    fn negative_rates_are_rejected() {
        let spec = ModelSpec {
            name: "neg".into(),
            n: 1,
            r: 1.0,
            drift: vec![CoefficientSpec { regimes: "*".into(), expr: vec!["0".into()] }],
            diffusion: vec![CoefficientSpec { regimes: "*".into(), expr: vec!["1".into()] }],
            kernel: KernelSpec {
                form: KernelForm::ExpressionTable,
                entries: vec![EntrySpec { from: "1".into(), to: "2".into(), rate: "SEG0".into() }],
                bound: BoundSpec::None,
                truncation: None,
            },
        };
        let m = spec.build().unwrap();
        let seg = SegmentPath::constant(1.0, 4, &[-1.0]).unwrap();
        let mut row = Vec::new();
        assert!(matches!(m.rate_row(&seg, 1, &mut row), Err(ModelError::NegativeRate { from: 1, to: 2, .. })));
        assert!(matches!(m.rate_row(&seg, 0, &mut row), Err(ModelError::BadRegime(0))));
    }

    #[test]
    fn truncation_drops_high_targets() {
        let m = builtin_model(BuiltinName::Ex1, &BuiltinParams { truncation: Some(3), ..Default::default() }).unwrap();
        let zero = SegmentPath::constant(1.0, 4, &[0.0]).unwrap();
        assert_eq!(row_at(&m, &zero, 3), (vec![(2, 1.0)], 1.0));
    }

    #[test]
    fn patterns_and_targets_parse() {
        assert_eq!("3".parse::<RegimePattern>().unwrap(), RegimePattern::Exact(3));
        assert_eq!("2..".parse::<RegimePattern>().unwrap(), RegimePattern::From(2));
        assert_eq!("2..5".parse::<RegimePattern>().unwrap(), RegimePattern::Range(2, 5));
        assert_eq!("*".parse::<RegimePattern>().unwrap(), RegimePattern::Any);
        assert!("0".parse::<RegimePattern>().is_err());
        assert!("5..2".parse::<RegimePattern>().is_err());
        assert_eq!("i+1".parse::<Target>().unwrap(), Target::Relative(1));
        assert_eq!("i - 2".parse::<Target>().unwrap(), Target::Relative(-2));
        assert_eq!("4".parse::<Target>().unwrap(), Target::Absolute(4));
        assert!("i".parse::<Target>().is_err());
        assert!("i+0".parse::<Target>().is_err());
        assert_eq!(Target::Relative(-1).resolve(1), None);
    }

    #[test]
    fn model_spec_round_trip() {
        for name in [BuiltinName::Ex1, BuiltinName::Ex3, BuiltinName::Ex4] {
            let m = builtin_model(name, &BuiltinParams { c: Some(vec![0.25, 0.5]), ..Default::default() }).unwrap();
            let spec = ModelSpec::from_model(&m);
            let text = serde_json::to_string(&spec).unwrap();
            let back: ModelSpec = serde_json::from_str(&text).unwrap();
            let m2 = back.build().unwrap();
            let seg = SegmentPath::from_fn(1.0, 16, |t| vec![(3.0 * t).sin() + 0.2]).unwrap();
            for i in 1..8 {
                assert_eq!(row_at(&m, &seg, i), row_at(&m2, &seg, i));
            }
            assert_eq!(ModelSpec::from_model(&m2), spec);
        }
    }

    #[test]
    fn missing_params_for_custom() {
        assert!(matches!(
            builtin_model(BuiltinName::Custom, &BuiltinParams::default()),
            Err(ModelError::MissingParam(_))
        ));
        assert!("ex9".parse::<BuiltinName>().is_err());
    }

    // Hand-coded kernels, independent of the expression evaluator.
    fn direct_rates(name: BuiltinName, c: f64, seg: &SegmentPath, i: Regime) -> Vec<(Regime, f64)> {
        let sup = seg.values().map(|v| v[0].abs()).fold(0.0, f64::max);
        let h = seg.step();
        let vals: Vec<f64> = seg.values().map(|v| v[0].abs()).collect();
        let int_abs = h * (vals.iter().sum::<f64>() - 0.5 * (vals[0] + vals[vals.len() - 1]));
        if i == 1 {
            return vec![(2, 1.0)];
        }
        let mut row = match name {
            BuiltinName::Ex1 => vec![(i - 1, c + 1.0 / (1.0 + sup)), (i + 1, c + 1.0 / (1.0 + sup))],
            BuiltinName::Ex3 => {
                if i == 2 {
                    vec![(1, 2.0 * int_abs), (3, 2.0 * int_abs)]
                } else {
                    vec![(1, 2.0 * int_abs), (i + 1, i as f64 * int_abs)]
                }
            }
            BuiltinName::Ex4 => {
                vec![(i - 1, c + 2.0 * seg.current()[0].abs()), (i + 1, c + seg.oldest()[0].abs())]
            }
            _ => unreachable!(),
        };
        row.retain(|&(_, q)| q != 0.0);
        row
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn builtin_kernels_match_direct_formulas(
            which in 0usize..3,
            vals in prop::collection::vec(-4.0f64..4.0, 9),
            i in 1usize..12,
            c in 0.0f64..2.0,
        ) {
            let name = [BuiltinName::Ex1, BuiltinName::Ex3, BuiltinName::Ex4][which];
            let m = builtin_model(name, &BuiltinParams { c: Some(vec![c]), ..Default::default() }).unwrap();
            let seg = SegmentPath::new(1.0, 0.125, vals.iter().map(|v| vec![*v]).collect()).unwrap();
            let (row, total) = row_at(&m, &seg, i);
            let want = direct_rates(name, c, &seg, i);
            prop_assert_eq!(row.len(), want.len());
            for ((j, q), (wj, wq)) in row.iter().zip(&want) {
                prop_assert_eq!(j, wj);
                prop_assert!((q - wq).abs() <= 1e-12 * wq.abs().max(1e-300));
                prop_assert!(*q >= 0.0);
            }
            prop_assert!(row.windows(2).all(|w| w[0].0 < w[1].0));
            prop_assert!(total.is_finite());
            let bound = m.kernel.bound_at(seg.sup_norm(), i).unwrap().unwrap();
            prop_assert!(total <= bound + 1e-12);
        }
    }
}
