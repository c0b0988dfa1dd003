//! Hitting-time summaries, binned total-variation distances between two
//! simulated marginals, and log-linear decay-rate fits.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Regime, RegimeSwitchingModel};
use crate::simulate::{par_paths, steps_for, HitResult, HybridState, PathInit, SimConfig, SimError, Stepper};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ErgoError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("empty sample set")]
    Empty,
    #[error("binning: {0}")]
    Binning(String),
    #[error("only {usable} points above the noise floor, need at least 3")]
    TooFewPoints { usable: usize },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HittingStats {
    pub n_paths: usize,
    pub hit_fraction: f64,
    pub censor_fraction: f64,
    /// Mean over uncensored paths; `None` when every path was censored.
    pub mean: Option<f64>,
    pub std_error: Option<f64>,
    pub ci95: Option<(f64, f64)>,
    pub all_censored: bool,
}

pub fn hitting_stats(batch: &[HitResult]) -> Result<HittingStats, ErgoError> {
    if batch.is_empty() {
        return Err(ErgoError::Empty);
    }
    let n = batch.len();
    let hits: Vec<f64> = batch.iter().filter(|h| !h.censored).map(|h| h.tau).collect();
    let k = hits.len();
    let (mean, se) = if k == 0 {
        (None, None)
    } else {
        // Sorting makes the sums independent of batch order.
        let mut sorted = hits.clone();
        sorted.sort_by(f64::total_cmp);
        let m = sorted.iter().sum::<f64>() / k as f64;
        let se = if k > 1 {
            let var = sorted.iter().map(|t| (t - m) * (t - m)).sum::<f64>() / (k - 1) as f64;
            (var / k as f64).sqrt()
        } else {
            0.0
        };
        (Some(m), Some(se))
    };
    Ok(HittingStats {
        n_paths: n,
        hit_fraction: k as f64 / n as f64,
        censor_fraction: (n - k) as f64 / n as f64,
        mean,
        std_error: se,
        ci95: mean.zip(se).map(|(m, s)| (m - 1.96 * s, m + 1.96 * s)),
        all_censored: k == 0,
    })
}

/// Samples of `(X(t), α(t))`, coordinates row-major.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StateSamples {
    pub dim: usize,
    pub xs: Vec<f64>,
    pub regimes: Vec<Regime>,
}

impl StateSamples {
    pub fn new(dim: usize) -> Self {
        StateSamples { dim, xs: Vec::new(), regimes: Vec::new() }
    }

    pub fn push(&mut self, x: &[f64], regime: Regime) {
        self.xs.extend_from_slice(x);
        self.regimes.push(regime);
    }

    pub fn len(&self) -> usize {
        self.regimes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regimes.is_empty()
    }

    pub fn x(&self, k: usize) -> &[f64] {
        &self.xs[k * self.dim..(k + 1) * self.dim]
    }
}

/// Product grid over `[lo, hi]` per coordinate, with out-of-range values pooled
/// into the edge cells, times regimes `1..=cap` with everything above `cap` pooled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Binning {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub bins: Vec<usize>,
    /// `None`: the 99.9th percentile of the pooled observed regimes.
    #[serde(default)]
    pub regime_cap: Option<Regime>,
}

impl Binning {
    pub fn uniform(lo: f64, hi: f64, bins: usize, dim: usize) -> Self {
        Binning { lo: vec![lo; dim], hi: vec![hi; dim], bins: vec![bins; dim], regime_cap: None }
    }

    fn validate(&self, dim: usize) -> Result<(), ErgoError> {
        if self.lo.len() != dim || self.hi.len() != dim || self.bins.len() != dim {
            return Err(ErgoError::Binning(format!("expected {dim} coordinates")));
        }
        if self.bins.contains(&0) || self.lo.iter().zip(&self.hi).any(|(a, b)| !(a < b)) {
            return Err(ErgoError::Binning("need lo < hi and at least one bin per coordinate".into()));
        }
        if self.regime_cap == Some(0) {
            return Err(ErgoError::Binning("regime cap must be at least 1".into()));
        }
        Ok(())
    }

    fn cell(&self, x: &[f64], regime: Regime, cap: Regime) -> Vec<usize> {
        let mut c = Vec::with_capacity(x.len() + 1);
        for k in 0..x.len() {
            let w = (self.hi[k] - self.lo[k]) / self.bins[k] as f64;
            let pos = ((x[k] - self.lo[k]) / w).floor();
            c.push(pos.clamp(0.0, (self.bins[k] - 1) as f64) as usize);
        }
        c.push(regime.min(cap));
        c
    }
}

/// 99.9th percentile of the regimes in `sets`.
pub fn regime_percentile_cap(sets: &[&StateSamples]) -> Regime {
    let mut all: Vec<Regime> = sets.iter().flat_map(|s| s.regimes.iter().copied()).collect();
    if all.is_empty() {
        return 1;
    }
    all.sort_unstable();
    let idx = ((0.999 * all.len() as f64).ceil() as usize).clamp(1, all.len()) - 1;
    all[idx].max(1)
}

/// `½ Σ |p̂_a − p̂_b|` over the cells; also returns the number of occupied cells.
pub fn empirical_tv_cells(a: &StateSamples, b: &StateSamples, binning: &Binning) -> Result<(f64, usize), ErgoError> {
    if a.is_empty() || b.is_empty() {
        return Err(ErgoError::Empty);
    }
    if a.dim != b.dim {
        return Err(ErgoError::Binning("sample sets differ in dimension".into()));
    }
    binning.validate(a.dim)?;
    let cap = binning.regime_cap.unwrap_or_else(|| regime_percentile_cap(&[a, b]));
    let mut counts: BTreeMap<Vec<usize>, (u64, u64)> = BTreeMap::new();
    for k in 0..a.len() {
        counts.entry(binning.cell(a.x(k), a.regimes[k], cap)).or_default().0 += 1;
    }
    for k in 0..b.len() {
        counts.entry(binning.cell(b.x(k), b.regimes[k], cap)).or_default().1 += 1;
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let tv = 0.5 * counts.values().map(|&(ca, cb)| (ca as f64 / na - cb as f64 / nb).abs()).sum::<f64>();
    Ok((tv.clamp(0.0, 1.0), counts.len()))
}

pub fn empirical_tv(a: &StateSamples, b: &StateSamples, binning: &Binning) -> Result<f64, ErgoError> {
    Ok(empirical_tv_cells(a, b, binning)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TvPoint {
    pub t: f64,
    pub tv: f64,
    pub n_a: usize,
    pub n_b: usize,
    /// `2·sqrt(cells / min(n_a, n_b))` with `cells` the occupied cell count.
    pub noise_floor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TvCurve {
    pub points: Vec<TvPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateFit {
    pub theta_hat: f64,
    pub r_squared: f64,
    pub n_used: usize,
}

/// Least squares of `log tv` against `t` over points with `tv` above the floor.
///
/// `floor = None` uses each point's own noise floor.
pub fn fit_exponential_rate(curve: &TvCurve, floor: Option<f64>) -> Result<RateFit, ErgoError> {
    let pts: Vec<(f64, f64)> = curve
        .points
        .iter()
        .filter(|p| p.tv > floor.unwrap_or(p.noise_floor) && p.tv > 0.0)
        .map(|p| (p.t, p.tv.ln()))
        .collect();
    if pts.len() < 3 {
        return Err(ErgoError::TooFewPoints { usable: pts.len() });
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let stt = pts.iter().map(|p| (p.0 - mt) * (p.0 - mt)).sum::<f64>();
    let sty = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum::<f64>();
    let syy = pts.iter().map(|p| (p.1 - my) * (p.1 - my)).sum::<f64>();
    if stt == 0.0 {
        return Err(ErgoError::Invalid("all usable points share one time".into()));
    }
    let slope = sty / stt;
    let r_squared = if syy <= 1e-300 { 1.0 } else { (sty * sty / (stt * syy)).clamp(0.0, 1.0) };
    Ok(RateFit { theta_hat: if slope == 0.0 { 0.0 } else { -slope }, r_squared, n_used: pts.len() })
}

/// Simulates `n_paths` paths and records `(X(t), α(t))` at each time in `times`.
///
/// Path `p` uses stream `path_offset + p`. Censored paths are left out of later samples.
pub fn sample_states_at(
    model: &RegimeSwitchingModel,
    init: &PathInit,
    times: &[f64],
    cfg: &SimConfig,
    seed: u64,
    n_paths: usize,
    path_offset: u64,
    threads: usize,
) -> Result<Vec<StateSamples>, ErgoError> {
    if times.windows(2).any(|w| w[1] <= w[0]) || times.first().is_some_and(|t| *t < 0.0) {
        return Err(ErgoError::Invalid("times must be nonnegative and strictly increasing".into()));
    }
    Stepper::new(model, cfg.clone())?.check_init(init)?;
    let marks: Vec<usize> = times.iter().map(|t| steps_for(*t, cfg.dt)).collect();
    let n = model.dim;
    let per_path = par_paths(n_paths, threads, |p| -> Result<Vec<Option<(Vec<f64>, Regime)>>, SimError> {
        let mut stepper = Stepper::new(model, cfg.clone())?;
        let mut state = HybridState::new(init, seed, path_offset + p);
        let mut jumps = Vec::new();
        let mut out = Vec::with_capacity(marks.len());
        let mut alive = true;
        for &mark in &marks {
            while alive && (state.steps as usize) < mark {
                match stepper.step(&mut state, &mut jumps) {
                    Ok(()) => jumps.clear(),
                    Err(SimError::Explosion { .. }) => alive = false,
                    Err(e) => return Err(e),
                }
            }
            out.push(alive.then(|| (state.seg.current().to_vec(), state.regime)));
        }
        Ok(out)
    })?;
    let mut samples = vec![StateSamples::new(n); times.len()];
    for path in per_path {
        for (slot, obs) in samples.iter_mut().zip(path?) {
            if let Some((x, i)) = obs {
                slot.push(&x, i);
            }
        }
    }
    Ok(samples)
}

/// Binned TV between the marginals started from `init_a` and `init_b`.
pub fn tv_curve(
    model: &RegimeSwitchingModel,
    init_a: &PathInit,
    init_b: &PathInit,
    times: &[f64],
    cfg: &SimConfig,
    seed: u64,
    n_paths: usize,
    threads: usize,
    binning: &Binning,
) -> Result<TvCurve, ErgoError> {
    let a = sample_states_at(model, init_a, times, cfg, seed, n_paths, 0, threads)?;
    let b = sample_states_at(model, init_b, times, cfg, seed, n_paths, n_paths as u64, threads)?;
    let mut points = Vec::with_capacity(times.len());
    for ((t, sa), sb) in times.iter().zip(&a).zip(&b) {
        let (tv, cells) = empirical_tv_cells(sa, sb, binning)?;
        let n_min = sa.len().min(sb.len()) as f64;
        points.push(TvPoint {
            t: *t,
            tv,
            n_a: sa.len(),
            n_b: sb.len(),
            noise_floor: 2.0 * (cells as f64 / n_min).sqrt(),
        });
    }
    Ok(TvCurve { points })
}
