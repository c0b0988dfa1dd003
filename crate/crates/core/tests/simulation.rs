//! Statistical checks of the path simulator against closed-form laws.

use serde_json::json;
use statrs::distribution::{ContinuousCDF, Normal};
use switchlab_core::simulate::{simulate_batch, JumpMode, PathInit, SimConfig};
use switchlab_core::{ModelSpec, RegimeSwitchingModel};

fn model(drift: &str, kernel: serde_json::Value) -> RegimeSwitchingModel {
    serde_json::from_value::<ModelSpec>(json!({
        "name": "t", "n": 1, "r": 0.5,
        "drift": [{"regimes": "*", "expr": [drift]}],
        "diffusion": [{"regimes": "*", "expr": ["1"]}],
        "kernel": kernel
    }))
    .unwrap()
    .build()
    .unwrap()
}

fn flip(rate: f64, bound: serde_json::Value) -> serde_json::Value {
    json!({"form": "expression-table", "entries": [
        {"from": "1", "to": "2", "rate": format!("{rate:?}")},
        {"from": "2", "to": "1", "rate": format!("{rate:?}")}
    ], "bound": bound})
}

fn ks_statistic(mut xs: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(k, &x)| {
            let f = cdf(x);
            (f - k as f64 / n).abs().max(((k + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn brownian_terminal_law_passes_ks() {
    let m = model("0", json!({"form": "expression-table", "entries": [], "bound": {"global": 0.0}}));
    let cfg = SimConfig::new(0.01);
    let init = PathInit::constant(&m, &[0.3], 1, cfg.dt).unwrap();
    let paths = simulate_batch(&m, &init, 1.0, &cfg, 5, 2000, 1).unwrap();
    let terminal: Vec<f64> = paths.iter().map(|p| p.terminal().0[0]).collect();
    let law = Normal::new(0.3, 1.0).unwrap();
    let d = ks_statistic(terminal, |x| law.cdf(x));
    // 1% critical value of the Kolmogorov distribution.
    assert!(d < 1.63 / 2000f64.sqrt(), "D = {d}");
}

#[test]
fn ou_terminal_law_passes_ks() {
    let m = model("-x", json!({"form": "expression-table", "entries": [], "bound": {"global": 0.0}}));
    let cfg = SimConfig::new(0.005);
    let init = PathInit::constant(&m, &[1.0], 1, cfg.dt).unwrap();
    let paths = simulate_batch(&m, &init, 2.0, &cfg, 9, 2000, 1).unwrap();
    let terminal: Vec<f64> = paths.iter().map(|p| p.terminal().0[0]).collect();
    let t = 2.0f64;
    let law = Normal::new((-t).exp(), ((1.0 - (-2.0 * t).exp()) / 2.0).sqrt()).unwrap();
    let d = ks_statistic(terminal, |x| law.cdf(x));
    assert!(d < 1.63 / 2000f64.sqrt(), "D = {d}");
}

#[test]
fn one_step_switch_probability() {
    let m = model("0", flip(1.5, json!({"global": 1.5})));
    let cfg = SimConfig::new(0.25);
    let init = PathInit::constant(&m, &[0.0], 1, cfg.dt).unwrap();
    let n = 20_000;
    let paths = simulate_batch(&m, &init, 0.25, &cfg, 3, n, 1).unwrap();
    let switched = paths.iter().filter(|p| p.terminal().1 == 2).count() as f64 / n as f64;
    let exact = 1.0 - (-1.5f64 * 0.25).exp();
    let se = (exact * (1.0 - exact) / n as f64).sqrt();
    assert!((switched - exact).abs() < 4.0 * se, "{switched} vs {exact}");
}

#[test]
fn jump_modes_agree_with_two_state_chain() {
    // Symmetric flip at rate q: P(α(t) = 2 | α(0) = 1) = (1 − e^{−2qt}) / 2.
    let q = 2.0;
    let exact = (1.0 - (-2.0f64 * q).exp()) / 2.0;
    let n = 4000;
    for mode in [JumpMode::EulerRate, JumpMode::Thinning] {
        let m = model("0", flip(q, json!({"global": q})));
        let cfg = SimConfig::new(0.005).with_mode(mode);
        let init = PathInit::constant(&m, &[0.0], 1, cfg.dt).unwrap();
        let paths = simulate_batch(&m, &init, 1.0, &cfg, 21, n, 1).unwrap();
        let frac = paths.iter().filter(|p| p.terminal().1 == 2).count() as f64 / n as f64;
        let se = (exact * (1.0 - exact) / n as f64).sqrt();
        assert!((frac - exact).abs() < 4.0 * se + 0.01, "{mode}: {frac} vs {exact}");
    }
}

#[test]
fn jump_times_are_grid_aligned_and_alternate() {
    let m = model("0", flip(3.0, json!({"global": 3.0})));
    let cfg = SimConfig::new(0.01);
    let init = PathInit::constant(&m, &[0.0], 1, cfg.dt).unwrap();
    for p in simulate_batch(&m, &init, 2.0, &cfg, 4, 50, 1).unwrap() {
        let mut regime = 1;
        for j in &p.jumps {
            assert_eq!(j.from, regime);
            assert_ne!(j.to, j.from);
            let k = j.t / cfg.dt;
            assert!((k - k.round()).abs() < 1e-6, "jump at {}", j.t);
            regime = j.to;
        }
        assert_eq!(regime, p.terminal().1);
    }
}
