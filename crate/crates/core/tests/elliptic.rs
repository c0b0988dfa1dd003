//! Coupled elliptic solver: convergence, truncation and iteration behaviour.

use proptest::prelude::*;
use serde_json::json;
use switchlab_core::elliptic::{DEFAULT_MAX_ITER, DEFAULT_TOL};
use switchlab_core::{
    mean_exit_time, DomainInterval, EllipticSpec, EllipticSystem, Expr, ModelSpec, RegimeSwitchingModel,
};

fn birth_death(sigma: &str, up: f64, down: f64, truncation: usize) -> RegimeSwitchingModel {
    serde_json::from_value::<ModelSpec>(json!({
        "name": "bd", "n": 1, "r": 1.0,
        "drift": [{"regimes": "*", "expr": ["0"]}],
        "diffusion": [{"regimes": "*", "expr": [sigma]}],
        "kernel": {"form": "banded-birth-death", "entries": [
            {"from": "1", "to": "2", "rate": format!("{up:?}")},
            {"from": "2..", "to": "i+1", "rate": format!("{up:?} + abs(SEG0)")},
            {"from": "2..", "to": "i-1", "rate": format!("{down:?} + 2*abs(SEG0)")}
        ], "bound": "none", "truncation": truncation}
    }))
    .unwrap()
    .build()
    .unwrap()
}

#[test]
fn exit_time_converges_at_second_order_in_h() {
    let m = birth_death("1 + 0.1*i", 1.0, 1.0, 4);
    let at = |h: f64| mean_exit_time(&m, 0.0, 1.0, h, 4).unwrap().value_at(0.5, 2).unwrap();
    let (a, b, c) = (at(0.1), at(0.05), at(0.025));
    let order = ((a - b) / (b - c)).abs().log2();
    assert!(order > 1.8 && order < 2.2, "observed order {order}");
}

#[test]
fn truncation_level_barely_matters_when_the_tail_drifts_down() {
    let value = |k: usize| {
        let m = birth_death("1 + 0.1*i", 1.0, 1.0, k);
        mean_exit_time(&m, 0.0, 1.0, 0.02, k).unwrap().value_at(0.5, 1).unwrap()
    };
    let (a, b) = (value(8), value(9));
    assert!((a - b).abs() < 1e-6, "K=8: {a}, K=9: {b}");
}

#[test]
fn brownian_exit_from_two_intervals() {
    // On (−2,−1) ∪ (1,2) the exit time of standard Brownian motion is (x − a)(b − x).
    let m = birth_death("1", 0.0, 0.0, 1);
    let spec = EllipticSpec::new(
        vec![DomainInterval::with_values(-2.0, -1.0, 0.0, 0.0), DomainInterval::with_values(1.0, 2.0, 0.0, 0.0)],
        0.01,
        1,
        Expr::num(-1.0),
    );
    let sol = EllipticSystem::assemble(&m, &spec).unwrap().solve_fixed_point(DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
    for x in [-1.5, -1.25, 1.3, 1.5] {
        let a = if x < 0.0 { -2.0 } else { 1.0 };
        assert!((sol.value_at(x, 1).unwrap() - (x - a) * (a + 1.0 - x)).abs() < 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn iteration_is_monotone_and_respects_the_maximum_principle(
        s in 0.3f64..2.0,
        up in 0.1f64..3.0,
        down in 0.1f64..3.0,
        left in -1.0f64..1.0,
        right in -1.0f64..1.0,
    ) {
        let m = birth_death(&format!("{s:?} + 0.2*i"), up, down, 4);
        let spec = EllipticSpec::new(vec![DomainInterval::with_values(-1.0, 1.0, left, right)], 0.05, 4, Expr::num(0.0));
        let sol = EllipticSystem::assemble(&m, &spec).unwrap().solve_fixed_point(1e-12, DEFAULT_MAX_ITER).unwrap();
        let (lo, hi) = (left.min(right), left.max(right));
        for u in sol.u.iter().flatten() {
            prop_assert!(*u >= lo - 1e-9 && *u <= hi + 1e-9);
        }
        let d = &sol.trace.deltas;
        for w in d.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-9) + 1e-15, "deltas {:?}", d);
        }
    }
}
