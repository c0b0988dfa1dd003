//! Fixtures shared by the benchmarks.

use switchlab_core::model::{builtin_model, BuiltinName, BuiltinParams};
use switchlab_core::{ModelSpec, RegimeSwitchingModel};

/// The first built-in example with its default coefficients.
pub fn ex1() -> RegimeSwitchingModel {
    builtin_model(BuiltinName::Ex1, &BuiltinParams::default()).expect("builtin model")
}

/// Scalar Brownian motion with a state-dependent birth-death kernel truncated at `k`.
pub fn state_kernel(k: usize) -> RegimeSwitchingModel {
    let spec = serde_json::json!({
        "name": "bench", "n": 1, "r": 1.0,
        "drift": [{"regimes": "*", "expr": ["0"]}],
        "diffusion": [{"regimes": "*", "expr": ["1 + 0.1*i"]}],
        "kernel": {"form": "banded-birth-death", "entries": [
            {"from": "1", "to": "2", "rate": "1"},
            {"from": "2..", "to": "i-1", "rate": "1 + 2*abs(SEG0)"},
            {"from": "2..", "to": "i+1", "rate": "1 + abs(SEG0)"}
        ], "bound": "none", "truncation": k}
    });
    serde_json::from_value::<ModelSpec>(spec).expect("spec").build().expect("model")
}
