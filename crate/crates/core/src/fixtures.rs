//! The shipped problem corpus, embedded so tests and the browser demo share it
//! with the `problems/` directory.

use crate::model::SwitchingProblem;

pub const BENCHMARK: &str = include_str!("../../../problems/benchmark.toml");
pub const IDENTICAL_MODES: &str = include_str!("../../../problems/identical_modes.toml");
pub const DETERMINISTIC: &str = include_str!("../../../problems/deterministic.toml");
pub const GBM_POWER_PLANT: &str = include_str!("../../../problems/gbm_power_plant.toml");

fn load(text: &str) -> SwitchingProblem {
    SwitchingProblem::from_toml_str(text).expect("shipped problem files are valid")
}

pub fn benchmark() -> SwitchingProblem {
    load(BENCHMARK)
}

pub fn identical_modes() -> SwitchingProblem {
    load(IDENTICAL_MODES)
}

pub fn deterministic() -> SwitchingProblem {
    load(DETERMINISTIC)
}

pub fn gbm_power_plant() -> SwitchingProblem {
    load(GBM_POWER_PLANT)
}

/// Benchmark with every switching cost multiplied by `factor`.
pub fn benchmark_scaled_costs(factor: f64) -> SwitchingProblem {
    let text = BENCHMARK.replace("\"0.1\"", &format!("\"{}\"", 0.1 * factor));
    let mut p = load(&text);
    p.alpha *= factor;
    p
}
