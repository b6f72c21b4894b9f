#![allow(dead_code)]

use switchbox::SwitchingProblem;
use switchbox::tree_oracle::GoldenRecord;

/// Two modes on a Brownian-type state in one dimension.
pub fn two_mode(drift: &str, vol: &str, psi: [&str; 2], cost: &str) -> SwitchingProblem {
    SwitchingProblem::from_toml_str(&format!(
        r#"
name = "test"
dimension = 1
modes = 2
horizon = 1.0
alpha = 0.01
x0 = [0.0]
psi = ["{}", "{}"]
[diffusion]
drift = ["{drift}"]
volatility = [["{vol}"]]
[switching_cost]
"1->2" = "{cost}"
"2->1" = "{cost}"
[growth]
gamma = 1.0
[validation]
box = [[-3.0, 3.0]]
"#,
        psi[0], psi[1]
    ))
    .unwrap()
}

pub fn golden_benchmark() -> GoldenRecord {
    GoldenRecord::parse(include_str!("../../../../golden/benchmark_oracle.txt")).unwrap()
}
