use crate::model::SwitchingProblem;

/// Two-mode, one-dimensional problem with a symmetric constant-form cost.
pub fn problem_1d(drift: &str, vol: &str, psi: [&str; 2], cost: &str, horizon: f64) -> SwitchingProblem {
    SwitchingProblem::from_toml_str(&format!(
        r#"
name = "test"
dimension = 1
modes = 2
horizon = {horizon}
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
