//! Experiment configs: JSON with `//` and `/* */` comments, one experiment per file.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_3, FRAC_PI_4};

use bsde_lab::quadratic::{AbCondition, QuadraticConfig};
use bsde_lab::suite::EquivalenceConfig;
use bsde_lab::terminal::TerminalSpec;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Removes comments outside string literals.
pub fn strip_comments(src: &str) -> String {
    let mut out = String::with_capacity(src.len());
    let mut chars = src.chars().peekable();
    let mut in_string = false;
    while let Some(c) = chars.next() {
        if in_string {
            out.push(c);
            match c {
                '\\' => {
                    if let Some(n) = chars.next() {
                        out.push(n);
                    }
                }
                '"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match (c, chars.peek()) {
            ('"', _) => {
                in_string = true;
                out.push(c);
            }
            ('/', Some('/')) => {
                for n in chars.by_ref() {
                    if n == '\n' {
                        out.push('\n');
                        break;
                    }
                }
            }
            ('/', Some('*')) => {
                chars.next();
                let mut prev = ' ';
                for n in chars.by_ref() {
                    if prev == '*' && n == '/' {
                        break;
                    }
                    if n == '\n' {
                        out.push('\n');
                    }
                    prev = n;
                }
            }
            _ => out.push(c),
        }
    }
    out
}

/// Parses `text` as the config of `kind`. The optional keys `experiment` and `instance` must
/// match the subcommand; every other key must belong to the config type.
pub fn parse<T: DeserializeOwned>(text: &str, kind: &str, instance: Option<&str>) -> Result<T, String> {
    let mut value: Value = serde_json::from_str(&strip_comments(text)).map_err(|e| format!("config is not valid JSON: {e}"))?;
    let obj = value.as_object_mut().ok_or("config must be a JSON object")?;
    if let Some(e) = obj.remove("experiment") {
        if e.as_str() != Some(kind) {
            return Err(format!("config is for experiment {e}, but the subcommand runs \"{kind}\""));
        }
    }
    if let Some(expected) = instance {
        if let Some(i) = obj.remove("instance") {
            if i.as_str() != Some(expected) {
                return Err(format!("config is for instance {i}, but the subcommand runs \"{expected}\""));
            }
        }
    }
    serde_json::from_value(value).map_err(|e| format!("invalid {kind} config: {e}"))
}

fn default_seed() -> u64 {
    0
}
fn one() -> f64 {
    1.0
}
fn two() -> f64 {
    2.0
}
fn three() -> usize {
    3
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExponentialExp {
    #[serde(default = "scalar_field")]
    pub field: String,
    #[serde(default = "one")]
    pub horizon: f64,
    #[serde(default = "steps100")]
    pub steps: usize,
    #[serde(default = "paths10k")]
    pub paths: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "one_usize")]
    pub store_every: usize,
    #[serde(default = "yes")]
    pub inverse: bool,
    /// `E[min(|S_T|^p, L)]` ladder, reported when non-empty.
    #[serde(default)]
    pub truncation_levels: Vec<f64>,
    #[serde(default = "two")]
    pub truncation_p: f64,
}

fn scalar_field() -> String {
    "scalar-0.5".into()
}
fn steps100() -> usize {
    100
}
fn paths10k() -> usize {
    10_000
}
fn one_usize() -> usize {
    1
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReverseHolderExp {
    #[serde(default = "scalar_field")]
    pub field: String,
    #[serde(default = "one")]
    pub horizon: f64,
    #[serde(default = "steps50")]
    pub steps: usize,
    #[serde(default = "paths20k")]
    pub paths: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "two")]
    pub p: f64,
    #[serde(default = "regression")]
    pub estimator: String,
    #[serde(default = "three")]
    pub degree: usize,
    #[serde(default = "outer200")]
    pub outer: usize,
    #[serde(default = "inner2k")]
    pub inner: usize,
    /// Also estimate the running-sup form and compare with Doob's factor.
    #[serde(default)]
    pub doob: bool,
}

fn steps50() -> usize {
    50
}
fn paths20k() -> usize {
    20_000
}
fn regression() -> String {
    "regression".into()
}
fn outer200() -> usize {
    200
}
fn inner2k() -> usize {
    2000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSpec {
    /// Built-in field with the same `n` and `d`.
    pub field: String,
    #[serde(default = "one")]
    pub scale: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearExp {
    #[serde(default = "triangular")]
    pub field: String,
    /// `auto`, `representation`, `regression` or a structural solver name.
    #[serde(default = "auto")]
    pub method: String,
    /// Expected structure of the field: `generic`, `triangular`, `left-outer`, `right-outer`.
    #[serde(default)]
    pub structure: Option<String>,
    #[serde(default)]
    pub perturbation: Option<PerturbationSpec>,
    #[serde(default = "bounded_terminal")]
    pub terminal: TerminalSpec,
    /// Constant inhomogeneity.
    #[serde(default)]
    pub beta: Option<Vec<f64>>,
    #[serde(default = "one")]
    pub horizon: f64,
    #[serde(default = "steps50")]
    pub steps: usize,
    #[serde(default = "paths20k")]
    pub paths: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub solver: bsde_lab::linear::SolverConfig,
    #[serde(default = "two")]
    pub q: f64,
    /// Also solve by plain regression and compare `Y_0`.
    #[serde(default)]
    pub compare_regression: bool,
    /// Terminal conditions over which the solution-operator ratio is maximized.
    #[serde(default)]
    pub operator_family: Vec<TerminalSpec>,
}

fn triangular() -> String {
    "triangular-3".into()
}
fn auto() -> String {
    "auto".into()
}
fn bounded_terminal() -> TerminalSpec {
    TerminalSpec::Bounded { amplitude: 1.0, shift: 0.0 }
}

/// Driver assembled from parameters: `g(y) = G y + c` plus the quadratic part of its class.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomDriverSpec {
    /// `quadratic_linear` or `unidirectional`.
    pub class: String,
    pub n: usize,
    #[serde(default = "one_usize")]
    pub d: usize,
    /// Row-major `n x n`; zero when omitted.
    #[serde(default)]
    pub g_matrix: Option<Vec<f64>>,
    #[serde(default)]
    pub g_constant: Option<Vec<f64>>,
    /// Quadratic-linear weights.
    #[serde(default)]
    pub b: Option<Vec<f64>>,
    /// Unidirectional direction.
    #[serde(default)]
    pub a: Option<Vec<f64>>,
    /// `half_square` (`|z|^2 / 2`) or `half_square_first_row` (`|z^1|^2 / 2`).
    #[serde(default)]
    pub h: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LyapunovSpec {
    /// `h(y) = |y|^2` with this constant `k` and radius `c`.
    pub k: f64,
    pub c: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticExp {
    #[serde(default = "cole_hopf")]
    pub driver: String,
    #[serde(default)]
    pub custom: Option<CustomDriverSpec>,
    /// Defaults to the built-in instance's terminal condition.
    #[serde(default)]
    pub terminal: Option<TerminalSpec>,
    #[serde(default = "one")]
    pub horizon: f64,
    #[serde(default = "steps20")]
    pub steps: usize,
    #[serde(default = "paths20k")]
    pub paths: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub solver: QuadraticConfig,
    #[serde(default = "yes")]
    pub uniqueness: bool,
    #[serde(default)]
    pub ab: Option<AbCondition>,
    #[serde(default)]
    pub lyapunov: Option<LyapunovSpec>,
    /// Shifts `xi + eps e_1` for the linearized-difference check.
    #[serde(default)]
    pub stability_eps: Vec<f64>,
    /// Samples for the pointwise checks.
    #[serde(default = "samples2k")]
    pub samples: usize,
}

fn cole_hopf() -> String {
    "cole-hopf-1d".into()
}
fn steps20() -> usize {
    20
}
fn samples2k() -> usize {
    2000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceSpec {
    #[serde(default = "one")]
    pub horizon: f64,
    #[serde(default = "ladder")]
    pub steps: Vec<usize>,
    #[serde(default = "paths10k")]
    pub paths: usize,
}

fn ladder() -> Vec<usize> {
    vec![200, 400, 800]
}

impl Default for ConvergenceSpec {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            steps: ladder(),
            paths: paths10k(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmeryExp {
    #[serde(default = "half_pi")]
    pub level: f64,
    /// Horizon of the time-changed clock.
    #[serde(default = "sixty")]
    pub effective_horizon: f64,
    #[serde(default = "steps800")]
    pub steps: usize,
    #[serde(default = "paths20k")]
    pub paths: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "ten")]
    pub store_every: usize,
    #[serde(default)]
    pub convergence: Option<ConvergenceSpec>,
}

fn half_pi() -> f64 {
    FRAC_PI_2
}
fn sixty() -> f64 {
    60.0
}
fn steps800() -> usize {
    800
}
fn ten() -> usize {
    10
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExitTimeExp {
    #[serde(default = "exit_levels")]
    pub b: Vec<f64>,
    #[serde(default = "paths100k")]
    pub paths: usize,
    #[serde(default = "twenty")]
    pub horizon: f64,
    /// Time step as a fraction of the horizon.
    #[serde(default = "dt_fraction")]
    pub dt_fraction: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn exit_levels() -> Vec<f64> {
    vec![FRAC_PI_4, FRAC_PI_3]
}
fn paths100k() -> usize {
    100_000
}
fn twenty() -> f64 {
    20.0
}
fn dt_fraction() -> f64 {
    1e-4
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NonexistenceExp {
    #[serde(default = "one")]
    pub horizon: f64,
    /// Length of the default level sequence (`cos b_k = (k + 1) / 2^{k+1}`).
    #[serde(default = "levels12")]
    pub levels: usize,
    /// Explicit levels instead of the default sequence.
    #[serde(default)]
    pub b: Option<Vec<f64>>,
    #[serde(default = "eight")]
    pub j_max: usize,
    #[serde(default = "four")]
    pub simulate_up_to: usize,
    #[serde(default = "paths20k")]
    pub paths: usize,
    /// Truncation of the exit clock in the simulation.
    #[serde(default = "twenty")]
    pub exit_horizon: f64,
    #[serde(default = "dt_fraction")]
    pub dt_fraction: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn levels12() -> usize {
    12
}
fn eight() -> usize {
    8
}
fn four() -> usize {
    4
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OracleSource {
    /// Random coefficients, terminal values and inhomogeneity.
    Random {
        #[serde(default = "six")]
        steps: usize,
        #[serde(default = "two_usize")]
        n: usize,
        #[serde(default = "one_usize")]
        d: usize,
        #[serde(default = "scale")]
        scale: f64,
        #[serde(default)]
        lower_triangular: bool,
    },
    /// A built-in coefficient field evaluated on the tree.
    Field {
        name: String,
        #[serde(default = "six")]
        steps: usize,
        #[serde(default = "one")]
        horizon: f64,
    },
    /// `n = d = 1`, constant coefficient.
    Constant {
        a: f64,
        #[serde(default = "one_usize")]
        steps: usize,
        dt: f64,
    },
}

fn six() -> usize {
    6
}
fn two_usize() -> usize {
    2
}
fn scale() -> f64 {
    0.8
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleExp {
    #[serde(default = "random_source")]
    pub source: OracleSource,
    /// Terminal condition for field and constant sources.
    #[serde(default = "bounded_terminal")]
    pub terminal: TerminalSpec,
    #[serde(default = "p_list")]
    pub p: Vec<f64>,
    /// Conditioning level of the duality check; the middle level by default.
    #[serde(default)]
    pub level: Option<usize>,
    #[serde(default = "eight")]
    pub random_tests: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn random_source() -> OracleSource {
    OracleSource::Random {
        steps: 6,
        n: 2,
        d: 1,
        scale: 0.8,
        lower_triangular: false,
    }
}
fn p_list() -> Vec<f64> {
    vec![1.0, 1.5, 2.0, 3.0]
}

pub type SuiteExp = EquivalenceConfig;

/// Seed override shared by every config.
pub trait Seeded {
    fn set_seed(&mut self, seed: u64);
}

macro_rules! seeded {
    ($($t:ty),*) => {
        $(impl Seeded for $t {
            fn set_seed(&mut self, seed: u64) {
                self.seed = seed;
            }
        })*
    };
}

seeded!(ExponentialExp, ReverseHolderExp, LinearExp, QuadraticExp, EmeryExp, ExitTimeExp, NonexistenceExp, OracleExp, SuiteExp);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_are_stripped_outside_strings() {
        let src = "{\n // note\n \"field\": \"a//b\", /* x\n y */ \"steps\": 3 }";
        let v: Value = serde_json::from_str(&strip_comments(src)).unwrap();
        assert_eq!(v["field"], "a//b");
        assert_eq!(v["steps"], 3);
    }

    #[test]
    fn unknown_keys_and_wrong_kind_rejected() {
        let e = parse::<ExponentialExp>(r#"{"feild": "zero"}"#, "exponential", None).unwrap_err();
        assert!(e.contains("feild"), "{e}");
        let e = parse::<ExponentialExp>(r#"{"experiment": "linear"}"#, "exponential", None).unwrap_err();
        assert!(e.contains("linear"));
        let c = parse::<ExponentialExp>(r#"{"experiment": "exponential", "steps": 7}"#, "exponential", None).unwrap();
        assert_eq!(c.steps, 7);
        assert_eq!(c.field, "scalar-0.5");
    }

    #[test]
    fn instance_key_checked() {
        assert!(parse::<EmeryExp>(r#"{"instance": "exit-time"}"#, "counterexample", Some("emery")).is_err());
        assert!(parse::<EmeryExp>(r#"{"instance": "emery"}"#, "counterexample", Some("emery")).is_ok());
    }
}
