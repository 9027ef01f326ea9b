//! Terminal functionals `xi` of the discretized Brownian path, as used by configs and instances.

use serde::{Deserialize, Serialize};

use crate::brownian::{PathEnsemble, PathState};
use crate::error::{LabError, Result};
use crate::linear::terminal_values;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TerminalSpec {
    /// `xi^i = values[i]`
    Constant { values: Vec<f64> },
    /// `xi^i = scale B_T^{i mod d} + shift`
    Brownian {
        #[serde(default = "one")]
        scale: f64,
        #[serde(default)]
        shift: f64,
    },
    /// `xi^i = amplitude sin(B_T^{i mod d} + i) + shift`; bounded by `|amplitude| + |shift|`.
    Bounded {
        #[serde(default = "one")]
        amplitude: f64,
        #[serde(default)]
        shift: f64,
    },
    /// `xi^i = amplitude tanh(max_t |B_t| - 1) + shift`; path dependent, bounded.
    RunningMax {
        #[serde(default = "one")]
        amplitude: f64,
        #[serde(default)]
        shift: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl TerminalSpec {
    pub fn eval(&self, st: &PathState<'_>, out: &mut [f64]) {
        let d = st.x.len();
        for (i, o) in out.iter_mut().enumerate() {
            *o = match self {
                TerminalSpec::Constant { values } => values[i],
                TerminalSpec::Brownian { scale, shift } => scale * st.x[i % d] + shift,
                TerminalSpec::Bounded { amplitude, shift } => amplitude * (st.x[i % d] + i as f64).sin() + shift,
                TerminalSpec::RunningMax { amplitude, shift } => amplitude * (st.max_abs - 1.0).tanh() + shift,
            };
        }
    }

    /// `||xi||_inf` when it is finite.
    pub fn sup_bound(&self) -> Option<f64> {
        match self {
            TerminalSpec::Constant { values } => Some(values.iter().map(|v| v * v).sum::<f64>().sqrt()),
            TerminalSpec::Brownian { scale, shift } => (*scale == 0.0).then(|| shift.abs()),
            TerminalSpec::Bounded { amplitude, shift } | TerminalSpec::RunningMax { amplitude, shift } => {
                Some(amplitude.abs() + shift.abs())
            }
        }
    }

    /// Same functional translated by `shift` in every component.
    pub fn shifted(&self, by: f64) -> TerminalSpec {
        let mut s = self.clone();
        match &mut s {
            TerminalSpec::Constant { values } => values.iter_mut().for_each(|v| *v += by),
            TerminalSpec::Brownian { shift, .. } | TerminalSpec::Bounded { shift, .. } | TerminalSpec::RunningMax { shift, .. } => {
                *shift += by
            }
        }
        s
    }

    /// `paths x n` terminal values.
    pub fn sample(&self, paths: &PathEnsemble, n: usize) -> Result<Vec<f64>> {
        if let TerminalSpec::Constant { values } = self {
            if values.len() != n {
                return Err(LabError::Shape(format!("constant terminal has {} components, expected {n}", values.len())));
            }
        }
        Ok(terminal_values(paths, n, |st, o| self.eval(st, o)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::brownian::generate_brownian;
    use crate::grid::TimeGrid;

    #[test]
    fn parses_and_evaluates() {
        let s: TerminalSpec = serde_json::from_str(r#"{"kind": "brownian", "scale": 2.0}"#).unwrap();
        let p = generate_brownian(&TimeGrid::uniform(1.0, 4).unwrap(), 1, 3, 1).unwrap();
        let xi = s.sample(&p, 2).unwrap();
        assert_eq!(xi[0], 2.0 * p.state(0, 4)[0]);
        assert_eq!(xi[0], xi[1]);
        assert!(serde_json::from_str::<TerminalSpec>(r#"{"kind": "brownian", "scal": 2.0}"#).is_err());
        let c = TerminalSpec::Constant { values: vec![1.0] };
        assert!(c.sample(&p, 2).is_err());
        assert_eq!(c.shifted(0.5), TerminalSpec::Constant { values: vec![1.5] });
        assert_eq!(TerminalSpec::Bounded { amplitude: 0.5, shift: 0.1 }.sup_bound(), Some(0.6));
    }
}
