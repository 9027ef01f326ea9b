use thiserror::Error;

/// Errors surfaced by every module of the library.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty ensemble")]
    Empty,

    #[error("singular matrix at {0}")]
    Singular(String),

    #[error(
        "representation invalid: S not a martingale at tolerance (defect {defect:.4e} > tolerance {tolerance:.4e})"
    )]
    RepresentationInvalid { defect: f64, tolerance: f64 },

    #[error("structure mismatch: solver '{solver}' requires a {required} coefficient field, got {found}")]
    StructureMismatch {
        solver: String,
        required: String,
        found: String,
    },

    #[error("perturbation too large (not sliceable at this scale): residual {residual:.3e} after {iterations} iterations")]
    NotSliceable { iterations: usize, residual: f64 },

    #[error("no self-consistent truncation level found (largest level {last_level}, truncated argument reached {max_argument:.4})")]
    NoTruncationLevel { last_level: f64, max_argument: f64 },

    #[error("Picard iteration diverged at time step {step} (residual {residual:.3e})")]
    PicardDivergence { step: usize, residual: f64 },

    #[error("unknown {kind} '{name}'{hint}")]
    Unknown {
        kind: &'static str,
        name: String,
        hint: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;

impl LabError {
    /// Builds an `Unknown` error with "did you mean" suggestions drawn from `known`.
    pub fn unknown(kind: &'static str, name: &str, known: &[&str]) -> Self {
        let mut close: Vec<&str> = known
            .iter()
            .copied()
            .filter(|k| edit_distance(k, name) <= 3 || k.contains(name) || name.contains(k))
            .collect();
        close.sort();
        let hint = if close.is_empty() {
            format!(" (known: {})", known.join(", "))
        } else {
            format!(" (did you mean: {}?)", close.join(", "))
        };
        LabError::Unknown {
            kind,
            name: name.to_string(),
            hint,
        }
    }
}

fn edit_distance(a: &str, b: &str) -> usize {
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.chars().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != *cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suggestions_pick_near_names() {
        let e = LabError::unknown("instance", "emry", &["emery", "nonexistence", "cole-hopf-1d"]);
        let msg = e.to_string();
        assert!(msg.contains("did you mean: emery"), "{msg}");
    }

    #[test]
    fn edit_distance_basics() {
        assert_eq!(edit_distance("abc", "abc"), 0);
        assert_eq!(edit_distance("abc", "abd"), 1);
        assert_eq!(edit_distance("", "ab"), 2);
    }
}
