//! Monte Carlo estimators of the bmo, bmo^{1/2}, S^p, L^{2,q} and L^{1,q} norms.
//!
//! Suprema over stopping times are replaced by maxima over grid times, and essential
//! suprema over paths by maxima over fitted conditional expectations, so bmo-type values
//! are grid-time lower estimates.

use serde::{Deserialize, Serialize};

use crate::brownian::PathEnsemble;
use crate::error::{LabError, Result};
use crate::grid::TimeGrid;
use crate::regression::ConditionalProjector;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NormKind {
    /// `sup_tau || E_tau int_tau^T |Z|^2 dt ||_inf^{1/2}`
    Bmo,
    /// `sup_tau || E_tau int_tau^T |beta| dt ||_inf`
    BmoHalf,
    /// `|| sup_t |Y_t| ||_{L^p}`; `p = inf` allowed.
    SupP { p: f64 },
    /// `E[(int |Z|^2 dt)^{q/2}]^{1/q}`
    L2q { q: f64 },
    /// `E[(int |beta| dt)^q]^{1/q}`
    L1q { q: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormEstimate {
    pub kind: NormKind,
    pub value: f64,
    pub std_error: f64,
    pub grid_times_used: Vec<f64>,
}

/// Path ensemble of an `R^width`-valued process on a grid, `paths x nodes x width`.
///
/// `nodes` is `K` for processes living on intervals (Z, beta) and `K + 1` for processes
/// observed at every node (Y).
#[derive(Debug, Clone, Copy)]
pub struct ProcessView<'a> {
    pub grid: &'a TimeGrid,
    pub paths: usize,
    pub width: usize,
    pub values: &'a [f64],
}

impl<'a> ProcessView<'a> {
    pub fn new(grid: &'a TimeGrid, paths: usize, width: usize, values: &'a [f64]) -> Result<Self> {
        if paths == 0 || width == 0 || values.is_empty() {
            return Err(LabError::Empty);
        }
        let nodes = values.len() / (paths * width);
        if nodes * paths * width != values.len() || !(nodes == grid.steps() || nodes == grid.steps() + 1) {
            return Err(LabError::Shape(format!(
                "process buffer of {} values does not fit {paths} paths x {} steps x {width}",
                values.len(),
                grid.steps()
            )));
        }
        Ok(Self { grid, paths, width, values })
    }

    pub fn nodes(&self) -> usize {
        self.values.len() / (self.paths * self.width)
    }

    pub fn at(&self, m: usize, k: usize) -> &[f64] {
        let base = (m * self.nodes() + k) * self.width;
        &self.values[base..base + self.width]
    }

    fn abs(&self, m: usize, k: usize) -> f64 {
        self.at(m, k).iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// How conditional expectations are formed for the bmo kinds.
#[derive(Debug, Clone, Copy)]
pub enum Conditioning<'a> {
    /// Regression on the Brownian state at each grid time (optionally split by regime labels).
    Regression {
        paths: &'a PathEnsemble,
        degree: usize,
        regimes: Option<&'a [usize]>,
    },
    /// Plain averages: exact for deterministic processes.
    Unconditional,
}

/// Grid-time evaluation stride for the bmo kinds.
pub const DEFAULT_STRIDE: usize = 1;

pub fn estimate_norm(kind: NormKind, process: &ProcessView<'_>, cond: Conditioning<'_>) -> Result<NormEstimate> {
    estimate_norm_strided(kind, process, cond, DEFAULT_STRIDE)
}

pub fn estimate_norm_strided(
    kind: NormKind,
    process: &ProcessView<'_>,
    cond: Conditioning<'_>,
    stride: usize,
) -> Result<NormEstimate> {
    let exponent = match kind {
        NormKind::SupP { p } => Some(p),
        NormKind::L2q { q } | NormKind::L1q { q } => Some(q),
        _ => None,
    };
    if let Some(p) = exponent {
        if p.is_nan() || p < 1.0 {
            return Err(LabError::InvalidParameter(format!("norm exponent must be >= 1, got {p}")));
        }
    }
    let m_paths = process.paths;
    let k_steps = process.grid.steps();
    let grid = process.grid;
    match kind {
        NormKind::Bmo | NormKind::BmoHalf => {
            let square = matches!(kind, NormKind::Bmo);
            let interval_nodes = process.nodes().min(k_steps);
            // Remainders R_k = sum_{j >= k} |Z_j|^2 dt_j (or |beta_j| dt_j), per path.
            let mut rem = vec![0.0; m_paths * (k_steps + 1)];
            for m in 0..m_paths {
                for j in (0..k_steps).rev() {
                    let a = if j < interval_nodes { process.abs(m, j) } else { 0.0 };
                    let inc = if square { a * a } else { a } * grid.dt(j);
                    rem[m * (k_steps + 1) + j] = rem[m * (k_steps + 1) + j + 1] + inc;
                }
            }
            let stride = stride.max(1);
            let mut best = 0.0f64;
            let mut best_se = 0.0;
            let mut used = Vec::new();
            for k in (0..k_steps).step_by(stride) {
                used.push(grid.t(k));
                let target: Vec<f64> = (0..m_paths).map(|m| rem[m * (k_steps + 1) + k]).collect();
                let (val, se) = conditional_sup(&target, k, cond)?;
                if val > best {
                    best = val;
                    best_se = se;
                }
            }
            let (value, std_error) = if square {
                let v = best.max(0.0).sqrt();
                (v, if v > 0.0 { best_se / (2.0 * v) } else { 0.0 })
            } else {
                (best, best_se)
            };
            Ok(NormEstimate {
                kind,
                value,
                std_error,
                grid_times_used: used,
            })
        }
        NormKind::SupP { p } => {
            let nodes = process.nodes();
            let per_path: Vec<f64> = (0..m_paths)
                .map(|m| (0..nodes).map(|k| process.abs(m, k)).fold(0.0, f64::max))
                .collect();
            let (value, std_error) = lp_of_samples(&per_path, p);
            Ok(NormEstimate {
                kind,
                value,
                std_error,
                grid_times_used: grid.nodes()[..nodes].to_vec(),
            })
        }
        NormKind::L2q { q } | NormKind::L1q { q } => {
            let square = matches!(kind, NormKind::L2q { .. });
            let nodes = process.nodes().min(k_steps);
            let per_path: Vec<f64> = (0..m_paths)
                .map(|m| {
                    let s: f64 = (0..nodes)
                        .map(|k| {
                            let a = process.abs(m, k);
                            (if square { a * a } else { a }) * grid.dt(k)
                        })
                        .sum();
                    if square {
                        s.sqrt()
                    } else {
                        s
                    }
                })
                .collect();
            let (value, std_error) = lp_of_samples(&per_path, q);
            Ok(NormEstimate {
                kind,
                value,
                std_error,
                grid_times_used: grid.nodes()[..nodes].to_vec(),
            })
        }
    }
}

/// Max over paths of the fitted `E_k[target]`, with the standard error at the maximizer.
fn conditional_sup(target: &[f64], k: usize, cond: Conditioning<'_>) -> Result<(f64, f64)> {
    let m_paths = target.len();
    match cond {
        Conditioning::Unconditional => Ok(mean_se(target)),
        Conditioning::Regression { paths, degree, regimes } => {
            if paths.paths() != m_paths {
                return Err(LabError::Shape("conditioning ensemble has a different path count".into()));
            }
            let d = paths.dim();
            let mut feats = Vec::with_capacity(m_paths * d);
            for m in 0..m_paths {
                feats.extend_from_slice(paths.state(m, k));
            }
            let labels: Option<Vec<usize>> = regimes.map(|r| {
                let stride = r.len() / m_paths;
                (0..m_paths).map(|m| r[m * stride + k.min(stride - 1)]).collect()
            });
            let proj = ConditionalProjector::new(&feats, d, labels.as_deref(), degree)?;
            let fit = proj.fit_column(target);
            let (arg, val) = fit
                .fitted
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
            Ok((val, proj.prediction_se(&fit, arg)))
        }
    }
}

/// Sample mean and its standard error.
pub fn mean_se(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (mean, 0.0);
    }
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// `L^p` norm of nonnegative samples, `p = inf` meaning the sample maximum.
///
/// For finite `p` the error bar is the delta-method transform of the mean's standard
/// error; for `p = inf` it is the gap between the two largest order statistics.
pub fn lp_of_samples(x: &[f64], p: f64) -> (f64, f64) {
    if p.is_infinite() {
        let mut top = [0.0f64; 2];
        for &v in x {
            if v > top[0] {
                top[1] = top[0];
                top[0] = v;
            } else if v > top[1] {
                top[1] = v;
            }
        }
        return (top[0], top[0] - top[1]);
    }
    let powered: Vec<f64> = x.iter().map(|v| v.powf(p)).collect();
    let (mean, se) = mean_se(&powered);
    let value = mean.powf(1.0 / p);
    let std_error = if mean > 0.0 { se * value / (p * mean) } else { 0.0 };
    (value, std_error)
}
