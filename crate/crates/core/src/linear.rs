//! Monte Carlo solvers for linear systems
//! `Y = xi + int (alpha Y + A Z + beta) dt - int Z dB` on a fixed path ensemble.
//!
//! Every solver uses the same conditional-expectation engine: one least-squares projection
//! per time step onto polynomials of `B_{t_k}` (split by regime for path-dependent fields).

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::brownian::{fmt17, PathEnsemble, PathState};
use crate::error::{LabError, Result};
use crate::exponential::{integrate, martingale_defect, ExponentialEnsemble, IntegrationOptions, Scheme};
use crate::field::{CoefficientField, Structure};
use crate::linalg::matvec;
use crate::norms::{estimate_norm, lp_of_samples, mean_se, Conditioning, NormKind, ProcessView};
use crate::regression::ConditionalProjector;
use crate::tensor::contract_into;

/// Inputs of a linear equation, evaluated on a particular path ensemble.
#[derive(Clone)]
pub struct LinearProblem {
    pub n: usize,
    pub a: Arc<dyn CoefficientField>,
    /// Perturbation of the coefficient, handled by the Picard solver (or by plain regression).
    pub delta_a: Option<Arc<dyn CoefficientField>>,
    /// Terminal values, `paths x n`.
    pub xi: Vec<f64>,
    /// Inhomogeneity, `paths x K x n`.
    pub beta: Option<Vec<f64>>,
    /// Zeroth-order coefficient, `paths x K x n^2`; multiplies `E_k[Y_{k+1}]`.
    pub alpha: Option<Vec<f64>>,
}

impl std::fmt::Debug for LinearProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LinearProblem")
            .field("n", &self.n)
            .field("a", &self.a.name())
            .field("delta_a", &self.delta_a.as_ref().map(|x| x.name()))
            .field("has_beta", &self.beta.is_some())
            .field("has_alpha", &self.alpha.is_some())
            .finish()
    }
}

/// Evaluates a terminal functional on every path.
pub fn terminal_values(paths: &PathEnsemble, n: usize, f: impl Fn(&PathState<'_>, &mut [f64]) + Sync) -> Vec<f64> {
    let k = paths.steps();
    let mut out = vec![0.0; paths.paths() * n];
    out.par_chunks_mut(n).enumerate().for_each(|(m, o)| f(&paths.path_state(m, k), o));
    out
}

/// Evaluates an adapted functional at nodes `0..K` of every path (`paths x K x width`).
pub fn adapted_values(paths: &PathEnsemble, width: usize, f: impl Fn(&PathState<'_>, &mut [f64]) + Sync) -> Vec<f64> {
    let k = paths.steps();
    let mut out = vec![0.0; paths.paths() * k * width];
    out.par_chunks_mut(k * width).enumerate().for_each(|(m, o)| {
        for j in 0..k {
            f(&paths.path_state(m, j), &mut o[j * width..(j + 1) * width]);
        }
    });
    out
}

impl LinearProblem {
    pub fn new(a: Arc<dyn CoefficientField>, xi: Vec<f64>) -> Self {
        Self {
            n: a.n(),
            a,
            delta_a: None,
            xi,
            beta: None,
            alpha: None,
        }
    }

    pub fn with_beta(mut self, beta: Vec<f64>) -> Self {
        self.beta = Some(beta);
        self
    }

    pub fn with_alpha(mut self, alpha: Vec<f64>) -> Self {
        self.alpha = Some(alpha);
        self
    }

    pub fn with_perturbation(mut self, delta_a: Arc<dyn CoefficientField>) -> Self {
        self.delta_a = Some(delta_a);
        self
    }

    fn validate(&self, paths: &PathEnsemble) -> Result<()> {
        let (m, k, n, d) = (paths.paths(), paths.steps(), self.n, paths.dim());
        if self.a.n() != n || self.a.d() != d {
            return Err(LabError::Shape(format!(
                "coefficient '{}' is {}x{} with d = {}, problem has n = {n}, paths have d = {d}",
                self.a.name(),
                self.a.n(),
                self.a.n(),
                self.a.d()
            )));
        }
        if let Some(da) = &self.delta_a {
            if da.n() != n || da.d() != d {
                return Err(LabError::Shape("perturbation has a different shape than the coefficient".into()));
            }
        }
        if self.xi.len() != m * n {
            return Err(LabError::Shape(format!("terminal values: expected {} entries, got {}", m * n, self.xi.len())));
        }
        if self.beta.as_ref().is_some_and(|b| b.len() != m * k * n) {
            return Err(LabError::Shape("inhomogeneity has the wrong length".into()));
        }
        if self.alpha.as_ref().is_some_and(|a| a.len() != m * k * n * n) {
            return Err(LabError::Shape("zeroth-order coefficient has the wrong length".into()));
        }
        Ok(())
    }

    fn beta_at(&self, m: usize, k: usize, steps: usize) -> Option<&[f64]> {
        let n = self.n;
        self.beta.as_ref().map(|b| &b[(m * steps + k) * n..(m * steps + k + 1) * n])
    }

    fn alpha_at(&self, m: usize, k: usize, steps: usize) -> Option<&[f64]> {
        let nn = self.n * self.n;
        self.alpha.as_ref().map(|a| &a[(m * steps + k) * nn..(m * steps + k + 1) * nn])
    }

    fn is_perturbed(&self) -> bool {
        self.delta_a.as_ref().is_some_and(|d| !d.is_zero()) || self.alpha.is_some()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Total degree of the regression basis in `B_t`.
    pub degree: usize,
    /// Largest tolerated lower confidence bound on `|E[S_T] - I|` for the representation formula.
    pub defect_tolerance: f64,
    /// Picard stopping rule for perturbed problems.
    pub picard_tolerance: f64,
    pub picard_max_iters: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            degree: 3,
            defect_tolerance: 0.05,
            picard_tolerance: 1e-6,
            picard_max_iters: 50,
        }
    }
}

/// One projector per time node `0..K`.
pub struct Conditioner {
    projectors: Vec<ConditionalProjector>,
    warnings: Vec<String>,
}

/// `paths x (K + 1)` labels: at each node the paths are ranked by the first state coordinate and
/// cut into `bins` equal-count groups. At `t = 0` every path sits at the origin, so all share bin 0.
pub fn quantile_labels(paths: &PathEnsemble, bins: usize) -> Vec<usize> {
    let (m, steps) = (paths.paths(), paths.steps());
    let mut labels = vec![0; m * (steps + 1)];
    let columns: Vec<Vec<usize>> = (0..=steps)
        .into_par_iter()
        .map(|k| {
            let mut col = vec![0; m];
            if k > 0 {
                let mut order: Vec<usize> = (0..m).collect();
                order.sort_by(|&a, &b| paths.state(a, k)[0].total_cmp(&paths.state(b, k)[0]));
                for (rank, &p) in order.iter().enumerate() {
                    col[p] = rank * bins / m;
                }
            }
            col
        })
        .collect();
    for (k, col) in columns.iter().enumerate() {
        for (p, &l) in col.iter().enumerate() {
            labels[p * (steps + 1) + k] = l;
        }
    }
    labels
}

impl Conditioner {
    pub fn new(paths: &PathEnsemble, field: Option<&dyn CoefficientField>, degree: usize) -> Result<Self> {
        let (m, d) = (paths.paths(), paths.dim());
        let regimes = field.filter(|f| f.path_dependent());
        let projectors = (0..paths.steps())
            .into_par_iter()
            .map(|k| {
                let mut feats = Vec::with_capacity(m * d);
                for p in 0..m {
                    feats.extend_from_slice(paths.state(p, k));
                }
                let labels: Option<Vec<usize>> =
                    regimes.map(|f| (0..m).map(|p| f.regime(&paths.path_state(p, k))).collect());
                ConditionalProjector::new(&feats, d, labels.as_deref(), degree)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut warnings: Vec<String> = projectors.iter().flat_map(|p| p.warnings().iter().cloned()).collect();
        warnings.dedup();
        Ok(Self { projectors, warnings })
    }

    /// Piecewise regression: at each step the paths are split into `bins` equal-count groups by
    /// the first coordinate of the state and fitted separately, which keeps the fit local in
    /// the tails where a global polynomial extrapolates badly.
    pub fn local(paths: &PathEnsemble, bins: usize, degree: usize) -> Result<Self> {
        if bins <= 1 {
            return Self::new(paths, None, degree);
        }
        let (m, d) = (paths.paths(), paths.dim());
        if m < bins * (degree + 2).pow(d as u32) {
            return Err(LabError::InvalidParameter(format!(
                "{m} paths are too few for {bins} regression bins of degree {degree}"
            )));
        }
        let labels = quantile_labels(paths, bins);
        let stride = paths.steps() + 1;
        let projectors = (0..paths.steps())
            .into_par_iter()
            .map(|k| {
                let mut feats = Vec::with_capacity(m * d);
                for p in 0..m {
                    feats.extend_from_slice(paths.state(p, k));
                }
                let step_labels: Vec<usize> = (0..m).map(|p| labels[p * stride + k]).collect();
                ConditionalProjector::new(&feats, d, Some(&step_labels), degree)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut warnings: Vec<String> = projectors.iter().flat_map(|p| p.warnings().iter().cloned()).collect();
        warnings.dedup();
        Ok(Self { projectors, warnings })
    }

    pub fn at(&self, k: usize) -> &ConditionalProjector {
        &self.projectors[k]
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    /// RMS over paths of `Y_k - E_k[Y_{k+1}] - (alpha E_k[Y_{k+1}] + A Z_k + beta_k) dt`, per step.
    pub step_residual: Vec<f64>,
    /// `max |Y_K - xi|`.
    pub terminal_mismatch: f64,
    pub warnings: Vec<String>,
    /// Relative Picard residuals, one per iteration.
    pub picard_history: Vec<f64>,
    /// Right-outer identity `V = b^T Z`: RMS mismatch and its statistical tolerance.
    pub identity_residual: Option<f64>,
    pub identity_tolerance: Option<f64>,
    /// Terminal martingale defect of the exponential used by a representation solve.
    pub martingale_defect: Option<f64>,
}

impl Diagnostics {
    pub fn max_step_residual(&self) -> f64 {
        self.step_residual.iter().copied().fold(0.0, f64::max)
    }
}

/// `Y` on nodes `0..=K` and `Z` on nodes `0..K` for every path.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolutionEnsemble {
    pub solver: String,
    pub n: usize,
    pub d: usize,
    pub paths: usize,
    pub steps: usize,
    pub times: Vec<f64>,
    /// `paths x (K + 1) x n`
    pub y: Vec<f64>,
    /// `paths x K x n d`
    pub z: Vec<f64>,
    pub y0: Vec<f64>,
    pub y0_std_error: Vec<f64>,
    pub diagnostics: Diagnostics,
}

impl SolutionEnsemble {
    pub fn y(&self, m: usize, k: usize) -> &[f64] {
        let o = (m * (self.steps + 1) + k) * self.n;
        &self.y[o..o + self.n]
    }

    pub fn z(&self, m: usize, k: usize) -> &[f64] {
        let w = self.n * self.d;
        let o = (m * self.steps + k) * w;
        &self.z[o..o + w]
    }

    /// Estimate of `||Y||_{S^q}` (`q = inf` allowed).
    pub fn y_norm(&self, q: f64, grid: &crate::grid::TimeGrid) -> Result<f64> {
        let view = ProcessView::new(grid, self.paths, self.n, &self.y)?;
        Ok(estimate_norm(NormKind::SupP { p: q }, &view, Conditioning::Unconditional)?.value)
    }

    /// Estimate of `||Z||_bmo` with conditional expectations by regression on `paths`.
    pub fn z_bmo(&self, paths: &PathEnsemble, degree: usize) -> Result<f64> {
        let view = ProcessView::new(paths.grid(), self.paths, self.n * self.d, &self.z)?;
        Ok(estimate_norm(
            NormKind::Bmo,
            &view,
            Conditioning::Regression {
                paths,
                degree,
                regimes: None,
            },
        )?
        .value)
    }

    /// `t, Y_0..Y_{n-1}, Z.., residual` with path averages per node.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let mut header = vec!["t".to_string()];
        header.extend((0..self.n).map(|i| format!("y{i}")));
        for i in 0..self.n {
            header.extend((0..self.d).map(|a| format!("z{i}_{a}")));
        }
        header.push("residual".into());
        writeln!(w, "{}", header.join(","))?;
        let inv = 1.0 / self.paths as f64;
        for k in 0..=self.steps {
            let mut row = vec![fmt17(self.times[k])];
            let mut ym = vec![0.0; self.n];
            for m in 0..self.paths {
                for (a, v) in ym.iter_mut().zip(self.y(m, k)) {
                    *a += v * inv;
                }
            }
            row.extend(ym.iter().map(|v| fmt17(*v)));
            let mut zm = vec![0.0; self.n * self.d];
            if k < self.steps {
                for m in 0..self.paths {
                    for (a, v) in zm.iter_mut().zip(self.z(m, k)) {
                        *a += v * inv;
                    }
                }
            }
            row.extend(zm.iter().map(|v| fmt17(*v)));
            row.push(fmt17(self.diagnostics.step_residual.get(k).copied().unwrap_or(0.0)));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Drift of a backward step: receives `(path, step, E_k[Y_{k+1}], Z_k)` and writes `f` so that
/// `Y_k = E_k[Y_{k+1}] + f dt`.
pub(crate) type Drift<'a> = dyn Fn(usize, usize, &[f64], &[f64], &mut [f64]) + Sync + 'a;

/// Backward regression pass for a `width`-dimensional system. Returns `(Y, Z, pathwise Y_0
/// samples)`; the samples average exactly to `Y_0` because every basis contains constants.
pub(crate) fn backward_pass(
    cond: &Conditioner,
    paths: &PathEnsemble,
    width: usize,
    terminal: &[f64],
    drift: &Drift<'_>,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (mp, steps, d) = (paths.paths(), paths.steps(), paths.dim());
    let mut y = vec![0.0; mp * (steps + 1) * width];
    let mut z = vec![0.0; mp * steps * width * d];
    let mut samples = terminal.to_vec();
    for m in 0..mp {
        let o = (m * (steps + 1) + steps) * width;
        y[o..o + width].copy_from_slice(&terminal[m * width..(m + 1) * width]);
    }
    let mut next = terminal.to_vec();
    for k in (0..steps).rev() {
        let dt = paths.grid().dt(k);
        let proj = cond.at(k);
        let ey = proj.project(&next, width);
        let mut targets = vec![0.0; mp * width * d];
        targets.par_chunks_mut(width * d).enumerate().for_each(|(m, t)| {
            let db = paths.increment(m, k);
            for i in 0..width {
                let c = next[m * width + i] - ey[m * width + i];
                for a in 0..d {
                    t[i * d + a] = c * db[a] / dt;
                }
            }
        });
        let zk = proj.project(&targets, width * d);
        let cur: Vec<(Vec<f64>, Vec<f64>)> = (0..mp)
            .into_par_iter()
            .map(|m| {
                let mut f = vec![0.0; width];
                drift(m, k, &ey[m * width..(m + 1) * width], &zk[m * width * d..(m + 1) * width * d], &mut f);
                let yk = (0..width).map(|i| ey[m * width + i] + f[i] * dt).collect();
                (yk, f)
            })
            .collect();
        for (m, (yk, f)) in cur.into_iter().enumerate() {
            let o = (m * (steps + 1) + k) * width;
            y[o..o + width].copy_from_slice(&yk);
            next[m * width..(m + 1) * width].copy_from_slice(&yk);
            for i in 0..width {
                samples[m * width + i] += f[i] * dt;
            }
            let oz = (m * steps + k) * width * d;
            z[oz..oz + width * d].copy_from_slice(&zk[m * width * d..(m + 1) * width * d]);
        }
    }
    (y, z, samples)
}

fn eval_field(field: &dyn CoefficientField, paths: &PathEnsemble, m: usize, k: usize, out: &mut [f64]) {
    field.eval(&paths.path_state(m, k), out);
}

/// Full drift `alpha E_k[Y_{k+1}] + (A + dA) Z + extra + beta` of a problem.
fn problem_drift<'a>(
    prob: &'a LinearProblem,
    paths: &'a PathEnsemble,
    include_delta: bool,
    extra: Option<&'a [f64]>,
) -> impl Fn(usize, usize, &[f64], &[f64], &mut [f64]) + Sync + 'a {
    let (n, d, steps) = (prob.n, paths.dim(), paths.steps());
    move |m, k, ey, z, out| {
        let mut a = vec![0.0; n * n * d];
        eval_field(prob.a.as_ref(), paths, m, k, &mut a);
        if include_delta {
            if let Some(da) = &prob.delta_a {
                let mut b = vec![0.0; n * n * d];
                eval_field(da.as_ref(), paths, m, k, &mut b);
                for (x, y) in a.iter_mut().zip(&b) {
                    *x += y;
                }
            }
        }
        contract_into(&a, z, n, d, out);
        if include_delta {
            if let Some(al) = prob.alpha_at(m, k, steps) {
                let mut tmp = vec![0.0; n];
                matvec(al, ey, n, &mut tmp);
                for (o, t) in out.iter_mut().zip(&tmp) {
                    *o += t;
                }
            }
        }
        if let Some(b) = prob.beta_at(m, k, steps) {
            for (o, v) in out.iter_mut().zip(b) {
                *o += v;
            }
        }
        if let Some(e) = extra {
            let o0 = (m * steps + k) * n;
            for (o, v) in out.iter_mut().zip(&e[o0..o0 + n]) {
                *o += v;
            }
        }
    }
}

/// Per-step RMS residual of the full equation for a computed `(Y, Z)`.
fn step_residuals(prob: &LinearProblem, paths: &PathEnsemble, cond: &Conditioner, y: &[f64], z: &[f64]) -> Vec<f64> {
    let (mp, steps, n, d) = (paths.paths(), paths.steps(), prob.n, paths.dim());
    let drift = problem_drift(prob, paths, true, None);
    let mut out = vec![0.0; steps + 1];
    for k in 0..steps {
        let dt = paths.grid().dt(k);
        let next: Vec<f64> = (0..mp)
            .flat_map(|m| y[(m * (steps + 1) + k + 1) * n..(m * (steps + 1) + k + 2) * n].to_vec())
            .collect();
        let ey = cond.at(k).project(&next, n);
        let ss: f64 = (0..mp)
            .into_par_iter()
            .map(|m| {
                let mut f = vec![0.0; n];
                let zk = &z[(m * steps + k) * n * d..(m * steps + k + 1) * n * d];
                drift(m, k, &ey[m * n..(m + 1) * n], zk, &mut f);
                (0..n)
                    .map(|i| (y[(m * (steps + 1) + k) * n + i] - ey[m * n + i] - f[i] * dt).powi(2))
                    .sum::<f64>()
            })
            .collect::<Vec<f64>>()
            .iter()
            // Sequential sum: the order must not depend on the thread count.
            .sum();
        out[k] = (ss / mp as f64).sqrt();
    }
    out
}

fn y0_stats(samples: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mp = samples.len() / n;
    (0..n)
        .map(|i| {
            let col: Vec<f64> = (0..mp).map(|m| samples[m * n + i]).collect();
            mean_se(&col)
        })
        .unzip()
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    solver: &str,
    prob: &LinearProblem,
    paths: &PathEnsemble,
    cond: &Conditioner,
    y: Vec<f64>,
    z: Vec<f64>,
    samples: &[f64],
    mut diagnostics: Diagnostics,
) -> SolutionEnsemble {
    let (n, steps) = (prob.n, paths.steps());
    let (y0, y0_std_error) = y0_stats(samples, n);
    diagnostics.step_residual = step_residuals(prob, paths, cond, &y, &z);
    diagnostics.terminal_mismatch = (0..paths.paths())
        .flat_map(|m| (0..n).map(move |i| (m, i)))
        .map(|(m, i)| (y[(m * (steps + 1) + steps) * n + i] - prob.xi[m * n + i]).abs())
        .fold(0.0, f64::max);
    diagnostics.warnings.extend(cond.warnings().iter().cloned());
    SolutionEnsemble {
        solver: solver.to_string(),
        n,
        d: paths.dim(),
        paths: paths.paths(),
        steps,
        times: paths.grid().nodes().to_vec(),
        y,
        z,
        y0,
        y0_std_error,
        diagnostics,
    }
}

pub trait LinearSolver: Send + Sync {
    fn name(&self) -> &'static str;
    fn solve(&self, prob: &LinearProblem, paths: &PathEnsemble, cfg: &SolverConfig) -> Result<SolutionEnsemble>;
}

fn require_unperturbed(solver: &str, prob: &LinearProblem) -> Result<()> {
    if prob.is_perturbed() {
        return Err(LabError::InvalidParameter(format!(
            "solver '{solver}' handles A alone; wrap it in the perturbed solver for alpha or delta A"
        )));
    }
    Ok(())
}

/// Backward Euler with regression: `Z_k = E_k[Y_{k+1} dB_k] / dt`,
/// `Y_k = E_k[Y_{k+1}] + (alpha E_k[Y_{k+1}] + (A + dA) Z_k + beta_k) dt`.
pub struct RegressionSolver;

impl LinearSolver for RegressionSolver {
    fn name(&self) -> &'static str {
        "regression"
    }

    fn solve(&self, prob: &LinearProblem, paths: &PathEnsemble, cfg: &SolverConfig) -> Result<SolutionEnsemble> {
        prob.validate(paths)?;
        let cond = Conditioner::new(paths, Some(prob.a.as_ref()), cfg.degree)?;
        solve_regression_with(prob, paths, &cond)
    }
}

fn solve_regression_with(prob: &LinearProblem, paths: &PathEnsemble, cond: &Conditioner) -> Result<SolutionEnsemble> {
    let drift = problem_drift(prob, paths, true, None);
    let (y, z, samples) = backward_pass(cond, paths, prob.n, &prob.xi, &drift);
    Ok(assemble("regression", prob, paths, cond, y, z, &samples, Diagnostics::default()))
}

/// `Y_t = S_t^{-1} E_t[S_T xi + int_t^T S_u beta_u du]` with the given exponential.
pub fn solve_by_representation(
    prob: &LinearProblem,
    paths: &PathEnsemble,
    expo: &ExponentialEnsemble,
    cfg: &SolverConfig,
) -> Result<SolutionEnsemble> {
    solve_representation_named("representation", prob, paths, expo, cfg)
}

fn solve_representation_named(
    name: &str,
    prob: &LinearProblem,
    paths: &PathEnsemble,
    expo: &ExponentialEnsemble,
    cfg: &SolverConfig,
) -> Result<SolutionEnsemble> {
    prob.validate(paths)?;
    require_unperturbed(name, prob)?;
    let (mp, steps, n) = (paths.paths(), paths.steps(), prob.n);
    let nn = n * n;
    if expo.paths() != mp || expo.n() != n || expo.grid().steps() != steps {
        return Err(LabError::Shape("exponential ensemble does not match the problem".into()));
    }
    if expo.stored_nodes().len() != steps + 1 {
        return Err(LabError::Shape("representation needs S at every time node".into()));
    }
    if expo.flagged_count() > 0 {
        return Err(LabError::InvalidParameter(format!(
            "{} paths of S overflowed; the representation formula cannot use them",
            expo.flagged_count()
        )));
    }
    let defect = martingale_defect(expo)?;
    let worst = defect.max_lower_bound(3.0);
    if worst > cfg.defect_tolerance {
        return Err(LabError::RepresentationInvalid {
            defect: worst,
            tolerance: cfg.defect_tolerance,
        });
    }
    // T_k = S_k^{-1} (S_K xi + sum_{j >= k} S_j beta_j dt), per path.
    let per_path: Vec<Result<Vec<f64>>> = (0..mp)
        .into_par_iter()
        .map(|m| {
            let mut t = vec![0.0; (steps + 1) * n];
            let mut g = vec![0.0; n];
            matvec(expo.terminal(m), &prob.xi[m * n..(m + 1) * n], n, &mut g);
            let mut tmp = vec![0.0; n];
            for k in (0..=steps).rev() {
                if k < steps {
                    if let Some(b) = prob.beta_at(m, k, steps) {
                        matvec(expo.s(m, k), b, n, &mut tmp);
                        let dt = paths.grid().dt(k);
                        for (gi, v) in g.iter_mut().zip(&tmp) {
                            *gi += v * dt;
                        }
                    }
                }
                // LU rather than the simulated inverse dynamics, which only approximate S^{-1}.
                let inv = crate::linalg::inverse(expo.s(m, k), n)
                    .ok_or_else(|| LabError::Singular(format!("S on path {m} at step {k}")))?;
                debug_assert_eq!(inv.len(), nn);
                matvec(&inv, &g, n, &mut t[k * n..(k + 1) * n]);
            }
            Ok(t)
        })
        .collect();
    let mut tvals = Vec::with_capacity(mp * (steps + 1) * n);
    for r in per_path {
        tvals.extend(r?);
    }
    let cond = Conditioner::new(paths, Some(prob.a.as_ref()), cfg.degree)?;
    let mut y = vec![0.0; mp * (steps + 1) * n];
    for m in 0..mp {
        let o = (m * (steps + 1) + steps) * n;
        y[o..o + n].copy_from_slice(&prob.xi[m * n..(m + 1) * n]);
    }
    for k in 0..steps {
        let col: Vec<f64> = (0..mp).flat_map(|m| tvals[(m * (steps + 1) + k) * n..(m * (steps + 1) + k + 1) * n].to_vec()).collect();
        let fitted = cond.at(k).project(&col, n);
        for m in 0..mp {
            let o = (m * (steps + 1) + k) * n;
            y[o..o + n].copy_from_slice(&fitted[m * n..(m + 1) * n]);
        }
    }
    let z = z_from_increments(&cond, paths, &y, n);
    let samples: Vec<f64> = (0..mp).flat_map(|m| tvals[m * (steps + 1) * n..(m * (steps + 1) + 1) * n].to_vec()).collect();
    let diagnostics = Diagnostics {
        martingale_defect: Some(defect.terminal().defect),
        ..Diagnostics::default()
    };
    Ok(assemble(name, prob, paths, &cond, y, z, &samples, diagnostics))
}

/// `Z_k = E_k[(Y_{k+1} - E_k[Y_{k+1}]) dB_k] / dt` for a given `Y`.
fn z_from_increments(cond: &Conditioner, paths: &PathEnsemble, y: &[f64], width: usize) -> Vec<f64> {
    let (mp, steps, d) = (paths.paths(), paths.steps(), paths.dim());
    let mut z = vec![0.0; mp * steps * width * d];
    for k in 0..steps {
        let dt = paths.grid().dt(k);
        let next: Vec<f64> = (0..mp)
            .flat_map(|m| y[(m * (steps + 1) + k + 1) * width..(m * (steps + 1) + k + 2) * width].to_vec())
            .collect();
        let ey = cond.at(k).project(&next, width);
        let mut targets = vec![0.0; mp * width * d];
        for m in 0..mp {
            let db = paths.increment(m, k);
            for i in 0..width {
                for a in 0..d {
                    targets[(m * width + i) * d + a] = (next[m * width + i] - ey[m * width + i]) * db[a] / dt;
                }
            }
        }
        let zk = cond.at(k).project(&targets, width * d);
        for m in 0..mp {
            let o = (m * steps + k) * width * d;
            z[o..o + width * d].copy_from_slice(&zk[m * width * d..(m + 1) * width * d]);
        }
    }
    z
}

/// Representation with an Euler-simulated exponential.
pub struct RepresentationSolver;

impl LinearSolver for RepresentationSolver {
    fn name(&self) -> &'static str {
        "representation"
    }

    fn solve(&self, prob: &LinearProblem, paths: &PathEnsemble, cfg: &SolverConfig) -> Result<SolutionEnsemble> {
        prob.validate(paths)?;
        let opts = IntegrationOptions {
            store_every: 1,
            with_inverse: false,
        };
        let expo = integrate(prob.a.as_ref(), paths, opts)?;
        solve_by_representation(prob, paths, &expo, cfg)
    }
}

fn mismatch(solver: &str, required: &str, found: &Structure) -> LabError {
    LabError::StructureMismatch {
        solver: solver.into(),
        required: required.into(),
        found: found.label().into(),
    }
}

/// Lower-triangular `A`: component `i` only sees `Z^j` for `j <= i`, so the components are
/// solved one after another as scalar equations.
pub struct TriangularSolver;

impl LinearSolver for TriangularSolver {
    fn name(&self) -> &'static str {
        "triangular"
    }

    fn solve(&self, prob: &LinearProblem, paths: &PathEnsemble, cfg: &SolverConfig) -> Result<SolutionEnsemble> {
        prob.validate(paths)?;
        require_unperturbed("triangular", prob)?;
        let st = prob.a.structure();
        if !st.is_lower_triangular() {
            return Err(mismatch("triangular", "lower_triangular", &st));
        }
        let cond = Conditioner::new(paths, Some(prob.a.as_ref()), cfg.degree)?;
        let (mp, steps, n, d) = (paths.paths(), paths.steps(), prob.n, paths.dim());
        let mut y = vec![0.0; mp * (steps + 1) * n];
        let mut z = vec![0.0; mp * steps * n * d];
        let mut samples = vec![0.0; mp * n];
        for i in 0..n {
            let term: Vec<f64> = (0..mp).map(|m| prob.xi[m * n + i]).collect();
            let known = &z;
            let drift = |m: usize, k: usize, _ey: &[f64], zi: &[f64], out: &mut [f64]| {
                let mut a = vec![0.0; n * n * d];
                eval_field(prob.a.as_ref(), paths, m, k, &mut a);
                let zo = (m * steps + k) * n * d;
                let mut acc = 0.0;
                for j in 0..=i {
                    let zj: &[f64] = if j == i { zi } else { &known[zo + j * d..zo + (j + 1) * d] };
                    for c in 0..d {
                        acc += a[(i * n + j) * d + c] * zj[c];
                    }
                }
                out[0] = acc + prob.beta_at(m, k, steps).map_or(0.0, |b| b[i]);
            };
            let (yi, zi, si) = backward_pass(&cond, paths, 1, &term, &drift);
            for m in 0..mp {
                for k in 0..=steps {
                    y[(m * (steps + 1) + k) * n + i] = yi[m * (steps + 1) + k];
                }
                for k in 0..steps {
                    for c in 0..d {
                        z[(m * steps + k) * n * d + i * d + c] = zi[(m * steps + k) * d + c];
                    }
                }
                samples[m * n + i] = si[m];
            }
        }
        Ok(assemble("triangular", prob, paths, &cond, y, z, &samples, Diagnostics::default()))
    }
}

/// `A^i_j = a^i b_j` with constant `b`: `U = b^T Y` solves the scalar equation with
/// coefficient `b^T a`, solved here with exponential weights; `Y` is then a plain conditional
/// expectation with known drift `a V + beta`.
pub struct RightOuterSolver;

impl LinearSolver for RightOuterSolver {
    fn name(&self) -> &'static str {
        "right-outer"
    }

    fn solve(&self, prob: &LinearProblem, paths: &PathEnsemble, cfg: &SolverConfig) -> Result<SolutionEnsemble> {
        prob.validate(paths)?;
        require_unperturbed("right-outer", prob)?;
        let st = prob.a.structure();
        let Structure::RightOuter { b } = &st else {
            return Err(mismatch("right-outer", "right_outer", &st));
        };
        let cond = Conditioner::new(paths, Some(prob.a.as_ref()), cfg.degree)?;
        let (mp, steps, n, d) = (paths.paths(), paths.steps(), prob.n, paths.dim());
        let factor = |m: usize, k: usize| {
            let mut a = vec![0.0; n * d];
            prob.a.outer_factor(&paths.path_state(m, k), &mut a);
            a
        };
        // Scalar propagator: W_k = b^T beta_k dt + (1 + gamma_k . dB_k) W_{k+1}.
        let w: Vec<Vec<f64>> = (0..mp)
            .into_par_iter()
            .map(|m| {
                let mut w = vec![0.0; steps + 1];
                w[steps] = (0..n).map(|i| b[i] * prob.xi[m * n + i]).sum();
                for k in (0..steps).rev() {
                    let a = factor(m, k);
                    let db = paths.increment(m, k);
                    let gdb: f64 = (0..n).map(|i| b[i] * (0..d).map(|c| a[i * d + c] * db[c]).sum::<f64>()).sum();
                    let bb = prob.beta_at(m, k, steps).map_or(0.0, |be| (0..n).map(|i| b[i] * be[i]).sum());
                    w[k] = bb * paths.grid().dt(k) + (1.0 + gdb) * w[k + 1];
                }
                w
            })
            .collect();
        let mut u = vec![0.0; mp * (steps + 1)];
        for m in 0..mp {
            u[m * (steps + 1) + steps] = w[m][steps];
        }
        for k in 0..steps {
            let col: Vec<f64> = (0..mp).map(|m| w[m][k]).collect();
            let fitted = cond.at(k).project(&col, 1);
            for m in 0..mp {
                u[m * (steps + 1) + k] = fitted[m];
            }
        }
        let v = z_from_increments(&cond, paths, &u, 1);
        let drift = |m: usize, k: usize, _ey: &[f64], _z: &[f64], out: &mut [f64]| {
            let a = factor(m, k);
            let vk = &v[(m * steps + k) * d..(m * steps + k + 1) * d];
            for i in 0..n {
                out[i] = (0..d).map(|c| a[i * d + c] * vk[c]).sum::<f64>()
                    + prob.beta_at(m, k, steps).map_or(0.0, |be| be[i]);
            }
        };
        let (y, z, samples) = backward_pass(&cond, paths, n, &prob.xi, &drift);
        let (residual, tolerance) = outer_identity_check(&cond, paths, &u, &v, &z, b, n);
        let diagnostics = Diagnostics {
            identity_residual: Some(residual),
            identity_tolerance: Some(tolerance),
            ..Diagnostics::default()
        };
        Ok(assemble("right-outer", prob, paths, &cond, y, z, &samples, diagnostics))
    }
}

/// RMS of `V - b^T Z` and the regression tolerance: three times the RMS prediction standard
/// error of the regression that produces `V`.
fn outer_identity_check(
    cond: &Conditioner,
    paths: &PathEnsemble,
    u: &[f64],
    v: &[f64],
    z: &[f64],
    b: &[f64],
    n: usize,
) -> (f64, f64) {
    let (mp, steps, d) = (paths.paths(), paths.steps(), paths.dim());
    let mut ss = 0.0;
    let mut noise = 0.0;
    for k in 0..steps {
        let dt = paths.grid().dt(k);
        for m in 0..mp {
            let zk = &z[(m * steps + k) * n * d..(m * steps + k + 1) * n * d];
            for c in 0..d {
                let btz: f64 = (0..n).map(|i| b[i] * zk[i * d + c]).sum();
                ss += (v[(m * steps + k) * d + c] - btz).powi(2);
            }
        }
        let next: Vec<f64> = (0..mp).map(|m| u[m * (steps + 1) + k + 1]).collect();
        let proj = cond.at(k);
        let centered: Vec<f64> = next.iter().zip(proj.project(&next, 1)).map(|(a, b)| a - b).collect();
        let p = proj.effective_degree() + 1;
        for c in 0..d {
            let target: Vec<f64> = (0..mp).map(|m| centered[m] * paths.increment(m, k)[c] / dt).collect();
            let fit = proj.fit_column(&target);
            let resid: f64 = target.iter().zip(&fit.fitted).map(|(t, f)| (t - f).powi(2)).sum::<f64>() / mp as f64;
            noise += resid * p as f64 / mp as f64;
        }
    }
    let rms = (ss / (mp * steps) as f64).sqrt();
    let tol = 3.0 * (noise / steps as f64).sqrt();
    (rms, tol)
}

/// Closed-form exponential of `A^i_j = a_i b^j` (constant `a`):
/// `S a = a E(int b^T a dB)`, `S = I + a c^T` with `c_j = int E b^j . dB`, and
/// `S^{-1} = I - a c^T / E`.
pub fn assemble_left_outer(field: &dyn CoefficientField, paths: &PathEnsemble) -> Result<ExponentialEnsemble> {
    let st = field.structure();
    let Structure::LeftOuter { a } = &st else {
        return Err(mismatch("left-outer", "left_outer", &st));
    };
    let (mp, steps, n, d) = (paths.paths(), paths.steps(), field.n(), paths.dim());
    let nn = n * n;
    let runs: Vec<(Vec<f64>, Vec<f64>, bool)> = (0..mp)
        .into_par_iter()
        .map(|m| {
            let mut eps = 1.0f64;
            let mut c = vec![0.0; n];
            let mut s_all = Vec::with_capacity((steps + 1) * nn);
            let mut x_all = Vec::with_capacity((steps + 1) * nn);
            let mut bf = vec![0.0; n * d];
            let mut flagged = false;
            for k in 0..=steps {
                for i in 0..n {
                    for j in 0..n {
                        let id = if i == j { 1.0 } else { 0.0 };
                        s_all.push(id + a[i] * c[j]);
                        x_all.push(id - a[i] * c[j] / eps);
                    }
                }
                if k == steps {
                    break;
                }
                field.outer_factor(&paths.path_state(m, k), &mut bf);
                let db = paths.increment(m, k);
                let mut gdb = 0.0;
                for j in 0..n {
                    let bdb: f64 = (0..d).map(|q| bf[j * d + q] * db[q]).sum();
                    c[j] += eps * bdb;
                    gdb += a[j] * bdb;
                }
                eps *= 1.0 + gdb;
                if !eps.is_finite() || eps.abs() < 1e-300 {
                    flagged = true;
                }
            }
            (s_all, x_all, flagged)
        })
        .collect();
    let mut s = Vec::with_capacity(mp * (steps + 1) * nn);
    let mut x = Vec::with_capacity(s.capacity());
    let mut flagged = Vec::with_capacity(mp);
    for (sv, xv, f) in runs {
        s.extend(sv);
        x.extend(xv);
        flagged.push(f);
    }
    ExponentialEnsemble::from_parts(
        n,
        paths.grid().clone(),
        paths.seed(),
        Scheme::ClosedForm,
        (0..=steps).collect(),
        s,
        Some(x),
        flagged,
    )
}

/// Left-outer structure: representation with the closed-form exponential.
pub struct LeftOuterSolver;

impl LinearSolver for LeftOuterSolver {
    fn name(&self) -> &'static str {
        "left-outer"
    }

    fn solve(&self, prob: &LinearProblem, paths: &PathEnsemble, cfg: &SolverConfig) -> Result<SolutionEnsemble> {
        prob.validate(paths)?;
        let expo = assemble_left_outer(prob.a.as_ref(), paths)?;
        solve_representation_named("left-outer", prob, paths, &expo, cfg)
    }
}

/// Picard iteration: repeatedly solve the equation for `A` with inhomogeneity
/// `alpha E_k[Y^m_{k+1}] + dA Z^m + beta`.
pub struct PerturbedSolver {
    pub base: Box<dyn LinearSolver>,
}

impl LinearSolver for PerturbedSolver {
    fn name(&self) -> &'static str {
        "perturbed"
    }

    fn solve(&self, prob: &LinearProblem, paths: &PathEnsemble, cfg: &SolverConfig) -> Result<SolutionEnsemble> {
        prob.validate(paths)?;
        let mut base_prob = LinearProblem {
            delta_a: None,
            alpha: None,
            ..prob.clone()
        };
        if !prob.is_perturbed() {
            let mut sol = self.base.solve(&base_prob, paths, cfg)?;
            sol.diagnostics.picard_history.push(0.0);
            sol.solver = format!("perturbed({})", self.base.name());
            return Ok(sol);
        }
        let cond = Conditioner::new(paths, Some(prob.a.as_ref()), cfg.degree)?;
        let (mp, steps, n, d) = (paths.paths(), paths.steps(), prob.n, paths.dim());
        let mut history = Vec::new();
        let mut steps_taken: Vec<f64> = Vec::new();
        let mut prev: Option<SolutionEnsemble> = None;
        for it in 0..cfg.picard_max_iters {
            let mut extra = prob.beta.clone().unwrap_or_else(|| vec![0.0; mp * steps * n]);
            if let Some(p) = &prev {
                for k in 0..steps {
                    let next: Vec<f64> = (0..mp).flat_map(|m| p.y(m, k + 1).to_vec()).collect();
                    let ey = cond.at(k).project(&next, n);
                    for m in 0..mp {
                        let o = (m * steps + k) * n;
                        let out = &mut extra[o..o + n];
                        if let Some(al) = prob.alpha_at(m, k, steps) {
                            let mut tmp = vec![0.0; n];
                            matvec(al, &ey[m * n..(m + 1) * n], n, &mut tmp);
                            for (x, t) in out.iter_mut().zip(&tmp) {
                                *x += t;
                            }
                        }
                        if let Some(da) = &prob.delta_a {
                            let mut dav = vec![0.0; n * n * d];
                            eval_field(da.as_ref(), paths, m, k, &mut dav);
                            let mut tmp = vec![0.0; n];
                            contract_into(&dav, p.z(m, k), n, d, &mut tmp);
                            for (x, t) in out.iter_mut().zip(&tmp) {
                                *x += t;
                            }
                        }
                    }
                }
            }
            base_prob.beta = Some(extra);
            let sol = self.base.solve(&base_prob, paths, cfg)?;
            if let Some(p) = &prev {
                let diff: f64 = sol.y.iter().zip(&p.y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let size: f64 = sol.y.iter().map(|a| a * a).sum::<f64>().sqrt();
                let rel = diff / size.max(1e-300);
                history.push(rel);
                // On a time grid the iteration terminates after K + 1 rounds whatever the
                // coefficients, so non-contraction is judged from the residual trend instead.
                steps_taken.push(diff);
                let growing = steps_taken.len() >= 3 && steps_taken.windows(2).rev().take(2).all(|w| w[1] > w[0]);
                if !rel.is_finite() || (growing && rel > cfg.picard_tolerance) {
                    return Err(LabError::NotSliceable {
                        iterations: it + 1,
                        residual: rel,
                    });
                }
                if rel < cfg.picard_tolerance {
                    return Ok(finish_perturbed(self.base.name(), prob, paths, &cond, sol, history));
                }
            }
            prev = Some(sol);
        }
        Err(LabError::NotSliceable {
            iterations: cfg.picard_max_iters,
            residual: history.last().copied().unwrap_or(f64::NAN),
        })
    }
}

fn finish_perturbed(
    base: &str,
    prob: &LinearProblem,
    paths: &PathEnsemble,
    cond: &Conditioner,
    sol: SolutionEnsemble,
    history: Vec<f64>,
) -> SolutionEnsemble {
    let mut diagnostics = sol.diagnostics.clone();
    diagnostics.picard_history = history;
    diagnostics.warnings.clear();
    // Pathwise Y_0 samples of the full equation.
    let (mp, steps, n) = (paths.paths(), paths.steps(), prob.n);
    let drift = problem_drift(prob, paths, true, None);
    let mut samples = vec![0.0; mp * n];
    for m in 0..mp {
        let mut acc: Vec<f64> = prob.xi[m * n..(m + 1) * n].to_vec();
        for k in 0..steps {
            let next: Vec<f64> = sol.y(m, k + 1).to_vec();
            let mut f = vec![0.0; n];
            // alpha acts on E_k[Y_{k+1}], approximated pathwise by Y_{k+1} (same mean).
            drift(m, k, &next, sol.z(m, k), &mut f);
            for (a, v) in acc.iter_mut().zip(&f) {
                *a += v * paths.grid().dt(k);
            }
        }
        samples[m * n..(m + 1) * n].copy_from_slice(&acc);
    }
    let mut out = assemble(&format!("perturbed({base})"), prob, paths, cond, sol.y, sol.z, &samples, diagnostics);
    // The Y_0 value itself comes from the fixed point; only the error bar is pathwise.
    out.y0 = (0..n).map(|i| out.y(0, 0)[i]).collect();
    out
}

pub const LINEAR_SOLVERS: &[&str] = &["representation", "regression", "triangular", "left-outer", "right-outer", "perturbed"];

/// Solver by registry name; `perturbed` wraps the structural solver matching the field.
pub fn linear_solver(name: &str, field: &dyn CoefficientField) -> Result<Box<dyn LinearSolver>> {
    Ok(match name {
        "representation" => Box::new(RepresentationSolver),
        "regression" => Box::new(RegressionSolver),
        "triangular" => Box::new(TriangularSolver),
        "left-outer" => Box::new(LeftOuterSolver),
        "right-outer" => Box::new(RightOuterSolver),
        "perturbed" => Box::new(PerturbedSolver { base: auto_solver(field) }),
        "auto" => auto_solver(field),
        _ => return Err(LabError::unknown("linear solver", name, LINEAR_SOLVERS)),
    })
}

/// The structural solver matching the field's tag, else regression.
pub fn auto_solver(field: &dyn CoefficientField) -> Box<dyn LinearSolver> {
    match field.structure() {
        Structure::LowerTriangular | Structure::Diagonal => Box::new(TriangularSolver),
        Structure::LeftOuter { .. } => Box::new(LeftOuterSolver),
        Structure::RightOuter { .. } => Box::new(RightOuterSolver),
        _ => Box::new(RegressionSolver),
    }
}

/// Largest observed ratio `(||Y||_{S^q} + ||Z||_{L^{2,q}}) / (||xi||_{L^q} + ||beta||_{L^{1,q}})`
/// over a test family; a lower bound on the solution-operator norm.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OperatorNormEstimate {
    pub q: f64,
    pub lower_bound: f64,
    pub ratios: Vec<f64>,
}

pub fn estimate_solution_operator_norm(
    solver: &dyn LinearSolver,
    a: Arc<dyn CoefficientField>,
    paths: &PathEnsemble,
    q: f64,
    family: &[(Vec<f64>, Option<Vec<f64>>)],
    cfg: &SolverConfig,
) -> Result<OperatorNormEstimate> {
    if family.is_empty() {
        return Err(LabError::Empty);
    }
    if q.is_nan() || q < 1.0 {
        return Err(LabError::InvalidParameter(format!("q must be >= 1, got {q}")));
    }
    let (mp, n) = (paths.paths(), a.n());
    let grid = paths.grid();
    let mut ratios = Vec::with_capacity(family.len());
    for (xi, beta) in family {
        let mut prob = LinearProblem::new(a.clone(), xi.clone());
        if let Some(b) = beta {
            prob = prob.with_beta(b.clone());
        }
        let sol = solver.solve(&prob, paths, cfg)?;
        let yv = ProcessView::new(grid, mp, n, &sol.y)?;
        let zv = ProcessView::new(grid, mp, n * paths.dim(), &sol.z)?;
        let num = estimate_norm(NormKind::SupP { p: q }, &yv, Conditioning::Unconditional)?.value
            + estimate_norm(NormKind::L2q { q }, &zv, Conditioning::Unconditional)?.value;
        let xin: Vec<f64> = (0..mp)
            .map(|m| xi[m * n..(m + 1) * n].iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let mut den = lp_of_samples(&xin, q).0;
        if let Some(b) = beta {
            let bv = ProcessView::new(grid, mp, n, b)?;
            den += estimate_norm(NormKind::L1q { q }, &bv, Conditioning::Unconditional)?.value;
        }
        if den > 0.0 {
            ratios.push(num / den);
        }
    }
    let lower_bound = ratios.iter().copied().fold(0.0, f64::max);
    Ok(OperatorNormEstimate { q, lower_bound, ratios })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::brownian::generate_brownian;
    use crate::field::{builtin_field, ConstantField};
    use crate::grid::TimeGrid;
    use crate::tensor::MatD;

    fn bm(paths: usize, steps: usize, seed: u64) -> PathEnsemble {
        generate_brownian(&TimeGrid::uniform(1.0, steps).unwrap(), 1, paths, seed).unwrap()
    }

    #[test]
    fn constant_terminal_gives_constant_solution() {
        let p = bm(2000, 10, 1);
        let a: Arc<dyn CoefficientField> = Arc::new(ConstantField::scalar(0.5));
        let prob = LinearProblem::new(a, vec![2.0; 2000]);
        let sol = RegressionSolver.solve(&prob, &p, &SolverConfig::default()).unwrap();
        assert!((sol.y0[0] - 2.0).abs() < 1e-9);
        assert!(sol.z.iter().all(|z| z.abs() < 1e-9));
        assert_eq!(sol.diagnostics.terminal_mismatch, 0.0);
        // The representation carries the Monte Carlo noise of S_T.
        let sol = RepresentationSolver.solve(&prob, &p, &SolverConfig::default()).unwrap();
        assert!((sol.y0[0] - 2.0).abs() < 4.0 * sol.y0_std_error[0]);
        let zbar = sol.z.iter().map(|z| z.abs()).sum::<f64>() / sol.z.len() as f64;
        assert!(zbar < 0.1, "{zbar}");
        assert_eq!(sol.diagnostics.terminal_mismatch, 0.0);
    }

    #[test]
    fn brownian_terminal_with_zero_coefficient() {
        let p = bm(4000, 20, 2);
        let a: Arc<dyn CoefficientField> = Arc::new(ConstantField::zero(1, 1));
        let xi = terminal_values(&p, 1, |s, o| o[0] = s.x[0]);
        let sol = RegressionSolver.solve(&LinearProblem::new(a, xi), &p, &SolverConfig::default()).unwrap();
        assert!(sol.y0[0].abs() < 4.0 * sol.y0_std_error[0] + 1e-12);
        let zbar = sol.z.iter().sum::<f64>() / sol.z.len() as f64;
        assert!((zbar - 1.0).abs() < 0.02, "{zbar}");
    }

    #[test]
    fn structure_mismatch_is_reported() {
        let p = bm(100, 4, 3);
        let a = builtin_field("right-outer-3").unwrap();
        let prob = LinearProblem::new(a, vec![0.0; 300]);
        let err = TriangularSolver.solve(&prob, &p, &SolverConfig::default()).unwrap_err();
        assert!(matches!(err, LabError::StructureMismatch { .. }));
        assert!(LeftOuterSolver.solve(&prob, &p, &SolverConfig::default()).is_err());
    }

    #[test]
    fn left_outer_closed_form_matches_euler() {
        let p = bm(50, 20, 4);
        let f = builtin_field("left-outer-3").unwrap();
        let closed = assemble_left_outer(f.as_ref(), &p).unwrap();
        let euler = integrate(f.as_ref(), &p, IntegrationOptions::default()).unwrap();
        for m in 0..50 {
            for (a, b) in closed.terminal(m).iter().zip(euler.terminal(m)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert!(closed.max_inverse_residual().unwrap() < 1e-12);
    }

    #[test]
    fn left_outer_with_first_unit_vector() {
        // a = (1, 0): (S a)_1 is the scalar exponential and (S a)_2 = 0.
        let p = bm(20, 10, 5);
        let f = FnField::new_left_outer_test();
        let closed = assemble_left_outer(&f, &p).unwrap();
        for m in 0..20 {
            let s = closed.terminal(m);
            let mut eps = 1.0;
            for k in 0..10 {
                eps *= 1.0 + 0.3 * p.increment(m, k)[0];
            }
            assert!((s[0] - eps).abs() < 1e-12);
            assert!(s[2].abs() < 1e-15);
        }
    }

    struct FnField;
    impl FnField {
        fn new_left_outer_test() -> crate::field::FnField {
            crate::field::FnField::new(
                "lo-test",
                2,
                1,
                Structure::LeftOuter { a: vec![1.0, 0.0] },
                None,
                |_, out| out.copy_from_slice(&[0.3, -0.2, 0.0, 0.0]),
            )
        }
    }

    #[test]
    fn unperturbed_picard_is_one_solve() {
        let p = bm(500, 8, 6);
        let a: Arc<dyn CoefficientField> = Arc::new(ConstantField::scalar(0.3));
        let xi = terminal_values(&p, 1, |s, o| o[0] = s.x[0].sin());
        let prob = LinearProblem::new(a.clone(), xi);
        let base = RegressionSolver.solve(&prob, &p, &SolverConfig::default()).unwrap();
        let pert = PerturbedSolver { base: Box::new(RegressionSolver) }
            .solve(&prob, &p, &SolverConfig::default())
            .unwrap();
        assert_eq!(base.y, pert.y);
        assert_eq!(pert.diagnostics.picard_history.len(), 1);
    }

    #[test]
    fn large_perturbation_is_not_sliceable() {
        let p = bm(400, 10, 7);
        let a: Arc<dyn CoefficientField> = Arc::new(ConstantField::scalar(0.0));
        let da: Arc<dyn CoefficientField> = Arc::new(ConstantField::scalar(0.0));
        let xi = terminal_values(&p, 1, |s, o| o[0] = s.x[0].cos());
        let alpha = vec![400.0; 400 * 10];
        let prob = LinearProblem::new(a, xi).with_perturbation(da).with_alpha(alpha);
        let cfg = SolverConfig { picard_max_iters: 20, ..SolverConfig::default() };
        let err = PerturbedSolver { base: Box::new(RegressionSolver) }.solve(&prob, &p, &cfg).unwrap_err();
        assert!(err.to_string().contains("not sliceable"), "{err}");
    }

    #[test]
    fn unknown_solver_suggests() {
        let f = ConstantField::new("x", MatD::zeros(1, 1), Structure::Generic);
        let err = linear_solver("regresion", &f).err().unwrap();
        assert!(err.to_string().contains("regression"));
    }
}
