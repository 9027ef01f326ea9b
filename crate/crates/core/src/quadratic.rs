//! Quadratic BSDE systems with quadratic-linear (`f = g + z b^T z`) and unidirectional
//! (`f = g + a h(z)`) drivers: truncation, backward Euler with an implicit `Y` step,
//! truncation-level escalation and the structural checks around them.

use std::sync::{Arc, Mutex};

use minilp::{ComparisonOp, OptimizationDirection, Problem};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::brownian::{PathEnsemble, PathState};
use crate::error::{LabError, Result};
use crate::linear::{backward_pass, quantile_labels, Conditioner, Diagnostics, SolutionEnsemble};
use crate::norms::{estimate_norm, mean_se, Conditioning, NormKind, ProcessView};
use crate::rng::{self, Domain};
use crate::terminal::TerminalSpec;

/// Lipschitz part `g(t, state, y, z)`.
pub type LipschitzFn = Arc<dyn Fn(&PathState<'_>, &[f64], &[f64], &mut [f64]) + Send + Sync>;
/// Scalar quadratic part `h(z)` of a unidirectional driver.
pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum QuadraticPart {
    /// `(z b^T z)_i = sum_j b_j z^i . z^j`
    QuadraticLinear { b: Vec<f64> },
    /// `a h(z)`
    Unidirectional { a: Vec<f64>, h: ScalarFn },
}

#[derive(Clone)]
pub struct Driver {
    pub name: String,
    pub n: usize,
    pub d: usize,
    pub g: Option<LipschitzFn>,
    /// Declared Lipschitz constant of `g` (and bound on `|b|`, `|h(0)|`).
    pub lipschitz: f64,
    pub part: QuadraticPart,
}

impl std::fmt::Debug for Driver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Driver")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("d", &self.d)
            .field("class", &self.class())
            .finish()
    }
}

impl Driver {
    pub fn class(&self) -> &'static str {
        match self.part {
            QuadraticPart::QuadraticLinear { .. } => "quadratic-linear",
            QuadraticPart::Unidirectional { .. } => "unidirectional",
        }
    }

    /// Lipschitz part alone.
    pub fn eval_g(&self, st: &PathState<'_>, y: &[f64], z: &[f64], out: &mut [f64]) {
        match &self.g {
            Some(g) => g(st, y, z, out),
            None => out.iter_mut().for_each(|v| *v = 0.0),
        }
    }

    /// Quadratic part alone.
    pub fn eval_quadratic(&self, z: &[f64], out: &mut [f64]) {
        let (n, d) = (self.n, self.d);
        match &self.part {
            QuadraticPart::QuadraticLinear { b } => {
                for i in 0..n {
                    let mut acc = 0.0;
                    for (j, bj) in b.iter().enumerate() {
                        acc += bj * (0..d).map(|c| z[i * d + c] * z[j * d + c]).sum::<f64>();
                    }
                    out[i] = acc;
                }
            }
            QuadraticPart::Unidirectional { a, h } => {
                let hz = h(z);
                for i in 0..n {
                    out[i] = a[i] * hz;
                }
            }
        }
    }
}

/// `f(t, state, y, z)`.
pub fn evaluate_driver(driver: &Driver, st: &PathState<'_>, y: &[f64], z: &[f64], out: &mut [f64]) -> Result<()> {
    if y.len() != driver.n || z.len() != driver.n * driver.d || out.len() != driver.n {
        return Err(LabError::Shape(format!(
            "driver '{}' takes y in R^{}, z in (R^{})^{}",
            driver.name, driver.n, driver.d, driver.n
        )));
    }
    driver.eval_g(st, y, z, out);
    let mut q = vec![0.0; driver.n];
    driver.eval_quadratic(z, &mut q);
    for (o, v) in out.iter_mut().zip(&q) {
        *o += v;
    }
    Ok(())
}

/// Radial profile of the truncation: the identity up to `k`, then a C^2 quintic-type blend
/// with slope in `[0, 1]` that reaches the constant `1.5 k` at `2 k`.
pub fn clamp_radius(r: f64, k: f64) -> f64 {
    if r <= k {
        return r;
    }
    let s = (r - k) / k;
    if s >= 1.0 {
        return 1.5 * k;
    }
    k + k * (s - (s.powi(6) - 3.0 * s.powi(5) + 2.5 * s.powi(4)))
}

/// `phi_k(z)`: radial, 1-Lipschitz, the identity on the ball of radius `k`, `|phi_k(z)| <= |z|`.
pub fn truncate(z: &[f64], k: f64, out: &mut [f64]) {
    let r = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = if r <= k { 1.0 } else { clamp_radius(r, k) / r };
    for (o, v) in out.iter_mut().zip(z) {
        *o = v * scale;
    }
}

/// Driver with `z` replaced by `phi_k(z)` in both parts.
pub fn truncate_driver(driver: &Driver, k: f64) -> Result<Driver> {
    if !(k > 0.0) {
        return Err(LabError::InvalidParameter(format!("truncation level must be positive, got {k}")));
    }
    let base = driver.clone();
    let (n, d) = (driver.n, driver.d);
    let g: LipschitzFn = Arc::new(move |st, y, z, out| {
        let mut zt = vec![0.0; n * d];
        truncate(z, k, &mut zt);
        base.eval_g(st, y, &zt, out);
        let mut q = vec![0.0; n];
        base.eval_quadratic(&zt, &mut q);
        for (o, v) in out.iter_mut().zip(&q) {
            *o += v;
        }
    });
    // The whole truncated driver is carried by `g`; the quadratic part is switched off.
    let part = match &driver.part {
        QuadraticPart::QuadraticLinear { .. } => QuadraticPart::QuadraticLinear { b: vec![0.0; n] },
        QuadraticPart::Unidirectional { a, .. } => QuadraticPart::Unidirectional {
            a: a.clone(),
            h: Arc::new(|_| 0.0),
        },
    };
    Ok(Driver {
        name: format!("{}@k={k}", driver.name),
        n,
        d,
        g: Some(g),
        lipschitz: driver.lipschitz,
        part,
    })
}

/// Largest sampled `|g(y, z) - g(y', z')| / (|y - y'| + |z - z'|)`; compared against the
/// declared constant, a mismatch is only a warning.
pub fn estimate_lipschitz(driver: &Driver, samples: usize, seed: u64) -> f64 {
    let (n, d) = (driver.n, driver.d);
    let mut r = rng::stream(seed, Domain::Sampling, 17);
    let mut best = 0.0f64;
    let x0 = vec![0.0; d];
    for _ in 0..samples {
        let gen = |r: &mut rand_chacha::ChaCha8Rng, len: usize| -> Vec<f64> {
            (0..len).map(|_| 2.0 * { let v: f64 = StandardNormal.sample(r); v }).collect()
        };
        let (y1, z1, y2, z2) = (gen(&mut r, n), gen(&mut r, n * d), gen(&mut r, n), gen(&mut r, n * d));
        let st = PathState { t: r.gen::<f64>(), x: &x0, max_abs: 0.0 };
        let mut g1 = vec![0.0; n];
        let mut g2 = vec![0.0; n];
        driver.eval_g(&st, &y1, &z1, &mut g1);
        driver.eval_g(&st, &y2, &z2, &mut g2);
        let num = g1.iter().zip(&g2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den = y1.iter().zip(&y2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
            + z1.iter().zip(&z2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        if den > 0.0 {
            best = best.max(num / den);
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PicardInit {
    /// Inner iteration at step `k` starts from `0`.
    Zero,
    /// Inner iteration starts from the regression estimate of `E_k[xi]`.
    ConditionalTerminal,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadraticConfig {
    pub degree: usize,
    /// Equal-count regression bins per step (1 = one global polynomial).
    pub bins: usize,
    pub levels: Vec<f64>,
    /// Accept a level when the largest `|Z|` is at most `(1 - margin) k`.
    pub margin: f64,
    pub picard_tolerance: f64,
    pub picard_max_iters: usize,
    pub init: PicardInit,
}

impl Default for QuadraticConfig {
    fn default() -> Self {
        Self {
            degree: 3,
            bins: 8,
            levels: (1..=7).map(|e| 2f64.powi(e)).collect(),
            margin: 0.2,
            picard_tolerance: 1e-10,
            picard_max_iters: 200,
            init: PicardInit::ConditionalTerminal,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EscalationEntry {
    pub level: f64,
    /// Largest `|Z|` over paths and steps at this level.
    pub max_argument: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuadraticSolution {
    pub solution: SolutionEnsemble,
    pub level: f64,
    pub escalation: Vec<EscalationEntry>,
    pub y_sup: f64,
    pub z_bmo: f64,
    pub z_bmo_std_error: f64,
}

/// One backward Euler solve of the driver truncated at `k`:
/// `Z_k = E_k[(Y_{k+1} - E_k Y_{k+1}) dB] / dt`, `Y_k = E_k[Y_{k+1}] + f^k(Y_k, Z_k) dt`, the
/// implicit `Y_k` found by a pathwise fixed-point iteration, relaxed by halving when it fails
/// to contract.
pub fn solve_truncated(
    driver: &Driver,
    xi: &[f64],
    paths: &PathEnsemble,
    cond: &Conditioner,
    level: f64,
    cfg: &QuadraticConfig,
) -> Result<SolutionEnsemble> {
    let (n, d, steps, mp) = (driver.n, driver.d, paths.steps(), paths.paths());
    if paths.dim() != d {
        return Err(LabError::Shape(format!("driver expects d = {d}, paths have d = {}", paths.dim())));
    }
    if xi.len() != mp * n {
        return Err(LabError::Shape("terminal values do not match the paths".into()));
    }
    let trunc = truncate_driver(driver, level)?;
    let start = match cfg.init {
        PicardInit::Zero => None,
        PicardInit::ConditionalTerminal => {
            let zero = |_: usize, _: usize, _: &[f64], _: &[f64], out: &mut [f64]| out.iter_mut().for_each(|v| *v = 0.0);
            Some(backward_pass(cond, paths, n, xi, &zero).0)
        }
    };
    let failure: Mutex<Option<(usize, f64)>> = Mutex::new(None);
    let tol = cfg.picard_tolerance;
    let max_iters = cfg.picard_max_iters;
    let drift = |m: usize, k: usize, ey: &[f64], z: &[f64], out: &mut [f64]| {
        let dt = paths.grid().dt(k);
        let st = paths.path_state(m, k);
        let mut y: Vec<f64> = match &start {
            Some(s) => s[(m * (steps + 1) + k) * n..(m * (steps + 1) + k + 1) * n].to_vec(),
            None => vec![0.0; n],
        };
        let mut f = vec![0.0; n];
        let mut theta = 1.0;
        let mut last = f64::INFINITY;
        let mut converged = false;
        for _ in 0..max_iters {
            trunc.eval_g(&st, &y, z, &mut f);
            let mut change = 0.0f64;
            for i in 0..n {
                let target = ey[i] + f[i] * dt;
                let next = (1.0 - theta) * y[i] + theta * target;
                change = change.max((next - y[i]).abs());
                y[i] = next;
            }
            if !change.is_finite() {
                break;
            }
            if change <= tol * (1.0 + y.iter().map(|v| v.abs()).fold(0.0, f64::max)) {
                converged = true;
                break;
            }
            if change > last {
                theta *= 0.5;
            }
            last = change;
        }
        if !converged {
            let mut slot = failure.lock().expect("failure slot");
            if slot.is_none() {
                *slot = Some((k, last));
            }
        }
        trunc.eval_g(&st, &y, z, out);
    };
    let (y, z, samples) = backward_pass(cond, paths, n, xi, &drift);
    if let Some((step, residual)) = *failure.lock().expect("failure slot") {
        return Err(LabError::PicardDivergence { step, residual });
    }
    let (y0, y0_std_error): (Vec<f64>, Vec<f64>) = (0..n)
        .map(|i| mean_se(&(0..mp).map(|m| samples[m * n + i]).collect::<Vec<_>>()))
        .unzip();
    // Residual of the implicit step equation with the computed pair.
    let mut step_residual = vec![0.0; steps + 1];
    for (k, slot) in step_residual.iter_mut().enumerate().take(steps) {
        let dt = paths.grid().dt(k);
        let next: Vec<f64> = (0..mp)
            .flat_map(|m| y[(m * (steps + 1) + k + 1) * n..(m * (steps + 1) + k + 2) * n].to_vec())
            .collect();
        let ey = cond.at(k).project(&next, n);
        let mut ss = 0.0;
        let mut f = vec![0.0; n];
        for m in 0..mp {
            let yk = &y[(m * (steps + 1) + k) * n..(m * (steps + 1) + k + 1) * n];
            trunc.eval_g(&paths.path_state(m, k), yk, &z[(m * steps + k) * n * d..(m * steps + k + 1) * n * d], &mut f);
            for i in 0..n {
                ss += (yk[i] - ey[m * n + i] - f[i] * dt).powi(2);
            }
        }
        *slot = (ss / mp as f64).sqrt();
    }
    let diagnostics = Diagnostics {
        step_residual,
        terminal_mismatch: 0.0,
        warnings: cond.warnings().to_vec(),
        ..Diagnostics::default()
    };
    Ok(SolutionEnsemble {
        solver: format!("quadratic({})", driver.class()),
        n,
        d,
        paths: mp,
        steps,
        times: paths.grid().nodes().to_vec(),
        y,
        z,
        y0,
        y0_std_error,
        diagnostics,
    })
}

fn max_z(sol: &SolutionEnsemble) -> f64 {
    let w = sol.n * sol.d;
    sol.z
        .chunks(w)
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

/// Escalates the truncation level until the largest `|Z|` leaves the configured margin below it.
pub fn solve_quadratic(driver: &Driver, xi: &[f64], paths: &PathEnsemble, cfg: &QuadraticConfig) -> Result<QuadraticSolution> {
    if cfg.levels.is_empty() {
        return Err(LabError::Config("empty truncation schedule".into()));
    }
    let cond = Conditioner::local(paths, cfg.bins, cfg.degree)?;
    let labels = (cfg.bins > 1).then(|| quantile_labels(paths, cfg.bins));
    let mut log = Vec::new();
    let mut last_arg = f64::NAN;
    for &k in &cfg.levels {
        let sol = match solve_truncated(driver, xi, paths, &cond, k, cfg) {
            Ok(s) => s,
            Err(LabError::PicardDivergence { step, residual }) => {
                log.push(EscalationEntry {
                    level: k,
                    max_argument: f64::NAN,
                    accepted: false,
                });
                let _ = (step, residual);
                continue;
            }
            Err(e) => return Err(e),
        };
        let arg = max_z(&sol);
        last_arg = arg;
        let accepted = arg <= (1.0 - cfg.margin) * k;
        log.push(EscalationEntry {
            level: k,
            max_argument: arg,
            accepted,
        });
        if accepted {
            let yv = ProcessView::new(paths.grid(), sol.paths, sol.n, &sol.y)?;
            let y_sup = estimate_norm(NormKind::SupP { p: f64::INFINITY }, &yv, Conditioning::Unconditional)?.value;
            let zv = ProcessView::new(paths.grid(), sol.paths, sol.n * sol.d, &sol.z)?;
            let zb = estimate_norm(
                NormKind::Bmo,
                &zv,
                Conditioning::Regression {
                    paths,
                    degree: cfg.degree,
                    regimes: labels.as_deref(),
                },
            )?;
            return Ok(QuadraticSolution {
                solution: sol,
                level: k,
                escalation: log,
                y_sup,
                z_bmo: zb.value,
                z_bmo_std_error: zb.std_error,
            });
        }
    }
    Err(LabError::NoTruncationLevel {
        last_level: *cfg.levels.last().expect("non-empty"),
        max_argument: last_arg,
    })
}

/// Two solves from different inner-iteration starting points.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UniquenessReport {
    pub levels: (f64, f64),
    /// Largest `|Y - Y'|` over paths and nodes.
    pub sup_difference: f64,
    pub y_sup: (f64, f64),
}

pub fn uniqueness_probe(driver: &Driver, xi: &[f64], paths: &PathEnsemble, cfg: &QuadraticConfig) -> Result<UniquenessReport> {
    let a = solve_quadratic(driver, xi, paths, &QuadraticConfig { init: PicardInit::Zero, ..cfg.clone() })?;
    let b = solve_quadratic(
        driver,
        xi,
        paths,
        &QuadraticConfig {
            init: PicardInit::ConditionalTerminal,
            ..cfg.clone()
        },
    )?;
    let sup_difference = a
        .solution
        .y
        .iter()
        .zip(&b.solution.y)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    Ok(UniquenessReport {
        levels: (a.level, b.level),
        sup_difference,
        y_sup: (a.y_sup, b.y_sup),
    })
}

/// Largest deviation of `E[e^{2 b Y_t}]` from `e^{2 b Y_0}` over the grid, with its standard
/// error; zero for an exact martingale.
pub fn cole_hopf_drift(sol: &SolutionEnsemble, b: f64) -> (f64, f64) {
    let y0 = sol.y(0, 0)[0];
    let base = (2.0 * b * y0).exp();
    let mut worst = (0.0, 0.0);
    for k in 0..=sol.steps {
        let vals: Vec<f64> = (0..sol.paths).map(|m| (2.0 * b * sol.y(m, k)[0]).exp()).collect();
        let (mu, se) = mean_se(&vals);
        let dev = (mu - base).abs() / base;
        if dev > worst.0 {
            worst = (dev, se / base);
        }
    }
    worst
}

/// Positive spanning decided exactly, and the sampled inequality
/// `a_m^T f(y, z) <= rho + |a_m^T z|^2 / 2`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AbCondition {
    pub rho: f64,
    pub vectors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AbReport {
    pub spanning: bool,
    pub rank: usize,
    /// Strictly positive weights `lambda` with `sum lambda_m a_m = 0`, when they exist.
    pub certificate: Option<Vec<f64>>,
    /// Smallest `rho + |a_m^T z|^2 / 2 - a_m^T f` over samples and vectors.
    pub worst_margin: f64,
    pub violations: usize,
    pub samples: usize,
}

/// `{a_m}` positively spans `R^n` iff it spans linearly and `0` is a strictly positive
/// combination of all of them; the latter is an LP feasibility problem.
pub fn positive_spanning(vectors: &[Vec<f64>], n: usize) -> Result<(bool, usize, Option<Vec<f64>>)> {
    if vectors.is_empty() || vectors.iter().any(|v| v.len() != n) {
        return Err(LabError::Shape(format!("spanning check needs vectors in R^{n}")));
    }
    let mat = DMatrix::from_fn(n, vectors.len(), |i, j| vectors[j][i]);
    let rank = mat.rank(1e-10);
    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let vars: Vec<_> = vectors.iter().map(|_| lp.add_var(1.0, (1.0, f64::INFINITY))).collect();
    for i in 0..n {
        let expr: Vec<_> = vars.iter().zip(vectors).map(|(&v, a)| (v, a[i])).collect();
        lp.add_constraint(expr, ComparisonOp::Eq, 0.0);
    }
    let certificate = lp.solve().ok().map(|sol| vars.iter().map(|&v| *sol.var_value(v)).collect::<Vec<f64>>());
    let spanning = rank == n && certificate.is_some();
    Ok((spanning, rank, certificate))
}

pub fn check_ab_condition(cond: &AbCondition, driver: &Driver, samples: usize, seed: u64) -> Result<AbReport> {
    let (n, d) = (driver.n, driver.d);
    let (spanning, rank, certificate) = positive_spanning(&cond.vectors, n)?;
    let mut r = rng::stream(seed, Domain::Sampling, 29);
    let x0 = vec![0.0; d];
    let mut worst = f64::INFINITY;
    let mut violations = 0;
    let mut f = vec![0.0; n];
    for _ in 0..samples {
        let y: Vec<f64> = (0..n).map(|_| 2.0 * { let v: f64 = StandardNormal.sample(&mut r); v }).collect();
        let z: Vec<f64> = (0..n * d).map(|_| 2.0 * { let v: f64 = StandardNormal.sample(&mut r); v }).collect();
        let st = PathState { t: r.gen::<f64>(), x: &x0, max_abs: 0.0 };
        evaluate_driver(driver, &st, &y, &z, &mut f)?;
        for a in &cond.vectors {
            let af: f64 = a.iter().zip(&f).map(|(x, y)| x * y).sum();
            let az2: f64 = (0..d)
                .map(|c| (0..n).map(|i| a[i] * z[i * d + c]).sum::<f64>().powi(2))
                .sum();
            let margin = cond.rho + 0.5 * az2 - af;
            if margin < -1e-12 {
                violations += 1;
            }
            worst = worst.min(margin);
        }
    }
    Ok(AbReport {
        spanning,
        rank,
        certificate,
        worst_margin: worst,
        violations,
        samples,
    })
}

/// `h` with gradient and Hessian, and the constant `k` and radius `c` of the pair.
#[derive(Clone)]
pub struct LyapunovPair {
    pub name: String,
    pub h: ScalarFn,
    pub grad: Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>,
    pub hess: Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>,
    pub k: f64,
    pub c: f64,
}

impl LyapunovPair {
    /// `h(y) = |y|^2`.
    pub fn squared_norm(n: usize, k: f64, c: f64) -> Self {
        Self {
            name: "squared-norm".into(),
            h: Arc::new(|y| y.iter().map(|v| v * v).sum()),
            grad: Arc::new(|y, g| {
                for (gi, yi) in g.iter_mut().zip(y) {
                    *gi = 2.0 * yi;
                }
            }),
            hess: Arc::new(move |_, hm| {
                for i in 0..n {
                    for j in 0..n {
                        hm[i * n + j] = if i == j { 2.0 } else { 0.0 };
                    }
                }
            }),
            k,
            c,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LyapunovReport {
    pub valid: bool,
    pub reason: Option<String>,
    /// Smallest `1/2 sum D^2h_ij z^i.z^j - Dh.f - |z|^2 + k` over samples with `|y| <= c`.
    pub worst_margin: f64,
    pub samples: usize,
    /// `k T + 2 sup_{|y| <= c} |h(y)|`.
    pub bmo_bound_squared: f64,
}

pub fn check_lyapunov(pair: &LyapunovPair, driver: &Driver, horizon: f64, samples: usize, seed: u64) -> Result<LyapunovReport> {
    let (n, d) = (driver.n, driver.d);
    let mut r = rng::stream(seed, Domain::Sampling, 31);
    // h(0) = 0 and no first-order term at 0 (this also rejects cones such as |y|).
    let zero = vec![0.0; n];
    let mut reason = None;
    if (pair.h)(&zero).abs() > 1e-12 {
        reason = Some("h(0) != 0".to_string());
    }
    for i in 0..n {
        for eps in [1e-3, 1e-4] {
            let mut e = zero.clone();
            e[i] = eps;
            let up = (pair.h)(&e);
            e[i] = -eps;
            let down = (pair.h)(&e);
            if (up.abs().max(down.abs())) > 10.0 * eps * eps {
                reason.get_or_insert_with(|| format!("Dh(0) != 0 or h not C^2 at 0 (coordinate {i})"));
            }
        }
    }
    let mut sup_h = 0.0f64;
    let mut worst = f64::INFINITY;
    let x0 = vec![0.0; d];
    let mut g = vec![0.0; n];
    let mut hm = vec![0.0; n * n];
    let mut f = vec![0.0; n];
    for _ in 0..samples {
        let dir: Vec<f64> = (0..n).map(|_| -> f64 { StandardNormal.sample(&mut r) }).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        let radius = pair.c * r.gen::<f64>().powf(1.0 / n as f64);
        let y: Vec<f64> = dir.iter().map(|v| v / norm * radius).collect();
        let z: Vec<f64> = (0..n * d).map(|_| 2.0 * { let v: f64 = StandardNormal.sample(&mut r); v }).collect();
        let st = PathState { t: r.gen::<f64>(), x: &x0, max_abs: 0.0 };
        evaluate_driver(driver, &st, &y, &z, &mut f)?;
        (pair.grad)(&y, &mut g);
        (pair.hess)(&y, &mut hm);
        let mut quad = 0.0;
        for i in 0..n {
            for j in 0..n {
                quad += hm[i * n + j] * (0..d).map(|c| z[i * d + c] * z[j * d + c]).sum::<f64>();
            }
        }
        let z2: f64 = z.iter().map(|v| v * v).sum();
        let dhf: f64 = g.iter().zip(&f).map(|(a, b)| a * b).sum();
        worst = worst.min(0.5 * quad - dhf - z2 + pair.k);
        sup_h = sup_h.max((pair.h)(&y).abs());
    }
    // The supremum of |h| on the ball is taken over samples and the boundary sphere.
    for i in 0..n {
        let mut e = zero.clone();
        e[i] = pair.c;
        sup_h = sup_h.max((pair.h)(&e).abs());
    }
    Ok(LyapunovReport {
        valid: reason.is_none() && worst >= -1e-12,
        reason,
        worst_margin: worst,
        samples,
        bmo_bound_squared: pair.k * horizon + 2.0 * sup_h,
    })
}

/// Finite-difference coefficients of the difference of two solutions and the residual of the
/// linear equation they satisfy, plus the stability ratio `||dY||_S^inf / ||d xi||_L^inf`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearizedReport {
    /// Largest per-step RMS residual of
    /// `dY_k - E_k[dY_{k+1}] - (alpha dY_k + (A + dA) dZ_k) dt`.
    pub residual: f64,
    pub ratio: f64,
    pub delta_xi_sup: f64,
    pub delta_y_sup: f64,
}

/// Telescoping finite differences: `out[i][j] = (g^i(..., x'_j, x_{j+1}, ...) - g^i(..., x_j, ...)) / dx_j`.
fn telescoped(eval: &dyn Fn(&[f64], &mut [f64]), x: &[f64], x2: &[f64], width: usize) -> Vec<f64> {
    let len = x.len();
    let mut out = vec![0.0; width * len];
    let mut cur = x.to_vec();
    let mut before = vec![0.0; width];
    let mut after = vec![0.0; width];
    for j in 0..len {
        let dx = x2[j] - x[j];
        if dx == 0.0 {
            continue;
        }
        eval(&cur, &mut before);
        cur[j] = x2[j];
        eval(&cur, &mut after);
        for i in 0..width {
            out[i * len + j] = (after[i] - before[i]) / dx;
        }
    }
    out
}

pub fn linearized_difference_check(
    driver: &Driver,
    paths: &PathEnsemble,
    first: &SolutionEnsemble,
    second: &SolutionEnsemble,
    xi: &[f64],
    xi2: &[f64],
    cfg: &QuadraticConfig,
) -> Result<LinearizedReport> {
    let (n, d, steps, mp) = (driver.n, driver.d, paths.steps(), paths.paths());
    if first.paths != mp || second.paths != mp || first.steps != steps || second.steps != steps {
        return Err(LabError::Shape("solutions live on different grids or path sets".into()));
    }
    let cond = Conditioner::local(paths, cfg.bins, cfg.degree)?;
    let nd = n * d;
    let mut residual = 0.0f64;
    for k in 0..steps {
        let dt = paths.grid().dt(k);
        let next: Vec<f64> = (0..mp)
            .flat_map(|m| {
                let (a, b) = (first.y(m, k + 1), second.y(m, k + 1));
                (0..n).map(move |i| b[i] - a[i]).collect::<Vec<_>>()
            })
            .collect();
        let edy = cond.at(k).project(&next, n);
        let mut ss = 0.0;
        for m in 0..mp {
            let st = paths.path_state(m, k);
            let (y1, y2) = (first.y(m, k), second.y(m, k));
            let (z1, z2) = (first.z(m, k), second.z(m, k));
            // alpha from g's y-dependence at z = Z', dA from its z-dependence at y = Y.
            let gy = |y: &[f64], out: &mut [f64]| driver.eval_g(&st, y, z2, out);
            let alpha = telescoped(&gy, y1, y2, n);
            let gz = |z: &[f64], out: &mut [f64]| driver.eval_g(&st, y1, z, out);
            let da = telescoped(&gz, z1, z2, n);
            // Structural part (flattened (i, j, c) like a coefficient field).
            let mut a = vec![0.0; n * n * d];
            match &driver.part {
                QuadraticPart::QuadraticLinear { b } => {
                    for i in 0..n {
                        for j in 0..n {
                            for c in 0..d {
                                let mut v = b[j] * z1[i * d + c];
                                if i == j {
                                    v += (0..n).map(|l| b[l] * z2[l * d + c]).sum::<f64>();
                                }
                                a[(i * n + j) * d + c] = v;
                            }
                        }
                    }
                }
                QuadraticPart::Unidirectional { a: av, h } => {
                    let hh = |z: &[f64], out: &mut [f64]| out[0] = h(z);
                    let bh = telescoped(&hh, z1, z2, 1);
                    for i in 0..n {
                        for j in 0..n {
                            for c in 0..d {
                                a[(i * n + j) * d + c] = av[i] * bh[j * d + c];
                            }
                        }
                    }
                }
            }
            for i in 0..n {
                let mut drift = 0.0;
                for j in 0..n {
                    drift += alpha[i * n + j] * (y2[j] - y1[j]);
                    for c in 0..d {
                        let dz = z2[j * d + c] - z1[j * d + c];
                        drift += (a[(i * n + j) * d + c] + da[i * nd + j * d + c]) * dz;
                    }
                }
                let r = (y2[i] - y1[i]) - edy[m * n + i] - drift * dt;
                ss += r * r;
            }
        }
        residual = residual.max((ss / mp as f64).sqrt());
    }
    let delta_xi_sup = (0..mp)
        .map(|m| (0..n).map(|i| (xi2[m * n + i] - xi[m * n + i]).powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let delta_y_sup = (0..mp)
        .flat_map(|m| (0..=steps).map(move |k| (m, k)))
        .map(|(m, k)| {
            let (a, b) = (first.y(m, k), second.y(m, k));
            (0..n).map(|i| (b[i] - a[i]).powi(2)).sum::<f64>().sqrt()
        })
        .fold(0.0, f64::max);
    Ok(LinearizedReport {
        residual,
        ratio: if delta_xi_sup > 0.0 { delta_y_sup / delta_xi_sup } else { 0.0 },
        delta_xi_sup,
        delta_y_sup,
    })
}

/// `g(y) = G y + c`, the parametric Lipschitz part used by configurable drivers.
pub fn affine_g(n: usize, matrix: Vec<f64>, constant: Vec<f64>) -> Result<LipschitzFn> {
    if matrix.len() != n * n || constant.len() != n {
        return Err(LabError::Shape(format!("affine part needs an {n}x{n} matrix and an R^{n} constant")));
    }
    Ok(Arc::new(move |_, y, _, out| {
        for i in 0..n {
            out[i] = constant[i] + (0..n).map(|j| matrix[i * n + j] * y[j]).sum::<f64>();
        }
    }))
}

/// `|z|^2 / 2`.
pub fn half_square() -> ScalarFn {
    Arc::new(|z| 0.5 * z.iter().map(|v| v * v).sum::<f64>())
}

/// `|z^1|^2 / 2` (first row only), for `d`-dimensional rows.
pub fn half_square_first_row(d: usize) -> ScalarFn {
    Arc::new(move |z| 0.5 * z[..d].iter().map(|v| v * v).sum::<f64>())
}

pub struct DriverEntry {
    pub name: &'static str,
    pub description: &'static str,
    pub build: fn() -> Driver,
    /// Terminal condition of the shipped instance.
    pub terminal: fn() -> TerminalSpec,
}

fn brownian_terminal() -> TerminalSpec {
    TerminalSpec::Brownian { scale: 1.0, shift: 0.0 }
}

fn bounded_terminal() -> TerminalSpec {
    TerminalSpec::Bounded { amplitude: 0.5, shift: 0.0 }
}

fn cole_hopf() -> Driver {
    Driver {
        name: "cole-hopf-1d".into(),
        n: 1,
        d: 1,
        g: None,
        lipschitz: 0.5,
        part: QuadraticPart::QuadraticLinear { b: vec![0.5] },
    }
}

fn cole_hopf_u() -> Driver {
    Driver {
        name: "cole-hopf-1d-unidirectional".into(),
        n: 1,
        d: 1,
        g: None,
        lipschitz: 1.0,
        part: QuadraticPart::Unidirectional {
            a: vec![1.0],
            h: half_square(),
        },
    }
}

fn ql_coupled() -> Driver {
    Driver {
        name: "ql-coupled-2d".into(),
        n: 2,
        d: 1,
        g: Some(affine_g(2, vec![-0.5, 0.2, 0.1, -0.3], vec![0.1, -0.1]).expect("shapes")),
        lipschitz: 0.6,
        part: QuadraticPart::QuadraticLinear { b: vec![0.5, 0.25] },
    }
}

fn unidirectional() -> Driver {
    Driver {
        name: "unidirectional-2d".into(),
        n: 2,
        d: 1,
        g: Some(affine_g(2, vec![-0.2, 0.0, 0.1, -0.2], vec![0.0, 0.05]).expect("shapes")),
        lipschitz: 0.3,
        part: QuadraticPart::Unidirectional {
            a: vec![1.0, 0.5],
            h: half_square_first_row(1),
        },
    }
}

pub static BUILTIN_DRIVERS: &[DriverEntry] = &[
    DriverEntry {
        name: "cole-hopf-1d",
        description: "n = d = 1, f = z^2 / 2 (quadratic-linear, b = 1/2); Y_0 = log E[e^xi]",
        build: cole_hopf,
        terminal: brownian_terminal,
    },
    DriverEntry {
        name: "cole-hopf-1d-unidirectional",
        description: "n = d = 1, f = a h(z) with a = 1, h = |z|^2 / 2",
        build: cole_hopf_u,
        terminal: brownian_terminal,
    },
    DriverEntry {
        name: "ql-coupled-2d",
        description: "n = 2, d = 1, f = G y + c + z b^T z with b = (0.5, 0.25)",
        build: ql_coupled,
        terminal: bounded_terminal,
    },
    DriverEntry {
        name: "unidirectional-2d",
        description: "n = 2, d = 1, f = G y + c + a |z^1|^2 / 2 with a = (1, 0.5)",
        build: unidirectional,
        terminal: bounded_terminal,
    },
];

pub fn builtin_driver(name: &str) -> Result<Driver> {
    BUILTIN_DRIVERS
        .iter()
        .find(|e| e.name == name)
        .map(|e| (e.build)())
        .ok_or_else(|| {
            let mut known: Vec<&str> = BUILTIN_DRIVERS.iter().map(|e| e.name).collect();
            known.push("custom");
            LabError::unknown("quadratic driver", name, &known)
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::brownian::generate_brownian;
    use crate::grid::TimeGrid;

    fn st() -> (Vec<f64>,) {
        (vec![0.0],)
    }

    #[test]
    fn driver_arithmetic() {
        let (x,) = st();
        let s = PathState { t: 0.0, x: &x, max_abs: 0.0 };
        let mut out = vec![0.0; 1];
        evaluate_driver(&cole_hopf(), &s, &[0.0], &[3.0], &mut out).unwrap();
        assert_eq!(out[0], 4.5);
        let ql = Driver {
            name: "t".into(),
            n: 2,
            d: 1,
            g: None,
            lipschitz: 1.0,
            part: QuadraticPart::QuadraticLinear { b: vec![1.0, 0.0] },
        };
        let mut out = vec![0.0; 2];
        evaluate_driver(&ql, &s, &[0.0, 0.0], &[2.0, 3.0], &mut out).unwrap();
        assert_eq!(out, vec![4.0, 6.0]);
        let u = Driver {
            name: "u".into(),
            n: 2,
            d: 1,
            g: None,
            lipschitz: 1.0,
            part: QuadraticPart::Unidirectional { a: vec![1.0, 1.0], h: half_square() },
        };
        evaluate_driver(&u, &s, &[0.0, 0.0], &[2.0, 0.0], &mut out).unwrap();
        assert_eq!(out, vec![2.0, 2.0]);
        assert!(evaluate_driver(&u, &s, &[0.0], &[2.0, 0.0], &mut out).is_err());
    }

    #[test]
    fn clamp_profile() {
        let k = 2.0;
        assert_eq!(clamp_radius(1.5, k), 1.5);
        assert!((clamp_radius(4.0, k) - 3.0).abs() < 1e-12);
        assert_eq!(clamp_radius(100.0, k), 3.0);
        let mut prev = 0.0;
        for i in 1..400 {
            let r = i as f64 * 0.01;
            let v = clamp_radius(r, k);
            assert!(v <= r + 1e-15 && v >= prev - 1e-15);
            assert!(v - prev <= 0.01 + 1e-12);
            prev = v;
        }
    }

    #[test]
    fn truncated_driver_is_identity_inside_ball() {
        let (x,) = st();
        let s = PathState { t: 0.0, x: &x, max_abs: 0.0 };
        let d = ql_coupled();
        let t = truncate_driver(&d, 4.0).unwrap();
        let (mut a, mut b) = (vec![0.0; 2], vec![0.0; 2]);
        evaluate_driver(&d, &s, &[0.3, -0.2], &[1.0, 2.0], &mut a).unwrap();
        evaluate_driver(&t, &s, &[0.3, -0.2], &[1.0, 2.0], &mut b).unwrap();
        assert_eq!(a, b);
        evaluate_driver(&t, &s, &[0.0, 0.0], &[100.0, 0.0], &mut b).unwrap();
        assert!(b.iter().all(|v| v.abs() < 50.0));
        assert!(truncate_driver(&d, 0.0).is_err());
    }

    #[test]
    fn spanning_examples() {
        let pm = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]];
        let (ok, _, cert) = positive_spanning(&pm, 2).unwrap();
        assert!(ok);
        assert!(cert.unwrap().iter().all(|v| *v >= 1.0));
        let e = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!(!positive_spanning(&e, 2).unwrap().0);
        let line = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        assert!(!positive_spanning(&line, 2).unwrap().0);
    }

    #[test]
    fn lyapunov_zero_driver_margin_is_k() {
        let zero = Driver {
            name: "zero".into(),
            n: 2,
            d: 1,
            g: None,
            lipschitz: 0.0,
            part: QuadraticPart::QuadraticLinear { b: vec![0.0, 0.0] },
        };
        let rep = check_lyapunov(&LyapunovPair::squared_norm(2, 0.7, 1.0), &zero, 1.0, 500, 3).unwrap();
        assert!(rep.valid);
        assert!((rep.worst_margin - 0.7).abs() < 1e-9);
        let mut cone = LyapunovPair::squared_norm(2, 0.0, 1.0);
        cone.h = Arc::new(|y: &[f64]| y.iter().map(|v| v * v).sum::<f64>().sqrt());
        let rep = check_lyapunov(&cone, &zero, 1.0, 10, 3).unwrap();
        assert!(!rep.valid);
    }

    #[test]
    fn zero_driver_gives_conditional_expectation() {
        let p = generate_brownian(&TimeGrid::uniform(1.0, 10).unwrap(), 1, 20000, 5).unwrap();
        let zero = Driver {
            name: "zero".into(),
            n: 1,
            d: 1,
            g: None,
            lipschitz: 0.0,
            part: QuadraticPart::QuadraticLinear { b: vec![0.0] },
        };
        let xi: Vec<f64> = (0..20000).map(|m| p.state(m, 10)[0]).collect();
        let sol = solve_quadratic(&zero, &xi, &p, &QuadraticConfig::default()).unwrap();
        assert!(sol.escalation.last().unwrap().accepted);
        assert!(sol.level <= 4.0, "{:?}", sol.escalation);
        let mean = xi.iter().sum::<f64>() / 20000.0;
        assert!((sol.solution.y0[0] - mean).abs() < 1e-12);
    }

    #[test]
    fn unknown_driver_suggests() {
        let err = builtin_driver("cole-hopf").unwrap_err().to_string();
        assert!(err.contains("cole-hopf-1d"));
    }
}
