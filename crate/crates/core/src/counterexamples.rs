//! The non-martingale rotation exponential, the exit-time identity
//! `E[exp(sigma_b / 2)] = 1 / cos(b)` and the nonexistence construction built on it.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::brownian::PathEnsemble;
use crate::error::{LabError, Result};
use crate::exponential::{ExponentialEnsemble, Scheme};
use crate::field::EmeryField;
use crate::grid::TimeGrid;
use crate::norms::mean_se;
use crate::rng::{self, Domain};

/// Rotation exponential stopped when `|B|` first reaches `level`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EmerySpec {
    pub level: f64,
    /// Horizon in the running clock of the time-changed variant.
    pub effective_horizon: f64,
}

impl Default for EmerySpec {
    fn default() -> Self {
        Self {
            level: FRAC_PI_2,
            effective_horizon: 60.0,
        }
    }
}

impl EmerySpec {
    pub fn field(&self) -> EmeryField {
        EmeryField { level: self.level }
    }

    /// Grid of the time-changed variant: `u = t / (1 - t)` sampled uniformly in `t` and cut
    /// at the effective horizon.
    pub fn time_changed_grid(&self, steps: usize) -> Result<TimeGrid> {
        TimeGrid::compactified(self.effective_horizon, steps)
    }
}

/// Brownian paths stopped when `|B|` first reaches a level.
#[derive(Debug, Clone)]
pub struct StoppedPaths {
    /// Increments of `B^tau`: the crossing increment is cut so that the path lands exactly
    /// on `+-level`, later increments are zero.
    pub paths: PathEnsemble,
    /// Grid index at which the level is reached, per path.
    pub exit_index: Vec<Option<usize>>,
}

impl StoppedPaths {
    pub fn unexited(&self) -> usize {
        self.exit_index.iter().filter(|e| e.is_none()).count()
    }
}

/// Stops every path of a one-dimensional ensemble at the first grid time `|B| >= level`.
pub fn stop_at_level(paths: &PathEnsemble, level: f64) -> Result<StoppedPaths> {
    if paths.dim() != 1 {
        return Err(LabError::Shape("stopping at a level needs d = 1".into()));
    }
    let k_steps = paths.steps();
    let mut inc = Vec::with_capacity(paths.paths() * k_steps);
    let mut exit_index = Vec::with_capacity(paths.paths());
    for m in 0..paths.paths() {
        let mut exit = None;
        for k in 0..k_steps {
            if exit.is_some() {
                inc.push(0.0);
                continue;
            }
            let next = paths.state(m, k + 1)[0];
            if next.abs() >= level {
                inc.push(level.copysign(next) - paths.state(m, k)[0]);
                exit = Some(k + 1);
            } else {
                inc.push(paths.increment(m, k)[0]);
            }
        }
        exit_index.push(exit);
    }
    Ok(StoppedPaths {
        paths: PathEnsemble::from_increments(paths.grid().clone(), 1, paths.seed(), inc),
        exit_index,
    })
}

#[derive(Debug, Clone)]
pub struct EmeryClosedForm {
    pub expo: ExponentialEnsemble,
    /// First grid index with `|B| >= level`, per path.
    pub exit_index: Vec<Option<usize>>,
    pub unexited: usize,
}

/// `S_t = e^{(tau ^ t)/2} [[cos B, sin B], [-sin B, cos B]]` evaluated at `tau ^ t`, with
/// `tau` the first grid time at which `|B| >= level` and `B_tau = +-level` (the value of the
/// continuous path at its exit), so the diagonal vanishes after exit. `S` is kept on every
/// `store_every`-th node (and the last).
pub fn emery_closed_form(spec: &EmerySpec, paths: &PathEnsemble, store_every: usize) -> Result<EmeryClosedForm> {
    let stopped = stop_at_level(paths, spec.level)?;
    let sp = &stopped.paths;
    let k_steps = sp.steps();
    let grid = sp.grid();
    let every = store_every.max(1);
    let mut nodes: Vec<usize> = (0..=k_steps).step_by(every).collect();
    if *nodes.last().expect("node 0") != k_steps {
        nodes.push(k_steps);
    }
    let per_path: Vec<(Vec<f64>, Vec<f64>)> = (0..sp.paths())
        .into_par_iter()
        .map(|m| {
            let mut s = Vec::with_capacity(nodes.len() * 4);
            let mut x = Vec::with_capacity(nodes.len() * 4);
            let exit = stopped.exit_index[m];
            for &k in &nodes {
                let j = exit.map_or(k, |e| e.min(k));
                let (t, b) = (grid.t(j), sp.state(m, j)[0]);
                let (c, sn) = if exit.is_some_and(|e| e <= k) {
                    // cos(+-pi/2) evaluated exactly.
                    if (spec.level - FRAC_PI_2).abs() < 1e-15 {
                        (0.0, b.signum())
                    } else {
                        (b.cos(), b.sin())
                    }
                } else {
                    (b.cos(), b.sin())
                };
                let e = (t / 2.0).exp();
                s.extend_from_slice(&[e * c, e * sn, -e * sn, e * c]);
                let ei = 1.0 / e;
                x.extend_from_slice(&[ei * c, -ei * sn, ei * sn, ei * c]);
            }
            (s, x)
        })
        .collect();
    let mut s = Vec::with_capacity(sp.paths() * nodes.len() * 4);
    let mut x = Vec::with_capacity(s.capacity());
    for (a, b) in per_path {
        s.extend(a);
        x.extend(b);
    }
    let expo = ExponentialEnsemble::from_parts(
        2,
        grid.clone(),
        paths.seed(),
        Scheme::ClosedForm,
        nodes,
        s,
        Some(x),
        vec![false; sp.paths()],
    )?;
    Ok(EmeryClosedForm {
        expo,
        unexited: stopped.unexited(),
        exit_index: stopped.exit_index,
    })
}

/// Terminal RMSE between the Euler product of the stopped rotation field and the closed form
/// on the same (nested) paths, for one grid size.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub steps: usize,
    /// `sqrt(E |S_T^Euler - S_T|_F^2)`
    pub rmse: f64,
    pub std_error: f64,
    /// `log2(rmse(K/2) / rmse(K))` against the previous row.
    pub observed_order: Option<f64>,
    /// Batch-means standard error of `observed_order` (paths split into 20 batches).
    pub order_std_error: Option<f64>,
}

const ORDER_BATCHES: usize = 20;

fn batch_order(prev: &[f64], cur: &[f64]) -> f64 {
    let size = prev.len() / ORDER_BATCHES;
    let orders: Vec<f64> = (0..ORDER_BATCHES)
        .map(|b| {
            let r = b * size..(b + 1) * size;
            let a: f64 = prev[r.clone()].iter().sum();
            let c: f64 = cur[r].iter().sum();
            0.5 * (a / c).log2()
        })
        .collect();
    mean_se(&orders).1
}

/// Strong convergence of Euler to the closed form on `[0, horizon]`. Paths are simulated once
/// on the finest grid and coarsened, so the rows share their Brownian motion.
pub fn emery_convergence(spec: &EmerySpec, horizon: f64, steps: &[usize], paths: usize, seed: u64) -> Result<Vec<ConvergenceRow>> {
    let finest = *steps.iter().max().ok_or_else(|| LabError::Config("no grid sizes".into()))?;
    if steps.iter().any(|&k| k == 0 || finest % k != 0) {
        return Err(LabError::InvalidParameter(format!("grid sizes {steps:?} must divide {finest}")));
    }
    let fine = crate::brownian::generate_brownian(&TimeGrid::uniform(horizon, finest)?, 1, paths, seed)?;
    let field = spec.field();
    if paths < 2 * ORDER_BATCHES {
        return Err(LabError::InvalidParameter(format!("convergence study needs at least {} paths", 2 * ORDER_BATCHES)));
    }
    let mut rows: Vec<ConvergenceRow> = Vec::with_capacity(steps.len());
    let mut prev_err: Option<Vec<f64>> = None;
    let mut sorted = steps.to_vec();
    sorted.sort_unstable();
    for k in sorted {
        let coarse = fine.coarsen(finest / k)?;
        let euler = crate::exponential::integrate(
            &field,
            &coarse,
            crate::exponential::IntegrationOptions {
                store_every: k,
                with_inverse: false,
            },
        )?;
        let stopped = stop_at_level(&coarse, spec.level)?;
        let grid = coarse.grid();
        let err2: Vec<f64> = (0..coarse.paths())
            .into_par_iter()
            .map(|m| {
                let j = stopped.exit_index[m].unwrap_or(k);
                let (t, b) = (grid.t(j), stopped.paths.state(m, j)[0]);
                let e = (t / 2.0).exp();
                let cf = [e * b.cos(), e * b.sin(), -e * b.sin(), e * b.cos()];
                euler.terminal(m).iter().zip(&cf).map(|(a, c)| (a - c).powi(2)).sum::<f64>()
            })
            .collect();
        let (ms, ms_se) = mean_se(&err2);
        let rmse = ms.sqrt();
        let std_error = if rmse > 0.0 { ms_se / (2.0 * rmse) } else { 0.0 };
        let observed_order = rows.last().map(|prev| (prev.rmse / rmse).log2());
        let order_std_error = prev_err.as_ref().map(|p| batch_order(p, &err2));
        rows.push(ConvergenceRow {
            steps: k,
            rmse,
            std_error,
            observed_order,
            order_std_error,
        });
        prev_err = Some(err2);
    }
    Ok(rows)
}

/// Settings of the exit-time simulation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ExitTimeConfig {
    pub paths: usize,
    /// Truncation horizon: paths still inside at this time contribute `e^{horizon/2}`.
    pub horizon: f64,
    pub dt: f64,
    pub seed: u64,
}

impl Default for ExitTimeConfig {
    fn default() -> Self {
        Self {
            paths: 100_000,
            horizon: 20.0,
            dt: 20.0 * 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExitTimeEstimate {
    pub b: f64,
    /// Monte Carlo `E[exp((sigma_b ^ horizon) / 2)]`.
    pub estimate: f64,
    pub std_error: f64,
    /// `1 / cos(b)`.
    pub exact: f64,
    /// Eigen-series value of the truncated expectation at the simulation horizon.
    pub truncated_exact: f64,
    pub relative_error: f64,
    pub unexited: usize,
    /// `b > pi/3`: single-number estimates are unreliable; use truncation curves.
    pub heavy_tail: bool,
    /// `b >= pi / (2 sqrt 2)`: `exp(sigma_b / 2)` has infinite variance.
    pub infinite_variance: bool,
    /// `(L, E[min(exp(sigma_b/2), L)], std_error)` for a ladder of caps.
    pub truncation_curve: Vec<(f64, f64, f64)>,
}

fn validate_level(b: f64) -> Result<()> {
    if !(b > 0.0) || !b.is_finite() {
        return Err(LabError::InvalidParameter(format!("exit level must be positive, got {b}")));
    }
    if b >= FRAC_PI_2 {
        return Err(LabError::InvalidParameter(format!(
            "E[exp(sigma_b/2)] diverges for b >= pi/2 (got b = {b})"
        )));
    }
    Ok(())
}

/// Exit time of `|W|` from `b`, capped at `horizon`; `None` when still inside.
///
/// Between grid points the Brownian bridge crossing probability
/// `exp(-2 (b - w)(b - w') / dt)` (per barrier) is used, so exits of the continuous path
/// between observations are not missed.
fn simulate_exit<R: Rng>(r: &mut R, b: f64, horizon: f64, dt: f64) -> Option<f64> {
    let h = dt.sqrt();
    let mut w = 0.0f64;
    let mut t = 0.0f64;
    while t < horizon {
        let step = dt.min(horizon - t);
        let z: f64 = StandardNormal.sample(r);
        let w2 = w + z * if step < dt { step.sqrt() } else { h };
        if w2.abs() >= b {
            return Some(t + step);
        }
        let up = (-2.0 * (b - w) * (b - w2) / step).exp();
        let dn = (-2.0 * (b + w) * (b + w2) / step).exp();
        let p = 1.0 - (1.0 - up) * (1.0 - dn);
        if r.gen::<f64>() < p {
            return Some(t + 0.5 * step);
        }
        w = w2;
        t += step;
    }
    None
}

/// Monte Carlo estimate of `E[exp(sigma_b / 2)]` for the exit time of `|W|` from `b`.
pub fn exit_time_exponential(b: f64, cfg: &ExitTimeConfig) -> Result<ExitTimeEstimate> {
    validate_level(b)?;
    if cfg.paths < 2 || !(cfg.dt > 0.0) || !(cfg.horizon > 0.0) {
        return Err(LabError::Config("exit-time simulation needs >= 2 paths, dt > 0, horizon > 0".into()));
    }
    let exits: Vec<Option<f64>> = (0..cfg.paths)
        .into_par_iter()
        .map(|m| {
            let mut r = rng::stream(cfg.seed, Domain::ExitTime, m as u64);
            simulate_exit(&mut r, b, cfg.horizon, cfg.dt)
        })
        .collect();
    let weights: Vec<f64> = exits.iter().map(|e| (e.unwrap_or(cfg.horizon) / 2.0).exp()).collect();
    let (estimate, std_error) = mean_se(&weights);
    let exact = 1.0 / b.cos();
    let mut caps = Vec::new();
    let mut cap = 1.5;
    while cap < 1e4 {
        let capped: Vec<f64> = weights.iter().map(|w| w.min(cap)).collect();
        let (mu, se) = mean_se(&capped);
        caps.push((cap, mu, se));
        cap *= 2.0;
    }
    Ok(ExitTimeEstimate {
        b,
        estimate,
        std_error,
        exact,
        truncated_exact: truncated_exit_exponential(b, cfg.horizon),
        relative_error: (estimate - exact).abs() / exact,
        unexited: exits.iter().filter(|e| e.is_none()).count(),
        heavy_tail: b > PI / 3.0 + 1e-12,
        infinite_variance: b * 2f64.sqrt() >= FRAC_PI_2,
        truncation_curve: caps,
    })
}

/// `E[exp((sigma_b ^ T)/2)]` from the eigen-expansion of the survival function,
/// `P(sigma_b > t) = sum_n (4/pi) (-1)^n / (2n+1) exp(-lambda_n t)`,
/// `lambda_n = (2n+1)^2 pi^2 / (8 b^2)`.
pub fn truncated_exit_exponential(b: f64, horizon: f64) -> f64 {
    let mut acc = 0.0;
    for n in 0..20_000u32 {
        let k = f64::from(2 * n + 1);
        let c = 4.0 / PI * if n % 2 == 0 { 1.0 } else { -1.0 } / k;
        let lambda = k * k * PI * PI / (8.0 * b * b);
        let r = 0.5 - lambda;
        let integral = if horizon.is_infinite() {
            -1.0 / r
        } else {
            ((r * horizon).exp() - 1.0) / r
        };
        acc += c * integral;
    }
    1.0 + 0.5 * acc
}

/// Levels `b_k` and horizon of the nonexistence construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NonexistenceSpec {
    pub horizon: f64,
    /// `b_1, b_2, ...` (index 0 holds `b_1`).
    pub b: Vec<f64>,
}

/// Outcome of the numerical check of the three level conditions over a finite prefix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LevelConditions {
    pub increasing_below_half_pi: bool,
    pub terms_vanish: bool,
    pub sum_diverges: bool,
    /// Sums of `1/(2^k cos b_k)` over dyadic blocks `[2^i, 2^{i+1})`.
    pub block_sums: Vec<f64>,
}

impl LevelConditions {
    pub fn all(&self) -> bool {
        self.increasing_below_half_pi && self.terms_vanish && self.sum_diverges
    }
}

impl NonexistenceSpec {
    /// Default levels `cos b_k = (k + 1) / 2^{k+1}`: `b_1 = pi/3`, terms
    /// `1/(2^k cos b_k) = 2/(k+1)` vanish while their sum is harmonic.
    pub fn default_levels(horizon: f64, len: usize) -> Result<Self> {
        let b = (1..=len)
            .map(|k| ((k as f64 + 1.0) / 2f64.powi(k as i32 + 1)).acos())
            .collect();
        let spec = Self { horizon, b };
        let cond = spec.check_conditions();
        if !cond.all() {
            return Err(LabError::InvalidParameter(format!("default levels fail their conditions: {cond:?}")));
        }
        Ok(spec)
    }

    pub fn term(&self, k: usize) -> f64 {
        1.0 / (2f64.powi(k as i32) * self.b[k - 1].cos())
    }

    /// `sum_{k <= j} 2^{-k} / cos b_k`.
    pub fn partial_sum(&self, j: usize) -> f64 {
        (1..=j).map(|k| self.term(k)).sum()
    }

    /// Bound `1/(2^j cos b_j)` on `|Y_0 - E[S_{sigma_j} xi]|`.
    pub fn remainder_bound(&self, j: usize) -> f64 {
        self.term(j)
    }

    /// Increasing in `[0, pi/2)`; terms eventually decreasing towards 0 (the last term is
    /// below a quarter of the largest); divergence via Cauchy condensation: the dyadic block
    /// sums do not decay (every complete block carries at least half of the first).
    pub fn check_conditions(&self) -> LevelConditions {
        let b = &self.b;
        let increasing_below_half_pi =
            b.iter().all(|v| (0.0..FRAC_PI_2).contains(v)) && b.windows(2).all(|w| w[1] > w[0]);
        let terms: Vec<f64> = (1..=b.len()).map(|k| self.term(k)).collect();
        let max = terms.iter().copied().fold(0.0, f64::max);
        let terms_vanish = terms.len() >= 4
            && terms.last().is_some_and(|l| *l < 0.25 * max)
            && terms[terms.len() / 2..].windows(2).all(|w| w[1] <= w[0]);
        let mut block_sums = Vec::new();
        let mut lo = 1;
        while 2 * lo - 1 <= terms.len() {
            block_sums.push(terms[lo - 1..2 * lo - 1].iter().sum());
            lo *= 2;
        }
        let sum_diverges = block_sums.len() >= 3 && block_sums.iter().all(|s| *s >= 0.5 * block_sums[0]);
        LevelConditions {
            increasing_below_half_pi,
            terms_vanish,
            sum_diverges,
            block_sums,
        }
    }

    /// Partition index `k` with `P[A_k] = 2^{-k}`, read off `B_{T/2}`.
    pub fn partition_index(&self, b_half: f64) -> usize {
        let u = Normal::new(0.0, (self.horizon / 2.0).sqrt()).expect("positive sd").cdf(b_half);
        let tail = (1.0 - u).max(f64::MIN_POSITIVE);
        (-tail.log2()).floor() as usize + 1
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlowupRow {
    pub j: usize,
    pub partial_sum: f64,
    /// Monte Carlo `E[1_{A_1 u ... u A_j} exp(<N>_{sigma_j}/2)]`.
    pub simulated_estimate: f64,
    pub simulated_std_error: f64,
    /// Same expectation with the exit clock truncated at the simulation horizon (series).
    pub truncated_partial_sum: f64,
    /// Monte Carlo `E[exp(<N>_{sigma_j}/2)]` including the events `A_k`, `k > j`.
    pub simulated_total: f64,
    pub remainder_bound: f64,
    /// Truncated and untruncated partial sums differ by more than 1%.
    pub truncation_biased: bool,
}

/// One simulated outcome of the construction for a fixed `j`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NonexistenceSample {
    pub partition: usize,
    /// `<N>_{sigma_j}`; the horizon when the exit was not reached.
    pub clock: f64,
    pub exited: bool,
    /// `(cos N_{sigma_j}, sin N_{sigma_j})`.
    pub xi: [f64; 2],
}

/// Simulates `(A_k, <N>_{sigma_j}, N_{sigma_j})` for `cfg.paths` paths. `N` is simulated
/// as a Brownian motion in its own clock `u = <N>`, so the stiff integrand near `T` never
/// appears.
pub fn simulate_nonexistence(spec: &NonexistenceSpec, j: usize, cfg: &ExitTimeConfig) -> Result<Vec<NonexistenceSample>> {
    if j == 0 || j > spec.b.len() {
        return Err(LabError::InvalidParameter(format!("j must be in 1..={}", spec.b.len())));
    }
    let samples = (0..cfg.paths)
        .into_par_iter()
        .map(|m| {
            let mut r = rng::stream(cfg.seed, Domain::ExitTime, rng::key(&[j as u64, m as u64]));
            let z: f64 = StandardNormal.sample(&mut r);
            let k = spec.partition_index(z * (spec.horizon / 2.0).sqrt());
            let level = spec.b[k.min(j) - 1];
            let sign = if r.gen::<bool>() { 1.0 } else { -1.0 };
            let (clock, exited) = match simulate_exit(&mut r, level, cfg.horizon, cfg.dt) {
                Some(u) => (u, true),
                None => (cfg.horizon, false),
            };
            // The exit side is symmetric; the sign only matters for xi.
            let n_end = if exited { sign * level } else { 0.0 };
            NonexistenceSample {
                partition: k,
                clock,
                exited,
                xi: [n_end.cos(), n_end.sin()],
            }
        })
        .collect();
    Ok(samples)
}

/// Table of analytic partial sums, their simulated counterparts (for `j <= simulate_up_to`)
/// and the remainder bounds.
pub fn nonexistence_blowup(
    spec: &NonexistenceSpec,
    j_max: usize,
    simulate_up_to: usize,
    cfg: &ExitTimeConfig,
) -> Result<Vec<BlowupRow>> {
    if j_max == 0 || j_max > spec.b.len() {
        return Err(LabError::InvalidParameter(format!("j_max must be in 1..={}", spec.b.len())));
    }
    if !spec.check_conditions().all() {
        return Err(LabError::InvalidParameter("level sequence fails its conditions".into()));
    }
    let mut rows = Vec::with_capacity(j_max);
    for j in 1..=j_max {
        let partial_sum = spec.partial_sum(j);
        let truncated: f64 = (1..=j)
            .map(|k| truncated_exit_exponential(spec.b[k - 1], cfg.horizon) / 2f64.powi(k as i32))
            .sum();
        let (est, se, total) = if j <= simulate_up_to {
            let s = simulate_nonexistence(spec, j, cfg)?;
            let inside: Vec<f64> = s
                .iter()
                .map(|x| if x.partition <= j { (x.clock / 2.0).exp() } else { 0.0 })
                .collect();
            let all: Vec<f64> = s.iter().map(|x| (x.clock / 2.0).exp()).collect();
            let (e, se) = mean_se(&inside);
            (e, se, mean_se(&all).0)
        } else {
            (f64::NAN, f64::NAN, f64::NAN)
        };
        rows.push(BlowupRow {
            j,
            partial_sum,
            simulated_estimate: est,
            simulated_std_error: se,
            truncated_partial_sum: truncated,
            simulated_total: total,
            remainder_bound: spec.remainder_bound(j),
            truncation_biased: (partial_sum - truncated).abs() > 0.01 * partial_sum,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn series_matches_secant_at_infinite_horizon() {
        for b in [0.3, PI / 4.0, PI / 3.0, 1.4] {
            let v = truncated_exit_exponential(b, f64::INFINITY);
            assert!((v - 1.0 / b.cos()).abs() < 1e-6, "b = {b}: {v}");
        }
    }

    #[test]
    fn truncation_at_zero_horizon_is_one() {
        assert!((truncated_exit_exponential(1.0, 1e-12) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_levels_outside_range() {
        let cfg = ExitTimeConfig { paths: 10, ..Default::default() };
        assert!(exit_time_exponential(FRAC_PI_2, &cfg).is_err());
        assert!(exit_time_exponential(0.0, &cfg).is_err());
    }

    #[test]
    fn default_levels_start_at_third_pi() {
        let s = NonexistenceSpec::default_levels(1.0, 40).unwrap();
        assert!((s.b[0] - PI / 3.0).abs() < 1e-12);
        assert!((s.term(1) - 1.0).abs() < 1e-12);
        assert!((s.term(9) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn summable_levels_fail_divergence_check() {
        // cos b_k = 2^{-k/2}: terms 2^{-k/2} are summable.
        let b = (1..=40).map(|k| 2f64.powf(-(k as f64) / 2.0).acos()).collect();
        let s = NonexistenceSpec { horizon: 1.0, b };
        let c = s.check_conditions();
        assert!(c.increasing_below_half_pi && c.terms_vanish);
        assert!(!c.sum_diverges);
    }

    #[test]
    fn partition_has_dyadic_masses() {
        let s = NonexistenceSpec::default_levels(2.0, 10).unwrap();
        let nrm = Normal::new(0.0, 1.0).unwrap();
        // Quantile boundaries of A_1 = {U < 1/2}, A_2 = {1/2 <= U < 3/4}.
        let q = |u: f64| nrm.inverse_cdf(u);
        assert_eq!(s.partition_index(q(0.25)), 1);
        assert_eq!(s.partition_index(q(0.6)), 2);
        assert_eq!(s.partition_index(q(0.8)), 3);
    }

    #[test]
    fn stopped_paths_land_on_the_level() {
        let g = TimeGrid::uniform(4.0, 200).unwrap();
        let p = crate::brownian::generate_brownian(&g, 1, 50, 8).unwrap();
        let st = stop_at_level(&p, 1.0).unwrap();
        for m in 0..50 {
            if let Some(e) = st.exit_index[m] {
                assert!((st.paths.state(m, e)[0].abs() - 1.0).abs() < 1e-12);
                assert_eq!(st.paths.state(m, 200)[0], st.paths.state(m, e)[0]);
                assert!((0..e).all(|k| p.state(m, k)[0].abs() < 1.0));
            }
        }
    }

    #[test]
    fn emery_closed_form_is_scaled_rotation() {
        let g = TimeGrid::uniform(2.0, 50).unwrap();
        let p = crate::brownian::generate_brownian(&g, 1, 20, 4).unwrap();
        let cf = emery_closed_form(&EmerySpec::default(), &p, 1).unwrap();
        for m in 0..20 {
            for k in [0, 10, 50] {
                let s = cf.expo.s(m, k);
                let det = s[0] * s[3] - s[1] * s[2];
                let stop = cf.exit_index[m].map_or(k, |e| e.min(k));
                assert!((det - g.t(stop).exp()).abs() < 1e-12 * det.max(1.0));
                if cf.exit_index[m].is_some_and(|e| e <= k) {
                    assert_eq!(s[0], 0.0);
                    assert_eq!(s[3], 0.0);
                }
            }
            assert_eq!(cf.expo.s(m, 0), &[1.0, 0.0, 0.0, 1.0]);
        }
    }
}
