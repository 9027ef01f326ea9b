//! Matrix stochastic exponential `dS = S A dB`, its inverse `dX = A^2 X dt - A X dB`,
//! reverse Hölder constants and martingale diagnostics.

use std::io::Write;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::brownian::{fmt17, PathEnsemble, PathState};
use crate::error::{LabError, Result};
use crate::field::CoefficientField;
use crate::grid::TimeGrid;
use crate::linalg::{distance_from_identity, identity, inverse, matmul, op_norm};
use crate::norms::mean_se;
use crate::regression::ConditionalProjector;
use crate::rng::{self, Domain};
use crate::tensor::{contract_increment, contracted_square};

/// Paths beyond this magnitude are flagged as overflowed.
const OVERFLOW: f64 = 1e150;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Euler,
    ClosedForm,
}

#[derive(Debug, Clone, Copy)]
pub struct IntegrationOptions {
    /// Keep `S` at every `store_every`-th node (node 0 and node K are always kept).
    pub store_every: usize,
    pub with_inverse: bool,
}

impl Default for IntegrationOptions {
    fn default() -> Self {
        Self {
            store_every: 1,
            with_inverse: true,
        }
    }
}

/// Simulated `S` (and optionally `S^{-1}`) per Brownian path.
#[derive(Debug, Clone)]
pub struct ExponentialEnsemble {
    n: usize,
    grid: TimeGrid,
    paths: usize,
    seed: u64,
    scheme: Scheme,
    stored: Vec<usize>,
    s: Vec<f64>,
    s_inv: Option<Vec<f64>>,
    inverse_residual: Option<Vec<f64>>,
    /// `(t_k, sqrt(E|S_k X_k - I|^2))` at every integration node, when integrated here.
    inverse_rms: Option<Vec<(f64, f64)>>,
    flagged: Vec<bool>,
}

fn stored_nodes(steps: usize, every: usize) -> Vec<usize> {
    let every = every.max(1);
    let mut v: Vec<usize> = (0..=steps).step_by(every).collect();
    if *v.last().unwrap() != steps {
        v.push(steps);
    }
    v
}

struct PathRun {
    s: Vec<f64>,
    x: Option<Vec<f64>>,
    residual: f64,
    /// `|S_k X_k - I|^2` after every step.
    step_sq: Vec<f64>,
    flagged: bool,
}

/// Euler scheme for `S` (and for the inverse dynamics when requested).
pub fn integrate(
    field: &dyn CoefficientField,
    paths: &PathEnsemble,
    opts: IntegrationOptions,
) -> Result<ExponentialEnsemble> {
    check_shapes(field, paths)?;
    let n = field.n();
    let d = field.d();
    let k_steps = paths.steps();
    let stored = stored_nodes(k_steps, opts.store_every);
    let nn = n * n;
    let runs: Vec<PathRun> = (0..paths.paths())
        .into_par_iter()
        .map(|m| {
            let mut s = identity(n);
            let mut x = identity(n);
            let mut a = vec![0.0; nn * d];
            let mut adb = vec![0.0; nn];
            let mut a2 = vec![0.0; nn];
            let mut tmp = vec![0.0; nn];
            let mut tmp2 = vec![0.0; nn];
            let mut out_s = Vec::with_capacity(stored.len() * nn);
            let mut out_x = opts.with_inverse.then(|| Vec::with_capacity(stored.len() * nn));
            out_s.extend_from_slice(&s);
            if let Some(ox) = out_x.as_mut() {
                ox.extend_from_slice(&x);
            }
            let mut next_store = 1;
            let mut residual = 0.0f64;
            let mut step_sq = Vec::with_capacity(if opts.with_inverse { k_steps } else { 0 });
            let mut flagged = false;
            for k in 0..k_steps {
                let st = paths.path_state(m, k);
                field.eval(&st, &mut a);
                contract_increment(&a, paths.increment(m, k), n, d, &mut adb);
                matmul(&s, &adb, n, &mut tmp);
                for (v, t) in s.iter_mut().zip(&tmp) {
                    *v += t;
                }
                if opts.with_inverse {
                    let dt = paths.grid().dt(k);
                    contracted_square(&a, n, d, &mut a2);
                    matmul(&a2, &x, n, &mut tmp);
                    matmul(&adb, &x, n, &mut tmp2);
                    for i in 0..nn {
                        x[i] += tmp[i] * dt - tmp2[i];
                    }
                    matmul(&s, &x, n, &mut tmp);
                    let dist = distance_from_identity(&tmp, n);
                    residual = residual.max(dist);
                    step_sq.push(dist * dist);
                }
                if !flagged && s.iter().chain(x.iter()).any(|v| !v.is_finite() || v.abs() > OVERFLOW) {
                    flagged = true;
                }
                if next_store < stored.len() && stored[next_store] == k + 1 {
                    out_s.extend_from_slice(&s);
                    if let Some(ox) = out_x.as_mut() {
                        ox.extend_from_slice(&x);
                    }
                    next_store += 1;
                }
            }
            PathRun {
                s: out_s,
                x: out_x,
                residual: if flagged { f64::NAN } else { residual },
                step_sq,
                flagged,
            }
        })
        .collect();
    let mut s = Vec::with_capacity(paths.paths() * stored.len() * nn);
    let mut s_inv = opts.with_inverse.then(|| Vec::with_capacity(s.capacity()));
    let mut res = opts.with_inverse.then(Vec::new);
    let mut flagged = Vec::with_capacity(paths.paths());
    let mut sum_sq = vec![0.0; if opts.with_inverse { k_steps } else { 0 }];
    let mut live = 0usize;
    for r in runs {
        if opts.with_inverse && !r.flagged {
            live += 1;
            for (a, b) in sum_sq.iter_mut().zip(&r.step_sq) {
                *a += b;
            }
        }
        s.extend_from_slice(&r.s);
        if let (Some(si), Some(x)) = (s_inv.as_mut(), r.x) {
            si.extend_from_slice(&x);
        }
        if let Some(rv) = res.as_mut() {
            rv.push(r.residual);
        }
        flagged.push(r.flagged);
    }
    Ok(ExponentialEnsemble {
        n,
        grid: paths.grid().clone(),
        paths: paths.paths(),
        seed: paths.seed(),
        scheme: Scheme::Euler,
        stored,
        s,
        s_inv,
        inverse_residual: res,
        inverse_rms: opts.with_inverse.then(|| {
            std::iter::once((0.0, 0.0))
                .chain(
                    sum_sq
                        .iter()
                        .enumerate()
                        .map(|(k, v)| (paths.grid().t(k + 1), (v / live.max(1) as f64).sqrt())),
                )
                .collect()
        }),
        flagged,
    })
}

/// Euler scheme for `S` alone: `S_{k+1} = S_k (I + A_k dB_k)`.
pub fn integrate_exponential(field: &dyn CoefficientField, paths: &PathEnsemble) -> Result<ExponentialEnsemble> {
    integrate(
        field,
        paths,
        IntegrationOptions {
            store_every: 1,
            with_inverse: false,
        },
    )
}

/// Simulated inverse: `X_{k+1} = X_k + A_k^2 X_k dt - (A_k dB_k) X_k`, `X_0 = I`.
#[derive(Debug, Clone)]
pub struct InverseEnsemble {
    pub n: usize,
    pub stored: Vec<usize>,
    /// `paths x stored x n^2`.
    pub x: Vec<f64>,
}

pub fn integrate_inverse(field: &dyn CoefficientField, paths: &PathEnsemble) -> Result<InverseEnsemble> {
    let e = integrate(field, paths, IntegrationOptions::default())?;
    Ok(InverseEnsemble {
        n: e.n,
        stored: e.stored,
        x: e.s_inv.expect("inverse requested"),
    })
}

fn check_shapes(field: &dyn CoefficientField, paths: &PathEnsemble) -> Result<()> {
    if field.d() != paths.dim() {
        return Err(LabError::Shape(format!(
            "field '{}' expects d = {}, paths have d = {}",
            field.name(),
            field.d(),
            paths.dim()
        )));
    }
    if field.n() == 0 {
        return Err(LabError::Shape("field has n = 0".into()));
    }
    Ok(())
}

impl ExponentialEnsemble {
    /// Assembles an ensemble from precomputed values (`paths x stored x n^2`).
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        n: usize,
        grid: TimeGrid,
        seed: u64,
        scheme: Scheme,
        stored: Vec<usize>,
        s: Vec<f64>,
        s_inv: Option<Vec<f64>>,
        flagged: Vec<bool>,
    ) -> Result<Self> {
        let per = stored.len() * n * n;
        if per == 0 || s.len() % per != 0 || flagged.len() != s.len() / per {
            return Err(LabError::Shape("exponential ensemble buffers are inconsistent".into()));
        }
        if stored.first() != Some(&0) || stored.last() != Some(&grid.steps()) {
            return Err(LabError::Shape("stored nodes must include 0 and K".into()));
        }
        if let Some(x) = &s_inv {
            if x.len() != s.len() {
                return Err(LabError::Shape("inverse buffer length differs".into()));
            }
        }
        let paths = s.len() / per;
        let inverse_residual = s_inv.as_ref().map(|x| {
            (0..paths)
                .map(|m| {
                    let mut tmp = vec![0.0; n * n];
                    (0..stored.len())
                        .map(|i| {
                            let o = (m * stored.len() + i) * n * n;
                            matmul(&s[o..o + n * n], &x[o..o + n * n], n, &mut tmp);
                            distance_from_identity(&tmp, n)
                        })
                        .fold(0.0, f64::max)
                })
                .collect()
        });
        Ok(Self {
            n,
            grid,
            paths,
            seed,
            scheme,
            stored,
            s,
            s_inv,
            inverse_residual,
            inverse_rms: None,
            flagged,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    pub fn paths(&self) -> usize {
        self.paths
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn scheme(&self) -> Scheme {
        self.scheme
    }
    /// Node indices at which `S` is kept.
    pub fn stored_nodes(&self) -> &[usize] {
        &self.stored
    }

    /// `S` of path `m` at the `idx`-th stored node.
    pub fn s(&self, m: usize, idx: usize) -> &[f64] {
        let nn = self.n * self.n;
        let o = (m * self.stored.len() + idx) * nn;
        &self.s[o..o + nn]
    }

    pub fn terminal(&self, m: usize) -> &[f64] {
        self.s(m, self.stored.len() - 1)
    }

    pub fn s_inv(&self, m: usize, idx: usize) -> Option<&[f64]> {
        let nn = self.n * self.n;
        let o = (m * self.stored.len() + idx) * nn;
        self.s_inv.as_ref().map(|x| &x[o..o + nn])
    }

    pub fn has_inverse(&self) -> bool {
        self.s_inv.is_some()
    }

    pub fn is_flagged(&self, m: usize) -> bool {
        self.flagged[m]
    }

    pub fn flagged_count(&self) -> usize {
        self.flagged.iter().filter(|f| **f).count()
    }

    /// Per-path `max_k |S_k X_k - I|` over all integration steps (stored steps for
    /// assembled ensembles).
    pub fn inverse_residuals(&self) -> Option<&[f64]> {
        self.inverse_residual.as_deref()
    }

    /// Largest inverse residual over unflagged paths.
    pub fn max_inverse_residual(&self) -> Option<f64> {
        self.inverse_residual.as_ref().map(|r| {
            r.iter()
                .zip(&self.flagged)
                .filter(|(_, f)| !**f)
                .map(|(v, _)| *v)
                .fold(0.0, f64::max)
        })
    }

    /// `(t, sqrt(E|S_t X_t - I|^2))` over unflagged paths, `X` the simulated inverse: at every
    /// integration node for Euler ensembles, at stored nodes otherwise. Unlike the per-path
    /// maximum this does not grow with the number of paths.
    pub fn inverse_residual_profile(&self) -> Option<Vec<(f64, f64)>> {
        if let Some(p) = &self.inverse_rms {
            return Some(p.clone());
        }
        self.s_inv.as_ref()?;
        let n = self.n;
        let live: Vec<usize> = (0..self.paths).filter(|&m| !self.flagged[m]).collect();
        let out = self
            .stored
            .iter()
            .enumerate()
            .map(|(idx, &k)| {
                let ss: f64 = live
                    .par_iter()
                    .map(|&m| {
                        let mut tmp = vec![0.0; n * n];
                        matmul(self.s(m, idx), self.s_inv(m, idx).expect("inverse stored"), n, &mut tmp);
                        distance_from_identity(&tmp, n).powi(2)
                    })
                    .collect::<Vec<f64>>()
                    .iter()
                    .sum();
                (self.grid.t(k), (ss / live.len().max(1) as f64).sqrt())
            })
            .collect();
        Some(out)
    }

    /// `S_{t_k}^{-1}` from the simulated inverse when present, else by LU.
    fn inverse_at(&self, m: usize, idx: usize) -> Option<Vec<f64>> {
        match self.s_inv(m, idx) {
            Some(x) => Some(x.to_vec()),
            None => inverse(self.s(m, idx), self.n),
        }
    }
}

/// One point of a per-time profile.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ProfilePoint {
    pub index: usize,
    pub t: f64,
    pub estimate: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReverseHolderReport {
    pub p: f64,
    pub rp_estimate: f64,
    pub std_error: f64,
    pub attaining_index: usize,
    pub attaining_time: f64,
    pub profile: Vec<ProfilePoint>,
    /// Largest estimated `E_t[sup_{s >= t} |S_t^{-1} S_s|^p]` when requested.
    pub doob_sup_estimate: Option<f64>,
    pub estimator: String,
    pub flagged_paths: usize,
}

/// Everything a conditional estimator may use.
#[derive(Clone, Copy)]
pub struct RpContext<'a> {
    pub expo: &'a ExponentialEnsemble,
    pub paths: &'a PathEnsemble,
    pub field: &'a dyn CoefficientField,
}

/// Estimated `max_paths E_{t_k}[...]` of the terminal and running-sup quantities.
#[derive(Debug, Clone, Copy)]
pub struct ConditionalPoint {
    pub terminal: ProfilePoint,
    pub sup: Option<ProfilePoint>,
}

/// Strategy for `E_{t_k}[|S_{t_k}^{-1} S_T|^p]` and its essential supremum.
pub trait RpEstimator: Send + Sync {
    fn name(&self) -> &'static str;
    fn profile(&self, ctx: &RpContext<'_>, p: f64, with_sup: bool) -> Result<Vec<ConditionalPoint>>;
}

/// Least-squares regression of per-path targets on the Brownian state (split by regime
/// for path-dependent fields).
///
/// The essential supremum is taken over paths whose state lies inside the central
/// `[trim, 1 - trim]` quantile box, where the fit is well supported by data.
#[derive(Debug, Clone, Copy)]
pub struct RegressionRp {
    pub degree: usize,
    pub trim: f64,
}

impl RegressionRp {
    pub fn new(degree: usize) -> Self {
        Self { degree, trim: 0.01 }
    }
}

/// Row mask of the paths inside the per-coordinate `[trim, 1 - trim]` quantile box.
fn central_rows(feats: &[f64], d: usize, trim: f64) -> Vec<bool> {
    let rows = feats.len() / d;
    let mut mask = vec![true; rows];
    if trim <= 0.0 || rows < 10 {
        return mask;
    }
    for c in 0..d {
        let mut col: Vec<f64> = (0..rows).map(|r| feats[r * d + c]).collect();
        col.sort_by(f64::total_cmp);
        let lo = col[((rows as f64 * trim) as usize).min(rows - 1)];
        let hi = col[((rows as f64 * (1.0 - trim)) as usize).min(rows - 1)];
        for r in 0..rows {
            let v = feats[r * d + c];
            if v < lo || v > hi {
                mask[r] = false;
            }
        }
    }
    if mask.iter().any(|m| *m) {
        mask
    } else {
        vec![true; rows]
    }
}

/// Nested simulation: inner continuations from the first `outer` paths at every stored node.
#[derive(Debug, Clone, Copy)]
pub struct NestedRp {
    pub outer: usize,
    pub inner: usize,
    pub seed: u64,
}

impl RpEstimator for RegressionRp {
    fn name(&self) -> &'static str {
        "regression"
    }

    fn profile(&self, ctx: &RpContext<'_>, p: f64, with_sup: bool) -> Result<Vec<ConditionalPoint>> {
        let expo = ctx.expo;
        let n = expo.n;
        let last = expo.stored.len() - 1;
        let keep: Vec<usize> = (0..expo.paths).filter(|&m| !expo.is_flagged(m)).collect();
        if keep.is_empty() {
            return Err(LabError::Empty);
        }
        let d = ctx.paths.dim();
        let mut out = Vec::with_capacity(expo.stored.len());
        for (idx, &k) in expo.stored.iter().enumerate() {
            let t = expo.grid.t(k);
            if idx == last {
                let one = ProfilePoint { index: k, t, estimate: 1.0, std_error: 0.0 };
                out.push(ConditionalPoint { terminal: one, sup: with_sup.then_some(one) });
                continue;
            }
            let vals: Vec<(f64, f64)> = keep
                .par_iter()
                .map(|&m| {
                    let Some(inv) = expo.inverse_at(m, idx) else {
                        return (f64::NAN, f64::NAN);
                    };
                    let mut tmp = vec![0.0; n * n];
                    matmul(&inv, expo.terminal(m), n, &mut tmp);
                    let term = op_norm(&tmp, n).powf(p);
                    let sup = if with_sup {
                        (idx..=last)
                            .map(|j| {
                                matmul(&inv, expo.s(m, j), n, &mut tmp);
                                op_norm(&tmp, n).powf(p)
                            })
                            .fold(0.0, f64::max)
                    } else {
                        0.0
                    };
                    (term, sup)
                })
                .collect();
            if vals.iter().any(|v| !v.0.is_finite()) {
                return Err(LabError::Singular(format!("S along a path at node {k}")));
            }
            let mut feats = Vec::with_capacity(keep.len() * d);
            let mut labels = Vec::with_capacity(keep.len());
            for &m in &keep {
                let st = ctx.paths.path_state(m, k);
                feats.extend_from_slice(st.x);
                labels.push(ctx.field.regime(&st));
            }
            let proj = ConditionalProjector::new(&feats, d, Some(&labels), self.degree)?;
            let central = central_rows(&feats, d, self.trim);
            let point = |target: Vec<f64>| {
                let fit = proj.fit_column(&target);
                let masked: Vec<f64> = fit
                    .fitted
                    .iter()
                    .zip(&central)
                    .map(|(v, c)| if *c { *v } else { f64::NEG_INFINITY })
                    .collect();
                let (arg, est) = argmax(&masked);
                ProfilePoint { index: k, t, estimate: est, std_error: proj.prediction_se(&fit, arg) }
            };
            let terminal = point(vals.iter().map(|v| v.0).collect());
            let sup = with_sup.then(|| point(vals.iter().map(|v| v.1).collect()));
            out.push(ConditionalPoint { terminal, sup });
        }
        Ok(out)
    }
}

fn argmax(v: &[f64]) -> (usize, f64) {
    v.iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, x)| if x > acc.1 { (i, x) } else { acc })
}

impl RpEstimator for NestedRp {
    fn name(&self) -> &'static str {
        "nested"
    }

    fn profile(&self, ctx: &RpContext<'_>, p: f64, with_sup: bool) -> Result<Vec<ConditionalPoint>> {
        if self.inner < 2 || self.outer == 0 {
            return Err(LabError::InvalidParameter("nested estimator needs outer >= 1 and inner >= 2".into()));
        }
        let expo = ctx.expo;
        let field = ctx.field;
        let n = expo.n;
        let d = field.d();
        let grid = ctx.paths.grid();
        let k_steps = grid.steps();
        let candidates: Vec<usize> = (0..expo.paths.min(self.outer)).filter(|&m| !expo.is_flagged(m)).collect();
        if candidates.is_empty() {
            return Err(LabError::Empty);
        }
        let mut out = Vec::with_capacity(expo.stored.len());
        for &k in &expo.stored {
            let t = grid.t(k);
            if k == k_steps {
                let one = ProfilePoint { index: k, t, estimate: 1.0, std_error: 0.0 };
                out.push(ConditionalPoint { terminal: one, sup: with_sup.then_some(one) });
                continue;
            }
            // Outer paths sharing the same state (all of them at t = 0) are pooled, so the
            // maximum is not taken over repeated estimates of one conditional law.
            let mut groups: Vec<(usize, usize)> = Vec::new();
            for &m in &candidates {
                let st = ctx.paths.path_state(m, k);
                match groups.iter_mut().find(|(r, _)| {
                    let o = ctx.paths.path_state(*r, k);
                    o.x == st.x && o.max_abs == st.max_abs
                }) {
                    Some(g) => g.1 += 1,
                    None => groups.push((m, 1)),
                }
                if groups.len() > 64 {
                    break;
                }
            }
            let outer: Vec<(usize, usize)> = if groups.len() > 64 {
                candidates.iter().map(|&m| (m, 1)).collect()
            } else {
                groups
            };
            let per_outer: Vec<((f64, f64), (f64, f64))> = outer
                .par_iter()
                .map(|&(m, mult)| {
                    let inner_count = self.inner * mult;
                    let mut r = rng::stream(self.seed, Domain::Nested, rng::key(&[m as u64, k as u64]));
                    let start = ctx.paths.path_state(m, k);
                    let mut terms = Vec::with_capacity(inner_count);
                    let mut sups = Vec::with_capacity(inner_count);
                    let mut a = vec![0.0; n * n * d];
                    let mut adb = vec![0.0; n * n];
                    let mut tmp = vec![0.0; n * n];
                    let mut x = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for _ in 0..inner_count {
                        x.copy_from_slice(start.x);
                        let mut max_abs = start.max_abs;
                        let mut s = identity(n);
                        let mut sup = 1.0f64;
                        for j in k..k_steps {
                            let st = PathState { t: grid.t(j), x: &x, max_abs };
                            field.eval(&st, &mut a);
                            let h = grid.dt(j).sqrt();
                            for v in db.iter_mut() {
                                let z: f64 = StandardNormal.sample(&mut r);
                                *v = z * h;
                            }
                            contract_increment(&a, &db, n, d, &mut adb);
                            matmul(&s, &adb, n, &mut tmp);
                            for (v, w) in s.iter_mut().zip(&tmp) {
                                *v += w;
                            }
                            for (xv, dv) in x.iter_mut().zip(&db) {
                                *xv += dv;
                            }
                            max_abs = max_abs.max(x.iter().map(|v| v * v).sum::<f64>().sqrt());
                            if with_sup {
                                sup = sup.max(op_norm(&s, n).powf(p));
                            }
                        }
                        terms.push(op_norm(&s, n).powf(p));
                        sups.push(sup);
                    }
                    (mean_se(&terms), mean_se(&sups))
                })
                .collect();
            let pick = |sel: &dyn Fn(&((f64, f64), (f64, f64))) -> (f64, f64)| {
                let (i, _) = argmax(&per_outer.iter().map(|v| sel(v).0).collect::<Vec<_>>());
                let (e, se) = sel(&per_outer[i]);
                ProfilePoint { index: k, t, estimate: e, std_error: se }
            };
            let terminal = pick(&|v| v.0);
            let sup = with_sup.then(|| pick(&|v| v.1));
            out.push(ConditionalPoint { terminal, sup });
        }
        Ok(out)
    }
}

/// Registry of conditional estimators for `R_p`.
pub fn rp_estimator(name: &str, degree: usize, outer: usize, inner: usize, seed: u64) -> Result<Box<dyn RpEstimator>> {
    match name {
        "regression" => Ok(Box::new(RegressionRp::new(degree))),
        "nested" => Ok(Box::new(NestedRp { outer, inner, seed })),
        other => Err(LabError::unknown("conditional estimator", other, &["nested", "regression"])),
    }
}

/// `R_p = max over grid times of the estimated essential sup of E_t[|S_t^{-1} S_T|^p]`.
pub fn estimate_reverse_holder(ctx: &RpContext<'_>, p: f64, est: &dyn RpEstimator) -> Result<ReverseHolderReport> {
    reverse_holder_impl(ctx, p, est, false)
}

fn reverse_holder_impl(
    ctx: &RpContext<'_>,
    p: f64,
    est: &dyn RpEstimator,
    with_sup: bool,
) -> Result<ReverseHolderReport> {
    if p.is_nan() || p < 1.0 {
        return Err(LabError::InvalidParameter(format!("reverse Hölder exponent must be >= 1, got {p}")));
    }
    if ctx.expo.paths == 0 {
        return Err(LabError::Empty);
    }
    let pts = est.profile(ctx, p, with_sup)?;
    let profile: Vec<ProfilePoint> = pts.iter().map(|c| c.terminal).collect();
    let best = profile
        .iter()
        .copied()
        .fold(profile[profile.len() - 1], |acc, q| if q.estimate > acc.estimate { q } else { acc });
    let doob = with_sup.then(|| pts.iter().filter_map(|c| c.sup).map(|q| q.estimate).fold(0.0, f64::max));
    Ok(ReverseHolderReport {
        p,
        rp_estimate: best.estimate,
        std_error: best.std_error,
        attaining_index: best.index,
        attaining_time: best.t,
        profile,
        doob_sup_estimate: doob,
        estimator: est.name().to_string(),
        flagged_paths: ctx.expo.flagged_count(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DoobPoint {
    pub index: usize,
    pub t: f64,
    pub sup_estimate: f64,
    pub std_error: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DoobReport {
    pub p: f64,
    /// `(p / (p - 1))^p`
    pub factor: f64,
    pub rp: ReverseHolderReport,
    pub profile: Vec<DoobPoint>,
    pub max_ratio: f64,
    pub max_ratio_std_error: f64,
}

pub fn doob_factor(p: f64) -> f64 {
    (p / (p - 1.0)).powf(p)
}

/// Ratio of `E_t[sup_{s >= t} |S_t^{-1} S_s|^p]` to `(p/(p-1))^p R_p` on every stored node.
pub fn doob_sup_check(ctx: &RpContext<'_>, p: f64, est: &dyn RpEstimator) -> Result<DoobReport> {
    if p.is_nan() || p <= 1.0 {
        return Err(LabError::InvalidParameter(format!("Doob check needs p > 1, got {p}")));
    }
    let pts = est.profile(ctx, p, true)?;
    let rp = {
        let profile: Vec<ProfilePoint> = pts.iter().map(|c| c.terminal).collect();
        let best = profile
            .iter()
            .copied()
            .fold(profile[profile.len() - 1], |acc, q| if q.estimate > acc.estimate { q } else { acc });
        ReverseHolderReport {
            p,
            rp_estimate: best.estimate,
            std_error: best.std_error,
            attaining_index: best.index,
            attaining_time: best.t,
            profile,
            doob_sup_estimate: pts.iter().filter_map(|c| c.sup).map(|q| q.estimate).reduce(f64::max),
            estimator: est.name().to_string(),
            flagged_paths: ctx.expo.flagged_count(),
        }
    };
    let factor = doob_factor(p);
    let denom = factor * rp.rp_estimate;
    let profile: Vec<DoobPoint> = pts
        .iter()
        .filter_map(|c| c.sup)
        .map(|q| DoobPoint {
            index: q.index,
            t: q.t,
            sup_estimate: q.estimate,
            std_error: q.std_error,
            ratio: q.estimate / denom,
        })
        .collect();
    let worst = profile
        .iter()
        .fold((0.0, 0.0), |acc, q| if q.ratio > acc.0 { (q.ratio, q.std_error / denom) } else { acc });
    Ok(DoobReport {
        p,
        factor,
        rp,
        profile,
        max_ratio: worst.0,
        max_ratio_std_error: worst.1,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DefectPoint {
    pub index: usize,
    pub t: f64,
    /// `|E[S_t] - I|` in operator norm.
    pub defect: f64,
    pub std_error: f64,
    /// `1 - tr(E[S_t]) / n`.
    pub diagonal_defect: f64,
    pub diagonal_std_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DefectReport {
    pub profile: Vec<DefectPoint>,
    pub flagged_paths: usize,
}

impl DefectReport {
    /// Largest defect minus `z` standard errors over the profile.
    pub fn max_lower_bound(&self, z: f64) -> f64 {
        self.profile.iter().map(|p| p.defect - z * p.std_error).fold(0.0, f64::max)
    }

    pub fn terminal(&self) -> &DefectPoint {
        self.profile.last().expect("profile is non-empty")
    }
}

/// Monte Carlo `E[S_t] - I` on every stored node (flagged paths excluded).
pub fn martingale_defect(expo: &ExponentialEnsemble) -> Result<DefectReport> {
    let n = expo.n;
    let keep: Vec<usize> = (0..expo.paths).filter(|&m| !expo.is_flagged(m)).collect();
    if keep.is_empty() {
        return Err(LabError::Empty);
    }
    let profile = expo
        .stored
        .iter()
        .enumerate()
        .map(|(idx, &k)| {
            let mut means = vec![0.0; n * n];
            let mut ses = vec![0.0; n * n];
            for e in 0..n * n {
                let vals: Vec<f64> = keep.iter().map(|&m| expo.s(m, idx)[e]).collect();
                let (mu, se) = mean_se(&vals);
                means[e] = mu;
                ses[e] = se;
            }
            let traces: Vec<f64> = keep
                .iter()
                .map(|&m| (0..n).map(|i| expo.s(m, idx)[i * n + i]).sum::<f64>() / n as f64)
                .collect();
            let (tr, tr_se) = mean_se(&traces);
            DefectPoint {
                index: k,
                t: expo.grid.t(k),
                defect: distance_from_identity(&means, n),
                std_error: ses.iter().map(|v| v * v).sum::<f64>().sqrt(),
                diagonal_defect: 1.0 - tr,
                diagonal_std_error: tr_se,
            }
        })
        .collect();
    Ok(DefectReport {
        profile,
        flagged_paths: expo.flagged_count(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruncationCurve {
    pub p: f64,
    /// `(L, E[min(|S_T|^p, L)], std_error)`
    pub points: Vec<(f64, f64, f64)>,
    /// Still increasing at the largest level beyond its error bar.
    pub diverging: bool,
}

/// `E[min(|S_T|^p, L)]` for increasing `L`; a curve that keeps growing indicates that the
/// untruncated expectation is infinite or beyond the sample's reach.
pub fn truncation_curve(expo: &ExponentialEnsemble, p: f64, levels: &[f64]) -> Result<TruncationCurve> {
    let n = expo.n;
    let vals: Vec<f64> = (0..expo.paths)
        .filter(|&m| !expo.is_flagged(m))
        .map(|m| op_norm(expo.terminal(m), n).powf(p))
        .collect();
    if vals.is_empty() {
        return Err(LabError::Empty);
    }
    let mut points = Vec::with_capacity(levels.len());
    for &l in levels {
        let capped: Vec<f64> = vals.iter().map(|v| v.min(l)).collect();
        let (mu, se) = mean_se(&capped);
        points.push((l, mu, se));
    }
    let diverging = points.len() >= 2 && {
        let (_, a, sa) = points[points.len() - 2];
        let (_, b, sb) = points[points.len() - 1];
        b - a > 3.0 * (sa * sa + sb * sb).sqrt() && b - a > 0.01 * a.abs()
    };
    Ok(TruncationCurve { p, points, diverging })
}

/// `t,estimate,std_error` CSV.
pub fn write_profile_csv<W: Write>(rows: &[(f64, f64, f64)], mut w: W) -> Result<()> {
    writeln!(w, "t,estimate,std_error")?;
    for (t, e, s) in rows {
        writeln!(w, "{},{},{}", fmt17(*t), fmt17(*e), fmt17(*s))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::brownian::generate_brownian;
    use crate::field::ConstantField;

    #[test]
    fn zero_field_keeps_identity() {
        let g = TimeGrid::uniform(1.0, 10).unwrap();
        let p = generate_brownian(&g, 1, 20, 1).unwrap();
        let f = ConstantField::zero(2, 1);
        let e = integrate(&f, &p, IntegrationOptions::default()).unwrap();
        for m in 0..20 {
            for i in 0..e.stored_nodes().len() {
                assert_eq!(e.s(m, i), &[1.0, 0.0, 0.0, 1.0]);
                assert_eq!(e.s_inv(m, i).unwrap(), &[1.0, 0.0, 0.0, 1.0]);
            }
        }
        assert_eq!(e.max_inverse_residual(), Some(0.0));
        assert!(e.inverse_residual_profile().unwrap().iter().all(|(_, r)| *r == 0.0));
    }

    #[test]
    fn scalar_euler_is_product_of_factors() {
        let g = TimeGrid::uniform(1.0, 4).unwrap();
        let p = generate_brownian(&g, 1, 3, 2).unwrap();
        let e = integrate_exponential(&ConstantField::scalar(0.7), &p).unwrap();
        for m in 0..3 {
            let prod: f64 = (0..4).map(|k| 1.0 + 0.7 * p.increment(m, k)[0]).product();
            assert!((e.terminal(m)[0] - prod).abs() < 1e-14);
        }
    }

    #[test]
    fn storage_stride_keeps_endpoints() {
        assert_eq!(stored_nodes(10, 4), vec![0, 4, 8, 10]);
        assert_eq!(stored_nodes(3, 1), vec![0, 1, 2, 3]);
    }

    #[test]
    fn rejects_small_p() {
        let g = TimeGrid::uniform(1.0, 2).unwrap();
        let p = generate_brownian(&g, 1, 5, 2).unwrap();
        let f = ConstantField::scalar(0.1);
        let e = integrate(&f, &p, IntegrationOptions::default()).unwrap();
        let ctx = RpContext { expo: &e, paths: &p, field: &f };
        assert!(estimate_reverse_holder(&ctx, 0.5, &RegressionRp::new(2)).is_err());
        assert!(doob_sup_check(&ctx, 1.0, &RegressionRp::new(2)).is_err());
    }

    #[test]
    fn doob_factor_at_two_is_four() {
        assert!((doob_factor(2.0) - 4.0).abs() < 1e-15);
    }

    #[test]
    fn overflow_is_flagged_not_dropped() {
        let g = TimeGrid::uniform(1.0, 200).unwrap();
        let p = generate_brownian(&g, 1, 4, 9).unwrap();
        let e = integrate(&ConstantField::scalar(1e80), &p, IntegrationOptions::default()).unwrap();
        assert_eq!(e.paths(), 4);
        assert!(e.flagged_count() > 0);
    }

    #[test]
    fn scalar_inverse_residual_matches_product_formula() {
        let a = 0.5;
        let g = TimeGrid::uniform(1.0, 40).unwrap();
        let p = generate_brownian(&g, 1, 300, 8).unwrap();
        let e = integrate(&ConstantField::scalar(a), &p, IntegrationOptions::default()).unwrap();
        let prof = e.inverse_residual_profile().unwrap();
        let mut ss = 0.0;
        for m in 0..300 {
            let mut prod = 1.0;
            for k in 0..40 {
                let db = p.increment(m, k)[0];
                prod *= (1.0 + a * db) * (1.0 + a * a * g.dt(k) - a * db);
            }
            ss += (prod - 1.0).powi(2);
        }
        let (t, r) = prof[40];
        assert_eq!(t, 1.0);
        assert!((r - (ss / 300.0).sqrt()).abs() < 1e-12);
        let sparse = integrate(&ConstantField::scalar(a), &p, IntegrationOptions { store_every: 40, with_inverse: true }).unwrap();
        assert_eq!(sparse.inverse_residual_profile().unwrap(), prof);
    }
}
