//! One function per experiment: config in, CSV tables and a JSON result block out.

use std::sync::Arc;

use bsde_lab::brownian::{fmt17, generate_brownian, PathEnsemble};
use bsde_lab::counterexamples::{
    emery_closed_form, emery_convergence, exit_time_exponential, nonexistence_blowup, EmerySpec, ExitTimeConfig,
    NonexistenceSpec,
};
use bsde_lab::exponential::{
    doob_sup_check, estimate_reverse_holder, integrate, martingale_defect, rp_estimator, truncation_curve,
    IntegrationOptions, RpContext,
};
use bsde_lab::field::{builtin_field, CoefficientField, FnField, Structure};
use bsde_lab::grid::TimeGrid;
use bsde_lab::linear::{estimate_solution_operator_norm, linear_solver, LinearProblem, RegressionSolver, LinearSolver, PerturbedSolver};
use bsde_lab::norms::{estimate_norm, Conditioning, NormKind, ProcessView};
use bsde_lab::oracle::{
    discrete_exponential, discrete_linear_bsde_solve, discrete_reverse_holder, homogeneous_operator_bounds,
    random_tree_instance, representation, verify_scalar_duality, verify_matrix_duality, FiniteFiltration, NodeProcess,
    TreeProblem,
};
use bsde_lab::quadratic::{
    affine_g, builtin_driver, check_ab_condition, check_lyapunov, cole_hopf_drift, estimate_lipschitz, half_square,
    half_square_first_row, linearized_difference_check, solve_quadratic, uniqueness_probe, Driver, LyapunovPair,
    QuadraticPart, BUILTIN_DRIVERS,
};
use bsde_lab::suite::run_equivalence_suite;
use bsde_lab::terminal::TerminalSpec;
use bsde_lab::LabError;
use serde_json::{json, Value};

use crate::config::*;

/// Config problems exit with 2, numerical failures with 3.
#[derive(Debug)]
pub enum RunError {
    Config(String),
    Numeric(LabError),
}

impl From<LabError> for RunError {
    fn from(e: LabError) -> Self {
        match e {
            LabError::Config(_) | LabError::Unknown { .. } | LabError::StructureMismatch { .. } => RunError::Config(e.to_string()),
            other => RunError::Numeric(other),
        }
    }
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Config(m) => write!(f, "{m}"),
            RunError::Numeric(e) => write!(f, "{e}"),
        }
    }
}

pub type RunResult<T> = Result<T, RunError>;

#[derive(Debug, Default)]
pub struct Artifacts {
    /// `(file name, contents)`
    pub files: Vec<(String, String)>,
    pub results: Value,
    pub warnings: Vec<String>,
    /// False when a built-in check of the experiment failed (exit code 4).
    pub passed: bool,
}

fn csv(header: &[&str], rows: impl IntoIterator<Item = Vec<f64>>) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&r.iter().map(|v| fmt17(*v)).collect::<Vec<_>>().join(","));
        s.push('\n');
    }
    s
}

fn brownian(horizon: f64, steps: usize, dim: usize, paths: usize, seed: u64) -> RunResult<PathEnsemble> {
    Ok(generate_brownian(&TimeGrid::uniform(horizon, steps)?, dim, paths, seed)?)
}

fn json_of<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializable")
}

pub fn simulate_exponential(c: &ExponentialExp) -> RunResult<Artifacts> {
    let field = builtin_field(&c.field)?;
    let paths = brownian(c.horizon, c.steps, field.d(), c.paths, c.seed)?;
    let expo = integrate(
        field.as_ref(),
        &paths,
        IntegrationOptions {
            store_every: c.store_every,
            with_inverse: c.inverse,
        },
    )?;
    let defect = martingale_defect(&expo)?;
    let rows = defect
        .profile
        .iter()
        .map(|p| vec![p.t, p.defect, p.std_error, p.diagonal_defect, p.diagonal_std_error]);
    let mut files = vec![(
        "defect.csv".to_string(),
        csv(&["t", "defect", "std_error", "diagonal_defect", "diagonal_std_error"], rows),
    )];
    let mut results = json!({
        "field": field.name(),
        "terminal_defect": defect.terminal(),
        "defect_lower_bound_3se": defect.max_lower_bound(3.0),
        "flagged_paths": expo.flagged_count(),
        "max_inverse_residual": expo.max_inverse_residual(),
        "max_rms_inverse_residual": expo.inverse_residual_profile().map(|p| p.iter().map(|x| x.1).fold(0.0, f64::max)),
    });
    if !c.truncation_levels.is_empty() {
        let curve = truncation_curve(&expo, c.truncation_p, &c.truncation_levels)?;
        files.push((
            "truncation.csv".into(),
            csv(&["level", "estimate", "std_error"], curve.points.iter().map(|(l, e, s)| vec![*l, *e, *s])),
        ));
        results["truncation"] = json_of(&curve);
    }
    let mut warnings = Vec::new();
    if expo.flagged_count() > 0 {
        warnings.push(format!("{} paths overflowed and were excluded", expo.flagged_count()));
    }
    Ok(Artifacts {
        files,
        results,
        warnings,
        passed: true,
    })
}

pub fn estimate_rp(c: &ReverseHolderExp) -> RunResult<Artifacts> {
    let field = builtin_field(&c.field)?;
    let paths = brownian(c.horizon, c.steps, field.d(), c.paths, c.seed)?;
    let expo = integrate(field.as_ref(), &paths, IntegrationOptions { store_every: 1, with_inverse: false })?;
    let est = rp_estimator(&c.estimator, c.degree, c.outer, c.inner, c.seed)?;
    let ctx = RpContext {
        expo: &expo,
        paths: &paths,
        field: field.as_ref(),
    };
    let (report, doob) = if c.doob {
        let d = doob_sup_check(&ctx, c.p, est.as_ref())?;
        (d.rp.clone(), Some(d))
    } else {
        (estimate_reverse_holder(&ctx, c.p, est.as_ref())?, None)
    };
    let rows = report.profile.iter().map(|p| vec![p.t, p.estimate, p.std_error]);
    let files = vec![("rp_profile.csv".to_string(), csv(&["t", "estimate", "std_error"], rows))];
    let results = json!({
        "field": field.name(),
        "p": c.p,
        "estimator": report.estimator,
        "rp": report.rp_estimate,
        "std_error": report.std_error,
        "attaining_time": report.attaining_time,
        "flagged_paths": report.flagged_paths,
        "doob": doob.map(|d| json!({"factor": d.factor, "max_ratio": d.max_ratio, "max_ratio_std_error": d.max_ratio_std_error})),
    });
    Ok(Artifacts {
        files,
        results,
        warnings: Vec::new(),
        passed: true,
    })
}

/// Regression conditions on the Brownian state only, so a running-max terminal is misspecified.
fn terminal_warning(t: &TerminalSpec) -> Option<String> {
    matches!(t, TerminalSpec::RunningMax { .. }).then(|| {
        "terminal depends on the running maximum; regression conditions on B_t only, so Y is biased".to_string()
    })
}

fn scaled_field(name: &str, scale: f64) -> RunResult<Arc<dyn CoefficientField>> {
    let base = builtin_field(name)?;
    if base.path_dependent() {
        return Err(RunError::Config(format!("perturbation field '{name}' must depend on (t, B_t) only")));
    }
    let (n, d) = (base.n(), base.d());
    Ok(Arc::new(FnField::new(
        &format!("{scale}*{name}"),
        n,
        d,
        Structure::Generic,
        base.bmo_bound().map(|b| b * scale.abs()),
        move |s, out| {
            base.eval(s, out);
            out.iter_mut().for_each(|v| *v *= scale);
        },
    )))
}

fn check_structure(field: &dyn CoefficientField, wanted: &str) -> RunResult<()> {
    let s = field.structure();
    let ok = match wanted {
        "generic" => true,
        "triangular" => s.is_lower_triangular(),
        "left-outer" => matches!(s, Structure::LeftOuter { .. }),
        "right-outer" => matches!(s, Structure::RightOuter { .. }),
        other => {
            return Err(RunError::Config(
                LabError::unknown("structure", other, &["generic", "triangular", "left-outer", "right-outer"]).to_string(),
            ))
        }
    };
    if ok {
        Ok(())
    } else {
        Err(RunError::Config(
            LabError::StructureMismatch {
                solver: format!("--structure {wanted}"),
                required: wanted.to_string(),
                found: s.label().to_string(),
            }
            .to_string(),
        ))
    }
}

pub fn solve_linear(c: &LinearExp) -> RunResult<Artifacts> {
    let field = builtin_field(&c.field)?;
    let (n, d) = (field.n(), field.d());
    let method = match c.structure.as_deref() {
        Some(s) => {
            check_structure(field.as_ref(), s)?;
            // A field declared generic is solved without its structure.
            if s == "generic" && c.method == "auto" {
                "regression".to_string()
            } else {
                c.method.clone()
            }
        }
        None => c.method.clone(),
    };
    let paths = brownian(c.horizon, c.steps, d, c.paths, c.seed)?;
    let xi = c.terminal.sample(&paths, n)?;
    let mut prob = LinearProblem::new(field.clone(), xi);
    if let Some(b) = &c.beta {
        if b.len() != n {
            return Err(RunError::Config(format!("beta must have {n} components")));
        }
        let all: Vec<f64> = (0..c.paths * c.steps).flat_map(|_| b.iter().copied()).collect();
        prob = prob.with_beta(all);
    }
    let mut solver: Box<dyn LinearSolver> = linear_solver(&method, field.as_ref())?;
    if let Some(p) = &c.perturbation {
        let da = scaled_field(&p.field, p.scale)?;
        if da.n() != n || da.d() != d {
            return Err(RunError::Config(format!("perturbation field must have n = {n}, d = {d}")));
        }
        prob = prob.with_perturbation(da);
        if method != "regression" && method != "perturbed" {
            solver = Box::new(PerturbedSolver { base: solver });
        }
    }
    let sol = solver.solve(&prob, &paths, &c.solver)?;
    let mut buf = Vec::new();
    sol.write_csv(&mut buf)?;
    let mut files = vec![("solution.csv".to_string(), String::from_utf8(buf).expect("utf8"))];
    let grid = paths.grid();
    let zv = ProcessView::new(grid, sol.paths, n * d, &sol.z)?;
    let norms = json!({
        "q": c.q,
        "y_sup_q": sol.y_norm(c.q, grid)?,
        "y_sup_inf": sol.y_norm(f64::INFINITY, grid)?,
        "z_l2q": estimate_norm(NormKind::L2q { q: c.q }, &zv, Conditioning::Unconditional)?,
        "z_bmo": estimate_norm(NormKind::Bmo, &zv, Conditioning::Regression { paths: &paths, degree: c.solver.degree, regimes: None })?,
    });
    let mut results = json!({
        "field": field.name(),
        "structure": field.structure().label(),
        "solver": sol.solver,
        "y0": sol.y0,
        "y0_std_error": sol.y0_std_error,
        "norms": norms,
        "diagnostics": {
            "max_step_residual": sol.diagnostics.max_step_residual(),
            "terminal_mismatch": sol.diagnostics.terminal_mismatch,
            "identity_residual": sol.diagnostics.identity_residual,
            "identity_tolerance": sol.diagnostics.identity_tolerance,
            "martingale_defect": sol.diagnostics.martingale_defect,
            "picard_history": sol.diagnostics.picard_history,
        },
    });
    let mut passed = true;
    if let (Some(r), Some(t)) = (sol.diagnostics.identity_residual, sol.diagnostics.identity_tolerance) {
        passed &= r <= t;
    }
    if c.compare_regression {
        let reg = RegressionSolver.solve(&prob, &paths, &c.solver)?;
        let rows: Vec<Value> = (0..n)
            .map(|i| {
                let diff = sol.y0[i] - reg.y0[i];
                let se = (sol.y0_std_error[i].powi(2) + reg.y0_std_error[i].powi(2)).sqrt();
                json!({"component": i, "regression_y0": reg.y0[i], "difference": diff, "combined_std_error": se, "within_3se": diff.abs() <= 3.0 * se})
            })
            .collect();
        passed &= rows.iter().all(|r| r["within_3se"] == true);
        results["regression_comparison"] = Value::Array(rows);
    }
    if !c.operator_family.is_empty() {
        let family = c
            .operator_family
            .iter()
            .map(|t| t.sample(&paths, n).map(|x| (x, None)))
            .collect::<Result<Vec<_>, _>>()?;
        let est = estimate_solution_operator_norm(solver.as_ref(), field.clone(), &paths, c.q, &family, &c.solver)?;
        files.push((
            "operator_ratios.csv".into(),
            csv(&["member", "ratio"], est.ratios.iter().enumerate().map(|(i, r)| vec![i as f64, *r])),
        ));
        results["operator_norm_lower_bound"] = json_of(&est);
    }
    let mut warnings = sol.diagnostics.warnings.clone();
    warnings.extend(terminal_warning(&c.terminal));
    Ok(Artifacts {
        files,
        results,
        warnings,
        passed,
    })
}

fn custom_driver(spec: &CustomDriverSpec) -> RunResult<Driver> {
    let n = spec.n;
    let cfg = |m: String| RunError::Config(m);
    if n == 0 || spec.d == 0 {
        return Err(cfg("custom driver needs n, d >= 1".into()));
    }
    let gm = spec.g_matrix.clone().unwrap_or_else(|| vec![0.0; n * n]);
    let gc = spec.g_constant.clone().unwrap_or_else(|| vec![0.0; n]);
    let lipschitz = {
        let m = nalgebra_free_norm(&gm, n);
        m.max(gc.iter().map(|v| v * v).sum::<f64>().sqrt())
    };
    let g = affine_g(n, gm, gc).map_err(|e| cfg(e.to_string()))?;
    let part = match spec.class.as_str() {
        "quadratic_linear" => {
            let b = spec.b.clone().ok_or_else(|| cfg("quadratic_linear driver needs b".into()))?;
            if b.len() != n {
                return Err(cfg(format!("b must have {n} components")));
            }
            QuadraticPart::QuadraticLinear { b }
        }
        "unidirectional" => {
            let a = spec.a.clone().ok_or_else(|| cfg("unidirectional driver needs a".into()))?;
            if a.len() != n {
                return Err(cfg(format!("a must have {n} components")));
            }
            let h = match spec.h.as_deref().unwrap_or("half_square") {
                "half_square" => half_square(),
                "half_square_first_row" => half_square_first_row(spec.d),
                other => {
                    return Err(cfg(
                        LabError::unknown("quadratic part", other, &["half_square", "half_square_first_row"]).to_string(),
                    ))
                }
            };
            QuadraticPart::Unidirectional { a, h }
        }
        other => {
            return Err(cfg(
                LabError::unknown("driver class", other, &["quadratic_linear", "unidirectional"]).to_string(),
            ))
        }
    };
    Ok(Driver {
        name: "custom".into(),
        n,
        d: spec.d,
        g: Some(g),
        lipschitz,
        part,
    })
}

/// Frobenius norm, an upper bound on the operator norm of `G`.
fn nalgebra_free_norm(m: &[f64], _n: usize) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn solve_quadratic_exp(c: &QuadraticExp) -> RunResult<Artifacts> {
    let (driver, default_terminal) = if c.driver == "custom" {
        let spec = c.custom.as_ref().ok_or_else(|| RunError::Config("driver \"custom\" needs a \"custom\" block".into()))?;
        (custom_driver(spec)?, None)
    } else {
        let d = builtin_driver(&c.driver)?;
        let t = BUILTIN_DRIVERS.iter().find(|e| e.name == c.driver).map(|e| (e.terminal)());
        (d, t)
    };
    let terminal = c
        .terminal
        .clone()
        .or(default_terminal)
        .ok_or_else(|| RunError::Config("custom driver needs a terminal condition".into()))?;
    let (n, d) = (driver.n, driver.d);
    let paths = brownian(c.horizon, c.steps, d, c.paths, c.seed)?;
    let xi = terminal.sample(&paths, n)?;
    let mut warnings: Vec<String> = terminal_warning(&terminal).into_iter().collect();
    let lip = estimate_lipschitz(&driver, c.samples, c.seed);
    if lip > driver.lipschitz * (1.0 + 1e-9) + 1e-12 {
        warnings.push(format!(
            "sampled Lipschitz constant {lip:.4} of g exceeds the declared {:.4}",
            driver.lipschitz
        ));
    }
    let sol = solve_quadratic(&driver, &xi, &paths, &c.solver)?;
    let mut buf = Vec::new();
    sol.solution.write_csv(&mut buf)?;
    let mut files = vec![
        ("solution.csv".to_string(), String::from_utf8(buf).expect("utf8")),
        (
            "escalation.csv".to_string(),
            csv(
                &["level", "max_argument", "accepted"],
                sol.escalation.iter().map(|e| vec![e.level, e.max_argument, f64::from(u8::from(e.accepted))]),
            ),
        ),
    ];
    let mut results = json!({
        "driver": driver.name,
        "class": driver.class(),
        "terminal": terminal,
        "y0": sol.solution.y0,
        "y0_std_error": sol.solution.y0_std_error,
        "level": sol.level,
        "escalation": sol.escalation,
        "y_sup": sol.y_sup,
        "z_bmo": sol.z_bmo,
        "z_bmo_std_error": sol.z_bmo_std_error,
        "max_step_residual": sol.solution.diagnostics.max_step_residual(),
        "lipschitz_sampled": lip,
    });
    let mut passed = true;
    // Scalar instances without a Lipschitz part are linearized by y -> exp(2 b y).
    if n == 1 && driver.g.is_none() {
        let b = match &driver.part {
            QuadraticPart::QuadraticLinear { b } => Some(b[0]),
            QuadraticPart::Unidirectional { a, .. } => Some(a[0] / 2.0),
        };
        if let Some(b) = b {
            let (dev, se) = cole_hopf_drift(&sol.solution, b);
            results["cole_hopf"] = json!({"b": b, "max_relative_drift": dev, "std_error": se});
        }
    }
    if c.uniqueness {
        let u = uniqueness_probe(&driver, &xi, &paths, &c.solver)?;
        results["uniqueness"] = json_of(&u);
    }
    if let Some(ab) = &c.ab {
        let rep = check_ab_condition(ab, &driver, c.samples, c.seed)?;
        passed &= rep.spanning && rep.violations == 0;
        results["ab"] = json_of(&rep);
    }
    if let Some(l) = &c.lyapunov {
        let pair = LyapunovPair::squared_norm(n, l.k, l.c);
        let rep = check_lyapunov(&pair, &driver, c.horizon, c.samples, c.seed)?;
        let bmo2 = sol.z_bmo.powi(2);
        let slack = 3.0 * 2.0 * sol.z_bmo * sol.z_bmo_std_error;
        let bound_check = json!({
            "z_bmo_squared": bmo2,
            "bound": rep.bmo_bound_squared,
            "mc_slack": slack,
            "holds": bmo2 <= rep.bmo_bound_squared + slack,
            "y_sup_within_radius": sol.y_sup <= l.c,
        });
        passed &= rep.valid;
        results["lyapunov"] = json!({"report": rep, "bmo_bound_check": bound_check});
    }
    if !c.stability_eps.is_empty() {
        let mut rows = Vec::new();
        for &eps in &c.stability_eps {
            let xi2: Vec<f64> = xi.iter().enumerate().map(|(j, v)| if j % n == 0 { v + eps } else { *v }).collect();
            let other = solve_quadratic(&driver, &xi2, &paths, &c.solver)?;
            let rep = linearized_difference_check(&driver, &paths, &sol.solution, &other.solution, &xi, &xi2, &c.solver)?;
            rows.push((eps, rep));
        }
        let ratios: Vec<f64> = rows.iter().map(|(_, r)| r.ratio).collect();
        let (lo, hi) = ratios.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &r| (a.min(r), b.max(r)));
        files.push((
            "stability.csv".into(),
            csv(
                &["eps", "residual", "ratio", "delta_xi_sup", "delta_y_sup"],
                rows.iter().map(|(e, r)| vec![*e, r.residual, r.ratio, r.delta_xi_sup, r.delta_y_sup]),
            ),
        ));
        results["stability"] = json!({
            "rows": rows.iter().map(|(e, r)| json!({"eps": e, "report": r})).collect::<Vec<_>>(),
            "ratio_variation": if lo > 0.0 { (hi - lo) / lo } else { f64::INFINITY },
        });
    }
    warnings.extend(sol.solution.diagnostics.warnings.iter().cloned());
    Ok(Artifacts {
        files,
        results,
        warnings,
        passed,
    })
}

pub fn emery(c: &EmeryExp) -> RunResult<Artifacts> {
    let spec = EmerySpec {
        level: c.level,
        effective_horizon: c.effective_horizon,
    };
    let grid = spec.time_changed_grid(c.steps)?;
    let paths = generate_brownian(&grid, 1, c.paths, c.seed)?;
    let cf = emery_closed_form(&spec, &paths, c.store_every)?;
    let defect = martingale_defect(&cf.expo)?;
    let rows = defect
        .profile
        .iter()
        .map(|p| vec![p.t, p.defect, p.std_error, p.diagonal_defect, p.diagonal_std_error]);
    let mut files = vec![(
        "defect.csv".to_string(),
        csv(&["u", "defect", "std_error", "diagonal_defect", "diagonal_std_error"], rows),
    )];
    let term = defect.terminal();
    let significance = if term.diagonal_std_error > 0.0 {
        term.diagonal_defect / term.diagonal_std_error
    } else if term.diagonal_defect > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    let mut results = json!({
        "closed_form": {
            "formula": "S_u = exp((tau ^ u) / 2) [[cos B, sin B], [-sin B, cos B]] at tau ^ u",
            "level": c.level,
            "effective_horizon": c.effective_horizon,
        },
        "terminal_diagonal_defect": term.diagonal_defect,
        "terminal_diagonal_std_error": term.diagonal_std_error,
        "significance": if significance.is_finite() { json!(significance) } else { json!("inf") },
        "unexited_paths": cf.unexited,
    });
    let mut passed = term.diagonal_defect >= 0.5 && significance >= 5.0;
    if let Some(conv) = &c.convergence {
        let rows = emery_convergence(&spec, conv.horizon, &conv.steps, conv.paths, c.seed)?;
        files.push((
            "convergence.csv".into(),
            csv(
                &["steps", "rmse", "std_error", "observed_order", "order_std_error"],
                rows.iter().map(|r| {
                    vec![
                        r.steps as f64,
                        r.rmse,
                        r.std_error,
                        r.observed_order.unwrap_or(f64::NAN),
                        r.order_std_error.unwrap_or(f64::NAN),
                    ]
                }),
            ),
        ));
        let decreasing = rows.windows(2).all(|w| w[1].rmse < w[0].rmse);
        passed &= decreasing;
        results["convergence"] = json!({"rows": rows, "decreasing": decreasing});
    }
    Ok(Artifacts {
        files,
        results,
        warnings: Vec::new(),
        passed,
    })
}

pub fn exit_time(c: &ExitTimeExp) -> RunResult<Artifacts> {
    let cfg = ExitTimeConfig {
        paths: c.paths,
        horizon: c.horizon,
        dt: c.horizon * c.dt_fraction,
        seed: c.seed,
    };
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    let mut reports = Vec::new();
    let mut warnings = Vec::new();
    for &b in &c.b {
        let e = exit_time_exponential(b, &cfg)?;
        rows.push(vec![b, e.estimate, e.std_error, e.exact, e.truncated_exact, e.relative_error]);
        for (l, v, s) in &e.truncation_curve {
            curves.push(vec![b, *l, *v, *s]);
        }
        if e.heavy_tail {
            warnings.push(format!("b = {b}: heavy tail, the single estimate is unreliable; see the truncation curve"));
        }
        reports.push(e);
    }
    let files = vec![
        (
            "exit_time.csv".to_string(),
            csv(&["b", "estimate", "std_error", "exact", "truncated_exact", "relative_error"], rows),
        ),
        ("truncation.csv".to_string(), csv(&["b", "cap", "estimate", "std_error"], curves)),
    ];
    Ok(Artifacts {
        files,
        results: json!({ "levels": reports }),
        warnings,
        passed: true,
    })
}

pub fn nonexistence(c: &NonexistenceExp) -> RunResult<Artifacts> {
    let spec = match &c.b {
        Some(b) => NonexistenceSpec {
            horizon: c.horizon,
            b: b.clone(),
        },
        None => NonexistenceSpec::default_levels(c.horizon, c.levels)?,
    };
    let conditions = spec.check_conditions();
    let cfg = ExitTimeConfig {
        paths: c.paths,
        horizon: c.exit_horizon,
        dt: c.exit_horizon * c.dt_fraction,
        seed: c.seed,
    };
    let rows = nonexistence_blowup(&spec, c.j_max, c.simulate_up_to, &cfg)?;
    let table = csv(
        &[
            "j",
            "partial_sum",
            "simulated_estimate",
            "simulated_std_error",
            "truncated_partial_sum",
            "simulated_total",
            "remainder_bound",
        ],
        rows.iter().map(|r| {
            vec![
                r.j as f64,
                r.partial_sum,
                r.simulated_estimate,
                r.simulated_std_error,
                r.truncated_partial_sum,
                r.simulated_total,
                r.remainder_bound,
            ]
        }),
    );
    Ok(Artifacts {
        files: vec![("blowup.csv".into(), table)],
        results: json!({"levels": spec.b, "conditions": conditions, "rows": rows}),
        warnings: Vec::new(),
        passed: conditions.all(),
    })
}

struct OracleCase {
    filt: FiniteFiltration,
    problem: TreeProblem,
    field: Option<Arc<dyn CoefficientField>>,
}

fn oracle_case(c: &OracleExp) -> RunResult<OracleCase> {
    match &c.source {
        OracleSource::Random {
            steps,
            n,
            d,
            scale,
            lower_triangular,
        } => {
            let inst = random_tree_instance(c.seed, *steps, *n, *d, *scale, *lower_triangular)?;
            Ok(OracleCase {
                filt: inst.filt,
                problem: inst.problem,
                field: None,
            })
        }
        OracleSource::Field { name, steps, horizon } => {
            let field = builtin_field(name)?;
            let filt = FiniteFiltration::new(*steps, field.d(), horizon / *steps as f64)?;
            let a = NodeProcess::from_field(&filt, field.as_ref());
            let xi = c.terminal.sample(&filt.as_path_ensemble(), field.n())?;
            Ok(OracleCase {
                problem: TreeProblem {
                    n: field.n(),
                    xi,
                    beta: None,
                    a,
                    alpha: None,
                },
                filt,
                field: Some(field),
            })
        }
        OracleSource::Constant { a, steps, dt } => {
            let filt = FiniteFiltration::new(*steps, 1, *dt)?;
            let av = *a;
            let ap = NodeProcess::from_fn(&filt, 1, *steps, move |_, _, _, out| out[0] = av);
            let xi = c.terminal.sample(&filt.as_path_ensemble(), 1)?;
            Ok(OracleCase {
                filt,
                problem: TreeProblem {
                    n: 1,
                    xi,
                    beta: None,
                    a: ap,
                    alpha: None,
                },
                field: None,
            })
        }
    }
}

pub fn oracle_bsde(c: &OracleExp) -> RunResult<Artifacts> {
    let case = oracle_case(c)?;
    let (filt, prob) = (&case.filt, &case.problem);
    let n = prob.n;
    let sol = discrete_linear_bsde_solve(filt, prob)?;
    let expo = discrete_exponential(filt, &prob.a, n)?;
    let rep = representation(filt, &expo, &prob.xi, prob.beta.as_ref())?;
    let mut gap = 0.0f64;
    let mut rows = Vec::new();
    for k in 0..=filt.steps() {
        for i in 0..filt.level_size(k) {
            let mut row = vec![k as f64, i as f64];
            row.extend_from_slice(sol.y.at(k, i));
            row.extend_from_slice(rep.at(k, i));
            for (a, b) in sol.y.at(k, i).iter().zip(rep.at(k, i)) {
                gap = gap.max((a - b).abs());
            }
            rows.push(row);
        }
    }
    let mut header: Vec<String> = vec!["level".into(), "node".into()];
    header.extend((0..n).map(|i| format!("y{i}")));
    header.extend((0..n).map(|i| format!("representation_y{i}")));
    let header_ref: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut results = json!({
        "steps": filt.steps(),
        "n": n,
        "d": filt.dim(),
        "y0": sol.y.at(0, 0),
        "representation_gap": gap,
        "backward_residual": sol.backward_residual,
        "singular_nodes": expo.singular_nodes.len(),
    });
    // Markov fields with d = 1: polynomial regression of degree K is exact on the tree.
    if let (Some(field), 1) = (&case.field, filt.dim()) {
        if !field.path_dependent() {
            let paths = filt.as_path_ensemble();
            let cfg = bsde_lab::linear::SolverConfig {
                degree: filt.steps(),
                ..Default::default()
            };
            let mut solvers = Vec::new();
            for name in ["regression", "auto"] {
                let s = linear_solver(name, field.as_ref())?;
                let lp = LinearProblem::new(field.clone(), prob.xi.clone());
                let out = s.solve(&lp, &paths, &cfg)?;
                let mut worst = 0.0f64;
                for leaf in 0..paths.paths() {
                    for k in 0..=filt.steps() {
                        for (a, b) in out.y(leaf, k).iter().zip(sol.y.at(k, filt.ancestor(leaf, k))) {
                            worst = worst.max((a - b).abs());
                        }
                    }
                }
                solvers.push(json!({"solver": out.solver, "max_gap": worst}));
            }
            results["path_solvers"] = Value::Array(solvers);
        }
    }
    Ok(Artifacts {
        files: vec![("oracle_nodes.csv".into(), csv(&header_ref, rows))],
        passed: gap <= 1e-10 * sol.y.at(0, 0).iter().fold(1.0f64, |m, v| m.max(v.abs())),
        results,
        warnings: Vec::new(),
    })
}

pub fn oracle_duality(c: &OracleExp) -> RunResult<Artifacts> {
    let case = oracle_case(c)?;
    let (filt, prob) = (&case.filt, &case.problem);
    let n = prob.n;
    let k = c.level.unwrap_or(filt.steps() / 2);
    if k >= filt.steps().max(1) && filt.steps() > 0 && k > filt.steps() {
        return Err(RunError::Config(format!("level must be at most {}", filt.steps())));
    }
    let expo = discrete_exponential(filt, &prob.a, n)?;
    let leaves = filt.leaves();
    let st: Vec<f64> = (0..leaves).flat_map(|l| expo.s.at(filt.steps(), l).to_vec()).collect();
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    let mut passed = true;
    for (j, &p) in c.p.iter().enumerate() {
        let r = verify_scalar_duality(filt, &prob.xi, n, k, p, c.random_tests, c.seed.wrapping_add(j as u64))?;
        let m = verify_matrix_duality(filt, &st, n, k, p)?;
        passed &= (r.lhs - r.witness_rhs).abs() <= 1e-9 * r.lhs.max(1.0) && m.lhs <= m.bound * (1.0 + 1e-12);
        rows.push(vec![p, r.lhs, r.witness_rhs, r.random_rhs, r.gap, m.lhs, m.bound]);
        reports.push(json!({"vector": r, "matrix": m}));
    }
    Ok(Artifacts {
        files: vec![(
            "duality.csv".into(),
            csv(&["p", "lhs", "witness_rhs", "random_rhs", "gap", "matrix_lhs", "matrix_bound"], rows),
        )],
        results: json!({"level": k, "reports": reports}),
        warnings: Vec::new(),
        passed,
    })
}

pub fn oracle_rp(c: &OracleExp) -> RunResult<Artifacts> {
    let case = oracle_case(c)?;
    let (filt, prob) = (&case.filt, &case.problem);
    let expo = discrete_exponential(filt, &prob.a, prob.n)?;
    let mut ps = c.p.clone();
    ps.sort_by(f64::total_cmp);
    let exact = ps
        .iter()
        .map(|&p| discrete_reverse_holder(filt, &expo, p))
        .collect::<Result<Vec<_>, _>>()?;
    let monotone = exact.windows(2).all(|w| w[1].value >= w[0].value * (1.0 - 1e-12));
    let bounds = homogeneous_operator_bounds(filt, &expo)?;
    Ok(Artifacts {
        files: vec![(
            "rp.csv".into(),
            csv(
                &["p", "value", "level", "node"],
                exact.iter().map(|e| vec![e.p, e.value, e.level as f64, e.node as f64]),
            ),
        )],
        results: json!({"rp": exact, "monotone_in_p": monotone, "operator_bounds": bounds}),
        warnings: Vec::new(),
        passed: monotone,
    })
}

pub fn equivalence_suite(c: &SuiteExp) -> RunResult<Artifacts> {
    let rep = run_equivalence_suite(c)?;
    let rows = rep.rows.iter().map(|r| {
        vec![
            r.index as f64,
            r.steps as f64,
            r.n as f64,
            r.d as f64,
            r.solution_gap,
            r.duality_gap,
            f64::from(u8::from(r.rp_monotone)),
        ]
    });
    Ok(Artifacts {
        files: vec![(
            "instances.csv".into(),
            csv(&["index", "steps", "n", "d", "solution_gap", "duality_gap", "rp_monotone"], rows),
        )],
        passed: rep.passed,
        results: json_of(&rep),
        warnings: Vec::new(),
    })
}
