//! Coefficient fields `A in (R^d)^{n x n}` as functions of the Brownian state, with
//! structure tags, plus the registry of built-in fields.

use std::f64::consts::FRAC_PI_2;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::brownian::PathState;
use crate::error::{LabError, Result};
use crate::rng::{self, Domain};
use crate::tensor::MatD;

/// Structure tag of a coefficient field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Structure {
    Generic,
    /// `A^i_j = 0` for `j > i`.
    LowerTriangular,
    /// `A = Diag(lambda)` for an `(R^d)^n`-valued field `lambda`.
    Diagonal,
    /// `A^i_j = a^i b_j` with an `(R^d)^n`-valued field `a` and a constant `b in R^n`.
    RightOuter { b: Vec<f64> },
    /// `A^i_j = a_i b^j` with a constant `a in R^n` and an `(R^d)^n`-valued field `b`.
    LeftOuter { a: Vec<f64> },
    /// `A^i_j = a^i b_j + delta_ij lambda^i`.
    OuterPlusDiagonal { b: Vec<f64> },
}

impl Structure {
    pub fn label(&self) -> &'static str {
        match self {
            Structure::Generic => "generic",
            Structure::LowerTriangular => "lower_triangular",
            Structure::Diagonal => "diagonal",
            Structure::RightOuter { .. } => "right_outer",
            Structure::LeftOuter { .. } => "left_outer",
            Structure::OuterPlusDiagonal { .. } => "outer_plus_diagonal",
        }
    }

    /// Diagonal fields are also lower triangular.
    pub fn is_lower_triangular(&self) -> bool {
        matches!(self, Structure::LowerTriangular | Structure::Diagonal)
    }
}

pub trait CoefficientField: Send + Sync {
    fn name(&self) -> String;
    fn n(&self) -> usize;
    fn d(&self) -> usize;

    /// Writes `A(t, state)` into `out` (length `n * n * d`, layout of [`MatD`]).
    fn eval(&self, state: &PathState<'_>, out: &mut [f64]);

    fn structure(&self) -> Structure {
        Structure::Generic
    }

    /// Declared bound on `||A||_bmo`, if known.
    fn bmo_bound(&self) -> Option<f64> {
        None
    }

    /// True when `eval` looks at the running maximum of the path, not only `(t, B_t)`.
    fn path_dependent(&self) -> bool {
        false
    }

    /// Label used to split regressions for path-dependent fields.
    fn regime(&self, _state: &PathState<'_>) -> usize {
        0
    }

    fn is_zero(&self) -> bool {
        false
    }

    /// The field-valued factor of an outer-product structure (`a` for right-outer, `b` for
    /// left-outer), recovered from `eval`; `out` has length `n * d`.
    fn outer_factor(&self, state: &PathState<'_>, out: &mut [f64]) {
        let (n, d) = (self.n(), self.d());
        let mut a = vec![0.0; n * n * d];
        self.eval(state, &mut a);
        match self.structure() {
            Structure::RightOuter { b } => {
                let j = argmax_abs(&b);
                for i in 0..n {
                    for c in 0..d {
                        out[i * d + c] = a[(i * n + j) * d + c] / b[j];
                    }
                }
            }
            Structure::OuterPlusDiagonal { b } => {
                // Row i is read off a column j != i, where the diagonal part does not enter.
                for i in 0..n {
                    let j = (0..n)
                        .filter(|&j| j != i || n == 1)
                        .max_by(|&x, &y| b[x].abs().total_cmp(&b[y].abs()))
                        .unwrap_or(0);
                    for c in 0..d {
                        out[i * d + c] = a[(i * n + j) * d + c] / b[j];
                    }
                }
            }
            Structure::LeftOuter { a: av } => {
                let i = argmax_abs(&av);
                for j in 0..n {
                    for c in 0..d {
                        out[j * d + c] = a[(i * n + j) * d + c] / av[i];
                    }
                }
            }
            _ => out.iter_mut().for_each(|v| *v = 0.0),
        }
    }

    fn eval_mat(&self, state: &PathState<'_>) -> MatD {
        let mut out = vec![0.0; self.n() * self.n() * self.d()];
        self.eval(state, &mut out);
        MatD::from_flat(self.n(), self.d(), out).expect("field output has declared shape")
    }
}

fn argmax_abs(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, -1.0), |acc, (i, x)| if x.abs() > acc.1 { (i, x.abs()) } else { acc })
        .0
}

/// Constant coefficient.
#[derive(Debug, Clone)]
pub struct ConstantField {
    name: String,
    mat: MatD,
    structure: Structure,
}

impl ConstantField {
    pub fn new(name: &str, mat: MatD, structure: Structure) -> Self {
        Self {
            name: name.to_string(),
            mat,
            structure,
        }
    }

    pub fn zero(n: usize, d: usize) -> Self {
        Self::new("zero", MatD::zeros(n, d), Structure::Diagonal)
    }

    pub fn scalar(a: f64) -> Self {
        Self::new(
            &format!("scalar-{a}"),
            MatD::from_flat(1, 1, vec![a]).unwrap(),
            Structure::Diagonal,
        )
    }
}

impl CoefficientField for ConstantField {
    fn name(&self) -> String {
        self.name.clone()
    }
    fn n(&self) -> usize {
        self.mat.n()
    }
    fn d(&self) -> usize {
        self.mat.d()
    }
    fn eval(&self, _state: &PathState<'_>, out: &mut [f64]) {
        out.copy_from_slice(self.mat.as_slice());
    }
    fn structure(&self) -> Structure {
        self.structure.clone()
    }
    fn bmo_bound(&self) -> Option<f64> {
        // ||A||_bmo <= sup|A| * sqrt(T); reported per unit horizon.
        Some(self.mat.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt())
    }
    fn is_zero(&self) -> bool {
        self.mat.as_slice().iter().all(|v| *v == 0.0)
    }
}

type EvalFn = dyn Fn(&PathState<'_>, &mut [f64]) + Send + Sync;

/// Field given by a closure of `(t, B_t)`.
#[derive(Clone)]
pub struct FnField {
    name: String,
    n: usize,
    d: usize,
    structure: Structure,
    bound: Option<f64>,
    f: Arc<EvalFn>,
}

impl FnField {
    pub fn new(
        name: &str,
        n: usize,
        d: usize,
        structure: Structure,
        bound: Option<f64>,
        f: impl Fn(&PathState<'_>, &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.to_string(),
            n,
            d,
            structure,
            bound,
            f: Arc::new(f),
        }
    }
}

impl CoefficientField for FnField {
    fn name(&self) -> String {
        self.name.clone()
    }
    fn n(&self) -> usize {
        self.n
    }
    fn d(&self) -> usize {
        self.d
    }
    fn eval(&self, state: &PathState<'_>, out: &mut [f64]) {
        (self.f)(state, out)
    }
    fn structure(&self) -> Structure {
        self.structure.clone()
    }
    fn bmo_bound(&self) -> Option<f64> {
        self.bound
    }
}

/// `A = J 1_{t <= tau}` with `J = [[0, 1], [-1, 0]]` and `tau` the first grid time where
/// `|B|` reaches `level`. Its exponential is `e^{(tau ^ t)/2}` times the rotation by
/// `B_{tau ^ t}`.
#[derive(Debug, Clone)]
pub struct EmeryField {
    pub level: f64,
}

impl Default for EmeryField {
    fn default() -> Self {
        Self { level: FRAC_PI_2 }
    }
}

impl CoefficientField for EmeryField {
    fn name(&self) -> String {
        "emery".into()
    }
    fn n(&self) -> usize {
        2
    }
    fn d(&self) -> usize {
        1
    }
    fn eval(&self, state: &PathState<'_>, out: &mut [f64]) {
        let on = if state.max_abs < self.level { 1.0 } else { 0.0 };
        out.copy_from_slice(&[0.0, on, -on, 0.0]);
    }
    fn path_dependent(&self) -> bool {
        true
    }
    fn regime(&self, state: &PathState<'_>) -> usize {
        usize::from(state.max_abs >= self.level)
    }
}

/// Checks that `eval` output respects the declared structure on random states.
pub fn verify_structure(field: &dyn CoefficientField, samples: usize, seed: u64) -> Result<()> {
    let (n, d) = (field.n(), field.d());
    let mut r = rng::stream(seed, Domain::Sampling, 0);
    let mut a = vec![0.0; n * n * d];
    let mut fac = vec![0.0; n * d];
    let tol = 1e-10;
    for _ in 0..samples {
        let x: Vec<f64> = (0..d).map(|_| r.gen_range(-3.0..3.0)).collect();
        let t = r.gen_range(0.0..1.0);
        let st = PathState { t, x: &x, max_abs: x.iter().map(|v| v * v).sum::<f64>().sqrt() };
        field.eval(&st, &mut a);
        if a.iter().any(|v| !v.is_finite()) {
            return Err(LabError::InvalidParameter(format!("field '{}' produced a non-finite value", field.name())));
        }
        let entry = |i: usize, j: usize| &a[(i * n + j) * d..(i * n + j + 1) * d];
        let bad = |what: &str| {
            Err(LabError::InvalidParameter(format!(
                "field '{}' violates its {} tag: {what}",
                field.name(),
                field.structure().label()
            )))
        };
        match field.structure() {
            Structure::Generic => {}
            Structure::LowerTriangular => {
                for i in 0..n {
                    for j in i + 1..n {
                        if entry(i, j).iter().any(|v| v.abs() > tol) {
                            return bad(&format!("nonzero entry ({i},{j}) above the diagonal"));
                        }
                    }
                }
            }
            Structure::Diagonal => {
                for i in 0..n {
                    for j in 0..n {
                        if i != j && entry(i, j).iter().any(|v| v.abs() > tol) {
                            return bad(&format!("nonzero off-diagonal entry ({i},{j})"));
                        }
                    }
                }
            }
            Structure::RightOuter { ref b } | Structure::LeftOuter { a: ref b } if b.len() != n => {
                return bad("constant factor has the wrong length");
            }
            Structure::RightOuter { b } => {
                field.outer_factor(&st, &mut fac);
                for i in 0..n {
                    for j in 0..n {
                        for c in 0..d {
                            if (entry(i, j)[c] - fac[i * d + c] * b[j]).abs() > tol {
                                return bad(&format!("entry ({i},{j}) is not a^i b_j"));
                            }
                        }
                    }
                }
            }
            Structure::LeftOuter { a: av } => {
                field.outer_factor(&st, &mut fac);
                for i in 0..n {
                    for j in 0..n {
                        for c in 0..d {
                            if (entry(i, j)[c] - av[i] * fac[j * d + c]).abs() > tol {
                                return bad(&format!("entry ({i},{j}) is not a_i b^j"));
                            }
                        }
                    }
                }
            }
            Structure::OuterPlusDiagonal { b } => {
                if b.len() != n {
                    return bad("constant factor has the wrong length");
                }
            }
        }
    }
    Ok(())
}

/// Registry entry for a built-in field.
pub struct FieldEntry {
    pub name: &'static str,
    pub description: &'static str,
    pub build: fn() -> Arc<dyn CoefficientField>,
}

fn triangular3() -> Arc<dyn CoefficientField> {
    Arc::new(FnField::new(
        "triangular-3",
        3,
        1,
        Structure::LowerTriangular,
        Some(1.0),
        |s, out| {
            let x = s.x[0];
            let (sx, cx) = (x.sin(), x.cos());
            out.copy_from_slice(&[
                0.4 + 0.2 * sx, 0.0, 0.0,
                0.3 * cx, -0.3, 0.0,
                0.2, 0.25 * sx, 0.35 * cx,
            ]);
        },
    ))
}

fn left_outer3() -> Arc<dyn CoefficientField> {
    let a = [1.0, 0.5, -0.5];
    Arc::new(FnField::new(
        "left-outer-3",
        3,
        1,
        Structure::LeftOuter { a: a.to_vec() },
        Some(1.0),
        move |s, out| {
            let x = s.x[0];
            let b = [0.4 * x.cos(), 0.3, 0.2 * x.sin()];
            for i in 0..3 {
                for j in 0..3 {
                    out[i * 3 + j] = a[i] * b[j];
                }
            }
        },
    ))
}

fn right_outer3() -> Arc<dyn CoefficientField> {
    let b = [1.0, -0.5, 0.5];
    Arc::new(FnField::new(
        "right-outer-3",
        3,
        1,
        Structure::RightOuter { b: b.to_vec() },
        Some(1.0),
        move |s, out| {
            let x = s.x[0];
            let a = [0.4 * x.sin(), 0.35, 0.3 * x.cos()];
            for i in 0..3 {
                for j in 0..3 {
                    out[i * 3 + j] = a[i] * b[j];
                }
            }
        },
    ))
}

fn generic2() -> Arc<dyn CoefficientField> {
    Arc::new(FnField::new("generic-2x2-d2", 2, 2, Structure::Generic, Some(1.0), |s, out| {
        let (x, y) = (s.x[0], s.x[1]);
        out.copy_from_slice(&[
            0.3, 0.1 * x.sin(),
            0.2 * y.cos(), -0.2,
            -0.1, 0.25,
            0.3 * (x - y).sin(), 0.15,
        ]);
    }))
}

fn scalar_half() -> Arc<dyn CoefficientField> {
    Arc::new(ConstantField::scalar(0.5))
}

fn emery() -> Arc<dyn CoefficientField> {
    Arc::new(EmeryField::default())
}

fn zero2() -> Arc<dyn CoefficientField> {
    Arc::new(ConstantField::zero(2, 1))
}

pub static BUILTIN_FIELDS: &[FieldEntry] = &[
    FieldEntry { name: "zero", description: "A = 0 with n = 2, d = 1", build: zero2 },
    FieldEntry { name: "scalar-0.5", description: "n = d = 1, A = 0.5", build: scalar_half },
    FieldEntry {
        name: "triangular-3",
        description: "n = 3, d = 1 lower-triangular bounded field of (t, B_t)",
        build: triangular3,
    },
    FieldEntry {
        name: "left-outer-3",
        description: "n = 3, d = 1, A = a b(B_t)^T with a = (1, 0.5, -0.5)",
        build: left_outer3,
    },
    FieldEntry {
        name: "right-outer-3",
        description: "n = 3, d = 1, A = a(B_t) b^T with b = (1, -0.5, 0.5)",
        build: right_outer3,
    },
    FieldEntry {
        name: "generic-2x2-d2",
        description: "n = 2, d = 2 bounded generic field",
        build: generic2,
    },
    FieldEntry {
        name: "emery",
        description: "n = 2, d = 1, A = [[0,1],[-1,0]] until |B| first reaches pi/2",
        build: emery,
    },
];

pub fn builtin_field(name: &str) -> Result<Arc<dyn CoefficientField>> {
    BUILTIN_FIELDS
        .iter()
        .find(|e| e.name == name)
        .map(|e| (e.build)())
        .ok_or_else(|| {
            let names: Vec<&str> = BUILTIN_FIELDS.iter().map(|e| e.name).collect();
            LabError::unknown("coefficient field", name, &names)
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_respect_their_tags() {
        for e in BUILTIN_FIELDS {
            let f = (e.build)();
            verify_structure(f.as_ref(), 50, 3).unwrap_or_else(|err| panic!("{}: {err}", e.name));
        }
    }

    #[test]
    fn mislabeled_field_is_caught() {
        let f = FnField::new("bad", 2, 1, Structure::LowerTriangular, None, |_, out| {
            out.copy_from_slice(&[1.0, 1.0, 0.0, 1.0]);
        });
        assert!(verify_structure(&f, 5, 0).is_err());
    }

    #[test]
    fn outer_factor_recovers_a_field() {
        let f = right_outer3();
        let x = [0.7];
        let st = PathState { t: 0.0, x: &x, max_abs: 0.7 };
        let mut a = [0.0; 3];
        f.outer_factor(&st, &mut a);
        assert!((a[0] - 0.4 * 0.7f64.sin()).abs() < 1e-12);
        assert!((a[1] - 0.35).abs() < 1e-12);
    }

    #[test]
    fn emery_switches_off_after_exit() {
        let f = EmeryField::default();
        let x = [0.1];
        let mut out = [0.0; 4];
        f.eval(&PathState { t: 0.0, x: &x, max_abs: 1.0 }, &mut out);
        assert_eq!(out, [0.0, 1.0, -1.0, 0.0]);
        f.eval(&PathState { t: 0.0, x: &x, max_abs: 1.6 }, &mut out);
        assert_eq!(out, [0.0; 4]);
    }

    #[test]
    fn unknown_name_suggests() {
        let err = builtin_field("triangular").err().unwrap().to_string();
        assert!(err.contains("triangular-3"), "{err}");
    }
}
