//! Randomized tree instances on which the backward induction, the representation formula,
//! the scalar duality identity and the reverse Hölder constants are compared exactly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::oracle::{
    discrete_exponential, discrete_linear_bsde_solve, discrete_reverse_holder, homogeneous_operator_bounds,
    random_tree_instance, representation, verify_scalar_duality,
};
use crate::rng::{self, Domain};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EquivalenceConfig {
    pub instances: usize,
    pub seed: u64,
    pub max_steps: usize,
    pub max_n: usize,
    pub max_d: usize,
    /// Coefficient entries are uniform in `[-scale, scale]`.
    pub scale: f64,
    pub p_values: Vec<f64>,
    /// Random test variables per duality check, besides the witness.
    pub random_tests: usize,
    pub solution_tolerance: f64,
    pub duality_tolerance: f64,
}

impl Default for EquivalenceConfig {
    fn default() -> Self {
        Self {
            instances: 25,
            seed: 0,
            max_steps: 8,
            max_n: 3,
            max_d: 2,
            scale: 0.8,
            p_values: vec![1.0, 1.5, 2.0, 3.0],
            random_tests: 8,
            solution_tolerance: 1e-10,
            duality_tolerance: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceRow {
    pub index: usize,
    pub steps: usize,
    pub n: usize,
    pub d: usize,
    pub lower_triangular: bool,
    /// `max |Y - S^{-1} E[S (xi + sum beta dt)]|` over all nodes.
    pub solution_gap: f64,
    pub backward_residual: f64,
    /// `max_p |lhs - witness rhs|` of the scalar duality identity.
    pub duality_gap: f64,
    /// Random test variables never beat the witness (up to rounding).
    pub witness_dominates: bool,
    pub duality_level: usize,
    /// Exact `R_p` for each configured `p`.
    pub rp: Vec<f64>,
    pub rp_monotone: bool,
    /// `L <= R_1 <= n L`.
    pub operator_bounds_hold: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub rows: Vec<InstanceRow>,
    pub max_solution_gap: f64,
    pub max_duality_gap: f64,
    pub all_monotone: bool,
    pub passed: bool,
}

pub fn run_equivalence_suite(cfg: &EquivalenceConfig) -> Result<EquivalenceReport> {
    if cfg.instances == 0 || cfg.max_steps == 0 || cfg.max_n == 0 || cfg.max_d == 0 {
        return Err(LabError::Config("equivalence suite needs positive instance count and sizes".into()));
    }
    let mut ps = cfg.p_values.clone();
    if ps.iter().any(|p| p.is_nan() || *p < 1.0) {
        return Err(LabError::Config("exponents must be >= 1".into()));
    }
    ps.sort_by(f64::total_cmp);
    let mut r = rng::stream(cfg.seed, Domain::RandomTree, u64::MAX);
    let mut rows = Vec::with_capacity(cfg.instances);
    for index in 0..cfg.instances {
        let steps = r.gen_range(1..=cfg.max_steps);
        let n = r.gen_range(1..=cfg.max_n);
        // Keep the tree at most 2^16 leaves.
        let d = r.gen_range(1..=cfg.max_d).min((16 / steps).max(1));
        let lower_triangular = r.gen_bool(0.5);
        let inst_seed = r.gen::<u64>();
        let inst = random_tree_instance(inst_seed, steps, n, d, cfg.scale, lower_triangular)?;
        let (filt, prob) = (&inst.filt, &inst.problem);
        let sol = discrete_linear_bsde_solve(filt, prob)?;
        let expo = discrete_exponential(filt, &prob.a, n)?;
        let rep = representation(filt, &expo, &prob.xi, prob.beta.as_ref())?;
        let mut solution_gap = 0.0f64;
        for k in 0..=steps {
            for i in 0..filt.level_size(k) {
                for (a, b) in sol.y.at(k, i).iter().zip(rep.at(k, i)) {
                    solution_gap = solution_gap.max((a - b).abs());
                }
            }
        }
        let duality_level = r.gen_range(0..steps);
        let mut duality_gap = 0.0f64;
        let mut witness_dominates = true;
        for &p in &ps {
            let rep = verify_scalar_duality(filt, &prob.xi, n, duality_level, p, cfg.random_tests, r.gen())?;
            duality_gap = duality_gap.max((rep.lhs - rep.witness_rhs).abs());
            witness_dominates &= rep.random_rhs <= rep.lhs * (1.0 + 1e-9) + 1e-12;
        }
        let rp: Vec<f64> = ps
            .iter()
            .map(|&p| discrete_reverse_holder(filt, &expo, p).map(|e| e.value))
            .collect::<Result<_>>()?;
        let rp_monotone = rp.windows(2).all(|w| w[1] >= w[0] * (1.0 - 1e-12));
        let b = homogeneous_operator_bounds(filt, &expo)?;
        let tol = 1e-12 * b.r1.max(1.0);
        let operator_bounds_hold = b.row_constant <= b.r1 + tol && b.r1 <= n as f64 * b.row_constant + tol;
        rows.push(InstanceRow {
            index,
            steps,
            n,
            d,
            lower_triangular,
            solution_gap,
            backward_residual: sol.backward_residual,
            duality_gap,
            witness_dominates,
            duality_level,
            rp,
            rp_monotone,
            operator_bounds_hold,
        });
    }
    let max_solution_gap = rows.iter().map(|r| r.solution_gap).fold(0.0, f64::max);
    let max_duality_gap = rows.iter().map(|r| r.duality_gap).fold(0.0, f64::max);
    let all_monotone = rows.iter().all(|r| r.rp_monotone);
    let passed = max_solution_gap <= cfg.solution_tolerance
        && max_duality_gap <= cfg.duality_tolerance
        && all_monotone
        && rows.iter().all(|r| r.witness_dominates && r.operator_bounds_hold);
    Ok(EquivalenceReport {
        rows,
        max_solution_gap,
        max_duality_gap,
        all_monotone,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        let cfg = EquivalenceConfig {
            instances: 6,
            max_steps: 4,
            ..Default::default()
        };
        let rep = run_equivalence_suite(&cfg).unwrap();
        assert!(rep.passed, "{rep:?}");
        assert_eq!(rep.rows.len(), 6);
    }

    #[test]
    fn rejects_bad_exponent() {
        let cfg = EquivalenceConfig {
            p_values: vec![0.5],
            ..Default::default()
        };
        assert!(run_equivalence_suite(&cfg).is_err());
    }
}
