//! Exact computations on finite product filtrations: each step every Brownian coordinate
//! moves by `+-sqrt(dt)` with probability 1/2, so conditional expectations are finite
//! averages and every quantity below is exact up to floating point.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::brownian::{PathEnsemble, PathState};
use crate::error::{LabError, Result};
use crate::field::CoefficientField;
use crate::grid::TimeGrid;
use crate::linalg::{identity, inverse, matmul, matvec, op_norm};
use crate::rng::{self, Domain};
use crate::tensor::{contract_increment, contract_into};

/// Largest number of leaves a tree may have.
const MAX_LEAVES: usize = 1 << 24;

/// Nodes at level `k` are indexed `0..2^{dk}`; the children of node `i` are
/// `i * 2^d + c`, where bit `a` of `c` selects the sign of coordinate `a` (0: up).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiniteFiltration {
    steps: usize,
    dim: usize,
    dt: f64,
}

/// Values of a process at every node of levels `0..levels`, `width` numbers per node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeProcess {
    pub width: usize,
    pub levels: Vec<Vec<f64>>,
}

impl FiniteFiltration {
    pub fn new(steps: usize, dim: usize, dt: f64) -> Result<Self> {
        if steps == 0 || dim == 0 || !(dt > 0.0) {
            return Err(LabError::Config("tree needs steps >= 1, dim >= 1, dt > 0".into()));
        }
        let leaves = 1usize.checked_shl((dim * steps) as u32).unwrap_or(usize::MAX);
        if dim * steps >= usize::BITS as usize || leaves > MAX_LEAVES {
            return Err(LabError::Config(format!("tree with {steps} steps in dimension {dim} is too large")));
        }
        Ok(Self { steps, dim, dt })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn dt(&self) -> f64 {
        self.dt
    }
    pub fn branching(&self) -> usize {
        1 << self.dim
    }
    pub fn level_size(&self, k: usize) -> usize {
        1 << (self.dim * k)
    }
    pub fn leaves(&self) -> usize {
        self.level_size(self.steps)
    }

    /// Probability of each node at level `k`.
    pub fn node_probability(&self, k: usize) -> f64 {
        1.0 / self.level_size(k) as f64
    }

    /// Brownian increment leading to child slot `c`.
    pub fn increment(&self, c: usize) -> Vec<f64> {
        let h = self.dt.sqrt();
        (0..self.dim).map(|a| if (c >> a) & 1 == 0 { h } else { -h }).collect()
    }

    /// Brownian state at node `i` of level `k`.
    pub fn state(&self, k: usize, i: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.dim];
        let br = self.branching();
        let mut node = i;
        for _ in 0..k {
            let c = node % br;
            for (xa, da) in x.iter_mut().zip(self.increment(c)) {
                *xa += da;
            }
            node /= br;
        }
        x
    }

    /// Largest `|B|` along the path from the root to node `i` of level `k`.
    pub fn running_max(&self, k: usize, i: usize) -> f64 {
        let br = self.branching();
        let mut slots = Vec::with_capacity(k);
        let mut node = i;
        for _ in 0..k {
            slots.push(node % br);
            node /= br;
        }
        let mut x = vec![0.0; self.dim];
        let mut best = 0.0f64;
        for &c in slots.iter().rev() {
            for (xa, da) in x.iter_mut().zip(self.increment(c)) {
                *xa += da;
            }
            best = best.max(x.iter().map(|v| v * v).sum::<f64>().sqrt());
        }
        best
    }

    pub fn grid(&self) -> TimeGrid {
        TimeGrid::uniform(self.dt * self.steps as f64, self.steps).expect("positive horizon")
    }

    /// The whole tree as an ensemble of equally likely paths, path `m` ending at leaf `m`.
    pub fn as_path_ensemble(&self) -> PathEnsemble {
        let (k, d, br) = (self.steps, self.dim, self.branching());
        let leaves = self.leaves();
        let mut inc = Vec::with_capacity(leaves * k * d);
        for leaf in 0..leaves {
            let mut slots = Vec::with_capacity(k);
            let mut node = leaf;
            for _ in 0..k {
                slots.push(node % br);
                node /= br;
            }
            for &c in slots.iter().rev() {
                inc.extend(self.increment(c));
            }
        }
        PathEnsemble::from_increments(self.grid(), d, 0, inc)
    }

    /// Level-`k` ancestor of leaf `leaf`.
    pub fn ancestor(&self, leaf: usize, k: usize) -> usize {
        leaf >> (self.dim * (self.steps - k))
    }
}

impl NodeProcess {
    /// Evaluates `f(k, i, state)` at every node of levels `0..levels`.
    pub fn from_fn(
        filt: &FiniteFiltration,
        width: usize,
        levels: usize,
        mut f: impl FnMut(usize, usize, &PathState<'_>, &mut [f64]),
    ) -> Self {
        let levels = (0..levels)
            .map(|k| {
                let mut v = vec![0.0; filt.level_size(k) * width];
                for i in 0..filt.level_size(k) {
                    let x = filt.state(k, i);
                    let st = PathState {
                        t: k as f64 * filt.dt,
                        x: &x,
                        max_abs: filt.running_max(k, i),
                    };
                    f(k, i, &st, &mut v[i * width..(i + 1) * width]);
                }
                v
            })
            .collect();
        Self { width, levels }
    }

    /// A coefficient field sampled on levels `0..K`.
    pub fn from_field(filt: &FiniteFiltration, field: &dyn CoefficientField) -> Self {
        let w = field.n() * field.n() * field.d();
        Self::from_fn(filt, w, filt.steps, |_, _, st, out| field.eval(st, out))
    }

    pub fn at(&self, k: usize, i: usize) -> &[f64] {
        &self.levels[k][i * self.width..(i + 1) * self.width]
    }
}

/// Exact `E[X | F_k]` of leaf values (`leaves x width`) at every level-`k` node.
pub fn discrete_conditional_expectation(filt: &FiniteFiltration, leaf: &[f64], width: usize, k: usize) -> Result<Vec<f64>> {
    if leaf.len() != filt.leaves() * width {
        return Err(LabError::Shape(format!(
            "leaf values: expected {} entries, got {}",
            filt.leaves() * width,
            leaf.len()
        )));
    }
    if k > filt.steps {
        return Err(LabError::InvalidParameter(format!("level {k} beyond the tree depth {}", filt.steps)));
    }
    let group = filt.leaves() / filt.level_size(k);
    let mut out = vec![0.0; filt.level_size(k) * width];
    for i in 0..filt.level_size(k) {
        for leafi in i * group..(i + 1) * group {
            for c in 0..width {
                out[i * width + c] += leaf[leafi * width + c];
            }
        }
        for c in 0..width {
            out[i * width + c] /= group as f64;
        }
    }
    Ok(out)
}

/// Average of the children values of node `i` (values at level `k + 1`).
fn child_mean(filt: &FiniteFiltration, next: &[f64], width: usize, i: usize, out: &mut [f64]) {
    let br = filt.branching();
    out.iter_mut().for_each(|v| *v = 0.0);
    for c in 0..br {
        let ch = i * br + c;
        for w in 0..width {
            out[w] += next[ch * width + w];
        }
    }
    out.iter_mut().for_each(|v| *v /= br as f64);
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscreteExponential {
    pub n: usize,
    /// `S` on levels `0..=K`, `n^2` per node.
    pub s: NodeProcess,
    /// Nodes where `S` is (numerically) singular.
    pub singular_nodes: Vec<(usize, usize)>,
}

/// `S` at a node is the ordered product of `I + A_j dB_j` along its path.
pub fn discrete_exponential(filt: &FiniteFiltration, a: &NodeProcess, n: usize) -> Result<DiscreteExponential> {
    let d = filt.dim;
    if a.width != n * n * d || a.levels.len() < filt.steps {
        return Err(LabError::Shape("coefficient node process has the wrong shape".into()));
    }
    let nn = n * n;
    let br = filt.branching();
    let mut levels = vec![identity(n)];
    let mut singular = Vec::new();
    let mut adb = vec![0.0; nn];
    let mut step = vec![0.0; nn];
    for k in 0..filt.steps {
        let mut next = vec![0.0; filt.level_size(k + 1) * nn];
        for i in 0..filt.level_size(k) {
            let s = &levels[k][i * nn..(i + 1) * nn];
            for c in 0..br {
                contract_increment(a.at(k, i), &filt.increment(c), n, d, &mut adb);
                step.copy_from_slice(&identity(n));
                for (x, y) in step.iter_mut().zip(&adb) {
                    *x += y;
                }
                let ch = i * br + c;
                matmul(s, &step, n, &mut next[ch * nn..(ch + 1) * nn]);
            }
        }
        levels.push(next);
    }
    for (k, lv) in levels.iter().enumerate() {
        for i in 0..filt.level_size(k) {
            if inverse(&lv[i * nn..(i + 1) * nn], n).is_none() {
                singular.push((k, i));
            }
        }
    }
    Ok(DiscreteExponential {
        n,
        s: NodeProcess { width: nn, levels },
        singular_nodes: singular,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeSolution {
    pub n: usize,
    /// `Y` on levels `0..=K`.
    pub y: NodeProcess,
    /// `Z` on levels `0..K`, `n * d` per node.
    pub z: NodeProcess,
    /// Largest `|Y_k - E_k[Y_{k+1}] - (alpha E_k[Y_{k+1}] + A Z + beta) dt|` over nodes.
    pub backward_residual: f64,
}

/// Inputs of a linear equation on a tree.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeProblem {
    pub n: usize,
    /// `leaves x n`.
    pub xi: Vec<f64>,
    /// Levels `0..K`, `n` per node.
    pub beta: Option<NodeProcess>,
    /// Levels `0..K`, `n * n * d` per node.
    pub a: NodeProcess,
    /// Levels `0..K`, `n * n` per node; multiplies `E_k[Y_{k+1}]`.
    pub alpha: Option<NodeProcess>,
}

/// One-step backward induction
/// `Z_k = E_k[Y_{k+1} dB_k] / dt`,
/// `Y_k = E_k[Y_{k+1}] + (alpha_k E_k[Y_{k+1}] + A_k Z_k + beta_k) dt`, exact on the tree.
pub fn discrete_linear_bsde_solve(filt: &FiniteFiltration, prob: &TreeProblem) -> Result<TreeSolution> {
    let (n, d, dt) = (prob.n, filt.dim, filt.dt);
    if prob.xi.len() != filt.leaves() * n {
        return Err(LabError::Shape("terminal values do not match the leaves".into()));
    }
    if prob.a.width != n * n * d || prob.a.levels.len() < filt.steps {
        return Err(LabError::Shape("coefficient node process has the wrong shape".into()));
    }
    let br = filt.branching();
    let mut y_levels = vec![Vec::new(); filt.steps + 1];
    let mut z_levels = vec![Vec::new(); filt.steps];
    y_levels[filt.steps] = prob.xi.clone();
    let mut ey = vec![0.0; n];
    let mut az = vec![0.0; n];
    let mut al = vec![0.0; n];
    for k in (0..filt.steps).rev() {
        let size = filt.level_size(k);
        let mut y = vec![0.0; size * n];
        let mut z = vec![0.0; size * n * d];
        for i in 0..size {
            child_mean(filt, &y_levels[k + 1], n, i, &mut ey);
            let zi = &mut z[i * n * d..(i + 1) * n * d];
            for c in 0..br {
                let ch = i * br + c;
                let inc = filt.increment(c);
                for r in 0..n {
                    for a in 0..d {
                        zi[r * d + a] += y_levels[k + 1][ch * n + r] * inc[a];
                    }
                }
            }
            zi.iter_mut().for_each(|v| *v /= br as f64 * dt);
            contract_into(prob.a.at(k, i), zi, n, d, &mut az);
            match &prob.alpha {
                Some(alpha) => matvec(alpha.at(k, i), &ey, n, &mut al),
                None => al.iter_mut().for_each(|v| *v = 0.0),
            }
            for r in 0..n {
                let b = prob.beta.as_ref().map_or(0.0, |b| b.at(k, i)[r]);
                y[i * n + r] = ey[r] + (al[r] + az[r] + b) * dt;
            }
        }
        y_levels[k] = y;
        z_levels[k] = z;
    }
    let y = NodeProcess { width: n, levels: y_levels };
    let z = NodeProcess { width: n * d, levels: z_levels };
    let backward_residual = tree_residual(filt, prob, &y, &z);
    Ok(TreeSolution {
        n,
        y,
        z,
        backward_residual,
    })
}

fn tree_residual(filt: &FiniteFiltration, prob: &TreeProblem, y: &NodeProcess, z: &NodeProcess) -> f64 {
    let (n, d, dt) = (prob.n, filt.dim, filt.dt);
    let mut worst = 0.0f64;
    let mut ey = vec![0.0; n];
    let mut az = vec![0.0; n];
    let mut al = vec![0.0; n];
    for k in 0..filt.steps {
        for i in 0..filt.level_size(k) {
            child_mean(filt, &y.levels[k + 1], n, i, &mut ey);
            contract_into(prob.a.at(k, i), z.at(k, i), n, d, &mut az);
            match &prob.alpha {
                Some(alpha) => matvec(alpha.at(k, i), &ey, n, &mut al),
                None => al.iter_mut().for_each(|v| *v = 0.0),
            }
            for r in 0..n {
                let b = prob.beta.as_ref().map_or(0.0, |b| b.at(k, i)[r]);
                worst = worst.max((y.at(k, i)[r] - ey[r] - (al[r] + az[r] + b) * dt).abs());
            }
        }
    }
    worst
}

/// `Y_v = S_v^{-1} E_v[S_K xi + sum_{j >= k} S_j beta_j dt]` at every node.
pub fn representation(filt: &FiniteFiltration, expo: &DiscreteExponential, xi: &[f64], beta: Option<&NodeProcess>) -> Result<NodeProcess> {
    let n = expo.n;
    let nn = n * n;
    let dt = filt.dt;
    if xi.len() != filt.leaves() * n {
        return Err(LabError::Shape("terminal values do not match the leaves".into()));
    }
    // W_v = E_v[S_K xi + sum_{j >= k} S_j beta_j dt], built backwards.
    let mut w_levels = vec![Vec::new(); filt.steps + 1];
    let mut last = vec![0.0; filt.leaves() * n];
    for leaf in 0..filt.leaves() {
        matvec(expo.s.at(filt.steps, leaf), &xi[leaf * n..(leaf + 1) * n], n, &mut last[leaf * n..(leaf + 1) * n]);
    }
    w_levels[filt.steps] = last;
    let mut sb = vec![0.0; n];
    for k in (0..filt.steps).rev() {
        let size = filt.level_size(k);
        let mut w = vec![0.0; size * n];
        for i in 0..size {
            child_mean(filt, &w_levels[k + 1], n, i, &mut w[i * n..(i + 1) * n]);
            if let Some(b) = beta {
                matvec(expo.s.at(k, i), b.at(k, i), n, &mut sb);
                for r in 0..n {
                    w[i * n + r] += sb[r] * dt;
                }
            }
        }
        w_levels[k] = w;
    }
    let mut y_levels = Vec::with_capacity(filt.steps + 1);
    for (k, w) in w_levels.iter().enumerate() {
        let mut y = vec![0.0; filt.level_size(k) * n];
        for i in 0..filt.level_size(k) {
            let inv = inverse(&expo.s.levels[k][i * nn..(i + 1) * nn], n)
                .ok_or_else(|| LabError::Singular(format!("tree node (level {k}, index {i})")))?;
            matvec(&inv, &w[i * n..(i + 1) * n], n, &mut y[i * n..(i + 1) * n]);
        }
        y_levels.push(y);
    }
    Ok(NodeProcess { width: n, levels: y_levels })
}

/// Exact reverse Hölder constant and the node attaining it.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ExactRp {
    pub p: f64,
    pub value: f64,
    pub level: usize,
    pub node: usize,
}

/// `max_v E[|S_v^{-1} S_T|^p | v]` over all nodes (leaves contribute 1).
pub fn discrete_reverse_holder(filt: &FiniteFiltration, expo: &DiscreteExponential, p: f64) -> Result<ExactRp> {
    if p.is_nan() || p < 1.0 {
        return Err(LabError::InvalidParameter(format!("reverse Hölder exponent must be >= 1, got {p}")));
    }
    let n = expo.n;
    let nn = n * n;
    let mut best = ExactRp { p, value: 1.0, level: filt.steps, node: 0 };
    let mut tmp = vec![0.0; nn];
    for k in 0..filt.steps {
        let group = filt.leaves() / filt.level_size(k);
        for i in 0..filt.level_size(k) {
            let inv = inverse(expo.s.at(k, i), n)
                .ok_or_else(|| LabError::Singular(format!("tree node (level {k}, index {i})")))?;
            let mut acc = 0.0;
            for leaf in i * group..(i + 1) * group {
                matmul(&inv, expo.s.at(filt.steps, leaf), n, &mut tmp);
                acc += op_norm(&tmp, n).powf(p);
            }
            let v = acc / group as f64;
            if v > best.value {
                best = ExactRp { p, value: v, level: k, node: i };
            }
        }
    }
    Ok(best)
}

/// Row-wise constant `L = max_v max_i E_v |(S_v^{-1} S_T)^i|` and `R_1`.
///
/// `L` is the norm of `xi -> (Y^i)_i` for the homogeneous equation from `L^inf` (Euclidean
/// unit ball per leaf) into `S^inf` measured componentwise; it satisfies `L <= R_1 <= n L`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OperatorBounds {
    pub row_constant: f64,
    pub r1: f64,
    pub n: usize,
}

pub fn homogeneous_operator_bounds(filt: &FiniteFiltration, expo: &DiscreteExponential) -> Result<OperatorBounds> {
    let n = expo.n;
    let mut row_constant = 1.0f64.min(0.0);
    let mut tmp = vec![0.0; n * n];
    for k in 0..=filt.steps {
        let group = filt.leaves() / filt.level_size(k);
        for i in 0..filt.level_size(k) {
            let inv = inverse(expo.s.at(k, i), n)
                .ok_or_else(|| LabError::Singular(format!("tree node (level {k}, index {i})")))?;
            let mut rows = vec![0.0; n];
            for leaf in i * group..(i + 1) * group {
                matmul(&inv, expo.s.at(filt.steps, leaf), n, &mut tmp);
                for r in 0..n {
                    rows[r] += tmp[r * n..(r + 1) * n].iter().map(|v| v * v).sum::<f64>().sqrt();
                }
            }
            for v in rows {
                row_constant = row_constant.max(v / group as f64);
            }
        }
    }
    let r1 = discrete_reverse_holder(filt, expo, 1.0)?.value;
    Ok(OperatorBounds { row_constant, r1, n })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DualityReport {
    pub p: f64,
    /// `|| E[|X|^p | F_k] ||_inf^{1/p}`
    pub lhs: f64,
    /// Best ratio `||E[X.Y | F_k]||_q / ||Y||_q` over the witnesses `1_G |X|^{p-2} X`.
    pub witness_rhs: f64,
    /// Best ratio over random test variables.
    pub random_rhs: f64,
    pub rhs: f64,
    /// `lhs - rhs`.
    pub gap: f64,
}

fn q_of(p: f64) -> f64 {
    if p == 1.0 {
        f64::INFINITY
    } else {
        p / (p - 1.0)
    }
}

/// `||E[X.Y | F_k]||_q / ||Y||_q` for leaf values `x` (`leaves x width`) and a test variable
/// `y` that vanishes outside the contiguous leaf block `support` (given as `support.len() x width`).
/// The block must be a union of level-`k` atoms; every other term of both norms is zero.
fn dual_ratio(filt: &FiniteFiltration, x: &[f64], y: &[f64], support: std::ops::Range<usize>, width: usize, k: usize, q: f64) -> f64 {
    let leaves = filt.leaves();
    let group = leaves / filt.level_size(k);
    debug_assert!(support.start % group == 0 && support.end % group == 0);
    let local = |l: usize| (l - support.start) * width;
    let cond: Vec<f64> = (support.start / group..support.end / group)
        .map(|g| {
            (g * group..(g + 1) * group)
                .map(|l| (0..width).map(|c| x[l * width + c] * y[local(l) + c]).sum::<f64>())
                .sum::<f64>()
                / group as f64
        })
        .collect();
    let ynorm: Vec<f64> = support
        .clone()
        .map(|l| (0..width).map(|c| y[local(l) + c].powi(2)).sum::<f64>().sqrt())
        .collect();
    let (num, den) = if q.is_infinite() {
        (
            cond.iter().map(|v| v.abs()).fold(0.0, f64::max),
            ynorm.iter().copied().fold(0.0, f64::max),
        )
    } else {
        (
            (cond.iter().map(|v| v.abs().powf(q)).sum::<f64>() / filt.level_size(k) as f64).powf(1.0 / q),
            (ynorm.iter().map(|v| v.powf(q)).sum::<f64>() / leaves as f64).powf(1.0 / q),
        )
    };
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Both sides of the duality between `||E[|X|^p | F_k]||_inf^{1/p}` and the best constant in
/// `||E[X.Y | F_k]||_q <= C ||Y||_q`.
pub fn verify_scalar_duality(
    filt: &FiniteFiltration,
    x: &[f64],
    width: usize,
    k: usize,
    p: f64,
    random_count: usize,
    seed: u64,
) -> Result<DualityReport> {
    if p.is_nan() || p < 1.0 {
        return Err(LabError::InvalidParameter(format!("duality exponent must be >= 1, got {p}")));
    }
    if x.len() != filt.leaves() * width {
        return Err(LabError::Shape("leaf values do not match the tree".into()));
    }
    let q = q_of(p);
    let leaves = filt.leaves();
    let abs: Vec<f64> = (0..leaves)
        .map(|l| (0..width).map(|c| x[l * width + c].powi(2)).sum::<f64>().sqrt())
        .collect();
    let powered: Vec<f64> = abs.iter().map(|v| v.powf(p)).collect();
    let cond = discrete_conditional_expectation(filt, &powered, 1, k)?;
    let lhs = cond.iter().copied().fold(0.0, f64::max).powf(1.0 / p);

    let mut witness_rhs = 0.0f64;
    let group = leaves / filt.level_size(k);
    for g in 0..filt.level_size(k) {
        let block = g * group..(g + 1) * group;
        let mut y = vec![0.0; group * width];
        for l in block.clone() {
            if abs[l] == 0.0 {
                continue;
            }
            let scale = abs[l].powf(p - 2.0);
            for c in 0..width {
                y[(l - block.start) * width + c] = scale * x[l * width + c];
            }
        }
        witness_rhs = witness_rhs.max(dual_ratio(filt, x, &y, block, width, k, q));
    }
    let mut r = rng::stream(seed, Domain::Duality, 0);
    let mut random_rhs = 0.0f64;
    for t in 0..random_count {
        let y: Vec<f64> = (0..leaves * width)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut r);
                // Mix in sparse variables that concentrate on few leaves.
                if t % 2 == 1 && r.gen::<f64>() < 0.8 {
                    0.0
                } else {
                    z
                }
            })
            .collect();
        random_rhs = random_rhs.max(dual_ratio(filt, x, &y, 0..leaves, width, k, q));
    }
    let rhs = witness_rhs.max(random_rhs);
    Ok(DualityReport {
        p,
        lhs,
        witness_rhs,
        random_rhs,
        rhs,
        gap: lhs - rhs,
    })
}

/// Matrix form: `lhs = ||E[|A|^p | F_k]||_inf`, `row_constant = max_i` of the exact dual
/// constant of row `i`, and the implied bound `n^{p/2 + 1} row_constant^p`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixDualityReport {
    pub p: f64,
    pub lhs: f64,
    pub row_constant: f64,
    pub bound: f64,
}

pub fn verify_matrix_duality(filt: &FiniteFiltration, a: &[f64], n: usize, k: usize, p: f64) -> Result<MatrixDualityReport> {
    if a.len() != filt.leaves() * n * n {
        return Err(LabError::Shape("leaf matrices do not match the tree".into()));
    }
    let leaves = filt.leaves();
    let powered: Vec<f64> = (0..leaves).map(|l| op_norm(&a[l * n * n..(l + 1) * n * n], n).powf(p)).collect();
    let lhs = discrete_conditional_expectation(filt, &powered, 1, k)?
        .into_iter()
        .fold(0.0, f64::max);
    let mut row_constant = 0.0f64;
    for i in 0..n {
        let row: Vec<f64> = (0..leaves).flat_map(|l| a[l * n * n + i * n..l * n * n + (i + 1) * n].to_vec()).collect();
        let rep = verify_scalar_duality(filt, &row, n, k, p, 0, 0)?;
        row_constant = row_constant.max(rep.witness_rhs);
    }
    let nf = n as f64;
    Ok(MatrixDualityReport {
        p,
        lhs,
        row_constant,
        bound: nf.powf(p / 2.0 + 1.0) * row_constant.powf(p),
    })
}

/// Randomized instance: coefficients of size `scale` (entries uniform in `[-scale, scale]`),
/// optionally lower triangular; terminal values and inhomogeneity standard normal.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeInstance {
    pub filt: FiniteFiltration,
    pub problem: TreeProblem,
}

pub fn random_tree_instance(
    seed: u64,
    steps: usize,
    n: usize,
    d: usize,
    scale: f64,
    lower_triangular: bool,
) -> Result<TreeInstance> {
    let filt = FiniteFiltration::new(steps, d, 1.0 / steps as f64)?;
    let mut r = rng::stream(seed, Domain::RandomTree, rng::key(&[steps as u64, n as u64, d as u64]));
    let a = NodeProcess::from_fn(&filt, n * n * d, steps, |_, _, _, out| {
        for (e, v) in out.iter_mut().enumerate() {
            let (i, j) = (e / d / n, (e / d) % n);
            *v = if lower_triangular && j > i { 0.0 } else { r.gen_range(-scale..scale) };
        }
    });
    let beta = NodeProcess::from_fn(&filt, n, steps, |_, _, _, out| {
        for v in out.iter_mut() {
            *v = StandardNormal.sample(&mut r);
        }
    });
    let xi = (0..filt.leaves() * n).map(|_| StandardNormal.sample(&mut r)).collect();
    Ok(TreeInstance {
        filt,
        problem: TreeProblem {
            n,
            xi,
            beta: Some(beta),
            a,
            alpha: None,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conditional_expectation_basics() {
        let f = FiniteFiltration::new(1, 1, 1.0).unwrap();
        assert_eq!(discrete_conditional_expectation(&f, &[1.0, -1.0], 1, 0).unwrap(), vec![0.0]);
        assert_eq!(discrete_conditional_expectation(&f, &[3.0, 3.0], 1, 0).unwrap(), vec![3.0]);
    }

    #[test]
    fn tower_property() {
        let f = FiniteFiltration::new(3, 1, 0.5).unwrap();
        let x: Vec<f64> = (0..8).map(|i| (i * i) as f64).collect();
        let e2 = discrete_conditional_expectation(&f, &x, 1, 2).unwrap();
        let mut up = vec![0.0; 8];
        for l in 0..8 {
            up[l] = e2[f.ancestor(l, 2)];
        }
        let lhs = discrete_conditional_expectation(&f, &up, 1, 1).unwrap();
        let rhs = discrete_conditional_expectation(&f, &x, 1, 1).unwrap();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn one_step_exponential_is_martingale() {
        let f = FiniteFiltration::new(1, 1, 0.25).unwrap();
        let a = NodeProcess { width: 1, levels: vec![vec![1.0]] };
        let e = discrete_exponential(&f, &a, 1).unwrap();
        assert_eq!(e.s.levels[1], vec![1.5, 0.5]);
        let r1 = discrete_reverse_holder(&f, &e, 1.0).unwrap();
        let r2 = discrete_reverse_holder(&f, &e, 2.0).unwrap();
        assert_eq!(r1.value, 1.0);
        assert_eq!(r2.value, 1.25);
    }

    #[test]
    fn states_follow_child_signs() {
        let f = FiniteFiltration::new(2, 2, 1.0).unwrap();
        // Node 0b0110 at level 2: first step slot 1 (x down, y up), second slot 2 (x up, y down).
        assert_eq!(f.state(2, 6), vec![0.0, 0.0]);
        assert_eq!(f.state(1, 1), vec![-1.0, 1.0]);
    }

    #[test]
    fn path_ensemble_enumerates_leaves() {
        let f = FiniteFiltration::new(3, 1, 0.25).unwrap();
        let p = f.as_path_ensemble();
        assert_eq!(p.paths(), 8);
        for leaf in 0..8 {
            for k in 0..=3 {
                assert_eq!(p.state(leaf, k), f.state(k, f.ancestor(leaf, k)).as_slice());
            }
        }
    }

    #[test]
    fn duality_on_two_leaves() {
        let f = FiniteFiltration::new(1, 1, 1.0).unwrap();
        let x = [1.0, 0.0, 0.0, 1.0];
        let rep = verify_scalar_duality(&f, &x, 2, 0, 1.0, 10, 1).unwrap();
        assert!((rep.lhs - 1.0).abs() < 1e-15);
        assert!((rep.witness_rhs - 1.0).abs() < 1e-15);
    }

    #[test]
    fn too_large_tree_rejected() {
        assert!(FiniteFiltration::new(30, 1, 0.1).is_err());
        assert!(FiniteFiltration::new(0, 1, 0.1).is_err());
    }
}
