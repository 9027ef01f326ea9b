//! Seeded Brownian path ensembles.

use std::io::Write;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{LabError, Result};
use crate::grid::TimeGrid;
use crate::rng::{self, Domain};

/// `M` discretized `d`-dimensional Brownian paths on a common grid.
///
/// Storage is path-major, step-minor, coordinate-innermost.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    grid: TimeGrid,
    dim: usize,
    paths: usize,
    seed: u64,
    increments: Vec<f64>,
    states: Vec<f64>,
    running_max: Vec<f64>,
}

/// What a coefficient field or functional may look at: time, current position and the
/// running maximum of `|B|` up to now.
#[derive(Debug, Clone, Copy)]
pub struct PathState<'a> {
    pub t: f64,
    pub x: &'a [f64],
    pub max_abs: f64,
}

pub fn generate_brownian(grid: &TimeGrid, dim: usize, paths: usize, seed: u64) -> Result<PathEnsemble> {
    if dim == 0 {
        return Err(LabError::Config("Brownian dimension must be at least 1".into()));
    }
    if paths == 0 {
        return Err(LabError::Config("ensemble needs at least one path".into()));
    }
    let k = grid.steps();
    let sqrt_dt: Vec<f64> = (0..k).map(|j| grid.dt(j).sqrt()).collect();
    let mut increments = vec![0.0; paths * k * dim];
    increments
        .par_chunks_mut(k * dim)
        .enumerate()
        .for_each(|(m, chunk)| {
            let mut r = rng::stream(seed, Domain::Brownian, m as u64);
            for (j, step) in chunk.chunks_mut(dim).enumerate() {
                for v in step.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut r);
                    *v = z * sqrt_dt[j];
                }
            }
        });
    Ok(PathEnsemble::from_increments(grid.clone(), dim, seed, increments))
}

impl PathEnsemble {
    /// Builds an ensemble from explicit increments (length `M * K * d`).
    pub fn from_increments(grid: TimeGrid, dim: usize, seed: u64, increments: Vec<f64>) -> Self {
        let k = grid.steps();
        let paths = increments.len() / (k * dim);
        assert_eq!(paths * k * dim, increments.len(), "increment buffer has wrong length");
        let mut states = vec![0.0; paths * (k + 1) * dim];
        let mut running_max = vec![0.0; paths * (k + 1)];
        states
            .par_chunks_mut((k + 1) * dim)
            .zip(running_max.par_chunks_mut(k + 1))
            .enumerate()
            .for_each(|(m, (st, mx))| {
                let inc = &increments[m * k * dim..(m + 1) * k * dim];
                let mut best = 0.0f64;
                for j in 0..k {
                    let mut norm2 = 0.0;
                    for a in 0..dim {
                        let v = st[j * dim + a] + inc[j * dim + a];
                        st[(j + 1) * dim + a] = v;
                        norm2 += v * v;
                    }
                    best = best.max(norm2.sqrt());
                    mx[j + 1] = best;
                }
            });
        Self {
            grid,
            dim,
            paths,
            seed,
            increments,
            states,
            running_max,
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn paths(&self) -> usize {
        self.paths
    }
    pub fn steps(&self) -> usize {
        self.grid.steps()
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `ΔB` of path `m` over `[t_k, t_{k+1}]`.
    pub fn increment(&self, m: usize, k: usize) -> &[f64] {
        let d = self.dim;
        let base = (m * self.steps() + k) * d;
        &self.increments[base..base + d]
    }

    /// `B_{t_k}` of path `m`.
    pub fn state(&self, m: usize, k: usize) -> &[f64] {
        let d = self.dim;
        let base = (m * (self.steps() + 1) + k) * d;
        &self.states[base..base + d]
    }

    pub fn running_max(&self, m: usize, k: usize) -> f64 {
        self.running_max[m * (self.steps() + 1) + k]
    }

    pub fn path_state(&self, m: usize, k: usize) -> PathState<'_> {
        PathState {
            t: self.grid.t(k),
            x: self.state(m, k),
            max_abs: self.running_max(m, k),
        }
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// Same paths observed on every `factor`-th node (increments are summed).
    pub fn coarsen(&self, factor: usize) -> Result<PathEnsemble> {
        let grid = self.grid.coarsen(factor)?;
        let kc = grid.steps();
        let d = self.dim;
        let mut inc = vec![0.0; self.paths * kc * d];
        for m in 0..self.paths {
            for j in 0..kc {
                for s in 0..factor {
                    let src = self.increment(m, j * factor + s);
                    for a in 0..d {
                        inc[(m * kc + j) * d + a] += src[a];
                    }
                }
            }
        }
        Ok(PathEnsemble::from_increments(grid, d, self.seed, inc))
    }

    /// CSV dump: `path,step,t,dB_0..,B_0..` (one row per path and node; the last node has empty increments).
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let d = self.dim;
        let mut header = String::from("path,step,t");
        for a in 0..d {
            header.push_str(&format!(",dB_{a}"));
        }
        for a in 0..d {
            header.push_str(&format!(",B_{a}"));
        }
        writeln!(w, "{header}")?;
        let k = self.steps();
        for m in 0..self.paths {
            for j in 0..=k {
                let mut row = format!("{m},{j},{}", fmt17(self.grid.t(j)));
                for a in 0..d {
                    row.push(',');
                    if j < k {
                        row.push_str(&fmt17(self.increment(m, j)[a]));
                    }
                }
                for a in 0..d {
                    row.push(',');
                    row.push_str(&fmt17(self.state(m, j)[a]));
                }
                writeln!(w, "{row}")?;
            }
        }
        Ok(())
    }

    /// Flat little-endian dump: header `[paths, steps, dim, seed]` as u64, the `K + 1` grid
    /// nodes, then increments path-major, step-minor.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        for h in [self.paths as u64, self.steps() as u64, self.dim as u64, self.seed] {
            w.write_all(&h.to_le_bytes())?;
        }
        for t in self.grid.nodes() {
            w.write_all(&t.to_le_bytes())?;
        }
        for v in &self.increments {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary(bytes: &[u8]) -> Result<PathEnsemble> {
        let word = |i: usize| -> Result<[u8; 8]> {
            bytes
                .get(i * 8..i * 8 + 8)
                .map(|s| s.try_into().unwrap())
                .ok_or_else(|| LabError::Config("truncated binary ensemble".into()))
        };
        let paths = u64::from_le_bytes(word(0)?) as usize;
        let steps = u64::from_le_bytes(word(1)?) as usize;
        let dim = u64::from_le_bytes(word(2)?) as usize;
        let seed = u64::from_le_bytes(word(3)?);
        let mut nodes = Vec::with_capacity(steps + 1);
        for i in 0..=steps {
            nodes.push(f64::from_le_bytes(word(4 + i)?));
        }
        let grid = TimeGrid::from_nodes(nodes)?;
        let off = 5 + steps;
        let n = paths * steps * dim;
        let mut inc = Vec::with_capacity(n);
        for i in 0..n {
            inc.push(f64::from_le_bytes(word(off + i)?));
        }
        if paths == 0 || dim == 0 {
            return Err(LabError::Empty);
        }
        Ok(PathEnsemble::from_increments(grid, dim, seed, inc))
    }
}

/// Round-trippable 17-significant-digit formatting.
pub fn fmt17(x: f64) -> String {
    format!("{:.16e}", x)
}
