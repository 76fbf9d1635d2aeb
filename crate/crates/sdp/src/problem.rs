//! Block-diagonal semidefinite feasibility problems in equality form.
//!
//! A problem asks for symmetric blocks `X_1 ⪰ 0, …, X_k ⪰ 0` and free scalars
//! `w` such that, for every row `i`,
//!
//! ```text
//! Σ_b <A_ib, X_b> + Σ_j F_ij w_j = b_i
//! ```
//!
//! Each `A_ib` is a sparse symmetric matrix stored as upper-triangle entries.
//! An off-diagonal entry `(r, c, a)` stands for `a` at both `(r, c)` and
//! `(c, r)`, so it contributes `2 a X[r, c]` to the row.

use nalgebra::DMatrix;

use crate::SdpError;

/// One entry of a sparse symmetric coefficient matrix (`row <= col`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsdEntry {
    pub block: usize,
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

/// One linear equality row.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Constraint {
    pub psd: Vec<PsdEntry>,
    pub free: Vec<(usize, f64)>,
    pub rhs: f64,
}

impl Constraint {
    pub fn new(rhs: f64) -> Self {
        Self {
            psd: Vec::new(),
            free: Vec::new(),
            rhs,
        }
    }

    /// Adds `value` to the symmetric coefficient at `(i, j)` of `block`.
    pub fn push_psd(&mut self, block: usize, i: usize, j: usize, value: f64) {
        let (row, col) = if i <= j { (i, j) } else { (j, i) };
        self.psd.push(PsdEntry {
            block,
            row,
            col,
            value,
        });
    }

    pub fn push_free(&mut self, index: usize, value: f64) {
        self.free.push((index, value));
    }

    /// Merges duplicate coordinates and drops exact zeros.
    pub fn normalize(&mut self) {
        self.psd
            .sort_by(|a, b| (a.block, a.row, a.col).cmp(&(b.block, b.row, b.col)));
        let mut merged: Vec<PsdEntry> = Vec::with_capacity(self.psd.len());
        for e in self.psd.drain(..) {
            match merged.last_mut() {
                Some(last) if (last.block, last.row, last.col) == (e.block, e.row, e.col) => {
                    last.value += e.value
                }
                _ => merged.push(e),
            }
        }
        merged.retain(|e| e.value != 0.0);
        self.psd = merged;

        self.free.sort_by_key(|&(j, _)| j);
        let mut free: Vec<(usize, f64)> = Vec::with_capacity(self.free.len());
        for (j, v) in self.free.drain(..) {
            match free.last_mut() {
                Some(last) if last.0 == j => last.1 += v,
                _ => free.push((j, v)),
            }
        }
        free.retain(|&(_, v)| v != 0.0);
        self.free = free;
    }

    fn coefficient_norm(&self) -> f64 {
        let psd: f64 = self
            .psd
            .iter()
            .map(|e| {
                if e.row == e.col {
                    e.value * e.value
                } else {
                    2.0 * e.value * e.value
                }
            })
            .sum();
        let free: f64 = self.free.iter().map(|(_, v)| v * v).sum();
        (psd + free).sqrt()
    }
}

/// A block semidefinite feasibility problem.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SdpProblem {
    pub block_dims: Vec<usize>,
    pub num_free: usize,
    pub constraints: Vec<Constraint>,
}

impl SdpProblem {
    pub fn new(block_dims: Vec<usize>, num_free: usize) -> Self {
        Self {
            block_dims,
            num_free,
            constraints: Vec::new(),
        }
    }

    pub fn push(&mut self, mut constraint: Constraint) {
        constraint.normalize();
        self.constraints.push(constraint);
    }

    pub fn num_rows(&self) -> usize {
        self.constraints.len()
    }

    /// Sum of block orders.
    pub fn total_psd_dim(&self) -> usize {
        self.block_dims.iter().sum()
    }

    pub fn rhs(&self) -> Vec<f64> {
        self.constraints.iter().map(|c| c.rhs).collect()
    }

    pub fn check(&self) -> Result<(), SdpError> {
        for (i, c) in self.constraints.iter().enumerate() {
            for e in &c.psd {
                let dim = *self.block_dims.get(e.block).ok_or_else(|| {
                    SdpError::Malformed(format!("row {i} references missing block {}", e.block))
                })?;
                if e.row > e.col || e.col >= dim {
                    return Err(SdpError::Malformed(format!(
                        "row {i} entry ({}, {}) invalid for block {} of order {dim}",
                        e.row, e.col, e.block
                    )));
                }
                if !e.value.is_finite() {
                    return Err(SdpError::Malformed(format!("row {i} has a non-finite entry")));
                }
            }
            for &(j, v) in &c.free {
                if j >= self.num_free || !v.is_finite() {
                    return Err(SdpError::Malformed(format!(
                        "row {i} references free scalar {j} (of {})",
                        self.num_free
                    )));
                }
            }
            if !c.rhs.is_finite() {
                return Err(SdpError::Malformed(format!("row {i} has a non-finite rhs")));
            }
        }
        Ok(())
    }

    /// `𝒜(X) + F w`.
    pub fn apply(&self, blocks: &[DMatrix<f64>], free: &[f64]) -> Vec<f64> {
        self.constraints
            .iter()
            .map(|c| {
                let mut acc = 0.0;
                for e in &c.psd {
                    let x = blocks[e.block][(e.row, e.col)];
                    acc += if e.row == e.col {
                        e.value * x
                    } else {
                        2.0 * e.value * x
                    };
                }
                for &(j, v) in &c.free {
                    acc += v * free[j];
                }
                acc
            })
            .collect()
    }

    /// `Σ_i y_i A_i`, one dense symmetric matrix per block.
    pub fn adjoint(&self, y: &[f64]) -> Vec<DMatrix<f64>> {
        let mut out: Vec<DMatrix<f64>> = self
            .block_dims
            .iter()
            .map(|&n| DMatrix::zeros(n, n))
            .collect();
        for (c, &yi) in self.constraints.iter().zip(y) {
            if yi == 0.0 {
                continue;
            }
            for e in &c.psd {
                let m = &mut out[e.block];
                m[(e.row, e.col)] += yi * e.value;
                if e.row != e.col {
                    m[(e.col, e.row)] += yi * e.value;
                }
            }
        }
        out
    }

    /// `Fᵀ y`.
    pub fn free_adjoint(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_free];
        for (c, &yi) in self.constraints.iter().zip(y) {
            for &(j, v) in &c.free {
                out[j] += v * yi;
            }
        }
        out
    }

    /// Returns a copy with every row scaled to unit coefficient norm, plus the
    /// applied scale factors.
    pub(crate) fn row_scaled(&self) -> (SdpProblem, Vec<f64>) {
        let mut scaled = self.clone();
        let mut factors = Vec::with_capacity(self.constraints.len());
        for c in &mut scaled.constraints {
            let norm = c.coefficient_norm();
            let s = if norm > 0.0 { 1.0 / norm } else { 1.0 };
            for e in &mut c.psd {
                e.value *= s;
            }
            for f in &mut c.free {
                f.1 *= s;
            }
            c.rhs *= s;
            factors.push(s);
        }
        (scaled, factors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn apply_and_adjoint_are_dual() {
        let mut p = SdpProblem::new(vec![2], 1);
        let mut c = Constraint::new(1.0);
        c.push_psd(0, 1, 0, 3.0);
        c.push_psd(0, 1, 1, 1.0);
        c.push_free(0, -2.0);
        p.push(c);
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 2.0]);
        let lhs = p.apply(&[x.clone()], &[0.25]);
        // 2*3*0.5 + 2 - 0.5
        assert_eq!(lhs, vec![4.5]);
        let adj = p.adjoint(&[2.0]);
        let inner: f64 = adj[0].component_mul(&x).sum() + p.free_adjoint(&[2.0])[0] * 0.25;
        assert!((inner - 2.0 * lhs[0]).abs() < 1e-12);
    }

    #[test]
    fn normalize_merges_duplicates() {
        let mut c = Constraint::new(0.0);
        c.push_psd(0, 0, 1, 1.0);
        c.push_psd(0, 1, 0, 2.0);
        c.push_psd(0, 0, 0, 0.0);
        c.push_free(1, 1.0);
        c.push_free(1, -1.0);
        c.normalize();
        assert_eq!(c.psd.len(), 1);
        assert_eq!(c.psd[0].value, 3.0);
        assert!(c.free.is_empty());
    }

    #[test]
    fn check_rejects_out_of_range() {
        let mut p = SdpProblem::new(vec![1], 0);
        let mut c = Constraint::new(0.0);
        c.push_psd(0, 0, 1, 1.0);
        p.push(c);
        assert!(matches!(p.check(), Err(SdpError::Malformed(_))));
    }
}
