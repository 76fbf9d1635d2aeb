use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;

use crate::linalg::{blocked_cholesky, cholesky, max_step, min_eigenvalue, symmetrized};
use crate::{SdpError, SdpProblem};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    /// Relative primal residual at which a point counts as feasible.
    pub tolerance: f64,
    /// Allowed negativity of a normalized dual ray.
    pub infeasibility_tolerance: f64,
    pub max_iterations: usize,
    /// Fraction of the distance to the cone boundary taken per step.
    pub step_fraction: f64,
    /// Cap on the summed order of all blocks.
    pub max_block_rows: usize,
    pub verbose: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-7,
            infeasibility_tolerance: 1e-7,
            max_iterations: 200,
            step_fraction: 0.98,
            max_block_rows: 1200,
            verbose: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Feasible,
    Infeasible,
    Unknown,
}

#[derive(Debug, Clone)]
pub struct SdpSolution {
    pub status: SolveStatus,
    /// Primal blocks. Meaningful when `status` is `Feasible`.
    pub blocks: Vec<DMatrix<f64>>,
    pub free: Vec<f64>,
    /// Farkas ray `y` with `bᵀy = 1`, `Fᵀy ≈ 0`, `-𝒜*(y) ⪰ 0`.
    pub dual_ray: Option<Vec<f64>>,
    /// `max_i |𝒜(X) + Fw - b|_i / (1 + max|b|)` for the returned point.
    pub primal_residual: f64,
    /// Smallest eigenvalue over the returned blocks.
    pub min_eigenvalue: f64,
    pub iterations: usize,
}

/// Rows of one block with their coefficients expanded to both triangles.
struct BlockRows {
    rows: Vec<usize>,
    entries: Vec<Vec<(usize, usize, f64)>>,
}

/// Rows that share no block with rows outside the set.
struct Component {
    rows: Vec<usize>,
    blocks: Vec<usize>,
}

struct Layout {
    block_rows: Vec<BlockRows>,
    components: Vec<Component>,
    local: Vec<usize>,
}

impl Layout {
    fn new(p: &SdpProblem) -> Self {
        let m = p.num_rows();
        let mut block_rows: Vec<BlockRows> = p
            .block_dims
            .iter()
            .map(|_| BlockRows {
                rows: Vec::new(),
                entries: Vec::new(),
            })
            .collect();
        for (i, c) in p.constraints.iter().enumerate() {
            let mut last_block = usize::MAX;
            for e in &c.psd {
                let br = &mut block_rows[e.block];
                if e.block != last_block {
                    br.rows.push(i);
                    br.entries.push(Vec::new());
                    last_block = e.block;
                }
                let list = br.entries.last_mut().unwrap();
                list.push((e.row, e.col, e.value));
                if e.row != e.col {
                    list.push((e.col, e.row, e.value));
                }
            }
        }

        let mut parent: Vec<usize> = (0..m).collect();
        fn find(parent: &mut [usize], mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        for br in &block_rows {
            if let Some((&first, rest)) = br.rows.split_first() {
                for &r in rest {
                    let (a, b) = (find(&mut parent, first), find(&mut parent, r));
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                    }
                }
            }
        }
        let mut comp_of_root = vec![usize::MAX; m];
        let mut components: Vec<Component> = Vec::new();
        let mut local = vec![0; m];
        for i in 0..m {
            let root = find(&mut parent, i);
            if comp_of_root[root] == usize::MAX {
                comp_of_root[root] = components.len();
                components.push(Component {
                    rows: Vec::new(),
                    blocks: Vec::new(),
                });
            }
            let comp = &mut components[comp_of_root[root]];
            local[i] = comp.rows.len();
            comp.rows.push(i);
        }
        for (b, br) in block_rows.iter().enumerate() {
            if let Some(&r) = br.rows.first() {
                let root = find(&mut parent, r);
                components[comp_of_root[root]].blocks.push(b);
            }
        }
        Self {
            block_rows,
            components,
            local,
        }
    }
}

/// Factorized Newton system `[[M, F], [Fᵀ, 0]]`.
struct Kkt<'a> {
    layout: &'a Layout,
    chol: Vec<Cholesky<f64, Dyn>>,
    f: &'a DMatrix<f64>,
    minv_f: DMatrix<f64>,
    schur_f: Option<Cholesky<f64, Dyn>>,
}

fn regularized_cholesky(mut m: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>, SdpError> {
    let n = m.nrows();
    let scale = 1.0 + (0..n).map(|i| m[(i, i)].abs()).fold(0.0, f64::max);
    let mut reg = 0.0;
    for _ in 0..8 {
        if let Some(c) = blocked_cholesky(m.clone()) {
            return Ok(c);
        }
        let next = if reg == 0.0 { 1e-14 * scale } else { reg * 100.0 };
        for i in 0..n {
            m[(i, i)] += next - reg;
        }
        reg = next;
    }
    Err(SdpError::Numerical(
        "Schur complement is not positive definite".into(),
    ))
}

impl<'a> Kkt<'a> {
    fn new(
        layout: &'a Layout,
        x: &[DMatrix<f64>],
        z: &[DMatrix<f64>],
        f: &'a DMatrix<f64>,
    ) -> Result<Self, SdpError> {
        let chol = layout
            .components
            .iter()
            .map(|comp| regularized_cholesky(schur_block(layout, comp, x, z)))
            .collect::<Result<Vec<_>, _>>()?;
        let mut kkt = Kkt {
            layout,
            chol,
            f,
            minv_f: DMatrix::zeros(f.nrows(), f.ncols()),
            schur_f: None,
        };
        if f.ncols() > 0 {
            let mut minv_f = DMatrix::zeros(f.nrows(), f.ncols());
            for (comp, chol) in layout.components.iter().zip(&kkt.chol) {
                let mut sub = DMatrix::zeros(comp.rows.len(), f.ncols());
                for (k, &r) in comp.rows.iter().enumerate() {
                    sub.row_mut(k).copy_from(&f.row(r));
                }
                chol.solve_mut(&mut sub);
                for (k, &r) in comp.rows.iter().enumerate() {
                    minv_f.row_mut(r).copy_from(&sub.row(k));
                }
            }
            let sf = f.transpose() * &minv_f;
            kkt.schur_f = Some(regularized_cholesky(symmetrized(&sf))?);
            kkt.minv_f = minv_f;
        }
        Ok(kkt)
    }

    fn apply_minv(&self, r: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(r.len());
        for (comp, chol) in self.layout.components.iter().zip(&self.chol) {
            let mut sub = DVector::from_iterator(comp.rows.len(), comp.rows.iter().map(|&i| r[i]));
            chol.solve_mut(&mut sub);
            for (k, &i) in comp.rows.iter().enumerate() {
                out[i] = sub[k];
            }
        }
        out
    }

    /// Solves `M a + F c = r1`, `Fᵀ a = r2`.
    fn solve(&self, r1: &DVector<f64>, r2: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let a0 = self.apply_minv(r1);
        match &self.schur_f {
            None => (a0, DVector::zeros(0)),
            Some(sf) => {
                let rhs = self.f.transpose() * &a0 - r2;
                let c = sf.solve(&rhs);
                let a = a0 - &self.minv_f * &c;
                (a, c)
            }
        }
    }
}

/// Dense Schur matrix `M_ij = tr(A_i X A_j Z)` restricted to one component.
fn schur_block(
    layout: &Layout,
    comp: &Component,
    x: &[DMatrix<f64>],
    z: &[DMatrix<f64>],
) -> DMatrix<f64> {
    let k = comp.rows.len();
    let mut m = DMatrix::zeros(k, k);
    for &b in &comp.blocks {
        let br = &layout.block_rows[b];
        let (xb, zb) = (&x[b], &z[b]);
        let n = xb.nrows();
        let rows: Vec<Vec<f64>> = br
            .entries
            .par_iter()
            .map(|ai| {
                // W = Z A_i X, column p gets a X[p, l] Z[:, k].
                let mut w = DMatrix::<f64>::zeros(n, n);
                for &(kk, l, a) in ai {
                    let zc = zb.column(kk);
                    for p in 0..n {
                        let coef = a * xb[(p, l)];
                        if coef != 0.0 {
                            w.column_mut(p).axpy(coef, &zc, 1.0);
                        }
                    }
                }
                br.entries
                    .iter()
                    .map(|aj| aj.iter().map(|&(p, q, a)| a * w[(q, p)]).sum())
                    .collect()
            })
            .collect();
        for (ii, row) in rows.iter().enumerate() {
            let gi = layout.local[br.rows[ii]];
            for (jj, v) in row.iter().enumerate() {
                m[(gi, layout.local[br.rows[jj]])] += v;
            }
        }
    }
    symmetrized(&m)
}

fn inner(a: &[DMatrix<f64>], b: &[DMatrix<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

struct Direction {
    dx: Vec<DMatrix<f64>>,
    ds: Vec<DMatrix<f64>>,
    dy: DVector<f64>,
    dw: DVector<f64>,
    dtau: f64,
    dkappa: f64,
}

struct Iterate {
    x: Vec<DMatrix<f64>>,
    s: Vec<DMatrix<f64>>,
    y: DVector<f64>,
    w: DVector<f64>,
    tau: f64,
    kappa: f64,
}

struct Residuals {
    primal: DVector<f64>,
    dual: Vec<DMatrix<f64>>,
    free: DVector<f64>,
    gap: f64,
}

fn residuals(p: &SdpProblem, b: &DVector<f64>, it: &Iterate) -> Residuals {
    let ax = DVector::from_vec(p.apply(&it.x, it.w.as_slice()));
    let primal = b * it.tau - ax;
    let aty = p.adjoint(it.y.as_slice());
    let dual = aty
        .iter()
        .zip(&it.s)
        .map(|(a, s)| -(a + s))
        .collect();
    let free = -DVector::from_vec(p.free_adjoint(it.y.as_slice()));
    let gap = it.kappa - b.dot(&it.y);
    Residuals {
        primal,
        dual,
        free,
        gap,
    }
}

/// Searches for `X_b ⪰ 0`, `w` with `𝒜(X) + Fw = b`.
pub fn solve_feasibility(
    problem: &SdpProblem,
    config: &SolverConfig,
) -> Result<SdpSolution, SdpError> {
    problem.check()?;
    let total = problem.total_psd_dim();
    if total > config.max_block_rows {
        return Err(SdpError::TooLarge {
            total,
            budget: config.max_block_rows,
        });
    }
    let b_scale = 1.0 + inf_norm(&problem.rhs());

    // Rows with no coefficients either hold trivially or prove infeasibility.
    let mut reduced = SdpProblem::new(problem.block_dims.clone(), problem.num_free);
    let mut kept = Vec::new();
    for (i, c) in problem.constraints.iter().enumerate() {
        if c.psd.is_empty() && c.free.is_empty() {
            if c.rhs.abs() > config.tolerance * b_scale {
                let mut ray = vec![0.0; problem.num_rows()];
                ray[i] = 1.0 / c.rhs;
                return Ok(finish_infeasible(problem, ray, 0));
            }
        } else {
            kept.push(i);
            reduced.constraints.push(c.clone());
        }
    }

    let (scaled, factors) = reduced.row_scaled();
    let m = scaled.num_rows();
    let nf = scaled.num_free;
    let b = DVector::from_vec(scaled.rhs());
    let mut f = DMatrix::zeros(m, nf);
    for (i, c) in scaled.constraints.iter().enumerate() {
        for &(j, v) in &c.free {
            f[(i, j)] += v;
        }
    }
    let layout = Layout::new(&scaled);
    let dims = &scaled.block_dims;
    let cone_dim = dims.iter().sum::<usize>() as f64 + 1.0;

    let mut it = Iterate {
        x: dims.iter().map(|&n| DMatrix::identity(n, n)).collect(),
        s: dims.iter().map(|&n| DMatrix::identity(n, n)).collect(),
        y: DVector::zeros(m),
        w: DVector::zeros(nf),
        tau: 1.0,
        kappa: 1.0,
    };

    let expand_ray = |y: &DVector<f64>| -> Vec<f64> {
        let mut full = vec![0.0; problem.num_rows()];
        for (k, &i) in kept.iter().enumerate() {
            full[i] = y[k] * factors[k];
        }
        full
    };

    let mut iterations = 0;
    while iterations < config.max_iterations {
        let r = residuals(&scaled, &b, &it);
        let mu = (inner(&it.x, &it.s) + it.tau * it.kappa) / cone_dim;

        let pres = r.primal.amax() / it.tau / b_scale;
        if config.verbose {
            eprintln!(
                "iter {iterations:3} mu {mu:.3e} tau {:.3e} kappa {:.3e} pres {pres:.3e}",
                it.tau, it.kappa
            );
        }
        if pres <= config.tolerance {
            let sol = finish_feasible(problem, &it, iterations);
            if sol.primal_residual <= config.tolerance {
                return Ok(sol);
            }
        }
        let by = b.dot(&it.y);
        if by > 0.0 {
            let dres: f64 = r.dual.iter().map(|d| d.norm_squared()).sum::<f64>().sqrt();
            // The free part of the ray drifts once tau collapses; the
            // verifier projects it out, so only the cone part gates the try.
            if dres / by <= config.infeasibility_tolerance {
                let ray = expand_ray(&it.y);
                if let Some(sol) = verify_ray(problem, ray, iterations, config) {
                    return Ok(sol);
                }
            }
        }

        // A lost factorization ends the run as inconclusive.
        let Ok(chol_x) = it.x.iter().map(cholesky).collect::<Result<Vec<_>, _>>() else {
            break;
        };
        let Ok(chol_s) = it.s.iter().map(cholesky).collect::<Result<Vec<_>, _>>() else {
            break;
        };
        let z: Vec<DMatrix<f64>> = chol_s.iter().map(|c| symmetrized(&c.inverse())).collect();
        let kkt = match Kkt::new(&layout, &it.x, &z, &f) {
            Ok(k) => k,
            Err(_) => break,
        };

        let solve_dir = |eta: f64, rc: Vec<DMatrix<f64>>, rtk: f64| -> Direction {
            let g: Vec<DMatrix<f64>> = it
                .x
                .iter()
                .zip(&r.dual)
                .zip(&z)
                .map(|((x, rd), zz)| symmetrized(&(x * rd * zz)) * eta)
                .collect();
            let diff: Vec<DMatrix<f64>> = rc.iter().zip(&g).map(|(a, b)| a - b).collect();
            let h = &r.primal * eta - DVector::from_vec(scaled.apply(&diff, &vec![0.0; nf]));
            let h4 = eta * r.gap + rtk / it.tau;
            let (dy1, dw1) = kkt.solve(&b, &DVector::zeros(nf));
            let (dy2, dw2) = kkt.solve(&h, &(&r.free * eta));
            let dtau = (h4 - b.dot(&dy2)) / (b.dot(&dy1) + it.kappa / it.tau);
            let dy = dy2 + &dy1 * dtau;
            let dw = dw2 + &dw1 * dtau;
            let aty = scaled.adjoint(dy.as_slice());
            let ds: Vec<DMatrix<f64>> = r
                .dual
                .iter()
                .zip(&aty)
                .map(|(rd, a)| rd * eta - a)
                .collect();
            let dx: Vec<DMatrix<f64>> = diff
                .iter()
                .zip(&aty)
                .zip(it.x.iter().zip(&z))
                .map(|((d, a), (x, zz))| d + symmetrized(&(x * a * zz)))
                .collect();
            let dkappa = (rtk - it.kappa * dtau) / it.tau;
            Direction {
                dx,
                ds,
                dy,
                dw,
                dtau,
                dkappa,
            }
        };

        let step_len = |d: &Direction| -> f64 {
            let mut a = f64::INFINITY;
            for (c, dx) in chol_x.iter().zip(&d.dx) {
                a = a.min(max_step(c, dx));
            }
            for (c, ds) in chol_s.iter().zip(&d.ds) {
                a = a.min(max_step(c, ds));
            }
            if d.dtau < 0.0 {
                a = a.min(-it.tau / d.dtau);
            }
            if d.dkappa < 0.0 {
                a = a.min(-it.kappa / d.dkappa);
            }
            a
        };

        // Predictor.
        let rc_aff: Vec<DMatrix<f64>> = it.x.iter().map(|x| -x).collect();
        let aff = solve_dir(1.0, rc_aff, -it.tau * it.kappa);
        let a_aff = step_len(&aff).min(1.0);
        let mut gap_aff = (it.tau + a_aff * aff.dtau) * (it.kappa + a_aff * aff.dkappa);
        for i in 0..dims.len() {
            let xa = &it.x[i] + &aff.dx[i] * a_aff;
            let sa = &it.s[i] + &aff.ds[i] * a_aff;
            gap_aff += xa.dot(&sa);
        }
        let mu_aff = gap_aff / cone_dim;
        let sigma = (mu_aff / mu).clamp(0.0, 1.0).powi(3);

        // Corrector.
        let target = sigma * mu;
        let rc: Vec<DMatrix<f64>> = (0..dims.len())
            .map(|i| {
                let second = symmetrized(&(&aff.dx[i] * &aff.ds[i] * &z[i]));
                &z[i] * target - &it.x[i] - second
            })
            .collect();
        let rtk = target - it.tau * it.kappa - aff.dtau * aff.dkappa;
        let dir = solve_dir(1.0 - sigma, rc, rtk);
        let alpha = (config.step_fraction * step_len(&dir)).min(1.0);
        if !alpha.is_finite() || alpha < 1e-12 {
            break;
        }

        for i in 0..dims.len() {
            it.x[i] = symmetrized(&(&it.x[i] + &dir.dx[i] * alpha));
            it.s[i] = symmetrized(&(&it.s[i] + &dir.ds[i] * alpha));
        }
        it.y += &dir.dy * alpha;
        it.w += &dir.dw * alpha;
        it.tau += alpha * dir.dtau;
        it.kappa += alpha * dir.dkappa;
        iterations += 1;

        // Renormalize the homogeneous iterate to keep magnitudes moderate.
        let scale = it.tau + it.kappa;
        if !(1e-8..=1e8).contains(&scale) {
            for i in 0..dims.len() {
                it.x[i] /= scale;
                it.s[i] /= scale;
            }
            it.y /= scale;
            it.w /= scale;
            it.tau /= scale;
            it.kappa /= scale;
        }
    }

    let mut sol = finish_feasible(problem, &it, iterations);
    sol.status = SolveStatus::Unknown;
    Ok(sol)
}

fn finish_feasible(problem: &SdpProblem, it: &Iterate, iterations: usize) -> SdpSolution {
    let blocks: Vec<DMatrix<f64>> = it.x.iter().map(|x| symmetrized(x) / it.tau).collect();
    let free: Vec<f64> = it.w.iter().map(|w| w / it.tau).collect();
    let ax = problem.apply(&blocks, &free);
    let rhs = problem.rhs();
    let res = ax
        .iter()
        .zip(&rhs)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let min_eig = blocks
        .iter()
        .map(min_eigenvalue)
        .fold(f64::INFINITY, f64::min);
    SdpSolution {
        status: SolveStatus::Feasible,
        blocks,
        free,
        dual_ray: None,
        primal_residual: res / (1.0 + inf_norm(&rhs)),
        min_eigenvalue: min_eig,
        iterations,
    }
}

/// Checks a candidate Farkas ray on the original data.
fn verify_ray(
    problem: &SdpProblem,
    ray: Vec<f64>,
    iterations: usize,
    config: &SolverConfig,
) -> Option<SdpSolution> {
    let ray = project_out_free(problem, ray);
    let by: f64 = problem.rhs().iter().zip(&ray).map(|(b, y)| b * y).sum();
    if by <= 0.0 {
        return None;
    }
    let y: Vec<f64> = ray.iter().map(|v| v / by).collect();
    let fty = inf_norm(&problem.free_adjoint(&y));
    let slack = problem.adjoint(&y);
    let worst = slack
        .iter()
        .map(|s| min_eigenvalue(&(-s)))
        .fold(f64::INFINITY, f64::min);
    // Negativity is judged against the size of the normalized ray.
    let size: f64 = slack.iter().map(|m| m.norm_squared()).sum::<f64>().sqrt();
    let floor = config.infeasibility_tolerance * size.max(1.0);
    if fty <= config.infeasibility_tolerance && worst >= -floor {
        Some(finish_infeasible(problem, y, iterations))
    } else {
        None
    }
}

/// Removes the component of `ray` that the free columns see, so that
/// `Fᵀy = 0` up to rounding.
fn project_out_free(problem: &SdpProblem, mut ray: Vec<f64>) -> Vec<f64> {
    let nf = problem.num_free;
    if nf == 0 {
        return ray;
    }
    let mut f = DMatrix::<f64>::zeros(problem.num_rows(), nf);
    for (i, c) in problem.constraints.iter().enumerate() {
        for &(j, v) in &c.free {
            f[(i, j)] += v;
        }
    }
    let y = DVector::from_column_slice(&ray);
    for _ in 0..2 {
        let g = f.transpose() * DVector::from_column_slice(&ray);
        let Ok(c) = (f.transpose() * &f).svd(true, true).solve(&g, 1e-12) else {
            return y.as_slice().to_vec();
        };
        let fix = &f * c;
        for (r, d) in ray.iter_mut().zip(fix.iter()) {
            *r -= d;
        }
    }
    ray
}

fn finish_infeasible(problem: &SdpProblem, ray: Vec<f64>, iterations: usize) -> SdpSolution {
    SdpSolution {
        status: SolveStatus::Infeasible,
        blocks: problem
            .block_dims
            .iter()
            .map(|&n| DMatrix::zeros(n, n))
            .collect(),
        free: vec![0.0; problem.num_free],
        dual_ray: Some(ray),
        primal_residual: f64::INFINITY,
        min_eigenvalue: f64::NAN,
        iterations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Constraint;

    #[test]
    fn identity_trace_feasible() {
        let mut p = SdpProblem::new(vec![3], 0);
        let mut c = Constraint::new(3.0);
        for i in 0..3 {
            c.push_psd(0, i, i, 1.0);
        }
        p.push(c);
        let sol = solve_feasibility(&p, &SolverConfig::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Feasible);
        assert!(sol.min_eigenvalue > 0.0);
    }

    #[test]
    fn empty_row_with_nonzero_rhs_is_infeasible() {
        let mut p = SdpProblem::new(vec![1], 0);
        p.push(Constraint::new(2.0));
        let sol = solve_feasibility(&p, &SolverConfig::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Infeasible);
    }

    #[test]
    fn budget_is_enforced() {
        let p = SdpProblem::new(vec![700, 600], 0);
        assert!(matches!(
            solve_feasibility(&p, &SolverConfig::default()),
            Err(SdpError::TooLarge { total: 1300, .. })
        ));
    }

    #[test]
    fn free_variable_only() {
        let mut p = SdpProblem::new(vec![], 2);
        let mut c = Constraint::new(1.0);
        c.push_free(0, 1.0);
        c.push_free(1, 1.0);
        p.push(c);
        let sol = solve_feasibility(&p, &SolverConfig::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Feasible);
        assert!((sol.free[0] + sol.free[1] - 1.0).abs() <= 2e-7);
    }
}
