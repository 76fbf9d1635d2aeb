use nalgebra::{Cholesky, DMatrix, Dyn, SymmetricEigen};

use crate::SdpError;

const ASYMMETRY_LIMIT: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenCheck {
    pub pass: bool,
    pub min_eigenvalue: f64,
}

/// Dense symmetric eigen-solve; passes iff the smallest eigenvalue is at
/// least `-margin`.
///
/// Fails if any pair of mirrored entries differs by more than `1e-12`.
pub fn min_eigenvalue_check(m: &DMatrix<f64>, margin: f64) -> Result<EigenCheck, SdpError> {
    if !m.is_square() {
        return Err(SdpError::Malformed(format!(
            "expected a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let n = m.nrows();
    let mut worst = 0.0f64;
    for j in 0..n {
        for i in 0..j {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    if worst > ASYMMETRY_LIMIT {
        return Err(SdpError::NotSymmetric(worst));
    }
    let min_eigenvalue = min_eigenvalue(m);
    Ok(EigenCheck {
        pass: min_eigenvalue >= -margin,
        min_eigenvalue,
    })
}

pub(crate) fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    let s = symmetrized(m);
    SymmetricEigen::new(s)
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub(crate) fn symmetrized(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub(crate) fn cholesky(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>, SdpError> {
    Cholesky::new(symmetrized(m))
        .ok_or_else(|| SdpError::Numerical("iterate lost positive definiteness".into()))
}

/// Right-looking blocked factorization, so the bulk of the work runs as
/// matrix products. Returns `None` if `m` is not numerically positive definite.
pub(crate) fn blocked_cholesky(mut a: DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    const PANEL: usize = 96;
    let n = a.nrows();
    let mut k = 0;
    while k < n {
        let kb = PANEL.min(n - k);
        let l11 = Cholesky::new(a.view((k, k), (kb, kb)).clone_owned())?.unpack();
        a.view_mut((k, k), (kb, kb)).copy_from(&l11);
        let rest = n - k - kb;
        if rest > 0 {
            let mut panel_t = a.view((k + kb, k), (rest, kb)).transpose();
            if !l11.solve_lower_triangular_mut(&mut panel_t) {
                return None;
            }
            let panel = panel_t.transpose();
            a.view_mut((k + kb, k), (rest, kb)).copy_from(&panel);
            a.view_mut((k + kb, k + kb), (rest, rest))
                .gemm(-1.0, &panel, &panel_t, 1.0);
        }
        k += kb;
    }
    a.fill_upper_triangle(0.0, 1);
    Some(Cholesky::pack_dirty(a))
}

/// Largest `α` with `X + α dX ⪰ 0`, given the Cholesky factor of `X`.
pub(crate) fn max_step(chol: &Cholesky<f64, Dyn>, dx: &DMatrix<f64>) -> f64 {
    let l = chol.l_dirty();
    let n = dx.nrows();
    if n == 0 {
        return f64::INFINITY;
    }
    let mut t = dx.clone();
    l.solve_lower_triangular_mut(&mut t);
    let mut t = t.transpose();
    l.solve_lower_triangular_mut(&mut t);
    let lam = min_eigenvalue(&t);
    if lam >= 0.0 {
        f64::INFINITY
    } else {
        -1.0 / lam
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_passes() {
        let c = min_eigenvalue_check(&DMatrix::identity(3, 3), 1e-8).unwrap();
        assert!(c.pass);
        assert!((c.min_eigenvalue - 1.0).abs() < 1e-14);
    }

    #[test]
    fn slightly_negative_diagonal_fails() {
        let m = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, -0.1]));
        let c = min_eigenvalue_check(&m, 1e-8).unwrap();
        assert!(!c.pass);
        assert!((c.min_eigenvalue + 0.1).abs() < 1e-14);
    }

    #[test]
    fn asymmetry_is_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1e-9, 1.0]);
        assert!(matches!(
            min_eigenvalue_check(&m, 1e-8),
            Err(SdpError::NotSymmetric(_))
        ));
    }

    #[test]
    fn blocked_matches_unblocked() {
        let n = 211;
        let g = DMatrix::from_fn(n, n, |i, j| ((i * 31 + j * 17) % 23) as f64 / 23.0 - 0.5);
        let m = &g * g.transpose() + DMatrix::identity(n, n);
        let a = blocked_cholesky(m.clone()).unwrap().unpack();
        let b = Cholesky::new(m).unwrap().unpack();
        assert!((a - b).amax() < 1e-10);
    }

    #[test]
    fn step_to_boundary() {
        let x = DMatrix::<f64>::identity(2, 2);
        let dx = DMatrix::from_row_slice(2, 2, &[-2.0, 0.0, 0.0, 1.0]);
        let a = max_step(&cholesky(&x).unwrap(), &dx);
        assert!((a - 0.5).abs() < 1e-14);
    }
}
