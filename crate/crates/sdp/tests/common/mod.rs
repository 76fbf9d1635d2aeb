//! Gram programs and random instances with a known verdict.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use opacert_sdp::{Constraint, SdpProblem};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Exps = Vec<u32>;

pub fn basis(nvars: usize, max_deg: u32) -> Vec<Exps> {
    let mut out = vec![vec![0; nvars]];
    let mut frontier = out.clone();
    for _ in 0..max_deg {
        let mut next = Vec::new();
        for m in &frontier {
            for v in 0..nvars {
                let mut e = m.clone();
                e[v] += 1;
                if !next.contains(&e) {
                    next.push(e);
                }
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Gram program for `p = zᵀ Q z`, `Q ⪰ 0`.
pub fn gram_problem(p: &BTreeMap<Exps, f64>, nvars: usize, half_deg: u32) -> (SdpProblem, Vec<Exps>) {
    let z = basis(nvars, half_deg);
    let mut rows: BTreeMap<Exps, Vec<(usize, usize)>> = BTreeMap::new();
    for i in 0..z.len() {
        for j in i..z.len() {
            let e: Exps = z[i].iter().zip(&z[j]).map(|(a, b)| a + b).collect();
            rows.entry(e).or_default().push((i, j));
        }
    }
    for e in p.keys() {
        assert!(rows.contains_key(e), "monomial outside the Gram support");
    }
    let mut prob = SdpProblem::new(vec![z.len()], 0);
    for (e, pairs) in rows {
        let mut c = Constraint::new(*p.get(&e).unwrap_or(&0.0));
        for (i, j) in pairs {
            c.push_psd(0, i, j, 1.0);
        }
        prob.push(c);
    }
    (prob, z)
}

pub fn poly(terms: &[(&[u32], f64)]) -> BTreeMap<Exps, f64> {
    terms.iter().map(|(e, c)| (e.to_vec(), *c)).collect()
}

pub fn random_psd(rng: &mut ChaCha8Rng, n: usize, shift: f64) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &g * g.transpose() + DMatrix::identity(n, n) * shift
}

pub fn random_sym(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    (&g + g.transpose()) * 0.5
}

pub fn constraint_from(blocks: &[DMatrix<f64>], free: &[f64], rhs: f64) -> Constraint {
    let mut c = Constraint::new(rhs);
    for (b, a) in blocks.iter().enumerate() {
        for j in 0..a.ncols() {
            for i in 0..=j {
                c.push_psd(b, i, j, a[(i, j)]);
            }
        }
    }
    for (j, &v) in free.iter().enumerate() {
        c.push_free(j, v);
    }
    c
}

pub struct Shape {
    pub dims: Vec<usize>,
    pub num_free: usize,
    pub rows: usize,
}

pub fn random_shape(rng: &mut ChaCha8Rng) -> Shape {
    let nblocks = rng.random_range(1..=3);
    let dims: Vec<usize> = (0..nblocks).map(|_| rng.random_range(1..=5)).collect();
    let cap: usize = dims.iter().map(|n| n * (n + 1) / 2).sum();
    Shape {
        num_free: rng.random_range(0..=2),
        rows: rng.random_range(1..=cap.min(8)),
        dims,
    }
}

pub fn feasible_instance(rng: &mut ChaCha8Rng) -> SdpProblem {
    let sh = random_shape(rng);
    let x0: Vec<DMatrix<f64>> = sh.dims.iter().map(|&n| random_psd(rng, n, 0.1)).collect();
    let w0: Vec<f64> = (0..sh.num_free).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mut prob = SdpProblem::new(sh.dims.clone(), sh.num_free);
    for _ in 0..sh.rows {
        let a: Vec<DMatrix<f64>> = sh.dims.iter().map(|&n| random_sym(rng, n)).collect();
        let f: Vec<f64> = (0..sh.num_free).map(|_| rng.random_range(-1.0..1.0)).collect();
        let rhs = a.iter().zip(&x0).map(|(a, x)| a.dot(x)).sum::<f64>()
            + f.iter().zip(&w0).map(|(a, b)| a * b).sum::<f64>();
        prob.push(constraint_from(&a, &f, rhs));
    }
    prob
}

pub fn infeasible_instance(rng: &mut ChaCha8Rng) -> SdpProblem {
    let sh = random_shape(rng);
    let m = sh.rows.max(2);
    let y: Vec<f64> = (0..m)
        .map(|_| {
            let v: f64 = rng.random_range(0.5..1.5);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    let ynorm2: f64 = y.iter().map(|v| v * v).sum();
    let mut a: Vec<Vec<DMatrix<f64>>> = (0..m - 1)
        .map(|_| sh.dims.iter().map(|&n| random_sym(rng, n)).collect())
        .collect();
    // Choose the last row so that -Σ y_i A_i = P ≻ 0.
    let last: Vec<DMatrix<f64>> = sh
        .dims
        .iter()
        .enumerate()
        .map(|(b, &n)| {
            let p = random_psd(rng, n, 0.1);
            let mut acc = -p;
            for (i, ai) in a.iter().enumerate() {
                acc -= &ai[b] * y[i];
            }
            acc / y[m - 1]
        })
        .collect();
    a.push(last);
    let mut f: Vec<Vec<f64>> = (0..m)
        .map(|_| (0..sh.num_free).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    for j in 0..sh.num_free {
        let proj: f64 = (0..m).map(|i| f[i][j] * y[i]).sum::<f64>() / ynorm2;
        for i in 0..m {
            f[i][j] -= proj * y[i];
        }
    }
    let mut b: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
    let by: f64 = b.iter().zip(&y).map(|(p, q)| p * q).sum();
    for i in 0..m {
        b[i] += y[i] * (1.0 - by) / ynorm2;
    }
    let mut prob = SdpProblem::new(sh.dims.clone(), sh.num_free);
    for i in 0..m {
        prob.push(constraint_from(&a[i], &f[i], b[i]));
    }
    prob
}

