//! Sparse Markov generators, their semigroup action by uniformization, and a
//! weighted conjugate-gradient solver.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// A linear operator with Markov-generator structure (nonnegative off-diagonal
/// entries, rows summing to zero).
pub trait LinearGenerator {
    fn dim(&self) -> usize;
    /// out = L x.
    fn apply(&self, x: &[f64], out: &mut [f64]);
    /// An upper bound on max_i |L_ii|.
    fn exit_rate_bound(&self) -> f64;
}

/// Row-compressed operator with a separate diagonal.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Csr {
    pub row_ptr: Vec<usize>,
    pub cols: Vec<u32>,
    pub vals: Vec<f64>,
    pub diag: Vec<f64>,
}

impl Csr {
    /// Assemble from per-row off-diagonal entries; duplicate columns are merged
    /// and the diagonal is set so that rows sum to zero.
    pub fn from_rows(n: usize, mut row: impl FnMut(usize, &mut Vec<(u32, f64)>)) -> Csr {
        let mut out =
            Csr { row_ptr: Vec::with_capacity(n + 1), cols: Vec::new(), vals: Vec::new(), diag: vec![0.0; n] };
        out.row_ptr.push(0);
        let mut buf = Vec::new();
        for i in 0..n {
            buf.clear();
            row(i, &mut buf);
            buf.sort_unstable_by_key(|e| e.0);
            let mut exit = 0.0;
            let mut k = 0;
            while k < buf.len() {
                let (c, mut v) = buf[k];
                k += 1;
                while k < buf.len() && buf[k].0 == c {
                    v += buf[k].1;
                    k += 1;
                }
                if c as usize == i || v == 0.0 {
                    continue;
                }
                exit += v;
                out.cols.push(c);
                out.vals.push(v);
            }
            out.diag[i] = -exit;
            out.row_ptr.push(out.cols.len());
        }
        out
    }

    pub fn nnz(&self) -> usize {
        self.cols.len() + self.diag.len()
    }

    /// Nonzero entries as (row, col, value), diagonal included, row-major.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.diag.len()).flat_map(move |i| {
            let range = self.row_ptr[i]..self.row_ptr[i + 1];
            let mut row: Vec<(usize, usize, f64)> = range.map(|k| (i, self.cols[k] as usize, self.vals[k])).collect();
            row.push((i, i, self.diag[i]));
            row.sort_unstable_by_key(|e| e.1);
            row.into_iter()
        })
    }
}

impl LinearGenerator for Csr {
    fn dim(&self) -> usize {
        self.diag.len()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..self.diag.len() {
            let mut s = self.diag[i] * x[i];
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.vals[k] * x[self.cols[k] as usize];
            }
            out[i] = s;
        }
    }

    fn exit_rate_bound(&self) -> f64 {
        self.diag.iter().fold(0.0, |m, d| m.max(-d))
    }
}

/// Bookkeeping of a semigroup evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActionStats {
    pub substeps: usize,
    pub products: usize,
    /// Certified max-norm truncation bound.
    pub error_bound: f64,
}

/// Largest Poisson mean per substep.
const SUBSTEP_MEAN: f64 = 30.0;
const MAX_TERMS: usize = 10_000;

/// e^{tL} f by uniformization: on each substep of length h,
/// e^{hL} = Σ_k Pois(k; Λh) P^k with P = I + L/Λ stochastic, truncated once the
/// Poisson tail bound (times ‖f‖_∞) is below the substep share of `tol`.
pub fn semigroup_action<G: LinearGenerator + ?Sized>(
    op: &G,
    t: f64,
    f: &[f64],
    tol: f64,
) -> Result<(Vec<f64>, ActionStats)> {
    assert_eq!(f.len(), op.dim(), "dimension mismatch");
    let mut stats = ActionStats { substeps: 0, products: 0, error_bound: 0.0 };
    let lambda = op.exit_rate_bound();
    let fmax = f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if t == 0.0 || lambda == 0.0 || fmax == 0.0 {
        return Ok((f.to_vec(), stats));
    }
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::Domain(alloc::format!("semigroup time {t} must be finite and ≥ 0")));
    }
    if !(tol > 0.0) {
        return Err(Error::Domain(alloc::format!("tolerance {tol} must be positive")));
    }
    let steps = libm::ceil(lambda * t / SUBSTEP_MEAN).max(1.0) as usize;
    let mu = lambda * t / steps as f64;
    let step_tol = tol / (steps as f64 * fmax);
    let n = f.len();
    let mut cur = f.to_vec();
    let mut pk = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    let mut acc = vec![0.0; n];
    for _ in 0..steps {
        pk.copy_from_slice(&cur);
        let mut w = libm::exp(-mu);
        for (a, p) in acc.iter_mut().zip(&pk) {
            *a = w * p;
        }
        let mut k = 0usize;
        loop {
            let next = w * mu / (k + 1) as f64;
            let tail = if (k + 2) as f64 > mu { next / (1.0 - mu / (k + 2) as f64) } else { f64::INFINITY };
            if tail <= step_tol {
                stats.error_bound += tail * fmax;
                break;
            }
            if k >= MAX_TERMS {
                return Err(Error::Convergence {
                    what: "uniformized semigroup series",
                    iterations: k,
                    residual: tail * fmax,
                });
            }
            // P x = x + L x / Λ
            op.apply(&pk, &mut tmp);
            stats.products += 1;
            for (p, l) in pk.iter_mut().zip(&tmp) {
                *p += l / lambda;
            }
            k += 1;
            w = next;
            for (a, p) in acc.iter_mut().zip(&pk) {
                *a += w * p;
            }
        }
        core::mem::swap(&mut cur, &mut acc);
        stats.substeps += 1;
    }
    Ok((cur, stats))
}

/// Result of a conjugate-gradient solve.
#[derive(Clone, Debug, PartialEq)]
pub struct CgSolution {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// Final ‖b − Ax‖ / ‖b‖ in the weighted norm.
    pub relative_residual: f64,
}

/// Solve A x = b for A symmetric positive semidefinite with respect to the
/// inner product ⟨x, y⟩ = Σ w_i x_i y_i (unit weights when `weights` is None).
/// b must lie in the range of A; the iterate stays in the Krylov space of b.
pub fn conjugate_gradient(
    apply: impl Fn(&[f64], &mut [f64]),
    b: &[f64],
    weights: Option<&[f64]>,
    tol: f64,
    max_iter: usize,
) -> Result<CgSolution> {
    let n = b.len();
    let dot = |x: &[f64], y: &[f64]| -> f64 {
        match weights {
            Some(w) => x.iter().zip(y).zip(w).map(|((a, b), w)| a * b * w).sum(),
            None => x.iter().zip(y).map(|(a, b)| a * b).sum(),
        }
    };
    let bnorm = libm::sqrt(dot(b, b));
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok(CgSolution { x, iterations: 0, relative_residual: 0.0 });
    }
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let mut rr = dot(&r, &r);
    for it in 1..=max_iter {
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::Convergence {
                what: "conjugate gradient (lost positivity)",
                iterations: it,
                residual: libm::sqrt(rr) / bnorm,
            });
        }
        let alpha = rr / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = dot(&r, &r);
        if libm::sqrt(rr_new) <= tol * bnorm {
            // recompute the true residual to guard against drift
            apply(&x, &mut ap);
            let true_r: Vec<f64> = b.iter().zip(&ap).map(|(b, a)| b - a).collect();
            let rel = libm::sqrt(dot(&true_r, &true_r)) / bnorm;
            if rel <= 10.0 * tol {
                return Ok(CgSolution { x, iterations: it, relative_residual: rel });
            }
            r = true_r;
            p.copy_from_slice(&r);
            rr = dot(&r, &r);
            continue;
        }
        let beta = rr_new / rr;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_new;
    }
    Err(Error::Convergence { what: "conjugate gradient", iterations: max_iter, residual: libm::sqrt(rr) / bnorm })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn two_state(a: f64, b: f64) -> Csr {
        Csr::from_rows(2, |i, row| row.push(((1 - i) as u32, if i == 0 { a } else { b })))
    }

    #[test]
    fn two_state_closed_form() {
        let (a, b) = (0.7, 1.9);
        let op = two_state(a, b);
        for t in [0.0, 0.1, 1.0, 7.5, 40.0] {
            let (g, stats) = semigroup_action(&op, t, &[1.0, 0.0], 1e-13).unwrap();
            // P_t(0,0) = b/(a+b) + a/(a+b) e^{-(a+b)t}
            let want = b / (a + b) + a / (a + b) * libm::exp(-(a + b) * t);
            assert!((g[0] - want).abs() < 1e-12, "t={t}");
            assert!(stats.error_bound <= 1e-13);
        }
    }

    #[test]
    fn constants_are_fixed() {
        let op = Csr::from_rows(5, |i, row| {
            row.push((((i + 1) % 5) as u32, 1.3));
            row.push((((i + 4) % 5) as u32, 0.2));
        });
        let (g, _) = semigroup_action(&op, 12.0, &[2.0; 5], 1e-12).unwrap();
        assert!(g.iter().all(|v| (v - 2.0).abs() < 1e-12));
    }

    #[test]
    fn matches_dense_exponential() {
        let n = 6;
        let op = Csr::from_rows(n, |i, row| {
            for j in 0..n {
                if j != i {
                    row.push((j as u32, 0.1 + ((i * 7 + j * 3) % 5) as f64 * 0.3));
                }
            }
        });
        let mut m = DMatrix::<f64>::zeros(n, n);
        for (i, j, v) in op.triplets() {
            m[(i, j)] = v;
        }
        let t = 2.3;
        // dense reference: scaling and squaring of a Taylor series
        let k = 12;
        let a = &m * (t / 2f64.powi(k));
        let mut e = DMatrix::<f64>::identity(n, n);
        let mut term = DMatrix::<f64>::identity(n, n);
        for j in 1..30 {
            term = &term * &a / j as f64;
            e += &term;
        }
        for _ in 0..k {
            e = &e * &e;
        }
        let f: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let (g, _) = semigroup_action(&op, t, &f, 1e-13).unwrap();
        let want = e * nalgebra::DVector::from_vec(f);
        for i in 0..n {
            assert!((g[i] - want[i]).abs() < 1e-11);
        }
    }

    #[test]
    fn triplets_include_diagonal() {
        let op = two_state(1.0, 2.0);
        let t: Vec<_> = op.triplets().collect();
        assert_eq!(t, [(0, 0, -1.0), (0, 1, 1.0), (1, 0, 2.0), (1, 1, -2.0)]);
    }

    #[test]
    fn cg_solves_spd() {
        let n = 30;
        let apply = |x: &[f64], out: &mut [f64]| {
            for i in 0..n {
                let l = if i > 0 { x[i - 1] } else { 0.0 };
                let r = if i + 1 < n { x[i + 1] } else { 0.0 };
                out[i] = 2.5 * x[i] - l - r;
            }
        };
        let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.3).cos()).collect();
        let sol = conjugate_gradient(apply, &b, None, 1e-13, 500).unwrap();
        let mut ax = vec![0.0; n];
        apply(&sol.x, &mut ax);
        for i in 0..n {
            assert!((ax[i] - b[i]).abs() < 1e-11);
        }
    }

    #[test]
    fn cg_semidefinite_range() {
        // path-graph Laplacian with zero-mean right-hand side
        let n = 8;
        let apply = |x: &[f64], out: &mut [f64]| {
            for i in 0..n {
                let mut s = 0.0;
                if i > 0 {
                    s += x[i] - x[i - 1];
                }
                if i + 1 < n {
                    s += x[i] - x[i + 1];
                }
                out[i] = s;
            }
        };
        let b: Vec<f64> = (0..n).map(|i| i as f64 - 3.5).collect();
        let sol = conjugate_gradient(apply, &b, None, 1e-13, 100).unwrap();
        assert!(sol.relative_residual < 1e-12);
        assert!(sol.x.iter().sum::<f64>().abs() < 1e-10);
    }
}
