//! Build a lattice jump kernel with a prescribed covariance matrix.
//!
//! M = Id + M̃, M̃ = Σ λ_k p_k p_kᵀ. The eigenvectors are rounded onto the grid
//! (1/N)ℤ^d, the rounding remainder is written as a nonnegative combination of
//! (e_i ± e_j)(e_i ± e_j)ᵀ and e_i e_iᵀ, and the result is symmetrized.

use alloc::vec::Vec;

use nalgebra::DMatrix;

use crate::error::{bail, Error, Result};
use crate::heatkernel::JumpKernel;
use crate::lattice::{Point, MAX_DIM};

const SYMMETRY_TOL: f64 = 1e-12;
const ELLIPTICITY_TOL: f64 = 1e-9;

/// A symmetric target with Id ≤ M ≤ C·Id.
#[derive(Clone, Debug, PartialEq)]
pub struct DesignInput {
    matrix: DMatrix<f64>,
    bound: f64,
}

impl DesignInput {
    /// With `bound = None`, C = max(λ_max, 1) rounded up to three decimals.
    pub fn new(matrix: DMatrix<f64>, bound: Option<f64>) -> Result<DesignInput> {
        let d = matrix.nrows();
        if d == 0 || d > MAX_DIM || matrix.ncols() != d {
            bail!(Config, "target must be a square matrix of size 1..={MAX_DIM}");
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            bail!(Domain, "target has non-finite entries");
        }
        for i in 0..d {
            for j in 0..i {
                if (matrix[(i, j)] - matrix[(j, i)]).abs() > SYMMETRY_TOL {
                    bail!(Domain, "target is not symmetric at ({i}, {j})");
                }
            }
        }
        let eig = matrix.clone().symmetric_eigen().eigenvalues;
        let lo = eig.min();
        let hi = eig.max();
        if lo < 1.0 - ELLIPTICITY_TOL {
            bail!(Domain, "smallest eigenvalue {lo} is below 1; rescale the target so that Id ≤ M");
        }
        let bound = match bound {
            Some(c) if !(c >= hi - ELLIPTICITY_TOL) => {
                bail!(Domain, "bound C = {c} is below the largest eigenvalue {hi}")
            }
            Some(c) => c,
            None => libm::ceil(1000.0 * hi.max(1.0)) / 1000.0,
        };
        Ok(DesignInput { matrix, bound })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    /// 4Cd², the radius of the guaranteed support box.
    pub fn support_bound(&self) -> f64 {
        let d = self.dim() as f64;
        4.0 * self.bound * d * d
    }
}

/// Choice of rounding grid N.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GridRule {
    /// N = ⌊4Cd²⌋: support stays inside the box of radius 4Cd².
    #[default]
    Tight,
    /// N = ⌊4Cd²⌋ + 1.
    PlusOne,
}

impl GridRule {
    pub fn grid(self, input: &DesignInput) -> i64 {
        let base = libm::floor(input.support_bound()) as i64;
        match self {
            GridRule::Tight => base.max(1),
            GridRule::PlusOne => base + 1,
        }
    }
}

/// Kernel together with the intermediate quantities of the construction.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelDesign {
    pub kernel: JumpKernel,
    pub grid: i64,
    pub bound: f64,
    /// Diagonal residue R̃_ii after removing the off-diagonal directions.
    pub residue: Vec<f64>,
    /// Eigenvalues of M − Id clamped at 0.
    pub eigenvalues: Vec<f64>,
}

impl KernelDesign {
    pub fn total_rate(&self) -> f64 {
        self.kernel.total_rate()
    }
}

pub fn kernel_from_covariance(input: &DesignInput) -> Result<JumpKernel> {
    design(input, GridRule::default()).map(|k| k.kernel)
}

pub fn design(input: &DesignInput, rule: GridRule) -> Result<KernelDesign> {
    let d = input.dim();
    let n = rule.grid(input);
    let nf = n as f64;
    let mut shifted = input.matrix.clone();
    for i in 0..d {
        shifted[(i, i)] -= 1.0;
    }
    // symmetrize exactly before the eigensolver
    let shifted = (&shifted + shifted.transpose()) * 0.5;
    let eig = shifted.symmetric_eigen();

    let mut entries: Vec<(Point, f64)> = Vec::new();
    let mut approx = DMatrix::<f64>::zeros(d, d);
    let mut eigenvalues = Vec::with_capacity(d);
    for k in 0..d {
        let lambda = eig.eigenvalues[k].max(0.0);
        eigenvalues.push(lambda);
        if lambda == 0.0 {
            continue;
        }
        let mut coords = [0i64; MAX_DIM];
        for i in 0..d {
            coords[i] = libm::floor(nf * eig.eigenvectors[(i, k)]) as i64;
        }
        let p = Point(coords);
        if p == Point::ORIGIN {
            continue;
        }
        let weight = lambda / (nf * nf);
        for i in 0..d {
            for j in 0..d {
                approx[(i, j)] += weight * (coords[i] * coords[j]) as f64;
            }
        }
        entries.push((p, weight));
    }

    let rem = &input.matrix - &approx;
    let mut residue = Vec::with_capacity(d);
    for i in 0..d {
        let off: f64 = (0..d).filter(|&j| j != i).map(|j| rem[(i, j)].abs()).sum();
        let r = rem[(i, i)] - off;
        if !(r >= 0.5) {
            return Err(Error::RemainderPositivity { index: i, value: r });
        }
        residue.push(r);
        entries.push((Point::unit(i), r));
        for j in i + 1..d {
            let w = rem[(i, j)].abs();
            if w > 0.0 {
                let dir =
                    if rem[(i, j)] >= 0.0 { Point::unit(i) + Point::unit(j) } else { Point::unit(i) - Point::unit(j) };
                entries.push((dir, w));
            }
        }
    }

    let symmetric = entries.into_iter().flat_map(|(x, q)| [(x, 0.5 * q), (-x, 0.5 * q)]);
    let kernel = JumpKernel::new(d, symmetric)?;
    Ok(KernelDesign { kernel, grid: n, bound: input.bound, residue, eigenvalues })
}

/// Kernel whose exclusion process has diffusion matrix D (covariance 2D).
pub fn sep_for_diffusion(diffusion: &DMatrix<f64>) -> Result<JumpKernel> {
    if diffusion.nrows() == 0 || diffusion.nrows() != diffusion.ncols() {
        bail!(Config, "diffusion matrix must be square and nonempty");
    }
    let d_min = diffusion.clone().symmetric_eigen().eigenvalues.min();
    if !(d_min >= 1.0 - ELLIPTICITY_TOL) {
        bail!(Domain, "smallest eigenvalue {d_min} of D is below 1; rescale time so that Id ≤ D");
    }
    kernel_from_covariance(&DesignInput::new(diffusion * 2.0, None)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heatkernel::heat_evolve;
    use crate::lattice::Torus;
    use proptest::prelude::*;

    fn oracle_cov(q: &JumpKernel, d: usize) -> DMatrix<f64> {
        DMatrix::from_fn(d, d, |i, j| q.rates().map(|(x, r)| r * x.coord(i) as f64 * x.coord(j) as f64).sum())
    }

    fn check(q: &JumpKernel, m: &DMatrix<f64>, radius: f64) {
        let d = m.nrows();
        let cov = oracle_cov(q, d);
        for (a, b) in cov.iter().zip(m.iter()) {
            assert!((a - b).abs() <= 1e-10, "{cov} vs {m}");
        }
        for i in 0..d {
            assert!(q.get(&Point::unit(i)) >= 0.25);
        }
        for (x, _) in q.rates() {
            assert!(x.sup_norm() as f64 <= radius);
        }
    }

    #[test]
    fn identity_gives_nearest_neighbour() {
        for d in 1..=3 {
            let q = kernel_from_covariance(&DesignInput::new(DMatrix::identity(d, d), None).unwrap()).unwrap();
            assert_eq!(q, JumpKernel::nearest_neighbor(d, 0.5));
        }
    }

    #[test]
    fn scalar_two() {
        let input = DesignInput::new(DMatrix::from_element(1, 1, 2.0), None).unwrap();
        assert_eq!(input.bound(), 2.0);
        let wide = design(&input, GridRule::PlusOne).unwrap();
        assert_eq!(wide.grid, 9);
        let q = &wide.kernel;
        assert_eq!(q.len(), 4);
        assert!((q.get(&Point::new(&[1])) - 0.5).abs() < 1e-15);
        assert!((q.get(&Point::new(&[-9])) - 1.0 / 162.0).abs() < 1e-15);
        let tight = design(&input, GridRule::Tight).unwrap();
        assert_eq!(tight.grid, 8);
        check(&tight.kernel, input.matrix(), 8.0);
        assert!((tight.kernel.get(&Point::new(&[8])) - 1.0 / 128.0).abs() < 1e-15);
    }

    #[test]
    fn two_dimensional_example() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 2.0]);
        let input = DesignInput::new(m.clone(), None).unwrap();
        let q = kernel_from_covariance(&input).unwrap();
        check(&q, &m, input.support_bound());
    }

    #[test]
    fn rejects_bad_targets() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.2, 2.0]);
        assert!(matches!(DesignInput::new(m, None), Err(Error::Domain(_))));
        let m = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 2.0]);
        assert!(matches!(DesignInput::new(m, None), Err(Error::Domain(_))));
        let m = DMatrix::from_element(1, 1, 3.0);
        assert!(DesignInput::new(m, Some(2.0)).is_err());
        assert!(sep_for_diffusion(&DMatrix::from_element(1, 1, 0.4)).is_err());
    }

    #[test]
    fn diffusion_identity() {
        let q = sep_for_diffusion(&DMatrix::identity(2, 2)).unwrap();
        let cov = oracle_cov(&q, 2);
        assert!((cov - DMatrix::identity(2, 2) * 2.0).abs().max() < 1e-10);
    }

    #[test]
    fn mean_square_displacement_slope() {
        let q = sep_for_diffusion(&DMatrix::identity(1, 1)).unwrap();
        let torus = Torus::new(1, 400).unwrap();
        let mut f = alloc::vec![0.0; 400];
        f[0] = 1.0;
        let msd = |t: f64| {
            let p = heat_evolve(&q, &torus, &f, t).unwrap();
            p.iter()
                .enumerate()
                .map(|(s, v)| {
                    let x = torus.min_image(torus.coords(s)).coord(0) as f64;
                    x * x * v
                })
                .sum::<f64>()
        };
        let slope = (msd(20.0) - msd(10.0)) / 10.0;
        assert!((slope - 2.0).abs() < 1e-8, "{slope}");
    }

    fn spd(d: usize, eig: &[f64], angles: &[f64]) -> DMatrix<f64> {
        // random rotation from Givens products
        let mut r = DMatrix::<f64>::identity(d, d);
        let mut k = 0;
        for i in 0..d {
            for j in i + 1..d {
                let (s, c) = (libm::sin(angles[k]), libm::cos(angles[k]));
                let mut g = DMatrix::<f64>::identity(d, d);
                g[(i, i)] = c;
                g[(j, j)] = c;
                g[(i, j)] = -s;
                g[(j, i)] = s;
                r = g * r;
                k += 1;
            }
        }
        let m = &r * DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&eig[..d])) * r.transpose();
        (&m + m.transpose()) * 0.5
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn postconditions_hold(
            d in 1usize..=3,
            eig in proptest::collection::vec(1.0f64..5.0, 3),
            angles in proptest::collection::vec(0.0f64..6.3, 3),
        ) {
            let m = spd(d, &eig, &angles);
            let input = DesignInput::new(m.clone(), None).unwrap();
            let q = kernel_from_covariance(&input).unwrap();
            check(&q, &m, input.support_bound());
            prop_assert!(q.total_rate().is_finite());
        }
    }
}
