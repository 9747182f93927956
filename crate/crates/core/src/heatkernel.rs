//! Jump kernels Q on ℤ^d, their covariance matrices, the scalar heat semigroup
//! e^{tΔ_Q/2} on a torus (exact, via the discrete Fourier basis), the Gaussian
//! comparison of the ℓ² norm, and the n-point exclusion Laplacian on K_n.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{bail, Error, Result};
use crate::exactgen::check_wrap;
use crate::fock::ChaosCoeffs;
use crate::lattice::{Point, Torus};
use crate::linalg::{semigroup_action, Csr, LinearGenerator};

/// A symmetric, finitely supported, nonnegative rate function on ℤ^d with Q_0 = 0.
/// The total mass is not normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct JumpKernel {
    dim: usize,
    rates: BTreeMap<Point, f64>,
}

impl JumpKernel {
    /// Entries with the same offset are added; zero entries are dropped.
    pub fn new(dim: usize, entries: impl IntoIterator<Item = (Point, f64)>) -> Result<JumpKernel> {
        if !(1..=crate::lattice::MAX_DIM).contains(&dim) {
            bail!(Config, "dimension {dim} out of range");
        }
        let mut rates = BTreeMap::new();
        for (y, q) in entries {
            if y.0[dim..].iter().any(|&c| c != 0) {
                bail!(Domain, "offset {y:?} has coordinates beyond dimension {dim}");
            }
            if !(q >= 0.0) || !q.is_finite() {
                bail!(Domain, "rate {q} at {y:?} is not a finite nonnegative number");
            }
            *rates.entry(y).or_insert(0.0) += q;
        }
        rates.retain(|_, q| *q != 0.0);
        if rates.contains_key(&Point::ORIGIN) {
            bail!(Domain, "kernel has a nonzero rate at offset 0");
        }
        for (y, q) in &rates {
            if rates.get(&-*y) != Some(q) {
                bail!(Domain, "kernel is not symmetric at offset {y:?}");
            }
        }
        Ok(JumpKernel { dim, rates })
    }

    /// Q_{±e_i} = rate.
    pub fn nearest_neighbor(dim: usize, rate: f64) -> JumpKernel {
        let entries = (0..dim).flat_map(|i| [(Point::unit(i), rate), (-Point::unit(i), rate)]);
        JumpKernel::new(dim, entries).expect("valid kernel")
    }

    /// Q_{±e_i} = d_i: nearest-neighbour kernel with diffusion matrix diag(d).
    pub fn diagonal(diag: &[f64]) -> Result<JumpKernel> {
        let entries = diag.iter().enumerate().flat_map(|(i, &r)| [(Point::unit(i), r), (-Point::unit(i), r)]);
        JumpKernel::new(diag.len(), entries)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rates(&self) -> impl Iterator<Item = (Point, f64)> + '_ {
        self.rates.iter().map(|(&y, &q)| (y, q))
    }

    pub fn get(&self, y: &Point) -> f64 {
        self.rates.get(y).copied().unwrap_or(0.0)
    }

    pub fn len(&self) -> usize {
        self.rates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rates.is_empty()
    }

    pub fn support_radius(&self) -> i64 {
        self.rates.keys().map(Point::sup_norm).max().unwrap_or(0)
    }

    pub fn total_rate(&self) -> f64 {
        self.rates.values().sum()
    }

    /// M_ij = Σ_y Q_y y_i y_j.
    pub fn covariance(&self) -> DMatrix<f64> {
        let d = self.dim;
        let mut m = DMatrix::zeros(d, d);
        for (y, q) in &self.rates {
            for i in 0..d {
                for j in 0..d {
                    m[(i, j)] += q * (y.0[i] * y.0[j]) as f64;
                }
            }
        }
        m
    }

    /// Fourier symbol μ(k) = Σ_y Q_y (cos(2π k·y / N) − 1) of ½Δ_Q on the torus.
    fn symbol(&self, torus: &Torus) -> Vec<f64> {
        let n = torus.side() as f64;
        (0..torus.volume())
            .map(|s| {
                let k = torus.coords(s);
                self.rates
                    .iter()
                    .map(|(y, q)| {
                        let phase: i64 = (0..self.dim).map(|i| k.0[i] * y.0[i]).sum();
                        q * (libm::cos(2.0 * PI * phase as f64 / n) - 1.0)
                    })
                    .sum()
            })
            .collect()
    }
}

/// In-place DFT along every axis of a d-dimensional torus array.
fn dft(torus: &Torus, data: &mut [Complex64], inverse: bool) {
    let n = torus.side();
    let sign = if inverse { 1.0 } else { -1.0 };
    let twiddle: Vec<Complex64> =
        (0..n).map(|k| Complex64::from_polar(1.0, sign * 2.0 * PI * k as f64 / n as f64)).collect();
    let mut line = vec![Complex64::new(0.0, 0.0); n];
    let mut out = vec![Complex64::new(0.0, 0.0); n];
    let d = torus.dim();
    for axis in 0..d {
        // sites are lexicographic with the last axis fastest
        let stride = n.pow((d - 1 - axis) as u32);
        for start in 0..data.len() {
            if (start / stride) % n != 0 {
                continue;
            }
            for (j, l) in line.iter_mut().enumerate() {
                *l = data[start + j * stride];
            }
            for (k, o) in out.iter_mut().enumerate() {
                let mut acc = Complex64::new(0.0, 0.0);
                for (j, l) in line.iter().enumerate() {
                    acc += l * twiddle[(j * k) % n];
                }
                *o = acc;
            }
            for (j, o) in out.iter().enumerate() {
                data[start + j * stride] = *o;
            }
        }
    }
    if inverse {
        let scale = 1.0 / data.len() as f64;
        for v in data.iter_mut() {
            *v *= scale;
        }
    }
}

/// f_t = e^{tΔ_Q/2} f on the torus, computed in the plane-wave basis.
pub fn heat_evolve(q: &JumpKernel, torus: &Torus, f: &[f64], t: f64) -> Result<Vec<f64>> {
    if q.dim() != torus.dim() {
        bail!(Config, "kernel dimension {} on a torus of dimension {}", q.dim(), torus.dim());
    }
    if f.len() != torus.volume() {
        bail!(Domain, "site function has {} values for {} sites", f.len(), torus.volume());
    }
    if !(t >= 0.0) {
        bail!(Domain, "time {t} must be nonnegative");
    }
    check_wrap(torus, q)?;
    if t == 0.0 {
        return Ok(f.to_vec());
    }
    let mut data: Vec<Complex64> = f.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    dft(torus, &mut data, false);
    for (v, mu) in data.iter_mut().zip(q.symbol(torus)) {
        *v *= libm::exp(t * mu);
    }
    dft(torus, &mut data, true);
    Ok(data.into_iter().map(|c| c.re).collect())
}

/// ‖e^{tΔ_Q/2}f‖ against the Gaussian prediction |m_f| / ((4πt)^d det M)^{1/4}.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NashRecord {
    pub t: f64,
    pub l2_norm: f64,
    pub gaussian_prediction: f64,
    /// |l2_norm − gaussian_prediction|.
    pub gap: f64,
    /// gap · t^{(d+2)/4}.
    pub rescaled_gap: f64,
    /// Σ_x |x| |f(x)| with minimal-image coordinates.
    pub first_moment: f64,
}

/// Gaussian comparison; requires N ≥ 8 √(M_max t) so wrap-around is negligible.
pub fn nash_compare(q: &JumpKernel, torus: &Torus, f: &[f64], t: f64) -> Result<NashRecord> {
    if !(t > 0.0) {
        bail!(Domain, "time {t} must be positive");
    }
    let m = q.covariance();
    let eig = m.clone().symmetric_eigen();
    let m_max = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b));
    let need = 8.0 * libm::sqrt(m_max * t);
    if (torus.side() as f64) < need {
        bail!(Domain, "torus side {} below the wrap-around rule 8√(M_max t) = {need:.1}", torus.side());
    }
    let det = m.determinant();
    if !(det > 0.0) {
        bail!(Domain, "covariance matrix is singular");
    }
    let ft = heat_evolve(q, torus, f, t)?;
    let l2 = libm::sqrt(ft.iter().map(|v| v * v).sum::<f64>());
    let mass: f64 = f.iter().sum();
    let d = torus.dim() as f64;
    let pred = mass.abs() / libm::pow(libm::pow(4.0 * PI * t, d) * det, 0.25);
    let first_moment = f
        .iter()
        .enumerate()
        .map(|(s, v)| {
            let x = torus.min_image(torus.coords(s));
            let norm = libm::sqrt((0..torus.dim()).map(|i| (x.0[i] * x.0[i]) as f64).sum());
            norm * v.abs()
        })
        .sum();
    let gap = (l2 - pred).abs();
    Ok(NashRecord {
        t,
        l2_norm: l2,
        gaussian_prediction: pred,
        gap,
        rescaled_gap: gap * libm::pow(t, (d + 2.0) / 4.0),
        first_moment,
    })
}

/// Colex ranking of n-subsets of {0, .., V−1}.
#[derive(Clone, Debug, PartialEq)]
struct Combinadic {
    n: usize,
    /// binom[s * (n + 1) + j] = C(s, j)
    binom: Vec<usize>,
    sites: usize,
}

impl Combinadic {
    fn new(sites: usize, n: usize) -> Combinadic {
        let mut binom = vec![0usize; (sites + 1) * (n + 1)];
        for s in 0..=sites {
            binom[s * (n + 1)] = 1;
            for j in 1..=n.min(s) {
                let a = if j < s { binom[(s - 1) * (n + 1) + j] } else { 0 };
                binom[s * (n + 1) + j] = binom[(s - 1) * (n + 1) + j - 1].saturating_add(a);
            }
        }
        Combinadic { n, binom, sites }
    }

    fn c(&self, s: usize, j: usize) -> usize {
        if j > s {
            0
        } else {
            self.binom[s * (self.n + 1) + j]
        }
    }

    fn count(&self) -> usize {
        self.c(self.sites, self.n)
    }

    /// Rank of a strictly increasing tuple.
    fn rank(&self, y: &[usize]) -> usize {
        y.iter().enumerate().map(|(i, &s)| self.c(s, i + 1)).sum()
    }

    fn unrank(&self, mut r: usize, out: &mut [usize]) {
        let mut s = self.sites;
        for i in (0..self.n).rev() {
            s -= 1;
            while self.c(s, i + 1) > r {
                s -= 1;
            }
            out[i] = s;
            r -= self.c(s, i + 1);
        }
    }
}

/// Largest K_n state space handled by the exclusion Laplacian.
pub const MAX_SUBSET_STATES: usize = 20_000_000;

/// A level-n table f_n : K_n(torus) → ℝ, indexed by colex rank of the sorted sites.
#[derive(Clone, Debug, PartialEq)]
pub struct SubsetTable {
    torus: Torus,
    n: usize,
    index: Combinadic,
    values: Vec<f64>,
}

impl SubsetTable {
    pub fn zeros(torus: &Torus, n: usize) -> Result<SubsetTable> {
        if n == 0 || n > torus.volume() {
            bail!(Domain, "level {n} outside 1..={}", torus.volume());
        }
        let index = Combinadic::new(torus.volume(), n);
        let count = index.count();
        if count > MAX_SUBSET_STATES {
            return Err(Error::Size { what: "n-point subsets", needed: count as u64, limit: MAX_SUBSET_STATES as u64 });
        }
        Ok(SubsetTable { torus: *torus, n, values: vec![0.0; count], index })
    }

    /// Level n of a coefficient family, points wrapped onto the torus.
    pub fn from_chaos(torus: &Torus, c: &ChaosCoeffs, n: usize) -> Result<SubsetTable> {
        let mut out = SubsetTable::zeros(torus, n)?;
        if let Some(level) = c.level(n) {
            for (y, v) in level {
                let mut s: Vec<usize> = y.iter().map(|&p| torus.site(p)).collect();
                s.sort_unstable();
                if s.windows(2).any(|w| w[0] == w[1]) {
                    bail!(Domain, "subset {y:?} collapses on the torus");
                }
                *out.get_mut(&s) += v;
            }
        }
        Ok(out)
    }

    /// Back to sparse coefficients keyed by torus coordinates.
    pub fn to_chaos(&self, rho: f64) -> ChaosCoeffs {
        let mut c = ChaosCoeffs::new(rho);
        let mut buf = vec![0; self.n];
        for (r, &v) in self.values.iter().enumerate() {
            if v != 0.0 {
                self.index.unrank(r, &mut buf);
                c.add(buf.iter().map(|&s| self.torus.coords(s)).collect(), v).expect("distinct sites");
            }
        }
        c
    }

    pub fn level(&self) -> usize {
        self.n
    }

    pub fn torus(&self) -> &Torus {
        &self.torus
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Sorted sites of the subset with a given rank.
    pub fn subset(&self, rank: usize) -> Vec<usize> {
        let mut buf = vec![0; self.n];
        self.index.unrank(rank, &mut buf);
        buf
    }

    pub fn rank(&self, sorted_sites: &[usize]) -> usize {
        self.index.rank(sorted_sites)
    }

    pub fn get(&self, sorted_sites: &[usize]) -> f64 {
        self.values[self.index.rank(sorted_sites)]
    }

    pub fn get_mut(&mut self, sorted_sites: &[usize]) -> &mut f64 {
        let r = self.index.rank(sorted_sites);
        &mut self.values[r]
    }

    pub fn l1_norm(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum()
    }

    pub fn l2_norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    fn with_values(&self, values: Vec<f64>) -> SubsetTable {
        SubsetTable { values, ..self.clone() }
    }
}

/// ½Δ_Q^{(n)} as a Markov generator on K_n(torus).
#[derive(Clone, Debug)]
pub struct ExclusionLaplacian {
    csr: Csr,
}

impl LinearGenerator for ExclusionLaplacian {
    fn dim(&self) -> usize {
        self.csr.dim()
    }
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        self.csr.apply(x, out)
    }
    fn exit_rate_bound(&self) -> f64 {
        self.csr.exit_rate_bound()
    }
}

impl ExclusionLaplacian {
    /// [½Δ_Q^{(n)} f](Y) = Σ_{x∈Y, y∉Y} Q_{y−x} (f(Y ∪ {y} \ {x}) − f(Y)).
    pub fn new(q: &JumpKernel, torus: &Torus, n: usize) -> Result<ExclusionLaplacian> {
        if q.dim() != torus.dim() {
            bail!(Config, "kernel dimension {} on a torus of dimension {}", q.dim(), torus.dim());
        }
        check_wrap(torus, q)?;
        let shape = SubsetTable::zeros(torus, n)?;
        let moves: Vec<Vec<(usize, f64)>> =
            (0..torus.volume()).map(|x| q.rates().map(|(y, r)| (torus.shift(x, y), r)).collect()).collect();
        let mut y = vec![0usize; n];
        let mut z = vec![0usize; n];
        let csr = Csr::from_rows(shape.len(), |r, row| {
            shape.index.unrank(r, &mut y);
            for i in 0..n {
                for &(to, rate) in &moves[y[i]] {
                    if y.binary_search(&to).is_ok() {
                        continue;
                    }
                    // replace y[i] by `to` and restore order
                    z.copy_from_slice(&y);
                    z[i] = to;
                    z.sort_unstable();
                    row.push((shape.index.rank(&z) as u32, rate));
                }
            }
        });
        Ok(ExclusionLaplacian { csr })
    }

    pub fn csr(&self) -> &Csr {
        &self.csr
    }
}

pub fn exclusion_laplacian_apply(q: &JumpKernel, f: &SubsetTable) -> Result<SubsetTable> {
    let op = ExclusionLaplacian::new(q, &f.torus, f.n)?;
    let mut out = vec![0.0; f.len()];
    op.apply(&f.values, &mut out);
    Ok(f.with_values(out))
}

/// e^{tΔ_Q^{(n)}/2} f_n with max-norm truncation error at most `tol`.
pub fn exclusion_evolve(q: &JumpKernel, f: &SubsetTable, t: f64, tol: f64) -> Result<SubsetTable> {
    let op = ExclusionLaplacian::new(q, &f.torus, f.n)?;
    exclusion_evolve_with(&op, f, t, tol)
}

/// As [`exclusion_evolve`] with a prebuilt generator.
pub fn exclusion_evolve_with(op: &ExclusionLaplacian, f: &SubsetTable, t: f64, tol: f64) -> Result<SubsetTable> {
    if op.dim() != f.len() {
        bail!(Domain, "generator and table sizes differ");
    }
    let (v, _) = semigroup_action(op, t, &f.values, tol)?;
    Ok(f.with_values(v))
}
