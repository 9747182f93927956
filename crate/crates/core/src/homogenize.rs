//! Finite-volume cell problem on the triadic cube □_m: the corrector, the
//! energies ν̄(ρ, □_m, p), the matrix D̄(ρ, □_m), centered fluxes and the
//! two-scale expansion of linear statistics.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;

use crate::configspace::{bernoulli_weights, chi, project_mask, swap_bits, LocalFunction, Table};
use crate::error::{bail, Error, Result};
use crate::lattice::{Bond, Cube, Point, Region, Torus};
use crate::linalg::conjugate_gradient;
use crate::rates::RateFamily;

/// Largest interior □_m⁻ the corrector is tabulated on.
pub const MAX_INTERIOR_BITS: usize = 20;
/// Largest site set for the flux projection.
pub const MAX_FLUX_BITS: usize = 20;
/// Relative residual demanded from the stationarity equations.
pub const STATIONARITY_TOL: f64 = 1e-9;

const CG_TOL: f64 = 1e-12;

/// Whether the corrector on □_m fits the tabulation limit.
pub fn admissible(dim: usize, m: u32) -> bool {
    let side = 3usize.saturating_pow(m);
    let inner = side.saturating_sub(2);
    match inner.checked_pow(dim as u32) {
        Some(n) => n <= MAX_INTERIOR_BITS,
        None => false,
    }
}

/// The 16λχ3^{(d+2)m} bound on ⟨φ²⟩.
pub fn corrector_l2_bound(lambda: f64, rho: f64, dim: usize, m: u32) -> f64 {
    16.0 * lambda * chi(rho) * libm::pow(3.0, ((dim as u32 + 2) * m) as f64)
}

/// Per-bond data over the sites □⁻ ∪ b: only configurations with differing endpoints.
#[derive(Clone, Debug)]
struct BondBlock {
    dir: usize,
    /// π_ρ(σ) E[c_b | σ].
    weight: Vec<f64>,
    /// Interior mask of σ.
    from: Vec<u32>,
    /// Interior mask of σ^b.
    to: Vec<u32>,
    /// η_a − η_b.
    sign: Vec<f64>,
}

/// The quadratic form of the cell problem at fixed (rf, ρ, m); independent of p.
#[derive(Clone, Debug)]
pub struct CellProblem {
    rf: RateFamily,
    rho: f64,
    m: u32,
    cube: Cube,
    interior: Vec<Point>,
    blocks: Vec<BondBlock>,
    components: usize,
    /// Component label of every interior mask.
    labels: Vec<u32>,
}

impl CellProblem {
    pub fn new(rf: &RateFamily, rho: f64, m: u32) -> Result<CellProblem> {
        if !(rho > 0.0 && rho < 1.0) {
            bail!(Domain, "density {rho} must lie in (0, 1)");
        }
        let d = rf.dim();
        if !admissible(d, m) {
            let inner = 3u64.saturating_pow(m).saturating_sub(2);
            return Err(Error::Size {
                what: "corrector interior sites",
                needed: inner.saturating_pow(d as u32),
                limit: MAX_INTERIOR_BITS as u64,
            });
        }
        let cube = Cube::triadic(d, m);
        let region = cube.region();
        let interior = region.interior().points().to_vec();
        let n_in = interior.len();
        let mut blocks = Vec::new();
        for bond in region.enlarged_bonds() {
            blocks.push(bond_block(rf, rho, &interior, bond)?);
        }
        // connected components of the state graph = dimension of the kernel
        let mut parent: Vec<u32> = (0..1u32 << n_in).collect();
        fn find(p: &mut [u32], mut x: u32) -> u32 {
            while p[x as usize] != x {
                p[x as usize] = p[p[x as usize] as usize];
                x = p[x as usize];
            }
            x
        }
        let mut components = parent.len();
        for b in &blocks {
            for k in 0..b.weight.len() {
                if b.weight[k] > 0.0 {
                    let (x, y) = (find(&mut parent, b.from[k]), find(&mut parent, b.to[k]));
                    if x != y {
                        parent[x as usize] = y;
                        components -= 1;
                    }
                }
            }
        }
        let labels = (0..parent.len() as u32).map(|x| find(&mut parent, x)).collect();
        Ok(CellProblem { rf: rf.clone(), rho, m, cube, interior, blocks, components, labels })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn scale(&self) -> u32 {
        self.m
    }

    pub fn cube(&self) -> &Cube {
        &self.cube
    }

    pub fn interior(&self) -> &[Point] {
        &self.interior
    }

    /// Dimension of the null space of the corrector quadratic form (1 = constants only).
    pub fn kernel_dimension(&self) -> usize {
        self.components
    }

    fn apply(&self, phi: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for b in &self.blocks {
            for k in 0..b.weight.len() {
                let (f, t) = (b.from[k] as usize, b.to[k] as usize);
                let g = b.weight[k] * (phi[t] - phi[f]);
                out[t] += g;
                out[f] -= g;
            }
        }
    }

    fn load(&self, p: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; 1 << self.interior.len()];
        for b in &self.blocks {
            for k in 0..b.weight.len() {
                let v = b.weight[k] * p[b.dir] * b.sign[k];
                g[b.to[k] as usize] += v;
                g[b.from[k] as usize] -= v;
            }
        }
        g
    }

    /// ν̄ evaluated at v = ℓ_{p,□⁺} + φ, for any φ over the interior masks.
    pub fn energy(&self, p: &[f64], phi: &[f64]) -> Result<f64> {
        self.check_direction(p)?;
        if phi.len() != 1 << self.interior.len() {
            bail!(Domain, "corrector table has {} values, expected {}", phi.len(), 1usize << self.interior.len());
        }
        let mut e = 0.0;
        for b in &self.blocks {
            for k in 0..b.weight.len() {
                let r = p[b.dir] * b.sign[k] + phi[b.to[k] as usize] - phi[b.from[k] as usize];
                e += 0.5 * b.weight[k] * r * r;
            }
        }
        Ok(e / (2.0 * chi(self.rho) * self.cube.volume() as f64))
    }

    fn check_direction(&self, p: &[f64]) -> Result<()> {
        if p.len() != self.rf.dim() {
            bail!(Domain, "direction has {} components in dimension {}", p.len(), self.rf.dim());
        }
        if p.iter().any(|v| !v.is_finite()) {
            bail!(Domain, "direction has non-finite components");
        }
        Ok(())
    }

    /// Minimize the energy over φ ∈ F_0(□⁻).
    pub fn solve(&self, p: &[f64]) -> Result<CorrectorSolution> {
        self.check_direction(p)?;
        let n = 1usize << self.interior.len();
        let mut rhs: Vec<f64> = self.load(p).into_iter().map(|v| -v).collect();
        // project onto the range: zero mean on every component
        let mut sums = vec![(0.0, 0usize); n];
        for (v, &l) in rhs.iter().zip(&self.labels) {
            sums[l as usize].0 += v;
            sums[l as usize].1 += 1;
        }
        for (v, &l) in rhs.iter_mut().zip(&self.labels) {
            let (s, c) = sums[l as usize];
            *v -= s / c as f64;
        }
        let scale: f64 = self.blocks.iter().map(|b| b.weight.iter().sum::<f64>() * p[b.dir].abs()).sum();
        if libm::sqrt(rhs.iter().map(|v| v * v).sum::<f64>()) <= 1e-13 * scale {
            rhs.iter_mut().for_each(|v| *v = 0.0);
        }
        let sol = conjugate_gradient(|x, y| self.apply(x, y), &rhs, None, CG_TOL, 20 * n + 1000)?;
        if sol.relative_residual > STATIONARITY_TOL {
            return Err(Error::Convergence {
                what: "cell problem",
                iterations: sol.iterations,
                residual: sol.relative_residual,
            });
        }
        let w = bernoulli_weights(self.interior.len(), self.rho);
        let mut phi = sol.x;
        let mean: f64 = w.iter().zip(&phi).map(|(w, v)| w * v).sum();
        phi.iter_mut().for_each(|v| *v -= mean);
        let mean_after: f64 = w.iter().zip(&phi).map(|(w, v)| w * v).sum();
        let l2: f64 = w.iter().zip(&phi).map(|(w, v)| w * v * v).sum();
        let energy = self.energy(p, &phi)?;
        let bare = self.energy(p, &vec![0.0; n])?;
        Ok(CorrectorSolution {
            rf: self.rf.clone(),
            cube: self.cube,
            m: self.m,
            rho: self.rho,
            direction: p.to_vec(),
            corrector: Table::new(self.interior.clone(), phi)?,
            energy,
            bare_energy: bare,
            mean: mean_after,
            l2_norm_sq: l2,
            kernel_dimension: self.components,
            iterations: sol.iterations,
            relative_residual: sol.relative_residual,
        })
    }
}

fn bond_block(rf: &RateFamily, rho: f64, interior: &[Point], bond: Bond) -> Result<BondBlock> {
    let dir = bond.direction().expect("nearest-neighbour bond");
    let sites = Region::new(rf.dim(), interior.iter().copied().chain([bond.a, bond.b]));
    let sites = sites.points();
    let ia = sites.binary_search(&bond.a).expect("endpoint");
    let ib = sites.binary_search(&bond.b).expect("endpoint");
    let in_pos: Vec<usize> = interior.iter().map(|x| sites.binary_search(x).expect("interior site")).collect();
    let extra: Vec<Point> = rf.dependency(&bond).into_iter().filter(|x| sites.binary_search(x).is_err()).collect();
    if sites.len() + extra.len() > 26 {
        return Err(Error::Size {
            what: "bond conditioning window",
            needed: (sites.len() + extra.len()) as u64,
            limit: 26,
        });
    }
    let extra_w = bernoulli_weights(extra.len(), rho);
    let site_w = bernoulli_weights(sites.len(), rho);
    let mut block = BondBlock { dir, weight: Vec::new(), from: Vec::new(), to: Vec::new(), sign: Vec::new() };
    for s in 0..1u64 << sites.len() {
        let (ea, eb) = (s >> ia & 1, s >> ib & 1);
        if ea == eb {
            continue;
        }
        let mut cbar = 0.0;
        for (t, &wt) in extra_w.iter().enumerate() {
            let occ = |x: &Point| match sites.binary_search(x) {
                Ok(j) => s >> j & 1 == 1,
                Err(_) => {
                    let j = extra.iter().position(|y| y == x).expect("dependency site");
                    t >> j & 1 == 1
                }
            };
            cbar += wt * rf.rate(&bond, occ);
        }
        let swapped = swap_bits(s as usize, ia, ib) as u64;
        block.weight.push(site_w[s as usize] * cbar);
        block.from.push(project_mask(s, &in_pos) as u32);
        block.to.push(project_mask(swapped, &in_pos) as u32);
        block.sign.push(ea as f64 - eb as f64);
    }
    Ok(block)
}

/// Minimizer of the cell problem for one direction p.
#[derive(Clone, Debug)]
pub struct CorrectorSolution {
    rf: RateFamily,
    pub cube: Cube,
    pub m: u32,
    pub rho: f64,
    pub direction: Vec<f64>,
    /// φ over the interior sites □_m⁻.
    pub corrector: Table,
    /// ν̄(ρ, □_m, p).
    pub energy: f64,
    /// The energy of ℓ_{p,□⁺} alone.
    pub bare_energy: f64,
    /// ⟨φ⟩_ρ after projection.
    pub mean: f64,
    /// ⟨φ²⟩_ρ.
    pub l2_norm_sq: f64,
    pub kernel_dimension: usize,
    pub iterations: usize,
    pub relative_residual: f64,
}

impl CorrectorSolution {
    pub fn rate_family(&self) -> &RateFamily {
        &self.rf
    }

    pub fn corrector_function(&self) -> LocalFunction {
        LocalFunction::from_table(self.corrector.clone())
    }

    pub fn l2_bound(&self) -> f64 {
        corrector_l2_bound(self.rf.lambda(), self.rho, self.rf.dim(), self.m)
    }

    /// Centered flux g_b = c_b π_b(ℓ_p + φ) − π_b ℓ_{D p} for every b in the enlarged bond set.
    pub fn centered_flux(&self, d_target: &DMatrix<f64>) -> Result<Vec<(Bond, LocalFunction)>> {
        let d = self.rf.dim();
        if d_target.nrows() != d || d_target.ncols() != d {
            bail!(Domain, "target matrix must be {d}×{d}");
        }
        let dp: Vec<f64> = (0..d).map(|i| (0..d).map(|j| d_target[(i, j)] * self.direction[j]).sum()).collect();
        let interior = self.corrector.support();
        let mut out = Vec::new();
        for bond in self.cube.region().enlarged_bonds() {
            let dir = bond.direction().expect("nearest-neighbour bond");
            let touches = interior.binary_search(&bond.a).is_ok() || interior.binary_search(&bond.b).is_ok();
            let mut pts: Vec<Point> = self.rf.dependency(&bond);
            pts.extend([bond.a, bond.b]);
            if touches {
                pts.extend_from_slice(interior);
            }
            let support = Region::new(d, pts).points().to_vec();
            let ia = support.binary_search(&bond.a).expect("endpoint");
            let ib = support.binary_search(&bond.b).expect("endpoint");
            let in_pos: Vec<usize> = if touches {
                interior.iter().map(|x| support.binary_search(x).expect("site")).collect()
            } else {
                Vec::new()
            };
            let phi = self.corrector.values();
            let table = Table::from_fn(support.iter().copied(), |s| {
                let sign = (s >> ia & 1) as f64 - (s >> ib & 1) as f64;
                if sign == 0.0 {
                    return 0.0;
                }
                let c = self.rf.rate(&bond, |x| s >> support.binary_search(x).expect("site") & 1 == 1);
                let dphi = if touches {
                    let t = swap_bits(s as usize, ia, ib) as u64;
                    phi[project_mask(t, &in_pos)] - phi[project_mask(s, &in_pos)]
                } else {
                    0.0
                };
                c * (self.direction[dir] * sign + dphi) - dp[dir] * sign
            })?;
            out.push((bond, LocalFunction::from_term(1.0, Point::ORIGIN, Arc::new(table))));
        }
        Ok(out)
    }

    /// |□|^{-1/2} ‖P g‖ with P the projection onto gradient fields (π_b v)_b.
    pub fn flux_dual_norm(&self, d_target: &DMatrix<f64>) -> Result<FluxNorm> {
        let flux = self.centered_flux(d_target)?;
        flux_dual_norm(&flux, self.rho, self.cube.volume())
    }
}

/// Result of the flux projection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FluxNorm {
    pub value: f64,
    /// ‖g‖ normalized the same way, an upper bound for `value`.
    pub flux_norm: f64,
    pub sites: usize,
    pub iterations: usize,
}

/// sup_v Σ_b⟨(π_b v) g_b⟩ / (Σ_b⟨(π_b v)²⟩)^{1/2} / |□|^{1/2}. Taking v measurable on
/// the union of flux supports is exact: conditioning v on that set keeps the
/// numerator and does not increase the denominator.
pub fn flux_dual_norm(flux: &[(Bond, LocalFunction)], rho: f64, volume: usize) -> Result<FluxNorm> {
    if flux.is_empty() {
        return Ok(FluxNorm { value: 0.0, flux_norm: 0.0, sites: 0, iterations: 0 });
    }
    let dim = flux[0].0.a.0.iter().rposition(|&c| c != 0).map_or(1, |i| i + 1);
    let mut pts = Vec::new();
    for (b, g) in flux {
        pts.extend(g.support());
        pts.extend([b.a, b.b]);
    }
    let sites = Region::new(dim.max(1), pts).points().to_vec();
    if sites.len() > MAX_FLUX_BITS {
        return Err(Error::Size {
            what: "flux projection sites",
            needed: sites.len() as u64,
            limit: MAX_FLUX_BITS as u64,
        });
    }
    let n = 1usize << sites.len();
    let w = bernoulli_weights(sites.len(), rho);
    let bonds: Vec<(usize, usize)> = flux
        .iter()
        .map(|(b, _)| (sites.binary_search(&b.a).expect("site"), sites.binary_search(&b.b).expect("site")))
        .collect();
    let mut gvals = Vec::with_capacity(flux.len());
    for (_, g) in flux {
        let table = g.to_table_on(&sites)?;
        gvals.push(table.values().to_vec());
    }
    // in the ρ-weighted inner product: ∇*∇ v = 2 Σ_b (v − v∘swap_b), ∇* g = −2 Σ_b g_b
    let apply = |v: &[f64], out: &mut [f64]| {
        for (s, o) in out.iter_mut().enumerate() {
            *o = bonds.iter().map(|&(a, b)| 2.0 * (v[s] - v[swap_bits(s, a, b)])).sum();
        }
    };
    let rhs: Vec<f64> = (0..n).map(|s| -2.0 * gvals.iter().map(|g| g[s]).sum::<f64>()).collect();
    let sol = conjugate_gradient(apply, &rhs, Some(&w), CG_TOL, 20 * n + 1000)?;
    let mut proj = 0.0;
    let mut total = 0.0;
    for (k, &(a, b)) in bonds.iter().enumerate() {
        for s in 0..n {
            let grad = sol.x[swap_bits(s, a, b)] - sol.x[s];
            proj += w[s] * grad * gvals[k][s];
            total += w[s] * gvals[k][s] * gvals[k][s];
        }
    }
    let vol = volume as f64;
    Ok(FluxNorm {
        value: libm::sqrt(proj.max(0.0) / vol),
        flux_norm: libm::sqrt(total / vol),
        sites: sites.len(),
        iterations: sol.iterations,
    })
}

/// D̄(ρ, □_m) and the conductivity c̄ = 2χD̄.
#[derive(Clone, Debug)]
pub struct DiffusionEstimate {
    pub rho: f64,
    pub m: u32,
    pub matrix: DMatrix<f64>,
    pub conductivity: DMatrix<f64>,
    /// ν̄(e_i).
    pub nu: Vec<f64>,
    /// Correctors for e_1, .., e_d.
    pub solutions: Vec<CorrectorSolution>,
    pub kernel_dimension: usize,
}

impl DiffusionEstimate {
    /// Smallest and largest eigenvalue of D̄.
    pub fn spectrum(&self) -> (f64, f64) {
        let e = self.matrix.clone().symmetric_eigen().eigenvalues;
        (e.min(), e.max())
    }

    /// Whether Id ≤ D̄ ≤ 2λ·Id within `slack`.
    pub fn within_ellipticity(&self, lambda: f64, slack: f64) -> bool {
        let (lo, hi) = self.spectrum();
        lo >= 1.0 - slack && hi <= 2.0 * lambda + slack
    }
}

pub fn diffusion_matrix(rf: &RateFamily, rho: f64, m: u32) -> Result<DiffusionEstimate> {
    let cell = CellProblem::new(rf, rho, m)?;
    diffusion_matrix_with(&cell)
}

/// D̄_ii = 2ν̄(e_i), D̄_ij = ν̄(e_i + e_j) − ν̄(e_i) − ν̄(e_j).
pub fn diffusion_matrix_with(cell: &CellProblem) -> Result<DiffusionEstimate> {
    let d = cell.rf.dim();
    let unit = |i: usize| {
        let mut p = vec![0.0; d];
        p[i] = 1.0;
        p
    };
    let solutions: Vec<CorrectorSolution> = (0..d).map(|i| cell.solve(&unit(i))).collect::<Result<_>>()?;
    let nu: Vec<f64> = solutions.iter().map(|s| s.energy).collect();
    let mut matrix = DMatrix::zeros(d, d);
    for i in 0..d {
        matrix[(i, i)] = 2.0 * nu[i];
        for j in i + 1..d {
            let mut p = unit(i);
            p[j] = 1.0;
            let v = cell.solve(&p)?.energy - nu[i] - nu[j];
            matrix[(i, j)] = v;
            matrix[(j, i)] = v;
        }
    }
    Ok(DiffusionEstimate {
        rho: cell.rho,
        m: cell.m,
        conductivity: &matrix * (2.0 * chi(cell.rho)),
        matrix,
        nu,
        solutions,
        kernel_dimension: cell.components,
    })
}

/// Π₁Ḡ + Σ_z Σ_i (D_{e_i} g)_{z+□_m} τ_z φ_{e_i} on a torus tiled by triadic cubes.
/// Points of the result are torus coordinates, possibly shifted by whole periods.
pub fn two_scale_expand(torus: &Torus, g: &[f64], correctors: &[CorrectorSolution]) -> Result<LocalFunction> {
    let d = torus.dim();
    if g.len() != torus.volume() {
        bail!(Domain, "site function has {} values for {} sites", g.len(), torus.volume());
    }
    if correctors.len() != d {
        bail!(Config, "need one corrector per direction, got {}", correctors.len());
    }
    let (m, rho) = (correctors[0].m, correctors[0].rho);
    for (i, c) in correctors.iter().enumerate() {
        let is_unit = c.direction.iter().enumerate().all(|(j, &v)| v == if i == j { 1.0 } else { 0.0 });
        if !is_unit || c.m != m || c.rho != rho || c.rf.dim() != d {
            bail!(Config, "corrector {i} is not the e_{} corrector at the common scale and density", i + 1);
        }
    }
    let centers = torus.triadic_centers(m)?;
    let cube = Cube::triadic(d, m);
    let mut out = LocalFunction::constant(-rho * g.iter().sum::<f64>());
    for (s, &v) in g.iter().enumerate() {
        if v != 0.0 {
            out = out.add(&LocalFunction::occupation(torus.coords(s)).scale(v));
        }
    }
    for &z in &centers {
        let cells = torus.cube_sites(z, &cube);
        for (i, c) in correctors.iter().enumerate() {
            let e = Point::unit(i);
            let slope = cells.iter().map(|&x| g[torus.shift(x, e)] - g[x]).sum::<f64>() / cells.len() as f64;
            if slope != 0.0 {
                out = out.add(&c.corrector_function().translate(torus.coords(z)).scale(slope));
            }
        }
    }
    Ok(out)
}
