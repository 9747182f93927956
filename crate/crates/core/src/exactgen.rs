//! Exact generators on the configuration space of a small torus: the rate-family
//! dynamics L and the SEP L̄ of a jump kernel, Dirichlet forms, Sobolev
//! seminorms and the semigroup action.
//!
//! Functions are dense vectors over all 2^V masks (bit s = occupation of site s).
//! The operators conserve particle number, so they are block diagonal over
//! fixed-count sectors; a Bernoulli expectation is the binomial mixture of the
//! sector averages, which is exactly the weighted sum with [`mask_weights`].

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::configspace::{bernoulli_weights, LocalFunction, Table};
use crate::error::{bail, Error, Result};
use crate::fock::{chaos_coeffs, ChaosCoeffs};
use crate::heatkernel::JumpKernel;
use crate::lattice::{Point, Torus};
use crate::linalg::{semigroup_action, ActionStats, Csr, LinearGenerator};
use crate::rates::RateFamily;

/// Largest number of torus sites for full configuration-space operators.
pub const MAX_SITES: usize = 21;

/// A generator on the configuration space of a torus.
#[derive(Clone, Debug)]
pub struct SparseOperator {
    torus: Torus,
    csr: Csr,
}

impl LinearGenerator for SparseOperator {
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

impl SparseOperator {
    pub fn torus(&self) -> &Torus {
        &self.torus
    }

    pub fn csr(&self) -> &Csr {
        &self.csr
    }

    pub fn apply_vec(&self, f: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; f.len()];
        self.csr.apply(f, &mut out);
        out
    }

    /// Masks with exactly `k` particles, ascending.
    pub fn sector_states(&self, k: u32) -> Vec<u64> {
        (0..self.csr.dim() as u64).filter(|m| m.count_ones() == k).collect()
    }

    /// The block of the operator on the `k`-particle sector, indexed by [`Self::sector_states`].
    pub fn sector_block(&self, k: u32) -> (Vec<u64>, Csr) {
        let states = self.sector_states(k);
        let csr = &self.csr;
        let block = Csr::from_rows(states.len(), |i, row| {
            let m = states[i] as usize;
            for e in csr.row_ptr[m]..csr.row_ptr[m + 1] {
                let j = states.binary_search(&(csr.cols[e] as u64)).expect("sector closed");
                row.push((j as u32, csr.vals[e]));
            }
        });
        (states, block)
    }
}

fn check_space(torus: &Torus) -> Result<usize> {
    let v = torus.volume();
    if v > MAX_SITES {
        return Err(Error::Size { what: "configuration space sites", needed: v as u64, limit: MAX_SITES as u64 });
    }
    Ok(v)
}

/// L F(η) = Σ_b c_b(η)(F(η^b) − F(η)) over the nearest-neighbour bonds of the torus.
pub fn build_generator(torus: &Torus, rf: &RateFamily) -> Result<SparseOperator> {
    if rf.dim() != torus.dim() {
        bail!(Config, "rate family dimension {} on a torus of dimension {}", rf.dim(), torus.dim());
    }
    let v = check_space(torus)?;
    let bonds: Vec<(usize, usize, Vec<usize>, &[f64])> = torus
        .bonds()
        .into_iter()
        .map(|(x, y, i)| {
            let t = rf.table(i);
            let w = t.sites.iter().map(|&z| torus.shift(x, z)).collect();
            (x, y, w, t.rates.as_slice())
        })
        .collect();
    let csr = Csr::from_rows(1 << v, |m, row| {
        for (x, y, w, rates) in &bonds {
            if (m >> x & 1) == (m >> y & 1) {
                continue;
            }
            let idx = w.iter().enumerate().fold(0usize, |acc, (j, &s)| acc | ((m >> s & 1) << j));
            row.push(((m ^ (1 << x) ^ (1 << y)) as u32, rates[idx]));
        }
    });
    Ok(SparseOperator { torus: *torus, csr })
}

/// Reject kernels whose offsets alias modulo the torus side.
pub fn check_wrap(torus: &Torus, q: &JumpKernel) -> Result<()> {
    let r = q.support_radius();
    if 2 * r >= torus.side() as i64 {
        return Err(Error::WrapAmbiguity { radius: r, side: torus.side() });
    }
    Ok(())
}

/// L̄ = ½ Σ_x Σ_y Q_{y−x} π_{x,y}: each unordered pair {x, x+y} swaps at rate Q_y.
pub fn build_sep_generator(torus: &Torus, q: &JumpKernel) -> Result<SparseOperator> {
    if q.dim() != torus.dim() {
        bail!(Config, "kernel dimension {} on a torus of dimension {}", q.dim(), torus.dim());
    }
    check_wrap(torus, q)?;
    let v = check_space(torus)?;
    let pairs: Vec<(usize, usize, f64)> = (0..v)
        .flat_map(|x| q.rates().filter(|(y, _)| y.is_positive()).map(move |(y, r)| (x, torus.shift(x, y), r)))
        .collect();
    let csr = Csr::from_rows(1 << v, |m, row| {
        for &(x, z, r) in &pairs {
            if (m >> x & 1) != (m >> z & 1) {
                row.push(((m ^ (1 << x) ^ (1 << z)) as u32, r));
            }
        }
    });
    Ok(SparseOperator { torus: *torus, csr })
}

/// Bernoulli(ρ) weights of all masks of the torus.
pub fn mask_weights(torus: &Torus, rho: f64) -> Result<Vec<f64>> {
    Ok(bernoulli_weights(check_space(torus)?, rho))
}

/// Values of a local function on every configuration; points wrap onto the torus.
pub fn full_space(torus: &Torus, f: &LocalFunction) -> Result<Vec<f64>> {
    let v = check_space(torus)?;
    let mut out = vec![0.0; 1 << v];
    for t in f.terms() {
        let sites: Vec<usize> = t.support().map(|p| torus.site(p)).collect();
        for (m, o) in out.iter_mut().enumerate() {
            let idx = sites.iter().enumerate().fold(0u64, |acc, (j, &s)| acc | (((m >> s & 1) as u64) << j));
            *o += t.coef * t.table.at(idx);
        }
    }
    Ok(out)
}

/// A full-space vector as a dense table over the torus sites (coordinates in [0, N)^d).
pub fn as_table(torus: &Torus, f: &[f64]) -> Result<Table> {
    let support = (0..torus.volume()).map(|s| torus.coords(s)).collect();
    Table::new(support, f.to_vec())
}

/// Chaos coefficients of a full-space function, keyed by torus coordinates.
pub fn chaos_of(torus: &Torus, f: &[f64], rho: f64) -> Result<ChaosCoeffs> {
    chaos_coeffs(&LocalFunction::from_table(as_table(torus, f)?), rho)
}

pub fn expect(w: &[f64], f: &[f64]) -> f64 {
    w.iter().zip(f).map(|(w, f)| w * f).sum()
}

pub fn inner(w: &[f64], f: &[f64], g: &[f64]) -> f64 {
    w.iter().zip(f).zip(g).map(|((w, f), g)| w * f * g).sum()
}

pub fn variance(w: &[f64], f: &[f64]) -> f64 {
    let m = expect(w, f);
    w.iter().zip(f).map(|(w, f)| w * (f - m) * (f - m)).sum()
}

/// ⟨F(−L)F⟩_ρ.
pub fn dirichlet_form(op: &SparseOperator, f: &[f64], w: &[f64]) -> f64 {
    -inner(w, f, &op.apply_vec(f))
}

/// ‖F‖²_{Ḣ^k} = ⟨F(−L)^k F⟩_ρ.
pub fn sobolev_seminorm(op: &SparseOperator, f: &[f64], k: u32, w: &[f64]) -> f64 {
    let mut g = f.to_vec();
    for _ in 0..k / 2 {
        g = op.apply_vec(&g).into_iter().map(|v| -v).collect();
    }
    if k % 2 == 0 {
        inner(w, &g, &g)
    } else {
        dirichlet_form(op, &g, w)
    }
}

/// e^{tL} F with max-norm truncation error at most `tol`.
pub fn apply_semigroup(op: &SparseOperator, t: f64, f: &[f64], tol: f64) -> Result<Vec<f64>> {
    Ok(semigroup_action(op, t, f, tol)?.0)
}

pub fn apply_semigroup_with_stats(op: &SparseOperator, t: f64, f: &[f64], tol: f64) -> Result<(Vec<f64>, ActionStats)> {
    semigroup_action(op, t, f, tol)
}

/// Σ_b ⟨(π_b F)²⟩ over the nearest-neighbour bonds of the torus.
pub fn bond_energy(torus: &Torus, f: &[f64], w: &[f64]) -> Result<f64> {
    check_space(torus)?;
    let mut e = 0.0;
    for (x, y, _) in torus.bonds() {
        for (m, (&wm, &fm)) in w.iter().zip(f).enumerate() {
            if (m >> x & 1) != (m >> y & 1) {
                let d = f[m ^ (1 << x) ^ (1 << y)] - fm;
                e += wm * d * d;
            }
        }
    }
    Ok(e)
}

/// Extremal energy ratios over a probe family.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyComparison {
    /// min ⟨F(−L̄)F⟩ / Σ_b⟨(π_bF)²⟩.
    pub min_bond_ratio: f64,
    /// max ⟨F(−L̄)F⟩ / ⟨F(−L)F⟩.
    pub max_generator_ratio: f64,
    pub probes_used: usize,
    pub probes_skipped: usize,
}

impl EnergyComparison {
    /// The lower comparison with constant 1/8.
    pub fn lower_bound_holds(&self) -> bool {
        self.min_bond_ratio >= 0.125 - 1e-9
    }
}

/// Compare the SEP energy with the bond energy and with the rate-family energy.
/// Probes whose energies vanish (constants, and functions of the particle number)
/// are skipped.
pub fn energy_comparison(
    l: &SparseOperator,
    lbar: &SparseOperator,
    w: &[f64],
    probes: &[Vec<f64>],
) -> Result<EnergyComparison> {
    if l.torus() != lbar.torus() {
        bail!(Config, "operators live on different tori");
    }
    let mut out =
        EnergyComparison { min_bond_ratio: f64::INFINITY, max_generator_ratio: 0.0, probes_used: 0, probes_skipped: 0 };
    for f in probes {
        let scale = inner(w, f, f).max(f64::MIN_POSITIVE);
        let ebar = dirichlet_form(lbar, f, w);
        let el = dirichlet_form(l, f, w);
        let eb = bond_energy(l.torus(), f, w)?;
        if eb <= 1e-13 * scale || el <= 1e-13 * scale {
            out.probes_skipped += 1;
            continue;
        }
        out.probes_used += 1;
        out.min_bond_ratio = out.min_bond_ratio.min(ebar / eb);
        out.max_generator_ratio = out.max_generator_ratio.max(ebar / el);
    }
    Ok(out)
}

/// Singletons η̄_x, pair products η̄_xη̄_y, and `random` seeded local functions
/// on up to four nearby sites with values uniform in [−1, 1].
pub fn standard_probes(torus: &Torus, rho: f64, random: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let v = check_space(torus)?;
    let mut probes = Vec::new();
    let bar = |m: usize, s: usize| (m >> s & 1) as f64 - rho;
    for x in 0..v {
        probes.push((0..1usize << v).map(|m| bar(m, x)).collect());
    }
    for x in 0..v {
        for y in x + 1..v {
            probes.push((0..1usize << v).map(|m| bar(m, x) * bar(m, y)).collect());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..random {
        let k = rng.random_range(1..=4usize.min(v));
        let base = rng.random_range(0..v);
        let mut sites: Vec<usize> = Vec::with_capacity(k);
        while sites.len() < k {
            let off: Vec<i64> = (0..torus.dim()).map(|_| rng.random_range(-1..=2)).collect();
            let s = torus.shift(base, Point::new(&off));
            if !sites.contains(&s) {
                sites.push(s);
            }
        }
        let table: Vec<f64> = (0..1 << k).map(|_| rng.random_range(-1.0..=1.0)).collect();
        probes.push(
            (0..1usize << v)
                .map(|m| {
                    let idx = sites.iter().enumerate().fold(0usize, |acc, (j, &s)| acc | ((m >> s & 1) << j));
                    table[idx]
                })
                .collect(),
        );
    }
    Ok(probes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::configspace::chi;
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};

    fn random_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn two_site_torus_ssep() {
        let t = Torus::new(1, 2).unwrap();
        let op = build_generator(&t, &RateFamily::ssep(1)).unwrap();
        // η_0 on masks 00, 01, 10, 11 (bit 0 = site 0)
        let eta0 = [0.0, 1.0, 0.0, 1.0];
        let l = op.apply_vec(&eta0);
        let eta1 = [0.0, 0.0, 1.0, 1.0];
        for m in 0..4 {
            assert_eq!(l[m], 2.0 * (eta1[m] - eta0[m]));
        }
    }

    #[test]
    fn annihilates_constants_and_rows_sum_to_zero() {
        let t = Torus::new(1, 6).unwrap();
        let op = build_generator(&t, &RateFamily::neighbor_weighted(1, 0.5).unwrap()).unwrap();
        let l1 = op.apply_vec(&vec![1.0; 64]);
        assert!(l1.iter().all(|v| v.abs() < 1e-14));
        for (i, j, v) in op.csr().triplets() {
            if i != j {
                assert!(v > 0.0);
                assert_eq!((i as u64).count_ones(), (j as u64).count_ones());
            }
        }
    }

    #[test]
    fn reversible_dense_check() {
        let t = Torus::new(1, 10).unwrap();
        let op = build_generator(&t, &RateFamily::neighbor_weighted(1, 0.5).unwrap()).unwrap();
        let w = mask_weights(&t, 0.3).unwrap();
        let f = random_vec(1024, 1);
        let g = random_vec(1024, 2);
        let a = inner(&w, &f, &op.apply_vec(&g));
        let b = inner(&w, &g, &op.apply_vec(&f));
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn rates_match_rule() {
        let t = Torus::new(1, 6).unwrap();
        let rf = RateFamily::neighbor_weighted(1, 0.5).unwrap();
        let op = build_generator(&t, &rf).unwrap();
        // mask 0b000011: particles at 0 and 1; bond (1,2) has neighbours 0 and 3
        let m = 0b000011usize;
        let target = m ^ 0b110;
        let c = op.csr();
        let k = (c.row_ptr[m]..c.row_ptr[m + 1]).find(|&k| c.cols[k] as usize == target).unwrap();
        assert_eq!(c.vals[k], 1.5);
    }

    #[test]
    fn dirichlet_examples() {
        let t = Torus::new(1, 4).unwrap();
        let op = build_generator(&t, &RateFamily::ssep(1)).unwrap();
        let rho = 0.35;
        let w = mask_weights(&t, rho).unwrap();
        let f: Vec<f64> = (0..16).map(|m| (m & 1) as f64 - rho).collect();
        assert!((dirichlet_form(&op, &f, &w) - 2.0 * chi(rho)).abs() < 1e-14);
        assert_eq!(dirichlet_form(&op, &[3.0; 16], &w).abs(), 0.0);
        assert!((sobolev_seminorm(&op, &f, 0, &w) - chi(rho)).abs() < 1e-14);
        assert!((sobolev_seminorm(&op, &f, 1, &w) - 2.0 * chi(rho)).abs() < 1e-14);
        for k in 0..5 {
            assert!(sobolev_seminorm(&op, &f, k, &w) >= 0.0);
        }
    }

    #[test]
    fn semigroup_basics() {
        let t = Torus::new(1, 8).unwrap();
        let op = build_generator(&t, &RateFamily::neighbor_weighted(1, 0.5).unwrap()).unwrap();
        let w = mask_weights(&t, 0.4).unwrap();
        let f = random_vec(256, 7);
        assert_eq!(apply_semigroup(&op, 0.0, &f, 1e-12).unwrap(), f);
        let c = apply_semigroup(&op, 3.0, &[0.7; 256], 1e-12).unwrap();
        assert!(c.iter().all(|v| (v - 0.7).abs() < 1e-12));
        let mut last = f64::INFINITY;
        for k in 0..10 {
            let ft = apply_semigroup(&op, 0.3 * k as f64, &f, 1e-12).unwrap();
            assert!((expect(&w, &ft) - expect(&w, &f)).abs() < 1e-12);
            let v = variance(&w, &ft);
            assert!(v <= last + 1e-12);
            last = v;
        }
    }

    #[test]
    fn semigroup_symmetric() {
        let t = Torus::new(1, 8).unwrap();
        let op = build_generator(&t, &RateFamily::neighbor_weighted(1, 0.5).unwrap()).unwrap();
        let w = mask_weights(&t, 0.55).unwrap();
        let (f, g) = (random_vec(256, 3), random_vec(256, 4));
        let a = inner(&w, &f, &apply_semigroup(&op, 1.7, &g, 1e-13).unwrap());
        let b = inner(&w, &g, &apply_semigroup(&op, 1.7, &f, 1e-13).unwrap());
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn sector_blocks_are_closed() {
        let t = Torus::new(1, 6).unwrap();
        let op = build_generator(&t, &RateFamily::neighbor_weighted(1, 0.5).unwrap()).unwrap();
        let (states, block) = op.sector_block(3);
        assert_eq!(states.len(), 20);
        let ones = block.apply_vec_ext(&[1.0; 20]);
        assert!(ones.iter().all(|v| v.abs() < 1e-14));
    }

    trait ApplyExt {
        fn apply_vec_ext(&self, x: &[f64]) -> Vec<f64>;
    }
    impl ApplyExt for Csr {
        fn apply_vec_ext(&self, x: &[f64]) -> Vec<f64> {
            let mut out = vec![0.0; x.len()];
            self.apply(x, &mut out);
            out
        }
    }

    #[test]
    fn sep_generator_level_one() {
        let t = Torus::new(1, 8).unwrap();
        let q = JumpKernel::nearest_neighbor(1, 0.5);
        let op = build_sep_generator(&t, &q).unwrap();
        let rho = 0.3;
        let mut c = ChaosCoeffs::new(rho);
        c.add(alloc::vec![Point::new(&[0])], 1.0).unwrap();
        let f = full_space(&t, &c.integral(1).unwrap()).unwrap();
        let lf = chaos_of(&t, &op.apply_vec(&f), rho).unwrap();
        // ½Δ_Q δ_0 = ½(δ_1 + δ_{-1}) − δ_0
        for x in 0..8i64 {
            let want = match x {
                0 => -1.0,
                1 | 7 => 0.5,
                _ => 0.0,
            };
            assert!((lf.get(&[Point::new(&[x])]) - want).abs() < 1e-12);
        }
        for (n, l) in lf.levels() {
            if n != 1 {
                assert!(l.values().all(|v| v.abs() < 1e-12));
            }
        }
        assert!(op.apply_vec(&vec![1.0; 256]).iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn sep_wrap_rejected() {
        let t = Torus::new(1, 8).unwrap();
        let q = JumpKernel::new(1, [(Point::new(&[4]), 0.1), (Point::new(&[-4]), 0.1)]).unwrap();
        assert!(matches!(build_sep_generator(&t, &q), Err(Error::WrapAmbiguity { .. })));
    }

    #[test]
    fn energy_comparison_ssep() {
        let t = Torus::new(1, 6).unwrap();
        let rho = 0.4;
        let l = build_generator(&t, &RateFamily::ssep(1)).unwrap();
        let lbar = build_sep_generator(&t, &JumpKernel::nearest_neighbor(1, 0.5)).unwrap();
        let w = mask_weights(&t, rho).unwrap();
        let mut probes = standard_probes(&t, rho, 100, 11).unwrap();
        probes.push(vec![1.0; 64]);
        let cmp = energy_comparison(&l, &lbar, &w, &probes).unwrap();
        assert!(cmp.lower_bound_holds());
        assert!((cmp.min_bond_ratio - 0.25).abs() < 1e-12);
        assert!((cmp.max_generator_ratio - 0.5).abs() < 1e-12);
        assert!(cmp.probes_skipped >= 1);
    }

    #[test]
    fn size_limit() {
        let t = Torus::new(1, 22).unwrap();
        assert!(matches!(build_generator(&t, &RateFamily::ssep(1)), Err(Error::Size { .. })));
    }

    #[test]
    fn two_dimensional_generator() {
        let t = Torus::new(2, 3).unwrap();
        let rf = RateFamily::neighbor_weighted(2, 0.2).unwrap();
        let op = build_generator(&t, &rf).unwrap();
        let w = mask_weights(&t, 0.5).unwrap();
        let (f, g) = (random_vec(512, 5), random_vec(512, 6));
        let a = inner(&w, &f, &op.apply_vec(&g));
        let b = inner(&w, &g, &op.apply_vec(&f));
        assert!((a - b).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn sobolev_dissipation_identity(seed in any::<u64>(), k in 0u32..=2) {
            // d/dt ‖G_t‖²_{Ḣ^k} = −2‖G_t‖²_{Ḣ^{k+1}}: integrate with Simpson on [τ, t]
            let t = Torus::new(1, 6).unwrap();
            let op = build_sep_generator(&t, &JumpKernel::nearest_neighbor(1, 0.5)).unwrap();
            let w = mask_weights(&t, 0.45).unwrap();
            let f = random_vec(64, seed);
            let (tau, t1, steps) = (0.2, 1.2, 200);
            let h = (t1 - tau) / steps as f64;
            let mut integral = 0.0;
            let mut g = apply_semigroup(&op, tau, &f, 1e-14).unwrap();
            let start = sobolev_seminorm(&op, &g, k, &w);
            let mut vals = Vec::new();
            for _ in 0..=steps {
                vals.push(sobolev_seminorm(&op, &g, k + 1, &w));
                g = apply_semigroup(&op, h, &g, 1e-14).unwrap();
            }
            for i in 0..steps / 2 {
                integral += h / 3.0 * (vals[2 * i] + 4.0 * vals[2 * i + 1] + vals[2 * i + 2]);
            }
            let end = sobolev_seminorm(&op, &apply_semigroup(&op, t1, &f, 1e-14).unwrap(), k, &w);
            prop_assert!((end + 2.0 * integral - start).abs() <= 1e-6 * start.max(1e-12));
            prop_assert!(vals[steps].sqrt() <= (t1 - tau).powf(-0.5) * start.sqrt() + 1e-12);
        }
    }
}
