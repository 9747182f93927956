//! Chaos calculus on Bernoulli fields: coefficients T_n F(Y) = E_ρ[D_Y F],
//! multiple integrals I_n, Parseval, the ℓ¹ triple norm and ρ-derivatives.

use alloc::collections::BTreeMap;
use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::configspace::{chi, LocalFunction, Table, Term, MAX_TABLE_BITS};
use crate::error::{bail, Error, Result};
use crate::lattice::Point;

/// Sorted subset of lattice points.
pub type Subset = Vec<Point>;

/// Level-indexed sparse coefficient tables f_n : K_n → ℝ at density ρ.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ChaosCoeffs {
    rho: f64,
    levels: BTreeMap<usize, BTreeMap<Subset, f64>>,
}

impl ChaosCoeffs {
    pub fn new(rho: f64) -> ChaosCoeffs {
        ChaosCoeffs { rho, levels: BTreeMap::new() }
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// Add `value` to the coefficient of Y; Y must not repeat points.
    pub fn add(&mut self, mut y: Subset, value: f64) -> Result<()> {
        y.sort_unstable();
        if y.windows(2).any(|w| w[0] == w[1]) {
            bail!(Domain, "subset {y:?} repeats a site");
        }
        *self.levels.entry(y.len()).or_default().entry(y).or_insert(0.0) += value;
        Ok(())
    }

    pub fn get(&self, y: &[Point]) -> f64 {
        self.levels.get(&y.len()).and_then(|l| l.get(y)).copied().unwrap_or(0.0)
    }

    pub fn level(&self, n: usize) -> Option<&BTreeMap<Subset, f64>> {
        self.levels.get(&n)
    }

    pub fn levels(&self) -> impl Iterator<Item = (usize, &BTreeMap<Subset, f64>)> {
        self.levels.iter().map(|(&n, l)| (n, l))
    }

    pub fn max_level(&self) -> Option<usize> {
        self.levels.keys().next_back().copied()
    }

    /// Only level n.
    pub fn project(&self, n: usize) -> ChaosCoeffs {
        let mut out = ChaosCoeffs::new(self.rho);
        if let Some(l) = self.levels.get(&n) {
            out.levels.insert(n, l.clone());
        }
        out
    }

    /// Drop entries with |f(Y)| ≤ tol and empty levels.
    pub fn prune(&mut self, tol: f64) {
        for l in self.levels.values_mut() {
            l.retain(|_, v| v.abs() > tol);
        }
        self.levels.retain(|_, l| !l.is_empty());
    }

    /// ‖f_n‖²_{ℓ²}.
    pub fn l2_norm_sq(&self, n: usize) -> f64 {
        self.levels.get(&n).map_or(0.0, |l| l.values().map(|v| v * v).sum())
    }

    /// ‖f_n‖_{ℓ¹}, the triple norm of I_n(f_n).
    pub fn l1_norm(&self, n: usize) -> f64 {
        self.levels.get(&n).map_or(0.0, |l| l.values().map(|v| v.abs()).sum())
    }

    /// Σ_n χ^n ‖f_n‖², the second moment of Σ_n I_n(f_n).
    pub fn second_moment(&self) -> f64 {
        let c = chi(self.rho);
        self.levels.keys().map(|&n| libm::pow(c, n as f64) * self.l2_norm_sq(n)).sum()
    }

    /// I_n(f_n)(η) = Σ_Y f_n(Y) η̄_Y; dense when the union support fits a table.
    pub fn integral(&self, n: usize) -> Result<LocalFunction> {
        let Some(level) = self.levels.get(&n) else {
            return Ok(LocalFunction::zero());
        };
        let mut support: Vec<Point> = level.keys().flatten().copied().collect();
        support.sort_unstable();
        support.dedup();
        if support.len() <= MAX_TABLE_BITS {
            let rho = self.rho;
            let pos: Vec<Vec<usize>> =
                level.keys().map(|y| y.iter().map(|p| support.binary_search(p).unwrap()).collect()).collect();
            let vals: Vec<f64> = level.values().copied().collect();
            let t = Table::from_fn(support.iter().copied(), |m| {
                pos.iter()
                    .zip(&vals)
                    .map(|(ix, v)| {
                        v * ix.iter().map(|&i| if m >> i & 1 == 1 { 1.0 - rho } else { -rho }).product::<f64>()
                    })
                    .sum()
            })?;
            return Ok(LocalFunction::from_table(t));
        }
        let mut f = LocalFunction::zero();
        for (y, &v) in level {
            f = f.add(&LocalFunction::centered_product(y, self.rho)?.scale(v));
        }
        Ok(f)
    }

    /// Σ_n I_n(f_n).
    pub fn reconstruct(&self) -> Result<LocalFunction> {
        let mut f = LocalFunction::zero();
        for &n in self.levels.keys() {
            f = f.add(&self.integral(n)?);
        }
        Ok(f)
    }
}

/// In-place transform of a table: entry Y becomes E_ρ[D_Y F] (expectation over
/// the bits outside Y).
pub fn chaos_transform(values: &mut [f64], rho: f64) {
    let n = values.len();
    debug_assert!(n.is_power_of_two());
    let mut half = 1;
    while half < n {
        for block in (0..n).step_by(2 * half) {
            for m in block..block + half {
                let (v0, v1) = (values[m], values[m + half]);
                values[m] = (1.0 - rho) * v0 + rho * v1;
                values[m + half] = v1 - v0;
            }
        }
        half *= 2;
    }
}

/// Inverse of [`chaos_transform`]: coefficients to values of Σ_Y f(Y) η̄_Y.
pub fn chaos_inverse(values: &mut [f64], rho: f64) {
    let n = values.len();
    let mut half = 1;
    while half < n {
        for block in (0..n).step_by(2 * half) {
            for m in block..block + half {
                let (a, d) = (values[m], values[m + half]);
                values[m] = a - rho * d;
                values[m + half] = a + (1.0 - rho) * d;
            }
        }
        half *= 2;
    }
}

fn term_coeffs(t: &Term, rho: f64, out: &mut ChaosCoeffs) -> Result<()> {
    let tb: &Arc<Table> = &t.table;
    if tb.bits() > MAX_TABLE_BITS {
        return Err(Error::Unsupported(alloc::format!("support of {} sites exceeds {MAX_TABLE_BITS}", tb.bits())));
    }
    let mut v = tb.values().to_vec();
    chaos_transform(&mut v, rho);
    let pts: Vec<Point> = tb.support().iter().map(|&p| p + t.offset).collect();
    for (mask, c) in v.into_iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        let y: Subset = (0..pts.len()).filter(|i| mask >> i & 1 == 1).map(|i| pts[i]).collect();
        *out.levels.entry(y.len()).or_default().entry(y).or_insert(0.0) += t.coef * c;
    }
    Ok(())
}

/// T_n F(Y) for all Y in the support. Sums of tables are expanded termwise,
/// so the union support may exceed a single table.
pub fn chaos_coeffs(f: &LocalFunction, rho: f64) -> Result<ChaosCoeffs> {
    let mut out = ChaosCoeffs::new(rho);
    for t in f.terms() {
        term_coeffs(t, rho, &mut out)?;
    }
    for l in out.levels.values_mut() {
        l.retain(|_, v| *v != 0.0);
    }
    out.levels.retain(|_, l| !l.is_empty());
    Ok(out)
}

/// ⟨F²⟩_ρ − Σ_n χ^n ‖T_n F‖².
pub fn parseval_check(f: &LocalFunction, rho: f64) -> Result<f64> {
    let mean = f.expect_bernoulli(rho);
    let second = f.variance(rho)? + mean * mean;
    Ok(second - chaos_coeffs(f, rho)?.second_moment())
}

/// |||level n|||_n = ‖f_n‖_{ℓ¹}.
pub fn triple_norm(c: &ChaosCoeffs, n: usize) -> f64 {
    c.l1_norm(n)
}

/// dⁿ/dρⁿ E_ρ[F] = n! Σ_Y T_n F(Y).
pub fn rho_derivative(f: &LocalFunction, rho: f64, n: usize) -> Result<f64> {
    let c = chaos_coeffs(f, rho)?;
    let fact: f64 = (1..=n).map(|k| k as f64).product();
    Ok(fact * c.level(n).map_or(0.0, |l| l.values().sum()))
}
