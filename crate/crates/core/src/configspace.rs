//! Configurations, Bernoulli and canonical expectations, and the elementary
//! operators on local functions (exchange, Kawasaki, Glauber, translation).

use alloc::collections::BTreeMap;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Error, Result};
use crate::lattice::{Bond, Point, Region};

/// Dense tables are limited to this many support sites.
pub const MAX_TABLE_BITS: usize = 20;

/// χ(ρ) = ρ(1−ρ).
pub fn chi(rho: f64) -> f64 {
    rho * (1.0 - rho)
}

/// Product weights ρ^{|σ|}(1−ρ)^{k−|σ|} of all 2^k configurations of k sites.
pub fn bernoulli_weights(k: usize, rho: f64) -> Vec<f64> {
    let mut w = vec![1.0; 1 << k];
    for bit in 0..k {
        let half = 1usize << bit;
        for (mask, wi) in w.iter_mut().enumerate() {
            *wi *= if mask & half != 0 { rho } else { 1.0 - rho };
        }
    }
    w
}

/// Occupancy bit-field over sites 0..len.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Configuration {
    len: usize,
    words: Vec<u64>,
}

impl Configuration {
    pub fn empty(len: usize) -> Configuration {
        Configuration { len, words: vec![0; len.div_ceil(64)] }
    }

    pub fn from_bits(bits: impl IntoIterator<Item = bool>) -> Configuration {
        let bits: Vec<bool> = bits.into_iter().collect();
        let mut c = Configuration::empty(bits.len());
        for (i, b) in bits.into_iter().enumerate() {
            c.set(i, b);
        }
        c
    }

    /// Configuration of up to 64 sites from a mask, bit i ↔ site i.
    pub fn from_mask(len: usize, mask: u64) -> Configuration {
        assert!(len <= 64);
        let mut c = Configuration::empty(len);
        if len > 0 {
            c.words[0] = if len == 64 { mask } else { mask & ((1u64 << len) - 1) };
        }
        c
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        (self.words[i >> 6] >> (i & 63)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, v: bool) {
        let bit = 1u64 << (i & 63);
        if v {
            self.words[i >> 6] |= bit;
        } else {
            self.words[i >> 6] &= !bit;
        }
    }

    /// η ↦ η^{x,y}.
    #[inline]
    pub fn exchange(&mut self, x: usize, y: usize) {
        if self.get(x) != self.get(y) {
            self.words[x >> 6] ^= 1u64 << (x & 63);
            self.words[y >> 6] ^= 1u64 << (y & 63);
        }
    }

    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn words_mut(&mut self) -> &mut [u64] {
        &mut self.words
    }
}

/// Dense value table of a function of the sites in `support`; bit i of the
/// table index is the occupation of `support[i]` (sorted).
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    support: Vec<Point>,
    values: Vec<f64>,
}

impl Table {
    pub fn new(support: Vec<Point>, values: Vec<f64>) -> Result<Table> {
        if support.len() > MAX_TABLE_BITS {
            return Err(Error::Size {
                what: "local function table",
                needed: support.len() as u64,
                limit: MAX_TABLE_BITS as u64,
            });
        }
        if !support.windows(2).all(|w| w[0] < w[1]) {
            bail!(Domain, "table support must be strictly sorted");
        }
        if values.len() != 1 << support.len() {
            bail!(Domain, "table has {} values for {} sites", values.len(), support.len());
        }
        Ok(Table { support, values })
    }

    /// Tabulate `f(mask)` over the configurations of a support (sorted and deduplicated).
    pub fn from_fn(support: impl IntoIterator<Item = Point>, mut f: impl FnMut(u64) -> f64) -> Result<Table> {
        let support = Region::new(crate::lattice::MAX_DIM, support).points().to_vec();
        check_bits("local function table", support.len())?;
        let values = (0..1u64 << support.len()).map(&mut f).collect();
        Ok(Table { support, values })
    }

    pub fn constant(c: f64) -> Table {
        Table { support: Vec::new(), values: vec![c] }
    }

    pub fn support(&self) -> &[Point] {
        &self.support
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn bits(&self) -> usize {
        self.support.len()
    }

    #[inline]
    pub fn at(&self, mask: u64) -> f64 {
        self.values[mask as usize]
    }

    pub fn eval(&self, occ: impl Fn(&Point) -> bool) -> f64 {
        self.values[self.mask_of(|p| occ(p))]
    }

    fn mask_of(&self, occ: impl Fn(&Point) -> bool) -> usize {
        self.support.iter().enumerate().fold(0, |m, (i, p)| m | ((occ(p) as usize) << i))
    }

    /// Re-index onto a sorted superset of the support.
    pub fn extend_to(&self, support: &[Point]) -> Result<Table> {
        check_bits("local function table", support.len())?;
        let pos: Vec<usize> = self
            .support
            .iter()
            .map(|p| {
                support
                    .binary_search(p)
                    .map_err(|_| Error::Domain(alloc::format!("site {p:?} missing from target support")))
            })
            .collect::<Result<_>>()?;
        let values = (0..1u64 << support.len()).map(|m| self.values[project_mask(m, &pos)]).collect();
        Ok(Table { support: support.to_vec(), values })
    }

    /// Drop support sites on which the table does not depend.
    pub fn pruned(&self) -> Table {
        let mut t = self.clone();
        let mut i = 0;
        while i < t.support.len() {
            let bit = 1usize << i;
            let idle = (0..t.values.len()).filter(|m| m & bit == 0).all(|m| t.values[m] == t.values[m | bit]);
            if idle {
                t = t.marginal_at(i, false);
            } else {
                i += 1;
            }
        }
        t
    }

    /// Restrict to the slice where support site `i` is fixed to `occupied`.
    fn marginal_at(&self, i: usize, occupied: bool) -> Table {
        let mut support = self.support.clone();
        support.remove(i);
        let low = (1usize << i) - 1;
        let values = (0..1usize << support.len())
            .map(|m| {
                let full = (m & low) | ((m & !low) << 1) | ((occupied as usize) << i);
                self.values[full]
            })
            .collect();
        Table { support, values }
    }

    pub fn expect_bernoulli(&self, rho: f64) -> f64 {
        let w = bernoulli_weights(self.bits(), rho);
        self.values.iter().zip(&w).map(|(v, w)| v * w).sum()
    }
}

fn check_bits(what: &'static str, bits: usize) -> Result<()> {
    if bits > MAX_TABLE_BITS {
        return Err(Error::Size { what, needed: bits as u64, limit: MAX_TABLE_BITS as u64 });
    }
    Ok(())
}

/// Gather bits of `mask` at positions `pos` into a compact index.
#[inline]
pub(crate) fn project_mask(mask: u64, pos: &[usize]) -> usize {
    pos.iter().enumerate().fold(0, |acc, (j, &p)| acc | ((((mask >> p) & 1) as usize) << j))
}

/// One summand `coef · T(τ_offset η)` of a local function.
#[derive(Clone, Debug)]
pub struct Term {
    pub coef: f64,
    pub offset: Point,
    pub table: Arc<Table>,
}

impl Term {
    pub fn support(&self) -> impl Iterator<Item = Point> + '_ {
        self.table.support.iter().map(move |&p| p + self.offset)
    }

    fn absolute(&self) -> Table {
        Table { support: self.support().collect(), values: self.table.values.iter().map(|v| v * self.coef).collect() }
    }
}

/// A local function F(η): a finite linear combination of translated dense tables.
/// A single table covers supports up to [`MAX_TABLE_BITS`]; larger objects (long
/// affine statistics, spatial averages) stay as sums and are only densified on demand.
#[derive(Clone, Debug, Default)]
pub struct LocalFunction {
    terms: Vec<Term>,
}

impl From<Table> for LocalFunction {
    fn from(t: Table) -> LocalFunction {
        LocalFunction::from_table(t)
    }
}

impl LocalFunction {
    pub fn zero() -> LocalFunction {
        LocalFunction { terms: Vec::new() }
    }

    pub fn constant(c: f64) -> LocalFunction {
        LocalFunction::from_table(Table::constant(c))
    }

    pub fn from_table(t: Table) -> LocalFunction {
        LocalFunction::from_term(1.0, Point::ORIGIN, Arc::new(t))
    }

    pub fn from_term(coef: f64, offset: Point, table: Arc<Table>) -> LocalFunction {
        LocalFunction { terms: vec![Term { coef, offset, table }] }
    }

    /// η_x.
    pub fn occupation(x: Point) -> LocalFunction {
        LocalFunction::from_table(Table { support: vec![x], values: vec![0.0, 1.0] })
    }

    /// η̄_Y = ∏_{x∈Y} (η_x − ρ).
    pub fn centered_product(ys: &[Point], rho: f64) -> Result<LocalFunction> {
        let t = Table::from_fn(ys.iter().copied(), |m| {
            (0..ys.len()).map(|i| if m >> i & 1 == 1 { 1.0 - rho } else { -rho }).product()
        })?;
        Ok(LocalFunction::from_table(t))
    }

    /// ℓ_{ξ,Λ}(η) = Σ_{x∈Λ} (ξ·x) η_x.
    pub fn affine(xi: &[f64], region: &Region) -> LocalFunction {
        let unit = Arc::new(Table { support: vec![Point::ORIGIN], values: vec![0.0, 1.0] });
        let terms = region
            .points()
            .iter()
            .map(|&x| Term { coef: x.dot(xi), offset: x, table: unit.clone() })
            .filter(|t| t.coef != 0.0)
            .collect();
        LocalFunction { terms }
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    /// Union of the term supports, sorted.
    pub fn support(&self) -> Vec<Point> {
        let mut s: Vec<Point> = self.terms.iter().flat_map(|t| t.support()).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// ℓ_u: the least L ≥ 1 such that the function is measurable on Λ_L.
    pub fn support_radius(&self) -> Result<i64> {
        let t = self.to_table()?.pruned();
        Ok(t.support.iter().map(Point::sup_norm).max().unwrap_or(0).max(1))
    }

    pub fn eval(&self, occ: impl Fn(&Point) -> bool) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                let m = t
                    .table
                    .support
                    .iter()
                    .enumerate()
                    .fold(0usize, |m, (i, &p)| m | ((occ(&(p + t.offset)) as usize) << i));
                t.coef * t.table.values[m]
            })
            .sum()
    }

    /// Densify onto the union support (or a larger sorted support).
    pub fn to_table_on(&self, support: &[Point]) -> Result<Table> {
        check_bits("local function table", support.len())?;
        let mut values = vec![0.0; 1 << support.len()];
        for t in &self.terms {
            let ext = t.absolute().extend_to(support)?;
            for (v, e) in values.iter_mut().zip(ext.values) {
                *v += e;
            }
        }
        Ok(Table { support: support.to_vec(), values })
    }

    pub fn to_table(&self) -> Result<Table> {
        self.to_table_on(&self.support())
    }

    /// The single dense table, merged if needed.
    pub fn densify(&self) -> Result<LocalFunction> {
        Ok(LocalFunction::from_table(self.to_table()?))
    }

    pub fn scale(&self, c: f64) -> LocalFunction {
        LocalFunction { terms: self.terms.iter().map(|t| Term { coef: t.coef * c, ..t.clone() }).collect() }
    }

    pub fn add(&self, other: &LocalFunction) -> LocalFunction {
        let mut terms = self.terms.clone();
        terms.extend(other.terms.iter().cloned());
        LocalFunction { terms }
    }

    pub fn sub(&self, other: &LocalFunction) -> LocalFunction {
        self.add(&other.scale(-1.0))
    }

    /// Pointwise product, densified on the union support.
    pub fn mul(&self, other: &LocalFunction) -> Result<LocalFunction> {
        let support = Region::new(crate::lattice::MAX_DIM, self.support().into_iter().chain(other.support()));
        let a = self.to_table_on(support.points())?;
        let b = other.to_table_on(support.points())?;
        let values = a.values.iter().zip(&b.values).map(|(x, y)| x * y).collect();
        Ok(LocalFunction::from_table(Table { support: a.support, values }))
    }

    /// G = τ_x F, that is G(η) = F(τ_x η); the support moves by +x.
    pub fn translate(&self, x: Point) -> LocalFunction {
        LocalFunction { terms: self.terms.iter().map(|t| Term { offset: t.offset + x, ..t.clone() }).collect() }
    }

    /// π_b F(η) = F(η^b) − F(η).
    pub fn kawasaki(&self, b: &Bond) -> Result<LocalFunction> {
        let mut terms = Vec::new();
        for t in &self.terms {
            if !t.support().any(|p| b.contains(&p)) {
                continue;
            }
            let support = Region::new(crate::lattice::MAX_DIM, t.support().chain([b.a, b.b]));
            let ext = t.absolute().extend_to(support.points())?;
            let ia = support.index_of(&b.a).expect("bond endpoint in support");
            let ib = support.index_of(&b.b).expect("bond endpoint in support");
            let values = (0..ext.values.len()).map(|m| ext.values[swap_bits(m, ia, ib)] - ext.values[m]).collect();
            terms.push(Term {
                coef: 1.0,
                offset: Point::ORIGIN,
                table: Arc::new(Table { support: ext.support, values }),
            });
        }
        Ok(LocalFunction { terms })
    }

    /// D_x F = F(η with x occupied) − F(η with x vacant); independent of η_x.
    pub fn glauber(&self, x: &Point) -> LocalFunction {
        let mut terms = Vec::new();
        for t in &self.terms {
            let local = *x - t.offset;
            let Ok(i) = t.table.support.binary_search(&local) else {
                continue;
            };
            let hi = t.table.marginal_at(i, true);
            let lo = t.table.marginal_at(i, false);
            let values = hi.values.iter().zip(&lo.values).map(|(a, b)| a - b).collect();
            terms.push(Term { coef: t.coef, offset: t.offset, table: Arc::new(Table { support: hi.support, values }) });
        }
        LocalFunction { terms }
    }

    /// D_Y F = ∏_{x∈Y} D_x F.
    pub fn glauber_set(&self, ys: &[Point]) -> LocalFunction {
        ys.iter().fold(self.clone(), |f, y| f.glauber(y))
    }

    /// ⟨F⟩_ρ under the product Bernoulli measure.
    pub fn expect_bernoulli(&self, rho: f64) -> f64 {
        self.terms.iter().map(|t| t.coef * t.table.expect_bernoulli(rho)).sum()
    }

    /// ⟨F⟩_{Λ,n}: n particles placed uniformly on the sites of Λ.
    pub fn expect_canonical(&self, region: &Region, n: usize) -> Result<f64> {
        let support = self.support();
        if let Some(p) = support.iter().find(|p| !region.contains(p)) {
            bail!(Domain, "support site {p:?} outside the measured region");
        }
        if n > region.len() {
            bail!(Domain, "{n} particles exceed {} sites", region.len());
        }
        let t = self.to_table_on(&support)?;
        let (size, k) = (region.len(), support.len());
        let total = binomial(size, n);
        let mut e = 0.0;
        for (m, v) in t.values.iter().enumerate() {
            let j = m.count_ones() as usize;
            if j <= n && n - j <= size - k {
                e += v * binomial(size - k, n - j) / total;
            }
        }
        Ok(e)
    }

    /// Cov_ρ(F, G), exploiting the factorization over disjoint supports.
    pub fn covariance(&self, other: &LocalFunction, rho: f64) -> Result<f64> {
        let mut cache: BTreeMap<(usize, usize, Point), f64> = BTreeMap::new();
        let mut total = 0.0;
        for s in &self.terms {
            let (slo, shi) = bounding_box(s);
            for t in &other.terms {
                let (tlo, thi) = bounding_box(t);
                if !boxes_overlap(slo, shi, tlo, thi) {
                    continue;
                }
                let key = (Arc::as_ptr(&s.table) as usize, Arc::as_ptr(&t.table) as usize, t.offset - s.offset);
                let c = match cache.get(&key) {
                    Some(&c) => c,
                    None => {
                        let c = unit_covariance(&s.table, &t.table, key.2, rho)?;
                        cache.insert(key, c);
                        c
                    }
                };
                total += s.coef * t.coef * c;
            }
        }
        Ok(total)
    }

    pub fn variance(&self, rho: f64) -> Result<f64> {
        self.covariance(self, rho)
    }
}

fn bounding_box(t: &Term) -> (Point, Point) {
    let mut lo = Point([i64::MAX; crate::lattice::MAX_DIM]);
    let mut hi = Point([i64::MIN; crate::lattice::MAX_DIM]);
    for p in t.support() {
        for i in 0..crate::lattice::MAX_DIM {
            lo.0[i] = lo.0[i].min(p.0[i]);
            hi.0[i] = hi.0[i].max(p.0[i]);
        }
    }
    (lo, hi)
}

fn boxes_overlap(alo: Point, ahi: Point, blo: Point, bhi: Point) -> bool {
    (0..crate::lattice::MAX_DIM).all(|i| alo.0[i] <= bhi.0[i] && blo.0[i] <= ahi.0[i])
}

/// Cov(A, τ_h B) for unit-coefficient tables.
fn unit_covariance(a: &Table, b: &Table, h: Point, rho: f64) -> Result<f64> {
    let fa = LocalFunction::from_table(a.clone());
    let fb = LocalFunction::from_table(b.clone()).translate(h);
    let overlap = fa.support().iter().any(|p| fb.support().binary_search(p).is_ok());
    if !overlap {
        return Ok(0.0);
    }
    let prod = fa.mul(&fb)?;
    Ok(prod.expect_bernoulli(rho) - fa.expect_bernoulli(rho) * fb.expect_bernoulli(rho))
}

#[inline]
pub(crate) fn swap_bits(m: usize, i: usize, j: usize) -> usize {
    let (bi, bj) = ((m >> i) & 1, (m >> j) & 1);
    if bi == bj {
        m
    } else {
        m ^ ((1 << i) | (1 << j))
    }
}

/// C(n, k) as a float, exact while the value fits in 53 bits.
pub fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    let mut r = 1.0;
    for i in 0..k {
        r = r * (n - i) as f64 / (i + 1) as f64;
    }
    if r < 9.0e15 {
        libm::round(r)
    } else {
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(x: i64) -> Point {
        Point::new(&[x])
    }

    fn eval_mask(f: &LocalFunction, sites: &[Point], mask: u64) -> f64 {
        f.eval(|q| sites.iter().position(|s| s == q).is_some_and(|i| mask >> i & 1 == 1))
    }

    /// E_ρ by explicit enumeration over `sites`.
    fn brute_expect(f: impl Fn(u64) -> f64, k: usize, rho: f64) -> f64 {
        (0..1u64 << k)
            .map(|m| {
                let ones = m.count_ones() as i32;
                f(m) * rho.powi(ones) * (1.0 - rho).powi(k as i32 - ones)
            })
            .sum()
    }

    fn random_table(sites: Vec<Point>, vals: &[f64]) -> LocalFunction {
        let n = 1 << sites.len();
        LocalFunction::from_table(Table::new(sites, vals[..n].to_vec()).unwrap())
    }

    #[test]
    fn kawasaki_examples() {
        let b01 = Bond::new(p(0), p(1));
        let f = LocalFunction::occupation(p(0)).kawasaki(&b01).unwrap();
        let sites = [p(0), p(1)];
        for m in 0..4 {
            let expect = (m >> 1 & 1) as f64 - (m & 1) as f64;
            assert_eq!(eval_mask(&f, &sites, m), expect);
        }
        let g = LocalFunction::occupation(p(2)).kawasaki(&b01).unwrap();
        assert!(g.terms().is_empty());

        let h = LocalFunction::occupation(p(0))
            .mul(&LocalFunction::occupation(p(1)))
            .unwrap()
            .kawasaki(&Bond::new(p(1), p(2)))
            .unwrap();
        let sites = [p(0), p(1), p(2)];
        for m in 0..8u64 {
            let e = |i: u64| (m >> i & 1) as f64;
            assert_eq!(eval_mask(&h, &sites, m), e(0) * (e(2) - e(1)));
        }
    }

    #[test]
    fn glauber_examples() {
        let f = LocalFunction::occupation(p(0));
        assert_eq!(f.glauber(&p(0)).to_table().unwrap().values(), &[1.0]);
        assert_eq!(LocalFunction::occupation(p(1)).glauber(&p(0)).expect_bernoulli(0.3), 0.0);
        let g = f.mul(&LocalFunction::occupation(p(1))).unwrap();
        let d = g.glauber_set(&[p(0), p(1)]).to_table().unwrap();
        assert_eq!(d.values(), &[1.0]);
    }

    #[test]
    fn expectation_examples() {
        let rho = 0.37;
        assert!((LocalFunction::occupation(p(0)).expect_bernoulli(rho) - rho).abs() < 1e-15);
        let c = LocalFunction::centered_product(&[p(0)], rho)
            .unwrap()
            .mul(&LocalFunction::centered_product(&[p(1)], rho).unwrap())
            .unwrap();
        assert!(c.expect_bernoulli(rho).abs() < 1e-15);
        let r = Region::new(1, [p(0), p(1)]);
        let e = LocalFunction::occupation(p(0)).expect_canonical(&r, 1).unwrap();
        assert!((e - 0.5).abs() < 1e-15);
        let bad = LocalFunction::occupation(p(5)).expect_canonical(&r, 1);
        assert!(matches!(bad, Err(Error::Domain(_))));
    }

    #[test]
    fn canonical_matches_enumeration() {
        // η_0 η_2 on 5 sites with 3 particles: C(3,1)/C(5,3) = 3/10
        let r = Region::new(1, (0..5).map(p));
        let f = LocalFunction::occupation(p(0)).mul(&LocalFunction::occupation(p(2))).unwrap();
        let brute: f64 =
            (0..32u64).filter(|m| m.count_ones() == 3).map(|m| ((m & 1) * (m >> 2 & 1)) as f64).sum::<f64>() / 10.0;
        assert!((f.expect_canonical(&r, 3).unwrap() - brute).abs() < 1e-15);
    }

    #[test]
    fn affine_examples() {
        let lam = Region::new(1, [p(0), p(1)]);
        assert!(LocalFunction::affine(&[0.0], &lam).terms().is_empty());
        let f = LocalFunction::affine(&[1.0], &lam);
        for m in 0..4 {
            assert_eq!(eval_mask(&f, &[p(0), p(1)], m), (m >> 1 & 1) as f64);
        }
        // π_{x,x+e_j} ℓ_{e_i} = 1{i=j}(η_x − η_{x+e_j})
        let box2 = crate::lattice::Cube::centered(2, 2).region();
        let x = Point::new(&[0, 1]);
        for i in 0..2 {
            let mut xi = [0.0; 2];
            xi[i] = 1.0;
            let l = LocalFunction::affine(&xi, &box2);
            for j in 0..2 {
                let y = x + Point::unit(j);
                let g = l.kawasaki(&Bond::new(x, y)).unwrap().to_table_on(&[x, y]);
                let g = g.unwrap();
                let want = |m: usize| if i == j { (m & 1) as f64 - (m >> 1 & 1) as f64 } else { 0.0 };
                // support order: x < y in both directions here
                for m in 0..4 {
                    assert!((g.values()[m] - want(m)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn translate_examples() {
        let f = LocalFunction::occupation(p(0));
        assert_eq!(f.translate(Point::ORIGIN).support(), [p(0)]);
        assert_eq!(f.translate(p(1)).support(), [p(1)]);
    }

    #[test]
    fn orthogonality_six_sites() {
        let rho = 0.3;
        let sites: Vec<Point> = (0..6).map(p).collect();
        let chi = chi(rho);
        for y1 in 0..64u32 {
            for y2 in 0..64u32 {
                let pick = |y: u32| -> Vec<Point> { (0..6).filter(|i| y >> i & 1 == 1).map(|i| sites[i]).collect() };
                let a = LocalFunction::centered_product(&pick(y1), rho).unwrap();
                let b = LocalFunction::centered_product(&pick(y2), rho).unwrap();
                let e = a.mul(&b).unwrap().expect_bernoulli(rho);
                let want = if y1 == y2 { chi.powi(y1.count_ones() as i32) } else { 0.0 };
                assert!((e - want).abs() < 1e-14, "{y1} {y2}");
            }
        }
    }

    #[test]
    fn variance_of_sum_matches_dense() {
        let rho = 0.42;
        let u = LocalFunction::occupation(p(0)).mul(&LocalFunction::occupation(p(1))).unwrap();
        let mut avg = LocalFunction::zero();
        for x in -3..=3 {
            avg = avg.add(&u.translate(p(x)).scale(1.0 / 7.0));
        }
        let dense = avg.to_table().unwrap();
        let k = dense.bits();
        let m1 = brute_expect(|m| dense.at(m), k, rho);
        let m2 = brute_expect(|m| dense.at(m).powi(2), k, rho);
        assert!((avg.variance(rho).unwrap() - (m2 - m1 * m1)).abs() < 1e-14);
    }

    #[test]
    fn support_radius_is_minimal() {
        let f = LocalFunction::occupation(p(-2)).add(&LocalFunction::occupation(p(1)));
        assert_eq!(f.support_radius().unwrap(), 2);
        let g = f.add(&LocalFunction::occupation(p(-2)).scale(-1.0));
        assert_eq!(g.support_radius().unwrap(), 1);
        assert_eq!(LocalFunction::constant(3.0).support_radius().unwrap(), 1);
    }

    #[test]
    fn exchange_involution() {
        let mut c = Configuration::from_bits([true, false, true, false]);
        let orig = c.clone();
        c.exchange(0, 1);
        assert_eq!(c.count(), 2);
        assert!(!c.get(0) && c.get(1));
        c.exchange(0, 1);
        assert_eq!(c, orig);
    }

    proptest! {
        #[test]
        fn integration_by_parts(
            k in 1usize..=7,
            vals in proptest::collection::vec(-2.0f64..2.0, 128),
            ysel in 0u32..128,
            rho in 0.05f64..0.95,
        ) {
            let sites: Vec<Point> = (0..k as i64).map(p).collect();
            let f = random_table(sites.clone(), &vals);
            let y: Vec<usize> = (0..k).filter(|i| ysel >> i & 1 == 1).collect();
            let ypts: Vec<Point> = y.iter().map(|&i| sites[i]).collect();
            // left side: E[F η̄_Y] by enumeration
            let lhs = brute_expect(
                |m| {
                    let bar: f64 = y.iter().map(|&i| (m >> i & 1) as f64 - rho).product();
                    vals[m as usize] * bar
                },
                k,
                rho,
            );
            // right side: D_Y F via inclusion-exclusion over the corners of Y
            let dy = |m: u64| -> f64 {
                let mut s = 0.0;
                for corner in 0..1u64 << y.len() {
                    let mut mm = m;
                    for (j, &i) in y.iter().enumerate() {
                        if corner >> j & 1 == 1 { mm |= 1 << i } else { mm &= !(1 << i) }
                    }
                    let sign = if (y.len() as u32 - corner.count_ones()) % 2 == 0 { 1.0 } else { -1.0 };
                    s += sign * vals[mm as usize];
                }
                s
            };
            let rhs_oracle = chi(rho).powi(y.len() as i32) * brute_expect(dy, k, rho);
            let rhs = chi(rho).powi(y.len() as i32) * f.glauber_set(&ypts).expect_bernoulli(rho);
            prop_assert!((lhs - rhs_oracle).abs() < 1e-12);
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }

        #[test]
        fn double_glauber_vanishes(
            vals in proptest::collection::vec(-2.0f64..2.0, 32),
            x in 0i64..5,
        ) {
            let f = random_table((0..5).map(p).collect(), &vals);
            let dd = f.glauber(&p(x)).glauber(&p(x));
            prop_assert!(dd.to_table().unwrap().values().iter().all(|&v| v == 0.0));
            let once = f.glauber(&p(x)).to_table().unwrap();
            prop_assert!(!once.support().contains(&p(x)));
        }

        #[test]
        fn translation_preserves_expectation(
            vals in proptest::collection::vec(-2.0f64..2.0, 16),
            x in -20i64..20,
            rho in 0.0f64..1.0,
        ) {
            let f = random_table((0..4).map(p).collect(), &vals);
            let g = f.translate(p(x));
            prop_assert!((f.expect_bernoulli(rho) - g.expect_bernoulli(rho)).abs() < 1e-12);
        }

        #[test]
        fn kawasaki_is_antisymmetric_under_exchange(
            vals in proptest::collection::vec(-2.0f64..2.0, 16),
            a in 0i64..4,
        ) {
            let f = random_table((0..4).map(p).collect(), &vals);
            let b = Bond::new(p(a), p(a + 1));
            let g = f.kawasaki(&b).unwrap().to_table().unwrap();
            let ia = g.support().iter().position(|q| *q == b.a).unwrap();
            let ib = g.support().iter().position(|q| *q == b.b).unwrap();
            for m in 0..g.values().len() {
                prop_assert!((g.values()[m] + g.values()[swap_bits(m, ia, ib)]).abs() < 1e-12);
            }
        }
    }
}
