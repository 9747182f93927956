//! Jump-rate families c_b(η): validation against the standing hypotheses
//! (ellipticity, symmetry, endpoint insensitivity) and tabulation for fast lookup.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt;

use nalgebra::{DMatrix, DVector};

use crate::configspace::project_mask;
use crate::error::{bail, Error, Result};
use crate::lattice::{Bond, Cube, Point, Region};

/// Largest window (in sites) that validation enumerates.
pub const MAX_WINDOW_BITS: usize = 24;

/// Rule signature: direction e (a signed unit vector) and a reader of the
/// occupations at offsets relative to the bond origin.
pub type RuleFn = dyn Fn(Point, &dyn Fn(Point) -> bool) -> f64 + Send + Sync;

/// An unvalidated rate rule c_{0,e}(η).
#[derive(Clone)]
pub struct RateRule {
    name: String,
    dim: usize,
    range: i64,
    lambda: f64,
    rule: Arc<RuleFn>,
    /// The rule reads no sites besides the endpoints (constant rates).
    endpoints_only: bool,
}

impl fmt::Debug for RateRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RateRule")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("range", &self.range)
            .field("lambda", &self.lambda)
            .finish()
    }
}

/// Which condition a counterexample breaks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Violation {
    /// Rate outside [1, λ].
    Bounds,
    /// c_{x,y} ≠ c_{y,x}.
    Symmetry,
    /// Rate depends on the occupation of a bond endpoint.
    EndpointDependence,
}

/// A window configuration on which a rule fails.
#[derive(Clone, Debug, PartialEq)]
pub struct Counterexample {
    pub violation: Violation,
    pub direction: Point,
    /// Occupied sites of the window, relative to the bond origin.
    pub occupied: Vec<Point>,
    pub rate: f64,
    pub other_rate: Option<f64>,
}

impl fmt::Display for Counterexample {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:?} violated for direction {:?}, occupied {:?}: rate {}",
            self.violation, self.direction, self.occupied, self.rate
        )?;
        if let Some(o) = self.other_rate {
            write!(f, " vs {o}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationReport {
    pub window_sites: usize,
    pub configurations_checked: u64,
    pub min_rate: f64,
    pub max_rate: f64,
    pub counterexample: Option<Counterexample>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.counterexample.is_none()
    }
}

impl RateRule {
    pub fn custom(
        name: &str,
        dim: usize,
        range: i64,
        lambda: f64,
        rule: impl Fn(Point, &dyn Fn(Point) -> bool) -> f64 + Send + Sync + 'static,
    ) -> Result<RateRule> {
        if !(1..=crate::lattice::MAX_DIM).contains(&dim) {
            bail!(Config, "dimension {dim} out of range");
        }
        if range < 1 {
            bail!(Config, "range must be at least 1, got {range}");
        }
        if !(lambda >= 1.0) || !lambda.is_finite() {
            bail!(Config, "ellipticity bound must be a finite value ≥ 1, got {lambda}");
        }
        Ok(RateRule { name: name.to_string(), dim, range, lambda, rule: Arc::new(rule), endpoints_only: false })
    }

    /// c ≡ 1.
    pub fn ssep(dim: usize) -> RateRule {
        let mut rule = RateRule::custom("ssep", dim, 1, 1.0, |_, _| 1.0).expect("valid builtin");
        rule.endpoints_only = true;
        rule
    }

    /// c_{x,x+e} = 1 + a Σ_{z∈W} η_z, W the range-1 window minus both endpoints.
    pub fn neighbor_weighted(dim: usize, a: f64) -> Result<RateRule> {
        if !(0.0..=1.0).contains(&a) {
            bail!(Config, "neighbor_weighted parameter a={a} outside [0, 1]");
        }
        let cube = Cube::centered(dim, 1).points();
        let others = window(dim, 1, Point::unit(0)).len() - 2;
        let lambda = 1.0 + a * others as f64;
        RateRule::custom("neighbor_weighted", dim, 1, lambda, move |e, occ| {
            let mut w: Vec<Point> = cube.iter().flat_map(|&p| [p, p + e]).collect();
            w.sort_unstable();
            w.dedup();
            let n = w.iter().filter(|&&z| z != Point::ORIGIN && z != e && occ(z)).count();
            1.0 + a * n as f64
        })
    }

    /// Parse `kind=ssep` or `kind=neighbor_weighted,a=0.5`.
    pub fn parse(spec: &str, dim: usize) -> Result<RateRule> {
        let mut kind = None;
        let mut a = None;
        for part in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (k, v) =
                part.split_once('=').ok_or_else(|| Error::Config(format!("malformed rate parameter '{part}'")))?;
            match k.trim() {
                "kind" => kind = Some(v.trim().to_string()),
                "a" => {
                    a = Some(
                        v.trim()
                            .parse::<f64>()
                            .map_err(|_| Error::Config(format!("rate parameter a='{v}' is not a number")))?,
                    )
                }
                other => bail!(Config, "unknown rate parameter '{other}'"),
            }
        }
        match kind.as_deref() {
            Some("ssep") => {
                if a.is_some() {
                    bail!(Config, "ssep takes no parameters");
                }
                Ok(RateRule::ssep(dim))
            }
            Some("neighbor_weighted") => RateRule::neighbor_weighted(
                dim,
                a.ok_or_else(|| Error::Config("neighbor_weighted needs a=<value>".to_string()))?,
            ),
            Some(k) => bail!(Config, "unknown rate family '{k}'"),
            None => bail!(Config, "rate spec '{spec}' lacks kind=..."),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn range(&self) -> i64 {
        self.range
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    fn eval_window(&self, e: Point, sites: &[Point], mask: u64) -> f64 {
        (self.rule)(e, &|z| {
            sites
                .binary_search(&z)
                .map(|i| mask >> i & 1 == 1)
                .unwrap_or_else(|_| panic!("rule read {z:?} outside its window"))
        })
    }

    /// Sites enumerated for direction e.
    fn window_for(&self, e: Point) -> Vec<Point> {
        if self.endpoints_only {
            let mut w = alloc::vec![Point::ORIGIN, e];
            w.sort_unstable();
            w
        } else {
            window(self.dim, self.range, e)
        }
    }

    fn directions(&self) -> impl Iterator<Item = Point> + '_ {
        (0..self.dim).flat_map(|i| [Point::unit(i), -Point::unit(i)])
    }

    /// Exhaustively check bounds, symmetry and endpoint insensitivity.
    pub fn validate(&self) -> Result<ValidationReport> {
        let probe = self.window_for(Point::unit(0));
        if probe.len() > MAX_WINDOW_BITS {
            bail!(Unsupported, "window of {} sites exceeds {MAX_WINDOW_BITS} bits", probe.len());
        }
        let mut report = ValidationReport {
            window_sites: probe.len(),
            configurations_checked: 0,
            min_rate: f64::INFINITY,
            max_rate: f64::NEG_INFINITY,
            counterexample: None,
        };
        for e in self.directions() {
            let sites = self.window_for(e);
            let occupied = |mask: u64| -> Vec<Point> {
                (0..sites.len()).filter(|&i| mask >> i & 1 == 1).map(|i| sites[i]).collect()
            };
            let i0 = sites.binary_search(&Point::ORIGIN).expect("origin in window");
            let ie = sites.binary_search(&e).expect("endpoint in window");
            // the reverse direction reads η shifted by e over the same sites
            let rev_sites: Vec<Point> = sites.iter().map(|&z| z - e).collect();
            for mask in 0..1u64 << sites.len() {
                report.configurations_checked += 1;
                let c = self.eval_window(e, &sites, mask);
                report.min_rate = report.min_rate.min(c);
                report.max_rate = report.max_rate.max(c);
                let fail = |violation, other_rate| Counterexample {
                    violation,
                    direction: e,
                    occupied: occupied(mask),
                    rate: c,
                    other_rate,
                };
                if !(1.0..=self.lambda).contains(&c) {
                    report.counterexample = Some(fail(Violation::Bounds, None));
                    return Ok(report);
                }
                for flip in [i0, ie] {
                    let c2 = self.eval_window(e, &sites, mask ^ (1 << flip));
                    if c2 != c {
                        report.counterexample = Some(fail(Violation::EndpointDependence, Some(c2)));
                        return Ok(report);
                    }
                }
                let c_rev = (self.rule)(-e, &|z| {
                    let i =
                        rev_sites.binary_search(&z).unwrap_or_else(|_| panic!("rule read {z:?} outside its window"));
                    mask >> i & 1 == 1
                });
                if c_rev != c {
                    report.counterexample = Some(fail(Violation::Symmetry, Some(c_rev)));
                    return Ok(report);
                }
            }
        }
        Ok(report)
    }
}

/// Λ_r(0) ∪ Λ_r(e), sorted.
pub fn window(dim: usize, range: i64, e: Point) -> Vec<Point> {
    let cube = Cube::centered(dim, range).region();
    cube.union(&cube.translate(e)).points().to_vec()
}

/// Rates of the bond (0, e_i) tabulated over the sites the rule actually reads.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionTable {
    /// Effective window sites, relative to the bond origin.
    pub sites: Vec<Point>,
    /// Rate for each bit pattern over `sites`.
    pub rates: Vec<f64>,
}

/// A validated, tabulated rate family.
#[derive(Clone, Debug)]
pub struct RateFamily {
    rule: RateRule,
    tables: Vec<DirectionTable>,
    report: ValidationReport,
}

impl RateFamily {
    /// Validate and tabulate; a failing rule becomes a domain error naming the counterexample.
    pub fn new(rule: RateRule) -> Result<RateFamily> {
        let report = rule.validate()?;
        if let Some(ce) = &report.counterexample {
            bail!(Domain, "rate family '{}' rejected: {ce}", rule.name);
        }
        let tables = (0..rule.dim).map(|i| tabulate(&rule, Point::unit(i))).collect();
        Ok(RateFamily { rule, tables, report })
    }

    pub fn ssep(dim: usize) -> RateFamily {
        RateFamily::new(RateRule::ssep(dim)).expect("valid builtin")
    }

    pub fn neighbor_weighted(dim: usize, a: f64) -> Result<RateFamily> {
        RateFamily::new(RateRule::neighbor_weighted(dim, a)?)
    }

    pub fn parse(spec: &str, dim: usize) -> Result<RateFamily> {
        RateFamily::new(RateRule::parse(spec, dim)?)
    }

    pub fn rule(&self) -> &RateRule {
        &self.rule
    }

    pub fn name(&self) -> &str {
        &self.rule.name
    }

    pub fn dim(&self) -> usize {
        self.rule.dim
    }

    pub fn range(&self) -> i64 {
        self.rule.range
    }

    pub fn lambda(&self) -> f64 {
        self.rule.lambda
    }

    pub fn report(&self) -> &ValidationReport {
        &self.report
    }

    pub fn table(&self, i: usize) -> &DirectionTable {
        &self.tables[i]
    }

    /// True when every rate equals 1.
    pub fn is_constant(&self) -> bool {
        self.tables.iter().all(|t| t.rates.iter().all(|&c| c == self.tables[0].rates[0]))
    }

    /// c_b(η) for a nearest-neighbour bond.
    pub fn rate(&self, bond: &Bond, occ: impl Fn(&Point) -> bool) -> f64 {
        let i = bond.direction().expect("nearest-neighbour bond");
        let t = &self.tables[i];
        let idx = t.sites.iter().enumerate().fold(0usize, |m, (j, &z)| m | ((occ(&(bond.a + z)) as usize) << j));
        t.rates[idx]
    }

    /// Union of the sites read by c_b.
    pub fn dependency(&self, bond: &Bond) -> Vec<Point> {
        let i = bond.direction().expect("nearest-neighbour bond");
        self.tables[i].sites.iter().map(|&z| bond.a + z).collect()
    }
}

fn tabulate(rule: &RateRule, e: Point) -> DirectionTable {
    let sites = rule.window_for(e);
    let n = sites.len();
    let full: Vec<f64> = (0..1u64 << n).map(|m| rule.eval_window(e, &sites, m)).collect();
    let effective: Vec<usize> = (0..n).filter(|&i| (0..full.len()).any(|m| full[m] != full[m ^ (1 << i)])).collect();
    let rates = (0..1u64 << effective.len())
        .map(|m| {
            let mut mask = 0usize;
            for (j, &i) in effective.iter().enumerate() {
                mask |= ((m >> j & 1) as usize) << i;
            }
            full[mask]
        })
        .collect();
    DirectionTable { sites: effective.iter().map(|&i| sites[i]).collect(), rates }
}

/// Outcome of the least-squares search for a gradient representation
/// c_{0,e}(η)(η_e − η_0) = τ_e h − h with h measurable on Λ_L.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientWitness {
    pub unknowns: usize,
    pub equations: usize,
    /// Root-mean-square residual of the best h over all configurations.
    pub residual: f64,
}

impl GradientWitness {
    pub fn is_gradient(&self, tol: f64) -> bool {
        self.residual <= tol
    }
}

/// Least-squares gradient search in d = 1 along e_1 with h on Λ_half.
pub fn gradient_witness(rf: &RateFamily, half: i64) -> Result<GradientWitness> {
    if rf.dim() != 1 {
        bail!(Unsupported, "gradient search implemented for d = 1 only");
    }
    let e = Point::unit(0);
    let h_sites = Cube::centered(1, half).points();
    let bond = Bond::new(Point::ORIGIN, e);
    let all =
        Region::new(1, h_sites.iter().flat_map(|&p| [p, p + e]).chain(rf.dependency(&bond)).chain([Point::ORIGIN, e]));
    let n = all.len();
    if n > 16 || h_sites.len() > 12 {
        bail!(Unsupported, "gradient search space too large ({n} sites)");
    }
    let pos = |pts: &mut dyn Iterator<Item = Point>| -> Vec<usize> {
        pts.map(|p| all.index_of(&p).expect("site in region")).collect()
    };
    let h_pos = pos(&mut h_sites.iter().copied());
    let sh_pos = pos(&mut h_sites.iter().map(|&p| p + e));
    let (i0, ie) = (all.index_of(&Point::ORIGIN).unwrap(), all.index_of(&e).unwrap());
    let rows = 1usize << n;
    let cols = 1usize << h_sites.len();
    let mut a = DMatrix::<f64>::zeros(rows, cols);
    let mut rhs = DVector::<f64>::zeros(rows);
    for m in 0..rows as u64 {
        let r = m as usize;
        a[(r, project_mask(m, &sh_pos))] += 1.0;
        a[(r, project_mask(m, &h_pos))] -= 1.0;
        let c = rf.rate(&bond, |p| m >> all.index_of(p).unwrap() & 1 == 1);
        rhs[r] = c * ((m >> ie & 1) as f64 - (m >> i0 & 1) as f64);
    }
    let svd = a.clone().svd(true, true);
    let h = svd.solve(&rhs, 1e-10).map_err(|e| Error::Domain(format!("least squares failed: {e}")))?;
    let res = (a * h - rhs).norm() / libm::sqrt(rows as f64);
    Ok(GradientWitness { unknowns: cols, equations: rows, residual: res })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(x: i64) -> Point {
        Point::new(&[x])
    }

    #[test]
    fn ssep_passes() {
        let rf = RateFamily::ssep(1);
        assert!(rf.report().passed());
        assert!(rf.table(0).sites.is_empty());
        assert_eq!(rf.rate(&Bond::new(p(3), p(4)), |_| true), 1.0);
        assert!(rf.is_constant());
    }

    #[test]
    fn neighbor_weighted_d1() {
        let rule = RateRule::neighbor_weighted(1, 0.5).unwrap();
        assert_eq!(rule.lambda(), 2.0);
        let report = rule.validate().unwrap();
        assert!(report.passed());
        assert_eq!(report.min_rate, 1.0);
        assert_eq!(report.max_rate, 2.0);
        let rf = RateFamily::new(rule).unwrap();
        assert_eq!(rf.table(0).sites, [p(-1), p(2)]);
        // oracle: 1 + a(η_{x−1} + η_{x+2}) over all 16 window configurations
        for m in 0..16u64 {
            let occ = |q: &Point| {
                let i = q.coord(0) - 9;
                (0..4).contains(&i) && m >> i & 1 == 1
            };
            let want = 1.0 + 0.5 * ((m & 1) + (m >> 3 & 1)) as f64;
            assert_eq!(rf.rate(&Bond::new(p(10), p(11)), occ), want);
        }
        assert_eq!(rf.rate(&Bond::new(p(0), p(1)), |_| true), 2.0);
        assert_eq!(rf.rate(&Bond::new(p(0), p(1)), |_| false), 1.0);
    }

    #[test]
    fn neighbor_weighted_d2_lambda() {
        let rf = RateFamily::neighbor_weighted(2, 0.1).unwrap();
        assert!((rf.lambda() - 2.0).abs() < 1e-12);
        assert_eq!(rf.table(0).sites.len(), 10);
        assert_eq!(rf.table(1).sites.len(), 10);
    }

    #[test]
    fn endpoint_dependent_rule_fails() {
        let rule = RateRule::custom("bad", 1, 1, 2.0, |_, occ| 1.0 + occ(Point::ORIGIN) as u8 as f64).unwrap();
        let report = rule.validate().unwrap();
        let ce = report.counterexample.unwrap();
        assert_eq!(ce.violation, Violation::EndpointDependence);
        assert!(matches!(RateFamily::new(rule), Err(Error::Domain(_))));
    }

    #[test]
    fn asymmetric_rule_fails() {
        // reads only the site behind the origin, so c_{x,y} ≠ c_{y,x}
        let rule = RateRule::custom("skew", 1, 1, 2.0, |e, occ| 1.0 + occ(-e) as u8 as f64).unwrap();
        let ce = rule.validate().unwrap().counterexample.unwrap();
        assert!(matches!(ce.violation, Violation::Symmetry));
        let rule =
            RateRule::custom("sym", 1, 1, 3.0, |e, occ| 1.0 + occ(-e) as u8 as f64 + occ(e + e) as u8 as f64).unwrap();
        assert!(rule.validate().unwrap().passed());
    }

    #[test]
    fn bound_violation() {
        let rule = RateRule::custom("fast", 1, 1, 1.5, |_, occ| 1.0 + occ(p(-1)) as u8 as f64).unwrap();
        let ce = rule.validate().unwrap().counterexample.unwrap();
        assert_eq!(ce.violation, Violation::Bounds);
        assert_eq!(ce.rate, 2.0);
    }

    #[test]
    fn oversized_window() {
        let rule = RateRule::custom("wide", 3, 1, 1.0, |_, _| 1.0).unwrap();
        assert!(matches!(rule.validate(), Err(Error::Unsupported(_))));
    }

    #[test]
    fn parse_specs() {
        let rf = RateFamily::parse("kind=neighbor_weighted, a=0.5", 1).unwrap();
        assert_eq!(rf.lambda(), 2.0);
        assert!(RateFamily::parse("kind=ssep", 2).unwrap().is_constant());
        for bad in ["kind=foo", "a=0.5", "kind=neighbor_weighted,a=x", "kind=neighbor_weighted,a=2", "kind"] {
            assert!(matches!(RateRule::parse(bad, 1), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn gradient_search() {
        let ssep = gradient_witness(&RateFamily::ssep(1), 2).unwrap();
        assert!(ssep.is_gradient(1e-10));
        // in d = 1 this rule is a gradient: h = η_0 + a(η_{-1}η_0 + η_0η_1 − η_{-1}η_1)
        let nw = gradient_witness(&RateFamily::neighbor_weighted(1, 0.5).unwrap(), 2).unwrap();
        assert_eq!(nw.unknowns, 32);
        assert!(nw.is_gradient(1e-10), "residual {}", nw.residual);
        let prod =
            RateRule::custom("product", 1, 1, 1.5, |e, occ| 1.0 + 0.5 * (occ(-e) && occ(e + e)) as u8 as f64).unwrap();
        let w = gradient_witness(&RateFamily::new(prod).unwrap(), 2).unwrap();
        assert!(!w.is_gradient(1e-6), "residual {}", w.residual);
    }

    #[test]
    fn explicit_gradient_for_neighbor_weighted() {
        let a = 0.5;
        let rf = RateFamily::neighbor_weighted(1, a).unwrap();
        let h = |m: u64, x: i64| {
            let e = |y: i64| (m >> (y + 3) & 1) as f64;
            e(x) + a * (e(x - 1) * e(x) + e(x) * e(x + 1) - e(x - 1) * e(x + 1))
        };
        for m in 0..1u64 << 7 {
            let occ = |q: &Point| m >> (q.coord(0) + 3) & 1 == 1;
            let c = rf.rate(&Bond::new(p(0), p(1)), occ);
            let lhs = c * ((m >> 4 & 1) as f64 - (m >> 3 & 1) as f64);
            assert!((lhs - (h(m, 1) - h(m, 0))).abs() < 1e-15);
        }
    }

    static NW1: std::sync::LazyLock<RateFamily> =
        std::sync::LazyLock::new(|| RateFamily::neighbor_weighted(1, 0.7).unwrap());
    static NW2: std::sync::LazyLock<RateFamily> =
        std::sync::LazyLock::new(|| RateFamily::neighbor_weighted(2, 0.3).unwrap());

    proptest! {
        #[test]
        fn translation_covariance(z in -50i64..50, bits in any::<u64>()) {
            let rf = &*NW1;
            let occ = |q: &Point| bits >> (q.coord(0).rem_euclid(64)) & 1 == 1;
            let shifted = |q: &Point| occ(&(*q - p(z)));
            let b = Bond::new(p(5), p(6));
            prop_assert_eq!(rf.rate(&b, occ), rf.rate(&b.translate(p(z)), shifted));
        }

        #[test]
        fn translation_covariance_d2(z0 in -9i64..9, z1 in -9i64..9, seed in any::<u64>()) {
            let rf = &*NW2;
            let occ = |q: &Point| {
                let k = (q.coord(0) as u64).wrapping_mul(31).wrapping_add((q.coord(1) as u64).wrapping_mul(7)).wrapping_add(3);
                (seed.wrapping_mul(k) >> 40) & 1 == 1
            };
            let z = Point::new(&[z0, z1]);
            for i in 0..2 {
                let b = Bond::new(Point::ORIGIN, Point::unit(i));
                let c1 = rf.rate(&b, occ);
                let c2 = rf.rate(&b.translate(z), |q: &Point| occ(&(*q - z)));
                prop_assert_eq!(c1, c2);
            }
        }
    }
}
