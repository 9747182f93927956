//! Finite lattice geometry: points, regions, cubes, tori and bond sets.

use alloc::vec::Vec;
use core::fmt;
use core::ops::{Add, Neg, Sub};

use crate::error::{bail, Error, Result};

/// Largest supported lattice dimension.
pub const MAX_DIM: usize = 4;

/// A point of ℤ^d stored in a fixed-width array; unused coordinates stay zero.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Point(pub [i64; MAX_DIM]);

impl Point {
    pub const ORIGIN: Point = Point([0; MAX_DIM]);

    pub fn new(coords: &[i64]) -> Point {
        assert!(coords.len() <= MAX_DIM, "dimension above MAX_DIM");
        let mut c = [0; MAX_DIM];
        c[..coords.len()].copy_from_slice(coords);
        Point(c)
    }

    /// The i-th unit vector e_i (zero-based).
    pub fn unit(i: usize) -> Point {
        let mut c = [0; MAX_DIM];
        c[i] = 1;
        Point(c)
    }

    pub fn coord(&self, i: usize) -> i64 {
        self.0[i]
    }

    pub fn sup_norm(&self) -> i64 {
        self.0.iter().map(|c| c.abs()).max().unwrap_or(0)
    }

    pub fn l1_norm(&self) -> i64 {
        self.0.iter().map(|c| c.abs()).sum()
    }

    pub fn dot(&self, xi: &[f64]) -> f64 {
        xi.iter().zip(self.0.iter()).map(|(a, &c)| a * c as f64).sum()
    }

    pub fn is_neighbor(&self, other: &Point) -> bool {
        (*self - *other).l1_norm() == 1
    }

    /// Strictly positive in the lexicographic order (first nonzero coordinate > 0).
    pub fn is_positive(&self) -> bool {
        self.0.iter().find(|&&c| c != 0).is_some_and(|&c| c > 0)
    }
}

impl fmt::Debug for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let last = self.0.iter().rposition(|&c| c != 0).map_or(1, |i| i + 1);
        f.debug_list().entries(&self.0[..last]).finish()
    }
}

impl Add for Point {
    type Output = Point;
    fn add(self, o: Point) -> Point {
        let mut c = self.0;
        for (a, b) in c.iter_mut().zip(o.0) {
            *a += b;
        }
        Point(c)
    }
}

impl Sub for Point {
    type Output = Point;
    fn sub(self, o: Point) -> Point {
        let mut c = self.0;
        for (a, b) in c.iter_mut().zip(o.0) {
            *a -= b;
        }
        Point(c)
    }
}

impl Neg for Point {
    type Output = Point;
    fn neg(self) -> Point {
        Point(self.0.map(|c| -c))
    }
}

/// An unordered nearest-neighbour pair stored with `a < b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Bond {
    pub a: Point,
    pub b: Point,
}

impl Bond {
    pub fn new(x: Point, y: Point) -> Bond {
        if x <= y {
            Bond { a: x, b: y }
        } else {
            Bond { a: y, b: x }
        }
    }

    /// Coordinate direction of the bond, if it is a nearest-neighbour bond.
    pub fn direction(&self) -> Option<usize> {
        let d = self.b - self.a;
        if d.l1_norm() != 1 {
            return None;
        }
        d.0.iter().position(|&c| c != 0)
    }

    pub fn translate(&self, x: Point) -> Bond {
        Bond::new(self.a + x, self.b + x)
    }

    pub fn contains(&self, x: &Point) -> bool {
        self.a == *x || self.b == *x
    }
}

/// A finite set of lattice points in canonical (sorted) order.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Region {
    dim: usize,
    points: Vec<Point>,
}

impl Region {
    pub fn new(dim: usize, points: impl IntoIterator<Item = Point>) -> Region {
        assert!((1..=MAX_DIM).contains(&dim), "dimension out of range");
        let mut points: Vec<Point> = points.into_iter().collect();
        points.sort_unstable();
        points.dedup();
        Region { dim, points }
    }

    pub fn empty(dim: usize) -> Region {
        Region::new(dim, [])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn contains(&self, x: &Point) -> bool {
        self.points.binary_search(x).is_ok()
    }

    pub fn index_of(&self, x: &Point) -> Option<usize> {
        self.points.binary_search(x).ok()
    }

    pub fn union(&self, other: &Region) -> Region {
        Region::new(self.dim, self.points.iter().chain(other.points.iter()).copied())
    }

    pub fn is_subset(&self, other: &Region) -> bool {
        self.points.iter().all(|x| other.contains(x))
    }

    pub fn translate(&self, x: Point) -> Region {
        Region::new(self.dim, self.points.iter().map(|&p| p + x))
    }

    /// ∂Λ: points with at least one nearest neighbour outside.
    pub fn boundary(&self) -> Region {
        let pts = self.points.iter().copied().filter(|x| {
            (0..self.dim).any(|i| {
                let e = Point::unit(i);
                !self.contains(&(*x + e)) || !self.contains(&(*x - e))
            })
        });
        Region::new(self.dim, pts)
    }

    /// Λ⁻ = Λ \ ∂Λ.
    pub fn interior(&self) -> Region {
        let boundary = self.boundary();
        Region::new(self.dim, self.points.iter().copied().filter(|x| !boundary.contains(x)))
    }

    /// Λ*: nearest-neighbour pairs with both ends in Λ.
    pub fn bonds(&self) -> Vec<Bond> {
        let mut out = Vec::new();
        for &x in &self.points {
            for i in 0..self.dim {
                let y = x + Point::unit(i);
                if self.contains(&y) {
                    out.push(Bond::new(x, y));
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// The enlarged bond set {x, x+e_i} for x ∈ Λ, of size d·|Λ|.
    pub fn enlarged_bonds(&self) -> Vec<Bond> {
        let mut out: Vec<Bond> =
            self.points.iter().flat_map(|&x| (0..self.dim).map(move |i| Bond::new(x, x + Point::unit(i)))).collect();
        out.sort_unstable();
        out
    }

    /// Λ⁺ = Λ ∪ ⋃_i (Λ + e_i).
    pub fn plus(&self) -> Region {
        let shifted = (0..self.dim).flat_map(|i| self.points.iter().map(move |&x| x + Point::unit(i)));
        Region::new(self.dim, self.points.iter().copied().chain(shifted))
    }

    /// Minkowski sum with the cube Λ_r.
    pub fn dilate(&self, r: i64) -> Region {
        let ball = Cube::centered(self.dim, r).points();
        let mut pts = Vec::with_capacity(self.points.len() * ball.len());
        for &x in &self.points {
            pts.extend(ball.iter().map(|&y| x + y));
        }
        Region::new(self.dim, pts)
    }

    /// Smallest L with Λ ⊆ Λ_L (zero for the empty set).
    pub fn radius(&self) -> i64 {
        self.points.iter().map(Point::sup_norm).max().unwrap_or(0)
    }
}

/// An axis-aligned cube with odd side 2L+1 around `center`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cube {
    pub dim: usize,
    pub center: Point,
    pub half_side: i64,
}

impl Cube {
    pub fn new(dim: usize, center: Point, half_side: i64) -> Cube {
        assert!((1..=MAX_DIM).contains(&dim), "dimension out of range");
        assert!(half_side >= 0, "negative half side");
        Cube { dim, center, half_side }
    }

    /// Λ_L = {x : |x|_∞ ≤ L}.
    pub fn centered(dim: usize, half_side: i64) -> Cube {
        Cube::new(dim, Point::ORIGIN, half_side)
    }

    /// The triadic cube □_m of side 3^m centred at the origin.
    pub fn triadic(dim: usize, m: u32) -> Cube {
        Cube::centered(dim, (3i64.pow(m) - 1) / 2)
    }

    pub fn side(&self) -> i64 {
        2 * self.half_side + 1
    }

    pub fn volume(&self) -> usize {
        (self.side() as usize).pow(self.dim as u32)
    }

    pub fn contains(&self, x: &Point) -> bool {
        (*x - self.center).sup_norm() <= self.half_side
    }

    pub fn points(&self) -> Vec<Point> {
        let side = self.side();
        let mut out = Vec::with_capacity(self.volume());
        let mut offset = [0i64; MAX_DIM];
        loop {
            let mut c = self.center.0;
            for i in 0..self.dim {
                c[i] += offset[i] - self.half_side;
            }
            out.push(Point(c));
            // odometer increment, last axis fastest so the output is sorted
            let mut i = self.dim;
            loop {
                if i == 0 {
                    return out;
                }
                i -= 1;
                offset[i] += 1;
                if offset[i] < side {
                    break;
                }
                offset[i] = 0;
            }
        }
    }

    pub fn region(&self) -> Region {
        Region::new(self.dim, self.points())
    }
}

/// The periodic box (ℤ/Nℤ)^d. Sites are numbered so that increasing site index
/// matches the lexicographic order of coordinates in [0, N)^d.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Torus {
    dim: usize,
    side: usize,
    volume: usize,
}

impl Torus {
    /// Sides 2 are accepted (each neighbour then appears through two bonds); sides ≥ 3
    /// give 2d distinct neighbours per site.
    pub fn new(dim: usize, side: usize) -> Result<Torus> {
        if !(1..=MAX_DIM).contains(&dim) {
            bail!(Config, "dimension {dim} outside 1..={MAX_DIM}");
        }
        if side < 2 {
            bail!(Config, "torus side {side} below 2");
        }
        let volume = side.checked_pow(dim as u32).filter(|&v| v <= u32::MAX as usize).ok_or(Error::Size {
            what: "torus volume",
            needed: u64::MAX,
            limit: u32::MAX as u64,
        })?;
        Ok(Torus { dim, side, volume })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn volume(&self) -> usize {
        self.volume
    }

    pub fn coords(&self, site: usize) -> Point {
        let mut c = [0i64; MAX_DIM];
        let mut s = site;
        for ci in c[..self.dim].iter_mut().rev() {
            *ci = (s % self.side) as i64;
            s /= self.side;
        }
        Point(c)
    }

    /// The site of a lattice point, wrapping periodically.
    pub fn site(&self, x: Point) -> usize {
        let n = self.side as i64;
        let mut s = 0usize;
        for &xi in &x.0[..self.dim] {
            s = s * self.side + xi.rem_euclid(n) as usize;
        }
        s
    }

    pub fn shift(&self, site: usize, offset: Point) -> usize {
        self.site(self.coords(site) + offset)
    }

    /// The 2d neighbours of a site, ordered +e_1, −e_1, +e_2, ...
    pub fn neighbors(&self, site: usize) -> Vec<usize> {
        (0..self.dim)
            .flat_map(|i| {
                let e = Point::unit(i);
                [self.shift(site, e), self.shift(site, -e)]
            })
            .collect()
    }

    /// Representative of x modulo N with coordinates in (−N/2, N/2].
    pub fn min_image(&self, x: Point) -> Point {
        let n = self.side as i64;
        let mut c = x.0;
        for ci in c.iter_mut().take(self.dim) {
            let r = ci.rem_euclid(n);
            *ci = if r > n / 2 { r - n } else { r };
        }
        Point(c)
    }

    /// Directed bonds (x, x+e_i, i) over all sites and directions; d·N^d entries.
    pub fn bonds(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::with_capacity(self.dim * self.volume);
        for x in 0..self.volume {
            for i in 0..self.dim {
                out.push((x, self.shift(x, Point::unit(i)), i));
            }
        }
        out
    }

    /// Centres of the triadic cubes 3^m ℤ^d that tile the torus.
    pub fn triadic_centers(&self, m: u32) -> Result<Vec<usize>> {
        let step = 3usize.pow(m);
        if self.side % step != 0 {
            bail!(Config, "torus side {} not divisible by 3^{m}", self.side);
        }
        let per_axis = self.side / step;
        let mut out = Vec::with_capacity(per_axis.pow(self.dim as u32));
        for k in 0..per_axis.pow(self.dim as u32) {
            let mut c = [0i64; MAX_DIM];
            let mut r = k;
            for ci in c.iter_mut().take(self.dim) {
                *ci = ((r % per_axis) * step) as i64;
                r /= per_axis;
            }
            out.push(self.site(Point(c)));
        }
        out.sort_unstable();
        Ok(out)
    }

    /// Torus sites of the cube translated to a site.
    pub fn cube_sites(&self, center: usize, cube: &Cube) -> Vec<usize> {
        let c = self.coords(center);
        cube.points().into_iter().map(|p| self.site(p + c - cube.center)).collect()
    }
}
