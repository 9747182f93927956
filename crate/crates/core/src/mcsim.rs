//! Rejection kinetic Monte Carlo on the torus, the stationary two-point
//! estimator of Var_ρ[P_t u], and the spatial average R_K with its schedule.

use alloc::vec;
use alloc::vec::Vec;

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use crate::configspace::LocalFunction;
use crate::error::{bail, Error, Result};
use crate::lattice::{Cube, Point, Torus};
use crate::rates::RateFamily;

/// Upper bound on (2K+1)^d translates in R_K.
pub const MAX_TRANSLATES: usize = 1 << 20;

/// Shared, read-only data of the dynamics on one torus.
#[derive(Clone, Debug)]
pub struct Simulator {
    torus: Torus,
    rf: RateFamily,
    lambda: f64,
    /// Per bond, in `Torus::bonds` order: x, y, table offset, window sites.
    records: Vec<u32>,
    stride: usize,
    dirs: Vec<u8>,
    /// Acceptance thresholds ⌊c/λ · 2³²⌋, one block of 2^width per direction.
    thresholds: Vec<u64>,
}

impl Simulator {
    pub fn new(torus: &Torus, rf: &RateFamily) -> Result<Simulator> {
        if torus.dim() != rf.dim() {
            bail!(Config, "rate family of dimension {} on a torus of dimension {}", rf.dim(), torus.dim());
        }
        if torus.volume() > u32::MAX as usize / 2 {
            return Err(Error::Size { what: "torus sites", needed: torus.volume() as u64, limit: u32::MAX as u64 / 2 });
        }
        if 2 * rf.range() + 2 > torus.side() as i64 {
            bail!(Domain, "torus side {} too small for rate range {}", torus.side(), rf.range());
        }
        let lambda = rf.lambda();
        let width = (0..rf.dim()).map(|i| rf.table(i).sites.len()).max().unwrap_or(0);
        if width > 24 {
            bail!(Domain, "rate window of {width} sites is too wide");
        }
        let block = 1usize << width;
        let mut thresholds = Vec::with_capacity(rf.dim() * block);
        for i in 0..rf.dim() {
            let table = &rf.table(i).rates;
            let mask = table.len() - 1;
            // narrower windows are padded, the padding bits are ignored
            for idx in 0..block {
                let c = table[idx & mask];
                thresholds.push(if c >= lambda { 1u64 << 32 } else { libm::floor(c / lambda * 4294967296.0) as u64 });
            }
        }
        let bonds = torus.bonds();
        let stride = 3 + width;
        let mut records = Vec::with_capacity(bonds.len() * stride);
        let mut dirs = Vec::with_capacity(bonds.len());
        for &(x, y, i) in &bonds {
            records.extend([x as u32, y as u32, (i * block) as u32]);
            dirs.push(i as u8);
            let sites = &rf.table(i).sites;
            for k in 0..width {
                records.push(sites.get(k).map_or(x as u32, |&z| torus.shift(x, z) as u32));
            }
        }
        Ok(Simulator { torus: *torus, rf: rf.clone(), lambda, records, stride, dirs, thresholds })
    }

    pub fn torus(&self) -> &Torus {
        &self.torus
    }

    pub fn rate_family(&self) -> &RateFamily {
        &self.rf
    }

    pub fn bonds(&self) -> usize {
        self.dirs.len()
    }

    /// Endpoints and direction of bond k.
    pub fn bond(&self, k: usize) -> (usize, usize, usize) {
        let r = &self.records[k * self.stride..];
        (r[0] as usize, r[1] as usize, self.dirs[k] as usize)
    }

    /// Candidate event rate λ · #bonds.
    pub fn total_rate(&self) -> f64 {
        self.lambda * self.dirs.len() as f64
    }

    /// Bernoulli(ρ) start driven by the (seed, replica) stream.
    pub fn stationary_start(&self, rho: f64, seed: u64, replica: u64) -> Result<Trajectory<'_>> {
        if !(0.0..=1.0).contains(&rho) {
            bail!(Domain, "density {rho} outside [0, 1]");
        }
        let mut rng = stream(seed, replica);
        let v = self.torus.volume();
        let mut bits = vec![0u64; v.div_ceil(64)];
        let cut = rho * 18446744073709551616.0;
        for s in 0..v {
            let u = rng.next_u64();
            let on = if rho >= 1.0 { true } else { (u as f64) < cut };
            if on {
                bits[s >> 6] |= 1 << (s & 63);
            }
        }
        Ok(Trajectory { sim: self, bits, time: 0.0, rng, candidates: 0, jumps: 0 })
    }

    /// Start from a given configuration.
    pub fn start(&self, occupied: &[bool], seed: u64, replica: u64) -> Result<Trajectory<'_>> {
        if occupied.len() != self.torus.volume() {
            bail!(Domain, "configuration has {} sites, torus has {}", occupied.len(), self.torus.volume());
        }
        let mut bits = vec![0u64; occupied.len().div_ceil(64)];
        for (s, &o) in occupied.iter().enumerate() {
            if o {
                bits[s >> 6] |= 1 << (s & 63);
            }
        }
        Ok(Trajectory { sim: self, bits, time: 0.0, rng: stream(seed, replica), candidates: 0, jumps: 0 })
    }
}

/// The counter-style stream of one replica.
pub fn stream(seed: u64, replica: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replica);
    rng
}

/// One realization of the dynamics.
#[derive(Clone, Debug)]
pub struct Trajectory<'a> {
    sim: &'a Simulator,
    bits: Vec<u64>,
    time: f64,
    rng: ChaCha8Rng,
    candidates: u64,
    jumps: u64,
}

impl<'a> Trajectory<'a> {
    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn occupied(&self, site: usize) -> bool {
        self.bits[site >> 6] >> (site & 63) & 1 == 1
    }

    pub fn configuration(&self) -> Vec<bool> {
        (0..self.sim.torus.volume()).map(|s| self.occupied(s)).collect()
    }

    pub fn particles(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Candidate events drawn so far.
    pub fn candidates(&self) -> u64 {
        self.candidates
    }

    /// Accepted exchanges so far.
    pub fn jumps(&self) -> u64 {
        self.jumps
    }

    /// Advance by Δt: Poisson(λBΔt) candidate events, each on a uniform bond.
    pub fn evolve(&mut self, dt: f64) -> Result<()> {
        let n = self.candidate_count(dt)?;
        self.run_events(n, |_, _, _| {});
        self.time += dt;
        Ok(())
    }

    /// Like [`Trajectory::evolve`], reporting every candidate as (configuration before, bond, accepted).
    pub fn evolve_observed(&mut self, dt: f64, observer: impl FnMut(&[u64], usize, bool)) -> Result<()> {
        let n = self.candidate_count(dt)?;
        self.run_events(n, observer);
        self.time += dt;
        Ok(())
    }

    fn candidate_count(&mut self, dt: f64) -> Result<u64> {
        if !(dt >= 0.0) || !dt.is_finite() {
            bail!(Domain, "time step {dt} must be finite and nonnegative");
        }
        let mean = self.sim.total_rate() * dt;
        if mean == 0.0 {
            return Ok(0);
        }
        let p = Poisson::new(mean).map_err(|_| Error::Domain(alloc::format!("Poisson mean {mean} rejected")))?;
        Ok(p.sample(&mut self.rng) as u64)
    }

    /// Draw `n` candidate events.
    #[inline]
    pub fn run_events(&mut self, n: u64, observer: impl FnMut(&[u64], usize, bool)) {
        match self.sim.stride - 3 {
            0 => self.run_fixed::<0>(n, observer),
            1 => self.run_fixed::<1>(n, observer),
            2 => self.run_fixed::<2>(n, observer),
            3 => self.run_fixed::<3>(n, observer),
            4 => self.run_fixed::<4>(n, observer),
            5 => self.run_fixed::<5>(n, observer),
            6 => self.run_fixed::<6>(n, observer),
            8 => self.run_fixed::<8>(n, observer),
            _ => self.run_generic(n, observer),
        }
    }

    #[inline(always)]
    fn run_fixed<const W: usize>(&mut self, n: u64, mut observer: impl FnMut(&[u64], usize, bool)) {
        let sim = self.sim;
        let nb = sim.dirs.len() as u64;
        // Lemire's rejection threshold for an unbiased bond index from 32 bits
        let reject_below = ((1u64 << 32) - nb) % nb;
        let bits = &mut self.bits;
        let rng = &mut self.rng;
        let mut jumps = 0;
        for _ in 0..n {
            let (k, low) = loop {
                let r = rng.next_u64();
                let m = (r >> 32) * nb;
                if (m & 0xffff_ffff) >= reject_below {
                    break ((m >> 32) as usize, r & 0xffff_ffff);
                }
            };
            let rec: &[u32; 3] = sim.records[k * (3 + W)..][..3].try_into().expect("record");
            let win: &[u32; W] = sim.records[k * (3 + W) + 3..][..W].try_into().expect("record");
            let (x, y) = (rec[0] as usize, rec[1] as usize);
            let differ = (bits[x >> 6] >> (x & 63) ^ bits[y >> 6] >> (y & 63)) & 1;
            // rec[2] is the table offset
            let mut idx = rec[2] as usize;
            for (j, &z) in win.iter().enumerate() {
                idx |= ((bits[z as usize >> 6] >> (z & 63)) as usize & 1) << j;
            }
            let accepted = (differ == 1) & (low < sim.thresholds[idx]);
            observer(bits, k, accepted);
            let flip = accepted as u64;
            bits[x >> 6] ^= flip << (x & 63);
            bits[y >> 6] ^= flip << (y & 63);
            jumps += flip;
        }
        self.candidates += n;
        self.jumps += jumps;
    }

    fn run_generic(&mut self, n: u64, mut observer: impl FnMut(&[u64], usize, bool)) {
        let sim = self.sim;
        let nb = sim.dirs.len() as u64;
        let reject_below = ((1u64 << 32) - nb) % nb;
        let stride = sim.stride;
        let bits = &mut self.bits;
        let rng = &mut self.rng;
        let mut jumps = 0;
        for _ in 0..n {
            let (k, low) = loop {
                let r = rng.next_u64();
                let m = (r >> 32) * nb;
                if (m & 0xffff_ffff) >= reject_below {
                    break ((m >> 32) as usize, r & 0xffff_ffff);
                }
            };
            let rec = &sim.records[k * stride..(k + 1) * stride];
            let (x, y) = (rec[0] as usize, rec[1] as usize);
            let differ = (bits[x >> 6] >> (x & 63) ^ bits[y >> 6] >> (y & 63)) & 1;
            let mut idx = rec[2] as usize;
            for (j, &z) in rec[3..].iter().enumerate() {
                idx |= ((bits[z as usize >> 6] >> (z & 63)) as usize & 1) << j;
            }
            let accepted = (differ == 1) & (low < sim.thresholds[idx]);
            observer(bits, k, accepted);
            let flip = accepted as u64;
            bits[x >> 6] ^= flip << (x & 63);
            bits[y >> 6] ^= flip << (y & 63);
            jumps += flip;
        }
        self.candidates += n;
        self.jumps += jumps;
    }
}

/// A local observable compiled for fast evaluation at every torus translate.
#[derive(Clone, Debug)]
pub struct Observable {
    terms: Vec<(f64, Vec<f64>)>,
    /// sites[t][x * len + j] = torus site of support point j of term t translated by x.
    sites: Vec<Vec<u32>>,
    volume: usize,
}

impl Observable {
    pub fn new(torus: &Torus, u: &LocalFunction) -> Result<Observable> {
        let radius = u.support_radius()?;
        if 4 * radius + 1 > torus.side() as i64 {
            bail!(Domain, "observable of radius {radius} is not small against torus side {}", torus.side());
        }
        let v = torus.volume();
        let mut terms = Vec::new();
        let mut sites = Vec::new();
        for t in u.terms() {
            let pts: Vec<Point> = t.support().collect();
            let mut s = Vec::with_capacity(v * pts.len());
            for x in 0..v {
                for &p in &pts {
                    s.push(torus.shift(x, p) as u32);
                }
            }
            terms.push((t.coef, t.table.values().to_vec()));
            sites.push(s);
        }
        Ok(Observable { terms, sites, volume: v })
    }

    /// u(τ_x η) for the packed configuration.
    pub fn at(&self, bits: &[u64], x: usize) -> f64 {
        let mut total = 0.0;
        for ((coef, table), sites) in self.terms.iter().zip(&self.sites) {
            let len = table.len().trailing_zeros() as usize;
            let mut idx = 0;
            for (j, &z) in sites[x * len..(x + 1) * len].iter().enumerate() {
                idx |= ((bits[z as usize >> 6] >> (z & 63)) as usize & 1) << j;
            }
            total += coef * table[idx];
        }
        total
    }

    pub fn values(&self, bits: &[u64]) -> Vec<f64> {
        (0..self.volume).map(|x| self.at(bits, x)).collect()
    }
}

/// Admissible time horizon for the estimator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Horizon {
    /// t ≤ (N/6)²/λ so wrap-around stays negligible for local observables.
    #[default]
    InfiniteVolume,
    /// No limit: the target is the torus dynamics itself.
    Torus,
}

/// How the two-point statistic is averaged within one replica.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Averaging {
    /// Average u(τ_x η(0)) u(τ_x η(2t)) over all torus translates x.
    #[default]
    Translates,
    /// Use the translate x = 0 only.
    Origin,
}

/// Estimator settings.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EstimatorOptions {
    pub horizon: Horizon,
    pub averaging: Averaging,
}

/// Per-replica sums for a grid of times.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplicaSample {
    /// mean_x u_x(0) u_x(2t_k).
    pub cross: Vec<f64>,
    /// mean_x u_x(0).
    pub start: f64,
    /// mean_x u_x(2t_k).
    pub end: Vec<f64>,
    pub jumps: u64,
}

/// Estimate of Var_ρ[P_t u] with a jackknife standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VarianceEstimate {
    pub t: f64,
    pub estimate: f64,
    pub stderr: f64,
    pub replicas: usize,
}

/// Stationary two-point estimator ⟨u P_{2t} u⟩ − ⟨u⟩² on a grid of times.
#[derive(Clone, Debug)]
pub struct VarianceEstimator {
    sim: Simulator,
    obs: Observable,
    rho: f64,
    times: Vec<f64>,
    options: EstimatorOptions,
}

impl VarianceEstimator {
    pub fn new(
        sim: Simulator,
        u: &LocalFunction,
        rho: f64,
        times: &[f64],
        options: EstimatorOptions,
    ) -> Result<VarianceEstimator> {
        if !(0.0..=1.0).contains(&rho) {
            bail!(Domain, "density {rho} outside [0, 1]");
        }
        if times.is_empty() {
            bail!(Config, "empty time grid");
        }
        if times.iter().any(|t| !(*t >= 0.0) || !t.is_finite()) || times.windows(2).any(|w| w[1] < w[0]) {
            bail!(Config, "time grid must be finite, nonnegative and nondecreasing");
        }
        if options.horizon == Horizon::InfiniteVolume {
            let limit = horizon(sim.torus(), sim.rate_family().lambda());
            let t_max = *times.last().expect("nonempty");
            if t_max > limit {
                bail!(Domain, "t = {t_max} exceeds the boundary-safe horizon (N/6)²/λ = {limit:.3}");
            }
        }
        let obs = Observable::new(sim.torus(), u)?;
        Ok(VarianceEstimator { sim, obs, rho, times: times.to_vec(), options })
    }

    pub fn simulator(&self) -> &Simulator {
        &self.sim
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Simulate replica `r` to time 2·t_max, recording the statistic at every 2t_k.
    pub fn replica(&self, seed: u64, r: u64) -> Result<ReplicaSample> {
        let mut traj = self.sim.stationary_start(self.rho, seed, r)?;
        let sites: Vec<usize> = match self.options.averaging {
            Averaging::Translates => (0..self.sim.torus.volume()).collect(),
            Averaging::Origin => vec![0],
        };
        let inv = 1.0 / sites.len() as f64;
        let u0: Vec<f64> = sites.iter().map(|&x| self.obs.at(&traj.bits, x)).collect();
        let start = u0.iter().sum::<f64>() * inv;
        let mut cross = Vec::with_capacity(self.times.len());
        let mut end = Vec::with_capacity(self.times.len());
        for &t in &self.times {
            let dt = 2.0 * t - traj.time();
            if dt > 0.0 {
                traj.evolve(dt)?;
                traj.time = 2.0 * t;
            }
            let mut c = 0.0;
            let mut e = 0.0;
            for (&x, &a) in sites.iter().zip(&u0) {
                let b = self.obs.at(&traj.bits, x);
                c += a * b;
                e += b;
            }
            cross.push(c * inv);
            end.push(e * inv);
        }
        Ok(ReplicaSample { cross, start, end, jumps: traj.jumps() })
    }

    /// Run replicas 0..R in order.
    pub fn run(&self, replicas: usize, seed: u64) -> Result<Vec<VarianceEstimate>> {
        let samples = (0..replicas as u64).map(|r| self.replica(seed, r)).collect::<Result<Vec<_>>>()?;
        Ok(self.aggregate(&samples))
    }

    pub fn aggregate(&self, samples: &[ReplicaSample]) -> Vec<VarianceEstimate> {
        aggregate(&self.times, samples)
    }
}

/// mean(A) − mean(B)·mean(C) with a leave-one-out jackknife error, in replica order.
pub fn aggregate(times: &[f64], samples: &[ReplicaSample]) -> Vec<VarianceEstimate> {
    let r = samples.len();
    let rf = r as f64;
    times
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            if r == 0 {
                return VarianceEstimate { t, estimate: f64::NAN, stderr: f64::NAN, replicas: 0 };
            }
            let sa: f64 = samples.iter().map(|s| s.cross[k]).sum();
            let sb: f64 = samples.iter().map(|s| s.start).sum();
            let sc: f64 = samples.iter().map(|s| s.end[k]).sum();
            let estimate = sa / rf - (sb / rf) * (sc / rf);
            let stderr = if r < 2 {
                f64::NAN
            } else {
                let m = rf - 1.0;
                let loo: Vec<f64> = samples
                    .iter()
                    .map(|s| (sa - s.cross[k]) / m - ((sb - s.start) / m) * ((sc - s.end[k]) / m))
                    .collect();
                let mean = loo.iter().sum::<f64>() / rf;
                let ss: f64 = loo.iter().map(|v| (v - mean) * (v - mean)).sum();
                libm::sqrt(m / rf * ss)
            };
            VarianceEstimate { t, estimate, stderr, replicas: r }
        })
        .collect()
}

/// (N/6)²/λ.
pub fn horizon(torus: &Torus, lambda: f64) -> f64 {
    let s = torus.side() as f64 / 6.0;
    s * s / lambda
}

/// R_K u = |Λ_K|⁻¹ Σ_{x∈Λ_K} τ_x u.
pub fn regularize(u: &LocalFunction, k: u32, dim: usize) -> Result<LocalFunction> {
    if k == 0 {
        return Ok(u.clone());
    }
    let side = 2 * k as usize + 1;
    let count = side.checked_pow(dim as u32).filter(|&c| c <= MAX_TRANSLATES);
    let Some(count) = count else {
        bail!(Domain, "R_K with K = {k} in dimension {dim} needs more than {MAX_TRANSLATES} translates");
    };
    let scale = 1.0 / count as f64;
    let mut out = LocalFunction::zero();
    for x in Cube::centered(dim, k as i64).points() {
        out = out.add(&u.translate(x));
    }
    Ok(out.scale(scale))
}

/// t_n = θⁿ t_0 with K_n = ⌊t_n^{(1−ε)/2}⌋ on [t_n, t_{n+1}).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegularizationSchedule {
    pub theta: f64,
    pub epsilon: f64,
    pub ell_u: i64,
    pub dim: usize,
    pub t0: f64,
}

impl RegularizationSchedule {
    pub const DEFAULT_THETA: f64 = 128.0;

    pub fn new(theta: f64, epsilon: f64, ell_u: i64, dim: usize) -> Result<RegularizationSchedule> {
        if !(theta > 100.0) || !theta.is_finite() {
            bail!(Config, "θ = {theta} must exceed 100");
        }
        if !(epsilon > 0.0 && epsilon < 1.0) {
            bail!(Config, "ε = {epsilon} must lie in (0, 1)");
        }
        if ell_u < 0 {
            bail!(Config, "support radius must be nonnegative");
        }
        let t0 = (10.0 * (1 + ell_u) as f64).max(2.0 * (dim as f64 + 2.0) * theta);
        Ok(RegularizationSchedule { theta, epsilon, ell_u, dim, t0 })
    }

    /// The ε = 2β/d choice, kept for reference only.
    pub fn epsilon_for(beta: f64, dim: usize) -> f64 {
        2.0 * beta / dim as f64
    }

    pub fn time(&self, n: u32) -> f64 {
        self.t0 * libm::pow(self.theta, n as f64)
    }

    pub fn k_level(&self, n: u32) -> u32 {
        libm::floor(libm::pow(self.time(n), (1.0 - self.epsilon) / 2.0)) as u32
    }

    /// Index n with t ∈ [t_n, t_{n+1}); None below t_0.
    pub fn level(&self, t: f64) -> Option<u32> {
        if !(t >= self.t0) {
            return None;
        }
        let mut n = 0;
        while self.time(n + 1) <= t {
            n += 1;
        }
        Some(n)
    }

    /// K(t); zero before t_0.
    pub fn k(&self, t: f64) -> u32 {
        self.level(t).map_or(0, |n| self.k_level(n))
    }
}
