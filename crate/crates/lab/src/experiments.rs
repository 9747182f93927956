//! The three table-producing experiments: variance decay, SEP level decay and the
//! homogenization gap.

use std::f64::consts::PI;

use exvar_core::configspace::{chi, LocalFunction};
use exvar_core::exactgen::{
    apply_semigroup, build_generator, build_sep_generator, check_wrap, full_space, inner, mask_weights,
    variance as weighted_variance,
};
use exvar_core::fock::{chaos_coeffs, rho_derivative, ChaosCoeffs};
use exvar_core::heatkernel::{exclusion_evolve_with, heat_evolve, ExclusionLaplacian, JumpKernel, SubsetTable};
use exvar_core::homogenize::{diffusion_matrix, DiffusionEstimate};
use exvar_core::lattice::{Point, Torus};
use exvar_core::mcsim::{
    regularize, Averaging, EstimatorOptions, Horizon, ReplicaSample, Simulator, VarianceEstimate, VarianceEstimator,
};
use exvar_core::rates::RateFamily;
use exvar_core::walkdesign::{kernel_from_covariance, sep_for_diffusion, DesignInput};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, KernelSpec, Method};
use crate::error::{config_err, LabResult};
use crate::observable::parse_observable;
use crate::output::{loglog_slope, RunOutput, Table};

/// Truncation tolerance of the semigroup actions.
const SEMIGROUP_TOL: f64 = 1e-13;

/// Replicas in parallel; aggregation runs in replica order so the result does not
/// depend on the thread count.
pub fn mc_variance(
    sim: Simulator,
    u: &LocalFunction,
    rho: f64,
    times: &[f64],
    replicas: usize,
    seed: u64,
    options: EstimatorOptions,
) -> LabResult<Vec<VarianceEstimate>> {
    let est = VarianceEstimator::new(sim, u, rho, times, options)?;
    let samples: Vec<ReplicaSample> =
        (0..replicas as u64).into_par_iter().map(|r| est.replica(seed, r)).collect::<Result<_, _>>()?;
    Ok(est.aggregate(&samples))
}

/// Var_ρ[P_t u] at every grid time for the full generator on a small torus.
pub fn exact_variance(
    torus: &Torus,
    rf: &RateFamily,
    u: &LocalFunction,
    rho: f64,
    times: &[f64],
) -> LabResult<Vec<f64>> {
    let op = build_generator(torus, rf)?;
    let w = mask_weights(torus, rho)?;
    let mut f = full_space(torus, u)?;
    let mut now = 0.0;
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        f = apply_semigroup(&op, t - now, &f, SEMIGROUP_TOL)?;
        now = t;
        out.push(weighted_variance(&w, &f));
    }
    Ok(out)
}

/// χ^n ‖e^{tΔ_Q^{(n)}/2} f_n‖² per chaos level n ≥ 1, one row per grid time.
pub fn level_variances(
    q: &JumpKernel,
    torus: &Torus,
    coeffs: &ChaosCoeffs,
    times: &[f64],
) -> LabResult<Vec<Vec<(usize, f64)>>> {
    let c = chi(coeffs.rho());
    let levels: Vec<usize> =
        coeffs.levels().filter(|(n, l)| *n >= 1 && l.values().any(|v| *v != 0.0)).map(|(n, _)| n).collect();
    let mut out = vec![Vec::with_capacity(levels.len()); times.len()];
    for &n in &levels {
        let table = SubsetTable::from_chaos(torus, coeffs, n)?;
        let weight = c.powi(n as i32);
        if n == 1 {
            let f = table.values().to_vec();
            for (row, &t) in out.iter_mut().zip(times) {
                let ft = heat_evolve(q, torus, &f, t)?;
                row.push((1, weight * ft.iter().map(|v| v * v).sum::<f64>()));
            }
        } else {
            check_wrap(torus, q)?;
            let op = ExclusionLaplacian::new(q, torus, n)?;
            let mut cur = table;
            let mut now = 0.0;
            for (row, &t) in out.iter_mut().zip(times) {
                cur = exclusion_evolve_with(&op, &cur, t - now, SEMIGROUP_TOL)?;
                now = t;
                row.push((n, weight * cur.l2_norm_sq()));
            }
        }
    }
    Ok(out)
}

/// ũ′²χ / √((8π)^d det D), the coefficient of t^{-d/2}.
pub fn leading_constant(u_prime: f64, rho: f64, d: &DMatrix<f64>) -> f64 {
    u_prime * u_prime * chi(rho) / ((8.0 * PI).powi(d.nrows() as i32) * d.determinant()).sqrt()
}

fn matrix_json(m: &DMatrix<f64>) -> Value {
    json!((0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect::<Vec<_>>()).collect::<Vec<_>>())
}

fn diffusion_json(est: &DiffusionEstimate) -> Value {
    json!({"m": est.m, "D_bar": matrix_json(&est.matrix)})
}

/// Constant rate c of a family with no environment dependence.
fn constant_rate(rf: &RateFamily) -> Option<f64> {
    rf.is_constant().then(|| rf.table(0).rates[0])
}

fn resolve_method(cfg: &ExperimentConfig, rf: &RateFamily, torus: &Torus) -> LabResult<Method> {
    let small = torus.volume() <= exvar_core::exactgen::MAX_SITES;
    Ok(match cfg.method {
        Method::Auto if constant_rate(rf).is_some() => Method::Spectral,
        Method::Auto if small => Method::Exact,
        Method::Auto => {
            if cfg.replicas < 2 {
                return config_err("Monte Carlo path selected but replicas < 2");
            }
            Method::MonteCarlo
        }
        Method::Spectral if constant_rate(rf).is_none() => {
            return config_err("spectral evaluation needs constant rates")
        }
        m => m,
    })
}

pub fn variance_decay(cfg: &ExperimentConfig) -> LabResult<RunOutput> {
    let torus = cfg.torus()?;
    let rf = cfg.rate_family()?;
    let u = parse_observable(&cfg.observable, cfg.dim, cfg.rho)?;
    let method = resolve_method(cfg, &rf, &torus)?;
    let est = diffusion_matrix(&rf, cfg.rho, cfg.largest_scale())?;
    let u_prime = rho_derivative(&u, cfg.rho, 1)?;
    let base = leading_constant(u_prime, cfg.rho, &est.matrix);
    let (var, err): (Vec<f64>, Vec<f64>) = match method {
        Method::Spectral => {
            let q = JumpKernel::nearest_neighbor(cfg.dim, constant_rate(&rf).expect("constant rates"));
            let coeffs = chaos_coeffs(&u, cfg.rho)?;
            let rows = level_variances(&q, &torus, &coeffs, &cfg.t_grid)?;
            rows.iter().map(|r| (r.iter().map(|x| x.1).sum::<f64>(), 0.0)).unzip()
        }
        Method::Exact => exact_variance(&torus, &rf, &u, cfg.rho, &cfg.t_grid)?.into_iter().map(|v| (v, 0.0)).unzip(),
        Method::MonteCarlo | Method::Auto => {
            let sim = Simulator::new(&torus, &rf)?;
            let options = EstimatorOptions {
                horizon: if cfg.torus_horizon { Horizon::Torus } else { Horizon::InfiniteVolume },
                averaging: Averaging::Translates,
            };
            mc_variance(sim, &u, cfg.rho, &cfg.t_grid, cfg.replicas, cfg.seed, options)?
                .into_iter()
                .map(|e| (e.estimate, e.stderr))
                .unzip()
        }
    };
    let mut table = Table::new(vec!["t", "var", "stderr", "prediction", "ratio"]);
    let half_d = cfg.dim as f64 / 2.0;
    for ((&t, &v), &e) in cfg.t_grid.iter().zip(&var).zip(&err) {
        let prediction = base * t.powf(-half_d);
        let ratio = if prediction > 0.0 { v / prediction } else { f64::NAN };
        table.push(vec![t, v, e, prediction, ratio]);
    }
    let summary = json!({
        "method": method,
        "diffusion": diffusion_json(&est),
        "u_prime": u_prime,
        "chi": chi(cfg.rho),
        "leading_constant": base,
        "slope": loglog_slope(&cfg.t_grid, &var),
    });
    Ok(RunOutput::table(table, summary))
}

/// Kernel of the SEP used by `sep-decay`, with its diffusion matrix covariance/2.
pub fn sep_kernel(cfg: &ExperimentConfig) -> LabResult<JumpKernel> {
    let d = cfg.dim;
    let to_matrix = |rows: &[Vec<f64>]| -> LabResult<DMatrix<f64>> {
        if rows.len() != d || rows.iter().any(|r| r.len() != d) {
            return config_err(format!("matrix must be {d}×{d}"));
        }
        Ok(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
    };
    Ok(match &cfg.kernel {
        Some(KernelSpec::NearestNeighbor(r)) => {
            JumpKernel::new(d, (0..d).flat_map(|i| [(Point::unit(i), *r), (-Point::unit(i), *r)]))?
        }
        Some(KernelSpec::Offsets(list)) => {
            let mut entries = Vec::with_capacity(list.len());
            for (off, r) in list {
                if off.len() != d {
                    return config_err(format!("offset {off:?} is not {d}-dimensional"));
                }
                entries.push((Point::new(off), *r));
            }
            JumpKernel::new(d, entries)?
        }
        Some(KernelSpec::Covariance(m)) => kernel_from_covariance(&DesignInput::new(to_matrix(m)?, None)?)?,
        Some(KernelSpec::Diffusion(m)) => sep_for_diffusion(&to_matrix(m)?)?,
        None => {
            let est = diffusion_matrix(&cfg.rate_family()?, cfg.rho, cfg.largest_scale())?;
            sep_for_diffusion(&est.matrix)?
        }
    })
}

pub fn sep_decay(cfg: &ExperimentConfig) -> LabResult<RunOutput> {
    let torus = cfg.torus()?;
    let q = sep_kernel(cfg)?;
    let u = parse_observable(&cfg.observable, cfg.dim, cfg.rho)?;
    let coeffs = chaos_coeffs(&u, cfg.rho)?;
    let u_prime = rho_derivative(&u, cfg.rho, 1)?;
    let diffusion = q.covariance() / 2.0;
    let base = leading_constant(u_prime, cfg.rho, &diffusion);
    let rows = level_variances(&q, &torus, &coeffs, &cfg.t_grid)?;
    let half_d = cfg.dim as f64 / 2.0;
    let mut table = Table::new(vec!["t", "level", "variance", "prediction", "ratio"]);
    for (&t, row) in cfg.t_grid.iter().zip(&rows) {
        for &(n, v) in row {
            let prediction = if n == 1 { base * t.powf(-half_d) } else { f64::NAN };
            let ratio = if prediction > 0.0 { v / prediction } else { f64::NAN };
            table.push(vec![t, n as f64, v, prediction, ratio]);
        }
    }
    let levels: Vec<usize> = rows.first().map(|r| r.iter().map(|x| x.0).collect()).unwrap_or_default();
    let slopes: serde_json::Map<String, Value> = levels
        .iter()
        .enumerate()
        .map(|(j, &n)| {
            let y: Vec<f64> = rows.iter().map(|r| r[j].1).collect();
            (n.to_string(), json!(loglog_slope(&cfg.t_grid, &y)))
        })
        .collect();
    let total: Vec<f64> = rows.iter().map(|r| r.iter().map(|x| x.1).sum()).collect();
    let summary = json!({
        "kernel": kernel_json(&q),
        "diffusion": matrix_json(&diffusion),
        "u_prime": u_prime,
        "leading_constant": base,
        "level_slopes": slopes,
        "total_slope": loglog_slope(&cfg.t_grid, &total),
    });
    Ok(RunOutput::table(table, summary))
}

pub fn kernel_json(q: &JumpKernel) -> Value {
    json!(q.rates().map(|(p, r)| json!([(0..q.dim()).map(|i| p.coord(i)).collect::<Vec<_>>(), r])).collect::<Vec<_>>())
}

/// SEP matched to D̄, falling back to the nearest-neighbour kernel with the same
/// diagonal when the designed kernel does not fit the torus.
pub fn matched_sep(torus: &Torus, d_bar: &DMatrix<f64>) -> LabResult<(JumpKernel, &'static str)> {
    let designed = sep_for_diffusion(d_bar)?;
    if check_wrap(torus, &designed).is_ok() {
        return Ok((designed, "designed"));
    }
    let diag: Vec<f64> = (0..d_bar.nrows()).map(|i| d_bar[(i, i)]).collect();
    Ok((JumpKernel::diagonal(&diag)?, "nearest-neighbour"))
}

pub fn homogenization_gap(cfg: &ExperimentConfig) -> LabResult<RunOutput> {
    let torus = cfg.torus()?;
    let rf = cfg.rate_family()?;
    let probe = parse_observable(&cfg.observable, cfg.dim, cfg.rho)?;
    let est = diffusion_matrix(&rf, cfg.rho, cfg.largest_scale())?;
    let (q, kind) = matched_sep(&torus, &est.matrix)?;
    let op = build_generator(&torus, &rf)?;
    let bar = build_sep_generator(&torus, &q)?;
    let w = mask_weights(&torus, cfg.rho)?;
    let mut table = Table::new(vec!["t", "k", "gap", "probe_norm"]);
    let mut slopes = serde_json::Map::new();
    for &k in &cfg.k {
        let fk = regularize(&probe, k, cfg.dim)?;
        let f0 = full_space(&torus, &fk)?;
        let norm = weighted_variance(&w, &f0).sqrt();
        let (mut a, mut b) = (f0.clone(), f0);
        let mut now = 0.0;
        let mut gaps = Vec::with_capacity(cfg.t_grid.len());
        for &t in &cfg.t_grid {
            a = apply_semigroup(&op, t - now, &a, SEMIGROUP_TOL)?;
            b = apply_semigroup(&bar, t - now, &b, SEMIGROUP_TOL)?;
            now = t;
            let diff: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
            let gap = inner(&w, &diff, &diff).max(0.0).sqrt();
            gaps.push(gap);
            table.push(vec![t, k as f64, gap, norm]);
        }
        slopes.insert(k.to_string(), json!(loglog_slope(&cfg.t_grid, &gaps)));
    }
    let summary = json!({
        "diffusion": diffusion_json(&est),
        "sep_kernel": kind,
        "kernel": kernel_json(&q),
        "slopes": slopes,
    });
    Ok(RunOutput::table(table, summary))
}
