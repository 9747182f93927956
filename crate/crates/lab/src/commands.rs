//! Single-shot subcommands driven by flags.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use exvar_core::exactgen::build_generator;
use exvar_core::fock::{chaos_coeffs, rho_derivative};
use exvar_core::heatkernel::{nash_compare, JumpKernel};
use exvar_core::homogenize::diffusion_matrix;
use exvar_core::lattice::{Point, Torus};
use exvar_core::mcsim::{Averaging, EstimatorOptions, Horizon, Simulator};
use exvar_core::rates::{gradient_witness, RateFamily, RateRule};
use exvar_core::walkdesign::{design, DesignInput, GridRule};
use nalgebra::DMatrix;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::validate_grid;
use crate::error::{config_err, LabError, LabResult};
use crate::experiments::{kernel_json, mc_variance};
use crate::observable::parse_observable;
use crate::output::{RunOutput, Table};

fn parse_grid(s: &str) -> LabResult<Vec<f64>> {
    let t = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|_| LabError::Config(format!("bad time '{x}'"))))
        .collect::<LabResult<Vec<f64>>>()?;
    validate_grid(&t)?;
    Ok(t)
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

fn point_json(p: &Point, dim: usize) -> Value {
    json!((0..dim).map(|i| p.coord(i)).collect::<Vec<_>>())
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct ValidateRatesArgs {
    /// Rate family, e.g. kind=neighbor_weighted,a=0.5.
    #[arg(long)]
    pub rates: String,
    #[arg(long, default_value_t = 1)]
    pub dim: usize,
    /// Also write the generator on this torus side in (row, col, value) text.
    #[arg(long, requires = "side")]
    pub export_generator: Option<PathBuf>,
    #[arg(long)]
    pub side: Option<usize>,
}

pub fn validate_rates(a: &ValidateRatesArgs) -> LabResult<RunOutput> {
    let rule = RateRule::parse(&a.rates, a.dim)?;
    let report = rule.validate()?;
    let gradient = if a.dim == 1 && report.passed() {
        let rf = RateFamily::new(rule.clone())?;
        let w = gradient_witness(&rf, rf.range() + 1)?;
        json!({"residual": w.residual, "is_gradient": w.is_gradient(1e-10)})
    } else {
        Value::Null
    };
    let doc = json!({
        "name": rule.name(),
        "dim": rule.dim(),
        "range": rule.range(),
        "lambda": rule.lambda(),
        "window_sites": report.window_sites,
        "configurations_checked": report.configurations_checked,
        "min_rate": report.min_rate,
        "max_rate": report.max_rate,
        "passed": report.passed(),
        "counterexample": report.counterexample.as_ref().map(|c| c.to_string()),
        "gradient": gradient,
    });
    if let (Some(path), Some(side)) = (&a.export_generator, a.side) {
        if !report.passed() {
            return config_err("cannot export the generator of an invalid rate family");
        }
        let torus = Torus::new(a.dim, side)?;
        let op = build_generator(&torus, &RateFamily::new(rule)?)?;
        write_coo(path, op.csr().triplets())?;
    }
    Ok(RunOutput::json(doc.clone(), json!({"passed": doc["passed"]})))
}

/// One `row col value` line per stored entry.
pub fn write_coo(path: &Path, entries: impl Iterator<Item = (usize, usize, f64)>) -> LabResult<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (i, j, v) in entries {
        writeln!(w, "{i} {j} {v:e}")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(ValueEnum, Clone, Copy, Debug, Default, Serialize)]
pub enum GridChoice {
    #[default]
    Tight,
    PlusOne,
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct Cov2WalkArgs {
    /// JSON file holding the target matrix as a list of rows.
    #[arg(long)]
    pub matrix: PathBuf,
    /// Spectral bound C; defaults to max(λ_max, 1) rounded up.
    #[arg(long)]
    pub bound: Option<f64>,
    #[arg(long, value_enum, default_value_t = GridChoice::Tight)]
    pub grid: GridChoice,
}

pub fn read_matrix(path: &Path) -> LabResult<DMatrix<f64>> {
    let rows: Vec<Vec<f64>> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let d = rows.len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return config_err("matrix must be a nonempty square list of rows");
    }
    Ok(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
}

pub fn cov2walk(a: &Cov2WalkArgs) -> LabResult<RunOutput> {
    let m = read_matrix(&a.matrix)?;
    let input = DesignInput::new(m, a.bound)?;
    let rule = match a.grid {
        GridChoice::Tight => GridRule::Tight,
        GridChoice::PlusOne => GridRule::PlusOne,
    };
    let k = design(&input, rule)?;
    let summary = json!({
        "grid": k.grid,
        "bound": k.bound,
        "residue": k.residue,
        "total_rate": k.total_rate(),
        "support_radius": k.kernel.support_radius(),
        "covariance": matrix_rows(&k.kernel.covariance()),
    });
    Ok(RunOutput::json(kernel_json(&k.kernel), summary))
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct HeatArgs {
    #[arg(long, default_value_t = 1)]
    pub dim: usize,
    #[arg(long)]
    pub side: usize,
    /// Comma-separated times.
    #[arg(long)]
    pub t_grid: String,
    /// Nearest-neighbour rate Q_{±e_i}.
    #[arg(long, default_value_t = 0.5)]
    pub rate: f64,
    /// JSON list of (offset, rate) replacing the nearest-neighbour kernel.
    #[arg(long)]
    pub kernel: Option<PathBuf>,
}

pub fn heat_asymptotics(a: &HeatArgs) -> LabResult<RunOutput> {
    let torus = Torus::new(a.dim, a.side)?;
    let q = match &a.kernel {
        Some(p) => {
            let list: Vec<(Vec<i64>, f64)> = serde_json::from_str(&std::fs::read_to_string(p)?)?;
            if list.iter().any(|(o, _)| o.len() != a.dim) {
                return config_err("kernel offsets must match --dim");
            }
            JumpKernel::new(a.dim, list.iter().map(|(o, r)| (Point::new(o), *r)))?
        }
        None => JumpKernel::diagonal(&vec![a.rate; a.dim])?,
    };
    let mut f = vec![0.0; torus.volume()];
    f[0] = 1.0;
    let mut table = Table::new(vec!["t", "l2_norm", "gaussian_prediction", "gap", "rescaled_gap"]);
    for t in parse_grid(&a.t_grid)? {
        let r = nash_compare(&q, &torus, &f, t)?;
        table.push(vec![r.t, r.l2_norm, r.gaussian_prediction, r.gap, r.rescaled_gap]);
    }
    let summary = json!({"kernel": kernel_json(&q), "covariance": matrix_rows(&q.covariance())});
    Ok(RunOutput::table(table, summary))
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct ChaosArgs {
    /// Observable, e.g. prod(0;1).
    #[arg(long)]
    pub observable: String,
    #[arg(long)]
    pub rho: f64,
    #[arg(long, default_value_t = 1)]
    pub dim: usize,
}

pub fn chaos(a: &ChaosArgs) -> LabResult<RunOutput> {
    if !(a.rho > 0.0 && a.rho < 1.0) {
        return config_err(format!("rho = {} must lie in (0, 1)", a.rho));
    }
    let u = parse_observable(&a.observable, a.dim, a.rho)?;
    let c = chaos_coeffs(&u, a.rho)?;
    let levels: serde_json::Map<String, Value> = c
        .levels()
        .map(|(n, l)| {
            let entries: Vec<Value> = l
                .iter()
                .map(|(ys, v)| json!([ys.iter().map(|p| point_json(p, a.dim)).collect::<Vec<_>>(), v]))
                .collect();
            (n.to_string(), json!(entries))
        })
        .collect();
    let max = c.max_level().unwrap_or(0);
    let derivatives: Vec<f64> = (1..=max).map(|n| rho_derivative(&u, a.rho, n)).collect::<Result<_, _>>()?;
    let summary = json!({
        "mean": u.expect_bernoulli(a.rho),
        "second_moment": c.second_moment(),
        "rho_derivatives": derivatives,
    });
    Ok(RunOutput::json(json!({"rho": a.rho, "levels": levels}), summary))
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct DiffusionArgs {
    #[arg(long)]
    pub rates: String,
    #[arg(long, default_value_t = 1)]
    pub dim: usize,
    #[arg(long)]
    pub rho: f64,
    #[arg(long)]
    pub m: u32,
}

pub fn diffusion(a: &DiffusionArgs) -> LabResult<RunOutput> {
    if !(a.rho > 0.0 && a.rho < 1.0) {
        return config_err(format!("rho = {} must lie in (0, 1)", a.rho));
    }
    let rf = RateFamily::parse(&a.rates, a.dim)?;
    let est = diffusion_matrix(&rf, a.rho, a.m)?;
    let l2: Vec<f64> = est.solutions.iter().map(|s| s.l2_norm_sq.sqrt()).collect();
    // the dual norm is reported when the flux supports fit the enumeration limit
    let flux: Vec<Value> = est
        .solutions
        .iter()
        .map(|s| match s.flux_dual_norm(&est.matrix) {
            Ok(f) => Ok(json!(f.value)),
            Err(exvar_core::Error::Size { .. }) => Ok(Value::Null),
            Err(e) => Err(e),
        })
        .collect::<Result<_, _>>()?;
    let doc = json!({
        "rho": a.rho,
        "m": a.m,
        "nu_bar": est.nu,
        "D_bar": matrix_rows(&est.matrix),
        "conductivity": matrix_rows(&est.conductivity),
        "l2_phi": l2,
        "flux_dual_norm": flux,
    });
    let (lo, hi) = est.spectrum();
    let summary = json!({
        "lambda": rf.lambda(),
        "spectrum": [lo, hi],
        "l2_bounds": est.solutions.iter().map(|s| s.l2_bound()).collect::<Vec<_>>(),
        "kernel_dimension": est.kernel_dimension,
        "iterations": est.solutions.iter().map(|s| s.iterations).collect::<Vec<_>>(),
    });
    Ok(RunOutput::json(doc, summary))
}

#[derive(ValueEnum, Clone, Copy, Debug, Default, Serialize)]
pub enum HorizonChoice {
    /// t ≤ (N/6)²/λ.
    #[default]
    Safe,
    /// Target the torus dynamics itself.
    Torus,
}

#[derive(ValueEnum, Clone, Copy, Debug, Default, Serialize)]
pub enum AveragingChoice {
    #[default]
    Translates,
    Origin,
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct SimulateArgs {
    #[arg(long)]
    pub rates: String,
    #[arg(long)]
    pub rho: f64,
    #[arg(long)]
    pub side: usize,
    #[arg(long, default_value_t = 1)]
    pub dim: usize,
    /// Comma-separated times t; trajectories run to 2t.
    #[arg(long)]
    pub t_grid: String,
    #[arg(long)]
    pub replicas: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "occ(0)")]
    pub observable: String,
    #[arg(long, value_enum, default_value_t = HorizonChoice::Safe)]
    pub horizon: HorizonChoice,
    #[arg(long, value_enum, default_value_t = AveragingChoice::Translates)]
    pub averaging: AveragingChoice,
}

pub fn simulate(a: &SimulateArgs) -> LabResult<RunOutput> {
    if !(0.0..=1.0).contains(&a.rho) {
        return config_err(format!("rho = {} must lie in [0, 1]", a.rho));
    }
    if a.replicas < 2 {
        return config_err("at least 2 replicas are needed");
    }
    let times = parse_grid(&a.t_grid)?;
    let torus = Torus::new(a.dim, a.side)?;
    let rf = RateFamily::parse(&a.rates, a.dim)?;
    let u = parse_observable(&a.observable, a.dim, a.rho)?;
    let options = EstimatorOptions {
        horizon: match a.horizon {
            HorizonChoice::Safe => Horizon::InfiniteVolume,
            HorizonChoice::Torus => Horizon::Torus,
        },
        averaging: match a.averaging {
            AveragingChoice::Translates => Averaging::Translates,
            AveragingChoice::Origin => Averaging::Origin,
        },
    };
    let sim = Simulator::new(&torus, &rf)?;
    let lambda = rf.lambda();
    let est = mc_variance(sim, &u, a.rho, &times, a.replicas, a.seed, options)?;
    let mut table = Table::new(vec!["t", "estimate", "stderr", "replicas"]);
    for e in &est {
        table.push(vec![e.t, e.estimate, e.stderr, e.replicas as f64]);
    }
    Ok(RunOutput::table(table, json!({"lambda": lambda})))
}
