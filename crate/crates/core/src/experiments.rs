//! The certification experiments behind the `cqd-bench` subcommands.
//!
//! Every experiment maps an [`ExperimentConfig`] to a [`Report`] and is a pure
//! function of that config. Seeds run in parallel; rows are always ordered by
//! (seed, grid index).

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{encode, payload_bytes};
use crate::error::{arg_err, Error, Result};
use crate::manifold::{qr_retraction, TuckerPoint};
use crate::masking::{asm_compress, asm_from_hosvd, budget};
use crate::matrix::Matrix;
use crate::optimizer::{run_cqd, CqdConfig, RunTrace, StepSchedule, TaskSpec};
use crate::oracle::{
    ensemble_infer, Aggregator, MeanMap, OracleConfig, OracleRequest, SimulatedOracle,
};
use crate::report::{Cell, Format, Report, Series};
use crate::rng::SeededRng;
use crate::synthetic::gen_synthetic;
use crate::tensor::{hosvd, tail_energy, truncated_reconstruct, Ranks, Shape};

/// A random projector beats the top singular one only if it wins by more than
/// this, relative to `1 + ‖A‖²`.
pub const PROJECTOR_TOL: f64 = 1e-12;
/// Additive slack in `‖X − X_r‖² ≤ tail_energy + TAIL_BOUND_TOL`.
pub const TAIL_BOUND_TOL: f64 = 1e-9;
/// Median running-min of `‖grad‖²` must fall below this.
pub const GRAD_THRESHOLD: f64 = 1e-3;
/// Noiseless control: loss target and iteration allowance at η = 0.1.
pub const CONTROL_LOSS: f64 = 1e-8;
pub const CONTROL_ITERATIONS: usize = 400;
pub const CONTROL_ETA: f64 = 0.1;
/// Unstable constant step for the negative control (above 2/L with L = 1).
pub const UNSTABLE_ETA: f64 = 3.0;
pub const UNSTABLE_ITERATIONS: usize = 30;
/// Allowed band for `E‖R̄_m − R̄‖² / (σ²/m)`.
pub const VARIANCE_BAND: (f64, f64) = (0.8, 1.25);
/// Frontier monotonicity slack, relative to `1 + ‖X‖²`.
pub const FRONTIER_TOL: f64 = 1e-12;
/// Distortion allowed when every singular direction is kept.
pub const FULL_RANK_DISTORTION: f64 = 1e-18;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentId {
    Projopt,
    Tailbound,
    Converge,
    Ratedist,
    Ensemble,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 5] = [
        ExperimentId::Projopt,
        ExperimentId::Tailbound,
        ExperimentId::Converge,
        ExperimentId::Ratedist,
        ExperimentId::Ensemble,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentId::Projopt => "projopt",
            ExperimentId::Tailbound => "tailbound",
            ExperimentId::Converge => "converge",
            ExperimentId::Ratedist => "ratedist",
            ExperimentId::Ensemble => "ensemble",
        }
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ExperimentId::ALL
            .into_iter()
            .find(|id| id.name() == s)
            .map_or_else(|| arg_err(format!("unknown experiment {s:?}")), Ok)
    }
}

/// Inputs to one experiment. Fields an experiment does not use are echoed but ignored.
///
/// | experiment | shape | ranks | samples |
/// |---|---|---|---|
/// | projopt | matrix is `shape[0] × shape[1]` | projector rank `ranks[0]` | random projectors per seed |
/// | tailbound | per-mode maximum of the random shapes | unused (all triples) | tensors per seed |
/// | converge | ambient | manifold and target ranks | unused |
/// | ratedist | ambient | target ranks | unused |
/// | ensemble | ambient | query ranks | trials per ensemble size |
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: ExperimentId,
    pub shape: Shape,
    pub ranks: Ranks,
    /// Oracle noise level σ (`E‖ξ‖² = σ²`).
    pub sigma: f64,
    /// Entrywise noise added to synthetic targets to form instances.
    pub noise_floor: f64,
    pub seeds: Vec<u64>,
    pub iterations: usize,
    pub samples: usize,
    pub eps_grid: Vec<f64>,
    pub eps0: f64,
    pub tau: u64,
    pub lambdas: Vec<f64>,
    pub ensemble_sizes: Vec<usize>,
    pub eta0: f64,
    pub k0: f64,
    pub format: Format,
    /// Destination file; not part of the echo so reports do not depend on it.
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

/// `n` points spaced evenly in log between `lo` and `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            (0..n)
                .map(|i| match i {
                    0 => lo,
                    _ if i == n - 1 => hi,
                    _ => (a + (b - a) * i as f64 / (n - 1) as f64).exp(),
                })
                .collect()
        }
    }
}

impl ExperimentConfig {
    /// Desk-scale defaults for `id`.
    pub fn defaults(id: ExperimentId) -> Self {
        let base = ExperimentConfig {
            experiment: id,
            shape: [6, 6, 6],
            ranks: [2, 2, 2],
            sigma: 0.1,
            noise_floor: 0.5,
            seeds: (0..10).collect(),
            iterations: 5000,
            samples: 0,
            eps_grid: Vec::new(),
            eps0: 0.1,
            tau: 8,
            lambdas: vec![0.01],
            ensemble_sizes: Vec::new(),
            eta0: 0.5,
            k0: 100.0,
            format: Format::Csv,
            out: None,
        };
        match id {
            ExperimentId::Projopt => ExperimentConfig {
                shape: [6, 8, 1],
                seeds: (0..20).collect(),
                samples: 500,
                ..base
            },
            ExperimentId::Tailbound => ExperimentConfig {
                shape: [5, 5, 5],
                seeds: vec![0],
                samples: 100,
                ..base
            },
            ExperimentId::Converge => base,
            ExperimentId::Ratedist => ExperimentConfig {
                ranks: [3, 3, 3],
                noise_floor: 0.1,
                eps_grid: log_grid(1e-3, 0.999, 50),
                tau: 216,
                lambdas: vec![1e-3, 1e-2, 1e-1],
                ..base
            },
            ExperimentId::Ensemble => ExperimentConfig {
                shape: [4, 4, 4],
                sigma: 0.5,
                samples: 2000,
                ensemble_sizes: vec![1, 4, 16, 64],
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.contains(&0) {
            return arg_err(format!("shape {:?} must be positive", self.shape));
        }
        if self.seeds.is_empty() {
            return arg_err("seed list must be non-empty");
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return arg_err(format!("sigma must be finite and >= 0, got {}", self.sigma));
        }
        if !(self.noise_floor >= 0.0 && self.noise_floor.is_finite()) {
            return arg_err(format!(
                "noise floor must be finite and >= 0, got {}",
                self.noise_floor
            ));
        }
        if self.lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return arg_err(format!(
                "lambdas must be finite and >= 0, got {:?}",
                self.lambdas
            ));
        }
        let ranks_ok = (0..3).all(|n| self.ranks[n] >= 1 && self.ranks[n] <= self.shape[n]);
        match self.experiment {
            ExperimentId::Projopt => {
                if self.ranks[0] == 0 || self.ranks[0] > self.shape[0] {
                    return arg_err(format!(
                        "projector rank {} must be in 1..={}",
                        self.ranks[0], self.shape[0]
                    ));
                }
                if self.samples == 0 {
                    return arg_err("samples must be positive");
                }
            }
            ExperimentId::Tailbound => {
                if self.samples == 0 {
                    return arg_err("samples must be positive");
                }
            }
            ExperimentId::Converge => {
                if !ranks_ok {
                    return arg_err(format!(
                        "ranks {:?} invalid for shape {:?}",
                        self.ranks, self.shape
                    ));
                }
                if self.iterations == 0 {
                    return arg_err("iterations must be positive");
                }
                StepSchedule::robbins_monro(self.eta0, self.k0).validate()?;
                check_eps(self.eps0)?;
            }
            ExperimentId::Ratedist => {
                if !ranks_ok {
                    return arg_err(format!(
                        "ranks {:?} invalid for shape {:?}",
                        self.ranks, self.shape
                    ));
                }
                if self.eps_grid.is_empty() {
                    return arg_err("eps grid must be non-empty");
                }
                self.eps_grid.iter().try_for_each(|&e| check_eps(e))?;
            }
            ExperimentId::Ensemble => {
                if !ranks_ok {
                    return arg_err(format!(
                        "ranks {:?} invalid for shape {:?}",
                        self.ranks, self.shape
                    ));
                }
                if self.samples == 0
                    || self.ensemble_sizes.is_empty()
                    || self.ensemble_sizes.contains(&0)
                {
                    return arg_err("samples and ensemble sizes must be positive and non-empty");
                }
                check_eps(self.eps0)?;
            }
        }
        Ok(())
    }

    fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config is plain data")
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps < 1.0 {
        Ok(())
    } else {
        arg_err(format!("eps must lie in (0, 1), got {eps}"))
    }
}

/// Run the experiment named in `cfg`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    match cfg.experiment {
        ExperimentId::Projopt => exp_projector_optimality(cfg),
        ExperimentId::Tailbound => exp_tail_bound(cfg),
        ExperimentId::Converge => exp_convergence(cfg),
        ExperimentId::Ratedist => exp_rate_distortion(cfg),
        ExperimentId::Ensemble => exp_ensemble_variance(cfg),
    }
}

fn per_seed<T: Send>(seeds: &[u64], f: impl Fn(u64) -> Result<T> + Sync) -> Result<Vec<T>> {
    seeds.par_iter().map(|&s| f(s)).collect()
}

/// `‖A − UUᵀA‖²_F = ‖A‖² − ‖UᵀA‖²` for orthonormal `U`.
pub fn projector_residual(a: &Matrix, u: &Matrix) -> f64 {
    a.frobenius_norm_sq() - u.tmul_unchecked(a).frobenius_norm_sq()
}

struct ProjoptSeed {
    optimal: f64,
    best_random: f64,
    violations: usize,
}

pub fn exp_projector_optimality(cfg: &ExperimentConfig) -> Result<Report> {
    let (m, n, r) = (cfg.shape[0], cfg.shape[1], cfg.ranks[0]);
    let results = per_seed(&cfg.seeds, |seed| {
        let mut rng = SeededRng::derive(seed, 0x7072_6f6a);
        let a = rng.gaussian_matrix(m, n);
        let (u, _) = a.left_singular();
        let optimal = projector_residual(&a, &u.leading_columns(r));
        let scale = 1.0 + a.frobenius_norm_sq();
        let mut best_random = f64::INFINITY;
        let mut violations = 0;
        for _ in 0..cfg.samples {
            let p = qr_retraction(&rng.gaussian_matrix(m, r))?;
            let res = projector_residual(&a, p.matrix());
            best_random = best_random.min(res);
            if res < optimal - PROJECTOR_TOL * scale {
                violations += 1;
            }
        }
        Ok(ProjoptSeed {
            optimal,
            best_random,
            violations,
        })
    })?;

    let mut rep = Report::new(
        "projopt",
        cfg.echo(),
        &[
            "seed",
            "rows",
            "cols",
            "rank",
            "projectors",
            "optimal_residual",
            "best_random_residual",
            "margin",
            "violations",
        ],
        "margin",
    )?;
    let mut total = 0;
    for (&seed, s) in cfg.seeds.iter().zip(&results) {
        total += s.violations;
        rep.push_row(vec![
            seed.into(),
            m.into(),
            n.into(),
            r.into(),
            cfg.samples.into(),
            s.optimal.into(),
            s.best_random.into(),
            // Clamp rounding noise in the exact-rank case to a clean zero.
            (s.best_random - s.optimal).max(0.0).into(),
            s.violations.into(),
        ])?;
    }
    rep.add_check("violations", total, "== 0", total == 0);
    Ok(rep.finish())
}

struct TailRow {
    shape: Shape,
    triples: usize,
    violations: usize,
    max_ratio: Option<f64>,
    max_excess: f64,
}

pub fn exp_tail_bound(cfg: &ExperimentConfig) -> Result<Report> {
    let per = per_seed(&cfg.seeds, |seed| {
        (0..cfg.samples)
            .map(|t| {
                let mut rng = SeededRng::derive(seed, 0x7461_0000 + t as u64);
                let shape = cfg.shape.map(|d| rng.int_inclusive(1, d));
                let x = rng.gaussian_tensor(shape);
                let f = hosvd(&x);
                let mut row = TailRow {
                    shape,
                    triples: 0,
                    violations: 0,
                    max_ratio: None,
                    max_excess: f64::NEG_INFINITY,
                };
                for r0 in 0..=shape[0] {
                    for r1 in 0..=shape[1] {
                        for r2 in 0..=shape[2] {
                            let ranks = [r0, r1, r2];
                            let residual = truncated_reconstruct(&f, ranks)?.distance(&x).powi(2);
                            let tail = tail_energy(&f, ranks)?;
                            row.triples += 1;
                            row.max_excess = row.max_excess.max(residual - tail);
                            if residual > tail + TAIL_BOUND_TOL {
                                row.violations += 1;
                            }
                            // Tails at rounding level make the ratio meaningless.
                            if tail > 1e-12 * x.norm_sq() {
                                let ratio = residual / tail;
                                row.max_ratio =
                                    Some(row.max_ratio.map_or(ratio, |m: f64| m.max(ratio)));
                            }
                        }
                    }
                }
                Ok(row)
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mut rep = Report::new(
        "tailbound",
        cfg.echo(),
        &[
            "seed",
            "tensor",
            "i",
            "j",
            "k",
            "rank_triples",
            "violations",
            "max_slack_ratio",
            "max_excess",
        ],
        "max_slack_ratio",
    )?;
    let mut total = 0;
    let mut triples = 0;
    for (&seed, rows) in cfg.seeds.iter().zip(&per) {
        for (t, row) in rows.iter().enumerate() {
            total += row.violations;
            triples += row.triples;
            rep.push_row(vec![
                seed.into(),
                t.into(),
                row.shape[0].into(),
                row.shape[1].into(),
                row.shape[2].into(),
                row.triples.into(),
                row.violations.into(),
                row.max_ratio.into(),
                row.max_excess.into(),
            ])?;
        }
    }
    rep.add_check("violations", total, "== 0", total == 0);
    rep.add_check("rank_triples_checked", triples, "> 0", triples > 0);
    Ok(rep.finish())
}

fn log_checkpoints(len: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut decade = 1;
    while decade <= len {
        for m in [1, 2, 5] {
            let k = m * decade;
            if k <= len {
                out.push(k);
            }
        }
        decade *= 10;
    }
    if out.last() != Some(&len) && len > 0 {
        out.push(len);
    }
    out
}

fn convergence_run(
    cfg: &ExperimentConfig,
    seed: u64,
    sigma: f64,
    schedule: StepSchedule,
    iterations: usize,
    ranks: Ranks,
) -> Result<RunTrace> {
    let inst = gen_synthetic(cfg.shape, cfg.ranks, cfg.noise_floor, seed)?;
    let x0 = TuckerPoint::from_tensor(&inst.instance, ranks)?;
    let task_id = (seed & 0xffff_ffff) as u32;
    let lambda = cfg.lambdas.first().copied().unwrap_or(0.0);
    let task = TaskSpec::new(inst.target.clone(), task_id, lambda, cfg.tau)?;
    let oracle = SimulatedOracle::new(
        OracleConfig::new(sigma, seed, MeanMap::IdentityCompletion)?,
        task_id,
        inst.target,
    );
    let mut run_cfg = CqdConfig::new(schedule, cfg.eps0, iterations);
    run_cfg.query_seed = seed;
    run_cqd(&x0, &task, &oracle, &run_cfg)
        .map(|o| o.trace)
        .map_err(|f| f.error)
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

pub fn exp_convergence(cfg: &ExperimentConfig) -> Result<Report> {
    let schedule = StepSchedule::robbins_monro(cfg.eta0, cfg.k0);
    let traces = per_seed(&cfg.seeds, |seed| {
        convergence_run(cfg, seed, cfg.sigma, schedule, cfg.iterations, cfg.ranks)
    })?;

    let mut rep = Report::new(
        "converge",
        cfg.echo(),
        &[
            "seed",
            "iterations",
            "initial_loss",
            "final_loss",
            "running_min_grad_sq",
            "crossing_iteration",
            "max_budget",
            "max_query_bytes",
        ],
        "running_min_grad_sq",
    )?;
    let checkpoints = log_checkpoints(cfg.iterations);
    for (&seed, trace) in cfg.seeds.iter().zip(&traces) {
        let rm = trace.running_min_grad_norm_sq();
        rep.push_row(vec![
            seed.into(),
            trace.len().into(),
            trace.rows.first().map(|r| r.loss).into(),
            trace.final_loss.into(),
            rm.last().copied().into(),
            trace.first_crossing(GRAD_THRESHOLD).into(),
            trace.rows.iter().map(|r| r.budget).max().into(),
            trace.rows.iter().map(|r| r.query_bytes).max().into(),
        ])?;
        rep.series.push(Series {
            label: format!("running_min_grad_sq/seed={seed}"),
            points: checkpoints.iter().map(|&k| (k as f64, rm[k - 1])).collect(),
        });
    }
    let med = median(rep.column_values("running_min_grad_sq"));
    rep.add_check(
        "median_running_min_grad_sq",
        med,
        &format!("< {GRAD_THRESHOLD:e}"),
        med.is_some_and(|m| m < GRAD_THRESHOLD),
    );
    let over_budget = traces
        .iter()
        .flat_map(|t| &t.rows)
        .filter(|r| r.budget > cfg.tau)
        .count();
    rep.add_check(
        "iterations_over_budget",
        over_budget,
        "== 0",
        over_budget == 0,
    );

    // Controls on the first seed, both noiseless.
    let seed = cfg.seeds[0];
    let det = convergence_run(
        cfg,
        seed,
        0.0,
        StepSchedule::constant(CONTROL_ETA),
        CONTROL_ITERATIONS,
        cfg.ranks,
    )?;
    let reached = det.loss_path().iter().position(|&l| l < CONTROL_LOSS);
    rep.add_check(
        "noiseless_iterations_to_loss_1e-8",
        reached,
        &format!("<= {CONTROL_ITERATIONS}"),
        reached.is_some_and(|k| k <= CONTROL_ITERATIONS),
    );
    let unstable = convergence_run(
        cfg,
        seed,
        0.0,
        StepSchedule::constant(UNSTABLE_ETA),
        UNSTABLE_ITERATIONS,
        cfg.shape,
    )?;
    let path = unstable.loss_path();
    let diverged = path.windows(2).all(|w| w[1] > w[0]);
    rep.add_check(
        "unstable_step_loss_growth",
        path.last().copied().unwrap_or(0.0) / path[0].max(f64::MIN_POSITIVE),
        "strictly increasing loss",
        diverged,
    );
    Ok(rep.finish())
}

struct SweepPoint {
    eps: f64,
    ranks: Ranks,
    budget: u64,
    distortion: f64,
}

pub fn exp_rate_distortion(cfg: &ExperimentConfig) -> Result<Report> {
    let full_budget = budget(cfg.shape);
    let sweeps = per_seed(&cfg.seeds, |seed| {
        let x = gen_synthetic(cfg.shape, cfg.ranks, cfg.noise_floor, seed)?.instance;
        let f = hosvd(&x);
        let points = cfg
            .eps_grid
            .iter()
            .map(|&eps| {
                let cs = asm_from_hosvd(&f, eps)?;
                Ok(SweepPoint {
                    eps,
                    ranks: cs.ranks(),
                    budget: cs.budget(),
                    distortion: cs.masked_tensor().distance(&x).powi(2),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((points, x.norm_sq()))
    })?;

    let lambda_cols: Vec<String> = cfg
        .lambdas
        .iter()
        .map(|l| format!("lagrangian_{l}"))
        .collect();
    let mut columns = vec![
        "seed",
        "grid_index",
        "eps",
        "r1",
        "r2",
        "r3",
        "budget",
        "payload_bytes",
        "within_tau",
        "distortion",
    ];
    columns.extend(lambda_cols.iter().map(String::as_str));
    let mut rep = Report::new("ratedist", cfg.echo(), &columns, "distortion")?;

    let mut non_monotone = 0;
    let mut full_rank_worst: Option<f64> = None;
    for (&seed, (points, norm_sq)) in cfg.seeds.iter().zip(&sweeps) {
        for (g, p) in points.iter().enumerate() {
            let mut row: Vec<Cell> = vec![
                seed.into(),
                g.into(),
                p.eps.into(),
                p.ranks[0].into(),
                p.ranks[1].into(),
                p.ranks[2].into(),
                p.budget.into(),
                payload_bytes(p.ranks).into(),
                (p.budget <= cfg.tau).into(),
                p.distortion.into(),
            ];
            row.extend(
                cfg.lambdas
                    .iter()
                    .map(|l| Cell::float(p.distortion + l * p.budget as f64)),
            );
            rep.push_row(row)?;
            if p.budget == full_budget {
                full_rank_worst =
                    Some(full_rank_worst.map_or(p.distortion, |w: f64| w.max(p.distortion)));
            }
        }
        let mut by_budget: Vec<&SweepPoint> = points.iter().collect();
        by_budget.sort_by_key(|p| p.budget);
        let tol = FRONTIER_TOL * (1.0 + norm_sq);
        non_monotone += by_budget
            .windows(2)
            .filter(|w| w[1].distortion > w[0].distortion + tol)
            .count();
    }
    rep.add_check(
        "frontier_monotone_breaks",
        non_monotone,
        "== 0",
        non_monotone == 0,
    );
    rep.add_check(
        "full_rank_distortion",
        full_rank_worst,
        &format!("<= {FULL_RANK_DISTORTION:e}"),
        full_rank_worst.is_none_or(|d| d <= FULL_RANK_DISTORTION),
    );
    let ratio = payload_bytes([2, 2, 2]) as f64 / payload_bytes([20, 20, 20]) as f64;
    rep.add_check("payload_ratio_2^3_in_20^3", ratio, "== 1e-3", ratio == 1e-3);
    Ok(rep.finish())
}

pub fn exp_ensemble_variance(cfg: &ExperimentConfig) -> Result<Report> {
    let sigma2 = cfg.sigma * cfg.sigma;
    let per = per_seed(&cfg.seeds, |seed| {
        let inst = gen_synthetic(cfg.shape, cfg.ranks, 0.0, seed)?;
        let task_id = (seed & 0xffff_ffff) as u32;
        let oracle = SimulatedOracle::new(
            OracleConfig::new(cfg.sigma, seed, MeanMap::IdentityCompletion)?,
            task_id,
            inst.target.clone(),
        );
        let query = encode(&asm_compress(&inst.target, cfg.eps0)?, task_id, seed)?;
        cfg.ensemble_sizes
            .iter()
            .map(|&m| {
                let mut acc = 0.0;
                for t in 0..cfg.samples {
                    let req = OracleRequest::new(&query, (t * m) as u64);
                    let r = ensemble_infer(&oracle, &req, m, Aggregator::Mean)?;
                    acc += r.payload.distance(&inst.target).powi(2);
                }
                Ok(acc / cfg.samples as f64)
            })
            .collect::<Result<Vec<f64>>>()
    })?;

    let mut rep = Report::new(
        "ensemble",
        cfg.echo(),
        &["seed", "m", "trials", "mean_sq_error", "expected", "ratio"],
        "ratio",
    )?;
    let (lo, hi) = VARIANCE_BAND;
    let mut out_of_band = 0usize;
    let mut not_decreasing = 0usize;
    for (&seed, vars) in cfg.seeds.iter().zip(&per) {
        for (&m, &v) in cfg.ensemble_sizes.iter().zip(vars) {
            let expected = sigma2 / m as f64;
            let ratio = (expected > 0.0).then(|| v / expected);
            let ok = match ratio {
                Some(q) => (lo..=hi).contains(&q),
                None => v == 0.0,
            };
            if !ok {
                out_of_band += 1;
            }
            rep.push_row(vec![
                seed.into(),
                m.into(),
                cfg.samples.into(),
                v.into(),
                expected.into(),
                ratio.into(),
            ])?;
        }
        if sigma2 > 0.0 {
            let mut order: Vec<(usize, f64)> = cfg
                .ensemble_sizes
                .iter()
                .copied()
                .zip(vars.iter().copied())
                .collect();
            order.sort_by_key(|&(m, _)| m);
            not_decreasing += order
                .windows(2)
                .filter(|w| w[0].0 < w[1].0 && w[1].1 >= w[0].1)
                .count();
        }
    }
    rep.add_check(
        "ratio_out_of_band",
        out_of_band,
        &format!("== 0 (band [{lo}, {hi}])"),
        out_of_band == 0,
    );
    rep.add_check(
        "variance_not_decreasing_in_m",
        not_decreasing,
        "== 0",
        not_decreasing == 0,
    );
    Ok(rep.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(id: ExperimentId) -> ExperimentConfig {
        let mut c = ExperimentConfig::defaults(id);
        c.seeds = vec![0, 1];
        c
    }

    #[test]
    fn log_grid_endpoints() {
        let g = log_grid(1e-6, 0.999, 50);
        assert_eq!(g.len(), 50);
        assert_eq!((g[0], g[49]), (1e-6, 0.999));
        assert!(g.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(log_checkpoints(25), vec![1, 2, 5, 10, 20, 25]);
    }

    #[test]
    fn projector_full_rank_and_exact_rank() {
        let mut c = quick(ExperimentId::Projopt);
        c.samples = 50;
        c.ranks[0] = 6;
        let r = run_experiment(&c).unwrap();
        assert!(r.pass);
        assert!(r
            .column_values("optimal_residual")
            .iter()
            .all(|v| v.abs() < 1e-10));
        assert!(r
            .column_values("best_random_residual")
            .iter()
            .all(|v| v.abs() < 1e-10));

        let mut rng = SeededRng::new(5);
        let u = rng.orthonormal(6, 2);
        let a = u.matmul(&rng.gaussian_matrix(2, 8)).unwrap();
        let (top, _) = a.left_singular();
        assert!(projector_residual(&a, &top.leading_columns(2)).abs() < 1e-10);
        let p = qr_retraction(&rng.gaussian_matrix(6, 2)).unwrap();
        assert!(projector_residual(&a, p.matrix()) > 1e-3);
    }

    #[test]
    fn tail_bound_small_shapes() {
        let mut c = quick(ExperimentId::Tailbound);
        c.shape = [3, 3, 2];
        c.samples = 5;
        let r = run_experiment(&c).unwrap();
        assert!(r.pass, "{:?}", r.checks);
        assert_eq!(r.rows.len(), 10);
        assert!(r
            .column_values("max_slack_ratio")
            .iter()
            .all(|&q| q <= 1.0 + 1e-9));
    }

    #[test]
    fn rate_distortion_extremes() {
        let mut c = quick(ExperimentId::Ratedist);
        c.eps_grid = vec![1e-9, 0.3, 0.999];
        let r = run_experiment(&c).unwrap();
        assert!(r.pass, "{:?}", r.checks);
        let budgets = r.column_values("budget");
        let dist = r.column_values("distortion");
        assert_eq!(budgets[0], 216.0);
        assert!(dist[0] <= 1e-18);
        assert_eq!(budgets[2], 1.0);
        assert!(dist[2] >= dist[1]);
    }

    #[test]
    fn noiseless_ensemble_has_zero_variance() {
        let mut c = quick(ExperimentId::Ensemble);
        c.sigma = 0.0;
        c.samples = 3;
        let r = run_experiment(&c).unwrap();
        assert!(r.pass, "{:?}", r.checks);
        assert!(r.column_values("mean_sq_error").iter().all(|&v| v == 0.0));
    }

    #[test]
    fn config_validation() {
        let mut c = ExperimentConfig::defaults(ExperimentId::Converge);
        c.seeds.clear();
        assert!(run_experiment(&c).is_err());
        let mut c = ExperimentConfig::defaults(ExperimentId::Converge);
        c.shape = [0, 6, 6];
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::defaults(ExperimentId::Ratedist);
        c.eps_grid = vec![1.5];
        assert!(c.validate().is_err());
        assert_eq!(
            "ensemble".parse::<ExperimentId>().unwrap(),
            ExperimentId::Ensemble
        );
        assert!("nope".parse::<ExperimentId>().is_err());
    }

    #[test]
    fn row_count_is_seeds_times_grid() {
        let mut c = quick(ExperimentId::Ratedist);
        c.eps_grid = log_grid(1e-3, 0.9, 7);
        assert_eq!(run_experiment(&c).unwrap().rows.len(), 14);
    }
}
