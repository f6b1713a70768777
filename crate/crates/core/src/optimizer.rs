//! The CQD outer loop: compress, encode, delegate, retract.
//!
//! Each iteration
//!
//! 1. masks the current iterate with ASM (raising ε until `r₁r₂r₃ ≤ τ`),
//! 2. encodes the masked core into a query,
//! 3. asks the oracle (once, or an ensemble of `m` draws),
//! 4. turns the response into an ambient gradient, projects it onto the
//!    tangent space of the fixed-rank manifold and retracts with step `ηₖ`.
//!
//! The gradient is taken at the unmasked iterate; masking only governs what is
//! transmitted. Diagnostics in the trace (loss, gradient norm) use the hidden
//! target and never feed back into the iteration.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::codec::encode;
use crate::error::{arg_err, Error, Result};
use crate::manifold::{riemannian_grad_tucker, tucker_retract, TuckerPoint};
use crate::masking::{asm_from_hosvd, budget, mask_set, EpsController};
use crate::oracle::{ensemble_infer, Aggregator, MeanMap, Oracle, OracleRequest, OracleResponse};
use crate::tensor::{hosvd, Ranks, Tensor3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// `f(X; R) = ½‖X − R‖²_F`.
    Quadratic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    /// Ground truth; visible to the oracle and to diagnostics only.
    pub target: Tensor3,
    pub task_id: u32,
    pub loss: Loss,
    /// Budget multiplier in the Lagrangian `loss + λ·budget`.
    pub lambda: f64,
    /// Budget cap on `r₁r₂r₃`.
    pub tau: u64,
}

impl TaskSpec {
    pub fn new(target: Tensor3, task_id: u32, lambda: f64, tau: u64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return arg_err(format!("lambda must be finite and >= 0, got {lambda}"));
        }
        Ok(Self {
            target,
            task_id,
            loss: Loss::Quadratic,
            lambda,
            tau,
        })
    }

    /// `F(X) = ½‖X − T‖²`.
    pub fn loss(&self, x: &Tensor3) -> f64 {
        0.5 * x.distance(&self.target).powi(2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    RobbinsMonro,
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub kind: ScheduleKind,
    pub eta0: f64,
    pub k0: f64,
}

impl StepSchedule {
    /// `ηₖ = η₀ / (1 + k/k₀)`: divergent sum, convergent sum of squares.
    pub fn robbins_monro(eta0: f64, k0: f64) -> Self {
        Self {
            kind: ScheduleKind::RobbinsMonro,
            eta0,
            k0,
        }
    }

    pub fn constant(eta: f64) -> Self {
        Self {
            kind: ScheduleKind::Constant,
            eta0: eta,
            k0: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) || !(self.k0 > 0.0 && self.k0.is_finite()) {
            return arg_err(format!("invalid schedule {self:?}"));
        }
        Ok(())
    }

    pub fn step_size(&self, k: u64) -> f64 {
        step_size(k, self)
    }
}

pub fn step_size(k: u64, s: &StepSchedule) -> f64 {
    match s.kind {
        ScheduleKind::RobbinsMonro => s.eta0 / (1.0 + k as f64 / s.k0),
        ScheduleKind::Constant => s.eta0,
    }
}

/// How each iteration consults the oracle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Delegation {
    Single,
    Ensemble { m: usize, agg: Aggregator },
}

impl Delegation {
    fn draws_per_iteration(&self) -> u64 {
        match *self {
            Delegation::Single => 1,
            Delegation::Ensemble { m, .. } => m as u64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CqdConfig {
    pub schedule: StepSchedule,
    pub eps0: f64,
    pub iterations: usize,
    pub controller: EpsController,
    /// Written into every query's seed field.
    pub query_seed: u64,
    pub mean_map: MeanMap,
}

impl CqdConfig {
    pub fn new(schedule: StepSchedule, eps0: f64, iterations: usize) -> Self {
        Self {
            schedule,
            eps0,
            iterations,
            controller: EpsController::default(),
            query_seed: 0,
            mean_map: MeanMap::IdentityCompletion,
        }
    }
}

/// One iteration's diagnostics, recorded before the update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub k: u64,
    /// `F(Xₖ) = ½‖Xₖ − T‖²`.
    pub loss: f64,
    /// `‖grad F(Xₖ)‖²`, the Riemannian gradient of the true objective.
    pub grad_norm_sq: f64,
    /// Squared norm of the stochastic Riemannian gradient actually used.
    pub stoch_grad_norm_sq: f64,
    pub ranks: Ranks,
    pub budget: u64,
    /// Budget at one controller step smaller ε (one step larger ranks).
    pub budget_relaxed: u64,
    pub eta: f64,
    /// Accepted ε for this iteration.
    pub eps: f64,
    /// `‖Xₖ − Ψ_ASM(Xₖ)‖²`.
    pub distortion: f64,
    pub query_bytes: usize,
    /// `loss + λ·budget`.
    pub lagrangian: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub rows: Vec<TraceRow>,
    /// Loss at the returned point (after the last update).
    pub final_loss: Option<f64>,
}

impl RunTrace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `min_{j ≤ k} ‖grad F(X_j)‖²` for every k.
    pub fn running_min_grad_norm_sq(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.rows
            .iter()
            .map(|r| {
                best = best.min(r.grad_norm_sq);
                best
            })
            .collect()
    }

    /// First iteration whose gradient norm² falls below `threshold`.
    pub fn first_crossing(&self, threshold: f64) -> Option<u64> {
        self.rows
            .iter()
            .find(|r| r.grad_norm_sq < threshold)
            .map(|r| r.k)
    }

    /// Losses `F(X₀), …, F(X_K)` including the final point.
    pub fn loss_path(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.rows.iter().map(|r| r.loss).collect();
        v.extend(self.final_loss);
        v
    }

    /// Fraction of rows whose Lagrangian at the accepted ε is no worse than
    /// at one controller step larger ranks.
    pub fn lagrangian_consistency(&self, lambda: f64) -> f64 {
        if self.rows.is_empty() {
            return 1.0;
        }
        let ok = self
            .rows
            .iter()
            .filter(|r| r.lagrangian <= r.loss + lambda * r.budget_relaxed as f64)
            .count();
        ok as f64 / self.rows.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub point: TuckerPoint,
    pub trace: RunTrace,
}

/// A run that stopped early; the trace covers the completed iterations.
#[derive(Clone, Debug, PartialEq)]
pub struct RunFailure {
    pub trace: RunTrace,
    pub error: Error,
}

impl fmt::Display for RunFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "run aborted after {} iterations: {}",
            self.trace.len(),
            self.error
        )
    }
}

impl std::error::Error for RunFailure {}

/// Ambient Euclidean gradient surrogate from an oracle response.
///
/// For an identity-completion response `R ≈ T` this is `X − R`, the gradient
/// of `½‖X − R‖²`. A residual response already carries the corrective
/// direction `R ≈ T − X̂`, so the surrogate is `−R`.
pub fn stochastic_grad(
    x: &Tensor3,
    response: &OracleResponse,
    task: &TaskSpec,
    mean_map: MeanMap,
) -> Result<Tensor3> {
    let r = &response.payload;
    if r.shape() != x.shape() || task.target.shape() != x.shape() {
        return arg_err(format!(
            "shape mismatch: iterate {:?}, response {:?}, target {:?}",
            x.shape(),
            r.shape(),
            task.target.shape()
        ));
    }
    match (task.loss, mean_map) {
        (Loss::Quadratic, MeanMap::IdentityCompletion) => x.checked_sub(r),
        (Loss::Quadratic, MeanMap::Residual) => Ok(r.scale(-1.0)),
    }
}

/// The CQD loop with a single oracle draw per iteration (draw index `k`).
pub fn run_cqd(
    x0: &TuckerPoint,
    task: &TaskSpec,
    oracle: &impl Oracle,
    cfg: &CqdConfig,
) -> std::result::Result<RunOutcome, RunFailure> {
    run_loop(x0, task, oracle, cfg, Delegation::Single)
}

/// The CQD loop with an `m`-draw ensemble in place of the single draw.
/// Iteration `k` uses draw indices `k·m .. k·m + m`.
pub fn run_cqd_ensemble(
    x0: &TuckerPoint,
    task: &TaskSpec,
    oracle: &impl Oracle,
    cfg: &CqdConfig,
    m: usize,
    agg: Aggregator,
) -> std::result::Result<RunOutcome, RunFailure> {
    run_loop(x0, task, oracle, cfg, Delegation::Ensemble { m, agg })
}

pub fn run_with(
    x0: &TuckerPoint,
    task: &TaskSpec,
    oracle: &impl Oracle,
    cfg: &CqdConfig,
    delegation: Delegation,
) -> std::result::Result<RunOutcome, RunFailure> {
    run_loop(x0, task, oracle, cfg, delegation)
}

fn run_loop(
    x0: &TuckerPoint,
    task: &TaskSpec,
    oracle: &impl Oracle,
    cfg: &CqdConfig,
    delegation: Delegation,
) -> std::result::Result<RunOutcome, RunFailure> {
    let fail = |trace: RunTrace, error: Error| RunFailure { trace, error };
    let mut trace = RunTrace {
        rows: Vec::with_capacity(cfg.iterations),
        final_loss: None,
    };

    if let Err(e) = cfg.schedule.validate() {
        return Err(fail(trace, e));
    }
    if x0.ambient_shape() != task.target.shape() {
        return Err(fail(
            trace,
            Error::Argument("x0 and target shapes differ".into()),
        ));
    }
    if cfg.iterations == 0 {
        return Err(fail(
            trace,
            Error::Argument("iterations must be >= 1".into()),
        ));
    }
    if let Delegation::Ensemble { m: 0, .. } = delegation {
        return Err(fail(
            trace,
            Error::Argument("ensemble size must be >= 1".into()),
        ));
    }

    let mut point = x0.clone();
    let mut eps = cfg.eps0;
    let draws = delegation.draws_per_iteration();

    for k in 0..cfg.iterations as u64 {
        let step = (|| -> Result<(TraceRow, TuckerPoint, f64)> {
            let x = point.to_tensor();
            let f = hosvd(&x);
            let (cs, eps_acc) = cfg.controller.compress_within_budget(&f, eps, task.tau)?;
            let query = encode(&cs, task.task_id, cfg.query_seed)?;

            let request = OracleRequest {
                query: &query,
                frame: Some(&cs.masked_factors),
                draw: k * draws,
            };
            let response = match delegation {
                Delegation::Single => oracle.infer(&request)?,
                Delegation::Ensemble { m, agg } => ensemble_infer(oracle, &request, m, agg)?,
            };

            let egrad = stochastic_grad(&x, &response, task, cfg.mean_map)?;
            let rgrad = riemannian_grad_tucker(&point, &egrad)?;
            let true_grad = riemannian_grad_tucker(&point, &(&x - &task.target))?;
            let eta = cfg.schedule.step_size(k);

            let loss = task.loss(&x);
            let b = cs.budget();
            let relaxed = cfg.controller.eps_min.max(eps_acc * cfg.controller.down);
            let budget_relaxed = budget(mask_set(&f, relaxed)?.ranks);
            let row = TraceRow {
                k,
                loss,
                grad_norm_sq: true_grad.embed(&point).norm_sq(),
                stoch_grad_norm_sq: rgrad.embed(&point).norm_sq(),
                ranks: cs.ranks(),
                budget: b,
                budget_relaxed,
                eta,
                eps: eps_acc,
                distortion: cs.masked_tensor().distance(&x).powi(2),
                query_bytes: query.len(),
                lagrangian: loss + task.lambda * b as f64,
            };
            let next = tucker_retract(&point, &rgrad.scale(-1.0), eta)?;
            let next_eps = cfg.controller.adapt(eps_acc, b, task.tau);
            Ok((row, next, next_eps))
        })();

        match step {
            Ok((row, next, next_eps)) => {
                trace.rows.push(row);
                point = next;
                eps = next_eps;
            }
            Err(e) => return Err(fail(trace, e)),
        }
    }
    trace.final_loss = Some(task.loss(&point.to_tensor()));
    Ok(RunOutcome { point, trace })
}

/// Settings for [`descent_certificate`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateConfig {
    /// Smoothness constant of the pulled-back objective (1 for quadratic loss).
    pub lipschitz: f64,
    /// Oracle noise level, `E‖ξ‖² = sigma²`.
    pub sigma: f64,
    /// Ambient dimension over which the noise is spread.
    pub noise_dim: usize,
    /// Iterations per window.
    pub window: usize,
    /// Width of the statistical slack in standard deviations.
    pub sigma_band: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescentReport {
    pub windows: usize,
    pub violations: usize,
    pub violation_rate: f64,
    /// Iterations with `η ≥ 2/L`, where the inequality certifies no descent.
    pub out_of_regime: usize,
    /// Largest shortfall of observed decrease below the bound (0 if none).
    pub max_shortfall: f64,
}

/// Empirical check of the expected-descent inequality
///
/// ```text
/// F(X_k) − F(X_{k+1}) ≥ (η − Lη²/2)·‖grad F(X_k)‖² − Lη²σ²/2
/// ```
///
/// summed over windows of `cfg.window` iterations, with a slack of
/// `sigma_band` standard deviations of the noise-driven fluctuation of the
/// window sum (zero when `sigma = 0`) plus a rounding allowance. A window
/// also counts as a violation if any of its steps has `η ≥ 2/L`.
pub fn descent_certificate(trace: &RunTrace, cfg: &CertificateConfig) -> DescentReport {
    let losses = trace.loss_path();
    let n = trace.rows.len().min(losses.len().saturating_sub(1));
    let l = cfg.lipschitz;
    let s2 = cfg.sigma * cfg.sigma;
    let dim = cfg.noise_dim.max(1) as f64;
    let window = cfg.window.max(1);

    let mut windows = 0;
    let mut violations = 0;
    let mut out_of_regime = 0;
    let mut max_shortfall: f64 = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + window).min(n);
        let (mut dec, mut bound, mut var, mut round) = (0.0, 0.0, 0.0, 0.0);
        let mut bad_regime = false;
        for k in start..end {
            let row = &trace.rows[k];
            let eta = row.eta;
            let g = row.grad_norm_sq;
            if eta * l >= 2.0 {
                bad_regime = true;
                out_of_regime += 1;
            }
            dec += losses[k] - losses[k + 1];
            bound += (eta - 0.5 * l * eta * eta) * g - 0.5 * l * eta * eta * s2;
            var += eta * eta * (1.0 - l * eta).powi(2) * g * s2 / dim
                + eta.powi(4) * s2 * s2 / (2.0 * dim);
            round += 1e-12 * (1.0 + losses[k].abs());
        }
        let slack = cfg.sigma_band * var.sqrt() + round;
        let shortfall = bound - slack - dec;
        windows += 1;
        if shortfall > 0.0 || bad_regime {
            violations += 1;
            max_shortfall = max_shortfall.max(shortfall);
        }
        start = end;
    }
    DescentReport {
        windows,
        violations,
        violation_rate: if windows == 0 {
            0.0
        } else {
            violations as f64 / windows as f64
        },
        out_of_regime,
        max_shortfall,
    }
}

/// Distortion at an arbitrary ε, for callers that sweep ε offline.
pub fn asm_distortion(x: &Tensor3, eps: f64) -> Result<(Ranks, f64)> {
    let cs = asm_from_hosvd(&hosvd(x), eps)?;
    Ok((cs.ranks(), cs.masked_tensor().distance(x).powi(2)))
}
