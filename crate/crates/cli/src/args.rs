use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Subcommand};
use cqd_core::experiments::{log_grid, ExperimentConfig, ExperimentId};
use cqd_core::report::Format;

#[derive(Subcommand, Clone, Debug)]
pub enum Command {
    /// Top-r singular projector versus random rank-r projectors
    Projopt(Common),
    /// Truncation residual versus tail energy over all rank triples
    Tailbound(Common),
    /// Stochastic Riemannian runs with a Robbins–Monro schedule
    Converge(Common),
    /// Budget / distortion frontier over an eps grid
    Ratedist(Common),
    /// Variance of the mean-aggregated oracle ensemble
    Ensemble(Common),
}

impl Command {
    pub fn split(&self) -> (ExperimentId, &Common) {
        match self {
            Command::Projopt(c) => (ExperimentId::Projopt, c),
            Command::Tailbound(c) => (ExperimentId::Tailbound, c),
            Command::Converge(c) => (ExperimentId::Converge, c),
            Command::Ratedist(c) => (ExperimentId::Ratedist, c),
            Command::Ensemble(c) => (ExperimentId::Ensemble, c),
        }
    }
}

/// Flags shared by every experiment. Unset flags keep the experiment's defaults.
#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// Seeds: `0,3,7`, a range `0..10`, or a mix of both
    #[arg(long)]
    pub seed_list: Option<String>,
    /// Write the report here instead of stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Report format: csv or json
    #[arg(long)]
    pub format: Option<Format>,
    /// Ambient shape `I,J,K`
    #[arg(long)]
    pub shape: Option<String>,
    /// Ranks `r1,r2,r3`
    #[arg(long)]
    pub ranks: Option<String>,
    /// Oracle noise level
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Iterations per run
    #[arg(long)]
    pub iters: Option<usize>,
    /// Initial eps, or for `ratedist` a grid: `a,b,c` or `lo:hi:n` (log-spaced)
    #[arg(long)]
    pub eps: Option<String>,
    /// Budget cap on r1*r2*r3
    #[arg(long)]
    pub tau: Option<u64>,
    /// Lagrange multipliers, comma separated
    #[arg(long)]
    pub lambda: Option<String>,
    /// Projectors, tensors or trials per seed
    #[arg(long)]
    pub samples: Option<usize>,
    /// Entrywise noise on synthetic instances
    #[arg(long)]
    pub noise_floor: Option<f64>,
    /// Ensemble sizes, comma separated
    #[arg(long)]
    pub m_list: Option<String>,
}

pub fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: std::error::Error + Send + Sync + 'static,
{
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<T>()
                .with_context(|| format!("bad {what} entry {t:?}"))
        })
        .collect()
}

pub fn parse_triple(s: &str, what: &str) -> Result<[usize; 3]> {
    let v: Vec<usize> = parse_list(s, what)?;
    match v.as_slice() {
        &[a, b, c] => Ok([a, b, c]),
        _ => bail!("{what} needs exactly three values, got {s:?}"),
    }
}

pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let a: u64 = a
                .trim()
                .parse()
                .with_context(|| format!("bad range start in {part:?}"))?;
            let b: u64 = b
                .trim()
                .parse()
                .with_context(|| format!("bad range end in {part:?}"))?;
            if b <= a {
                bail!("empty seed range {part:?}");
            }
            out.extend(a..b);
        } else {
            out.push(part.parse().with_context(|| format!("bad seed {part:?}"))?);
        }
    }
    if out.is_empty() {
        bail!("seed list {s:?} is empty");
    }
    Ok(out)
}

pub fn parse_eps_grid(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        [lo, hi, n] => {
            let lo: f64 = lo.trim().parse().context("bad grid start")?;
            let hi: f64 = hi.trim().parse().context("bad grid end")?;
            let n: usize = n.trim().parse().context("bad grid size")?;
            if !(lo > 0.0 && hi >= lo) || n == 0 {
                bail!("grid {s:?} needs 0 < lo <= hi and n >= 1");
            }
            Ok(log_grid(lo, hi, n))
        }
        [_] => parse_list(s, "eps"),
        _ => bail!("eps grid {s:?} must be a list or lo:hi:n"),
    }
}

/// Defaults for `id`, overridden by whatever flags were given.
pub fn build_config(id: ExperimentId, c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::defaults(id);
    if let Some(s) = &c.seed_list {
        cfg.seeds = parse_seeds(s)?;
    }
    if let Some(s) = &c.shape {
        cfg.shape = parse_triple(s, "shape")?;
    }
    if let Some(s) = &c.ranks {
        cfg.ranks = parse_triple(s, "ranks")?;
    }
    if let Some(v) = c.sigma {
        cfg.sigma = v;
    }
    if let Some(v) = c.iters {
        cfg.iterations = v;
    }
    if let Some(s) = &c.eps {
        let grid = parse_eps_grid(s)?;
        if id == ExperimentId::Ratedist {
            cfg.eps_grid = grid;
        } else {
            match grid.as_slice() {
                &[e] => cfg.eps0 = e,
                _ => bail!("--eps takes a single value for {id}"),
            }
        }
    }
    if let Some(v) = c.tau {
        cfg.tau = v;
    }
    if let Some(s) = &c.lambda {
        cfg.lambdas = parse_list(s, "lambda")?;
    }
    if let Some(v) = c.samples {
        cfg.samples = v;
    }
    if let Some(v) = c.noise_floor {
        cfg.noise_floor = v;
    }
    if let Some(s) = &c.m_list {
        cfg.ensemble_sizes = parse_list(s, "ensemble size")?;
    }
    if let Some(f) = c.format {
        cfg.format = f;
    }
    cfg.out = c.out.clone();
    cfg.validate()?;
    Ok(cfg)
}
