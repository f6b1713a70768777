use cqd_core::manifold::TuckerPoint;
use cqd_core::optimizer::{
    descent_certificate, run_cqd, run_cqd_ensemble, stochastic_grad, CertificateConfig, CqdConfig,
    StepSchedule, TaskSpec,
};
use cqd_core::oracle::{Aggregator, MeanMap, OracleConfig, OracleResponse, SimulatedOracle};
use cqd_core::rng::SeededRng;
use cqd_core::synthetic::gen_synthetic;
use cqd_core::{Error, Tensor3};

struct Setup {
    x0: TuckerPoint,
    task: TaskSpec,
    oracle: SimulatedOracle,
}

fn setup(seed: u64, shape: [usize; 3], ranks: [usize; 3], sigma: f64, tau: u64) -> Setup {
    let inst = gen_synthetic(shape, ranks, 0.5, seed).unwrap();
    let x0 = TuckerPoint::from_tensor(&inst.instance, ranks).unwrap();
    let task = TaskSpec::new(inst.target.clone(), 1, 0.01, tau).unwrap();
    let cfg = OracleConfig::new(
        sigma,
        seed.wrapping_mul(31) + 7,
        MeanMap::IdentityCompletion,
    )
    .unwrap();
    let oracle = SimulatedOracle::new(cfg, 1, inst.target);
    Setup { x0, task, oracle }
}

#[test]
fn unit_step_on_full_rank_manifold_lands_on_target() {
    let s = setup(1, [3, 4, 3], [3, 4, 3], 0.0, u64::MAX);
    let cfg = CqdConfig::new(StepSchedule::constant(1.0), 0.1, 1);
    let out = run_cqd(&s.x0, &s.task, &s.oracle, &cfg).unwrap();
    assert!(out.point.to_tensor().max_abs_diff(&s.task.target) < 1e-10);
}

#[test]
fn noiseless_small_step_decreases_monotonically() {
    let s = setup(2, [6, 6, 6], [2, 2, 2], 0.0, u64::MAX);
    let cfg = CqdConfig::new(StepSchedule::constant(0.1), 0.1, 400);
    let out = run_cqd(&s.x0, &s.task, &s.oracle, &cfg).unwrap();
    let path = out.trace.loss_path();
    let mut reached = None;
    for (k, w) in path.windows(2).enumerate() {
        if w[0] < 1e-8 {
            reached = Some(k);
            break;
        }
        assert!(w[1] < w[0], "loss rose at {k}: {} -> {}", w[0], w[1]);
    }
    let reached = reached.or_else(|| (path.last().unwrap() < &1e-8).then_some(400));
    assert!(reached.is_some(), "final loss {}", path.last().unwrap());
}

#[test]
fn noisy_robbins_monro_drives_gradient_down() {
    let mut mins: Vec<f64> = (0..10)
        .map(|seed| {
            let s = setup(100 + seed, [6, 6, 6], [2, 2, 2], 0.1, u64::MAX);
            let cfg = CqdConfig::new(StepSchedule::robbins_monro(0.5, 100.0), 0.1, 5000);
            let out = run_cqd(&s.x0, &s.task, &s.oracle, &cfg).unwrap();
            let rm = out.trace.running_min_grad_norm_sq();
            assert!(rm.windows(2).all(|w| w[1] <= w[0]));
            *rm.last().unwrap()
        })
        .collect();
    mins.sort_by(f64::total_cmp);
    let median = 0.5 * (mins[4] + mins[5]);
    assert!(median < 1e-3, "median running-min {median:e}");
}

#[test]
fn ensemble_of_one_reproduces_single_trace() {
    let s = setup(3, [5, 5, 5], [2, 2, 2], 0.3, u64::MAX);
    let cfg = CqdConfig::new(StepSchedule::robbins_monro(0.5, 100.0), 0.1, 50);
    let a = run_cqd(&s.x0, &s.task, &s.oracle, &cfg).unwrap();
    let b = run_cqd_ensemble(&s.x0, &s.task, &s.oracle, &cfg, 1, Aggregator::Mean).unwrap();
    assert_eq!(
        serde_json::to_string(&a.trace).unwrap(),
        serde_json::to_string(&b.trace).unwrap()
    );
}

#[test]
fn noiseless_trace_independent_of_ensemble_size() {
    let s = setup(4, [5, 5, 5], [2, 2, 2], 0.0, u64::MAX);
    let cfg = CqdConfig::new(StepSchedule::constant(0.2), 0.1, 30);
    let a = run_cqd(&s.x0, &s.task, &s.oracle, &cfg).unwrap();
    for m in [2, 7] {
        let b = run_cqd_ensemble(&s.x0, &s.task, &s.oracle, &cfg, m, Aggregator::Mean).unwrap();
        assert_eq!(a.trace, b.trace);
    }
}

#[test]
fn larger_ensemble_lowers_terminal_loss() {
    let (mut l1, mut l16) = (0.0, 0.0);
    for seed in 0..20 {
        let s = setup(200 + seed, [5, 5, 5], [2, 2, 2], 0.5, u64::MAX);
        let cfg = CqdConfig::new(StepSchedule::robbins_monro(0.5, 100.0), 0.1, 200);
        l1 += run_cqd(&s.x0, &s.task, &s.oracle, &cfg)
            .unwrap()
            .trace
            .final_loss
            .unwrap();
        l16 += run_cqd_ensemble(&s.x0, &s.task, &s.oracle, &cfg, 16, Aggregator::Mean)
            .unwrap()
            .trace
            .final_loss
            .unwrap();
    }
    assert!(
        l16 < l1,
        "m=16 mean {} vs m=1 mean {}",
        l16 / 20.0,
        l1 / 20.0
    );
}

#[test]
fn budget_cap_is_respected_every_iteration() {
    let s = setup(5, [6, 6, 6], [3, 3, 3], 0.1, 8);
    let mut cfg = CqdConfig::new(StepSchedule::robbins_monro(0.5, 100.0), 0.01, 300);
    cfg.query_seed = 42;
    let out = run_cqd(&s.x0, &s.task, &s.oracle, &cfg).unwrap();
    assert!(out.trace.rows.iter().all(|r| r.budget <= 8));
    assert!(out
        .trace
        .rows
        .iter()
        .all(|r| r.query_bytes == 27 + 8 * r.budget as usize));
    assert!(out.trace.lagrangian_consistency(s.task.lambda) >= 0.9);
}

#[test]
fn runs_are_reproducible() {
    let s = setup(6, [5, 4, 6], [2, 2, 2], 0.2, 12);
    let cfg = CqdConfig::new(StepSchedule::robbins_monro(0.5, 100.0), 0.1, 100);
    let a = serde_json::to_vec(&run_cqd(&s.x0, &s.task, &s.oracle, &cfg).unwrap().trace).unwrap();
    let b = serde_json::to_vec(&run_cqd(&s.x0, &s.task, &s.oracle, &cfg).unwrap().trace).unwrap();
    assert_eq!(a, b);
}

#[test]
fn residual_mean_map_also_converges() {
    let inst = gen_synthetic([5, 5, 5], [2, 2, 2], 0.5, 7).unwrap();
    let x0 = TuckerPoint::from_tensor(&inst.instance, [2, 2, 2]).unwrap();
    let task = TaskSpec::new(inst.target.clone(), 3, 0.0, u64::MAX).unwrap();
    let oracle = SimulatedOracle::new(
        OracleConfig::new(0.0, 1, MeanMap::Residual).unwrap(),
        3,
        inst.target.clone(),
    );
    let mut cfg = CqdConfig::new(StepSchedule::constant(0.2), 1e-6, 300);
    cfg.mean_map = MeanMap::Residual;
    let out = run_cqd(&x0, &task, &oracle, &cfg).unwrap();
    assert!(out.trace.final_loss.unwrap() < 1e-8 * out.trace.rows[0].loss);
}

fn cert(sigma: f64, window: usize) -> CertificateConfig {
    CertificateConfig {
        lipschitz: 1.0,
        sigma,
        noise_dim: 216,
        window,
        sigma_band: 3.0,
    }
}

#[test]
fn descent_certificate_noiseless_holds_everywhere() {
    for eta in [0.1, 0.7, 1.5] {
        let s = setup(8, [6, 6, 6], [6, 6, 6], 0.0, u64::MAX);
        let cfg = CqdConfig::new(StepSchedule::constant(eta), 0.1, 100);
        let out = run_cqd(&s.x0, &s.task, &s.oracle, &cfg).unwrap();
        let rep = descent_certificate(&out.trace, &cert(0.0, 1));
        assert_eq!(rep.violations, 0, "eta {eta}: {rep:?}");
    }
}

// Off the full-rank manifold the retraction bends the step, so the pulled-back
// loss is smooth with a constant slightly above 1.
#[test]
fn descent_certificate_fixed_rank_needs_curvature_margin() {
    for seed in 8..14 {
        let s = setup(seed, [6, 6, 6], [2, 2, 2], 0.0, u64::MAX);
        let cfg = CqdConfig::new(StepSchedule::constant(0.1), 0.1, 100);
        let out = run_cqd(&s.x0, &s.task, &s.oracle, &cfg).unwrap();
        let mut c = cert(0.0, 1);
        c.lipschitz = 1.1;
        let rep = descent_certificate(&out.trace, &c);
        assert_eq!(rep.violations, 0, "seed {seed}: {rep:?}");
    }
}

#[test]
fn descent_certificate_flags_unstable_steps() {
    let s = setup(9, [6, 6, 6], [6, 6, 6], 0.0, u64::MAX);
    let cfg = CqdConfig::new(StepSchedule::constant(3.0), 0.1, 30);
    let out = run_cqd(&s.x0, &s.task, &s.oracle, &cfg).unwrap();
    let path = out.trace.loss_path();
    assert!(path.windows(2).all(|w| w[1] > w[0]));
    let rep = descent_certificate(&out.trace, &cert(0.0, 1));
    assert_eq!(rep.violation_rate, 1.0);
}

#[test]
fn descent_certificate_noisy_windows() {
    let mut total = 0;
    let mut bad = 0;
    for seed in 0..5 {
        let s = setup(300 + seed, [6, 6, 6], [2, 2, 2], 0.1, u64::MAX);
        let cfg = CqdConfig::new(StepSchedule::robbins_monro(0.5, 100.0), 0.1, 2000);
        let out = run_cqd(&s.x0, &s.task, &s.oracle, &cfg).unwrap();
        let rep = descent_certificate(&out.trace, &cert(0.1, 100));
        total += rep.windows;
        bad += rep.violations;
    }
    assert!(
        bad as f64 <= 0.05 * total as f64,
        "{bad}/{total} windows violated"
    );
}

#[test]
fn stochastic_gradient_matches_finite_differences() {
    let mut rng = SeededRng::new(10);
    let x = rng.gaussian_tensor([3, 4, 2]);
    let r = rng.gaussian_tensor([3, 4, 2]);
    let task = TaskSpec::new(r.clone(), 0, 0.0, 0).unwrap();
    let resp = OracleResponse {
        payload: r.clone(),
        query_checksum_echo: 0,
        draws_used: 1,
    };
    let g = stochastic_grad(&x, &resp, &task, MeanMap::IdentityCompletion).unwrap();
    let f = |y: &Tensor3| 0.5 * y.distance(&r).powi(2);
    let h = 1e-5;
    for _ in 0..10 {
        let dir = rng.gaussian_tensor([3, 4, 2]);
        let fd = (f(&x.add_scaled(&dir, h)) - f(&x.add_scaled(&dir, -h))) / (2.0 * h);
        assert!((fd - g.inner(&dir)).abs() < 1e-6);
    }
    let same = OracleResponse {
        payload: x.clone(),
        ..resp.clone()
    };
    let z = stochastic_grad(&x, &same, &task, MeanMap::IdentityCompletion).unwrap();
    assert!(z.data().iter().all(|&v| v == 0.0));
    let wrong = OracleResponse {
        payload: Tensor3::zeros([1, 1, 1]),
        ..resp
    };
    assert!(matches!(
        stochastic_grad(&x, &wrong, &task, MeanMap::IdentityCompletion),
        Err(Error::Argument(_))
    ));
}
