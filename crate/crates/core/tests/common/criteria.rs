//! One check per acceptance criterion. `Ok` carries a short detail line,
//! `Err` the reason for failure.

use std::time::{Duration, Instant};

use optfuse::harness::{grid_cells, run_sweep, saved_rows, speedup_rows, verify_grid, BenchConfig, Mode};
use optfuse::{
    critical_path_depth, flush_pending_updates, predict_speedup, run_backward_fusion, run_baseline,
    run_forward_fusion, simulate_cache, BackwardEvent, BackwardMode, CacheConfig, Error, Graph, ModelSpec,
    OptimizerKind, OptimizerPolicy, Parameter, Precision, RegionClass, Recorder, Schedule, Scalar,
    ScheduleTrace, TaskKind, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::scalar::{self, Rule};
use super::{fd_grad, oracle_loss, structure, to_f64};

pub type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s(e: Error) -> String {
    e.to_string()
}

// 1 -------------------------------------------------------------------------

pub const GRID_SEEDS: [u64; 3] = [0, 1, 2];

pub fn trajectory_equivalence() -> Check {
    let start = Instant::now();
    let cells = grid_cells(&GRID_SEEDS);
    let results = verify_grid(&cells);
    let elapsed = start.elapsed();
    let failed: Vec<_> = results.iter().filter(|r| r.failure.is_some()).collect();
    if let Some(f) = failed.first() {
        return Err(format!(
            "{} of {} cells failed; first: {} {} {} seed {}: {}",
            failed.len(),
            results.len(),
            f.cell.optimizer,
            f.cell.model.name(),
            f.cell.precision,
            f.cell.seed,
            f.failure.as_deref().unwrap_or("")
        ));
    }
    ensure(cells.len() == 6 * 3 * 2 * 3, || format!("grid has {} cells", cells.len()))?;
    ensure(elapsed < Duration::from_secs(60), || format!("grid took {elapsed:?}"))?;
    let worst = results.iter().map(|r| r.parallel_rel_err).fold(0.0, f64::max);
    Ok(format!("{} cells, worst parallel rel err {worst:e}, {:.2?}", results.len(), elapsed))
}

// 2 -------------------------------------------------------------------------

/// Runs one mul-probe iteration (θ = 2, x = 3, sgd η = 0.1) and returns
/// `(∂L/∂x, θ_new, loss)`.
pub fn mul_probe_iteration(schedule: Schedule, mode: BackwardMode) -> Result<(f64, f64, f64), String> {
    let mut g = Graph::<f64>::build(ModelSpec::MulProbe { width: 1 }, 0).map_err(e2s)?;
    g.set_param_value(0, Tensor::from_vec(&[1], vec![2.0]).unwrap()).map_err(e2s)?;
    let x = Tensor::from_vec(&[1, 1], vec![3.0]).unwrap();
    let policy = OptimizerPolicy::new(OptimizerKind::Sgd).with_eta(0.1);
    let report = match schedule {
        Schedule::Baseline => run_baseline(&mut g, &policy, &x),
        Schedule::ForwardFusion => run_forward_fusion(&mut g, &policy, &x),
        Schedule::BackwardFusion => run_backward_fusion(&mut g, &policy, &x, mode),
    }
    .map_err(e2s)?;
    flush_pending_updates(&g, &policy).map_err(e2s)?;
    let dx = g.input_grad().ok_or("no input gradient")?.data()[0];
    let theta = g.param(0).value().data()[0];
    Ok((dx, theta, report.loss))
}

pub fn race_oracle() -> Check {
    let expected_theta = 2.0 - 0.1 * 3.0;
    for mode in [BackwardMode::Serial, BackwardMode::Parallel(4)] {
        let (dx, theta, loss) = mul_probe_iteration(Schedule::BackwardFusion, mode)?;
        ensure(loss == 6.0, || format!("{mode:?}: loss {loss}, want 6"))?;
        ensure(dx == 2.0, || format!("{mode:?}: dL/dx = {dx}, want 2 (computed from the old theta)"))?;
        ensure((theta - 1.7).abs() < 1e-15 && theta == expected_theta, || {
            format!("{mode:?}: theta {theta}, want 1.7")
        })?;
    }
    Ok("dL/dx = 2, theta -> 1.7 (serial and 4 workers)".into())
}

// 3 -------------------------------------------------------------------------

pub fn shared_chain() -> ModelSpec {
    ModelSpec::SharedChain { layers: 4, width: 4, share_groups: vec![vec![0, 2]] }
}

fn steps_per_param(trace: &ScheduleTrace, params: usize) -> Vec<usize> {
    let mut n = vec![0; params];
    for t in trace.tasks().filter(|t| t.kind == TaskKind::OptimizerStep) {
        n[t.target] += 1;
    }
    n
}

pub fn update_once() -> Check {
    let policy = OptimizerPolicy::new(OptimizerKind::SgdMomentum);
    // count semantics: 2 after forward, 1 after layer 2's contribution, 0 at layer 0's
    let mut g = Graph::<f64>::build(shared_chain(), 3).map_err(e2s)?;
    let x = g.sample_input(2, 5).map_err(e2s)?;
    g.forward(&x, None).map_err(e2s)?;
    ensure(g.param(0).count() == 2, || format!("count after forward {}", g.param(0).count()))?;
    let mut seen = Vec::new();
    g.backward(Some(&mut |g: &Graph<f64>, ev| {
        if let BackwardEvent::ParamGradLanded { node, param: 0 } = ev {
            seen.push((node, g.param(0).count()));
        }
        Ok(())
    }))
    .map_err(e2s)?;
    ensure(seen == vec![(2, 1), (0, 0)], || format!("(node, count) after each contribution: {seen:?}"))?;

    for schedule in Schedule::ALL {
        let mut g = Graph::<f64>::build(shared_chain(), 3).map_err(e2s)?;
        for it in 0..3 {
            let x = g.sample_input(2, it).map_err(e2s)?;
            let report = optfuse::run_step(schedule, &mut g, &policy, &x, BackwardMode::Serial).map_err(e2s)?;
            let steps = steps_per_param(&report.trace, g.param_count());
            // forward-fusion has nothing pending in its first iteration
            let want = if schedule == Schedule::ForwardFusion && it == 0 { 0 } else { 1 };
            ensure(steps.iter().all(|&s| s == want), || {
                format!("{schedule} iteration {it}: steps per parameter {steps:?}")
            })?;
            if schedule == Schedule::ForwardFusion && it > 0 {
                // the shared parameter's step precedes layer 0's forward
                let tasks: Vec<_> = report.trace.tasks().collect();
                let step = tasks.iter().position(|t| t.kind == TaskKind::OptimizerStep && t.target == 0);
                let fwd0 = tasks.iter().position(|t| t.kind == TaskKind::ForwardNode && t.target == 0);
                ensure(step < fwd0, || format!("iteration {it}: step of shared parameter after layer 0"))?;
            }
        }
    }
    Ok("one step per parameter per iteration in all schedules; counts 2 -> 1 -> 0".into())
}

// 4 -------------------------------------------------------------------------

pub fn chain_trace(schedule: Schedule, layers: usize, iterations: usize) -> Result<Vec<ScheduleTrace>, String> {
    chain_trace_with(schedule, layers, iterations, &OptimizerPolicy::new(OptimizerKind::Sgd))
}

pub fn chain_trace_with(
    schedule: Schedule,
    layers: usize,
    iterations: usize,
    policy: &OptimizerPolicy,
) -> Result<Vec<ScheduleTrace>, String> {
    let mut g = Graph::<f32>::build(ModelSpec::Chain { layers, width: 2 }, 1).map_err(e2s)?;
    let x = g.sample_input(1, 2).map_err(e2s)?;
    (0..iterations)
        .map(|_| {
            optfuse::run_step(schedule, &mut g, policy, &x, BackwardMode::Serial)
                .map(|r| r.trace)
                .map_err(e2s)
        })
        .collect()
}

pub fn depth_claim() -> Check {
    let start = Instant::now();
    for n in 1..=32 {
        let base = critical_path_depth(&chain_trace(Schedule::Baseline, n, 1)?[0]);
        let bf = critical_path_depth(&chain_trace(Schedule::BackwardFusion, n, 1)?[0]);
        ensure(base == 3 * n, || format!("chain({n}): baseline depth {base}, want {}", 3 * n))?;
        ensure(bf == 2 * n + 1, || format!("chain({n}): backward-fusion depth {bf}, want {}", 2 * n + 1))?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(5), || format!("took {elapsed:?}"))?;
    Ok(format!("3n / 2n+1 for n = 1..32 in {elapsed:.2?}"))
}

// 5 -------------------------------------------------------------------------

pub struct LocalityNumbers {
    pub baseline: [u64; 2],
    pub forward_fusion: [u64; 2],
    pub backward_fusion: [u64; 2],
    pub transactions: [usize; 3],
}

/// Parameter and gradient misses per schedule on the steady-state
/// iteration (the second one) of chain(n).
pub fn locality_numbers(n: usize, policy: &OptimizerPolicy) -> Result<LocalityNumbers, String> {
    let cache = CacheConfig::per_layer(policy);
    let mut misses = Vec::new();
    let mut counts = [0; 3];
    for (i, schedule) in Schedule::ALL.into_iter().enumerate() {
        let traces = chain_trace_with(schedule, n, 2, policy)?;
        let r = simulate_cache(&traces[1], cache);
        misses.push([r.misses(RegionClass::Parameter), r.misses(RegionClass::Gradient)]);
        counts[i] = traces[1].transactions().count();
    }
    Ok(LocalityNumbers { baseline: misses[0], forward_fusion: misses[1], backward_fusion: misses[2], transactions: counts })
}

pub fn locality_claim() -> Check {
    let mut detail = String::new();
    for kind in OptimizerKind::LOCAL {
        let policy = OptimizerPolicy::new(kind);
        for n in 2..=16 {
            let l = locality_numbers(n, &policy)?;
            let pg = |m: [u64; 2]| m[0] + m[1];
            ensure(pg(l.backward_fusion) < pg(l.baseline), || {
                format!("{kind} chain({n}): bf param+grad misses {} vs baseline {}", pg(l.backward_fusion), pg(l.baseline))
            })?;
            ensure(l.forward_fusion[0] < l.baseline[0], || {
                format!("{kind} chain({n}): ff param misses {} vs baseline {}", l.forward_fusion[0], l.baseline[0])
            })?;
            ensure(l.transactions[0] == l.transactions[1] && l.transactions[1] == l.transactions[2], || {
                format!("{kind} chain({n}): transaction totals {:?}", l.transactions)
            })?;
            if kind == OptimizerKind::Adam && n == 8 {
                detail = format!(
                    "adam chain(8): param+grad misses baseline {:?}, ff {:?}, bf {:?}",
                    l.baseline, l.forward_fusion, l.backward_fusion
                );
            }
        }
    }
    Ok(detail)
}

// 6 -------------------------------------------------------------------------

/// Breakdown bars (ms) of the reference measurement.
pub const BASELINE_FORWARD: f64 = 21.90;
pub const BASELINE_BACKWARD: f64 = 55.61;
pub const BASELINE_OPTIMIZER: f64 = 16.70;
pub const FORWARD_FUSION_TOTAL: f64 = 84.42;
pub const BACKWARD_FUSION_TOTAL: f64 = 80.92;

pub fn speedup_model() -> Check {
    let batch = 32.0;
    let t_grad = (BASELINE_FORWARD + BASELINE_BACKWARD) / batch;
    let total = BASELINE_FORWARD + BASELINE_BACKWARD + BASELINE_OPTIMIZER;
    let ff = predict_speedup(batch, t_grad, BASELINE_OPTIMIZER, total - FORWARD_FUSION_TOTAL).map_err(e2s)?;
    let bf = predict_speedup(batch, t_grad, BASELINE_OPTIMIZER, total - BACKWARD_FUSION_TOTAL).map_err(e2s)?;
    ensure((ff - 1.116).abs() <= 0.01, || format!("forward-fusion {ff}, want 1.116"))?;
    ensure((bf - 1.164).abs() <= 0.01, || format!("backward-fusion {bf}, want 1.164"))?;
    let mut prev = f64::INFINITY;
    for b in 1..=512 {
        let s = predict_speedup(b as f64, t_grad, BASELINE_OPTIMIZER, total - BACKWARD_FUSION_TOTAL).map_err(e2s)?;
        ensure(s < prev, || format!("speedup not decreasing at b = {b}"))?;
        prev = s;
    }
    Ok(format!("forward-fusion {ff:.4}, backward-fusion {bf:.4}; decreasing in b"))
}

// 7 -------------------------------------------------------------------------

pub struct GradCheck {
    pub worst: f64,
    pub configs: usize,
}

/// Kink margin below which a random configuration is redrawn: central
/// differences are only meaningful away from relu's non-differentiable point.
pub const KINK_MARGIN: f64 = 0.02;

fn check_config<T: Scalar>(spec: ModelSpec, seed: u64, batch: usize, h: f64) -> Result<Option<f64>, String> {
    let mut g = Graph::<T>::build(spec.clone(), seed).map_err(e2s)?;
    let x = g.sample_input(batch, seed ^ 0xA5A5).map_err(e2s)?;
    let layout = structure(&g);
    let params: Vec<Vec<f64>> = g.param_values().iter().map(|t| to_f64(t.data())).collect();
    let x64 = to_f64(x.data());
    let width = spec.width();
    let (loss64, margin) = oracle_loss(&layout, &params, &x64, width);
    // redraw near-kink and fully dead (zero-loss) configurations
    if margin < KINK_MARGIN || loss64 == 0.0 {
        return Ok(None);
    }
    let loss = g.forward(&x, None).map_err(e2s)?.to_f64();
    g.backward(None).map_err(e2s)?;
    let numeric = fd_grad(&layout, &params, &x64, width, h);
    let mut worst = (loss - loss64).abs() / loss64.abs().max(1.0);
    for (p, num) in numeric.iter().enumerate() {
        let analytic = to_f64(g.param(p).grad().data());
        for (a, n) in analytic.iter().zip(num) {
            worst = worst.max((a - n).abs() / n.abs().max(1.0));
        }
    }
    Ok(Some(worst))
}

/// Finite-difference check on `count` random chain configurations.
pub fn gradient_check(precision: Precision, count: usize, seed: u64) -> Result<GradCheck, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut configs = 0;
    let mut draws = 0;
    while configs < count {
        draws += 1;
        ensure(draws < 50 * count, || "could not draw configurations away from relu kinks".into())?;
        let spec = ModelSpec::Chain { layers: rng.random_range(1..=4), width: rng.random_range(2..=6) };
        let batch = rng.random_range(1..=4);
        let cfg_seed: u64 = rng.random();
        let err = match precision {
            Precision::F32 => check_config::<f32>(spec, cfg_seed, batch, 1e-3)?,
            Precision::F64 => check_config::<f64>(spec, cfg_seed, batch, 1e-6)?,
        };
        if let Some(e) = err {
            worst = worst.max(e);
            configs += 1;
        }
    }
    Ok(GradCheck { worst, configs })
}

pub fn gradient_correctness() -> Check {
    let f32 = gradient_check(Precision::F32, 10, 7)?;
    let f64 = gradient_check(Precision::F64, 10, 7)?;
    ensure(f32.worst < 1e-4, || format!("32-bit worst rel err {:e}", f32.worst))?;
    ensure(f64.worst < 1e-6, || format!("64-bit worst rel err {:e}", f64.worst))?;
    Ok(format!("worst rel err {:e} (32-bit), {:e} (64-bit) on 10 configs each", f32.worst, f64.worst))
}

// 8 -------------------------------------------------------------------------

type Snapshot = Vec<(Vec<u64>, Vec<u64>, usize, bool, u64)>;

fn snapshot<T: Scalar>(g: &Graph<T>) -> Snapshot {
    let bits = |t: &Tensor<T>| t.data().iter().map(|&v| Scalar::to_f64(v).to_bits()).collect::<Vec<_>>();
    (0..g.param_count())
        .map(|p| {
            let p = g.param(p);
            (bits(p.value()), bits(p.grad()), p.count(), p.pending(), p.steps())
        })
        .collect()
}

pub const CLIP: f64 = 0.05;

pub fn global_info_contract() -> Check {
    let policy = OptimizerPolicy::new(OptimizerKind::Adam).with_weight_decay(1e-3);
    let spec = ModelSpec::Chain { layers: 3, width: 4 };

    // backward-fusion refuses before touching anything
    let mut g = Graph::<f64>::build(spec.clone(), 9).map_err(e2s)?;
    let x = g.sample_input(3, 1).map_err(e2s)?;
    run_baseline(&mut g, &policy, &x).map_err(e2s)?;
    g.set_clip_norm(Some(CLIP));
    let before = snapshot(&g);
    for mode in [BackwardMode::Serial, BackwardMode::Parallel(4)] {
        match run_backward_fusion(&mut g, &policy, &x, mode) {
            Err(Error::GlobalInfoRequired(_)) => {}
            other => return Err(format!("{mode:?}: expected GlobalInfoRequired, got {:?}", other.map(|r| r.loss))),
        }
        ensure(snapshot(&g) == before, || format!("{mode:?}: state changed by the rejected call"))?;
    }

    // forward-fusion with the clip reproduces baseline with the clip
    let run = |schedule: Schedule, clip: Option<f64>| -> Result<Vec<u64>, String> {
        let mut g = Graph::<f64>::build(spec.clone(), 9).map_err(e2s)?;
        g.set_clip_norm(clip);
        for it in 0..6 {
            let x = g.sample_input(3, it).map_err(e2s)?;
            optfuse::run_step(schedule, &mut g, &policy, &x, BackwardMode::Serial).map_err(e2s)?;
        }
        flush_pending_updates(&g, &policy).map_err(e2s)?;
        Ok(g.param_values().iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect())
    };
    let base = run(Schedule::Baseline, Some(CLIP))?;
    let ff = run(Schedule::ForwardFusion, Some(CLIP))?;
    ensure(base == ff, || "forward-fusion with clipping diverges from baseline with clipping".into())?;
    ensure(run(Schedule::Baseline, None)? != base, || format!("clip at {CLIP} never engaged"))?;
    Ok("backward-fusion rejects clipping untouched; forward-fusion matches baseline bit for bit".into())
}

// 9 -------------------------------------------------------------------------

pub const GRADS: [f64; 5] = [0.5, -1.25, 2.0, 0.125, -0.75];
pub const THETA0: f64 = 0.8;

/// θ after each of five steps of `policy_step` on a one-element parameter.
pub fn engine_trajectory(policy: &OptimizerPolicy, grads: &[f64]) -> Result<Vec<f64>, String> {
    let mut p = Parameter::new(0, Tensor::from_vec(&[1], vec![THETA0]).unwrap());
    let rec = Recorder::new();
    grads
        .iter()
        .map(|&g| {
            p.set_grad(Tensor::from_vec(&[1], vec![g]).unwrap()).map_err(e2s)?;
            optfuse::policy_step(policy, &mut p, &rec, None).map_err(e2s)?;
            Ok(p.value().data()[0])
        })
        .collect()
}

fn rule_for(policy: &OptimizerPolicy) -> Rule {
    match policy.kind {
        OptimizerKind::Sgd => Rule::Sgd,
        OptimizerKind::SgdMomentum => Rule::Momentum { alpha: policy.alpha },
        OptimizerKind::Adagrad => Rule::Adagrad,
        OptimizerKind::RmsProp => Rule::RmsProp { rho: policy.rho },
        OptimizerKind::Adadelta => Rule::Adadelta { rho: policy.rho },
        OptimizerKind::Adam => Rule::Adam { b1: policy.beta1, b2: policy.beta2 },
        OptimizerKind::Newton => unreachable!("newton has its own transcription"),
    }
}

/// Five Newton steps on f(θ) = θ⁴ against θ ← θ − η (f'(θ) / f''(θ)).
pub fn newton_matches() -> Result<(), String> {
    let policy = OptimizerPolicy::new(OptimizerKind::Newton).with_eta(0.5);
    let mut theta = Tensor::from_vec(&[1], vec![THETA0]).unwrap();
    let mut reference = THETA0;
    for step in 0..5 {
        theta = optfuse::policy_newton(
            &policy,
            &theta,
            |t| Tensor::from_vec(&[1], vec![4.0 * t.data()[0].powi(3)]).unwrap(),
            |t| Tensor::from_vec(&[1, 1], vec![12.0 * t.data()[0].powi(2)]).unwrap(),
        )
        .map_err(e2s)?;
        reference = reference - 0.5 * ((4.0 * reference.powi(3)) / (12.0 * reference.powi(2)));
        ensure(theta.data()[0].to_bits() == reference.to_bits(), || {
            format!("newton step {step}: {} vs {reference}", theta.data()[0])
        })?;
    }
    Ok(())
}

pub fn optimizer_reference() -> Check {
    for kind in OptimizerKind::LOCAL {
        for wd in [0.0, 0.01] {
            let policy = OptimizerPolicy::new(kind).with_weight_decay(wd);
            let got = engine_trajectory(&policy, &GRADS)?;
            let want = scalar::run(rule_for(&policy), THETA0, &GRADS, policy.eta, wd);
            let same = got.iter().zip(&want).all(|(a, b)| a.to_bits() == b.to_bits());
            ensure(same, || format!("{kind} (wd {wd}): engine {got:?} vs transcription {want:?}"))?;
        }
    }
    newton_matches()?;
    let policy = OptimizerPolicy::new(OptimizerKind::SgdMomentum);
    let recursive = engine_trajectory(&policy, &GRADS)?;
    let sum = scalar::momentum_sum_form(THETA0, &GRADS, policy.eta, policy.alpha);
    let worst = recursive.iter().zip(&sum).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure(worst <= 1e-15, || format!("momentum recursive vs sum form differ by {worst:e}"))?;
    Ok(format!("7 policies bit-exact over 5 steps; momentum sum form within {worst:e}"))
}

// 10 ------------------------------------------------------------------------

/// Runs a short sweep and returns the speedup and saved-time tables.
pub fn informational_sweep(out: &std::path::Path) -> Result<(String, String), String> {
    let cfg = BenchConfig {
        model: ModelSpec::Chain { layers: 16, width: 16 },
        batch_sizes: vec![1, 2, 4, 8, 16, 32],
        warmup: 3,
        iters: 15,
        out: out.to_path_buf(),
        mode: Mode::Sweep,
        ..BenchConfig::default()
    };
    cfg.validate().map_err(e2s)?;
    let points = run_sweep(&cfg).map_err(e2s)?;
    let speedup = out.join("speedup.tsv");
    let saved = out.join("saved.tsv");
    optfuse::harness::emit_csv(&speedup_rows(&points), &speedup).map_err(e2s)?;
    optfuse::harness::emit_csv(&saved_rows(&points), &saved).map_err(e2s)?;
    Ok((
        std::fs::read_to_string(speedup).map_err(|e| e.to_string())?,
        std::fs::read_to_string(saved).map_err(|e| e.to_string())?,
    ))
}
