//! Benchmark and verification harness behind the `optfuse` command line.
//!
//! Every mode writes plain files into the output directory:
//!
//! | mode         | files                                                  |
//! |--------------|--------------------------------------------------------|
//! | `time`       | `time.tsv`                                             |
//! | `breakdown`  | `breakdown.tsv`                                        |
//! | `sweep`      | `speedup.tsv`, `saved.tsv`, `sweep_totals.tsv`         |
//! | `trace`      | `trace-<schedule>.txt`, `cache-<schedule>.txt`         |
//! | `verify`     | `verify.tsv`                                           |
//! | `optimizers` | `optimizers.tsv`                                       |

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::{Graph, ModelSpec};
use crate::locality::{critical_path_depth, simulate_cache, CacheConfig};
use crate::optim::{OptimizerKind, OptimizerPolicy};
use crate::schedule::{
    check_trace_legality, flush_pending_updates, run_step, steps_wait_for_readers, BackwardMode, Schedule,
    StageTimes,
};
use crate::tensor::{Precision, Scalar, Tensor};
use crate::trace::{ScheduleTrace, TaskKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Time,
    Trace,
    Verify,
    Breakdown,
    Sweep,
    Optimizers,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "time" => Mode::Time,
            "trace" => Mode::Trace,
            "verify" => Mode::Verify,
            "breakdown" => Mode::Breakdown,
            "sweep" => Mode::Sweep,
            "optimizers" => Mode::Optimizers,
            other => {
                return Err(Error::Config(format!(
                    "unknown mode `{other}` (time, trace, verify, breakdown, sweep, optimizers)"
                )))
            }
        })
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub model: ModelSpec,
    pub optimizer: OptimizerPolicy,
    /// `None` runs all three schedules.
    pub schedule: Option<Schedule>,
    pub precision: Precision,
    pub batch_sizes: Vec<usize>,
    pub warmup: usize,
    pub iters: usize,
    /// Backward-fusion workers; 1 means serial.
    pub workers: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub mode: Mode,
    pub clip_norm: Option<f64>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            model: ModelSpec::Chain { layers: 64, width: 32 },
            optimizer: OptimizerPolicy::new(OptimizerKind::Adam).with_weight_decay(1e-4),
            schedule: None,
            precision: Precision::F32,
            batch_sizes: vec![32],
            warmup: 10,
            iters: 100,
            workers: 1,
            seed: 0,
            out: PathBuf::from("optfuse-out"),
            mode: Mode::Time,
            clip_norm: None,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 {
            return Err(Error::Config("--iters must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("--workers must be at least 1".into()));
        }
        if self.batch_sizes.is_empty() || self.batch_sizes.contains(&0) {
            return Err(Error::Config("batch sizes must be positive (use --batch or --batch-sweep lo:hi)".into()));
        }
        if self.mode == Mode::Sweep && self.batch_sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("sweep batch sizes must be strictly increasing".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("--clip must be positive, got {c}")));
            }
        }
        self.optimizer.validate()?;
        if self.optimizer.requires_global_info() {
            return Err(Error::Config(
                "newton only runs as a standalone toy solver; pick a per-parameter optimizer".into(),
            ));
        }
        Ok(())
    }

    fn schedules(&self) -> Vec<Schedule> {
        match self.schedule {
            Some(s) if self.mode == Mode::Trace || self.mode == Mode::Time => {
                if s == Schedule::Baseline {
                    vec![s]
                } else {
                    vec![Schedule::Baseline, s]
                }
            }
            _ => Schedule::ALL.to_vec(),
        }
    }

    fn backward_mode(&self) -> BackwardMode {
        if self.workers > 1 {
            BackwardMode::Parallel(self.workers)
        } else {
            BackwardMode::Serial
        }
    }
}

/// Parses `lo:hi` into every batch size in the inclusive range.
pub fn parse_batch_sweep(s: &str) -> Result<Vec<usize>> {
    let (lo, hi) = s
        .split_once(':')
        .ok_or_else(|| Error::Config(format!("batch sweep `{s}` should look like lo:hi")))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|e| Error::Config(format!("batch sweep bound `{v}`: {e}")))
    };
    let (lo, hi) = (parse(lo)?, parse(hi)?);
    if lo == 0 || lo > hi {
        return Err(Error::Config(format!("batch sweep {lo}:{hi} must satisfy 1 <= lo <= hi")));
    }
    Ok((lo..=hi).collect())
}

/// Mean and median per-stage times over the measured iterations, or a skip
/// when the schedule cannot run the configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Measurement {
    Timed { mean: StageTimes, median: StageTimes },
    Skipped,
}

impl Measurement {
    pub fn mean_total(&self) -> Option<f64> {
        match self {
            Measurement::Timed { mean, .. } => Some(mean.total_ms()),
            Measurement::Skipped => None,
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite timing"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn summarize(samples: &[StageTimes]) -> Measurement {
    let n = samples.len() as f64;
    let col = |f: fn(&StageTimes) -> f64| samples.iter().map(f).collect::<Vec<_>>();
    let mean = StageTimes {
        forward_ms: col(|s| s.forward_ms).iter().sum::<f64>() / n,
        backward_ms: col(|s| s.backward_ms).iter().sum::<f64>() / n,
        optimizer_ms: col(|s| s.optimizer_ms).iter().sum::<f64>() / n,
    };
    let median = StageTimes {
        forward_ms: median(col(|s| s.forward_ms)),
        backward_ms: median(col(|s| s.backward_ms)),
        optimizer_ms: median(col(|s| s.optimizer_ms)),
    };
    Measurement::Timed { mean, median }
}

fn measure_typed<T: Scalar>(
    cfg: &BenchConfig,
    policy: &OptimizerPolicy,
    schedule: Schedule,
    batch: usize,
) -> Result<Measurement> {
    let mut graph = Graph::<T>::build(cfg.model.clone(), cfg.seed)?;
    graph.set_clip_norm(cfg.clip_norm);
    let input = graph.sample_input(batch, cfg.seed.wrapping_add(1))?;
    let mut samples = Vec::with_capacity(cfg.iters);
    for i in 0..cfg.warmup + cfg.iters {
        match run_step(schedule, &mut graph, policy, &input, cfg.backward_mode()) {
            Ok(report) if i >= cfg.warmup => samples.push(report.times),
            Ok(_) => {}
            Err(Error::GlobalInfoRequired(_)) => return Ok(Measurement::Skipped),
            Err(e) => return Err(e),
        }
    }
    Ok(summarize(&samples))
}

/// Runs warmup then measured iterations of one schedule at one batch size.
pub fn measure(cfg: &BenchConfig, policy: &OptimizerPolicy, schedule: Schedule, batch: usize) -> Result<Measurement> {
    match cfg.precision {
        Precision::F32 => measure_typed::<f32>(cfg, policy, schedule, batch),
        Precision::F64 => measure_typed::<f64>(cfg, policy, schedule, batch),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cell {
    Value(f64),
    Skip,
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cell::Value(v) => write!(f, "{v}"),
            Cell::Skip => f.write_str("skip"),
        }
    }
}

impl FromStr for Cell {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "skip" {
            Ok(Cell::Skip)
        } else {
            s.parse::<f64>().map(Cell::Value).map_err(|e| format!("`{s}`: {e}"))
        }
    }
}

/// One row of a fusion comparison: `idx` is the batch size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub idx: usize,
    pub forward_fusion: Cell,
    pub backward_fusion: Cell,
}

pub const CSV_HEADER: &str = "idx\tforward-fusion\tbackward-fusion";

/// Writes rows as a tab-separated table with the fusion comparison header.
pub fn emit_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}\t{}\t{}", r.idx, r.forward_fusion, r.backward_fusion);
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn parse_csv(text: &str) -> Result<Vec<SweepRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == CSV_HEADER => {}
        _ => return Err(Error::Parse { line: 1, msg: format!("expected header `{CSV_HEADER}`") }),
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let err = |msg: String| Error::Parse { line: i + 1, msg };
            let cols: Vec<&str> = l.split('\t').collect();
            if cols.len() != 3 {
                return Err(err(format!("expected 3 columns, got {}", cols.len())));
            }
            Ok(SweepRow {
                idx: cols[0].parse().map_err(|e| err(format!("idx: {e}")))?,
                forward_fusion: cols[1].parse().map_err(err)?,
                backward_fusion: cols[2].parse().map_err(err)?,
            })
        })
        .collect()
}

/// Baseline total divided by the schedule's total, per fusion schedule.
fn speedup_cell(baseline: &Measurement, other: &Measurement) -> Cell {
    match (baseline.mean_total(), other.mean_total()) {
        (Some(b), Some(o)) if o > 0.0 => Cell::Value(b / o),
        _ => Cell::Skip,
    }
}

fn saved_cell(baseline: &Measurement, other: &Measurement) -> Cell {
    match (baseline.mean_total(), other.mean_total()) {
        (Some(b), Some(o)) => Cell::Value(b - o),
        _ => Cell::Skip,
    }
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub batch: usize,
    pub baseline: Measurement,
    pub forward_fusion: Measurement,
    pub backward_fusion: Measurement,
}

pub fn run_sweep(cfg: &BenchConfig) -> Result<Vec<SweepPoint>> {
    cfg.batch_sizes
        .iter()
        .map(|&batch| {
            Ok(SweepPoint {
                batch,
                baseline: measure(cfg, &cfg.optimizer, Schedule::Baseline, batch)?,
                forward_fusion: measure(cfg, &cfg.optimizer, Schedule::ForwardFusion, batch)?,
                backward_fusion: measure(cfg, &cfg.optimizer, Schedule::BackwardFusion, batch)?,
            })
        })
        .collect()
}

pub fn speedup_rows(points: &[SweepPoint]) -> Vec<SweepRow> {
    points
        .iter()
        .map(|p| SweepRow {
            idx: p.batch,
            forward_fusion: speedup_cell(&p.baseline, &p.forward_fusion),
            backward_fusion: speedup_cell(&p.baseline, &p.backward_fusion),
        })
        .collect()
}

pub fn saved_rows(points: &[SweepPoint]) -> Vec<SweepRow> {
    points
        .iter()
        .map(|p| SweepRow {
            idx: p.batch,
            forward_fusion: saved_cell(&p.baseline, &p.forward_fusion),
            backward_fusion: saved_cell(&p.baseline, &p.backward_fusion),
        })
        .collect()
}

/// Mean per-stage time for each schedule: rows `(schedule, stage, mean, median)`.
pub fn breakdown(cfg: &BenchConfig) -> Result<Vec<(Schedule, &'static str, Cell, Cell)>> {
    let batch = cfg.batch_sizes[0];
    let mut rows = Vec::new();
    for schedule in Schedule::ALL {
        let m = measure(cfg, &cfg.optimizer, schedule, batch)?;
        let stages: [(&'static str, fn(&StageTimes) -> f64); 3] = [
            ("forward", |s| s.forward_ms),
            ("backward", |s| s.backward_ms),
            ("optimizer", |s| s.optimizer_ms),
        ];
        for (name, get) in stages {
            let (mean, med) = match &m {
                Measurement::Timed { mean, median } => (Cell::Value(get(mean)), Cell::Value(get(median))),
                Measurement::Skipped => (Cell::Skip, Cell::Skip),
            };
            rows.push((schedule, name, mean, med));
        }
    }
    Ok(rows)
}

/// One point of the optimizer comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerPoint {
    pub label: String,
    pub schedule: Schedule,
    /// Baseline optimizer time over baseline iteration time.
    pub ratio: f64,
    pub speedup: Cell,
}

/// The seven policies compared: plain SGD without weight decay, then six
/// policies with the configured weight decay.
pub fn optimizer_lineup(weight_decay: f64) -> Vec<(String, OptimizerPolicy)> {
    let wd = if weight_decay > 0.0 { weight_decay } else { 1e-4 };
    let mut out = vec![("sgd-no-wd".to_string(), OptimizerPolicy::new(OptimizerKind::Sgd))];
    for kind in [
        OptimizerKind::Sgd,
        OptimizerKind::SgdMomentum,
        OptimizerKind::Adagrad,
        OptimizerKind::RmsProp,
        OptimizerKind::Adam,
        OptimizerKind::Adadelta,
    ] {
        out.push((kind.as_str().to_string(), OptimizerPolicy::new(kind).with_weight_decay(wd)));
    }
    out
}

pub fn compare_optimizers(cfg: &BenchConfig) -> Result<Vec<OptimizerPoint>> {
    let batch = cfg.batch_sizes[0];
    let mut points = Vec::new();
    for (label, policy) in optimizer_lineup(cfg.optimizer.weight_decay) {
        let base = measure(cfg, &policy, Schedule::Baseline, batch)?;
        let (mean_opt, mean_total) = match base {
            Measurement::Timed { median, .. } => (median.optimizer_ms, median.total_ms()),
            Measurement::Skipped => unreachable!("baseline never needs to skip"),
        };
        for schedule in [Schedule::ForwardFusion, Schedule::BackwardFusion] {
            let m = measure(cfg, &policy, schedule, batch)?;
            points.push(OptimizerPoint {
                label: label.clone(),
                schedule,
                ratio: mean_opt / mean_total,
                speedup: speedup_cell(&base, &m),
            });
        }
    }
    Ok(points)
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).expect("finite"));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = rx.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mean) * (b - mean)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mean).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - mean).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

// ---------------------------------------------------------------------------
// trajectory-equivalence grid

#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub optimizer: OptimizerKind,
    pub model: ModelSpec,
    pub precision: Precision,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellOutcome {
    pub cell: GridCell,
    /// `None` when every check passed.
    pub failure: Option<String>,
    /// Largest relative deviation of parallel backward-fusion from baseline.
    pub parallel_rel_err: f64,
}

/// Models of the verification grid.
pub fn grid_models() -> Vec<ModelSpec> {
    vec![
        ModelSpec::Chain { layers: 3, width: 4 },
        ModelSpec::SharedChain { layers: 4, width: 4, share_groups: vec![vec![0, 2]] },
        ModelSpec::MulProbe { width: 2 },
    ]
}

pub fn grid_cells(seeds: &[u64]) -> Vec<GridCell> {
    let mut cells = Vec::new();
    for optimizer in OptimizerKind::LOCAL {
        for model in grid_models() {
            for precision in [Precision::F32, Precision::F64] {
                for &seed in seeds {
                    cells.push(GridCell { optimizer, model: model.clone(), precision, seed });
                }
            }
        }
    }
    cells
}

fn bits<T: Scalar>(values: &[Tensor<T>]) -> Vec<u64> {
    values.iter().flat_map(|t| t.data().iter().map(|&v| Scalar::to_f64(v).to_bits())).collect()
}

fn max_rel_err<T: Scalar>(a: &[Tensor<T>], b: &[Tensor<T>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()))
        .map(|(&x, &y)| {
            let (x, y) = (Scalar::to_f64(x), Scalar::to_f64(y));
            (x - y).abs() / x.abs().max(f64::MIN_POSITIVE)
        })
        .fold(0.0, f64::max)
}

fn steps_per_param(trace: &ScheduleTrace, params: usize) -> Vec<usize> {
    let mut n = vec![0; params];
    for t in trace.tasks().filter(|t| t.kind == TaskKind::OptimizerStep) {
        n[t.target] += 1;
    }
    n
}

/// Runs `iterations` of `schedule` and returns the final (materialized)
/// parameters, checking per-iteration trace invariants along the way.
pub fn run_trajectory<T: Scalar>(
    model: &ModelSpec,
    policy: &OptimizerPolicy,
    schedule: Schedule,
    mode: BackwardMode,
    seed: u64,
    batch: usize,
    iterations: usize,
) -> Result<Vec<Tensor<T>>> {
    let mut graph = Graph::<T>::build(model.clone(), seed)?;
    for it in 0..iterations {
        let input = graph.sample_input(batch, seed.wrapping_mul(1000).wrapping_add(it as u64))?;
        let report = run_step(schedule, &mut graph, policy, &input, mode)?;
        check_trace_legality(&report.trace, &graph)?;
        let expected = if schedule == Schedule::ForwardFusion && it == 0 { 0 } else { 1 };
        let steps = steps_per_param(&report.trace, graph.param_count());
        if steps.iter().any(|&s| s != expected) {
            return Err(Error::State(format!(
                "{schedule} iteration {it}: optimizer steps per parameter {steps:?}, expected {expected} each"
            )));
        }
        if schedule == Schedule::BackwardFusion && !steps_wait_for_readers(&report.trace, &graph) {
            return Err(Error::State(format!("iteration {it}: a step overtook a reader of the old value")));
        }
    }
    flush_pending_updates(&graph, policy)?;
    Ok(graph.param_values())
}

pub const GRID_ITERATIONS: usize = 10;
pub const GRID_BATCH: usize = 3;
pub const GRID_WORKERS: usize = 4;
pub const PARALLEL_REL_TOL: f64 = 1e-12;

fn verify_cell_typed<T: Scalar>(cell: &GridCell) -> Result<f64> {
    let policy = OptimizerPolicy::new(cell.optimizer).with_weight_decay(1e-3);
    let run = |schedule, mode| {
        run_trajectory::<T>(&cell.model, &policy, schedule, mode, cell.seed, GRID_BATCH, GRID_ITERATIONS)
    };
    let reference = run(Schedule::Baseline, BackwardMode::Serial)?;
    let reference_bits = bits(&reference);
    for schedule in [Schedule::ForwardFusion, Schedule::BackwardFusion] {
        let got = run(schedule, BackwardMode::Serial)?;
        if bits(&got) != reference_bits {
            return Err(Error::State(format!(
                "{schedule} diverges from baseline (max rel err {:e})",
                max_rel_err(&reference, &got)
            )));
        }
    }
    let parallel = run(Schedule::BackwardFusion, BackwardMode::Parallel(GRID_WORKERS))?;
    let err = max_rel_err(&reference, &parallel);
    if !(err <= PARALLEL_REL_TOL) {
        return Err(Error::State(format!("parallel backward-fusion rel err {err:e} > {PARALLEL_REL_TOL:e}")));
    }
    Ok(err)
}

pub fn verify_cell(cell: &GridCell) -> CellOutcome {
    let result = match cell.precision {
        Precision::F32 => verify_cell_typed::<f32>(cell),
        Precision::F64 => verify_cell_typed::<f64>(cell),
    };
    match result {
        Ok(err) => CellOutcome { cell: cell.clone(), failure: None, parallel_rel_err: err },
        Err(e) => CellOutcome { cell: cell.clone(), failure: Some(e.to_string()), parallel_rel_err: f64::NAN },
    }
}

/// Checks trajectory equivalence on every cell; cells run concurrently with
/// the `parallel` feature.
pub fn verify_grid(cells: &[GridCell]) -> Vec<CellOutcome> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        cells.par_iter().map(verify_cell).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        verify_grid_serial(cells)
    }
}

pub fn verify_grid_serial(cells: &[GridCell]) -> Vec<CellOutcome> {
    cells.iter().map(verify_cell).collect()
}

// ---------------------------------------------------------------------------
// entry point

#[derive(Debug, Clone, Default)]
pub struct BenchOutcome {
    pub files: Vec<PathBuf>,
    /// False only when a verification check failed.
    pub passed: bool,
    pub summary: String,
}

fn trace_typed<T: Scalar>(cfg: &BenchConfig, schedule: Schedule) -> Result<(ScheduleTrace, String)> {
    let mut graph = Graph::<T>::build(cfg.model.clone(), cfg.seed)?;
    graph.set_clip_norm(cfg.clip_norm);
    let input = graph.sample_input(cfg.batch_sizes[0], cfg.seed.wrapping_add(1))?;
    let first = run_step(schedule, &mut graph, &cfg.optimizer, &input, cfg.backward_mode())?;
    let second = run_step(schedule, &mut graph, &cfg.optimizer, &input, cfg.backward_mode())?;
    let cache = CacheConfig::per_layer(&cfg.optimizer);
    let report = simulate_cache(&ScheduleTrace::concat([&first.trace, &second.trace]), cache);
    let mut text = format!("schedule={schedule}\ncapacity={}\ndepth={}\n", cache.capacity(), critical_path_depth(&second.trace));
    text.push_str(&report.to_text());
    Ok((second.trace, text))
}

pub fn run_bench(cfg: &BenchConfig) -> Result<BenchOutcome> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out)?;
    let mut outcome = BenchOutcome { passed: true, ..Default::default() };
    let path = |name: &str| cfg.out.join(name);

    match cfg.mode {
        Mode::Time => {
            let batch = cfg.batch_sizes[0];
            let mut text = String::from("schedule\tforward_ms\tbackward_ms\toptimizer_ms\ttotal_ms\tmedian_total_ms\tspeedup\n");
            let baseline = measure(cfg, &cfg.optimizer, Schedule::Baseline, batch)?;
            for schedule in cfg.schedules() {
                let m = if schedule == Schedule::Baseline {
                    baseline
                } else {
                    measure(cfg, &cfg.optimizer, schedule, batch)?
                };
                match m {
                    Measurement::Timed { mean, median } => {
                        let _ = writeln!(
                            text,
                            "{schedule}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{}",
                            mean.forward_ms,
                            mean.backward_ms,
                            mean.optimizer_ms,
                            mean.total_ms(),
                            median.total_ms(),
                            speedup_cell(&baseline, &m)
                        );
                    }
                    Measurement::Skipped => {
                        let _ = writeln!(text, "{schedule}\tskip\tskip\tskip\tskip\tskip\tskip");
                    }
                }
            }
            let p = path("time.tsv");
            fs::write(&p, &text)?;
            outcome.summary = text;
            outcome.files.push(p);
        }
        Mode::Breakdown => {
            let mut text = String::from("schedule\tstage\tmean_ms\tmedian_ms\n");
            for (schedule, stage, mean, med) in breakdown(cfg)? {
                let _ = writeln!(text, "{schedule}\t{stage}\t{mean}\t{med}");
            }
            let p = path("breakdown.tsv");
            fs::write(&p, &text)?;
            outcome.summary = text;
            outcome.files.push(p);
        }
        Mode::Sweep => {
            let points = run_sweep(cfg)?;
            let (speedup, saved) = (path("speedup.tsv"), path("saved.tsv"));
            emit_csv(&speedup_rows(&points), &speedup)?;
            emit_csv(&saved_rows(&points), &saved)?;
            let mut totals = String::from("idx\tbaseline\tforward-fusion\tbackward-fusion\n");
            for p in &points {
                let cell = |m: &Measurement| m.mean_total().map(Cell::Value).unwrap_or(Cell::Skip);
                let _ = writeln!(
                    totals,
                    "{}\t{}\t{}\t{}",
                    p.batch,
                    cell(&p.baseline),
                    cell(&p.forward_fusion),
                    cell(&p.backward_fusion)
                );
            }
            let totals_path = path("sweep_totals.tsv");
            fs::write(&totals_path, &totals)?;
            outcome.summary = fs::read_to_string(&speedup)?;
            outcome.files.extend([speedup, saved, totals_path]);
        }
        Mode::Trace => {
            for schedule in cfg.schedules() {
                let result = match cfg.precision {
                    Precision::F32 => trace_typed::<f32>(cfg, schedule),
                    Precision::F64 => trace_typed::<f64>(cfg, schedule),
                };
                let (trace, report) = match result {
                    Ok(r) => r,
                    Err(Error::GlobalInfoRequired(why)) => {
                        let _ = writeln!(outcome.summary, "{schedule}: skip ({why})");
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                let t = path(&format!("trace-{schedule}.txt"));
                let c = path(&format!("cache-{schedule}.txt"));
                fs::write(&t, trace.to_text())?;
                fs::write(&c, &report)?;
                outcome.summary.push_str(&report);
                outcome.files.extend([t, c]);
            }
        }
        Mode::Verify => {
            let results = verify_grid(&grid_cells(&[cfg.seed, cfg.seed + 1, cfg.seed + 2]));
            let mut text = String::from("optimizer\tmodel\tprecision\tseed\tstatus\n");
            let mut failed = 0;
            for r in &results {
                let status = match &r.failure {
                    None => "ok".to_string(),
                    Some(msg) => {
                        failed += 1;
                        format!("FAIL: {msg}")
                    }
                };
                let _ = writeln!(
                    text,
                    "{}\t{}\t{}\t{}\t{status}",
                    r.cell.optimizer,
                    r.cell.model.name(),
                    r.cell.precision,
                    r.cell.seed
                );
            }
            let p = path("verify.tsv");
            fs::write(&p, &text)?;
            outcome.files.push(p);
            outcome.passed = failed == 0;
            outcome.summary = format!("{} cells, {failed} failed\n", results.len());
        }
        Mode::Optimizers => {
            let points = compare_optimizers(cfg)?;
            let mut text = String::from("optimizer\tschedule\tratio\tspeedup\n");
            for p in &points {
                let _ = writeln!(text, "{}\t{}\t{:.6}\t{}", p.label, p.schedule, p.ratio, p.speedup);
            }
            let p = path("optimizers.tsv");
            fs::write(&p, &text)?;
            outcome.files.push(p);
            outcome.summary = text;
        }
    }
    Ok(outcome)
}
