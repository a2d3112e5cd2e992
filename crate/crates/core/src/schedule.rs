//! The three training schedules.
//!
//! * baseline: forward, backward, then every optimizer step.
//! * forward-fusion: each parameter's step is deferred to just before the
//!   first node that uses it in the next forward pass.
//! * backward-fusion: each parameter is stepped during backward as soon as
//!   its gradient is complete and no node still needs its old value.
//!
//! All three produce bitwise-identical parameter trajectories; they differ in
//! task order, memory-transaction adjacency and exploitable parallelism.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::graph::{BackwardEvent, Graph, NodeId, ParamId};
use crate::optim::{clip_by_global_norm, policy_step, OptimizerPolicy};
use crate::tensor::{Scalar, Tensor};
use crate::trace::{Access, RegionClass, ScheduleTrace, TaskId, TaskKind, TraceEvent};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Schedule {
    Baseline,
    ForwardFusion,
    BackwardFusion,
}

impl Schedule {
    pub const ALL: [Schedule; 3] = [Schedule::Baseline, Schedule::ForwardFusion, Schedule::BackwardFusion];

    pub fn as_str(self) -> &'static str {
        match self {
            Schedule::Baseline => "baseline",
            Schedule::ForwardFusion => "forward-fusion",
            Schedule::BackwardFusion => "backward-fusion",
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "baseline" => Schedule::Baseline,
            "forward" | "forward-fusion" => Schedule::ForwardFusion,
            "backward" | "backward-fusion" => Schedule::BackwardFusion,
            other => {
                return Err(Error::Config(format!("unknown schedule `{other}` (baseline, forward, backward)")))
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardMode {
    Serial,
    /// A pool of this many workers drains the ready queue. Without the
    /// `parallel` feature this runs the serial task order.
    Parallel(usize),
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimes {
    pub forward_ms: f64,
    pub backward_ms: f64,
    pub optimizer_ms: f64,
}

impl StageTimes {
    pub fn total_ms(&self) -> f64 {
        self.forward_ms + self.backward_ms + self.optimizer_ms
    }
}

#[derive(Debug, Clone)]
pub struct StepReport<T> {
    pub schedule: Schedule,
    pub loss: T,
    pub trace: ScheduleTrace,
    pub times: StageTimes,
    /// Parameters whose step is deferred past the end of this iteration.
    pub pending_updates: usize,
}

fn elapsed_ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

fn check_policy(policy: &OptimizerPolicy) -> Result<()> {
    policy.validate()?;
    if policy.requires_global_info() {
        return Err(Error::Config(format!("{} cannot drive a graph schedule", policy.kind)));
    }
    Ok(())
}

fn pending_count<T: Scalar>(graph: &Graph<T>) -> usize {
    (0..graph.param_count()).filter(|&p| graph.param(p).pending()).count()
}

fn step_param<T: Scalar>(graph: &Graph<T>, policy: &OptimizerPolicy, param: ParamId, deps: Vec<TaskId>) -> Result<()> {
    let task = graph.recorder().task(TaskKind::OptimizerStep, param, deps);
    policy_step(policy, &mut graph.param(param), graph.recorder(), Some(task))
}

/// Dispatches one iteration of `schedule`.
pub fn run_step<T: Scalar>(
    schedule: Schedule,
    graph: &mut Graph<T>,
    policy: &OptimizerPolicy,
    input: &Tensor<T>,
    mode: BackwardMode,
) -> Result<StepReport<T>> {
    match schedule {
        Schedule::Baseline => run_baseline(graph, policy, input),
        Schedule::ForwardFusion => run_forward_fusion(graph, policy, input),
        Schedule::BackwardFusion => run_backward_fusion(graph, policy, input, mode),
    }
}

pub fn run_baseline<T: Scalar>(
    graph: &mut Graph<T>,
    policy: &OptimizerPolicy,
    input: &Tensor<T>,
) -> Result<StepReport<T>> {
    check_policy(policy)?;
    graph.take_trace();
    let start = Instant::now();
    let loss = graph.forward(input, None)?;
    let forward_ms = elapsed_ms(start);

    let start = Instant::now();
    graph.backward(None)?;
    let backward_ms = elapsed_ms(start);

    let start = Instant::now();
    if let Some(max_norm) = graph.clip_norm() {
        clip_by_global_norm(graph, max_norm);
    }
    // the optimizer stage waits for all of backward, then steps one by one
    let mut deps: Vec<TaskId> = graph.nodes().iter().filter_map(|n| n.backward_task()).collect();
    for p in 0..graph.param_count() {
        step_param(graph, policy, p, std::mem::take(&mut deps))?;
        deps = graph.recorder().last_task().into_iter().collect();
    }
    let optimizer_ms = elapsed_ms(start);

    Ok(StepReport {
        schedule: Schedule::Baseline,
        loss,
        trace: graph.take_trace(),
        times: StageTimes { forward_ms, backward_ms, optimizer_ms },
        pending_updates: 0,
    })
}

pub fn run_forward_fusion<T: Scalar>(
    graph: &mut Graph<T>,
    policy: &OptimizerPolicy,
    input: &Tensor<T>,
) -> Result<StepReport<T>> {
    check_policy(policy)?;
    graph.take_trace();
    let start = Instant::now();
    let mut hook = |g: &Graph<T>, node: NodeId| -> Result<Vec<TaskId>> {
        let mut deps = Vec::new();
        for &pid in g.node_params(node) {
            let (updated, pending) = {
                let p = g.param(pid);
                (p.updated(), p.pending())
            };
            if updated {
                continue;
            }
            if pending {
                let prev = g.recorder().last_task().into_iter().collect();
                step_param(g, policy, pid, prev)?;
                deps.extend(g.recorder().last_task());
            }
            g.param(pid).set_updated(true);
        }
        Ok(deps)
    };
    let loss = graph.forward(input, Some(&mut hook))?;
    let forward_ms = elapsed_ms(start);

    let start = Instant::now();
    graph.backward(None)?;
    if let Some(max_norm) = graph.clip_norm() {
        clip_by_global_norm(graph, max_norm);
    }
    let backward_ms = elapsed_ms(start);

    Ok(StepReport {
        schedule: Schedule::ForwardFusion,
        loss,
        trace: graph.take_trace(),
        times: StageTimes { forward_ms, backward_ms, optimizer_ms: 0.0 },
        pending_updates: pending_count(graph),
    })
}

/// True iff `param` may be updated in place now: its gradient is fully
/// accumulated and no node backward that reads its old value is outstanding.
pub fn check_inplace_safety<T: Scalar>(param: ParamId, graph: &Graph<T>) -> bool {
    graph.inplace_safe(param)
}

fn step_if_safe<T: Scalar>(graph: &Graph<T>, policy: &OptimizerPolicy, param: ParamId) -> Result<()> {
    let pending = graph.param(param).pending();
    if pending && check_inplace_safety(param, graph) {
        step_param(graph, policy, param, graph.param_backward_tasks(param))?;
    }
    Ok(())
}

pub fn run_backward_fusion<T: Scalar>(
    graph: &mut Graph<T>,
    policy: &OptimizerPolicy,
    input: &Tensor<T>,
    mode: BackwardMode,
) -> Result<StepReport<T>> {
    policy.validate()?;
    if policy.requires_global_info() {
        return Err(Error::GlobalInfoRequired(format!("{} needs the full Hessian", policy.kind)));
    }
    if let Some(max_norm) = graph.clip_norm() {
        return Err(Error::GlobalInfoRequired(format!("global-norm clip at {max_norm} is attached")));
    }
    if let BackwardMode::Parallel(0) = mode {
        return Err(Error::Config("parallel mode needs at least one worker".into()));
    }
    graph.take_trace();
    let start = Instant::now();
    let loss = graph.forward(input, None)?;
    let forward_ms = elapsed_ms(start);

    let start = Instant::now();
    match mode {
        BackwardMode::Serial => backward_fused_serial(graph, policy)?,
        BackwardMode::Parallel(workers) => backward_fused_parallel(graph, policy, workers)?,
    }
    let backward_ms = elapsed_ms(start);

    Ok(StepReport {
        schedule: Schedule::BackwardFusion,
        loss,
        trace: graph.take_trace(),
        times: StageTimes { forward_ms, backward_ms, optimizer_ms: 0.0 },
        pending_updates: pending_count(graph),
    })
}

fn backward_fused_serial<T: Scalar>(graph: &Graph<T>, policy: &OptimizerPolicy) -> Result<()> {
    graph.backward(Some(&mut |g: &Graph<T>, ev| match ev {
        BackwardEvent::ParamGradLanded { param, .. } => step_if_safe(g, policy, param),
        BackwardEvent::NodeDone { node } => {
            for &p in g.node_params(node) {
                step_if_safe(g, policy, p)?;
            }
            Ok(())
        }
    }))
}

#[cfg(not(feature = "parallel"))]
fn backward_fused_parallel<T: Scalar>(graph: &Graph<T>, policy: &OptimizerPolicy, _workers: usize) -> Result<()> {
    backward_fused_serial(graph, policy)
}

#[cfg(feature = "parallel")]
fn backward_fused_parallel<T: Scalar>(graph: &Graph<T>, policy: &OptimizerPolicy, workers: usize) -> Result<()> {
    use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
    use std::sync::Mutex;

    struct Ctx<'a, T> {
        graph: &'a Graph<T>,
        policy: &'a OptimizerPolicy,
        waiting_on: Vec<AtomicUsize>,
        claimed: Vec<AtomicBool>,
        failure: Mutex<Option<Error>>,
    }

    impl<T: Scalar> Ctx<'_, T> {
        fn fail(&self, e: Error) {
            self.failure.lock().unwrap_or_else(|p| p.into_inner()).get_or_insert(e);
        }

        fn failed(&self) -> bool {
            self.failure.lock().unwrap_or_else(|p| p.into_inner()).is_some()
        }

        fn try_claim_step(&self, param: ParamId) -> bool {
            check_inplace_safety(param, self.graph) && !self.claimed[param].swap(true, Ordering::AcqRel)
        }
    }

    fn spawn_step<'s, T: Scalar>(s: &rayon::Scope<'s>, ctx: &'s Ctx<'s, T>, param: ParamId) {
        s.spawn(move |_| {
            if ctx.failed() {
                return;
            }
            let deps = ctx.graph.param_backward_tasks(param);
            if let Err(e) = step_param(ctx.graph, ctx.policy, param, deps) {
                ctx.fail(e);
            }
        });
    }

    fn spawn_backward<'s, T: Scalar>(s: &rayon::Scope<'s>, ctx: &'s Ctx<'s, T>, node: NodeId) {
        s.spawn(move |s| {
            if ctx.failed() {
                return;
            }
            let g = ctx.graph;
            let mut deps = vec![g.nodes()[node].forward_task()];
            deps.extend(g.consumers(node).into_iter().filter_map(|c| g.nodes()[c].backward_task()));
            let task = g.recorder().task(TaskKind::BackwardNode, node, deps);
            if let Err(e) = g.run_node_backward(node, task, &mut |_, _| Ok(())) {
                ctx.fail(e);
                return;
            }
            for &p in g.node_params(node) {
                if ctx.try_claim_step(p) {
                    spawn_step(s, ctx, p);
                }
            }
            if node > 0 && ctx.waiting_on[node - 1].fetch_sub(1, Ordering::AcqRel) == 1 {
                spawn_backward(s, ctx, node - 1);
            }
        });
    }

    graph.begin_backward()?;
    let n = graph.node_count();
    let ctx = Ctx {
        graph,
        policy,
        waiting_on: (0..n).map(|i| AtomicUsize::new(graph.consumers(i).len())).collect(),
        claimed: (0..graph.param_count()).map(|_| AtomicBool::new(false)).collect(),
        failure: Mutex::new(None),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
    pool.scope(|s| {
        for node in (0..n).filter(|&i| graph.consumers(i).is_empty()) {
            spawn_backward(s, &ctx, node);
        }
    });
    match ctx.failure.into_inner().unwrap_or_else(|p| p.into_inner()) {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Applies every deferred forward-fusion step now, exactly as the next
/// forward pass would. Returns how many parameters were stepped.
pub fn flush_pending_updates<T: Scalar>(graph: &Graph<T>, policy: &OptimizerPolicy) -> Result<usize> {
    check_policy(policy)?;
    let pending: Vec<ParamId> = (0..graph.param_count()).filter(|&p| graph.param(p).pending()).collect();
    if pending.is_empty() {
        return Ok(0);
    }
    let flush = graph.recorder().task(TaskKind::Flush, 0, Vec::new());
    for &p in &pending {
        step_param(graph, policy, p, vec![flush])?;
    }
    Ok(pending.len())
}

/// Replays a one-iteration `trace` (optionally preceded by a flush) against
/// the structure of `graph` and checks that the recorded order is legal:
///
/// * dependencies precede their dependents,
/// * a node's forward depends on its producer's forward, its backward on its
///   own forward and on its consumer's backward,
/// * every optimizer step of a parameter comes after either none or all of
///   the backward tasks that contribute to its gradient (never in between),
///   and transitively depends on those it follows.
pub fn check_trace_legality<T: Scalar>(trace: &ScheduleTrace, graph: &Graph<T>) -> Result<()> {
    trace.check_dependency_order()?;
    let n = graph.node_count();
    let tasks: Vec<_> = trace.tasks().collect();
    let mut last_forward: Vec<Option<TaskId>> = vec![None; n];
    let mut last_backward: Vec<Option<TaskId>> = vec![None; n];
    let mut since_step: Vec<Vec<TaskId>> = vec![Vec::new(); graph.param_count()];
    let illegal = |msg: String| Err(Error::State(format!("illegal trace: {msg}")));

    for task in &tasks {
        match task.kind {
            TaskKind::ForwardNode => {
                let node = task.target;
                if node >= n {
                    return illegal(format!("forward of unknown node {node}"));
                }
                if node > 0 {
                    match last_forward[node - 1] {
                        Some(prev) if task.deps.contains(&prev) => {}
                        _ => return illegal(format!("forward of node {node} does not follow node {}", node - 1)),
                    }
                }
                last_forward[node] = Some(task.seq);
                if node == 0 {
                    last_backward.iter_mut().for_each(|b| *b = None);
                }
            }
            TaskKind::BackwardNode => {
                let node = task.target;
                if node >= n {
                    return illegal(format!("backward of unknown node {node}"));
                }
                match last_forward[node] {
                    Some(f) if task.deps.contains(&f) => {}
                    _ => return illegal(format!("backward of node {node} does not depend on its forward")),
                }
                if node + 1 < n {
                    match last_backward[node + 1] {
                        Some(c) if task.deps.contains(&c) => {}
                        _ => return illegal(format!("backward of node {node} runs before its consumer's")),
                    }
                }
                last_backward[node] = Some(task.seq);
                for &p in graph.node_params(node) {
                    since_step[p].push(task.seq);
                }
            }
            TaskKind::OptimizerStep => {
                let p = task.target;
                if p >= since_step.len() {
                    return illegal(format!("step of unknown parameter {p}"));
                }
                let seen = std::mem::take(&mut since_step[p]);
                let users = graph.param_users(p).len();
                if !seen.is_empty() && seen.len() != users {
                    return illegal(format!(
                        "parameter {p} stepped after {} of {users} gradient contributions",
                        seen.len()
                    ));
                }
                for b in seen {
                    if !reaches(&tasks, task.seq, b) {
                        return illegal(format!("step of parameter {p} does not wait for backward task {b}"));
                    }
                }
            }
            TaskKind::Flush => {}
        }
    }
    Ok(())
}

fn reaches(tasks: &[&crate::trace::TaskRecord], from: TaskId, target: TaskId) -> bool {
    let mut stack = vec![from];
    let mut seen = vec![false; tasks.len()];
    while let Some(t) = stack.pop() {
        if t == target {
            return true;
        }
        if t < target || std::mem::replace(&mut seen[t], true) {
            continue;
        }
        stack.extend(tasks[t].deps.iter().copied());
    }
    false
}

/// For a backward-fusion iteration trace: true iff every optimizer step of a
/// parameter comes after each backward task that uses the parameter has
/// finished reading its old value. Transactions are matched to tasks by id,
/// so interleaved parallel traces are handled.
pub fn steps_wait_for_readers<T: Scalar>(trace: &ScheduleTrace, graph: &Graph<T>) -> bool {
    let kinds: Vec<(TaskKind, usize)> = trace.tasks().map(|t| (t.kind, t.target)).collect();
    let mut finished: Vec<Vec<NodeId>> = vec![Vec::new(); graph.param_count()];
    for event in trace.events() {
        match event {
            TraceEvent::Mem(m) if m.class == RegionClass::Parameter && m.access == Access::Read => {
                if let Some((TaskKind::BackwardNode, node)) = m.task.map(|t| kinds[t]) {
                    finished[m.owner].push(node);
                }
            }
            TraceEvent::Task(t) if t.kind == TaskKind::OptimizerStep => {
                if !graph.param_users(t.target).iter().all(|u| finished[t.target].contains(u)) {
                    return false;
                }
            }
            _ => {}
        }
    }
    true
}
