//! Dynamic computational graph: parameters persist across iterations, the
//! tape of executed nodes is rebuilt by every forward pass.
//!
//! Every node is one trainable layer (`linear + relu` or the row-wise
//! multiply probe). The scalar loss is the sum of the final node's output,
//! computed as that node's tail, so a chain of `n` layers yields exactly `n`
//! forward tasks and `n` backward tasks per iteration.
//!
//! A node's backward is one atomic task that produces gradients for its
//! parameters first and for its input second. Hooks observe both steps, which
//! is what lets a scheduler see a parameter whose gradient has landed while
//! the node still needs the parameter's old value.

use std::collections::BTreeMap;
use std::sync::{Mutex, MutexGuard};

use crate::error::{Error, Result};
use crate::tensor::{self, Elementwise, Init, Scalar, Tensor};
use crate::trace::{Access, Recorder, RegionClass, ScheduleTrace, TaskId, TaskKind};

pub type ParamId = usize;
pub type NodeId = usize;

/// A trainable tensor together with everything the schedules track for it.
#[derive(Debug, Clone)]
pub struct Parameter<T> {
    id: ParamId,
    value: Tensor<T>,
    grad: Tensor<T>,
    history: BTreeMap<&'static str, Tensor<T>>,
    /// Gradient contributions still outstanding this iteration.
    count: usize,
    /// Forward-fusion latch: set once the deferred step ran this iteration.
    updated: bool,
    /// An accumulated gradient is waiting for its optimizer step.
    pending: bool,
    /// Optimizer steps applied so far.
    steps: u64,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(id: ParamId, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape()).expect("value shape is valid");
        Parameter {
            id,
            value,
            grad,
            history: BTreeMap::new(),
            count: 0,
            updated: false,
            pending: false,
            steps: 0,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn grad(&self) -> &Tensor<T> {
        &self.grad
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn updated(&self) -> bool {
        self.updated
    }

    pub fn pending(&self) -> bool {
        self.pending
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn history(&self, slot: &str) -> Option<&Tensor<T>> {
        self.history.get(slot)
    }

    pub fn set_value(&mut self, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.value.shape() {
            return Err(Error::shape(format!(
                "parameter {} has shape {:?}, got {:?}",
                self.id,
                self.value.shape(),
                value.shape()
            )));
        }
        self.value = value;
        Ok(())
    }

    pub fn set_grad(&mut self, grad: Tensor<T>) -> Result<()> {
        if grad.shape() != self.value.shape() {
            return Err(Error::shape(format!("gradient shape {:?} != {:?}", grad.shape(), self.value.shape())));
        }
        self.grad = grad;
        Ok(())
    }

    pub(crate) fn grad_mut(&mut self) -> &mut Tensor<T> {
        &mut self.grad
    }

    /// Splits the borrow so an optimizer can read the gradient while it
    /// mutates value and history.
    pub(crate) fn parts_mut(
        &mut self,
    ) -> (&mut Tensor<T>, &mut Tensor<T>, &mut BTreeMap<&'static str, Tensor<T>>) {
        (&mut self.value, &mut self.grad, &mut self.history)
    }

    pub(crate) fn finish_step(&mut self) {
        self.pending = false;
        self.steps += 1;
    }

    pub(crate) fn set_updated(&mut self, v: bool) {
        self.updated = v;
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelSpec {
    Chain { layers: usize, width: usize },
    /// Like `Chain`, but every group of layer indices shares one weight.
    SharedChain { layers: usize, width: usize, share_groups: Vec<Vec<usize>> },
    /// A single node `y = theta * x` (row-wise, `theta` has `width` entries).
    MulProbe { width: usize },
}

impl ModelSpec {
    pub fn width(&self) -> usize {
        match *self {
            ModelSpec::Chain { width, .. }
            | ModelSpec::SharedChain { width, .. }
            | ModelSpec::MulProbe { width } => width,
        }
    }

    pub fn layers(&self) -> usize {
        match *self {
            ModelSpec::Chain { layers, .. } | ModelSpec::SharedChain { layers, .. } => layers,
            ModelSpec::MulProbe { .. } => 1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelSpec::Chain { .. } => "chain",
            ModelSpec::SharedChain { .. } => "shared-chain",
            ModelSpec::MulProbe { .. } => "mul-probe",
        }
    }

    fn validate(&self) -> Result<()> {
        let (layers, width) = (self.layers(), self.width());
        if layers == 0 || width == 0 {
            return Err(Error::Config(format!("{}: layers and width must be at least 1", self.name())));
        }
        if let ModelSpec::SharedChain { share_groups, .. } = self {
            let mut seen = vec![false; layers];
            for group in share_groups {
                if group.is_empty() {
                    return Err(Error::Config("empty share group".into()));
                }
                for &l in group {
                    if l >= layers {
                        return Err(Error::Config(format!("share group names layer {l}, model has {layers}")));
                    }
                    if std::mem::replace(&mut seen[l], true) {
                        return Err(Error::Config(format!("layer {l} appears in more than one share group")));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    /// `relu(x · W)`.
    Linear,
    /// `theta ⊙ x` applied to every row of `x`.
    Elementwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layer {
    kind: OpKind,
    param: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardState {
    Pending,
    Running,
    Done,
}

/// One executed node on the tape.
#[derive(Debug)]
pub struct OpNode<T> {
    pub id: NodeId,
    pub kind: OpKind,
    /// Activation id of the input (0 = graph input, `k + 1` = output of node `k`).
    pub input: usize,
    pub params: Vec<ParamId>,
    pub output: Tensor<T>,
    forward_task: TaskId,
    backward: Mutex<(BackwardState, Option<TaskId>)>,
}

impl<T> OpNode<T> {
    pub fn backward_state(&self) -> BackwardState {
        lock(&self.backward).0
    }

    pub fn forward_task(&self) -> TaskId {
        self.forward_task
    }

    pub fn backward_task(&self) -> Option<TaskId> {
        lock(&self.backward).1
    }
}

#[derive(Debug)]
struct Tape<T> {
    input: Tensor<T>,
    nodes: Vec<OpNode<T>>,
    /// Gradient w.r.t. each activation, indexed like activation ids.
    act_grads: Vec<Mutex<Option<Tensor<T>>>>,
    loss: T,
    backward_started: Mutex<bool>,
}

impl<T> Tape<T> {
    fn activation(&self, act: usize) -> &Tensor<T> {
        if act == 0 {
            &self.input
        } else {
            &self.nodes[act - 1].output
        }
    }
}

/// What a backward hook is told.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardEvent {
    /// The gradient contribution of `node` has been added to `param.grad`;
    /// the node's input gradient has not been computed yet.
    ParamGradLanded { node: NodeId, param: ParamId },
    /// Every output of the node's backward task is written.
    NodeDone { node: NodeId },
}

pub type PreNodeHook<'h, T> = dyn FnMut(&Graph<T>, NodeId) -> Result<Vec<TaskId>> + 'h;
pub type BackwardHook<'h, T> = dyn FnMut(&Graph<T>, BackwardEvent) -> Result<()> + 'h;

pub(crate) fn lock<X>(m: &Mutex<X>) -> MutexGuard<'_, X> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

/// Parameters, model structure, the current tape and the trace recorder.
pub struct Graph<T> {
    spec: ModelSpec,
    layers: Vec<Layer>,
    params: Vec<Mutex<Parameter<T>>>,
    users: Vec<Vec<NodeId>>,
    tape: Option<Tape<T>>,
    recorder: Recorder,
    clip_norm: Option<f64>,
}

impl<T: Scalar> std::fmt::Debug for Graph<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Graph")
            .field("spec", &self.spec)
            .field("params", &self.params.len())
            .field("clip_norm", &self.clip_norm)
            .finish()
    }
}

impl<T: Scalar> Graph<T> {
    /// Builds the synthetic model described by `spec`; weights are He-uniform
    /// from a stream seeded by `seed`.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let width = spec.width();
        let mut layers = Vec::new();
        let mut params: Vec<Parameter<T>> = Vec::new();
        let param_seed = |pid: usize| seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(pid as u64 + 1);
        match &spec {
            ModelSpec::Chain { layers: n, .. } | ModelSpec::SharedChain { layers: n, .. } => {
                let groups: &[Vec<usize>] = match &spec {
                    ModelSpec::SharedChain { share_groups, .. } => share_groups,
                    _ => &[],
                };
                let bound = (6.0 / width as f64).sqrt();
                let mut owner: Vec<Option<ParamId>> = vec![None; *n];
                for l in 0..*n {
                    let pid = match owner[l] {
                        Some(pid) => pid,
                        None => {
                            let pid = params.len();
                            let init = Init::SeededUniform { lo: -bound, hi: bound, seed: param_seed(pid) };
                            params.push(Parameter::new(pid, Tensor::create(&[width, width], init)?));
                            if let Some(g) = groups.iter().find(|g| g.contains(&l)) {
                                for &m in g {
                                    owner[m] = Some(pid);
                                }
                            }
                            pid
                        }
                    };
                    layers.push(Layer { kind: OpKind::Linear, param: pid });
                }
            }
            ModelSpec::MulProbe { .. } => {
                let init = Init::SeededUniform { lo: 0.5, hi: 1.5, seed: param_seed(0) };
                params.push(Parameter::new(0, Tensor::create(&[width], init)?));
                layers.push(Layer { kind: OpKind::Elementwise, param: 0 });
            }
        }
        let mut users = vec![Vec::new(); params.len()];
        for (node, layer) in layers.iter().enumerate() {
            users[layer.param].push(node);
        }
        Ok(Graph {
            spec,
            layers,
            params: params.into_iter().map(Mutex::new).collect(),
            users,
            tape: None,
            recorder: Recorder::new(),
            clip_norm: None,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn node_count(&self) -> usize {
        self.layers.len()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn node_params(&self, node: NodeId) -> &[ParamId] {
        std::slice::from_ref(&self.layers[node].param)
    }

    /// Nodes that use `param`, in topological order.
    pub fn param_users(&self, param: ParamId) -> &[NodeId] {
        &self.users[param]
    }

    pub fn param(&self, id: ParamId) -> MutexGuard<'_, Parameter<T>> {
        lock(&self.params[id])
    }

    pub fn param_values(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| lock(p).value.clone()).collect()
    }

    pub fn set_param_value(&self, id: ParamId, value: Tensor<T>) -> Result<()> {
        lock(&self.params[id]).set_value(value)
    }

    pub fn recorder(&self) -> &Recorder {
        &self.recorder
    }

    pub fn take_trace(&self) -> ScheduleTrace {
        self.recorder.take()
    }

    /// Attaches (or removes) a global-norm gradient clip. A clip needs every
    /// gradient before any update.
    pub fn set_clip_norm(&mut self, max_norm: Option<f64>) {
        self.clip_norm = max_norm;
    }

    pub fn clip_norm(&self) -> Option<f64> {
        self.clip_norm
    }

    /// Uniform `[-1, 1)` input of shape `[batch, width]`.
    pub fn sample_input(&self, batch: usize, seed: u64) -> Result<Tensor<T>> {
        Tensor::create(&[batch, self.spec.width()], Init::SeededUniform { lo: -1.0, hi: 1.0, seed })
    }

    pub fn has_tape(&self) -> bool {
        self.tape.is_some()
    }

    pub fn loss(&self) -> Option<T> {
        self.tape.as_ref().map(|t| t.loss)
    }

    pub fn nodes(&self) -> &[OpNode<T>] {
        self.tape.as_ref().map(|t| t.nodes.as_slice()).unwrap_or(&[])
    }

    /// Gradient of the loss w.r.t. the graph input, once backward ran.
    pub fn input_grad(&self) -> Option<Tensor<T>> {
        self.tape.as_ref().and_then(|t| lock(&t.act_grads[0]).clone())
    }

    /// Consumers of the output of `node` (nodes whose input it is).
    pub fn consumers(&self, node: NodeId) -> Vec<NodeId> {
        self.nodes().iter().filter(|n| n.input == node + 1).map(|n| n.id).collect()
    }

    /// Runs every node in order, rebuilding the tape. `hook` runs before
    /// each node and may return extra task dependencies for it.
    pub fn forward(&mut self, input: &Tensor<T>, mut hook: Option<&mut PreNodeHook<'_, T>>) -> Result<T> {
        self.tape = None;
        let width = self.spec.width();
        match input.shape() {
            [_, w] if *w == width => {}
            other => {
                return Err(Error::shape(format!("node 0: expected input [batch, {width}], got {other:?}")));
            }
        }

        let mut nodes: Vec<OpNode<T>> = Vec::with_capacity(self.layers.len());
        for (id, layer) in self.layers.iter().enumerate() {
            let mut deps = match &mut hook {
                Some(h) => h(self, id)?,
                None => Vec::new(),
            };
            let input_act = id; // chains: node k reads activation k
            if let Some(prev) = nodes.last() {
                deps.push(prev.forward_task);
            }
            deps.sort_unstable();
            deps.dedup();
            let task = self.recorder.task(TaskKind::ForwardNode, id, deps);
            let x = if id == 0 { input } else { &nodes[id - 1].output };

            let output = {
                let mut p = lock(&self.params[layer.param]);
                self.recorder.mem(Some(task), RegionClass::Parameter, p.id, Access::Read);
                self.recorder.mem(Some(task), RegionClass::Activation, input_act, Access::Read);
                let out = match layer.kind {
                    OpKind::Linear => {
                        let z = tensor::matmul(x, &p.value)
                            .map_err(|e| Error::shape(format!("node {id}: {e}")))?;
                        tensor::elementwise(Elementwise::Relu, &z, None)?
                    }
                    OpKind::Elementwise => rowwise_mul(x, &p.value)
                        .map_err(|e| Error::shape(format!("node {id}: {e}")))?,
                };
                p.count += 1;
                out
            };
            self.recorder.mem(Some(task), RegionClass::Activation, id + 1, Access::Write);
            nodes.push(OpNode {
                id,
                kind: layer.kind,
                input: input_act,
                params: vec![layer.param],
                output,
                forward_task: task,
                backward: Mutex::new((BackwardState::Pending, None)),
            });
        }

        let last = nodes.last().expect("models have at least one node");
        let loss = last.output.sum();
        let mut act_grads: Vec<Mutex<Option<Tensor<T>>>> = (0..=nodes.len()).map(|_| Mutex::new(None)).collect();
        let seed_grad = Tensor::create(last.output.shape(), Init::Constant(1.0))?;
        act_grads[nodes.len()] = Mutex::new(Some(seed_grad));
        self.tape = Some(Tape {
            input: input.clone(),
            nodes,
            act_grads,
            loss,
            backward_started: Mutex::new(false),
        });
        Ok(loss)
    }

    fn tape_for_backward(&self) -> Result<&Tape<T>> {
        let tape = self
            .tape
            .as_ref()
            .ok_or_else(|| Error::State("backward called before forward".into()))?;
        let mut started = lock(&tape.backward_started);
        if *started {
            return Err(Error::State("backward already ran for this forward pass".into()));
        }
        *started = true;
        Ok(tape)
    }

    /// Claims the tape for a backward pass driven externally, task by task.
    pub fn begin_backward(&self) -> Result<()> {
        self.tape_for_backward().map(|_| ())
    }

    /// Serial reverse-order backward. `hook` observes every gradient landing
    /// and every node completion.
    pub fn backward(&self, mut hook: Option<&mut BackwardHook<'_, T>>) -> Result<()> {
        let tape = self.tape_for_backward()?;
        for node in tape.nodes.iter().rev() {
            let mut deps = vec![node.forward_task];
            deps.extend(
                tape.nodes
                    .iter()
                    .filter(|c| c.input == node.id + 1)
                    .filter_map(|c| c.backward_task()),
            );
            let task = self.recorder.task(TaskKind::BackwardNode, node.id, deps);
            self.run_node_backward(node.id, task, &mut |g, ev| match &mut hook {
                Some(h) => h(g, ev),
                None => Ok(()),
            })?;
        }
        Ok(())
    }

    /// Executes the backward task of one node. Safe to call concurrently for
    /// different nodes as long as each node runs after all its consumers.
    pub fn run_node_backward(
        &self,
        node_id: NodeId,
        task: TaskId,
        on_event: &mut dyn FnMut(&Graph<T>, BackwardEvent) -> Result<()>,
    ) -> Result<()> {
        let tape = self.tape.as_ref().ok_or_else(|| Error::State("no tape".into()))?;
        let node = &tape.nodes[node_id];
        {
            let mut st = lock(&node.backward);
            if st.0 != BackwardState::Pending {
                return Err(Error::State(format!("node {node_id} backward already ran")));
            }
            *st = (BackwardState::Running, Some(task));
        }
        let upstream = lock(&tape.act_grads[node_id + 1])
            .take()
            .ok_or_else(|| Error::State(format!("node {node_id}: upstream gradient missing")))?;
        let x = tape.activation(node.input);
        let rec = &self.recorder;

        let local = match node.kind {
            OpKind::Linear => {
                rec.mem(Some(task), RegionClass::Activation, node_id + 1, Access::Read);
                let mask: Vec<T> = node
                    .output
                    .data()
                    .iter()
                    .zip(upstream.data())
                    .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
                    .collect();
                Tensor::from_vec(upstream.shape(), mask)?
            }
            OpKind::Elementwise => upstream,
        };
        rec.mem(Some(task), RegionClass::Activation, node.input, Access::Read);

        let pid = node.params[0];
        let param_grad = match node.kind {
            OpKind::Linear => tensor::matmul(&x.transpose()?, &local)?,
            OpKind::Elementwise => rowwise_mul_grad(x, &local)?,
        };
        {
            let mut p = lock(&self.params[pid]);
            rec.mem(Some(task), RegionClass::Gradient, pid, Access::Read);
            tensor::axpy_inplace(&mut p.grad, T::one(), &param_grad)?;
            rec.mem(Some(task), RegionClass::Gradient, pid, Access::Write);
            p.count = p.count.checked_sub(1).ok_or_else(|| {
                Error::State(format!("parameter {pid}: more gradient contributions than usages"))
            })?;
            p.pending = true;
        }
        on_event(self, BackwardEvent::ParamGradLanded { node: node_id, param: pid })?;

        let input_grad = {
            let p = lock(&self.params[pid]);
            rec.mem(Some(task), RegionClass::Parameter, pid, Access::Read);
            match node.kind {
                OpKind::Linear => tensor::matmul(&local, &p.value.transpose()?)?,
                OpKind::Elementwise => rowwise_mul(&local, &p.value)?,
            }
        };
        {
            let mut slot = lock(&tape.act_grads[node.input]);
            match slot.as_mut() {
                Some(acc) => tensor::axpy_inplace(acc, T::one(), &input_grad)?,
                None => *slot = Some(input_grad),
            }
        }
        {
            let mut p = lock(&self.params[pid]);
            if p.updated {
                p.updated = false;
            }
        }
        lock(&node.backward).0 = BackwardState::Done;
        on_event(self, BackwardEvent::NodeDone { node: node_id })
    }

    /// Zeroes every gradient and usage count.
    pub fn zero_grads(&self) {
        for p in &self.params {
            let mut p = lock(p);
            p.grad.fill_zero();
            p.count = 0;
            p.pending = false;
            self.recorder.mem(None, RegionClass::Gradient, p.id, Access::Write);
        }
    }

    /// True iff `param` may be overwritten in place right now: its gradient
    /// is complete and no node that reads its current value still has
    /// backward work outstanding.
    pub fn inplace_safe(&self, param: ParamId) -> bool {
        if lock(&self.params[param]).count != 0 {
            return false;
        }
        let nodes = self.nodes();
        self.users[param]
            .iter()
            .filter_map(|&n| nodes.get(n))
            .all(|n| n.backward_state() == BackwardState::Done)
    }

    /// Backward task ids of every node that uses `param` (those that ran).
    pub fn param_backward_tasks(&self, param: ParamId) -> Vec<TaskId> {
        let nodes = self.nodes();
        self.users[param]
            .iter()
            .filter_map(|&n| nodes.get(n).and_then(|n| n.backward_task()))
            .collect()
    }
}

/// `y[r, c] = theta[c] * x[r, c]`.
fn rowwise_mul<T: Scalar>(x: &Tensor<T>, theta: &Tensor<T>) -> Result<Tensor<T>> {
    let w = theta.len();
    match x.shape() {
        [_, c] if *c == w => {}
        s => return Err(Error::shape(format!("row-wise multiply: {s:?} rows vs {w} weights"))),
    }
    let data = x
        .data()
        .chunks(w)
        .flat_map(|row| row.iter().zip(theta.data()).map(|(&a, &t)| t * a))
        .collect();
    Tensor::from_vec(x.shape(), data)
}

/// `d theta[c] = sum_r g[r, c] * x[r, c]`.
fn rowwise_mul_grad<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
    let w = *x.shape().last().unwrap_or(&1);
    let mut out = vec![T::zero(); w];
    for (xr, gr) in x.data().chunks(w).zip(g.data().chunks(w)) {
        for ((o, &a), &b) in out.iter_mut().zip(xr).zip(gr) {
            *o = *o + b * a;
        }
    }
    Tensor::from_vec(&[w], out)
}
