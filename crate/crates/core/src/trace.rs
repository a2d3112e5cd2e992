//! Ordered record of the tasks and whole-tensor memory transactions of one
//! (or several concatenated) training iterations.
//!
//! Text form, one record per line:
//!
//! ```text
//! task <forward-node|backward-node|optimizer-step|flush> <id> deps=<seq,seq,...>
//! mem <parameter|gradient|history|activation> <id> <R|W>
//! ```
//!
//! Task `<id>` is a node id for node tasks and a parameter id for optimizer
//! steps. `deps` lists task sequence numbers (0-based position among the
//! task lines). Activation ids: 0 is the graph input, `i + 1` is the output
//! of node `i`.

use std::fmt::{self, Display, Write as _};
use std::str::FromStr;
use std::sync::{Mutex, MutexGuard};

use crate::error::{Error, Result};

pub type TaskId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    ForwardNode,
    BackwardNode,
    OptimizerStep,
    Flush,
}

impl TaskKind {
    fn as_str(self) -> &'static str {
        match self {
            TaskKind::ForwardNode => "forward-node",
            TaskKind::BackwardNode => "backward-node",
            TaskKind::OptimizerStep => "optimizer-step",
            TaskKind::Flush => "flush",
        }
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "forward-node" => TaskKind::ForwardNode,
            "backward-node" => TaskKind::BackwardNode,
            "optimizer-step" => TaskKind::OptimizerStep,
            "flush" => TaskKind::Flush,
            other => return Err(format!("unknown task kind `{other}`")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RegionClass {
    Parameter,
    Gradient,
    History,
    Activation,
}

impl RegionClass {
    pub const ALL: [RegionClass; 4] = [
        RegionClass::Parameter,
        RegionClass::Gradient,
        RegionClass::History,
        RegionClass::Activation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RegionClass::Parameter => "parameter",
            RegionClass::Gradient => "gradient",
            RegionClass::History => "history",
            RegionClass::Activation => "activation",
        }
    }
}

impl Display for RegionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RegionClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "parameter" => RegionClass::Parameter,
            "gradient" => RegionClass::Gradient,
            "history" => RegionClass::History,
            "activation" => RegionClass::Activation,
            other => return Err(format!("unknown region class `{other}`")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Access {
    Read,
    Write,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskRecord {
    pub seq: TaskId,
    pub kind: TaskKind,
    pub target: usize,
    pub deps: Vec<TaskId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemTransaction {
    pub class: RegionClass,
    pub owner: usize,
    pub access: Access,
    /// Task that issued the access; `None` for accesses outside any task
    /// (e.g. `zero_grads`) and for traces parsed from text.
    pub task: Option<TaskId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceEvent {
    Task(TaskRecord),
    Mem(MemTransaction),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScheduleTrace {
    events: Vec<TraceEvent>,
    task_count: usize,
}

impl ScheduleTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_task(&mut self, kind: TaskKind, target: usize, deps: Vec<TaskId>) -> TaskId {
        let seq = self.task_count;
        self.task_count += 1;
        self.events.push(TraceEvent::Task(TaskRecord { seq, kind, target, deps }));
        seq
    }

    pub fn push_mem(&mut self, task: Option<TaskId>, class: RegionClass, owner: usize, access: Access) {
        self.events.push(TraceEvent::Mem(MemTransaction { class, owner, access, task }));
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn task_count(&self) -> usize {
        self.task_count
    }

    pub fn tasks(&self) -> impl Iterator<Item = &TaskRecord> + '_ {
        self.events.iter().filter_map(|e| match e {
            TraceEvent::Task(t) => Some(t),
            TraceEvent::Mem(_) => None,
        })
    }

    pub fn transactions(&self) -> impl Iterator<Item = &MemTransaction> + '_ {
        self.events.iter().filter_map(|e| match e {
            TraceEvent::Mem(m) => Some(m),
            TraceEvent::Task(_) => None,
        })
    }

    pub fn task(&self, seq: TaskId) -> Option<&TaskRecord> {
        self.tasks().nth(seq)
    }

    /// Appends `other`, renumbering its task ids so the result is one
    /// consistent trace (used to replay several iterations back to back).
    pub fn append(&mut self, other: &ScheduleTrace) {
        let offset = self.task_count;
        for event in &other.events {
            match event {
                TraceEvent::Task(t) => {
                    self.events.push(TraceEvent::Task(TaskRecord {
                        seq: t.seq + offset,
                        kind: t.kind,
                        target: t.target,
                        deps: t.deps.iter().map(|d| d + offset).collect(),
                    }));
                }
                TraceEvent::Mem(m) => {
                    self.events.push(TraceEvent::Mem(MemTransaction {
                        task: m.task.map(|t| t + offset),
                        ..*m
                    }));
                }
            }
        }
        self.task_count += other.task_count;
    }

    pub fn concat<'a>(traces: impl IntoIterator<Item = &'a ScheduleTrace>) -> ScheduleTrace {
        let mut out = ScheduleTrace::new();
        for t in traces {
            out.append(t);
        }
        out
    }

    /// Checks that every dependency names an earlier task.
    pub fn check_dependency_order(&self) -> Result<()> {
        for (pos, task) in self.tasks().enumerate() {
            if task.seq != pos {
                return Err(Error::State(format!("task at position {pos} has sequence number {}", task.seq)));
            }
            if let Some(bad) = task.deps.iter().find(|&&d| d >= task.seq) {
                return Err(Error::State(format!(
                    "task {} ({} {}) depends on task {bad}, which does not precede it",
                    task.seq,
                    task.kind.as_str(),
                    task.target
                )));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for event in &self.events {
            match event {
                TraceEvent::Task(t) => {
                    let deps = t.deps.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",");
                    let _ = writeln!(out, "task {} {} deps={deps}", t.kind.as_str(), t.target);
                }
                TraceEvent::Mem(m) => {
                    let rw = match m.access {
                        Access::Read => 'R',
                        Access::Write => 'W',
                    };
                    let _ = writeln!(out, "mem {} {} {rw}", m.class, m.owner);
                }
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut trace = ScheduleTrace::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let err = |msg: String| Error::Parse { line, msg };
            let fields: Vec<&str> = raw.split_whitespace().collect();
            match fields.as_slice() {
                [] => continue,
                ["task", kind, id, deps] => {
                    let kind = kind.parse::<TaskKind>().map_err(err)?;
                    let target = id.parse::<usize>().map_err(|e| err(format!("bad task id: {e}")))?;
                    let list = deps
                        .strip_prefix("deps=")
                        .ok_or_else(|| err(format!("expected deps=..., got `{deps}`")))?;
                    let deps = if list.is_empty() {
                        Vec::new()
                    } else {
                        list.split(',')
                            .map(|d| d.parse::<usize>())
                            .collect::<Result<Vec<_>, _>>()
                            .map_err(|e| err(format!("bad dependency list: {e}")))?
                    };
                    trace.push_task(kind, target, deps);
                }
                ["mem", class, id, rw] => {
                    let class = class.parse::<RegionClass>().map_err(err)?;
                    let owner = id.parse::<usize>().map_err(|e| err(format!("bad region id: {e}")))?;
                    let access = match *rw {
                        "R" => Access::Read,
                        "W" => Access::Write,
                        other => return Err(err(format!("access must be R or W, got `{other}`"))),
                    };
                    trace.push_mem(None, class, owner, access);
                }
                _ => return Err(err(format!("unrecognized record `{raw}`"))),
            }
        }
        Ok(trace)
    }
}

/// Serialized append channel for trace records; shared by concurrent tasks.
#[derive(Debug, Default)]
pub struct Recorder {
    inner: Mutex<ScheduleTrace>,
}

impl Recorder {
    pub fn new() -> Self {
        Self::default()
    }

    fn lock(&self) -> MutexGuard<'_, ScheduleTrace> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn task(&self, kind: TaskKind, target: usize, deps: Vec<TaskId>) -> TaskId {
        self.lock().push_task(kind, target, deps)
    }

    pub fn mem(&self, task: Option<TaskId>, class: RegionClass, owner: usize, access: Access) {
        self.lock().push_mem(task, class, owner, access);
    }

    pub fn last_task(&self) -> Option<TaskId> {
        self.lock().task_count().checked_sub(1)
    }

    pub fn take(&self) -> ScheduleTrace {
        std::mem::take(&mut *self.lock())
    }

    pub fn snapshot(&self) -> ScheduleTrace {
        self.lock().clone()
    }
}

impl Display for ScheduleTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}
