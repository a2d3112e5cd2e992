//! Update policies: each maps a parameter's value, gradient and history to a
//! step, applied in place.
//!
//! Weight decay is coupled: the policy sees `grad + weight_decay * value`.
//! Momentum keeps the recursive buffer `v <- alpha * v + grad`, which equals
//! the geometric sum of all past gradients.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::{Graph, Parameter};
use crate::tensor::{self, Scalar, Tensor};
use crate::trace::{Access, Recorder, RegionClass, TaskId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OptimizerKind {
    Sgd,
    SgdMomentum,
    Newton,
    Adagrad,
    RmsProp,
    Adadelta,
    Adam,
}

impl OptimizerKind {
    /// The policies that update each parameter from its own state only.
    pub const LOCAL: [OptimizerKind; 6] = [
        OptimizerKind::Sgd,
        OptimizerKind::SgdMomentum,
        OptimizerKind::Adagrad,
        OptimizerKind::RmsProp,
        OptimizerKind::Adadelta,
        OptimizerKind::Adam,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::SgdMomentum => "sgd-momentum",
            OptimizerKind::Newton => "newton",
            OptimizerKind::Adagrad => "adagrad",
            OptimizerKind::RmsProp => "rmsprop",
            OptimizerKind::Adadelta => "adadelta",
            OptimizerKind::Adam => "adam",
        }
    }

    pub fn history_slots(self) -> &'static [&'static str] {
        match self {
            OptimizerKind::Sgd | OptimizerKind::Newton => &[],
            OptimizerKind::SgdMomentum => &["momentum"],
            OptimizerKind::Adagrad => &["sum_sq"],
            OptimizerKind::RmsProp => &["square_avg"],
            OptimizerKind::Adadelta => &["square_avg", "acc_delta"],
            OptimizerKind::Adam => &["exp_avg", "exp_avg_sq"],
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "sgd" => OptimizerKind::Sgd,
            "sgd-momentum" | "momentum" => OptimizerKind::SgdMomentum,
            "newton" => OptimizerKind::Newton,
            "adagrad" => OptimizerKind::Adagrad,
            "rmsprop" => OptimizerKind::RmsProp,
            "adadelta" => OptimizerKind::Adadelta,
            "adam" => OptimizerKind::Adam,
            other => {
                return Err(Error::Config(format!(
                    "unknown optimizer `{other}` (sgd, sgd-momentum, newton, adagrad, rmsprop, adadelta, adam)"
                )))
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerPolicy {
    pub kind: OptimizerKind,
    /// Step size.
    pub eta: f64,
    /// Momentum decay.
    pub alpha: f64,
    pub weight_decay: f64,
    pub epsilon: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub rho: f64,
}

impl OptimizerPolicy {
    /// Policy with the customary default step size for `kind`.
    pub fn new(kind: OptimizerKind) -> Self {
        let eta = match kind {
            OptimizerKind::Sgd | OptimizerKind::SgdMomentum | OptimizerKind::Adagrad => 0.01,
            OptimizerKind::RmsProp | OptimizerKind::Adam => 0.001,
            OptimizerKind::Adadelta | OptimizerKind::Newton => 1.0,
        };
        OptimizerPolicy {
            kind,
            eta,
            alpha: 0.9,
            weight_decay: 0.0,
            epsilon: 1e-8,
            beta1: 0.9,
            beta2: 0.999,
            rho: 0.9,
        }
    }

    pub fn with_eta(mut self, eta: f64) -> Self {
        self.eta = eta;
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    /// Newton's method needs the full Hessian; every other policy is local.
    pub fn requires_global_info(&self) -> bool {
        self.kind == OptimizerKind::Newton
    }

    pub fn has_history(&self) -> bool {
        !self.kind.history_slots().is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("step size must be positive, got {}", self.eta)));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("momentum decay must lie in [0, 1), got {}", self.alpha)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight decay must be >= 0, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// Applies one step of `policy` to `param` in place, updates its history,
/// and resets its gradient to zero.
pub fn policy_step<T: Scalar>(
    policy: &OptimizerPolicy,
    param: &mut Parameter<T>,
    rec: &Recorder,
    task: Option<TaskId>,
) -> Result<()> {
    if param.count() > 0 {
        return Err(Error::Scheduling(format!(
            "parameter {} still expects {} gradient contribution(s)",
            param.id(),
            param.count()
        )));
    }
    if policy.requires_global_info() {
        return Err(Error::Config("newton is not a per-parameter policy".into()));
    }
    let id = param.id();
    let t = param.steps() + 1;
    let (value, grad, history) = param.parts_mut();
    rec.mem(task, RegionClass::Parameter, id, Access::Read);
    rec.mem(task, RegionClass::Gradient, id, Access::Read);

    let c = T::from_f64;
    let lambda = c(policy.weight_decay);
    let g: Vec<T> = if policy.weight_decay > 0.0 {
        grad.data().iter().zip(value.data()).map(|(&g, &v)| g + lambda * v).collect()
    } else {
        grad.data().to_vec()
    };

    let slots = policy.kind.history_slots();
    if !slots.is_empty() {
        rec.mem(task, RegionClass::History, id, Access::Read);
        for slot in slots {
            if !history.contains_key(slot) {
                history.insert(slot, Tensor::zeros(value.shape())?);
            }
        }
    }

    let (eta, eps) = (c(policy.eta), c(policy.epsilon));
    let one = T::one();
    // per-element update direction; the value moves by -eta * step
    let step: Vec<T> = match policy.kind {
        OptimizerKind::Sgd => g,
        OptimizerKind::SgdMomentum => {
            let alpha = c(policy.alpha);
            let v = history.get_mut("momentum").expect("slot").data_mut();
            for (v, &g) in v.iter_mut().zip(&g) {
                *v = alpha * *v + g;
            }
            v.to_vec()
        }
        OptimizerKind::Adagrad => {
            let s = history.get_mut("sum_sq").expect("slot").data_mut();
            s.iter_mut()
                .zip(&g)
                .map(|(s, &g)| {
                    *s = *s + g * g;
                    g / (s.sqrt() + eps)
                })
                .collect()
        }
        OptimizerKind::RmsProp => {
            let rho = c(policy.rho);
            let s = history.get_mut("square_avg").expect("slot").data_mut();
            s.iter_mut()
                .zip(&g)
                .map(|(s, &g)| {
                    *s = rho * *s + (one - rho) * g * g;
                    g / (s.sqrt() + eps)
                })
                .collect()
        }
        OptimizerKind::Adadelta => {
            let rho = c(policy.rho);
            let mut sq = history.remove("square_avg").expect("slot");
            let acc = history.get_mut("acc_delta").expect("slot").data_mut();
            let out = sq
                .data_mut()
                .iter_mut()
                .zip(acc.iter_mut())
                .zip(&g)
                .map(|((s, a), &g)| {
                    *s = rho * *s + (one - rho) * g * g;
                    let d = (*a + eps).sqrt() / (*s + eps).sqrt() * g;
                    *a = rho * *a + (one - rho) * d * d;
                    d
                })
                .collect();
            history.insert("square_avg", sq);
            out
        }
        OptimizerKind::Adam => {
            let (b1, b2) = (c(policy.beta1), c(policy.beta2));
            let bias1 = one - b1.powi(t as i32);
            let bias2 = one - b2.powi(t as i32);
            let mut m = history.remove("exp_avg").expect("slot");
            let v = history.get_mut("exp_avg_sq").expect("slot").data_mut();
            let out = m
                .data_mut()
                .iter_mut()
                .zip(v.iter_mut())
                .zip(&g)
                .map(|((m, v), &g)| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let m_hat = *m / bias1;
                    let v_hat = *v / bias2;
                    m_hat / (v_hat.sqrt() + eps)
                })
                .collect();
            history.insert("exp_avg", m);
            out
        }
        OptimizerKind::Newton => unreachable!("rejected above"),
    };
    if !slots.is_empty() {
        rec.mem(task, RegionClass::History, id, Access::Write);
    }

    grad.fill_zero();
    rec.mem(task, RegionClass::Gradient, id, Access::Write);
    let step = Tensor::from_vec(value.shape(), step)?;
    tensor::axpy_inplace(value, -eta, &step)?;
    rec.mem(task, RegionClass::Parameter, id, Access::Write);
    param.finish_step();
    Ok(())
}

/// One damped Newton step `theta - eta * H^-1 grad` for small problems.
pub fn policy_newton<T: Scalar>(
    policy: &OptimizerPolicy,
    theta: &Tensor<T>,
    grad_fn: impl Fn(&Tensor<T>) -> Tensor<T>,
    hessian_fn: impl Fn(&Tensor<T>) -> Tensor<T>,
) -> Result<Tensor<T>> {
    let d = theta.len();
    if theta.shape().len() != 1 || d > 16 {
        return Err(Error::Config(format!("newton expects a vector of at most 16 entries, got {:?}", theta.shape())));
    }
    let grad = grad_fn(theta);
    let hess = hessian_fn(theta);
    if grad.len() != d || hess.shape() != [d, d] {
        return Err(Error::shape(format!(
            "newton: gradient {:?} / hessian {:?} do not match {d} parameters",
            grad.shape(),
            hess.shape()
        )));
    }
    let dir = solve(hess.data().to_vec(), grad.data().to_vec(), d)?;
    let mut out = theta.clone();
    tensor::axpy_inplace(&mut out, -T::from_f64(policy.eta), &Tensor::from_vec(&[d], dir)?)?;
    Ok(out)
}

/// Gaussian elimination with partial pivoting on a dense `d x d` system.
fn solve<T: Scalar>(mut a: Vec<T>, mut b: Vec<T>, d: usize) -> Result<Vec<T>> {
    let scale = a.iter().fold(T::zero(), |m, v| m.max(v.abs()));
    let tol = scale * T::epsilon() * T::from_f64(d as f64);
    for col in 0..d {
        let pivot = (col..d)
            .max_by(|&i, &j| a[i * d + col].abs().partial_cmp(&a[j * d + col].abs()).expect("finite"))
            .expect("non-empty range");
        if a[pivot * d + col].abs() <= tol {
            return Err(Error::Numeric(format!("singular hessian (pivot {col})")));
        }
        if pivot != col {
            for k in 0..d {
                a.swap(col * d + k, pivot * d + k);
            }
            b.swap(col, pivot);
        }
        for row in col + 1..d {
            let f = a[row * d + col] / a[col * d + col];
            for k in col..d {
                a[row * d + k] = a[row * d + k] - f * a[col * d + k];
            }
            b[row] = b[row] - f * b[col];
        }
    }
    let mut x = vec![T::zero(); d];
    for row in (0..d).rev() {
        let tail = (row + 1..d).fold(T::zero(), |acc, k| acc + a[row * d + k] * x[k]);
        x[row] = (b[row] - tail) / a[row * d + row];
    }
    Ok(x)
}

/// Rescales every gradient so their joint L2 norm is at most `max_norm`.
/// Returns the factor applied (1 when no clipping was needed).
pub fn clip_by_global_norm<T: Scalar>(graph: &Graph<T>, max_norm: f64) -> T {
    let rec = graph.recorder();
    let mut total = T::zero();
    for p in 0..graph.param_count() {
        rec.mem(None, RegionClass::Gradient, p, Access::Read);
        total = total + graph.param(p).grad().sum_of_squares();
    }
    let norm = total.sqrt();
    let max_norm = T::from_f64(max_norm);
    if !(norm > max_norm) {
        return T::one();
    }
    let factor = max_norm / norm;
    for p in 0..graph.param_count() {
        let mut param = graph.param(p);
        param.grad_mut().data_mut().iter_mut().for_each(|g| *g = *g * factor);
        rec.mem(None, RegionClass::Gradient, p, Access::Write);
    }
    factor
}
