//! Independent oracles shared by the integration tests, and one check
//! function per acceptance criterion.
#![allow(dead_code)]

pub mod criteria;

use optfuse::{Graph, ModelSpec, OpKind, Scalar};

/// `(kind, parameter)` for every node, in execution order.
pub fn structure<T: Scalar>(graph: &Graph<T>) -> Vec<(OpKind, usize)> {
    let kind = match graph.spec() {
        ModelSpec::MulProbe { .. } => OpKind::Elementwise,
        _ => OpKind::Linear,
    };
    (0..graph.node_count()).map(|i| (kind, graph.node_params(i)[0])).collect()
}

/// Loss of the model written out with plain loops in f64, plus the smallest
/// |pre-activation| seen by any relu (distance to the nearest kink). Rows
/// whose input is entirely zero stay at zero under small perturbations and
/// are left out of the margin.
///
/// Linear layers compute `relu(x W)` with `W` stored row-major as
/// `[in, out]`; elementwise layers multiply each row by `theta`. The loss is
/// the sum of the last layer's output.
pub fn oracle_loss(layout: &[(OpKind, usize)], params: &[Vec<f64>], x: &[f64], width: usize) -> (f64, f64) {
    let rows = x.len() / width;
    let mut act = x.to_vec();
    let mut margin = f64::INFINITY;
    for &(kind, p) in layout {
        let w = &params[p];
        let mut next = vec![0.0; rows * width];
        for r in 0..rows {
            for j in 0..width {
                next[r * width + j] = match kind {
                    OpKind::Linear => {
                        let row = &act[r * width..(r + 1) * width];
                        let mut s = 0.0;
                        for i in 0..width {
                            s += row[i] * w[i * width + j];
                        }
                        if row.iter().any(|&v| v != 0.0) {
                            margin = margin.min(s.abs());
                        }
                        s.max(0.0)
                    }
                    OpKind::Elementwise => w[j] * act[r * width + j],
                };
            }
        }
        act = next;
    }
    (act.iter().sum(), margin)
}

/// Central-difference gradient of [`oracle_loss`] for every parameter entry.
pub fn fd_grad(layout: &[(OpKind, usize)], params: &[Vec<f64>], x: &[f64], width: usize, h: f64) -> Vec<Vec<f64>> {
    let mut work = params.to_vec();
    let mut out = Vec::new();
    for p in 0..params.len() {
        let mut g = vec![0.0; params[p].len()];
        for k in 0..params[p].len() {
            let orig = work[p][k];
            work[p][k] = orig + h;
            let up = oracle_loss(layout, &work, x, width).0;
            work[p][k] = orig - h;
            let down = oracle_loss(layout, &work, x, width).0;
            work[p][k] = orig;
            g[k] = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

pub fn to_f64<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|&x| Scalar::to_f64(x)).collect()
}

/// Scalar transcriptions of the update rules, one parameter entry at a time.
pub mod scalar {
    pub const EPS: f64 = 1e-8;

    #[derive(Debug, Clone, Copy)]
    pub enum Rule {
        Sgd,
        Momentum { alpha: f64 },
        Adagrad,
        RmsProp { rho: f64 },
        Adadelta { rho: f64 },
        Adam { b1: f64, b2: f64 },
    }

    /// Runs the rule over the gradient sequence `grads` (one per step) with
    /// coupled weight decay `wd` and step size `lr`, returning θ after each
    /// step.
    pub fn run(rule: Rule, theta0: f64, grads: &[f64], lr: f64, wd: f64) -> Vec<f64> {
        let mut theta = theta0;
        let (mut s1, mut s2) = (0.0f64, 0.0f64);
        let mut out = Vec::new();
        for (i, &g_raw) in grads.iter().enumerate() {
            let t = i as i32 + 1;
            let g = if wd > 0.0 { g_raw + wd * theta } else { g_raw };
            let step = match rule {
                Rule::Sgd => g,
                Rule::Momentum { alpha } => {
                    s1 = alpha * s1 + g;
                    s1
                }
                Rule::Adagrad => {
                    s1 = s1 + g * g;
                    g / (s1.sqrt() + EPS)
                }
                Rule::RmsProp { rho } => {
                    s1 = rho * s1 + (1.0 - rho) * g * g;
                    g / (s1.sqrt() + EPS)
                }
                Rule::Adadelta { rho } => {
                    // s1: running E[g^2], s2: running E[dx^2]
                    s1 = rho * s1 + (1.0 - rho) * g * g;
                    let dx = (s2 + EPS).sqrt() / (s1 + EPS).sqrt() * g;
                    s2 = rho * s2 + (1.0 - rho) * dx * dx;
                    dx
                }
                Rule::Adam { b1, b2 } => {
                    s1 = b1 * s1 + (1.0 - b1) * g;
                    s2 = b2 * s2 + (1.0 - b2) * g * g;
                    let m_hat = s1 / (1.0 - b1.powi(t));
                    let v_hat = s2 / (1.0 - b2.powi(t));
                    m_hat / (v_hat.sqrt() + EPS)
                }
            };
            theta = theta - lr * step;
            out.push(theta);
        }
        out
    }

    /// Momentum written as the explicit sum: θ(t) = θ(0) - lr Σ_k Σ_{j<=k} α^(k-j) g_j.
    pub fn momentum_sum_form(theta0: f64, grads: &[f64], lr: f64, alpha: f64) -> Vec<f64> {
        (1..=grads.len())
            .map(|t| {
                let mut theta = theta0;
                for k in 0..t {
                    let v: f64 = (0..=k).map(|j| alpha.powi((k - j) as i32) * grads[j]).sum();
                    theta -= lr * v;
                }
                theta
            })
            .collect()
    }
}
