//! L2-regularized logistic regression by full-batch gradient descent.
//!
//! Objective: mean negative log-likelihood + `l2 / 2 * |w|^2`, intercept
//! unpenalized. Steps use the Barzilai-Borwein length as the trial step and
//! backtrack until a nonmonotone Armijo condition holds: sufficient decrease
//! against the largest objective of the last few iterations (Raydan's global
//! BB method), which keeps most BB steps intact.

use serde::{Deserialize, Serialize};

use super::LearnError;

pub const GRAD_TOL: f64 = 1e-6;
pub const MAX_ITER: usize = 10_000;
const ARMIJO_C: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;
const NONMONOTONE_MEMORY: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub l2_strength: f64,
}

impl LogisticModel {
    pub fn linear(&self, x: &[f64]) -> f64 {
        self.intercept + dot(&self.coefficients, x)
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        sigmoid(self.linear(x))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub model: LogisticModel,
    pub iterations: usize,
    pub converged: bool,
    pub grad_inf_norm: f64,
    pub objective: f64,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-major design matrix restricted to the columns that vary.
struct Design<'a> {
    x: &'a [f64],
    d: usize,
    n: usize,
    y: &'a [bool],
}

impl Design<'_> {
    /// Objective and gradient in a single pass over the rows.
    fn objective_and_gradient(&self, params: &[f64], l2: f64, grad: &mut [f64]) -> f64 {
        let (w, b) = params.split_at(self.d);
        grad.iter_mut().for_each(|g| *g = 0.0);
        let (gw, gb) = grad.split_at_mut(self.d);
        let mut loss = 0.0;
        for i in 0..self.n {
            let row = &self.x[i * self.d..(i + 1) * self.d];
            let zi = b[0] + dot(w, row);
            let yi = if self.y[i] { 1.0 } else { 0.0 };
            loss += softplus(zi) - yi * zi;
            let r = sigmoid(zi) - yi;
            gb[0] += r;
            for (g, &xv) in gw.iter_mut().zip(row) {
                *g += r * xv;
            }
        }
        let inv_n = 1.0 / self.n as f64;
        gb[0] *= inv_n;
        for (g, &wk) in gw.iter_mut().zip(w) {
            *g = *g * inv_n + l2 * wk;
        }
        loss * inv_n + 0.5 * l2 * dot(w, w)
    }
}

/// Objective and gradient at `params = [w..., b]` for a row-major `x` with
/// `d` columns. The gradient's last entry is the intercept's.
pub fn objective_and_gradient(
    x: &[f64],
    d: usize,
    y: &[bool],
    l2: f64,
    params: &[f64],
) -> (f64, Vec<f64>) {
    let design = Design {
        x,
        d,
        n: y.len(),
        y,
    };
    let mut g = vec![0.0; d + 1];
    let f = design.objective_and_gradient(params, l2, &mut g);
    (f, g)
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Fits on a row-major `x` (`y.len()` rows by `d` columns). Columns that are
/// identically zero keep a zero coefficient and are skipped. `warm` seeds the
/// optimizer.
pub fn train_logistic(
    x: &[f64],
    d: usize,
    y: &[bool],
    l2: f64,
    warm: Option<&LogisticModel>,
) -> Result<LogisticFit, LearnError> {
    let n = y.len();
    if n == 0 || x.len() != n * d {
        return Err(LearnError::InvalidInput(format!(
            "{} values for {n} rows of {d} columns",
            x.len()
        )));
    }
    if !(l2 >= 0.0 && l2.is_finite()) {
        return Err(LearnError::InvalidInput(format!("l2 strength {l2}")));
    }
    let active: Vec<usize> = (0..d)
        .filter(|&j| (0..n).any(|i| x[i * d + j] != 0.0))
        .collect();
    let da = active.len();
    let packed: Vec<f64> = if da == d {
        x.to_vec()
    } else {
        let mut p = Vec::with_capacity(n * da);
        for i in 0..n {
            p.extend(active.iter().map(|&j| x[i * d + j]));
        }
        p
    };
    let design = Design {
        x: &packed,
        d: da,
        n,
        y,
    };

    let mut theta = vec![0.0; da + 1];
    if let Some(w) = warm {
        for (k, &j) in active.iter().enumerate() {
            theta[k] = w.coefficients.get(j).copied().unwrap_or(0.0);
        }
        theta[da] = w.intercept;
    }
    let mut g = vec![0.0; da + 1];
    let mut f = design.objective_and_gradient(&theta, l2, &mut g);
    if !f.is_finite() {
        return Err(LearnError::Divergence(0));
    }
    let mut trial = vec![0.0; da + 1];
    let mut g_new = vec![0.0; da + 1];
    let mut step = 1.0;
    let mut iterations = 0;
    let mut evaluations = 1;
    let mut converged = inf_norm(&g) < GRAD_TOL;
    let mut recent = std::collections::VecDeque::with_capacity(NONMONOTONE_MEMORY);
    recent.push_back(f);
    while !converged && iterations < MAX_ITER {
        iterations += 1;
        let gg = dot(&g, &g);
        let reference = recent.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut alpha = step;
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            for k in 0..=da {
                trial[k] = theta[k] - alpha * g[k];
            }
            let f_trial = design.objective_and_gradient(&trial, l2, &mut g_new);
            evaluations += 1;
            if f_trial.is_finite() && f_trial <= reference - ARMIJO_C * alpha * gg {
                f = f_trial;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            if !f.is_finite() {
                return Err(LearnError::Divergence(iterations));
            }
            // no descent possible at machine precision
            break;
        }
        if recent.len() == NONMONOTONE_MEMORY {
            recent.pop_front();
        }
        recent.push_back(f);
        // Barzilai-Borwein trial step for the next iteration
        let mut ss = 0.0;
        let mut sy = 0.0;
        for k in 0..=da {
            let s = trial[k] - theta[k];
            ss += s * s;
            sy += s * (g_new[k] - g[k]);
        }
        step = if sy > 0.0 {
            (ss / sy).clamp(1e-10, 1e10)
        } else {
            alpha * 2.0
        };
        std::mem::swap(&mut theta, &mut trial);
        std::mem::swap(&mut g, &mut g_new);
        converged = inf_norm(&g) < GRAD_TOL;
    }
    if !f.is_finite() || theta.iter().any(|v| !v.is_finite()) {
        return Err(LearnError::Divergence(iterations));
    }
    log::debug!(
        "logistic l2={l2}, {da} columns: {iterations} iterations, {evaluations} evaluations, |g|={:.2e}",
        inf_norm(&g)
    );
    let mut coefficients = vec![0.0; d];
    for (k, &j) in active.iter().enumerate() {
        coefficients[j] = theta[k];
    }
    Ok(LogisticFit {
        model: LogisticModel {
            coefficients,
            intercept: theta[da],
            l2_strength: l2,
        },
        iterations,
        converged,
        grad_inf_norm: inf_norm(&g),
        objective: f,
    })
}
