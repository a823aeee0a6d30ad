//! Independent recomputation of residuals for a claimed solution.
//!
//! Nothing here reuses the solver's internal matrices: every quantity is
//! rebuilt from the sparse problem data, summing in reverse variable order.

use nalgebra::DMatrix;

use crate::linalg;
use crate::problem::{SdpProblem, Sense};
use crate::solver::{Certificate, SdpSolution, SolveStatus};

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualReport {
    /// `max_i |E_i·y - f_i|`.
    pub equality_residual: f64,
    /// Smallest eigenvalue over blocks of `C + Σ y_k A_k`, relative to `1 + ‖C‖`.
    pub primal_min_eigenvalue: f64,
    /// Smallest eigenvalue over the dual blocks `X`.
    pub dual_min_eigenvalue: f64,
    /// `max_k |c_k - tr(A_k X) - (Eᵀλ)_k| / (1 + ‖c‖∞)` in minimization form.
    pub dual_residual: f64,
    /// `|primal - dual| / (1 + |primal| + |dual|)`.
    pub gap: f64,
    /// For infeasible solutions: how far the certificate is from exact.
    pub certificate_residual: Option<f64>,
}

impl ResidualReport {
    /// Largest violation among the residuals relevant to the solution's status.
    pub fn max_violation(&self) -> f64 {
        if let Some(c) = self.certificate_residual {
            return c;
        }
        self.equality_residual
            .max((-self.primal_min_eigenvalue).max(0.0))
            .max((-self.dual_min_eigenvalue).max(0.0))
            .max(self.dual_residual)
            .max(self.gap)
    }
}

fn trace_with(problem: &SdpProblem, var: usize, blocks: &[DMatrix<f64>]) -> f64 {
    let mut t = 0.0;
    for e in problem.coefficient_entries(var).iter().rev() {
        let m = &blocks[e.block];
        if e.row == e.col {
            t += e.value * m[(e.row, e.col)];
        } else {
            t += e.value * (m[(e.row, e.col)] + m[(e.col, e.row)]);
        }
    }
    t
}

fn constant_trace(problem: &SdpProblem, blocks: &[DMatrix<f64>]) -> f64 {
    let mut t = 0.0;
    for e in problem.constant_entries().iter().rev() {
        let m = &blocks[e.block];
        if e.row == e.col {
            t += e.value * m[(e.row, e.col)];
        } else {
            t += e.value * (m[(e.row, e.col)] + m[(e.col, e.row)]);
        }
    }
    t
}

fn slack_blocks(problem: &SdpProblem, y: &[f64]) -> Vec<DMatrix<f64>> {
    let mut blocks: Vec<DMatrix<f64>> = problem
        .block_dims()
        .iter()
        .map(|&d| DMatrix::zeros(d, d))
        .collect();
    for var in (0..problem.num_vars()).rev() {
        for e in problem.coefficient_entries(var) {
            let m = &mut blocks[e.block];
            m[(e.row, e.col)] += y[var] * e.value;
            if e.row != e.col {
                m[(e.col, e.row)] += y[var] * e.value;
            }
        }
    }
    for e in problem.constant_entries() {
        let m = &mut blocks[e.block];
        m[(e.row, e.col)] += e.value;
        if e.row != e.col {
            m[(e.col, e.row)] += e.value;
        }
    }
    blocks
}

fn equality_adjoint(problem: &SdpProblem, lambda: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; problem.num_vars()];
    for (i, eq) in problem.equalities().iter().enumerate().rev() {
        let l = lambda.get(i).copied().unwrap_or(0.0);
        for &(v, c) in &eq.terms {
            out[v] += c * l;
        }
    }
    out
}

/// Recomputes feasibility, optimality and certificate residuals from scratch.
pub fn verify(problem: &SdpProblem, solution: &SdpSolution) -> ResidualReport {
    let sign = match problem.sense() {
        Sense::Minimize => 1.0,
        Sense::Maximize => -1.0,
    };
    let y = &solution.y;
    let mut equality_residual: f64 = 0.0;
    for eq in problem.equalities().iter().rev() {
        let lhs: f64 = eq.terms.iter().rev().map(|&(v, c)| c * y[v]).sum();
        equality_residual = equality_residual.max((lhs - eq.rhs).abs());
    }
    let norm_c = problem
        .constant_entries()
        .iter()
        .map(|e| e.value * e.value * if e.row == e.col { 1.0 } else { 2.0 })
        .sum::<f64>()
        .sqrt();
    let slack = slack_blocks(problem, y);
    let primal_min_eigenvalue = slack
        .iter()
        .map(linalg::min_eigenvalue)
        .fold(f64::INFINITY, f64::min)
        / (1.0 + norm_c);

    let certificate_residual = match (&solution.status, &solution.certificate) {
        (
            SolveStatus::Infeasible,
            Certificate::Farkas {
                blocks,
                equality_multipliers,
            },
        ) => {
            let adj = equality_adjoint(problem, equality_multipliers);
            let mut worst: f64 = 0.0;
            for k in (0..problem.num_vars()).rev() {
                worst = worst.max((trace_with(problem, k, blocks) + adj[k]).abs());
            }
            let f_dot: f64 = problem
                .equalities()
                .iter()
                .zip(equality_multipliers)
                .map(|(eq, l)| eq.rhs * l)
                .sum();
            let normalization = (constant_trace(problem, blocks) - f_dot + 1.0).abs();
            let psd = blocks
                .iter()
                .map(linalg::min_eigenvalue)
                .fold(f64::INFINITY, f64::min);
            Some(worst.max(normalization).max((-psd).max(0.0)))
        }
        (SolveStatus::Infeasible, Certificate::EqualityConflict { .. }) => {
            // Valid when the equalities have no exact solution at all: the
            // least-squares residual of E y = f stays bounded away from zero.
            let eqs = problem.equalities();
            let mut e = DMatrix::zeros(eqs.len(), problem.num_vars());
            let mut f = nalgebra::DVector::zeros(eqs.len());
            for (i, eq) in eqs.iter().enumerate() {
                for &(v, c) in &eq.terms {
                    e[(i, v)] += c;
                }
                f[i] = eq.rhs;
            }
            let svd = e.clone().svd(true, true);
            let best = svd
                .solve(&f, 1e-10)
                .unwrap_or_else(|_| nalgebra::DVector::zeros(problem.num_vars()));
            let ls_residual = (&e * best - f).amax();
            Some(if ls_residual > 1e-9 { 0.0 } else { 1.0 })
        }
        (SolveStatus::Unbounded, Certificate::Ray { direction }) => {
            let mut dir_blocks: Vec<DMatrix<f64>> = problem
                .block_dims()
                .iter()
                .map(|&d| DMatrix::zeros(d, d))
                .collect();
            for var in (0..problem.num_vars()).rev() {
                for e in problem.coefficient_entries(var) {
                    let m = &mut dir_blocks[e.block];
                    m[(e.row, e.col)] += direction[var] * e.value;
                    if e.row != e.col {
                        m[(e.col, e.row)] += direction[var] * e.value;
                    }
                }
            }
            let psd = dir_blocks
                .iter()
                .map(linalg::min_eigenvalue)
                .fold(f64::INFINITY, f64::min);
            let mut eq_res: f64 = 0.0;
            for eq in problem.equalities() {
                let lhs: f64 = eq.terms.iter().map(|&(v, c)| c * direction[v]).sum();
                eq_res = eq_res.max(lhs.abs());
            }
            let improvement: f64 = sign
                * problem
                    .objective()
                    .iter()
                    .zip(direction)
                    .map(|(c, d)| c * d)
                    .sum::<f64>();
            let improving = if improvement < 0.0 { 0.0 } else { 1.0 };
            Some((-psd).max(0.0).max(eq_res).max(improving))
        }
        _ => None,
    };

    let x = &solution.dual_blocks;
    let dual_min_eigenvalue = x
        .iter()
        .map(linalg::min_eigenvalue)
        .fold(f64::INFINITY, f64::min);
    let adj = equality_adjoint(problem, &solution.equality_multipliers);
    let obj = problem.objective();
    let cmax = obj.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    let mut dual_residual: f64 = 0.0;
    for k in (0..problem.num_vars()).rev() {
        let r = sign * obj[k] - trace_with(problem, k, x) - adj[k];
        dual_residual = dual_residual.max(r.abs());
    }
    dual_residual /= 1.0 + cmax;

    let primal = problem.objective_value(y);
    let f_dot: f64 = problem
        .equalities()
        .iter()
        .zip(&solution.equality_multipliers)
        .map(|(eq, l)| eq.rhs * l)
        .sum();
    let dual_min_form = -constant_trace(problem, x) + f_dot + sign * problem.offset();
    let dual = sign * dual_min_form;
    let gap = (primal - dual).abs() / (1.0 + primal.abs() + dual.abs());

    ResidualReport {
        equality_residual,
        primal_min_eigenvalue,
        dual_min_eigenvalue,
        dual_residual,
        gap,
        certificate_residual,
    }
}

/// Rigorous bound on the optimum from an approximate dual solution.
///
/// Given a priori bounds `|y_k| ≤ var_bound` and `tr(C_b + Σ y_k A_{k,b}) ≤
/// trace_bounds[b]` over the feasible set, every feasible `y` satisfies
/// `c·y ≥ -tr(C X) + f·λ - var_bound·Σ|r_k| + Σ_b min(0, λ_min(X_b))·trace_bounds[b]`
/// where `r = c - A*(X) - Eᵀλ`. The dual blocks are first moved by the
/// least-norm correction `Σ μ_k A_k` that cancels `r`, which trades the
/// residual term for a small eigenvalue shift. For maximization the same
/// argument gives an upper bound. Returns `None` for non-finite input.
pub fn certified_bound(
    problem: &SdpProblem,
    solution: &SdpSolution,
    var_bound: f64,
    trace_bounds: &[f64],
) -> Option<f64> {
    let sign = match problem.sense() {
        Sense::Minimize => 1.0,
        Sense::Maximize => -1.0,
    };
    if solution.dual_blocks.len() != problem.block_dims().len()
        || trace_bounds.len() != solution.dual_blocks.len()
    {
        return None;
    }
    let adj = equality_adjoint(problem, &solution.equality_multipliers);
    let residual = |x: &[DMatrix<f64>]| -> Vec<f64> {
        (0..problem.num_vars())
            .map(|k| sign * problem.objective()[k] - trace_with(problem, k, x) - adj[k])
            .collect()
    };
    let evaluate = |x: &[DMatrix<f64>]| -> f64 {
        let r = residual(x);
        let mut value = -constant_trace(problem, x)
            - var_bound * r.iter().rev().map(|v| v.abs()).sum::<f64>();
        for (i, eq) in problem.equalities().iter().enumerate() {
            value += eq.rhs * solution.equality_multipliers.get(i).copied().unwrap_or(0.0);
        }
        for (b, xb) in x.iter().enumerate() {
            value += linalg::min_eigenvalue(xb).min(0.0) * trace_bounds[b];
        }
        value
    };
    let x = &solution.dual_blocks;
    let mut value = evaluate(x);
    if let Some(polished) = polish(problem, x, &residual(x)) {
        let v = evaluate(&polished);
        if v > value {
            value = v;
        }
    }
    let bound = sign * (value + sign * problem.offset());
    bound.is_finite().then_some(bound)
}

/// `X + Σ μ_k A_k` with `(A*A) μ = r`.
fn polish(problem: &SdpProblem, x: &[DMatrix<f64>], r: &[f64]) -> Option<Vec<DMatrix<f64>>> {
    use std::collections::HashMap;
    let n = problem.num_vars();
    let mut at: HashMap<(usize, usize, usize), Vec<(usize, f64)>> = HashMap::new();
    for k in 0..n {
        for e in problem.coefficient_entries(k) {
            at.entry((e.block, e.row, e.col)).or_default().push((k, e.value));
        }
    }
    let mut keys: Vec<_> = at.keys().copied().collect();
    keys.sort_unstable();
    let mut gram = DMatrix::<f64>::zeros(n, n);
    for key in &keys {
        let w = if key.1 == key.2 { 1.0 } else { 2.0 };
        let list = &at[key];
        for &(j, vj) in list {
            for &(k, vk) in list {
                gram[(j, k)] += w * vj * vk;
            }
        }
    }
    let scale = (0..n).map(|i| gram[(i, i)]).fold(0.0f64, f64::max).max(1e-300);
    for i in 0..n {
        gram[(i, i)] += 1e-14 * scale;
    }
    let mu = gram.cholesky()?.solve(&nalgebra::DVector::from_column_slice(r));
    let mut out = x.to_vec();
    for k in 0..n {
        for e in problem.coefficient_entries(k) {
            let m = &mut out[e.block];
            m[(e.row, e.col)] += mu[k] * e.value;
            if e.row != e.col {
                m[(e.col, e.row)] += mu[k] * e.value;
            }
        }
    }
    Some(out)
}
