//! Lower bounds on `H(A|x*, E)` from Gauss–Radau quadrature and moment
//! relaxations, and the resulting key rates.
//!
//! For every interior node `t_i` one SDP minimizes
//! `Σ_a ⟨M̂_a (Z_a + Z_a* + (1 - t_i) Z_a* Z_a) + t_i Z_a Z_a*⟩` subject to the
//! observed behavior and `Z*Z, ZZ* ≤ α_i²`. Solving the nodes separately
//! relaxes the joint infimum, so the sum stays a valid lower bound.
//!
//! The Eve letters of the SDP stand for `Z/α_i`, so every moment is bounded
//! by one. Besides the solver's value, each result carries a bound rebuilt
//! from the dual solution that holds whatever the residuals are.

use std::f64::consts::LN_2;

use heraldkey_sdp::{certified_bound, solve, verify, SdpProblem, SdpSolution, Sense, SolveStatus, SolverOptions};
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::npa::{Letter, LinearForm, MomentMatrix, Polynomial, Scenario};
use crate::protocols::{apply_noisy_preprocessing, conditional_entropy_ab, BehaviorTable, KEY_X};

/// Bounds in `[-NEGATIVE_CLAMP, 0)` are reported as zero.
pub const NEGATIVE_CLAMP: f64 = 1e-6;

/// `m`-point Gauss–Radau rule on `[0, 1]` with the fixed node `t_m = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    /// Golub–Welsch on the Legendre Jacobi matrix with its last diagonal entry
    /// adjusted so that `x = 1` is an eigenvalue.
    pub fn gauss_radau(m: usize) -> Result<Self> {
        if m < 2 {
            return Err(domain(format!("Gauss–Radau needs m >= 2, got {m}")));
        }
        let beta = |k: usize| {
            let k = k as f64;
            k * k / (4.0 * k * k - 1.0)
        };
        // (J_{m-1} - I) δ = β_{m-1} e_{m-1}, tridiagonal with zero diagonal.
        let n = m - 1;
        let mut jm = DMatrix::<f64>::zeros(n, n);
        for k in 0..n {
            jm[(k, k)] = -1.0;
            if k + 1 < n {
                let b = beta(k + 1).sqrt();
                jm[(k, k + 1)] = b;
                jm[(k + 1, k)] = b;
            }
        }
        let mut rhs = nalgebra::DVector::zeros(n);
        rhs[n - 1] = beta(n);
        let delta = jm
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Numerical("singular Radau system".into()))?;
        let mut j = DMatrix::<f64>::zeros(m, m);
        for k in 0..m - 1 {
            let b = beta(k + 1).sqrt();
            j[(k, k + 1)] = b;
            j[(k + 1, k)] = b;
        }
        j[(m - 1, m - 1)] = 1.0 + delta[n - 1];
        let eig = SymmetricEigen::new(j);
        let mut pairs: Vec<(f64, f64)> = (0..m)
            .map(|k| {
                let v0 = eig.eigenvectors[(0, k)];
                ((eig.eigenvalues[k] + 1.0) / 2.0, v0 * v0)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut nodes: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let weights: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        nodes[m - 1] = 1.0;
        Ok(QuadratureRule { nodes, weights })
    }

    pub fn m(&self) -> usize {
        self.nodes.len()
    }

    /// Operator-norm bound `α_i = (3/2) max(1/t_i, 1/(1 - t_i))` for an interior node.
    pub fn alpha(&self, i: usize) -> f64 {
        let t = self.nodes[i];
        1.5 * (1.0 / t).max(1.0 / (1.0 - t))
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&t, &w)| w * f(t))
            .sum()
    }
}

fn check_noise(p_n: f64) -> Result<()> {
    if (0.0..=0.5).contains(&p_n) {
        Ok(())
    } else {
        Err(domain(format!(
            "noise probability {p_n} is outside [0, 1/2]"
        )))
    }
}

/// `c_m = 2p(1-p)/(m² ln 2) + Σ_{i<m} w_i/(t_i ln 2)`.
pub fn cm_constant(p_n: f64, rule: &QuadratureRule) -> Result<f64> {
    check_noise(p_n)?;
    let m = rule.m() as f64;
    let interior: f64 = (0..rule.m() - 1)
        .map(|i| rule.weights[i] / (rule.nodes[i] * LN_2))
        .sum();
    Ok(2.0 * p_n * (1.0 - p_n) / (m * m * LN_2) + interior)
}

/// `M̂_a = identity[a]·I + projector[a]·M_{0|x*}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoisyMix {
    pub identity: [f64; 2],
    pub projector: [f64; 2],
}

/// `M̂_a = (1 - p) M_{a|x*} + p M_{a⊕1|x*}` with `M_{1|x*} = I - M_{0|x*}`.
pub fn noisy_measurement_mix(p_n: f64) -> Result<NoisyMix> {
    check_noise(p_n)?;
    let s = 1.0 - 2.0 * p_n;
    Ok(NoisyMix {
        identity: [p_n, 1.0 - p_n],
        projector: [s, -s],
    })
}

/// Relaxation and solver settings for one entropy bound.
#[derive(Debug, Clone)]
pub struct EntropyConfig {
    /// Quadrature nodes.
    pub m: usize,
    /// Moment-matrix level; localizers use `level - 1`.
    pub level: usize,
    /// Each behavior equality is relaxed to `|⟨·⟩ - P| ≤ slack`; zero keeps
    /// exact equalities. A small slack gives extreme behaviors a strictly
    /// feasible moment matrix while keeping the result a valid lower bound.
    pub behavior_slack: f64,
    pub solver: SolverOptions,
}

/// Default relaxation of the behavior constraints.
pub const DEFAULT_BEHAVIOR_SLACK: f64 = 1e-9;

impl EntropyConfig {
    pub fn new(m: usize, level: usize) -> Self {
        EntropyConfig {
            m,
            level,
            behavior_slack: DEFAULT_BEHAVIOR_SLACK,
            solver: SolverOptions {
                tol: 1e-8,
                ..SolverOptions::default()
            },
        }
    }
}

impl Default for EntropyConfig {
    fn default() -> Self {
        EntropyConfig::new(8, 2)
    }
}

/// SDP for one interior node together with the moment matrix it came from.
#[derive(Debug, Clone)]
pub struct NodeProblem {
    pub node: usize,
    pub t: f64,
    pub weight: f64,
    pub alpha: f64,
    pub moments: MomentMatrix,
    /// Minimization over moment variables `1..`; variable `k` is moment `k + 1`.
    pub sdp: SdpProblem,
}

#[derive(Debug, Clone)]
pub struct EntropyProblem {
    pub behavior: BehaviorTable,
    pub p_n: f64,
    pub m: usize,
    pub level: usize,
    pub rule: QuadratureRule,
    pub cm: f64,
    pub nodes: Vec<NodeProblem>,
}

fn add_form(sdp: &mut SdpProblem, block: usize, row: usize, col: usize, form: &LinearForm) {
    for &(id, c) in form {
        if id == 0 {
            sdp.add_constant(block, row, col, c);
        } else {
            sdp.add_coefficient(id - 1, block, row, col, c);
        }
    }
}

/// Moves the identity component of `form` to the right-hand side.
fn add_equality(sdp: &mut SdpProblem, form: &LinearForm, value: f64) {
    let mut rhs = value;
    let mut terms = Vec::with_capacity(form.len());
    for &(id, c) in form {
        if id == 0 {
            rhs -= c;
        } else {
            terms.push((id - 1, c));
        }
    }
    sdp.add_equality(terms, rhs);
}

fn node_problem(
    behavior: &BehaviorTable,
    mix: &NoisyMix,
    rule: &QuadratureRule,
    node: usize,
    level: usize,
    slack: f64,
) -> Result<NodeProblem> {
    let tag = (node + 1) as u8;
    let scenario = Scenario {
        alice: 2,
        bob: 3,
        eve: vec![(0, tag), (1, tag)],
    };
    let key = KEY_X as u8;
    let mut extra = Vec::new();
    for a in 0..2 {
        extra.push(vec![Letter::A(key), Letter::Z(a, tag)]);
        extra.push(vec![Letter::A(key), Letter::ZStar(a, tag)]);
    }
    let basis = scenario.build_basis(level.max(1), &extra)?;
    let moments = MomentMatrix::new(&scenario, basis);
    let t = rule.nodes[node];
    let alpha = rule.alpha(node);
    let nvars = moments.num_variables() - 1;
    let mut sdp = SdpProblem::new(nvars, Sense::Minimize);

    let n = moments.dim();
    let main = sdp.add_block(n);
    for i in 0..n {
        for j in i..n {
            add_form(&mut sdp, main, i, j, &vec![(moments.entry(i, j), 1.0)]);
        }
    }
    for a in 0..2u8 {
        let (z, zs) = (Letter::Z(a, tag), Letter::ZStar(a, tag));
        for word in [vec![zs, z], vec![z, zs]] {
            let poly: Polynomial = vec![(1.0, vec![]), (-1.0, word)];
            let loc = moments.localizing(&poly, level.max(1) - 1)?;
            let blk = sdp.add_block(loc.dim());
            for i in 0..loc.dim() {
                for j in i..loc.dim() {
                    add_form(&mut sdp, blk, i, j, loc.entry(i, j));
                }
            }
        }
    }

    let a0 = Letter::A(key);
    let mut objective: Polynomial = Vec::new();
    for a in 0..2u8 {
        let (z, zs) = (Letter::Z(a, tag), Letter::ZStar(a, tag));
        let (ci, cp) = (mix.identity[a as usize], mix.projector[a as usize]);
        // Z = α Z' with ‖Z'‖ ≤ 1 keeps all moments of order one.
        let (s1, s2) = (alpha, alpha * alpha);
        objective.extend([
            (ci * s1, vec![z]),
            (ci * s1, vec![zs]),
            (ci * (1.0 - t) * s2, vec![zs, z]),
            (cp * s1, vec![a0, z]),
            (cp * s1, vec![a0, zs]),
            (cp * (1.0 - t) * s2, vec![a0, zs, z]),
            (t * s2, vec![z, zs]),
        ]);
    }
    for (id, c) in moments.expectation(&objective)? {
        if id == 0 {
            sdp.set_offset(c);
        } else {
            sdp.add_objective(id - 1, c);
        }
    }

    for x in 0..2u8 {
        for y in 0..3u8 {
            let ax = moments.lookup(&[Letter::A(x)])?;
            let by = moments.lookup(&[Letter::B(y)])?;
            let ab = moments.lookup(&[Letter::A(x), Letter::B(y)])?;
            let (xi, yi) = (x as usize, y as usize);
            let cells: [(usize, usize, LinearForm); 4] = [
                (0, 0, vec![(ab, 1.0)]),
                (0, 1, vec![(ax, 1.0), (ab, -1.0)]),
                (1, 0, vec![(by, 1.0), (ab, -1.0)]),
                (1, 1, vec![(0, 1.0), (ax, -1.0), (by, -1.0), (ab, 1.0)]),
            ];
            for (a, b, form) in cells {
                let value = behavior.get(a, b, xi, yi);
                if slack > 0.0 {
                    let neg: LinearForm = form.iter().map(|&(k, c)| (k, -c)).collect();
                    let upper = sdp.add_block(1);
                    add_form(&mut sdp, upper, 0, 0, &neg);
                    sdp.add_constant(upper, 0, 0, slack + value);
                    let lower = sdp.add_block(1);
                    add_form(&mut sdp, lower, 0, 0, &form);
                    sdp.add_constant(lower, 0, 0, slack - value);
                } else {
                    add_equality(&mut sdp, &form, value);
                }
            }
        }
    }
    Ok(NodeProblem {
        node,
        t,
        weight: rule.weights[node],
        alpha,
        moments,
        sdp,
    })
}

/// Builds one SDP per interior quadrature node.
pub fn assemble(
    behavior: &BehaviorTable,
    p_n: f64,
    config: &EntropyConfig,
) -> Result<EntropyProblem> {
    let (m, level, slack) = (config.m, config.level, config.behavior_slack);
    if level < 1 {
        return Err(domain("relaxation level must be at least 1"));
    }
    if !(slack >= 0.0 && slack < 1e-3) {
        return Err(domain(format!("behavior slack {slack} is outside [0, 1e-3)")));
    }
    let rule = QuadratureRule::gauss_radau(m)?;
    let mix = noisy_measurement_mix(p_n)?;
    let cm = cm_constant(p_n, &rule)?;
    let nodes = (0..m - 1)
        .map(|i| node_problem(behavior, &mix, &rule, i, level, slack))
        .collect::<Result<Vec<_>>>()?;
    Ok(EntropyProblem {
        behavior: *behavior,
        p_n,
        m,
        level,
        rule,
        cm,
        nodes,
    })
}

/// Solver outcome for one node.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeReport {
    pub t: f64,
    /// `min(primal, dual)` objective of the node SDP.
    pub infimum: f64,
    /// Lower bound on the node infimum that holds regardless of residuals.
    pub certified_infimum: f64,
    /// Objective at the returned moment vector, an upper estimate of the infimum.
    pub primal_objective: f64,
    pub dual_objective: f64,
    pub iterations: usize,
    /// Largest relative residual reported by the solver.
    pub solver_residual: f64,
    /// Largest violation from independent re-verification.
    pub verified_residual: f64,
    pub near_optimal: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntropyResult {
    /// Clamped lower bound on `H(A|x*, E)`.
    pub bound: f64,
    pub raw_bound: f64,
    /// Bound rebuilt from the dual solutions with every residual charged
    /// against it; never larger than `raw_bound` by more than rounding.
    pub certified_bound: f64,
    pub cm: f64,
    pub m: usize,
    pub level: usize,
    pub p_n: f64,
    pub nodes: Vec<NodeReport>,
}

impl EntropyResult {
    pub fn max_residual(&self) -> f64 {
        self.nodes
            .iter()
            .map(|n| n.solver_residual.max(n.verified_residual))
            .fold(0.0, f64::max)
    }
}

fn check_solution(sol: &SdpSolution) -> Result<()> {
    match sol.status {
        SolveStatus::Optimal | SolveStatus::NearOptimal => Ok(()),
        SolveStatus::Infeasible => Err(Error::Infeasible),
        other => Err(Error::Solver(format!(
            "status {other:?} after {} iterations (primal {:.2e}, dual {:.2e}, gap {:.2e})",
            sol.iterations, sol.primal_residual, sol.dual_residual, sol.gap
        ))),
    }
}

impl EntropyProblem {
    pub fn solve(&self, options: &SolverOptions) -> Result<EntropyResult> {
        let mut total = self.cm;
        let mut certified_total = self.cm;
        let mut reports = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let sol = solve(&node.sdp, options);
            check_solution(&sol)?;
            let report = verify(&node.sdp, &sol);
            // After rescaling every moment lies in [-1, 1] and every block's
            // diagonal is at most 1.
            let traces: Vec<f64> = node.sdp.block_dims().iter().map(|&d| d as f64).collect();
            let certified = certified_bound(&node.sdp, &sol, 1.0, &traces)
                .ok_or_else(|| Error::Solver("non-finite dual certificate".into()))?;
            let infimum = sol.dual_objective.min(sol.primal_objective);
            if !infimum.is_finite() {
                return Err(Error::Solver("non-finite objective".into()));
            }
            let factor = node.weight / (node.t * LN_2);
            total += factor * infimum;
            certified_total += factor * certified;
            reports.push(NodeReport {
                t: node.t,
                infimum,
                certified_infimum: certified,
                primal_objective: sol.primal_objective,
                dual_objective: sol.dual_objective,
                iterations: sol.iterations,
                solver_residual: sol.max_residual(),
                verified_residual: report.max_violation(),
                near_optimal: sol.status == SolveStatus::NearOptimal,
            });
        }
        let bound = if (-NEGATIVE_CLAMP..0.0).contains(&total) {
            0.0
        } else {
            total
        };
        Ok(EntropyResult {
            bound,
            raw_bound: total,
            certified_bound: certified_total,
            cm: self.cm,
            m: self.m,
            level: self.level,
            p_n: self.p_n,
            nodes: reports,
        })
    }
}

pub fn entropy_bound(
    behavior: &BehaviorTable,
    p_n: f64,
    config: &EntropyConfig,
) -> Result<EntropyResult> {
    assemble(behavior, p_n, config)?.solve(&config.solver)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KeyRateResult {
    /// `max(0, raw_key_rate)`.
    pub key_rate: f64,
    pub raw_key_rate: f64,
    pub success_prob: f64,
    /// Error-correction cost `H(A|B)` on the key cell after noisy preprocessing.
    pub h_ab: f64,
    pub entropy: EntropyResult,
}

impl KeyRateResult {
    pub fn m(&self) -> usize {
        self.entropy.m
    }

    pub fn level(&self) -> usize {
        self.entropy.level
    }

    pub fn max_residual(&self) -> f64 {
        self.entropy.max_residual()
    }
}

/// `K = P (H(A|x*, E) - H(A|B, x*, y*))`.
pub fn key_rate(
    behavior: &BehaviorTable,
    p_n: f64,
    config: &EntropyConfig,
) -> Result<KeyRateResult> {
    let h_ab = conditional_entropy_ab(&apply_noisy_preprocessing(behavior, p_n)?);
    let entropy = entropy_bound(behavior, p_n, config)?;
    let raw = behavior.success_prob * (entropy.bound - h_ab);
    Ok(KeyRateResult {
        key_rate: raw.max(0.0),
        raw_key_rate: raw,
        success_prob: behavior.success_prob,
        h_ab,
        entropy,
    })
}
