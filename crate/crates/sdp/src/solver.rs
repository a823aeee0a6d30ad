//! Infeasible primal-dual path-following method (HKM direction, Mehrotra
//! predictor-corrector) for the LMI form
//!
//! ```text
//!   (P)  minimize   c·z            subject to  S = C + Σ_j z_j A_j ⪰ 0
//!   (D)  maximize  -tr(C X)        subject to  tr(A_j X) = c_j,  X ⪰ 0
//! ```
//!
//! Equality constraints of an [`SdpProblem`] are eliminated first (see
//! [`Reduction`]); maximization problems are negated on entry and exit.

use nalgebra::{DMatrix, DVector};

use crate::linalg::{self, DenseCholesky};
use crate::problem::{Entry, SdpProblem, Sense};
use crate::reduce::Reduction;

const REFINEMENT_STEPS: usize = 2;

#[derive(Debug, Clone)]
pub struct SolverOptions {
    /// Bound on relative primal/dual infeasibility and relative gap.
    pub tol: f64,
    pub max_iters: usize,
    /// Fraction of the distance to the PSD boundary taken per step.
    pub step_fraction: f64,
    /// Keep a per-iteration log in the solution.
    pub keep_log: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-7,
            max_iters: 200,
            step_fraction: 0.95,
            keep_log: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    /// Stopped by the iteration limit or stalled with residuals below `sqrt(tol)`.
    NearOptimal,
    /// The matrix inequality and equalities admit no solution; see the certificate.
    Infeasible,
    /// The objective is unbounded over the feasible set.
    Unbounded,
    NumericalFailure,
}

#[derive(Debug, Clone)]
pub enum Certificate {
    None,
    /// Blocks `Y ⪰ 0` with `tr(C Y) - f·λ = -1` and `tr(A_k Y) + (Eᵀλ)_k ≈ 0` for every
    /// variable, which rules out any feasible point.
    Farkas {
        blocks: Vec<DMatrix<f64>>,
        equality_multipliers: Vec<f64>,
    },
    /// A dependent equality row with inconsistent right-hand side.
    EqualityConflict {
        row: usize,
        residual: f64,
    },
    /// A ray `d` with `Σ d_k A_k ⪰ 0`, `E d = 0` and strictly improving objective.
    Ray {
        direction: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy)]
pub struct IterationLog {
    pub iteration: usize,
    pub primal_objective: f64,
    pub dual_objective: f64,
    pub primal_infeasibility: f64,
    pub dual_infeasibility: f64,
    pub mu: f64,
    pub primal_step: f64,
    pub dual_step: f64,
    /// `primal - dual + slack`; never negative for a consistent iterate.
    pub weak_duality_margin: f64,
}

#[derive(Debug, Clone)]
pub struct SdpSolution {
    pub status: SolveStatus,
    /// `c·y + offset` in the problem's own sense.
    pub primal_objective: f64,
    /// Dual bound in the problem's own sense: a lower bound when minimizing, an
    /// upper bound when maximizing, up to the reported dual infeasibility.
    pub dual_objective: f64,
    pub y: Vec<f64>,
    /// Dual block matrices `X`.
    pub dual_blocks: Vec<DMatrix<f64>>,
    pub equality_multipliers: Vec<f64>,
    /// Relative residual of the matrix inequality (slack mismatch).
    pub primal_residual: f64,
    /// Relative residual of `tr(A_j X) = c_j`.
    pub dual_residual: f64,
    /// Relative duality gap.
    pub gap: f64,
    pub iterations: usize,
    pub dropped_rows: Vec<usize>,
    pub certificate: Certificate,
    pub log: Vec<IterationLog>,
}

impl SdpSolution {
    pub fn max_residual(&self) -> f64 {
        self.primal_residual.max(self.dual_residual).max(self.gap)
    }

    fn empty(status: SolveStatus, n: usize, dims: &[usize]) -> Self {
        Self {
            status,
            primal_objective: f64::NAN,
            dual_objective: f64::NAN,
            y: vec![0.0; n],
            dual_blocks: dims.iter().map(|&d| DMatrix::zeros(d, d)).collect(),
            equality_multipliers: Vec::new(),
            primal_residual: f64::INFINITY,
            dual_residual: f64::INFINITY,
            gap: f64::INFINITY,
            iterations: 0,
            dropped_rows: Vec::new(),
            certificate: Certificate::None,
            log: Vec::new(),
        }
    }
}

/// Coefficient entries with both orientations listed, grouped per block.
struct BlockTerms {
    /// `(var, row, col, value)` sorted by var.
    full: Vec<(usize, usize, usize, f64)>,
    /// Start offset in `full` of each distinct variable: `(var, start, end)`.
    spans: Vec<(usize, usize, usize)>,
}

struct Lmi {
    dims: Vec<usize>,
    c: Vec<f64>,
    constant: Vec<DMatrix<f64>>,
    vars: Vec<Vec<Entry>>,
    terms: Vec<BlockTerms>,
}

impl Lmi {
    fn from_problem(p: &SdpProblem) -> Self {
        let dims = p.block_dims().to_vec();
        let mut constant: Vec<DMatrix<f64>> = dims.iter().map(|&d| DMatrix::zeros(d, d)).collect();
        for e in p.constant_entries() {
            constant[e.block][(e.row, e.col)] += e.value;
            if e.row != e.col {
                constant[e.block][(e.col, e.row)] += e.value;
            }
        }
        let vars: Vec<Vec<Entry>> = (0..p.num_vars())
            .map(|k| p.coefficient_entries(k))
            .collect();
        let mut per_block: Vec<Vec<(usize, usize, usize, f64)>> = vec![Vec::new(); dims.len()];
        for (k, entries) in vars.iter().enumerate() {
            for e in entries {
                per_block[e.block].push((k, e.row, e.col, e.value));
                if e.row != e.col {
                    per_block[e.block].push((k, e.col, e.row, e.value));
                }
            }
        }
        let terms = per_block
            .into_iter()
            .map(|full| {
                let mut spans = Vec::new();
                let mut start = 0;
                while start < full.len() {
                    let var = full[start].0;
                    let mut end = start;
                    while end < full.len() && full[end].0 == var {
                        end += 1;
                    }
                    spans.push((var, start, end));
                    start = end;
                }
                BlockTerms { full, spans }
            })
            .collect();
        Self {
            dims,
            c: p.objective().to_vec(),
            constant,
            vars,
            terms,
        }
    }

    fn nvars(&self) -> usize {
        self.c.len()
    }

    fn total_dim(&self) -> usize {
        self.dims.iter().sum()
    }

    /// `C + Σ z_j A_j`.
    fn slack(&self, z: &[f64]) -> Vec<DMatrix<f64>> {
        let mut out = self.constant.clone();
        self.add_combination(&mut out, z, 1.0);
        out
    }

    fn add_combination(&self, out: &mut [DMatrix<f64>], z: &[f64], scale: f64) {
        for (b, t) in self.terms.iter().enumerate() {
            let m = &mut out[b];
            for &(k, r, c, v) in &t.full {
                m[(r, c)] += scale * z[k] * v;
            }
        }
    }

    /// `tr(A_j G)` for every variable, for general (non-symmetric) `G`.
    fn apply_adjoint(&self, g: &[DMatrix<f64>]) -> Vec<f64> {
        let mut out = vec![0.0; self.nvars()];
        for (b, t) in self.terms.iter().enumerate() {
            let m = &g[b];
            for &(k, r, c, v) in &t.full {
                out[k] += v * m[(c, r)];
            }
        }
        out
    }

    /// Lower triangle of `M_jl = Σ_b tr(A_j X A_l S⁻¹)`, row-major.
    fn schur(&self, x: &[DMatrix<f64>], sinv: &[DMatrix<f64>]) -> Vec<f64> {
        let n = self.nvars();
        let mut m = vec![0.0; n * n];
        for (b, t) in self.terms.iter().enumerate() {
            let xb = &x[b];
            let sb = &sinv[b];
            for (si, &(j, js, je)) in t.spans.iter().enumerate() {
                // X A_j column gather: for entry (a, bb, v) of A_j, contributes v X[bb, c] Sinv[d, a].
                for &(l, ls, le) in &t.spans[si..] {
                    let mut acc = 0.0;
                    for &(_, a, bb, v) in &t.full[js..je] {
                        let mut inner = 0.0;
                        for &(_, c, d, w) in &t.full[ls..le] {
                            inner += w * xb[(bb, c)] * sb[(d, a)];
                        }
                        acc += v * inner;
                    }
                    // l >= j because spans are sorted by variable.
                    m[l * n + j] += acc;
                }
            }
        }
        m
    }
}

fn trace_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.transpose().iter()).map(|(x, y)| x * y).sum()
}

fn trace_product_sym(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

struct Direction {
    dz: Vec<f64>,
    ds: Vec<DMatrix<f64>>,
    dx: Vec<DMatrix<f64>>,
}

/// Solves `problem`. Never panics on numerical trouble; inspect `status`.
pub fn solve(problem: &SdpProblem, options: &SolverOptions) -> SdpSolution {
    let n_orig = problem.num_vars();
    if let Err(_e) = problem.validate() {
        return SdpSolution::empty(SolveStatus::NumericalFailure, n_orig, problem.block_dims());
    }
    let (reduction, reduced) = Reduction::new(problem);
    let sign = match problem.sense() {
        Sense::Minimize => 1.0,
        Sense::Maximize => -1.0,
    };

    if let Some((row, residual)) = reduction.conflict {
        let mut sol = SdpSolution::empty(SolveStatus::Infeasible, n_orig, problem.block_dims());
        sol.certificate = Certificate::EqualityConflict { row, residual };
        sol.dropped_rows = reduction.dropped_rows.clone();
        return sol;
    }
    if let Some(var) = reduction.unbounded_direction {
        let mut sol = SdpSolution::empty(SolveStatus::Unbounded, n_orig, problem.block_dims());
        let dz = vec![0.0; reduction.kept.len()];
        let c = reduced_objective_sign(problem, &reduction, var);
        let direction = reduction.lift_direction(&dz, &[(var, -sign * c)]);
        sol.certificate = Certificate::Ray { direction };
        return sol;
    }

    let lmi = Lmi::from_problem(&reduced);
    let c_min: Vec<f64> = lmi.c.iter().map(|c| sign * c).collect();
    let offset_min = sign * reduced.offset();
    let mut run = Ipm::new(&lmi, c_min, options.clone());
    let outcome = run.iterate();

    let y = reduction.lift(&run.z);
    let mut sol = SdpSolution::empty(outcome, n_orig, problem.block_dims());
    sol.y = y;
    sol.iterations = run.iter;
    sol.log = std::mem::take(&mut run.log);
    sol.dropped_rows = reduction.dropped_rows.clone();
    sol.primal_residual = run.pinf;
    sol.dual_residual = run.dinf;
    sol.gap = run.relgap;
    sol.primal_objective = problem.objective_value(&sol.y);
    sol.dual_objective = sign * (run.dual_objective() + offset_min);
    sol.dual_blocks = run.x.clone();
    sol.equality_multipliers = equality_multipliers(problem, &run.x, sign);

    match outcome {
        SolveStatus::Infeasible => {
            let scale = -lmi
                .constant
                .iter()
                .zip(&run.x)
                .map(|(c, x)| trace_product_sym(c, x))
                .sum::<f64>();
            let blocks: Vec<DMatrix<f64>> = run.x.iter().map(|x| x / scale).collect();
            let mult = equality_multipliers_homogeneous(problem, &blocks);
            sol.certificate = Certificate::Farkas {
                blocks,
                equality_multipliers: mult,
            };
        }
        SolveStatus::Unbounded => {
            let pobj: f64 = run.z.iter().zip(&run.c).map(|(z, c)| z * c).sum();
            let dz: Vec<f64> = run.z.iter().map(|z| z / pobj.abs()).collect();
            let direction = reduction.lift_direction(&dz, &[]);
            sol.certificate = Certificate::Ray { direction };
        }
        _ => {}
    }
    sol
}

/// Sign of the substituted objective coefficient of an unused variable.
fn reduced_objective_sign(problem: &SdpProblem, reduction: &Reduction, var: usize) -> f64 {
    let obj = problem.objective();
    let mut c = obj[var];
    for (pv, _, terms) in &reduction.pivots {
        if let Some(&(_, f)) = terms.iter().find(|&&(j, _)| j == var) {
            c -= f * obj[*pv];
        }
    }
    c.signum()
}

/// Least-squares multipliers `λ` with `Eᵀλ ≈ sign·c - A*(X)` over all original variables.
fn equality_multipliers(problem: &SdpProblem, x: &[DMatrix<f64>], sign: f64) -> Vec<f64> {
    let eqs = problem.equalities();
    if eqs.is_empty() {
        return Vec::new();
    }
    let n = problem.num_vars();
    let mut r = DVector::zeros(n);
    for k in 0..n {
        let mut t = 0.0;
        for e in problem.coefficient_entries(k) {
            let m = &x[e.block];
            t += if e.row == e.col {
                e.value * m[(e.row, e.col)]
            } else {
                2.0 * e.value * m[(e.row, e.col)]
            };
        }
        r[k] = sign * problem.objective()[k] - t;
    }
    least_squares_multipliers(problem, r)
}

fn equality_multipliers_homogeneous(problem: &SdpProblem, y: &[DMatrix<f64>]) -> Vec<f64> {
    let eqs = problem.equalities();
    if eqs.is_empty() {
        return Vec::new();
    }
    let n = problem.num_vars();
    let mut r = DVector::zeros(n);
    for k in 0..n {
        let mut t = 0.0;
        for e in problem.coefficient_entries(k) {
            let m = &y[e.block];
            t += if e.row == e.col {
                e.value * m[(e.row, e.col)]
            } else {
                2.0 * e.value * m[(e.row, e.col)]
            };
        }
        r[k] = -t;
    }
    least_squares_multipliers(problem, r)
}

fn least_squares_multipliers(problem: &SdpProblem, r: DVector<f64>) -> Vec<f64> {
    let eqs = problem.equalities();
    let n = problem.num_vars();
    let mut et = DMatrix::zeros(n, eqs.len());
    for (i, eq) in eqs.iter().enumerate() {
        for &(v, c) in &eq.terms {
            et[(v, i)] += c;
        }
    }
    let svd = et.svd(true, true);
    match svd.solve(&r, 1e-10) {
        Ok(l) => l.iter().copied().collect(),
        Err(_) => vec![0.0; eqs.len()],
    }
}

struct Ipm<'a> {
    lmi: &'a Lmi,
    c: Vec<f64>,
    opts: SolverOptions,
    z: Vec<f64>,
    x: Vec<DMatrix<f64>>,
    s: Vec<DMatrix<f64>>,
    iter: usize,
    pinf: f64,
    dinf: f64,
    relgap: f64,
    log: Vec<IterationLog>,
    norm_c: f64,
    norm_cmat: f64,
    best: Option<Snapshot>,
}

/// Iterate with the smallest combined residual seen so far.
struct Snapshot {
    measure: f64,
    z: Vec<f64>,
    x: Vec<DMatrix<f64>>,
    s: Vec<DMatrix<f64>>,
}

impl<'a> Ipm<'a> {
    fn new(lmi: &'a Lmi, c: Vec<f64>, opts: SolverOptions) -> Self {
        let mut x = Vec::new();
        let mut s = Vec::new();
        for (b, &d) in lmi.dims.iter().enumerate() {
            let nd = d as f64;
            let mut max_ratio: f64 = 0.0;
            let mut max_norm_a: f64 = 0.0;
            for (k, entries) in lmi.vars.iter().enumerate() {
                let fro: f64 = entries
                    .iter()
                    .filter(|e| e.block == b)
                    .map(|e| {
                        if e.row == e.col {
                            e.value * e.value
                        } else {
                            2.0 * e.value * e.value
                        }
                    })
                    .sum::<f64>()
                    .sqrt();
                if fro > 0.0 {
                    max_ratio = max_ratio.max((1.0 + c[k].abs()) / (1.0 + fro));
                    max_norm_a = max_norm_a.max(fro);
                }
            }
            let norm_c = linalg::frobenius(&lmi.constant[b]);
            let xi = 10f64.max(nd.sqrt()).max(nd * max_ratio);
            let zeta = 10f64.max(nd.sqrt()).max(1.0 + max_norm_a).max(1.0 + norm_c);
            x.push(DMatrix::identity(d, d) * xi);
            s.push(DMatrix::identity(d, d) * zeta);
        }
        let norm_c = norm2(&c);
        let norm_cmat = lmi
            .constant
            .iter()
            .map(|m| linalg::frobenius(m).powi(2))
            .sum::<f64>()
            .sqrt();
        Self {
            z: vec![0.0; lmi.nvars()],
            lmi,
            c,
            opts,
            x,
            s,
            iter: 0,
            pinf: f64::INFINITY,
            dinf: f64::INFINITY,
            relgap: f64::INFINITY,
            log: Vec::new(),
            norm_c,
            norm_cmat,
            best: None,
        }
    }

    fn remember(&mut self, measure: f64) {
        if self.best.as_ref().is_none_or(|b| measure < b.measure) {
            self.best = Some(Snapshot {
                measure,
                z: self.z.clone(),
                x: self.x.clone(),
                s: self.s.clone(),
            });
        }
    }

    fn dual_objective(&self) -> f64 {
        -self
            .lmi
            .constant
            .iter()
            .zip(&self.x)
            .map(|(c, x)| trace_product_sym(c, x))
            .sum::<f64>()
    }

    fn primal_objective(&self) -> f64 {
        self.z.iter().zip(&self.c).map(|(z, c)| z * c).sum()
    }

    /// `Rd = S - (C + Σ z A)` and `rp = c - A*(X)`.
    fn residuals(&self) -> (Vec<DMatrix<f64>>, Vec<f64>) {
        let slack = self.lmi.slack(&self.z);
        let rd: Vec<DMatrix<f64>> = self.s.iter().zip(&slack).map(|(s, t)| s - t).collect();
        let ax = self.lmi.apply_adjoint(&self.x);
        let rp: Vec<f64> = self.c.iter().zip(&ax).map(|(c, a)| c - a).collect();
        (rd, rp)
    }

    fn mu(&self) -> f64 {
        let tr: f64 = self
            .x
            .iter()
            .zip(&self.s)
            .map(|(x, s)| trace_product_sym(x, s))
            .sum();
        tr / self.lmi.total_dim() as f64
    }

    fn direction(
        &self,
        chol_m: &DenseCholesky,
        sinv: &[DMatrix<f64>],
        rd: &[DMatrix<f64>],
        rc: &[DMatrix<f64>],
    ) -> Direction {
        let g: Vec<DMatrix<f64>> = (0..self.x.len())
            .map(|b| (&rc[b] + &self.x[b] * &rd[b]) * &sinv[b])
            .collect();
        let trs = self.lmi.apply_adjoint(&g);
        let rhs: Vec<f64> = trs.iter().zip(&self.c).map(|(t, c)| t - c).collect();
        let mut dz = chol_m.solve(&rhs);
        let mut ds: Vec<DMatrix<f64>> = rd.iter().map(|r| -r).collect();
        self.lmi.add_combination(&mut ds, &dz, 1.0);
        let mut dx = self.dual_step(&ds, sinv, rc);
        // Iterative refinement: when S is nearly singular the Schur solve loses
        // digits, and the dual step no longer satisfies tr(A_j (X + dX)) = c_j.
        for _ in 0..REFINEMENT_STEPS {
            let target: Vec<DMatrix<f64>> =
                self.x.iter().zip(&dx).map(|(x, d)| x + d).collect();
            let ax = self.lmi.apply_adjoint(&target);
            let err: Vec<f64> = self.c.iter().zip(&ax).map(|(c, a)| c - a).collect();
            if norm_inf(&err) <= 1e-15 * (1.0 + self.norm_c) {
                break;
            }
            let delta = chol_m.solve(&err);
            for (z, d) in dz.iter_mut().zip(&delta) {
                *z -= d;
            }
            self.lmi.add_combination(&mut ds, &delta, -1.0);
            dx = self.dual_step(&ds, sinv, rc);
        }
        Direction { dz, ds, dx }
    }

    /// `dX = (Rc - X dS) S⁻¹ - X`, symmetrized.
    fn dual_step(
        &self,
        ds: &[DMatrix<f64>],
        sinv: &[DMatrix<f64>],
        rc: &[DMatrix<f64>],
    ) -> Vec<DMatrix<f64>> {
        (0..self.x.len())
            .map(|b| {
                let mut d = (&rc[b] - &self.x[b] * &ds[b]) * &sinv[b] - &self.x[b];
                linalg::symmetrize(&mut d);
                d
            })
            .collect()
    }

    fn step_lengths(&self, dir: &Direction) -> Option<(f64, f64)> {
        let mut ap = f64::INFINITY;
        let mut ad = f64::INFINITY;
        for b in 0..self.x.len() {
            let cx = linalg::cholesky(&self.x[b])?;
            let cs = linalg::cholesky(&self.s[b])?;
            ap = ap.min(linalg::max_step(&cx, &dir.dx[b]));
            ad = ad.min(linalg::max_step(&cs, &dir.ds[b]));
        }
        Some((ap, ad))
    }

    fn update_measures(&mut self) -> (Vec<DMatrix<f64>>, Vec<f64>) {
        let (rd, rp) = self.residuals();
        let rd_norm = rd
            .iter()
            .map(|m| linalg::frobenius(m).powi(2))
            .sum::<f64>()
            .sqrt();
        self.pinf = rd_norm / (1.0 + self.norm_cmat);
        self.dinf = norm2(&rp) / (1.0 + self.norm_c);
        let pobj = self.primal_objective();
        let dobj = self.dual_objective();
        self.relgap = (pobj - dobj).abs() / (1.0 + pobj.abs() + dobj.abs());
        (rd, rp)
    }

    fn infeasibility_detected(&self) -> bool {
        let dobj = self.dual_objective();
        if !(dobj > 0.0) {
            return false;
        }
        let ax = self.lmi.apply_adjoint(&self.x);
        norm_inf(&ax) / dobj <= self.opts.tol && dobj > 1e3 * (1.0 + self.norm_c)
    }

    fn unboundedness_detected(&self) -> bool {
        let pobj = self.primal_objective();
        if !(pobj < -1e3 * (1.0 + self.norm_cmat)) {
            return false;
        }
        // Σ z A / |c·z| must be PSD up to tolerance.
        let mut dirm: Vec<DMatrix<f64>> = self
            .lmi
            .dims
            .iter()
            .map(|&d| DMatrix::zeros(d, d))
            .collect();
        self.lmi
            .add_combination(&mut dirm, &self.z, 1.0 / pobj.abs());
        dirm.iter()
            .all(|m| linalg::min_eigenvalue(m) >= -self.opts.tol)
    }

    fn iterate(&mut self) -> SolveStatus {
        let tol = self.opts.tol;
        let ntot = self.lmi.total_dim() as f64;
        let mut stall = 0usize;
        let mut best_measure = f64::INFINITY;
        loop {
            let (rd, _) = self.update_measures();
            let measure = self.pinf.max(self.dinf).max(self.relgap);
            if measure <= tol {
                return SolveStatus::Optimal;
            }
            self.remember(measure);
            if self.infeasibility_detected() {
                return SolveStatus::Infeasible;
            }
            if self.unboundedness_detected() {
                return SolveStatus::Unbounded;
            }
            if self.iter >= self.opts.max_iters {
                return self.fallback_status();
            }
            if measure < best_measure * 0.999 {
                best_measure = measure;
                stall = 0;
            } else {
                stall += 1;
                // Past the best point the iterates rarely recover once residuals
                // have grown by two orders of magnitude.
                if stall >= 8 || measure > 100.0 * best_measure {
                    return self.fallback_status();
                }
            }

            let mut sinv = Vec::with_capacity(self.s.len());
            for s in &self.s {
                match linalg::cholesky(s) {
                    Some(ch) => sinv.push(ch.inverse()),
                    None => return self.fallback_status(),
                }
            }
            let m = self.lmi.schur(&self.x, &sinv);
            let nv = self.lmi.nvars();
            let chol_m = match factor_with_regularization(m, nv) {
                Some(ch) => ch,
                None => return self.fallback_status(),
            };
            let mu = self.mu();

            let zero: Vec<DMatrix<f64>> = self
                .lmi
                .dims
                .iter()
                .map(|&d| DMatrix::zeros(d, d))
                .collect();
            let pred = self.direction(&chol_m, &sinv, &rd, &zero);
            let Some((ap, ad)) = self.step_lengths(&pred) else {
                return self.fallback_status();
            };
            let ap = ap.min(1.0);
            let ad = ad.min(1.0);
            let mut mu_aff = 0.0;
            for b in 0..self.x.len() {
                let xa = &self.x[b] + &pred.dx[b] * ap;
                let sa = &self.s[b] + &pred.ds[b] * ad;
                mu_aff += trace_product_sym(&xa, &sa);
            }
            mu_aff /= ntot;
            let ratio = (mu_aff / mu).clamp(0.0, 1.0);
            let sigma = if ap.min(ad) > 0.3 {
                ratio.powi(3)
            } else {
                ratio.powi(2).max(0.1)
            };

            let rc: Vec<DMatrix<f64>> = (0..self.x.len())
                .map(|b| {
                    let d = self.lmi.dims[b];
                    DMatrix::identity(d, d) * (sigma * mu) - &pred.dx[b] * &pred.ds[b]
                })
                .collect();
            let corr = self.direction(&chol_m, &sinv, &rd, &rc);
            let Some((ap, ad)) = self.step_lengths(&corr) else {
                return self.fallback_status();
            };
            let gamma = self.opts.step_fraction;
            let ap = (gamma * ap).min(1.0);
            let ad = (gamma * ad).min(1.0);

            for b in 0..self.x.len() {
                self.x[b] += &corr.dx[b] * ap;
                self.s[b] += &corr.ds[b] * ad;
                linalg::symmetrize(&mut self.x[b]);
                linalg::symmetrize(&mut self.s[b]);
            }
            for (z, d) in self.z.iter_mut().zip(&corr.dz) {
                *z += ad * d;
            }
            self.iter += 1;

            let pobj = self.primal_objective();
            let dobj = self.dual_objective();
            // Residuals of the new iterate; the step only removes them exactly
            // when the Schur system is solved exactly.
            let (rd, rp) = self.residuals();
            let slack = rd
                .iter()
                .zip(&self.x)
                .map(|(r, x)| trace_product(r, x).abs())
                .sum::<f64>()
                + rp.iter()
                    .zip(&self.z)
                    .map(|(r, z)| (r * z).abs())
                    .sum::<f64>();
            let margin = pobj - dobj + slack;
            if self.opts.keep_log {
                self.log.push(IterationLog {
                    iteration: self.iter,
                    primal_objective: pobj,
                    dual_objective: dobj,
                    primal_infeasibility: self.pinf,
                    dual_infeasibility: self.dinf,
                    mu,
                    primal_step: ap,
                    dual_step: ad,
                    weak_duality_margin: margin,
                });
            }
            // Cancellation in both objectives grows with their largest terms.
            #[cfg(debug_assertions)]
            let scale = 1.0
                + self.z.iter().zip(&self.c).map(|(z, c)| (z * c).abs()).sum::<f64>()
                + self
                    .lmi
                    .constant
                    .iter()
                    .zip(&self.x)
                    .map(|(c, x)| c.iter().zip(x.iter()).map(|(a, b)| (a * b).abs()).sum::<f64>())
                    .sum::<f64>();
            debug_assert!(
                margin >= -1e-8 * scale,
                "weak duality violated at iteration {}: margin {margin}",
                self.iter
            );
        }
    }

    /// Restores the best iterate and classifies it.
    fn fallback_status(&mut self) -> SolveStatus {
        if let Some(best) = self.best.take() {
            self.update_measures();
            let current = self.pinf.max(self.dinf).max(self.relgap);
            if best.measure < current {
                self.z = best.z;
                self.x = best.x;
                self.s = best.s;
            }
        }
        self.update_measures();
        let measure = self.pinf.max(self.dinf).max(self.relgap);
        if measure <= self.opts.tol {
            SolveStatus::Optimal
        } else if measure <= self.opts.tol.sqrt() {
            SolveStatus::NearOptimal
        } else {
            SolveStatus::NumericalFailure
        }
    }
}

fn factor_with_regularization(mut m: Vec<f64>, n: usize) -> Option<DenseCholesky> {
    if n == 0 {
        return DenseCholesky::factor(&m, 0);
    }
    if let Some(ch) = DenseCholesky::factor(&m, n) {
        return Some(ch);
    }
    let max_diag = (0..n)
        .map(|i| m[i * n + i].abs())
        .fold(0.0f64, f64::max)
        .max(1e-300);
    let mut delta = 1e-14 * max_diag;
    for _ in 0..6 {
        for i in 0..n {
            m[i * n + i] += delta;
        }
        if let Some(ch) = DenseCholesky::factor(&m, n) {
            return Some(ch);
        }
        delta *= 100.0;
    }
    None
}
