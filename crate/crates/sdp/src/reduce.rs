//! Elimination of linear equalities by substitution.
//!
//! The equality system is brought to reduced row echelon form with complete
//! pivoting. Rows whose best pivot falls below `PIVOT_TOL` are dependent and
//! dropped; a dropped row with a nonzero right-hand side is a conflict.

use crate::problem::{merge_entries, Entry, SdpProblem};

const PIVOT_TOL: f64 = 1e-10;
const CONFLICT_TOL: f64 = 1e-9;

/// Substitution map from a problem with equalities to a pure LMI problem.
#[derive(Debug, Clone)]
pub struct Reduction {
    num_original: usize,
    /// Original indices of the variables kept in the reduced problem.
    pub kept: Vec<usize>,
    /// `(var, rhs, [(free var, coef)])`: `y_var = rhs - Σ coef·y_free`.
    pub pivots: Vec<(usize, f64, Vec<(usize, f64)>)>,
    /// Free variables that touch no block after substitution; fixed at zero.
    pub unused: Vec<usize>,
    /// Equality rows removed as linearly dependent.
    pub dropped_rows: Vec<usize>,
    /// First dependent row whose right-hand side is inconsistent, with its residual.
    pub conflict: Option<(usize, f64)>,
    /// Objective coefficient left on an unused variable (problem unbounded if nonzero).
    pub unbounded_direction: Option<usize>,
}

impl Reduction {
    /// Builds the reduction and the equality-free problem over the kept variables.
    pub fn new(problem: &SdpProblem) -> (Self, SdpProblem) {
        let n = problem.num_vars();
        let eqs = problem.equalities();
        let rows = eqs.len();
        let mut mat = vec![vec![0.0; n]; rows];
        let mut rhs = vec![0.0; rows];
        for (i, eq) in eqs.iter().enumerate() {
            for &(v, c) in &eq.terms {
                mat[i][v] += c;
            }
            rhs[i] = eq.rhs;
            let scale = mat[i].iter().fold(0.0f64, |m, x| m.max(x.abs()));
            if scale > 0.0 {
                mat[i].iter_mut().for_each(|x| *x /= scale);
                rhs[i] /= scale;
            }
        }

        let mut row_done = vec![false; rows];
        let mut is_pivot_col = vec![false; n];
        let mut pivot_rows: Vec<(usize, usize)> = Vec::new();
        loop {
            let mut best = (0.0, usize::MAX, usize::MAX);
            for (i, row) in mat.iter().enumerate() {
                if row_done[i] {
                    continue;
                }
                for (j, &x) in row.iter().enumerate() {
                    if !is_pivot_col[j] && x.abs() > best.0 {
                        best = (x.abs(), i, j);
                    }
                }
            }
            if best.0 <= PIVOT_TOL {
                break;
            }
            let (_, pr, pc) = best;
            let p = mat[pr][pc];
            mat[pr].iter_mut().for_each(|x| *x /= p);
            rhs[pr] /= p;
            let pivot_row = mat[pr].clone();
            let pivot_rhs = rhs[pr];
            for i in 0..rows {
                if i == pr {
                    continue;
                }
                let f = mat[i][pc];
                if f != 0.0 {
                    for (x, &pv) in mat[i].iter_mut().zip(&pivot_row) {
                        *x -= f * pv;
                    }
                    mat[i][pc] = 0.0;
                    rhs[i] -= f * pivot_rhs;
                }
            }
            row_done[pr] = true;
            is_pivot_col[pc] = true;
            pivot_rows.push((pr, pc));
        }

        let mut dropped_rows = Vec::new();
        let mut conflict = None;
        for i in 0..rows {
            if !row_done[i] {
                dropped_rows.push(i);
                if rhs[i].abs() > CONFLICT_TOL && conflict.is_none() {
                    conflict = Some((i, rhs[i]));
                }
            }
        }

        let free: Vec<usize> = (0..n).filter(|&j| !is_pivot_col[j]).collect();

        // Substituted coefficient matrices for every free variable.
        let pivot_coeffs: Vec<(usize, Vec<Entry>)> = pivot_rows
            .iter()
            .map(|&(_, pc)| (pc, problem.coefficient_entries(pc)))
            .collect();
        let mut constant = problem.constant_entries();
        let mut offset = problem.offset();
        let obj = problem.objective();
        for (k, &(pr, _)) in pivot_rows.iter().enumerate() {
            let (pc, ref entries) = pivot_coeffs[k];
            for e in entries {
                constant.push(Entry {
                    value: e.value * rhs[pr],
                    ..*e
                });
            }
            offset += obj[pc] * rhs[pr];
        }

        let mut kept = Vec::new();
        let mut unused = Vec::new();
        let mut unbounded_direction = None;
        let mut kept_entries: Vec<Vec<Entry>> = Vec::new();
        let mut kept_obj = Vec::new();
        for &j in &free {
            let mut entries = problem.coefficient_entries(j);
            let mut c = obj[j];
            for (k, &(pr, _)) in pivot_rows.iter().enumerate() {
                let f = mat[pr][j];
                if f == 0.0 {
                    continue;
                }
                let (pc, ref pentries) = pivot_coeffs[k];
                for e in pentries {
                    entries.push(Entry {
                        value: -f * e.value,
                        ..*e
                    });
                }
                c -= f * obj[pc];
            }
            let entries: Vec<Entry> = merge_entries(&entries)
                .into_iter()
                .filter(|e| e.value.abs() > 1e-15)
                .collect();
            if entries.is_empty() {
                if c.abs() > 1e-12 && unbounded_direction.is_none() {
                    unbounded_direction = Some(j);
                }
                unused.push(j);
            } else {
                kept.push(j);
                kept_entries.push(entries);
                kept_obj.push(c);
            }
        }

        let pivots = pivot_rows
            .iter()
            .map(|&(pr, pc)| {
                let terms = free
                    .iter()
                    .filter_map(|&j| {
                        let f = mat[pr][j];
                        (f != 0.0).then_some((j, f))
                    })
                    .collect();
                (pc, rhs[pr], terms)
            })
            .collect();

        let mut reduced = SdpProblem::new(kept.len(), problem.sense());
        for &d in problem.block_dims() {
            reduced.add_block(d);
        }
        for e in merge_entries(&constant) {
            reduced.add_constant(e.block, e.row, e.col, e.value);
        }
        for (p, entries) in kept_entries.iter().enumerate() {
            for e in entries {
                reduced.add_coefficient(p, e.block, e.row, e.col, e.value);
            }
            reduced.set_objective(p, kept_obj[p]);
        }
        reduced.set_offset(offset);

        let reduction = Reduction {
            num_original: n,
            kept,
            pivots,
            unused,
            dropped_rows,
            conflict,
            unbounded_direction,
        };
        (reduction, reduced)
    }

    /// Maps a point of the reduced problem back to the original variables.
    pub fn lift(&self, z: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.num_original];
        for (p, &j) in self.kept.iter().enumerate() {
            y[j] = z[p];
        }
        for (var, rhs, terms) in &self.pivots {
            y[*var] = rhs - terms.iter().map(|&(j, c)| c * y[j]).sum::<f64>();
        }
        y
    }

    /// Maps a direction of the reduced problem (plus optional moves of unused
    /// variables) to a direction of the original problem with `E d = 0`.
    pub fn lift_direction(&self, dz: &[f64], unused_moves: &[(usize, f64)]) -> Vec<f64> {
        let mut d = vec![0.0; self.num_original];
        for (p, &j) in self.kept.iter().enumerate() {
            d[j] = dz[p];
        }
        for &(j, v) in unused_moves {
            d[j] = v;
        }
        for (var, _, terms) in &self.pivots {
            d[*var] = -terms.iter().map(|&(j, c)| c * d[j]).sum::<f64>();
        }
        d
    }

    pub fn is_trivial(&self) -> bool {
        self.pivots.is_empty() && self.unused.is_empty() && self.dropped_rows.is_empty()
    }
}
