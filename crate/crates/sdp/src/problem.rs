//! Block-structured linear matrix inequality problems.
//!
//! A problem is stated over a vector of scalar variables `y`:
//!
//! ```text
//!   minimize / maximize   c·y + offset
//!   subject to            C_b + Σ_k y_k A_{k,b}  ⪰ 0     for every block b
//!                         E y = f
//! ```
//!
//! Every matrix is symmetric and stored sparsely as upper-triangular entries.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use crate::error::SdpError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Minimize,
    Maximize,
}

/// One upper-triangular entry (`row <= col`) of a symmetric block matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entry {
    pub block: usize,
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

/// Sparse linear equality `Σ coef·y_var = rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearEquality {
    pub terms: Vec<(usize, f64)>,
    pub rhs: f64,
}

#[derive(Debug, Clone)]
pub struct SdpProblem {
    block_dims: Vec<usize>,
    constants: Vec<Entry>,
    coeffs: Vec<Vec<Entry>>,
    objective: Vec<f64>,
    offset: f64,
    sense: Sense,
    equalities: Vec<LinearEquality>,
}

fn ordered(row: usize, col: usize) -> (usize, usize) {
    if row <= col {
        (row, col)
    } else {
        (col, row)
    }
}

/// Sums duplicate positions and drops exact zeros. Output is sorted by (block, row, col).
pub(crate) fn merge_entries(entries: &[Entry]) -> Vec<Entry> {
    let mut acc: BTreeMap<(usize, usize, usize), f64> = BTreeMap::new();
    for e in entries {
        *acc.entry((e.block, e.row, e.col)).or_insert(0.0) += e.value;
    }
    acc.into_iter()
        .filter(|(_, v)| *v != 0.0)
        .map(|((block, row, col), value)| Entry {
            block,
            row,
            col,
            value,
        })
        .collect()
}

impl SdpProblem {
    pub fn new(num_vars: usize, sense: Sense) -> Self {
        Self {
            block_dims: Vec::new(),
            constants: Vec::new(),
            coeffs: vec![Vec::new(); num_vars],
            objective: vec![0.0; num_vars],
            offset: 0.0,
            sense,
            equalities: Vec::new(),
        }
    }

    /// Appends a PSD block of the given dimension and returns its index.
    pub fn add_block(&mut self, dim: usize) -> usize {
        self.block_dims.push(dim);
        self.block_dims.len() - 1
    }

    /// Adds a fresh scalar variable and returns its index.
    pub fn add_variable(&mut self) -> usize {
        self.coeffs.push(Vec::new());
        self.objective.push(0.0);
        self.coeffs.len() - 1
    }

    /// Adds `value` to the constant matrix at `(row, col)` and `(col, row)`.
    pub fn add_constant(&mut self, block: usize, row: usize, col: usize, value: f64) {
        let (row, col) = ordered(row, col);
        self.constants.push(Entry {
            block,
            row,
            col,
            value,
        });
    }

    /// Adds `value` to the coefficient matrix of `var` at `(row, col)` and `(col, row)`.
    pub fn add_coefficient(
        &mut self,
        var: usize,
        block: usize,
        row: usize,
        col: usize,
        value: f64,
    ) {
        let (row, col) = ordered(row, col);
        self.coeffs[var].push(Entry {
            block,
            row,
            col,
            value,
        });
    }

    pub fn set_objective(&mut self, var: usize, coef: f64) {
        self.objective[var] = coef;
    }

    pub fn add_objective(&mut self, var: usize, coef: f64) {
        self.objective[var] += coef;
    }

    pub fn set_offset(&mut self, offset: f64) {
        self.offset = offset;
    }

    pub fn scale_objective(&mut self, factor: f64) {
        for c in &mut self.objective {
            *c *= factor;
        }
        self.offset *= factor;
    }

    pub fn add_equality(&mut self, terms: Vec<(usize, f64)>, rhs: f64) {
        self.equalities.push(LinearEquality { terms, rhs });
    }

    pub fn num_vars(&self) -> usize {
        self.coeffs.len()
    }

    pub fn block_dims(&self) -> &[usize] {
        &self.block_dims
    }

    pub fn sense(&self) -> Sense {
        self.sense
    }

    pub fn objective(&self) -> &[f64] {
        &self.objective
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn equalities(&self) -> &[LinearEquality] {
        &self.equalities
    }

    pub fn constant_entries(&self) -> Vec<Entry> {
        merge_entries(&self.constants)
    }

    pub fn coefficient_entries(&self, var: usize) -> Vec<Entry> {
        merge_entries(&self.coeffs[var])
    }

    /// Objective value at `y` in the problem's own sense.
    pub fn objective_value(&self, y: &[f64]) -> f64 {
        self.offset
            + self
                .objective
                .iter()
                .zip(y)
                .map(|(c, v)| c * v)
                .sum::<f64>()
    }

    /// Dense block matrices `C_b + Σ_k y_k A_{k,b}`.
    pub fn evaluate_blocks(&self, y: &[f64]) -> Vec<DMatrix<f64>> {
        let mut blocks: Vec<DMatrix<f64>> = self
            .block_dims
            .iter()
            .map(|&d| DMatrix::zeros(d, d))
            .collect();
        let mut put = |e: &Entry, scale: f64| {
            let m = &mut blocks[e.block];
            m[(e.row, e.col)] += scale * e.value;
            if e.row != e.col {
                m[(e.col, e.row)] += scale * e.value;
            }
        };
        for e in &self.constants {
            put(e, 1.0);
        }
        for (var, entries) in self.coeffs.iter().enumerate() {
            if y[var] == 0.0 {
                continue;
            }
            for e in entries {
                put(e, y[var]);
            }
        }
        blocks
    }

    /// Structural checks: indices in range, every variable used somewhere.
    pub fn validate(&self) -> Result<(), SdpError> {
        if self.block_dims.is_empty() {
            return Err(SdpError::Malformed("problem has no blocks".into()));
        }
        if let Some(b) = self.block_dims.iter().position(|&d| d == 0) {
            return Err(SdpError::Malformed(format!("block {b} has dimension 0")));
        }
        let check = |e: &Entry| -> Result<(), SdpError> {
            let dim = *self.block_dims.get(e.block).ok_or_else(|| {
                SdpError::Malformed(format!("entry references block {}", e.block))
            })?;
            if e.col >= dim {
                return Err(SdpError::Malformed(format!(
                    "entry ({}, {}) outside block {} of dimension {dim}",
                    e.row, e.col, e.block
                )));
            }
            if !e.value.is_finite() {
                return Err(SdpError::Malformed("non-finite matrix entry".into()));
            }
            Ok(())
        };
        for e in &self.constants {
            check(e)?;
        }
        for (var, entries) in self.coeffs.iter().enumerate() {
            for e in entries {
                check(e)?;
            }
            let in_equality = self
                .equalities
                .iter()
                .any(|eq| eq.terms.iter().any(|&(v, c)| v == var && c != 0.0));
            if merge_entries(entries).is_empty() && !in_equality {
                return Err(SdpError::Malformed(format!(
                    "variable {var} appears in no block and no equality"
                )));
            }
        }
        for (i, eq) in self.equalities.iter().enumerate() {
            if eq.terms.iter().any(|&(v, _)| v >= self.num_vars()) {
                return Err(SdpError::Malformed(format!(
                    "equality {i} references an unknown variable"
                )));
            }
        }
        if self.objective.iter().any(|c| !c.is_finite()) {
            return Err(SdpError::Malformed(
                "non-finite objective coefficient".into(),
            ));
        }
        Ok(())
    }
}
