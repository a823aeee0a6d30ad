//! Noncommutative monomials, moment matrices and localizing blocks for the
//! Alice/Bob/Eve scenario with binary outcomes.
//!
//! Only the outcome-0 projector of each measurement is a letter; outcome 1 is
//! `I - M`. Letters of different parties commute, projectors are idempotent,
//! and Eve's `Z`, `Z*` letters obey no relations among themselves. Moments of
//! a word and its adjoint are identified, which restricts the relaxation to
//! real moment matrices.

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Letter {
    /// Alice's outcome-0 projector for setting `x`.
    A(u8),
    /// Bob's outcome-0 projector for setting `y`.
    B(u8),
    /// `Z_{a,i}`.
    Z(u8, u8),
    /// `Z*_{a,i}`.
    ZStar(u8, u8),
}

impl Letter {
    fn party(self) -> u8 {
        match self {
            Letter::A(_) => 0,
            Letter::B(_) => 1,
            Letter::Z(..) | Letter::ZStar(..) => 2,
        }
    }

    fn is_projector(self) -> bool {
        self.party() < 2
    }

    pub fn adjoint(self) -> Letter {
        match self {
            Letter::Z(a, i) => Letter::ZStar(a, i),
            Letter::ZStar(a, i) => Letter::Z(a, i),
            p => p,
        }
    }
}

impl fmt::Display for Letter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Letter::A(x) => write!(f, "A{x}"),
            Letter::B(y) => write!(f, "B{y}"),
            Letter::Z(a, i) => write!(f, "Z{a}.{i}"),
            Letter::ZStar(a, i) => write!(f, "Z*{a}.{i}"),
        }
    }
}

/// A canonical word; the empty word is the identity.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Monomial(pub Vec<Letter>);

impl Monomial {
    pub fn identity() -> Self {
        Monomial(Vec::new())
    }

    pub fn is_identity(&self) -> bool {
        self.0.is_empty()
    }

    pub fn degree(&self) -> usize {
        self.0.len()
    }

    pub fn letters(&self) -> &[Letter] {
        &self.0
    }
}

impl fmt::Display for Monomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return write!(f, "1");
        }
        let parts: Vec<String> = self.0.iter().map(|l| l.to_string()).collect();
        write!(f, "{}", parts.join("·"))
    }
}

/// Declared letters: `alice` and `bob` setting counts plus Eve's `(a, i)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub alice: u8,
    pub bob: u8,
    pub eve: Vec<(u8, u8)>,
}

impl Scenario {
    pub fn bell(alice: u8, bob: u8) -> Self {
        Scenario {
            alice,
            bob,
            eve: Vec::new(),
        }
    }

    /// Letters in declaration order: Alice, Bob, then `Z`, `Z*` per Eve pair.
    pub fn letters(&self) -> Vec<Letter> {
        let mut out: Vec<Letter> = (0..self.alice).map(Letter::A).collect();
        out.extend((0..self.bob).map(Letter::B));
        for &(a, i) in &self.eve {
            out.push(Letter::Z(a, i));
            out.push(Letter::ZStar(a, i));
        }
        out
    }

    fn declares(&self, l: Letter) -> bool {
        match l {
            Letter::A(x) => x < self.alice,
            Letter::B(y) => y < self.bob,
            Letter::Z(a, i) | Letter::ZStar(a, i) => self.eve.contains(&(a, i)),
        }
    }

    /// Sorts letters into Alice·Bob·Eve blocks (order within a block kept) and
    /// collapses repeated adjacent projectors.
    pub fn canonicalize(&self, word: &[Letter]) -> Result<Monomial> {
        if let Some(bad) = word.iter().find(|l| !self.declares(**l)) {
            return Err(Error::Structural(format!("letter {bad} is not declared")));
        }
        Ok(canonical(word))
    }

    pub fn adjoint(&self, m: &Monomial) -> Monomial {
        let rev: Vec<Letter> = m.0.iter().rev().map(|l| l.adjoint()).collect();
        canonical(&rev)
    }

    /// Representative shared by `m` and its adjoint.
    pub fn real_key(&self, m: &Monomial) -> Monomial {
        let adj = self.adjoint(m);
        if adj < *m {
            adj
        } else {
            m.clone()
        }
    }

    /// `u† v`, canonicalized.
    pub fn product(&self, u: &Monomial, v: &Monomial) -> Monomial {
        let mut w: Vec<Letter> = u.0.iter().rev().map(|l| l.adjoint()).collect();
        w.extend_from_slice(&v.0);
        canonical(&w)
    }

    /// All canonical words of length ≤ `level`, identity first, then `extra`
    /// words not already present.
    pub fn build_basis(&self, level: usize, extra: &[Vec<Letter>]) -> Result<Vec<Monomial>> {
        let letters = self.letters();
        let mut seen: HashMap<Monomial, ()> = HashMap::new();
        let mut basis = vec![Monomial::identity()];
        seen.insert(Monomial::identity(), ());
        let mut frontier = vec![Monomial::identity()];
        for len in 1..=level {
            let mut next = Vec::new();
            for w in &frontier {
                for &l in &letters {
                    let mut word = w.0.clone();
                    word.push(l);
                    let c = canonical(&word);
                    if c.degree() == len && !seen.contains_key(&c) {
                        seen.insert(c.clone(), ());
                        next.push(c);
                    }
                }
            }
            basis.extend(next.iter().cloned());
            frontier = next;
        }
        for w in extra {
            let c = self.canonicalize(w)?;
            if !seen.contains_key(&c) {
                seen.insert(c.clone(), ());
                basis.push(c);
            }
        }
        Ok(basis)
    }
}

fn canonical(word: &[Letter]) -> Monomial {
    let mut out = Vec::with_capacity(word.len());
    for party in 0..3 {
        for &l in word.iter().filter(|l| l.party() == party) {
            if l.is_projector() && out.last() == Some(&l) {
                continue;
            }
            out.push(l);
        }
    }
    Monomial(out)
}

/// Real polynomial `Σ c_k w_k` in the scenario letters.
pub type Polynomial = Vec<(f64, Vec<Letter>)>;

/// Linear form `Σ c_k y_k` over moment variables; variable 0 is the identity.
pub type LinearForm = Vec<(usize, f64)>;

fn merge_form(mut form: LinearForm) -> LinearForm {
    form.sort_by_key(|&(k, _)| k);
    let mut out: LinearForm = Vec::with_capacity(form.len());
    for (k, c) in form {
        match out.last_mut() {
            Some((lk, lc)) if *lk == k => *lc += c,
            _ => out.push((k, c)),
        }
    }
    out.retain(|&(_, c)| c != 0.0);
    out
}

/// Gram matrix of a basis with entries identified up to adjoints.
#[derive(Debug, Clone)]
pub struct MomentMatrix {
    pub scenario: Scenario,
    pub basis: Vec<Monomial>,
    /// Variable id of entry `(i, j)`, row-major.
    pub entries: Vec<usize>,
    /// Representative monomial of each variable; index 0 is the identity.
    pub variables: Vec<Monomial>,
    index: HashMap<Monomial, usize>,
}

impl MomentMatrix {
    pub fn new(scenario: &Scenario, basis: Vec<Monomial>) -> Self {
        let mut mm = MomentMatrix {
            scenario: scenario.clone(),
            basis,
            entries: Vec::new(),
            variables: vec![Monomial::identity()],
            index: HashMap::new(),
        };
        mm.index.insert(Monomial::identity(), 0);
        let n = mm.basis.len();
        let mut entries = vec![0; n * n];
        for i in 0..n {
            for j in i..n {
                let w = scenario.product(&mm.basis[i], &mm.basis[j]);
                let key = scenario.real_key(&w);
                let next = mm.variables.len();
                let id = *mm.index.entry(key.clone()).or_insert(next);
                if id == next {
                    mm.variables.push(key);
                }
                entries[i * n + j] = id;
                entries[j * n + i] = id;
            }
        }
        mm.entries = entries;
        mm
    }

    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    pub fn num_variables(&self) -> usize {
        self.variables.len()
    }

    pub fn entry(&self, i: usize, j: usize) -> usize {
        self.entries[i * self.dim() + j]
    }

    /// Variable of a word, if the matrix covers it.
    pub fn lookup(&self, word: &[Letter]) -> Result<usize> {
        let c = self.scenario.canonicalize(word)?;
        self.index
            .get(&self.scenario.real_key(&c))
            .copied()
            .ok_or_else(|| {
                Error::Structural(format!("moment {c} is not covered by the moment matrix"))
            })
    }

    /// Linear form of `⟨p⟩`.
    pub fn expectation(&self, poly: &Polynomial) -> Result<LinearForm> {
        let mut form = Vec::with_capacity(poly.len());
        for (c, w) in poly {
            form.push((self.lookup(w)?, *c));
        }
        Ok(merge_form(form))
    }

    /// `⟨u† p v⟩` over a localizing basis of canonical words of length ≤ `level`.
    pub fn localizing(&self, poly: &Polynomial, level: usize) -> Result<LocalizingBlock> {
        let basis = self.scenario.build_basis(level, &[])?;
        let n = basis.len();
        let mut entries = vec![Vec::new(); n * n];
        for i in 0..n {
            let left: Vec<Letter> = basis[i].0.iter().rev().map(|l| l.adjoint()).collect();
            for j in i..n {
                let mut form = Vec::with_capacity(poly.len());
                for (c, w) in poly {
                    let mut word = left.clone();
                    word.extend_from_slice(w);
                    word.extend_from_slice(&basis[j].0);
                    form.push((self.lookup(&word)?, *c));
                }
                let form = merge_form(form);
                entries[i * n + j] = form.clone();
                entries[j * n + i] = form;
            }
        }
        Ok(LocalizingBlock {
            polynomial: poly.clone(),
            basis,
            entries,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LocalizingBlock {
    pub polynomial: Polynomial,
    pub basis: Vec<Monomial>,
    /// Linear form of entry `(i, j)`, row-major.
    pub entries: Vec<LinearForm>,
}

impl LocalizingBlock {
    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    pub fn entry(&self, i: usize, j: usize) -> &LinearForm {
        &self.entries[i * self.dim() + j]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use Letter::*;

    fn bff_scenario() -> Scenario {
        Scenario {
            alice: 2,
            bob: 3,
            eve: vec![(0, 1), (1, 1)],
        }
    }

    #[test]
    fn canonical_rules() {
        let s = bff_scenario();
        assert_eq!(s.canonicalize(&[A(0), A(0)]).unwrap(), Monomial(vec![A(0)]));
        assert_eq!(
            s.canonicalize(&[B(1), A(0)]).unwrap(),
            Monomial(vec![A(0), B(1)])
        );
        assert_ne!(
            s.canonicalize(&[Z(0, 1), ZStar(0, 1)]).unwrap(),
            s.canonicalize(&[ZStar(0, 1), Z(0, 1)]).unwrap()
        );
        assert_eq!(
            s.canonicalize(&[A(0), B(0), A(0)]).unwrap(),
            Monomial(vec![A(0), B(0)])
        );
        assert!(s.canonicalize(&[A(2)]).is_err());
        assert!(s.canonicalize(&[Z(0, 2)]).is_err());
    }

    #[test]
    fn level_two_variable_count() {
        let s = bff_scenario();
        let mm = MomentMatrix::new(&s, s.build_basis(2, &[]).unwrap());
        assert_eq!(mm.dim(), 60);
        assert_eq!(mm.num_variables(), 695);
    }

    #[test]
    fn basis_sizes() {
        let chsh = Scenario::bell(2, 2);
        let b = chsh.build_basis(1, &[]).unwrap();
        assert_eq!(b.len(), 5);
        assert!(b[0].is_identity());
        assert_eq!(bff_scenario().build_basis(1, &[]).unwrap().len(), 10);
        assert_eq!(bff_scenario().build_basis(2, &[]).unwrap().len(), 60);
        let extra = vec![vec![A(0), Z(0, 1)], vec![Z(0, 1), A(0)], vec![A(0)]];
        let b1 = bff_scenario().build_basis(1, &extra).unwrap();
        assert_eq!(b1.len(), 11);
    }

    #[test]
    fn chsh_level_one_variables() {
        let s = Scenario::bell(2, 2);
        let mm = MomentMatrix::new(&s, s.build_basis(1, &[]).unwrap());
        // identity, 4 marginals, A0A1, B0B1, 4 correlators
        assert_eq!(mm.num_variables(), 11);
        assert_eq!(mm.entry(1, 3), mm.entry(3, 1));
        assert_eq!(mm.entry(1, 1), mm.entry(0, 1));
        assert_eq!(mm.entry(0, 0), 0);
    }

    #[test]
    fn localizer_of_scalar_level() {
        let s = bff_scenario();
        let mm = MomentMatrix::new(&s, s.build_basis(2, &[]).unwrap());
        let poly = vec![(20.25, vec![]), (-1.0, vec![ZStar(0, 1), Z(0, 1)])];
        let loc0 = mm.localizing(&poly, 0).unwrap();
        assert_eq!(loc0.dim(), 1);
        let zz = mm.lookup(&[ZStar(0, 1), Z(0, 1)]).unwrap();
        assert_eq!(loc0.entry(0, 0), &vec![(0, 20.25), (zz, -1.0)]);
        assert_eq!(mm.localizing(&poly, 1).unwrap().dim(), 10);
        assert!(mm.localizing(&poly, 2).is_err());
    }

    /// Real operators on a tensor product `A ⊗ B ⊗ E`.
    struct Model {
        ops: HashMap<Letter, nalgebra::DMatrix<f64>>,
        psi: nalgebra::DVector<f64>,
    }

    fn kron3(
        a: &nalgebra::DMatrix<f64>,
        b: &nalgebra::DMatrix<f64>,
        e: &nalgebra::DMatrix<f64>,
    ) -> nalgebra::DMatrix<f64> {
        a.kronecker(b).kronecker(e)
    }

    fn random_model(seed: u64, s: &Scenario) -> Model {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let id2 = nalgebra::DMatrix::<f64>::identity(2, 2);
        let proj = |rng: &mut rand_chacha::ChaCha8Rng| {
            let th: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let v = nalgebra::DVector::from_vec(vec![th.cos(), th.sin()]);
            &v * v.transpose()
        };
        let mut ops = HashMap::new();
        for x in 0..s.alice {
            ops.insert(A(x), kron3(&proj(&mut rng), &id2, &id2));
        }
        for y in 0..s.bob {
            ops.insert(B(y), kron3(&id2, &proj(&mut rng), &id2));
        }
        for &(a, i) in &s.eve {
            let z = nalgebra::DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
            ops.insert(ZStar(a, i), kron3(&id2, &id2, &z.transpose()));
            ops.insert(Z(a, i), kron3(&id2, &id2, &z));
        }
        let mut psi = nalgebra::DVector::from_fn(8, |_, _| rng.random_range(-1.0..1.0));
        psi /= psi.norm();
        Model { ops, psi }
    }

    fn model_value(m: &Model, word: &[Letter]) -> f64 {
        let mut v = m.psi.clone();
        for l in word.iter().rev() {
            v = &m.ops[l] * v;
        }
        m.psi.dot(&v)
    }

    #[test]
    fn model_check() {
        let s = bff_scenario();
        let mm = MomentMatrix::new(&s, s.build_basis(2, &[]).unwrap());
        for seed in 0..3 {
            let model = random_model(seed, &s);
            let values: Vec<f64> = mm
                .variables
                .iter()
                .map(|w| model_value(&model, &w.0))
                .collect();
            let n = mm.dim();
            let mut gram = nalgebra::DMatrix::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    let mut word: Vec<Letter> =
                        mm.basis[i].0.iter().rev().map(|l| l.adjoint()).collect();
                    word.extend_from_slice(&mm.basis[j].0);
                    let direct = model_value(&model, &word);
                    assert!((direct - values[mm.entry(i, j)]).abs() < 1e-12);
                    gram[(i, j)] = direct;
                }
            }
            let min = gram.symmetric_eigen().eigenvalues.min();
            assert!(min > -1e-10, "min eigenvalue {min}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn letter() -> impl Strategy<Value = Letter> {
            prop_oneof![
                (0u8..2).prop_map(A),
                (0u8..3).prop_map(B),
                (0u8..2).prop_map(|a| Z(a, 1)),
                (0u8..2).prop_map(|a| ZStar(a, 1)),
            ]
        }

        proptest! {
            #[test]
            fn canonicalize_is_idempotent(word in proptest::collection::vec(letter(), 0..8)) {
                let s = bff_scenario();
                let c = s.canonicalize(&word).unwrap();
                prop_assert_eq!(s.canonicalize(&c.0).unwrap(), c.clone());
                prop_assert_eq!(s.adjoint(&s.adjoint(&c)), c);
            }

            #[test]
            fn canonicalization_respects_products(
                u in proptest::collection::vec(letter(), 0..5),
                v in proptest::collection::vec(letter(), 0..5),
            ) {
                let s = bff_scenario();
                let mut uv = u.clone();
                uv.extend_from_slice(&v);
                let mut cc = s.canonicalize(&u).unwrap().0;
                cc.extend(s.canonicalize(&v).unwrap().0);
                prop_assert_eq!(s.canonicalize(&uv).unwrap(), s.canonicalize(&cc).unwrap());
            }
        }
    }
}
