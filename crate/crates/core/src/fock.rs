//! Truncated Fock-space simulator, used as an independent check of the
//! Gaussian pipeline and as the engine for Bell-state sources.
//!
//! Pure states are sparse maps from packed occupation numbers to amplitudes.
//! Beamsplitters conserve photon number and are applied exactly; loss before
//! heralding is purified into explicit environment modes. After heralding the
//! kept modes form a small density matrix, where detector loss is applied with
//! Kraus operators and displaced vacuum projections use the exact row
//! `⟨0|D(α)|n⟩ = e^{-|α|²/2} (-α*)ⁿ / √n!`.

use std::collections::HashMap;

use nalgebra::{Complex, DMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::protocols::{BehaviorTable, MeasurementSettings, Protocol, ProtocolParams};

type C64 = Complex<f64>;

const BITS: u32 = 6;
const MAX_MODES: usize = 10;
const MAX_COUNT: u64 = (1 << BITS) - 1;
/// Default tolerance on the norm lost to truncation.
pub const TAIL_TOLERANCE: f64 = 1e-8;

fn count(key: u64, mode: usize) -> u64 {
    (key >> (BITS * mode as u32)) & MAX_COUNT
}

fn with_count(key: u64, mode: usize, n: u64) -> u64 {
    let shift = BITS * mode as u32;
    (key & !(MAX_COUNT << shift)) | (n << shift)
}

fn factorial(n: u64) -> f64 {
    (1..=n).fold(1.0, |acc, k| acc * k as f64)
}

fn binomial(n: u64, k: u64) -> f64 {
    factorial(n) / (factorial(k) * factorial(n - k))
}

/// Smallest cutoff with squeezing tail `λ^{2(c+1)} < 1e-10`, at least 8.
pub fn default_cutoff(nbar: f64) -> usize {
    let lambda2 = nbar / (1.0 + nbar);
    let mut c = 8;
    while lambda2.powi(c as i32 + 1) >= 1e-10 && c < MAX_COUNT as usize / 2 {
        c += 1;
    }
    c
}

/// Sparse pure state over labelled modes.
#[derive(Debug, Clone)]
pub struct FockState {
    modes: Vec<String>,
    amps: Vec<(u64, C64)>,
    /// Squared norm discarded by truncation so far.
    pub leaked: f64,
}

impl FockState {
    pub fn vacuum(labels: &[&str]) -> Result<Self> {
        if labels.len() > MAX_MODES {
            return Err(Error::Structural(format!(
                "at most {MAX_MODES} modes are supported"
            )));
        }
        Ok(FockState {
            modes: labels.iter().map(|s| s.to_string()).collect(),
            amps: vec![(0, C64::new(1.0, 0.0))],
            leaked: 0.0,
        })
    }

    /// Schmidt form `√(1-λ²) Σ λⁿ |n n⟩` with `λ² = n̄/(1+n̄)`, truncated at `cutoff`.
    pub fn tmsv(nbar: f64, labels: [&str; 2], cutoff: usize) -> Result<Self> {
        if nbar < 0.0 || !nbar.is_finite() {
            return Err(domain(format!(
                "mean photon number {nbar} must be finite and nonnegative"
            )));
        }
        if cutoff < 1 || cutoff as u64 > MAX_COUNT / 2 {
            return Err(domain(format!("cutoff {cutoff} is out of range")));
        }
        let lambda = (nbar / (1.0 + nbar)).sqrt();
        let c0 = (1.0 - lambda * lambda).sqrt();
        let amps: Vec<(u64, C64)> = (0..=cutoff as u64)
            .map(|n| (n | (n << BITS), C64::new(c0 * lambda.powi(n as i32), 0.0)))
            .filter(|(_, a)| a.re != 0.0)
            .collect();
        let norm: f64 = amps.iter().map(|(_, a)| a.norm_sqr()).sum();
        Ok(FockState {
            modes: labels.iter().map(|s| s.to_string()).collect(),
            amps,
            leaked: (1.0 - norm).max(0.0),
        })
    }

    /// Explicit superposition `Σ c |n⟩` over `labels`, normalized.
    pub fn from_terms(labels: &[&str], terms: &[(&[u64], f64)]) -> Result<Self> {
        let mut st = FockState::vacuum(labels)?;
        let mut amps = Vec::new();
        for &(occ, c) in terms {
            if occ.len() != labels.len() || occ.iter().any(|&n| n > MAX_COUNT) {
                return Err(Error::Structural(
                    "occupation vector does not match modes".into(),
                ));
            }
            let key = occ
                .iter()
                .enumerate()
                .fold(0u64, |k, (m, &n)| with_count(k, m, n));
            amps.push((key, C64::new(c, 0.0)));
        }
        let norm: f64 = amps
            .iter()
            .map(|(_, a): &(u64, C64)| a.norm_sqr())
            .sum::<f64>()
            .sqrt();
        if norm == 0.0 {
            return Err(domain("state has zero norm"));
        }
        amps.iter_mut().for_each(|(_, a)| *a /= norm);
        st.amps = merge(amps);
        Ok(st)
    }

    pub fn modes(&self) -> &[String] {
        &self.modes
    }

    pub fn len(&self) -> usize {
        self.amps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.amps.is_empty()
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amps.iter().map(|(_, a)| a.norm_sqr()).sum()
    }

    fn index(&self, mode: &str) -> Result<usize> {
        self.modes
            .iter()
            .position(|m| m == mode)
            .ok_or_else(|| Error::Structural(format!("unknown mode {mode:?}")))
    }

    /// Amplitude of an occupation pattern given in mode order.
    pub fn amplitude(&self, occ: &[u64]) -> C64 {
        let key = occ
            .iter()
            .enumerate()
            .fold(0u64, |k, (m, &n)| with_count(k, m, n));
        self.amps
            .binary_search_by_key(&key, |&(k, _)| k)
            .map(|i| self.amps[i].1)
            .unwrap_or(C64::new(0.0, 0.0))
    }

    pub fn tensor(&self, other: &FockState) -> Result<FockState> {
        let n = self.modes.len();
        if n + other.modes.len() > MAX_MODES {
            return Err(Error::Structural(format!(
                "at most {MAX_MODES} modes are supported"
            )));
        }
        let shift = BITS * n as u32;
        let mut amps = Vec::with_capacity(self.amps.len() * other.amps.len());
        for &(k1, a1) in &self.amps {
            for &(k2, a2) in &other.amps {
                amps.push((k1 | (k2 << shift), a1 * a2));
            }
        }
        let mut modes = self.modes.clone();
        modes.extend(other.modes.iter().cloned());
        Ok(FockState {
            modes,
            amps: merge(amps),
            leaked: self.leaked + other.leaked - self.leaked * other.leaked,
        })
    }

    /// Photon-number-conserving beamsplitter with
    /// `U a₁† U† = √η a₁† - √(1-η) a₂†`, `U a₂† U† = √(1-η) a₁† + √η a₂†`,
    /// matching the quadrature map `[[√η, √(1-η)], [-√(1-η), √η]]`.
    pub fn beamsplitter(&self, eta: f64, first: &str, second: &str) -> Result<FockState> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(domain(format!("transmissivity {eta} is outside [0, 1]")));
        }
        let (i, j) = (self.index(first)?, self.index(second)?);
        if i == j {
            return Err(Error::Structural(
                "beamsplitter needs two distinct modes".into(),
            ));
        }
        let (t, r) = (eta.sqrt(), (1.0 - eta).sqrt());
        let mut cache: HashMap<(u64, u64), Vec<f64>> = HashMap::new();
        let mut out = Vec::with_capacity(self.amps.len() * 2);
        for &(key, amp) in &self.amps {
            let (n1, n2) = (count(key, i), count(key, j));
            let total = n1 + n2;
            if total > MAX_COUNT {
                return Err(Error::Structural(
                    "photon number exceeds packing capacity".into(),
                ));
            }
            let row = cache
                .entry((n1, n2))
                .or_insert_with(|| beamsplitter_row(n1, n2, t, r));
            for (k, &c) in row.iter().enumerate() {
                if c != 0.0 {
                    let key2 = with_count(with_count(key, i, k as u64), j, total - k as u64);
                    out.push((key2, amp * c));
                }
            }
        }
        Ok(FockState {
            modes: self.modes.clone(),
            amps: merge(out),
            leaked: self.leaked,
        })
    }

    /// Adds a vacuum mode at the end.
    pub fn add_vacuum(&self, label: &str) -> Result<FockState> {
        self.tensor(&FockState::vacuum(&[label])?)
    }

    /// Pure loss purified into a new environment mode `env`.
    pub fn loss(&self, mode: &str, eta: f64, env: &str) -> Result<FockState> {
        self.add_vacuum(env)?.beamsplitter(eta, mode, env)
    }

    /// Displacement `D(α)` on `mode`, truncated at `cutoff` photons in that mode.
    /// Discarded weight is added to `leaked`.
    pub fn displace(&self, mode: &str, alpha: C64, cutoff: usize) -> Result<FockState> {
        let m = self.index(mode)?;
        let max_in = self
            .amps
            .iter()
            .map(|&(k, _)| count(k, m))
            .max()
            .unwrap_or(0) as usize;
        let d = displacement_matrix(alpha, cutoff.max(max_in));
        let before = self.norm_sqr();
        let mut out = Vec::new();
        for &(key, amp) in &self.amps {
            let n = count(key, m) as usize;
            for k in 0..=cutoff {
                let c = d[(k, n)];
                if c != C64::new(0.0, 0.0) {
                    out.push((with_count(key, m, k as u64), amp * c));
                }
            }
        }
        let amps = merge(out);
        let after: f64 = amps.iter().map(|(_, a)| a.norm_sqr()).sum();
        Ok(FockState {
            modes: self.modes.clone(),
            amps,
            leaked: self.leaked + (before - after).max(0.0),
        })
    }

    /// Unnormalized reduced state on `keep` after applying diagonal POVM
    /// elements on other modes. Unlisted discarded modes are traced out.
    pub fn reduce(&self, keep: &[&str], povm: &[(&str, Vec<f64>)]) -> Result<DensityMatrix> {
        let keep_idx: Vec<usize> = keep.iter().map(|m| self.index(m)).collect::<Result<_>>()?;
        let povm_idx: Vec<(usize, &Vec<f64>)> = povm
            .iter()
            .map(|(m, w)| Ok((self.index(m)?, w)))
            .collect::<Result<_>>()?;
        let dims: Vec<usize> = keep_idx
            .iter()
            .map(|&m| {
                self.amps
                    .iter()
                    .map(|&(k, _)| count(k, m))
                    .max()
                    .unwrap_or(0) as usize
                    + 1
            })
            .collect();
        let mut keep_mask = 0u64;
        for &m in &keep_idx {
            keep_mask |= MAX_COUNT << (BITS * m as u32);
        }
        let mut entries: Vec<(u64, usize, C64, f64)> = Vec::with_capacity(self.amps.len());
        for &(key, amp) in &self.amps {
            let mut w = 1.0;
            for &(m, weights) in &povm_idx {
                let n = count(key, m) as usize;
                w *= weights
                    .get(n)
                    .copied()
                    .unwrap_or_else(|| *weights.last().unwrap_or(&1.0));
            }
            if w == 0.0 {
                continue;
            }
            let mut idx = 0;
            for (p, &m) in keep_idx.iter().enumerate() {
                idx = idx * dims[p] + count(key, m) as usize;
            }
            entries.push((key & !keep_mask, idx, amp, w));
        }
        entries.sort_by_key(|e| (e.0, e.1));
        let total: usize = dims.iter().product();
        let mut rho = DMatrix::<C64>::zeros(total, total);
        let mut start = 0;
        while start < entries.len() {
            let mut end = start + 1;
            while end < entries.len() && entries[end].0 == entries[start].0 {
                end += 1;
            }
            let w = entries[start].3;
            for a in &entries[start..end] {
                for b in &entries[start..end] {
                    rho[(a.1, b.1)] += a.2 * b.2.conj() * w;
                }
            }
            start = end;
        }
        Ok(DensityMatrix {
            modes: keep.iter().map(|s| s.to_string()).collect(),
            dims,
            rho,
        })
    }
}

fn merge(mut amps: Vec<(u64, C64)>) -> Vec<(u64, C64)> {
    amps.sort_by_key(|&(k, _)| k);
    let mut out: Vec<(u64, C64)> = Vec::with_capacity(amps.len());
    for (k, a) in amps {
        match out.last_mut() {
            Some((lk, la)) if *lk == k => *la += a,
            _ => out.push((k, a)),
        }
    }
    out.retain(|(_, a)| a.norm_sqr() > 0.0);
    out
}

/// Output amplitudes over `k` photons in the first port for input `|n1, n2⟩`.
fn beamsplitter_row(n1: u64, n2: u64, t: f64, r: f64) -> Vec<f64> {
    let total = n1 + n2;
    let mut row = vec![0.0; total as usize + 1];
    for j in 0..=n1 {
        let a = binomial(n1, j) * t.powi(j as i32) * (-r).powi((n1 - j) as i32);
        for l in 0..=n2 {
            let b = binomial(n2, l) * r.powi(l as i32) * t.powi((n2 - l) as i32);
            row[(j + l) as usize] += a * b;
        }
    }
    let norm = (factorial(n1) * factorial(n2)).sqrt();
    for (k, v) in row.iter_mut().enumerate() {
        *v *= (factorial(k as u64) * factorial(total - k as u64)).sqrt() / norm;
    }
    row
}

/// `⟨m|D(α)|n⟩` for `m, n ≤ cutoff`.
pub fn displacement_matrix(alpha: C64, cutoff: usize) -> DMatrix<C64> {
    let dim = cutoff + 1;
    let x = alpha.norm_sqr();
    let pref = (-x / 2.0).exp();
    DMatrix::from_fn(dim, dim, |m, n| {
        // ⟨m|D|n⟩ = √(n!/m!) αᵐ⁻ⁿ L_n^{(m-n)}(|α|²) e^{-|α|²/2} for m ≥ n
        let (hi, lo, base) = if m >= n {
            (m, n, alpha)
        } else {
            (n, m, -alpha.conj())
        };
        let k = (hi - lo) as i32;
        let lag = laguerre(lo, k as f64, x);
        let ratio = (factorial(lo as u64) / factorial(hi as u64)).sqrt();
        base.powi(k) * (ratio * lag * pref)
    })
}

fn laguerre(n: usize, a: f64, x: f64) -> f64 {
    let (mut l0, mut l1) = (1.0, 1.0 + a - x);
    if n == 0 {
        return l0;
    }
    for k in 1..n {
        let kf = k as f64;
        let l2 = ((2.0 * kf + 1.0 + a - x) * l1 - (kf + a) * l0) / (kf + 1.0);
        l0 = l1;
        l1 = l2;
    }
    l1
}

/// `⟨0|D(α)|n⟩` for `n = 0..len`.
pub fn vacuum_row(alpha: C64, len: usize) -> Vec<C64> {
    let pref = (-alpha.norm_sqr() / 2.0).exp();
    let mut out = Vec::with_capacity(len);
    let mut v = C64::new(pref, 0.0);
    for n in 0..len {
        out.push(v);
        v *= -alpha.conj() / ((n + 1) as f64).sqrt();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Click,
    NoClick,
}

/// Diagonal of the on-off POVM element after efficiency `eta`:
/// no-click is `(1 - p_dark)(1 - η)ⁿ`, click its complement.
pub fn onoff_povm_element(eta: f64, p_dark: f64, cutoff: usize, outcome: Outcome) -> Vec<f64> {
    (0..=cutoff)
        .map(|n| {
            let no_click = (1.0 - p_dark) * (1.0 - eta).powi(n as i32);
            match outcome {
                Outcome::NoClick => no_click,
                Outcome::Click => 1.0 - no_click,
            }
        })
        .collect()
}

/// Density matrix over a few labelled modes, row-major multi-index.
#[derive(Debug, Clone)]
pub struct DensityMatrix {
    pub modes: Vec<String>,
    pub dims: Vec<usize>,
    pub rho: DMatrix<C64>,
}

impl DensityMatrix {
    pub fn trace(&self) -> f64 {
        self.rho.diagonal().iter().map(|c| c.re).sum()
    }

    pub fn scale(&mut self, s: f64) {
        self.rho *= C64::new(s, 0.0);
    }

    fn digits(&self, mut idx: usize) -> Vec<usize> {
        let mut d = vec![0; self.dims.len()];
        for p in (0..self.dims.len()).rev() {
            d[p] = idx % self.dims[p];
            idx /= self.dims[p];
        }
        d
    }

    fn flat(&self, digits: &[usize]) -> usize {
        digits
            .iter()
            .zip(&self.dims)
            .fold(0, |acc, (&d, &n)| acc * n + d)
    }

    fn position(&self, mode: &str) -> Result<usize> {
        self.modes
            .iter()
            .position(|m| m == mode)
            .ok_or_else(|| Error::Structural(format!("unknown mode {mode:?}")))
    }

    /// Pure loss via Kraus operators `A_k|n⟩ = √C(n,k) (1-η)^{k/2} η^{(n-k)/2} |n-k⟩`.
    pub fn apply_loss(&self, mode: &str, eta: f64) -> Result<DensityMatrix> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(domain(format!("transmissivity {eta} is outside [0, 1]")));
        }
        let p = self.position(mode)?;
        let dim = self.rho.nrows();
        let mut out = DMatrix::<C64>::zeros(dim, dim);
        let kraus = |n: usize, k: usize| -> f64 {
            (binomial(n as u64, k as u64) * (1.0 - eta).powi(k as i32) * eta.powi((n - k) as i32))
                .sqrt()
        };
        for i in 0..dim {
            let di = self.digits(i);
            for j in 0..dim {
                let v = self.rho[(i, j)];
                if v == C64::new(0.0, 0.0) {
                    continue;
                }
                let dj = self.digits(j);
                let (ni, nj) = (di[p], dj[p]);
                for k in 0..=ni.min(nj) {
                    let mut ti = di.clone();
                    let mut tj = dj.clone();
                    ti[p] -= k;
                    tj[p] -= k;
                    out[(self.flat(&ti), self.flat(&tj))] += v * (kraus(ni, k) * kraus(nj, k));
                }
            }
        }
        Ok(DensityMatrix {
            modes: self.modes.clone(),
            dims: self.dims.clone(),
            rho: out,
        })
    }

    /// `Tr[ρ ⊗_m D(α_m)† |0⟩⟨0| D(α_m)]` over the listed modes; others are traced.
    pub fn displaced_vacuum_probability(&self, amplitudes: &[(&str, C64)]) -> Result<f64> {
        let positions: Vec<(usize, Vec<C64>)> = amplitudes
            .iter()
            .map(|&(m, a)| {
                let p = self.position(m)?;
                Ok((p, vacuum_row(a, self.dims[p])))
            })
            .collect::<Result<_>>()?;
        let dim = self.rho.nrows();
        let digits: Vec<Vec<usize>> = (0..dim).map(|i| self.digits(i)).collect();
        let weight = |d: &[usize]| -> C64 {
            positions
                .iter()
                .fold(C64::new(1.0, 0.0), |acc, (p, row)| acc * row[d[*p]])
        };
        let measured: Vec<usize> = positions.iter().map(|(p, _)| *p).collect();
        let mut total = C64::new(0.0, 0.0);
        for i in 0..dim {
            let wi = weight(&digits[i]);
            if wi == C64::new(0.0, 0.0) {
                continue;
            }
            for j in 0..dim {
                let traced_match = (0..self.dims.len())
                    .filter(|q| !measured.contains(q))
                    .all(|q| digits[i][q] == digits[j][q]);
                if !traced_match {
                    continue;
                }
                total += wi * self.rho[(i, j)] * weight(&digits[j]).conj();
            }
        }
        Ok(total.re)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BellKind {
    /// `(|01⟩ + r|10⟩)/√(1+r²)`
    PhotonNumber,
    /// `(|00⟩ + r|11⟩)/√(1+r²)`
    VacuumPhoton,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BellStateSpec {
    pub kind: BellKind,
    pub r: f64,
}

impl BellStateSpec {
    pub fn state(&self) -> Result<FockState> {
        if !(self.r >= 0.0 && self.r.is_finite()) {
            return Err(domain(format!(
                "r = {} must be finite and nonnegative",
                self.r
            )));
        }
        match self.kind {
            BellKind::PhotonNumber => {
                FockState::from_terms(&["A", "B"], &[(&[0, 1], 1.0), (&[1, 0], self.r)])
            }
            BellKind::VacuumPhoton => {
                FockState::from_terms(&["A", "B"], &[(&[0, 0], 1.0), (&[1, 1], self.r)])
            }
        }
    }
}

/// Displaced on-off statistics of a normalized two-mode density matrix `(A, B)`.
fn table_from_density(
    rho: &DensityMatrix,
    settings: &MeasurementSettings,
    p_d_e: f64,
    success_prob: f64,
    protocol: Protocol,
) -> Result<BehaviorTable> {
    let nd = 1.0 - p_d_e;
    let mut p00 = [[0.0; 3]; 2];
    let mut pa0 = [0.0; 2];
    let mut pb0 = [0.0; 3];
    for (x, &alpha) in settings.alice.iter().enumerate() {
        pa0[x] = nd * rho.displaced_vacuum_probability(&[("A", alpha)])?;
        for (y, &beta) in settings.bob.iter().enumerate() {
            p00[x][y] = nd * nd * rho.displaced_vacuum_probability(&[("A", alpha), ("B", beta)])?;
        }
    }
    for (y, &beta) in settings.bob.iter().enumerate() {
        pb0[y] = nd * rho.displaced_vacuum_probability(&[("B", beta)])?;
    }
    BehaviorTable::from_no_click(p00, pa0, pb0, success_prob, protocol)
}

pub fn bell_state_behavior(
    spec: &BellStateSpec,
    eta_e: f64,
    p_d_e: f64,
    settings: &MeasurementSettings,
) -> Result<BehaviorTable> {
    settings.validate()?;
    let rho = spec
        .state()?
        .reduce(&["A", "B"], &[])?
        .apply_loss("A", eta_e)?
        .apply_loss("B", eta_e)?;
    table_from_density(&rho, settings, p_d_e, 1.0, Protocol::Bell)
}

/// Diagnostics of an oracle evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleReport {
    pub cutoff: usize,
    pub leaked: f64,
    pub amplitudes: usize,
}

/// Brute-force behavior of Protocol A, B or direct transmission.
pub fn oracle_behavior_table(
    params: &ProtocolParams,
    settings: &MeasurementSettings,
    protocol: Protocol,
    cutoff: Option<usize>,
) -> Result<(BehaviorTable, OracleReport)> {
    params.validate()?;
    settings.validate()?;
    let cutoff = cutoff.unwrap_or_else(|| default_cutoff(params.nbar_a.max(params.nbar_b)));
    let (rho, success, state) = match protocol {
        Protocol::A => {
            let st = FockState::tmsv(params.nbar_a, ["A", "A'"], cutoff)?
                .tensor(&FockState::tmsv(params.nbar_b, ["B", "B'"], cutoff)?)?
                .loss("A'", params.eta_a, "EA")?
                .loss("B'", params.eta_b, "EB")?
                .beamsplitter(0.5, "A'", "B'")?;
            let max = 2 * cutoff;
            let povm = [
                (
                    "A'",
                    onoff_povm_element(params.eta_d, params.p_d, max, Outcome::Click),
                ),
                (
                    "B'",
                    onoff_povm_element(params.eta_d, params.p_d, max, Outcome::NoClick),
                ),
            ];
            let mut rho = st.reduce(&["A", "B"], &povm)?;
            let p = rho.trace();
            if !(p > 0.0) {
                return Err(Error::HeraldImpossible);
            }
            rho.scale(1.0 / p);
            (rho, p, st)
        }
        Protocol::B => {
            let st = FockState::tmsv(params.nbar_a, ["A", "A'"], cutoff)?
                .tensor(&FockState::tmsv(params.nbar_b, ["B", "C"], cutoff)?)?
                .add_vacuum("B'")?
                .beamsplitter(params.tau, "B", "B'")?
                .loss("A'", params.eta_a, "EA")?
                .loss("B'", params.eta_b, "EB")?
                .beamsplitter(0.5, "A'", "B'")?;
            let max = 2 * cutoff;
            let povm = [
                (
                    "A'",
                    onoff_povm_element(params.eta_d, params.p_d, max, Outcome::Click),
                ),
                (
                    "B'",
                    onoff_povm_element(params.eta_d, params.p_d, max, Outcome::NoClick),
                ),
                (
                    "C",
                    onoff_povm_element(params.eta_d, params.p_d, max, Outcome::Click),
                ),
            ];
            let mut rho = st.reduce(&["A", "B"], &povm)?;
            let p = rho.trace();
            if !(p > 0.0) {
                return Err(Error::HeraldImpossible);
            }
            rho.scale(1.0 / p);
            (rho, p, st)
        }
        Protocol::Direct => {
            let st = FockState::tmsv(params.nbar_a, ["A", "B"], cutoff)?;
            let mut rho = st.reduce(&["A", "B"], &[])?;
            let norm = rho.trace();
            rho.scale(1.0 / norm);
            let rho = rho
                .apply_loss("A", params.eta_a)?
                .apply_loss("B", params.eta_b)?;
            (rho, 1.0, st)
        }
        Protocol::Bell => {
            return Err(Error::Structural(
                "use bell_state_behavior for Bell sources".into(),
            ))
        }
    };
    if state.leaked > TAIL_TOLERANCE {
        return Err(Error::Truncation {
            leaked: state.leaked,
            tolerance: TAIL_TOLERANCE,
        });
    }
    let rho = rho
        .apply_loss("A", params.eta_e)?
        .apply_loss("B", params.eta_e)?;
    let table = table_from_density(&rho, settings, params.p_d_e, success, protocol)?;
    Ok((
        table,
        OracleReport {
            cutoff,
            leaked: state.leaked,
            amplitudes: state.len(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn tmsv_schmidt_coefficients() {
        let v = FockState::tmsv(0.0, ["A", "B"], 8).unwrap();
        assert_eq!(v.len(), 1);
        let st = FockState::tmsv(1.0, ["A", "B"], 30).unwrap();
        assert_abs_diff_eq!(st.amplitude(&[0, 0]).norm_sqr(), 0.5, epsilon = 1e-15);
        assert!(st.leaked < 1e-9);
        let rho = st.reduce(&["A", "B"], &[]).unwrap();
        let p = rho
            .displaced_vacuum_probability(&[("A", C64::new(0.0, 0.0)), ("B", C64::new(0.0, 0.0))])
            .unwrap();
        assert_abs_diff_eq!(p, 0.5, epsilon = 1e-9);
    }

    #[test]
    fn beamsplitter_single_photon_phase() {
        let st = FockState::from_terms(&["a", "b"], &[(&[1, 0], 1.0)]).unwrap();
        let out = st.beamsplitter(0.5, "a", "b").unwrap();
        let h = 0.5f64.sqrt();
        assert_abs_diff_eq!(out.amplitude(&[1, 0]).re, h, epsilon = 1e-15);
        assert_abs_diff_eq!(out.amplitude(&[0, 1]).re, -h, epsilon = 1e-15);
    }

    #[test]
    fn beamsplitter_preserves_norm_and_number() {
        let st = FockState::tmsv(0.3, ["a", "b"], 10).unwrap();
        let before = st.norm_sqr();
        let out = st.beamsplitter(0.37, "a", "b").unwrap();
        assert_abs_diff_eq!(out.norm_sqr(), before, epsilon = 1e-12);
        let id = st.beamsplitter(1.0, "a", "b").unwrap();
        assert_abs_diff_eq!(
            id.amplitude(&[3, 3]).re,
            st.amplitude(&[3, 3]).re,
            epsilon = 1e-15
        );
    }

    #[test]
    fn displacement_of_vacuum() {
        let alpha = C64::new(0.7, -0.4);
        let st = FockState::vacuum(&["a"])
            .unwrap()
            .displace("a", alpha, 30)
            .unwrap();
        assert_abs_diff_eq!(
            st.amplitude(&[0]).norm_sqr(),
            (-alpha.norm_sqr()).exp(),
            epsilon = 1e-14
        );
        assert!(st.leaked < 1e-12);
        let row = vacuum_row(alpha, 6);
        let d = displacement_matrix(alpha, 5);
        for n in 0..6 {
            assert_abs_diff_eq!((row[n] - d[(0, n)]).norm(), 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn povm_elements() {
        let nc = onoff_povm_element(1.0, 0.0, 4, Outcome::NoClick);
        assert_eq!(nc, vec![1.0, 0.0, 0.0, 0.0, 0.0]);
        let blind = onoff_povm_element(0.0, 0.0, 4, Outcome::NoClick);
        assert!(blind.iter().all(|&v| v == 1.0));
        let nc = onoff_povm_element(0.95, 1e-6, 3, Outcome::NoClick);
        assert_abs_diff_eq!(nc[1], (1.0 - 1e-6) * 0.05, epsilon = 1e-16);
        let c = onoff_povm_element(0.95, 1e-6, 3, Outcome::Click);
        for n in 0..4 {
            assert_eq!(nc[n] + c[n], 1.0);
        }
    }

    #[test]
    fn loss_kraus_preserves_trace() {
        let rho = FockState::tmsv(0.5, ["A", "B"], 12)
            .unwrap()
            .reduce(&["A", "B"], &[])
            .unwrap();
        let lossy = rho.apply_loss("A", 0.6).unwrap();
        assert_abs_diff_eq!(lossy.trace(), rho.trace(), epsilon = 1e-13);
    }

    #[test]
    fn bell_state_examples() {
        let zero = MeasurementSettings::zero();
        let pn = BellStateSpec {
            kind: BellKind::PhotonNumber,
            r: 1.0,
        };
        let t = bell_state_behavior(&pn, 1.0, 0.0, &zero).unwrap();
        assert_abs_diff_eq!(t.get(0, 0, 0, 0), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(t.get(0, 1, 0, 0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(t.get(1, 0, 0, 0), 0.5, epsilon = 1e-15);
        let vp = BellStateSpec {
            kind: BellKind::VacuumPhoton,
            r: 0.6,
        };
        let t = bell_state_behavior(&vp, 1.0, 0.0, &zero).unwrap();
        assert_abs_diff_eq!(t.get(0, 0, 0, 0), 1.0 / 1.36, epsilon = 1e-15);
    }

    #[test]
    fn vacuum_photon_bell_state_under_loss() {
        // Half the weight is vacuum; the |11⟩ half is silent only if both photons are lost.
        let vp = BellStateSpec {
            kind: BellKind::VacuumPhoton,
            r: 1.0,
        };
        let t = bell_state_behavior(&vp, 0.9, 0.0, &MeasurementSettings::zero()).unwrap();
        assert_abs_diff_eq!(t.get(0, 0, 0, 0), 0.5 * (1.0 + 0.1 * 0.1), epsilon = 1e-14);
    }

    #[test]
    fn trivial_protocol_a_oracle() {
        let params = ProtocolParams {
            p_d: 0.1,
            p_d_e: 0.0,
            ..ProtocolParams::default().with_nbar(0.0)
        };
        let (t, _) =
            oracle_behavior_table(&params, &MeasurementSettings::zero(), Protocol::A, None)
                .unwrap();
        assert_abs_diff_eq!(t.success_prob, 0.09, epsilon = 1e-14);
        assert_abs_diff_eq!(t.get(0, 0, 0, 0), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn tiny_cutoff_is_rejected() {
        let params = ProtocolParams::default().with_nbar(0.3);
        let r = oracle_behavior_table(
            &params,
            &MeasurementSettings::zero(),
            Protocol::Direct,
            Some(2),
        );
        assert!(matches!(r, Err(Error::Truncation { .. })));
    }

    #[test]
    fn default_cutoff_rule() {
        assert_eq!(default_cutoff(0.0), 8);
        assert_eq!(default_cutoff(0.05), 8);
        assert!(default_cutoff(1.0) > 30);
    }
}
