//! Heralded state decompositions and behavior tables for Protocols A, B and
//! direct transmission.
//!
//! Outcome `0` is "no click", `1` is "click". Settings: Alice `x ∈ {0, 1}`,
//! Bob `y ∈ {0, 1, 2}`; the key is generated from `(x, y) = (0, 2)`.

use nalgebra::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::gaussian::{tmsv, GaussianState};

pub const KEY_X: usize = 0;
pub const KEY_Y: usize = 2;
pub const DEFAULT_SUCCESS_FLOOR: f64 = 1e-30;
/// Largest negative excursion tolerated before clamping is treated as a bug.
const CLAMP_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Protocol {
    #[serde(rename = "A")]
    A,
    #[serde(rename = "B")]
    B,
    #[serde(rename = "direct")]
    Direct,
    #[serde(rename = "bell")]
    Bell,
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Protocol::A => "A",
            Protocol::B => "B",
            Protocol::Direct => "direct",
            Protocol::Bell => "bell",
        })
    }
}

/// Transmissivity of `distance_km` of fiber at 0.2 dB/km.
pub fn fiber_transmissivity(distance_km: f64) -> f64 {
    10f64.powf(-0.02 * distance_km)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProtocolParams {
    pub nbar_a: f64,
    pub nbar_b: f64,
    pub eta_a: f64,
    pub eta_b: f64,
    pub eta_d: f64,
    pub eta_e: f64,
    pub p_d: f64,
    pub p_d_e: f64,
    pub tau: f64,
}

impl Default for ProtocolParams {
    fn default() -> Self {
        ProtocolParams {
            nbar_a: 0.015,
            nbar_b: 0.015,
            eta_a: 1.0,
            eta_b: 1.0,
            eta_d: 0.95,
            eta_e: 0.95,
            p_d: 1e-6,
            p_d_e: 1e-6,
            tau: 0.5,
        }
    }
}

impl ProtocolParams {
    /// Symmetric channel losses for `distance_km` from each party to the station.
    pub fn at_distance(mut self, distance_km: f64) -> Self {
        let eta = fiber_transmissivity(distance_km);
        self.eta_a = eta;
        self.eta_b = eta;
        self
    }

    pub fn with_nbar(mut self, nbar: f64) -> Self {
        self.nbar_a = nbar;
        self.nbar_b = nbar;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("nbar_a", self.nbar_a), ("nbar_b", self.nbar_b)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(domain(format!(
                    "{name} = {v} must be finite and nonnegative"
                )));
            }
        }
        for (name, v) in [
            ("eta_a", self.eta_a),
            ("eta_b", self.eta_b),
            ("eta_d", self.eta_d),
            ("eta_e", self.eta_e),
            ("p_d", self.p_d),
            ("p_d_e", self.p_d_e),
            ("tau", self.tau),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(domain(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Effective (post-loss) displacement amplitudes per setting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSettings {
    pub alice: [Complex<f64>; 2],
    pub bob: [Complex<f64>; 3],
}

impl MeasurementSettings {
    pub fn zero() -> Self {
        let z = Complex::new(0.0, 0.0);
        MeasurementSettings {
            alice: [z; 2],
            bob: [z; 3],
        }
    }

    pub fn real(alice: [f64; 2], bob: [f64; 3]) -> Self {
        MeasurementSettings {
            alice: alice.map(|a| Complex::new(a, 0.0)),
            bob: bob.map(|b| Complex::new(b, 0.0)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self
            .alice
            .iter()
            .chain(&self.bob)
            .all(|c| c.re.is_finite() && c.im.is_finite())
        {
            Ok(())
        } else {
            Err(domain("displacement amplitudes must be finite"))
        }
    }
}

/// One component `q_i ρ^(i)` of a heralded state; `weight` carries the sign.
#[derive(Debug, Clone, PartialEq)]
pub struct HeraldTerm {
    pub weight: f64,
    pub state: GaussianState,
}

impl HeraldTerm {
    pub fn sign(&self) -> f64 {
        self.weight.signum()
    }
}

/// `ρ_AB = Σ_i q_i ρ^(i)` with `Σ q_i = 1`, plus the heralding probability.
#[derive(Debug, Clone, PartialEq)]
pub struct HeraldedDecomposition {
    pub terms: Vec<HeraldTerm>,
    pub success_prob: f64,
}

impl HeraldedDecomposition {
    pub fn weight_sum(&self) -> f64 {
        self.terms.iter().map(|t| t.weight).sum()
    }
}

/// Expands the product of click / no-click POVMs into vacuum projections and
/// conditions the state on each.
fn herald(
    sigma: &GaussianState,
    keep: [&str; 2],
    clicks: &[&str],
    silent: &[&str],
    p_d: f64,
    floor: f64,
) -> Result<HeraldedDecomposition> {
    let nd = 1.0 - p_d;
    let mut raw = Vec::new();
    for mask in 0..(1usize << clicks.len()) {
        let mut vac: Vec<&str> = silent.to_vec();
        let mut coeff = nd.powi(silent.len() as i32);
        for (k, &c) in clicks.iter().enumerate() {
            if mask & (1 << k) != 0 {
                vac.push(c);
                coeff *= -nd;
            }
        }
        if coeff == 0.0 {
            continue;
        }
        let overlap = sigma.vacuum_overlap(&vac)?;
        let state = if vac.is_empty() {
            sigma.partial_trace(&keep)?
        } else {
            sigma.condition_on_vacuum_all(&vac)?.partial_trace(&keep)?
        };
        raw.push((coeff * overlap, state));
    }
    let success: f64 = raw.iter().map(|(w, _)| w).sum();
    let scale: f64 = raw.iter().map(|(w, _)| w.abs()).sum();
    if !(success > 1e-13 * scale) {
        return Err(Error::HeraldImpossible);
    }
    if success < floor {
        return Err(Error::HeraldUnderflow(success));
    }
    let terms = raw
        .into_iter()
        .map(|(w, state)| HeraldTerm {
            weight: w / success,
            state,
        })
        .collect();
    Ok(HeraldedDecomposition {
        terms,
        success_prob: success,
    })
}

/// Protocol A: heralds on "A' clicks, B' silent" after the 50:50 beamsplitter.
pub fn herald_protocol_a(params: &ProtocolParams) -> Result<HeraldedDecomposition> {
    herald_protocol_a_with_floor(params, DEFAULT_SUCCESS_FLOOR)
}

pub fn herald_protocol_a_with_floor(
    params: &ProtocolParams,
    floor: f64,
) -> Result<HeraldedDecomposition> {
    params.validate()?;
    let sigma = tmsv(params.nbar_a, ["A", "A'"])?
        .tensor(&tmsv(params.nbar_b, ["B", "B'"])?)?
        .attenuate("A'", params.eta_a)?
        .attenuate("B'", params.eta_b)?
        .beamsplitter(0.5, "A'", "B'")?
        .attenuate("A", params.eta_e)?
        .attenuate("A'", params.eta_d)?
        .attenuate("B", params.eta_e)?
        .attenuate("B'", params.eta_d)?;
    herald(&sigma, ["A", "B"], &["A'"], &["B'"], params.p_d, floor)
}

/// Protocol B: Bob's squeezer `(B, C)` is split by `τ` into `B` (kept) and `B'`
/// (sent); success is "A' clicks, B' silent, C clicks".
pub fn herald_protocol_b(params: &ProtocolParams) -> Result<HeraldedDecomposition> {
    herald_protocol_b_with_floor(params, DEFAULT_SUCCESS_FLOOR)
}

pub fn herald_protocol_b_with_floor(
    params: &ProtocolParams,
    floor: f64,
) -> Result<HeraldedDecomposition> {
    params.validate()?;
    let sigma = tmsv(params.nbar_a, ["A", "A'"])?
        .tensor(&tmsv(params.nbar_b, ["B", "C"])?)?
        .tensor(&GaussianState::vacuum(&["B'"]))?
        .beamsplitter(params.tau, "B", "B'")?
        .attenuate("A'", params.eta_a)?
        .attenuate("B'", params.eta_b)?
        .beamsplitter(0.5, "A'", "B'")?
        .attenuate("A", params.eta_e)?
        .attenuate("A'", params.eta_d)?
        .attenuate("B", params.eta_e)?
        .attenuate("B'", params.eta_d)?
        .attenuate("C", params.eta_d)?;
    herald(&sigma, ["A", "B"], &["A'", "C"], &["B'"], params.p_d, floor)
}

/// Direct transmission: the squeezer's modes cross losses `η_A η_e` and `η_B η_e`.
pub fn direct_decomposition(params: &ProtocolParams) -> Result<HeraldedDecomposition> {
    params.validate()?;
    let state = tmsv(params.nbar_a, ["A", "B"])?
        .attenuate("A", params.eta_a * params.eta_e)?
        .attenuate("B", params.eta_b * params.eta_e)?;
    Ok(HeraldedDecomposition {
        terms: vec![HeraldTerm { weight: 1.0, state }],
        success_prob: 1.0,
    })
}

/// `P(a, b | x, y)` stored as `probs[x][y][a][b]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BehaviorTable {
    pub probs: [[[[f64; 2]; 2]; 3]; 2],
    pub success_prob: f64,
    pub protocol: Protocol,
}

impl BehaviorTable {
    /// Completes the table from no-click probabilities. Small violations of the
    /// Fréchet bounds from signed cancellation are clamped; larger ones are errors.
    pub fn from_no_click(
        p00: [[f64; 3]; 2],
        pa0: [f64; 2],
        pb0: [f64; 3],
        success_prob: f64,
        protocol: Protocol,
    ) -> Result<Self> {
        let clamp_unit = |v: f64, cell: String| -> Result<f64> {
            if !v.is_finite() || v < -CLAMP_TOL || v > 1.0 + CLAMP_TOL {
                return Err(Error::Inconsistent { cell, value: v });
            }
            Ok(v.clamp(0.0, 1.0))
        };
        let mut probs = [[[[0.0; 2]; 2]; 3]; 2];
        for x in 0..2 {
            let pa = clamp_unit(pa0[x], format!("P_A(0|{x})"))?;
            for y in 0..3 {
                let pb = clamp_unit(pb0[y], format!("P_B(0|{y})"))?;
                let lo = (pa + pb - 1.0).max(0.0);
                let hi = pa.min(pb);
                let v = p00[x][y];
                if !v.is_finite() || v < lo - CLAMP_TOL || v > hi + CLAMP_TOL {
                    return Err(Error::Inconsistent {
                        cell: format!("P(0,0|{x},{y})"),
                        value: v,
                    });
                }
                let v = v.clamp(lo, hi);
                probs[x][y] = [[v, pa - v], [pb - v, 1.0 - pa - pb + v]];
            }
        }
        Ok(BehaviorTable {
            probs,
            success_prob,
            protocol,
        })
    }

    pub fn get(&self, a: usize, b: usize, x: usize, y: usize) -> f64 {
        self.probs[x][y][a][b]
    }

    pub fn key_cell(&self) -> [[f64; 2]; 2] {
        self.probs[KEY_X][KEY_Y]
    }

    pub fn alice_no_click(&self, x: usize) -> f64 {
        self.probs[x][0][0][0] + self.probs[x][0][0][1]
    }

    pub fn bob_no_click(&self, y: usize) -> f64 {
        self.probs[0][y][0][0] + self.probs[0][y][1][0]
    }

    /// Largest deviation from normalization over all settings.
    pub fn normalization_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for x in 0..2 {
            for y in 0..3 {
                let s: f64 = self.probs[x][y].iter().flatten().sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
        worst
    }

    /// Largest signaling deviation (marginals that depend on the remote setting).
    pub fn signaling_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for x in 0..2 {
            for a in 0..2 {
                let m: Vec<f64> = (0..3)
                    .map(|y| self.probs[x][y][a][0] + self.probs[x][y][a][1])
                    .collect();
                for y in 1..3 {
                    worst = worst.max((m[y] - m[0]).abs());
                }
            }
        }
        for y in 0..3 {
            for b in 0..2 {
                let m: Vec<f64> = (0..2)
                    .map(|x| self.probs[x][y][0][b] + self.probs[x][y][1][b])
                    .collect();
                worst = worst.max((m[1] - m[0]).abs());
            }
        }
        worst
    }

    pub fn min_entry(&self) -> f64 {
        self.probs
            .iter()
            .flatten()
            .flatten()
            .flatten()
            .fold(f64::INFINITY, |m, &v| m.min(v))
    }

    pub fn max_abs_difference(&self, other: &BehaviorTable) -> f64 {
        self.probs
            .iter()
            .flatten()
            .flatten()
            .flatten()
            .zip(other.probs.iter().flatten().flatten().flatten())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Displaces every component and evaluates the no-click probabilities.
pub fn behavior_table(
    decomp: &HeraldedDecomposition,
    settings: &MeasurementSettings,
    p_d_e: f64,
    protocol: Protocol,
) -> Result<BehaviorTable> {
    settings.validate()?;
    if !(0.0..=1.0).contains(&p_d_e) {
        return Err(domain(format!("p_d_e = {p_d_e} is outside [0, 1]")));
    }
    let nd = 1.0 - p_d_e;
    let mut p00 = [[0.0; 3]; 2];
    let mut pa0 = [0.0; 2];
    let mut pb0 = [0.0; 3];
    for term in &decomp.terms {
        for (x, &alpha) in settings.alice.iter().enumerate() {
            let s = term.state.displace(&[("A", alpha)])?;
            pa0[x] += term.weight * s.gaussian_click_integral(&["A"])?;
            for (y, &beta) in settings.bob.iter().enumerate() {
                let s2 = s.displace(&[("B", beta)])?;
                p00[x][y] += term.weight * s2.gaussian_click_integral(&["A", "B"])?;
            }
        }
        for (y, &beta) in settings.bob.iter().enumerate() {
            let s = term.state.displace(&[("B", beta)])?;
            pb0[y] += term.weight * s.gaussian_click_integral(&["B"])?;
        }
    }
    let p00 = p00.map(|row| row.map(|v| v * nd * nd));
    BehaviorTable::from_no_click(
        p00,
        pa0.map(|v| v * nd),
        pb0.map(|v| v * nd),
        decomp.success_prob,
        protocol,
    )
}

/// Builds the decomposition for `protocol` and evaluates its behavior.
pub fn protocol_behavior(
    protocol: Protocol,
    params: &ProtocolParams,
    settings: &MeasurementSettings,
) -> Result<BehaviorTable> {
    let decomp = match protocol {
        Protocol::A => herald_protocol_a(params)?,
        Protocol::B => herald_protocol_b(params)?,
        Protocol::Direct => direct_decomposition(params)?,
        Protocol::Bell => {
            return Err(Error::Structural(
                "Bell-state behaviors come from the Fock engine".into(),
            ))
        }
    };
    behavior_table(&decomp, settings, params.p_d_e, protocol)
}

pub fn direct_transmission_behavior(
    params: &ProtocolParams,
    settings: &MeasurementSettings,
) -> Result<BehaviorTable> {
    protocol_behavior(Protocol::Direct, params, settings)
}

/// Alice flips her key-round bit with probability `p_n`; other settings are untouched.
pub fn apply_noisy_preprocessing(table: &BehaviorTable, p_n: f64) -> Result<BehaviorTable> {
    if !(0.0..=0.5).contains(&p_n) {
        return Err(domain(format!("p_n = {p_n} is outside [0, 1/2]")));
    }
    let mut out = *table;
    let cell = table.key_cell();
    for a in 0..2 {
        for b in 0..2 {
            out.probs[KEY_X][KEY_Y][a][b] = (1.0 - p_n) * cell[a][b] + p_n * cell[1 - a][b];
        }
    }
    Ok(out)
}

fn h(p: f64) -> f64 {
    if p <= 0.0 {
        0.0
    } else {
        -p * p.log2()
    }
}

/// `H(A|B)` of a 2×2 joint distribution `cell[a][b]`.
pub fn conditional_entropy_of(cell: &[[f64; 2]; 2]) -> f64 {
    let joint: f64 = cell.iter().flatten().map(|&p| h(p)).sum();
    let bob: f64 = (0..2).map(|b| h(cell[0][b] + cell[1][b])).sum();
    (joint - bob).clamp(0.0, 1.0)
}

/// `H(A|B)` on the key-generation cell of `table`.
pub fn conditional_entropy_ab(table: &BehaviorTable) -> f64 {
    conditional_entropy_of(&table.key_cell())
}
