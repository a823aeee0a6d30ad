//! Derivative-free search over protocol parameters and detection-efficiency
//! thresholds.
//!
//! Everything here maximizes. Objective failures count as `-inf` and are
//! collected as diagnostics instead of aborting a run.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::entropy::{key_rate, EntropyConfig, KeyRateResult};
use crate::error::{domain, Error, Result};
use crate::fock::{bell_state_behavior, BellStateSpec};
use crate::protocols::{protocol_behavior, BehaviorTable, MeasurementSettings, Protocol, ProtocolParams};

/// Strata of the Latin-hypercube design the restart points are drawn from.
/// Restart `k` always uses row `k - 1`, so adding restarts never moves earlier ones.
const DESIGN_ROWS: usize = 64;

/// Upper end of the noisy-preprocessing search range.
pub const MAX_NOISE: f64 = 0.45;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub point: Vec<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NelderMeadOptions {
    pub budget: usize,
    /// Initial simplex edge as a fraction of each parameter range.
    pub initial_step: f64,
    /// Stop once the simplex values span less than this.
    pub value_tol: f64,
    /// ... and every vertex is within this of the best one (per unit range).
    pub point_tol: f64,
}

impl NelderMeadOptions {
    pub fn with_budget(budget: usize) -> Self {
        NelderMeadOptions {
            budget,
            initial_step: 0.2,
            value_tol: 1e-12,
            point_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NelderMeadResult {
    pub point: Vec<f64>,
    pub value: f64,
    pub trace: Vec<Evaluation>,
    /// Messages of objective evaluations that failed.
    pub failures: Vec<String>,
}

impl NelderMeadResult {
    pub fn evaluations(&self) -> usize {
        self.trace.len()
    }
}

fn check_bounds(bounds: &[(f64, f64)]) -> Result<()> {
    for (i, &(lo, hi)) in bounds.iter().enumerate() {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(domain(format!("bounds {i} = [{lo}, {hi}] are not a finite interval")));
        }
    }
    Ok(())
}

/// Folds `x` back into `[lo, hi]` by mirror reflection at the walls.
fn reflect(x: f64, lo: f64, hi: f64) -> f64 {
    let width = hi - lo;
    if width <= 0.0 {
        return lo;
    }
    let period = 2.0 * width;
    let r = (x - lo).rem_euclid(period);
    if r <= width {
        lo + r
    } else {
        lo + period - r
    }
}

fn fold(point: &mut [f64], bounds: &[(f64, f64)]) {
    for (x, &(lo, hi)) in point.iter_mut().zip(bounds) {
        *x = reflect(*x, lo, hi);
    }
}

/// Bounded Nelder–Mead maximization.
///
/// Trial points leaving the box are mirrored back inside. The seed picks the
/// orientation of the initial simplex, so two runs with the same arguments
/// visit the same points.
pub fn nelder_mead<F>(
    mut objective: F,
    start: &[f64],
    bounds: &[(f64, f64)],
    options: &NelderMeadOptions,
    seed: u64,
) -> Result<NelderMeadResult>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    check_bounds(bounds)?;
    if start.len() != bounds.len() {
        return Err(domain(format!(
            "start has {} coordinates but {} bounds were given",
            start.len(),
            bounds.len()
        )));
    }
    if options.budget == 0 {
        return Err(domain("evaluation budget must be at least 1"));
    }
    let n = start.len();
    let mut trace = Vec::new();
    let mut failures = Vec::new();
    let mut eval = |p: &[f64], trace: &mut Vec<Evaluation>| -> f64 {
        let value = match objective(p) {
            Ok(v) if v.is_finite() => v,
            Ok(v) => {
                failures.push(format!("{p:?}: non-finite value {v}"));
                f64::NEG_INFINITY
            }
            Err(e) => {
                failures.push(format!("{p:?}: {e}"));
                f64::NEG_INFINITY
            }
        };
        trace.push(Evaluation {
            point: p.to_vec(),
            value,
        });
        value
    };

    let mut x0 = start.to_vec();
    fold(&mut x0, bounds);
    let f0 = eval(&x0, &mut trace);
    let mut simplex = vec![(x0.clone(), f0)];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        if trace.len() >= options.budget {
            break;
        }
        let (lo, hi) = bounds[i];
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let step = sign * options.initial_step * (hi - lo);
        let mut v = x0.clone();
        // Step into the box when the chosen side has no room.
        v[i] += if (lo..=hi).contains(&(x0[i] + step)) { step } else { -step };
        fold(&mut v, bounds);
        let fv = eval(&v, &mut trace);
        simplex.push((v, fv));
    }
    if simplex.len() < n + 1 || n == 0 {
        return Ok(finish(simplex, trace, failures));
    }

    let scale: Vec<f64> = bounds.iter().map(|&(lo, hi)| (hi - lo).max(f64::MIN_POSITIVE)).collect();
    let by_value = |a: &(Vec<f64>, f64), b: &(Vec<f64>, f64)| b.1.total_cmp(&a.1);
    while trace.len() < options.budget {
        simplex.sort_by(by_value);
        let best = simplex[0].1;
        let worst = simplex[n].1;
        let spread = simplex[1..].iter().flat_map(|(p, _)| {
            p.iter()
                .zip(&simplex[0].0)
                .zip(&scale)
                .map(|((a, b), s)| (a - b).abs() / s)
        });
        let size = spread.fold(0.0f64, f64::max);
        if best.is_finite() && (best - worst).abs() <= options.value_tol && size <= options.point_tol {
            break;
        }

        let mut centroid = vec![0.0; n];
        for (p, _) in &simplex[..n] {
            for (c, x) in centroid.iter_mut().zip(p) {
                *c += x / n as f64;
            }
        }
        let along = |coef: f64| -> Vec<f64> {
            let mut p: Vec<f64> = centroid
                .iter()
                .zip(&simplex[n].0)
                .map(|(c, w)| c + coef * (c - w))
                .collect();
            fold(&mut p, bounds);
            p
        };

        let xr = along(1.0);
        let fr = eval(&xr, &mut trace);
        if fr > simplex[0].1 {
            if trace.len() >= options.budget {
                simplex[n] = (xr, fr);
                break;
            }
            let xe = along(2.0);
            let fe = eval(&xe, &mut trace);
            simplex[n] = if fe > fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr > simplex[n - 1].1 {
            simplex[n] = (xr, fr);
            continue;
        }
        if trace.len() >= options.budget {
            break;
        }
        let outside = fr > worst;
        let xc = along(if outside { 0.5 } else { -0.5 });
        let fc = eval(&xc, &mut trace);
        if (outside && fc >= fr) || (!outside && fc > worst) {
            simplex[n] = (xc, fc);
            continue;
        }
        // Shrink toward the best vertex.
        let anchor = simplex[0].0.clone();
        for vertex in simplex.iter_mut().skip(1) {
            if trace.len() >= options.budget {
                break;
            }
            let mut p: Vec<f64> = anchor
                .iter()
                .zip(&vertex.0)
                .map(|(a, x)| a + 0.5 * (x - a))
                .collect();
            fold(&mut p, bounds);
            let fp = eval(&p, &mut trace);
            *vertex = (p, fp);
        }
    }
    Ok(finish(simplex, trace, failures))
}

fn finish(
    simplex: Vec<(Vec<f64>, f64)>,
    trace: Vec<Evaluation>,
    failures: Vec<String>,
) -> NelderMeadResult {
    // The first evaluation wins ties, which keeps the result independent of sort details.
    let mut best = &trace[0];
    for e in &trace {
        if e.value > best.value {
            best = e;
        }
    }
    debug_assert!(simplex.iter().all(|(_, v)| *v <= best.value));
    NelderMeadResult {
        point: best.point.clone(),
        value: best.value,
        trace,
        failures,
    }
}

/// `rows` points of a Latin hypercube over `bounds`, one point per stratum and axis.
pub fn latin_hypercube(rows: usize, bounds: &[(f64, f64)], seed: u64) -> Result<Vec<Vec<f64>>> {
    check_bounds(bounds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = vec![vec![0.0; bounds.len()]; rows];
    for (axis, &(lo, hi)) in bounds.iter().enumerate() {
        let mut strata: Vec<usize> = (0..rows).collect();
        strata.shuffle(&mut rng);
        for (row, &s) in strata.iter().enumerate() {
            let u = (s as f64 + rng.random::<f64>()) / rows as f64;
            points[row][axis] = lo + u * (hi - lo);
        }
    }
    Ok(points)
}

/// A scalar the key-rate search may vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameter {
    AliceRe(usize),
    AliceIm(usize),
    BobRe(usize),
    BobIm(usize),
    /// Both sources' mean photon number.
    Nbar,
    Tau,
    NoiseFlip,
    BellR,
}

impl std::fmt::Display for Parameter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Parameter::AliceRe(i) => write!(f, "alpha{i}_re"),
            Parameter::AliceIm(i) => write!(f, "alpha{i}_im"),
            Parameter::BobRe(j) => write!(f, "beta{j}_re"),
            Parameter::BobIm(j) => write!(f, "beta{j}_im"),
            Parameter::Nbar => f.write_str("nbar"),
            Parameter::Tau => f.write_str("tau"),
            Parameter::NoiseFlip => f.write_str("p_n"),
            Parameter::BellR => f.write_str("r"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FreeParameter {
    pub parameter: Parameter,
    pub lower: f64,
    pub upper: f64,
}

impl FreeParameter {
    pub fn new(parameter: Parameter, lower: f64, upper: f64) -> Self {
        FreeParameter {
            parameter,
            lower,
            upper,
        }
    }
}

/// A fully specified evaluation point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchPoint {
    pub params: ProtocolParams,
    pub settings: MeasurementSettings,
    pub p_n: f64,
    /// Bell-state source; only read for [`Protocol::Bell`].
    pub bell: BellStateSpec,
}

impl SearchPoint {
    pub fn get(&self, parameter: Parameter) -> f64 {
        match parameter {
            Parameter::AliceRe(i) => self.settings.alice[i].re,
            Parameter::AliceIm(i) => self.settings.alice[i].im,
            Parameter::BobRe(j) => self.settings.bob[j].re,
            Parameter::BobIm(j) => self.settings.bob[j].im,
            Parameter::Nbar => self.params.nbar_a,
            Parameter::Tau => self.params.tau,
            Parameter::NoiseFlip => self.p_n,
            Parameter::BellR => self.bell.r,
        }
    }

    pub fn set(&mut self, parameter: Parameter, value: f64) {
        match parameter {
            Parameter::AliceRe(i) => self.settings.alice[i].re = value,
            Parameter::AliceIm(i) => self.settings.alice[i].im = value,
            Parameter::BobRe(j) => self.settings.bob[j].re = value,
            Parameter::BobIm(j) => self.settings.bob[j].im = value,
            Parameter::Nbar => {
                self.params.nbar_a = value;
                self.params.nbar_b = value;
            }
            Parameter::Tau => self.params.tau = value,
            Parameter::NoiseFlip => self.p_n = value,
            Parameter::BellR => self.bell.r = value,
        }
    }

    pub fn behavior(&self, protocol: Protocol) -> Result<BehaviorTable> {
        match protocol {
            Protocol::Bell => {
                bell_state_behavior(&self.bell, self.params.eta_e, self.params.p_d_e, &self.settings)
            }
            p => protocol_behavior(p, &self.params, &self.settings),
        }
    }

    pub fn key_rate(&self, protocol: Protocol, config: &EntropyConfig) -> Result<KeyRateResult> {
        key_rate(&self.behavior(protocol)?, self.p_n, config)
    }
}

#[derive(Debug, Clone)]
pub struct SearchSpec {
    pub protocol: Protocol,
    /// Starting point; coordinates not listed in `free` stay fixed.
    pub start: SearchPoint,
    pub free: Vec<FreeParameter>,
    /// Evaluations per restart.
    pub budget: usize,
    pub restarts: usize,
    pub seed: u64,
    /// Relaxation used while searching.
    pub search: EntropyConfig,
    /// Relaxation used to re-evaluate the winner, if different.
    pub certify: Option<EntropyConfig>,
    /// Restarts evaluated in parallel.
    pub workers: usize,
}

impl SearchSpec {
    /// Real displacements within `±max_amp` plus `p_n ∈ [0, 0.45]`.
    pub fn displacement_parameters(max_amp: f64) -> Vec<FreeParameter> {
        let mut free: Vec<FreeParameter> = (0..2)
            .map(|i| FreeParameter::new(Parameter::AliceRe(i), -max_amp, max_amp))
            .chain((0..3).map(|j| FreeParameter::new(Parameter::BobRe(j), -max_amp, max_amp)))
            .collect();
        free.push(FreeParameter::new(Parameter::NoiseFlip, 0.0, MAX_NOISE));
        free
    }

    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(domain("evaluation budget must be at least 1"));
        }
        if self.restarts == 0 {
            return Err(domain("at least one restart is required"));
        }
        let bounds = self.bounds();
        check_bounds(&bounds)?;
        for f in &self.free {
            let ok = match f.parameter {
                Parameter::AliceRe(i) | Parameter::AliceIm(i) => i < 2,
                Parameter::BobRe(j) | Parameter::BobIm(j) => j < 3,
                Parameter::Nbar => f.lower >= 0.0,
                Parameter::Tau => f.lower >= 0.0 && f.upper <= 1.0,
                Parameter::NoiseFlip => f.lower >= 0.0 && f.upper <= 0.5,
                Parameter::BellR => f.lower >= 0.0,
            };
            if !ok {
                return Err(domain(format!(
                    "{} range [{}, {}] is not allowed",
                    f.parameter, f.lower, f.upper
                )));
            }
        }
        Ok(())
    }

    pub fn bounds(&self) -> Vec<(f64, f64)> {
        self.free.iter().map(|f| (f.lower, f.upper)).collect()
    }

    pub fn point_at(&self, coords: &[f64]) -> SearchPoint {
        let mut p = self.start;
        for (f, &v) in self.free.iter().zip(coords) {
            p.set(f.parameter, v);
        }
        p
    }

    pub fn coordinates(&self, point: &SearchPoint) -> Vec<f64> {
        self.free.iter().map(|f| point.get(f.parameter)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartReport {
    pub index: usize,
    pub start: Vec<f64>,
    pub best: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Optimum {
    pub point: SearchPoint,
    /// Search-relaxation raw key rate at `point`.
    pub search_value: f64,
    /// Result at the certification relaxation.
    pub result: KeyRateResult,
    pub restarts: Vec<RestartReport>,
}

fn restart_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Multi-start Nelder–Mead on the raw key rate.
///
/// Restart 0 begins at `spec.start`; later ones at successive rows of a
/// seeded Latin hypercube. The best point is re-evaluated with `spec.certify`.
pub fn optimize_keyrate(spec: &SearchSpec) -> Result<Optimum> {
    spec.validate()?;
    let bounds = spec.bounds();
    let objective = |coords: &[f64]| -> Result<f64> {
        Ok(spec.point_at(coords).key_rate(spec.protocol, &spec.search)?.raw_key_rate)
    };

    let restarts: Vec<RestartReport> = if spec.free.is_empty() {
        let value = objective(&[]);
        vec![RestartReport {
            index: 0,
            start: vec![],
            best: vec![],
            value: *value.as_ref().unwrap_or(&f64::NEG_INFINITY),
            evaluations: 1,
            failures: value.err().map(|e| e.to_string()).into_iter().collect(),
        }]
    } else {
        let design = latin_hypercube(DESIGN_ROWS, &bounds, spec.seed)?;
        let starts: Vec<Vec<f64>> = (0..spec.restarts)
            .map(|k| match k {
                0 => spec.coordinates(&spec.start),
                k if k <= DESIGN_ROWS => design[k - 1].clone(),
                k => latin_hypercube(1, &bounds, restart_seed(spec.seed, k)).map(|mut v| v.remove(0)).unwrap_or_default(),
            })
            .collect();
        let options = NelderMeadOptions::with_budget(spec.budget);
        let run = |k: usize| -> RestartReport {
            match nelder_mead(objective, &starts[k], &bounds, &options, restart_seed(spec.seed, k)) {
                Ok(r) => RestartReport {
                    index: k,
                    start: starts[k].clone(),
                    best: r.point.clone(),
                    value: r.value,
                    evaluations: r.evaluations(),
                    failures: r.failures,
                },
                Err(e) => RestartReport {
                    index: k,
                    start: starts[k].clone(),
                    best: starts[k].clone(),
                    value: f64::NEG_INFINITY,
                    evaluations: 0,
                    failures: vec![e.to_string()],
                },
            }
        };
        parallel_map(spec.restarts, spec.workers, run)
    };

    // Ties go to the lowest restart index.
    let best = restarts
        .iter()
        .filter(|r| r.value.is_finite())
        .fold(None::<&RestartReport>, |acc, r| match acc {
            Some(a) if a.value >= r.value => Some(a),
            _ => Some(r),
        })
        .ok_or_else(|| {
            let lines: Vec<String> = restarts
                .iter()
                .map(|r| format!("restart {}: {}", r.index, r.failures.join("; ")))
                .collect();
            Error::Optimizer(format!("every restart failed\n{}", lines.join("\n")))
        })?;
    let point = spec.point_at(&best.best);
    let config = spec.certify.as_ref().unwrap_or(&spec.search);
    let result = point.key_rate(spec.protocol, config)?;
    Ok(Optimum {
        point,
        search_value: best.value,
        result,
        restarts,
    })
}

/// Runs `job(0..n)` on up to `workers` threads and returns results in index order.
pub fn parallel_map<T, F>(n: usize, workers: usize, job: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let workers = workers.clamp(1, n.max(1));
    if workers == 1 {
        return (0..n).map(job).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                if k >= n {
                    break;
                }
                let value = job(k);
                slots.lock().expect("worker panicked")[k] = Some(value);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|v| v.expect("every index is filled"))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdQuery {
    pub lower: f64,
    pub upper: f64,
    pub tolerance: f64,
    /// Evenly spaced probes taken before bisecting; they expose non-monotone predicates.
    pub scan: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub value: f64,
    pub holds: bool,
    /// Whatever number backs the decision (e.g. the optimized key rate).
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub threshold: f64,
    pub bracket: (f64, f64),
    pub probes: Vec<Probe>,
}

pub fn probe_table(probes: &[Probe]) -> String {
    let mut sorted = probes.to_vec();
    sorted.sort_by(|a, b| a.value.total_cmp(&b.value));
    sorted
        .iter()
        .map(|p| format!("{:>12.6} {:>5} {:>13.6e}", p.value, p.holds, p.score))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Bisection for the smallest value where `predicate` holds.
///
/// The predicate must be false at `lower` and true at `upper`; it returns the
/// decision and a score for the probe table.
pub fn threshold_search<F>(query: &ThresholdQuery, mut predicate: F) -> Result<ThresholdReport>
where
    F: FnMut(f64) -> Result<(bool, f64)>,
{
    let ThresholdQuery {
        lower,
        upper,
        tolerance,
        scan,
    } = *query;
    if !(lower.is_finite() && upper.is_finite() && lower < upper && tolerance > 0.0) {
        return Err(domain(format!(
            "bracket [{lower}, {upper}] with tolerance {tolerance} is not usable"
        )));
    }
    let mut probes = Vec::new();
    let mut ask = |v: f64, probes: &mut Vec<Probe>| -> Result<bool> {
        let (holds, score) = predicate(v)?;
        probes.push(Probe {
            value: v,
            holds,
            score,
        });
        Ok(holds)
    };
    let top = ask(upper, &mut probes)?;
    let bottom = ask(lower, &mut probes)?;
    if !top || bottom {
        return Err(Error::Optimizer(format!(
            "predicate must be false at {lower} and true at {upper}\n{}",
            probe_table(&probes)
        )));
    }
    let (mut lo, mut hi) = (lower, upper);
    for k in 1..=scan {
        let v = lower + (upper - lower) * k as f64 / (scan + 1) as f64;
        ask(v, &mut probes)?;
    }
    if scan > 0 {
        let mut sorted = probes.clone();
        sorted.sort_by(|a, b| a.value.total_cmp(&b.value));
        let first_true = sorted.iter().position(|p| p.holds).expect("upper holds");
        if sorted[first_true..].iter().any(|p| !p.holds) {
            return Err(Error::Optimizer(format!(
                "predicate is not monotone over the bracket\n{}",
                probe_table(&probes)
            )));
        }
        lo = sorted[first_true - 1].value;
        hi = sorted[first_true].value;
    }
    while hi - lo > tolerance {
        let mid = 0.5 * (lo + hi);
        if ask(mid, &mut probes)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(ThresholdReport {
        threshold: 0.5 * (lo + hi),
        bracket: (lo, hi),
        probes,
    })
}

/// Quantity scanned by [`keyrate_threshold`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scanned {
    EtaE,
    EtaD,
    /// Channel transmissivity of both arms.
    Eta,
}

impl Scanned {
    pub fn apply(self, params: &mut ProtocolParams, value: f64) {
        match self {
            Scanned::EtaE => params.eta_e = value,
            Scanned::EtaD => params.eta_d = value,
            Scanned::Eta => {
                params.eta_a = value;
                params.eta_b = value;
            }
        }
    }
}

/// Smallest `scanned` value with a positive optimized key rate.
///
/// Each probe re-optimizes the free parameters; the search starts from the
/// best point of the nearest probe above it where the key rate was positive.
pub fn keyrate_threshold(
    spec: &SearchSpec,
    scanned: Scanned,
    query: &ThresholdQuery,
) -> Result<(ThresholdReport, Vec<(f64, Option<Optimum>)>)> {
    let mut optima: Vec<(f64, Option<Optimum>)> = Vec::new();
    let report = threshold_search(query, |v| {
        let mut probe = spec.clone();
        scanned.apply(&mut probe.start.params, v);
        let warm = optima
            .iter()
            .filter(|(x, o)| *x >= v && o.as_ref().is_some_and(|o| o.result.raw_key_rate > 0.0))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .and_then(|(_, o)| o.as_ref());
        if let Some(o) = warm {
            let mut start = o.point;
            scanned.apply(&mut start.params, v);
            probe.start = start;
        }
        match optimize_keyrate(&probe) {
            Ok(o) => {
                let k = o.result.raw_key_rate;
                optima.push((v, Some(o)));
                Ok((k > 0.0, k))
            }
            Err(Error::Optimizer(_)) => {
                optima.push((v, None));
                Ok((false, f64::NEG_INFINITY))
            }
            Err(e) => Err(e),
        }
    })?;
    Ok((report, optima))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn reflect_folds_into_box() {
        assert_abs_diff_eq!(reflect(1.2, 0.0, 1.0), 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(reflect(-0.3, 0.0, 1.0), 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(reflect(2.5, 0.0, 1.0), 0.5, epsilon = 1e-15);
        assert_eq!(reflect(7.0, 2.0, 2.0), 2.0);
    }

    #[test]
    fn one_dimensional_maximum() {
        let r = nelder_mead(
            |x| Ok(-(x[0] - 0.3).powi(2)),
            &[0.9],
            &[(0.0, 1.0)],
            &NelderMeadOptions::with_budget(200),
            1,
        )
        .unwrap();
        assert_abs_diff_eq!(r.point[0], 0.3, epsilon = 1e-4);
    }

    #[test]
    fn two_dimensional_quadratic() {
        let f = |x: &[f64]| Ok(1.0 - (x[0] + 0.4).powi(2) - 3.0 * (x[1] - 0.7).powi(2) - (x[0] + 0.4) * (x[1] - 0.7));
        let r = nelder_mead(f, &[0.5, -0.5], &[(-1.0, 1.0), (-1.0, 1.0)], &NelderMeadOptions::with_budget(400), 5).unwrap();
        assert_abs_diff_eq!(r.point[0], -0.4, epsilon = 1e-4);
        assert_abs_diff_eq!(r.point[1], 0.7, epsilon = 1e-4);
        assert_abs_diff_eq!(r.value, 1.0, epsilon = 1e-8);
    }

    #[test]
    fn maximum_on_the_wall() {
        let r = nelder_mead(|x| Ok(x[0] + x[1]), &[0.1, 0.2], &[(0.0, 1.0), (0.0, 2.0)], &NelderMeadOptions::with_budget(300), 3).unwrap();
        assert!(r.trace.iter().all(|e| e.point[0] <= 1.0 && e.point[1] <= 2.0));
        assert_abs_diff_eq!(r.value, 3.0, epsilon = 1e-4);
    }

    #[test]
    fn failures_count_as_minus_infinity() {
        let r = nelder_mead(
            |x| {
                if x[0] > 0.5 {
                    Err(Error::Solver("boom".into()))
                } else {
                    Ok(x[0])
                }
            },
            &[0.1],
            &[(0.0, 1.0)],
            &NelderMeadOptions::with_budget(100),
            9,
        )
        .unwrap();
        assert!(!r.failures.is_empty());
        assert!(r.value <= 0.5 && r.value > 0.45);
    }

    #[test]
    fn deterministic_for_a_seed() {
        let f = |x: &[f64]| Ok((3.0 * x[0]).sin() * (2.0 * x[1]).cos());
        let opts = NelderMeadOptions::with_budget(60);
        let a = nelder_mead(f, &[0.2, 0.3], &[(-2.0, 2.0), (-2.0, 2.0)], &opts, 42).unwrap();
        let b = nelder_mead(f, &[0.2, 0.3], &[(-2.0, 2.0), (-2.0, 2.0)], &opts, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.evaluations() <= 60);
    }

    #[test]
    fn budget_is_respected() {
        let r = nelder_mead(|x| Ok(-x[0] * x[0]), &[0.7], &[(-1.0, 1.0)], &NelderMeadOptions::with_budget(1), 0).unwrap();
        assert_eq!(r.evaluations(), 1);
        assert!(nelder_mead(|_| Ok(0.0), &[0.0], &[(1.0, 0.0)], &NelderMeadOptions::with_budget(5), 0).is_err());
    }

    #[test]
    fn latin_hypercube_strata() {
        let pts = latin_hypercube(10, &[(0.0, 1.0), (-5.0, 5.0)], 7).unwrap();
        for axis in 0..2 {
            let (lo, hi) = [(0.0, 1.0), (-5.0, 5.0)][axis];
            let mut seen = [false; 10];
            for p in &pts {
                let s = (((p[axis] - lo) / (hi - lo)) * 10.0).floor() as usize;
                assert!(!seen[s]);
                seen[s] = true;
            }
        }
    }

    #[test]
    fn toy_threshold() {
        let q = ThresholdQuery {
            lower: 0.0,
            upper: 1.0,
            tolerance: 1e-3,
            scan: 3,
        };
        let r = threshold_search(&q, |x| Ok((x > 0.5, x - 0.5))).unwrap();
        assert!((r.threshold - 0.5).abs() <= 1e-3);
        assert!(r.bracket.1 - r.bracket.0 <= 1e-3);
    }

    #[test]
    fn threshold_reports_bad_brackets() {
        let q = ThresholdQuery {
            lower: 0.0,
            upper: 1.0,
            tolerance: 1e-3,
            scan: 0,
        };
        assert!(matches!(threshold_search(&q, |x| Ok((x < 0.5, 0.0))), Err(Error::Optimizer(_))));
        let wavy = ThresholdQuery { scan: 9, ..q };
        let err = threshold_search(&wavy, |x| Ok(((x > 0.25 && x < 0.45) || x > 0.8, 0.0))).unwrap_err();
        assert!(err.to_string().contains("not monotone"));
    }

    #[test]
    fn parallel_map_keeps_order() {
        let v = parallel_map(7, 3, |k| k * k);
        assert_eq!(v, vec![0, 1, 4, 9, 16, 25, 36]);
    }
}
