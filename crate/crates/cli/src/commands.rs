//! The five subcommands, as functions returning serializable reports.

use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use heraldkey_core::entropy::{assemble, EntropyConfig, KeyRateResult, NodeReport};
use heraldkey_core::fock::oracle_behavior_table;
use heraldkey_core::optimizer::{
    keyrate_threshold, optimize_keyrate, parallel_map, probe_table, Probe, SearchPoint,
};
use heraldkey_core::protocols::{protocol_behavior, BehaviorTable, Protocol};
use serde::Serialize;

use crate::config::{Axis, Resolved};
use crate::record::{
    sweep_csv, to_json, write_atomic, Checkpoint, Status, SweepRecord, CHECKPOINT_FORMAT,
    KEYRATE_FORMAT, ORACLE_FORMAT, RESIDUAL_CEILING, THRESHOLD_FORMAT,
};
use crate::CliError;

/// Optimizes the free parameters (if any) and certifies the winner.
pub fn evaluate(resolved: &Resolved, point: &SearchPoint) -> Result<(SearchPoint, KeyRateResult), CliError> {
    let mut spec = resolved.search.clone();
    spec.start = *point;
    if spec.free.is_empty() {
        let config = spec.certify.as_ref().unwrap_or(&spec.search);
        Ok((*point, point.key_rate(spec.protocol, config)?))
    } else {
        let o = optimize_keyrate(&spec)?;
        Ok((o.point, o.result))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct KeyRateReport {
    pub format: &'static str,
    pub protocol: Protocol,
    pub profile: crate::config::ProfileName,
    pub seed: u64,
    pub eta_override: bool,
    pub status: Status,
    pub point: SearchPoint,
    pub key_rate: Option<f64>,
    pub raw_key_rate: Option<f64>,
    pub entropy_bound: Option<f64>,
    /// Bound that holds whatever the solver residuals are.
    pub certified_entropy_bound: Option<f64>,
    pub h_ab: Option<f64>,
    pub success_prob: Option<f64>,
    pub m: usize,
    pub level: usize,
    pub max_residual: f64,
    pub nodes: Vec<NodeReport>,
}

impl KeyRateReport {
    pub fn summary(&self) -> String {
        match self.status {
            Status::Ok => format!(
                "protocol {} K = {:.6e} (raw {:.6e}) H(A|E) >= {:.6} H(A|B) = {:.6} P = {:.4e} [m = {}, level = {}, residual {:.1e}]",
                self.protocol,
                self.key_rate.unwrap_or(f64::NAN),
                self.raw_key_rate.unwrap_or(f64::NAN),
                self.entropy_bound.unwrap_or(f64::NAN),
                self.h_ab.unwrap_or(f64::NAN),
                self.success_prob.unwrap_or(f64::NAN),
                self.m,
                self.level,
                self.max_residual
            ),
            _ => format!(
                "protocol {}: no certified key rate (residual {:.1e} above {:.0e}) [m = {}, level = {}]",
                self.protocol, self.max_residual, RESIDUAL_CEILING, self.m, self.level
            ),
        }
    }
}

pub fn keyrate(resolved: &Resolved) -> Result<KeyRateReport, CliError> {
    let (point, k) = evaluate(resolved, &resolved.point)?;
    let residual = k.max_residual();
    let ok = residual <= RESIDUAL_CEILING;
    let keep = |v: f64| ok.then_some(v);
    Ok(KeyRateReport {
        format: KEYRATE_FORMAT,
        protocol: resolved.config.protocol,
        profile: resolved.profile.name,
        seed: resolved.seed,
        eta_override: resolved.eta_override,
        status: if ok { Status::Ok } else { Status::Uncertified },
        point,
        key_rate: keep(k.key_rate),
        raw_key_rate: keep(k.raw_key_rate),
        entropy_bound: keep(k.entropy.bound),
        certified_entropy_bound: keep(k.entropy.certified_bound),
        h_ab: keep(k.h_ab),
        success_prob: keep(k.success_prob),
        m: k.m(),
        level: k.level(),
        max_residual: residual,
        nodes: k.entropy.nodes.clone(),
    })
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub records: Vec<SweepRecord>,
    pub csv_path: PathBuf,
    /// Points taken from the checkpoint rather than computed.
    pub resumed: usize,
}

fn job_description(resolved: &Resolved) -> serde_json::Value {
    let mut cfg = resolved.config.clone();
    cfg.output_dir = None;
    cfg.workers = None;
    serde_json::json!({
        "config": cfg,
        "profile": resolved.profile,
        "seed": resolved.seed,
    })
}

pub fn checkpoint_path(csv_path: &Path) -> PathBuf {
    let mut p = csv_path.as_os_str().to_owned();
    p.push(".checkpoint.json");
    PathBuf::from(p)
}

/// Runs the configured sweep, checkpointing after every point.
///
/// With `resume`, points stored in a matching checkpoint are reused. When
/// `stop_after` is set, at most that many new points are computed (used to
/// simulate interruptions).
pub fn sweep(resolved: &Resolved, resume: bool, stop_after: Option<usize>) -> Result<SweepOutcome, CliError> {
    let sw = resolved
        .config
        .sweep
        .clone()
        .ok_or_else(|| CliError::Config("sweep needs a [sweep] section".into()))?;
    if sw.values.is_empty() {
        return Err(CliError::Config("sweep.values is empty".into()));
    }
    std::fs::create_dir_all(&resolved.output_dir)?;
    let csv_path = resolved.output_dir.join(&sw.output);
    let ck_path = checkpoint_path(&csv_path);
    let job = job_description(resolved);

    let mut done: Vec<(usize, SweepRecord)> = Vec::new();
    if resume && ck_path.exists() {
        let text = std::fs::read_to_string(&ck_path)?;
        let ck: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", ck_path.display())))?;
        if ck.format != CHECKPOINT_FORMAT || ck.job != job {
            return Err(CliError::Config(format!(
                "{} belongs to a different job; remove it or drop --resume",
                ck_path.display()
            )));
        }
        done = ck.records;
    }
    let resumed = done.len();
    let pending: Vec<usize> = (0..sw.values.len())
        .filter(|i| !done.iter().any(|(j, _)| j == i))
        .take(stop_after.unwrap_or(usize::MAX))
        .collect();

    let state = Mutex::new(done);
    let write_checkpoint = |records: &Vec<(usize, SweepRecord)>| -> Result<(), CliError> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            job: job.clone(),
            records: records.clone(),
        };
        write_atomic(&ck_path, to_json(&ck).as_bytes())
    };
    let results = parallel_map(pending.len(), resolved.workers, |k| -> Result<(), CliError> {
        let index = pending[k];
        let value = sw.values[index];
        let record = sweep_point(resolved, sw.axis, value);
        let mut guard = state.lock().expect("sweep worker panicked");
        guard.push((index, record));
        write_checkpoint(&guard)
    });
    for r in results {
        r?;
    }
    let mut done = state.into_inner().expect("sweep worker panicked");
    done.sort_by_key(|(i, _)| *i);
    let records: Vec<SweepRecord> = done.into_iter().map(|(_, r)| r).collect();
    if records.len() == sw.values.len() {
        write_atomic(&csv_path, sweep_csv(&records)?.as_bytes())?;
    }
    Ok(SweepOutcome {
        records,
        csv_path,
        resumed,
    })
}

pub fn sweep_point(resolved: &Resolved, axis: Axis, value: f64) -> SweepRecord {
    let start = Instant::now();
    let mut point = resolved.point;
    axis.apply(&mut point, value);
    let (m, level) = (resolved.profile.m, resolved.profile.level);
    match evaluate(resolved, &point) {
        Ok((best, k)) => SweepRecord::new(axis.name(), value, &best, m, level, Ok(&k), start.elapsed().as_secs_f64()),
        Err(e) => SweepRecord::new(axis.name(), value, &point, m, level, Err(e.to_string()), start.elapsed().as_secs_f64()),
    }
}

/// Failed and uncertified rows of a sweep.
pub fn failures(records: &[SweepRecord]) -> usize {
    records.iter().filter(|r| r.status != Status::Ok).count()
}

#[derive(Debug, Clone, Serialize)]
pub struct ThresholdOutput {
    pub format: &'static str,
    pub protocol: Protocol,
    pub scanned: heraldkey_core::optimizer::Scanned,
    pub threshold: f64,
    pub bracket: (f64, f64),
    pub tolerance: f64,
    pub m: usize,
    pub level: usize,
    pub probes: Vec<Probe>,
    /// Best point found at each probe that produced one.
    pub points: Vec<(f64, SearchPoint)>,
}

impl ThresholdOutput {
    pub fn table(&self) -> String {
        format!("{:>12} {:>5} {:>13}\n{}", "value", "key", "K", probe_table(&self.probes))
    }
}

pub fn threshold(resolved: &Resolved) -> Result<ThresholdOutput, CliError> {
    let th = resolved
        .config
        .threshold
        .clone()
        .ok_or_else(|| CliError::Config("threshold needs a [threshold] section".into()))?;
    let query = th.query();
    let (report, optima) = keyrate_threshold(&resolved.search, th.scanned, &query)?;
    Ok(ThresholdOutput {
        format: THRESHOLD_FORMAT,
        protocol: resolved.config.protocol,
        scanned: th.scanned,
        threshold: report.threshold,
        bracket: report.bracket,
        tolerance: th.tolerance,
        m: resolved.profile.m,
        level: resolved.profile.level,
        probes: report.probes,
        points: optima
            .into_iter()
            .filter_map(|(v, o)| o.map(|o| (v, o.point)))
            .collect(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleOutput {
    pub format: &'static str,
    pub protocol: Protocol,
    pub cutoff: usize,
    pub leaked: f64,
    pub max_deviation: f64,
    pub gaussian: BehaviorTable,
    pub fock: BehaviorTable,
}

impl OracleOutput {
    pub fn table(&self) -> String {
        let mut lines = vec![format!(
            "{:>3} {:>3} {:>3} {:>3} {:>18} {:>18} {:>10}",
            "x", "y", "a", "b", "gaussian", "fock", "|diff|"
        )];
        for x in 0..2 {
            for y in 0..3 {
                for a in 0..2 {
                    for b in 0..2 {
                        let g = self.gaussian.get(a, b, x, y);
                        let f = self.fock.get(a, b, x, y);
                        lines.push(format!(
                            "{x:>3} {y:>3} {a:>3} {b:>3} {g:>18.12e} {f:>18.12e} {:>10.2e}",
                            (g - f).abs()
                        ));
                    }
                }
            }
        }
        lines.push(format!(
            "success probability {:.12e} vs {:.12e}; max deviation {:.3e} (cutoff {}, leaked {:.1e})",
            self.gaussian.success_prob, self.fock.success_prob, self.max_deviation, self.cutoff, self.leaked
        ));
        lines.join("\n")
    }
}

pub fn oracle(resolved: &Resolved, cutoff: Option<usize>) -> Result<OracleOutput, CliError> {
    let protocol = resolved.config.protocol;
    if protocol == Protocol::Bell {
        return Err(CliError::Config(
            "the bell protocol has no Gaussian pipeline to compare against".into(),
        ));
    }
    let p = &resolved.point;
    let gaussian = protocol_behavior(protocol, &p.params, &p.settings)?;
    let (fock, report) = oracle_behavior_table(&p.params, &p.settings, protocol, cutoff)?;
    Ok(OracleOutput {
        format: ORACLE_FORMAT,
        protocol,
        cutoff: report.cutoff,
        leaked: report.leaked,
        max_deviation: gaussian.max_abs_difference(&fock),
        gaussian,
        fock,
    })
}

/// Writes one SDPA file per interior quadrature node of the configured point.
pub fn export_sdp(resolved: &Resolved, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let p = &resolved.point;
    let behavior = p.behavior(resolved.config.protocol)?;
    let config = EntropyConfig::new(resolved.profile.m, resolved.profile.level);
    let problem = assemble(&behavior, p.p_n, &config)?;
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for node in &problem.nodes {
        let text = heraldkey_sdp::sdpa::to_string(&node.sdp)
            .map_err(|e| CliError::Numerical(e.to_string()))?;
        let path = dir.join(format!("node{}_t{:.6}.dat-s", node.node, node.t));
        write_atomic(&path, text.as_bytes())?;
        paths.push(path);
    }
    Ok(paths)
}
