//! Output records: sweep CSV rows, checkpoints and JSON reports.

use std::io::Write;
use std::path::{Path, PathBuf};

use heraldkey_core::entropy::KeyRateResult;
use heraldkey_core::optimizer::SearchPoint;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SWEEP_FORMAT: &str = "# heraldkey sweep v1";
pub const CHECKPOINT_FORMAT: &str = "heraldkey-checkpoint/1";
pub const KEYRATE_FORMAT: &str = "heraldkey-keyrate/1";
pub const THRESHOLD_FORMAT: &str = "heraldkey-threshold/1";
pub const ORACLE_FORMAT: &str = "heraldkey-oracle/1";

/// Largest solver residual a reported key rate may carry.
pub const RESIDUAL_CEILING: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    /// Solved, but residuals exceed [`RESIDUAL_CEILING`]; numbers are withheld.
    Uncertified,
    Failed,
}

/// One row of a sweep CSV. Column order is the field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub axis: String,
    pub value: f64,
    pub status: Status,
    pub key_rate: Option<f64>,
    pub raw_key_rate: Option<f64>,
    pub entropy_bound: Option<f64>,
    pub h_ab: Option<f64>,
    pub success_prob: Option<f64>,
    pub p_n: f64,
    pub nbar_a: f64,
    pub nbar_b: f64,
    pub eta_a: f64,
    pub eta_b: f64,
    pub eta_e: f64,
    pub tau: f64,
    pub r: f64,
    pub alpha0_re: f64,
    pub alpha0_im: f64,
    pub alpha1_re: f64,
    pub alpha1_im: f64,
    pub beta0_re: f64,
    pub beta0_im: f64,
    pub beta1_re: f64,
    pub beta1_im: f64,
    pub beta2_re: f64,
    pub beta2_im: f64,
    pub m: usize,
    pub level: usize,
    pub max_residual: Option<f64>,
    pub message: String,
    /// Run metadata; the only column that differs between identical runs.
    pub wall_time_s: f64,
}

impl SweepRecord {
    pub fn new(
        axis: &str,
        value: f64,
        point: &SearchPoint,
        m: usize,
        level: usize,
        outcome: Result<&KeyRateResult, String>,
        wall_time_s: f64,
    ) -> Self {
        let s = &point.settings;
        let mut rec = SweepRecord {
            axis: axis.to_string(),
            value,
            status: Status::Failed,
            key_rate: None,
            raw_key_rate: None,
            entropy_bound: None,
            h_ab: None,
            success_prob: None,
            p_n: point.p_n,
            nbar_a: point.params.nbar_a,
            nbar_b: point.params.nbar_b,
            eta_a: point.params.eta_a,
            eta_b: point.params.eta_b,
            eta_e: point.params.eta_e,
            tau: point.params.tau,
            r: point.bell.r,
            alpha0_re: s.alice[0].re,
            alpha0_im: s.alice[0].im,
            alpha1_re: s.alice[1].re,
            alpha1_im: s.alice[1].im,
            beta0_re: s.bob[0].re,
            beta0_im: s.bob[0].im,
            beta1_re: s.bob[1].re,
            beta1_im: s.bob[1].im,
            beta2_re: s.bob[2].re,
            beta2_im: s.bob[2].im,
            m,
            level,
            max_residual: None,
            message: String::new(),
            wall_time_s,
        };
        match outcome {
            Ok(k) => {
                let residual = k.max_residual();
                rec.max_residual = Some(residual);
                if residual <= RESIDUAL_CEILING {
                    rec.status = Status::Ok;
                    rec.key_rate = Some(k.key_rate);
                    rec.raw_key_rate = Some(k.raw_key_rate);
                    rec.entropy_bound = Some(k.entropy.bound);
                    rec.h_ab = Some(k.h_ab);
                    rec.success_prob = Some(k.success_prob);
                } else {
                    rec.status = Status::Uncertified;
                    rec.message = format!("solver residual {residual:.2e} above {RESIDUAL_CEILING:.0e}");
                }
            }
            Err(msg) => rec.message = msg,
        }
        rec
    }
}

/// Column names of the sweep CSV, in order.
pub fn sweep_columns() -> Vec<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let dummy = SweepRecord::new(
        "",
        0.0,
        &SearchPoint {
            params: Default::default(),
            settings: heraldkey_core::protocols::MeasurementSettings::zero(),
            p_n: 0.0,
            bell: heraldkey_core::fock::BellStateSpec {
                kind: heraldkey_core::fock::BellKind::PhotonNumber,
                r: 1.0,
            },
        },
        2,
        2,
        Err(String::new()),
        0.0,
    );
    w.serialize(&dummy).expect("in-memory write");
    let bytes = w.into_inner().expect("in-memory write");
    let text = String::from_utf8(bytes).expect("csv is utf-8");
    text.lines().next().unwrap_or_default().split(',').map(str::to_string).collect()
}

pub fn sweep_csv(records: &[SweepRecord]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r).map_err(|e| CliError::Numerical(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Numerical(format!("csv: {e}")))?;
    let mut out = String::from(SWEEP_FORMAT);
    out.push('\n');
    if records.is_empty() {
        out.push_str(&sweep_columns().join(","));
        out.push('\n');
    } else {
        out.push_str(&String::from_utf8(bytes).expect("csv is utf-8"));
    }
    Ok(out)
}

pub fn read_sweep_csv(text: &str) -> Result<Vec<SweepRecord>, CliError> {
    let body = text
        .strip_prefix(SWEEP_FORMAT)
        .and_then(|t| t.strip_prefix('\n'))
        .ok_or_else(|| CliError::Config(format!("missing '{SWEEP_FORMAT}' version line")))?;
    csv::Reader::from_reader(body.as_bytes())
        .deserialize()
        .collect::<Result<Vec<SweepRecord>, _>>()
        .map_err(|e| CliError::Config(format!("sweep csv: {e}")))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    /// Resolved job description; a resume only proceeds if it matches.
    pub job: serde_json::Value,
    /// Completed points as `(index, record)`.
    pub records: Vec<(usize, SweepRecord)>,
}

/// Writes `contents` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    let mut tmp = PathBuf::from(path);
    let name = path
        .file_name()
        .map(|n| format!(".{}.tmp", n.to_string_lossy()))
        .unwrap_or_else(|| ".tmp".into());
    tmp.set_file_name(name);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("reports serialize")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_sweep_still_has_header() {
        let text = sweep_csv(&[]).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(SWEEP_FORMAT));
        assert!(lines.next().unwrap().starts_with("axis,value,status,"));
        assert!(read_sweep_csv(&text).unwrap().is_empty());
        assert!(read_sweep_csv("axis,value\n").is_err());
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.json");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
