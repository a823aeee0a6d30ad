//! Run configuration: a TOML file, validated strictly, resolved against a profile.

use std::path::{Path, PathBuf};

use heraldkey_core::entropy::EntropyConfig;
use heraldkey_core::fock::{BellKind, BellStateSpec};
use heraldkey_core::optimizer::{
    FreeParameter, Parameter, Scanned, SearchPoint, SearchSpec, ThresholdQuery, MAX_NOISE,
};
use heraldkey_core::protocols::{fiber_transmissivity, MeasurementSettings, Protocol, ProtocolParams};
use nalgebra::Complex;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const PROTOCOL_A_EXAMPLE: &str = include_str!("../configs/protocol_a.toml");
pub const PROTOCOL_B_EXAMPLE: &str = include_str!("../configs/protocol_b.toml");
pub const DIRECT_EXAMPLE: &str = include_str!("../configs/direct.toml");
pub const BELL_EXAMPLE: &str = include_str!("../configs/bell.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ProfileName {
    Ci,
    Paper,
}

/// Relaxation and search effort bundled under a name.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Profile {
    pub name: ProfileName,
    pub search_m: usize,
    pub m: usize,
    pub level: usize,
    pub restarts: usize,
    pub budget: usize,
}

impl Profile {
    pub fn get(name: ProfileName) -> Profile {
        match name {
            ProfileName::Ci => Profile {
                name,
                search_m: 2,
                m: 2,
                level: 2,
                restarts: 1,
                budget: 40,
            },
            ProfileName::Paper => Profile {
                name,
                search_m: 2,
                m: 8,
                level: 2,
                restarts: 8,
                budget: 150,
            },
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsSection {
    /// Sets both sources.
    pub nbar: Option<f64>,
    pub nbar_a: Option<f64>,
    pub nbar_b: Option<f64>,
    /// Fiber length from each party to the station; `eta = 10^(-0.02 L)`.
    pub distance_km: Option<f64>,
    /// Overrides the distance mapping for both arms.
    pub eta: Option<f64>,
    pub eta_a: Option<f64>,
    pub eta_b: Option<f64>,
    pub eta_d: Option<f64>,
    pub eta_e: Option<f64>,
    pub p_d: Option<f64>,
    pub p_d_e: Option<f64>,
    pub tau: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SettingsSection {
    pub alice: Option<[f64; 2]>,
    pub bob: Option<[f64; 3]>,
    pub alice_im: Option<[f64; 2]>,
    pub bob_im: Option<[f64; 3]>,
    pub p_n: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BellSection {
    pub kind: BellKind,
    #[serde(default = "one")]
    pub r: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Knob {
    Displacements,
    PN,
    Nbar,
    Tau,
    R,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSection {
    #[serde(default)]
    pub optimize: Vec<Knob>,
    /// Search imaginary parts of the displacements as well.
    #[serde(default)]
    pub complex: bool,
    #[serde(default = "default_amplitude")]
    pub max_amplitude: f64,
    #[serde(default = "default_nbar_max")]
    pub nbar_max: f64,
    #[serde(default = "default_r_max")]
    pub r_max: f64,
    pub budget: Option<usize>,
    pub restarts: Option<usize>,
}

fn default_amplitude() -> f64 {
    1.0
}
fn default_nbar_max() -> f64 {
    0.2
}
fn default_r_max() -> f64 {
    3.0
}

impl Default for SearchSection {
    fn default() -> Self {
        SearchSection {
            optimize: Vec::new(),
            complex: false,
            max_amplitude: default_amplitude(),
            nbar_max: default_nbar_max(),
            r_max: default_r_max(),
            budget: None,
            restarts: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    DistanceKm,
    EtaE,
    Nbar,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::DistanceKm => "distance_km",
            Axis::EtaE => "eta_e",
            Axis::Nbar => "nbar",
        }
    }

    pub fn apply(self, point: &mut SearchPoint, value: f64) {
        match self {
            Axis::DistanceKm => {
                let eta = fiber_transmissivity(value);
                point.params.eta_a = eta;
                point.params.eta_b = eta;
            }
            Axis::EtaE => point.params.eta_e = value,
            Axis::Nbar => point.set(Parameter::Nbar, value),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub axis: Axis,
    pub values: Vec<f64>,
    /// File name inside the output directory.
    #[serde(default = "default_sweep_file")]
    pub output: String,
}

fn default_sweep_file() -> String {
    "sweep.csv".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdSection {
    pub scanned: Scanned,
    pub lower: f64,
    pub upper: f64,
    #[serde(default = "default_threshold_tol")]
    pub tolerance: f64,
    #[serde(default)]
    pub scan: usize,
}

fn default_threshold_tol() -> f64 {
    1e-3
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificationSection {
    pub m: Option<usize>,
    pub level: Option<usize>,
    pub search_m: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub protocol: Protocol,
    pub profile: Option<ProfileName>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub params: ParamsSection,
    #[serde(default)]
    pub settings: SettingsSection,
    pub bell: Option<BellSection>,
    #[serde(default)]
    pub search: SearchSection,
    pub sweep: Option<SweepSection>,
    pub threshold: Option<ThresholdSection>,
    #[serde(default)]
    pub certification: CertificationSection,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub profile: Option<ProfileName>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub output_dir: Option<PathBuf>,
}

/// Everything a command needs, with defaults filled in and ranges checked.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: RunConfig,
    pub profile: Profile,
    pub seed: u64,
    pub workers: usize,
    pub output_dir: PathBuf,
    pub point: SearchPoint,
    /// True when a transmissivity was given directly instead of via distance.
    pub eta_override: bool,
    pub search: SearchSpec,
}

pub const DEFAULT_ALICE: [f64; 2] = [-0.1, 0.55];
pub const DEFAULT_BOB: [f64; 3] = [0.5, -0.25, 0.1];

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig, CliError> {
        toml::from_str(text).map_err(|e| bad(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| bad(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| bad(format!("{}: {e}", path.display())))
    }

    pub fn resolve(self, overrides: &Overrides) -> Result<Resolved, CliError> {
        let profile_name = overrides.profile.or(self.profile).unwrap_or(ProfileName::Ci);
        let mut profile = Profile::get(profile_name);
        if let Some(m) = self.certification.m {
            profile.m = m;
        }
        if let Some(level) = self.certification.level {
            profile.level = level;
        }
        if let Some(m) = self.certification.search_m {
            profile.search_m = m;
        }
        if profile.m < 2 || profile.search_m < 2 || !(1..=2).contains(&profile.level) {
            return Err(bad(format!(
                "certification needs m >= 2 and level 1 or 2, got m = {}, search_m = {}, level = {}",
                profile.m, profile.search_m, profile.level
            )));
        }
        if let Some(b) = self.search.budget {
            profile.budget = b;
        }
        if let Some(r) = self.search.restarts {
            profile.restarts = r;
        }

        let (params, eta_override) = self.params.resolve()?;
        let s = &self.settings;
        let alice = s.alice.unwrap_or(DEFAULT_ALICE);
        let bob = s.bob.unwrap_or(DEFAULT_BOB);
        let alice_im = s.alice_im.unwrap_or([0.0; 2]);
        let bob_im = s.bob_im.unwrap_or([0.0; 3]);
        let settings = MeasurementSettings {
            alice: [0, 1].map(|i| Complex::new(alice[i], alice_im[i])),
            bob: [0, 1, 2].map(|j| Complex::new(bob[j], bob_im[j])),
        };
        let p_n = s.p_n.unwrap_or(0.0);
        if !(0.0..=0.5).contains(&p_n) {
            return Err(bad(format!("settings.p_n = {p_n} is outside [0, 0.5]")));
        }
        let bell = match (&self.bell, self.protocol) {
            (Some(b), _) => BellStateSpec { kind: b.kind, r: b.r },
            (None, Protocol::Bell) => return Err(bad("protocol \"bell\" needs a [bell] section")),
            (None, _) => BellStateSpec {
                kind: BellKind::PhotonNumber,
                r: 1.0,
            },
        };
        if !(bell.r >= 0.0 && bell.r.is_finite()) {
            return Err(bad(format!("bell.r = {} must be nonnegative", bell.r)));
        }
        let point = SearchPoint {
            params,
            settings,
            p_n,
            bell,
        };

        let free = self.search.free_parameters(self.protocol)?;
        let seed = overrides.seed.or(self.seed).unwrap_or(1);
        let workers = overrides.workers.or(self.workers).unwrap_or(1).max(1);
        let output_dir = overrides
            .output_dir
            .clone()
            .or_else(|| self.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("heraldkey-out"));
        if profile.budget == 0 || profile.restarts == 0 {
            return Err(bad("search budget and restarts must be at least 1"));
        }
        let search = SearchSpec {
            protocol: self.protocol,
            start: point,
            free,
            budget: profile.budget,
            restarts: profile.restarts,
            seed,
            search: EntropyConfig::new(profile.search_m, profile.level),
            certify: Some(EntropyConfig::new(profile.m, profile.level)),
            workers: 1,
        };
        search.validate().map_err(|e| bad(e.to_string()))?;
        if let Some(sw) = &self.sweep {
            if sw.values.is_empty() {
                return Err(bad("sweep.values is empty"));
            }
            if sw.values.iter().any(|v| !v.is_finite()) {
                return Err(bad("sweep.values must be finite"));
            }
        }
        Ok(Resolved {
            config: self,
            profile,
            seed,
            workers,
            output_dir,
            point,
            eta_override,
            search,
        })
    }
}

impl ParamsSection {
    fn resolve(&self) -> Result<(ProtocolParams, bool), CliError> {
        let mut p = ProtocolParams::default();
        if self.nbar.is_some() && (self.nbar_a.is_some() || self.nbar_b.is_some()) {
            return Err(bad("give either params.nbar or params.nbar_a/nbar_b, not both"));
        }
        if let Some(n) = self.nbar {
            p = p.with_nbar(n);
        }
        if let Some(n) = self.nbar_a {
            p.nbar_a = n;
        }
        if let Some(n) = self.nbar_b {
            p.nbar_b = n;
        }
        if let Some(l) = self.distance_km {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(bad(format!("params.distance_km = {l} must be nonnegative")));
            }
            p = p.at_distance(l);
        }
        let mut eta_override = false;
        if let Some(e) = self.eta {
            if self.eta_a.is_some() || self.eta_b.is_some() {
                return Err(bad("give either params.eta or params.eta_a/eta_b, not both"));
            }
            p.eta_a = e;
            p.eta_b = e;
            eta_override = true;
        }
        if let Some(e) = self.eta_a {
            p.eta_a = e;
            eta_override = true;
        }
        if let Some(e) = self.eta_b {
            p.eta_b = e;
            eta_override = true;
        }
        for (slot, v) in [
            (&mut p.eta_d, self.eta_d),
            (&mut p.eta_e, self.eta_e),
            (&mut p.p_d, self.p_d),
            (&mut p.p_d_e, self.p_d_e),
            (&mut p.tau, self.tau),
        ] {
            if let Some(v) = v {
                *slot = v;
            }
        }
        // Detector dark counts are the same physical detectors unless split explicitly.
        if self.p_d.is_some() && self.p_d_e.is_none() {
            p.p_d_e = p.p_d;
        }
        p.validate().map_err(|e| bad(format!("params: {e}")))?;
        Ok((p, eta_override))
    }
}

impl SearchSection {
    fn free_parameters(&self, protocol: Protocol) -> Result<Vec<FreeParameter>, CliError> {
        let mut free = Vec::new();
        let amp = self.max_amplitude;
        if !(amp > 0.0 && amp.is_finite()) {
            return Err(bad(format!("search.max_amplitude = {amp} must be positive")));
        }
        for knob in &self.optimize {
            match knob {
                Knob::Displacements => {
                    for i in 0..2 {
                        free.push(FreeParameter::new(Parameter::AliceRe(i), -amp, amp));
                    }
                    for j in 0..3 {
                        free.push(FreeParameter::new(Parameter::BobRe(j), -amp, amp));
                    }
                    if self.complex {
                        for i in 0..2 {
                            free.push(FreeParameter::new(Parameter::AliceIm(i), -amp, amp));
                        }
                        for j in 0..3 {
                            free.push(FreeParameter::new(Parameter::BobIm(j), -amp, amp));
                        }
                    }
                }
                Knob::PN => free.push(FreeParameter::new(Parameter::NoiseFlip, 0.0, MAX_NOISE)),
                Knob::Nbar => {
                    if protocol == Protocol::Bell {
                        return Err(bad("nbar cannot be optimized for the bell protocol"));
                    }
                    free.push(FreeParameter::new(Parameter::Nbar, 1e-4, self.nbar_max))
                }
                Knob::Tau => {
                    if protocol != Protocol::B {
                        return Err(bad("tau is only used by protocol B"));
                    }
                    free.push(FreeParameter::new(Parameter::Tau, 0.01, 0.999))
                }
                Knob::R => {
                    if protocol != Protocol::Bell {
                        return Err(bad("r is only used by the bell protocol"));
                    }
                    free.push(FreeParameter::new(Parameter::BellR, 0.0, self.r_max))
                }
            }
        }
        let mut seen = std::collections::HashSet::new();
        if !free.iter().all(|f| seen.insert(f.parameter)) {
            return Err(bad("search.optimize lists a parameter twice"));
        }
        Ok(free)
    }
}

impl ThresholdSection {
    pub fn query(&self) -> ThresholdQuery {
        ThresholdQuery {
            lower: self.lower,
            upper: self.upper,
            tolerance: self.tolerance,
            scan: self.scan,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples_parse_and_resolve() {
        for text in [PROTOCOL_A_EXAMPLE, PROTOCOL_B_EXAMPLE, DIRECT_EXAMPLE, BELL_EXAMPLE] {
            let cfg = RunConfig::from_toml(text).unwrap();
            cfg.resolve(&Overrides::default()).unwrap();
        }
    }

    #[test]
    fn unknown_keys_are_rejected_with_a_line() {
        let err = RunConfig::from_toml("protocol = \"A\"\n\n[params]\nnbar = 0.1\nnbr = 0.2\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("nbr"), "{msg}");
        assert!(msg.contains("line 5"), "{msg}");
    }

    #[test]
    fn distance_maps_to_transmissivity() {
        let cfg = RunConfig::from_toml("protocol = \"direct\"\n[params]\ndistance_km = 10\n").unwrap();
        let r = cfg.resolve(&Overrides::default()).unwrap();
        assert!((r.point.params.eta_a - 10f64.powf(-0.2)).abs() < 1e-15);
        assert!(!r.eta_override);
        let cfg = RunConfig::from_toml("protocol = \"direct\"\n[params]\ndistance_km = 10\neta = 0.5\n").unwrap();
        let r = cfg.resolve(&Overrides::default()).unwrap();
        assert_eq!(r.point.params.eta_b, 0.5);
        assert!(r.eta_override);
    }

    #[test]
    fn profiles_and_overrides() {
        let cfg = RunConfig::from_toml("protocol = \"A\"\nprofile = \"paper\"\nseed = 4\n").unwrap();
        let r = cfg.clone().resolve(&Overrides::default()).unwrap();
        assert_eq!((r.profile.m, r.profile.level, r.profile.restarts), (8, 2, 8));
        assert_eq!(r.seed, 4);
        let o = Overrides {
            profile: Some(ProfileName::Ci),
            seed: Some(9),
            ..Overrides::default()
        };
        let r = cfg.resolve(&o).unwrap();
        assert_eq!((r.profile.m, r.profile.restarts, r.seed), (2, 1, 9));
    }

    #[test]
    fn inconsistent_configs_fail() {
        for text in [
            "protocol = \"bell\"\n",
            "protocol = \"A\"\n[params]\nnbar = 0.1\nnbar_a = 0.2\n",
            "protocol = \"A\"\n[params]\neta_d = 1.5\n",
            "protocol = \"A\"\n[search]\noptimize = [\"r\"]\n",
            "protocol = \"A\"\n[settings]\np_n = 0.7\n",
            "protocol = \"A\"\n[sweep]\naxis = \"distance_km\"\nvalues = []\n",
            "protocol = \"A\"\n[certification]\nm = 1\n",
        ] {
            let cfg = RunConfig::from_toml(text).unwrap();
            assert!(matches!(cfg.resolve(&Overrides::default()), Err(CliError::Config(_))), "{text}");
        }
        assert!(RunConfig::from_toml("protocol = \"C\"\n").is_err());
    }
}
