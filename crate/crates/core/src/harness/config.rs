//! The run configuration file: TOML on disk, canonical JSON for hashing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{RunOptions, MIN_FIELD_FACTOR};
use crate::eikonal::Scenario;
use crate::error::{Error, Result};
use crate::initial::InitialSpec;
use crate::params::ModelParams;
use crate::stats::ExponentConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Cadence {
    /// Steps between density / eikonal refreshes (K_e).
    pub eikonal: usize,
    /// Steps between stored snapshots (K_s); 0 stores none.
    pub snapshot: usize,
}

impl Default for Cadence {
    fn default() -> Self {
        Cadence {
            eikonal: 10,
            snapshot: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MomentsConfig {
    pub n_list: Vec<usize>,
    pub replicas: usize,
    /// Even moment order.
    pub p: u32,
    /// Independent points for the kernel mean.
    pub quadrature: usize,
}

impl Default for MomentsConfig {
    fn default() -> Self {
        MomentsConfig {
            n_list: (6..=12).map(|k| 1usize << k).collect(),
            replicas: 2000,
            p: 4,
            quadrature: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChaosConfig {
    /// Test functions in the lower-bound bank.
    pub bank_size: usize,
    /// Subsample draws for upper bounds that are not exact.
    pub draws: usize,
    /// Independent sample pairs behind the sampling baseline.
    pub baseline_draws: usize,
}

impl Default for ChaosConfig {
    fn default() -> Self {
        ChaosConfig {
            bank_size: 256,
            draws: 8,
            baseline_draws: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub replicas: usize,
    /// Tracked particle counts, strictly increasing.
    pub n_list: Vec<usize>,
    /// Field size `M = m_factor · N`.
    pub m_factor: usize,
    /// Field trajectories per `N`; replica `r` uses field `r mod field_pool`.
    pub field_pool: usize,
    pub dt: f64,
    pub t_end: f64,
    pub output_dir: PathBuf,
    pub cadence: Cadence,
    pub params: ModelParams,
    pub scenario: Scenario,
    pub exponents: ExponentConfig,
    pub f0: InitialSpec,
    pub moments: MomentsConfig,
    pub chaos: ChaosConfig,
    /// Finite-difference samples per probed `N` for `calibrate`.
    pub calibration_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            replicas: 200,
            n_list: vec![64, 128, 256, 512],
            m_factor: MIN_FIELD_FACTOR,
            field_pool: 8,
            dt: 0.01,
            t_end: 5.0,
            output_dir: PathBuf::from("out"),
            cadence: Cadence::default(),
            params: ModelParams::default(),
            scenario: Scenario::default(),
            exponents: ExponentConfig::default(),
            f0: InitialSpec::default(),
            moments: MomentsConfig::default(),
            chaos: ChaosConfig::default(),
            calibration_samples: 100_000,
        }
    }
}

fn strictly_increasing(field: &str, list: &[usize], min: usize) -> Result<()> {
    if list.is_empty() {
        return Err(Error::config(field, "must not be empty"));
    }
    if let Some(w) = list.windows(2).find(|w| w[0] >= w[1]) {
        return Err(Error::config(
            field,
            format!("must be strictly increasing, found {} then {}", w[0], w[1]),
        ));
    }
    if list[0] < min {
        return Err(Error::config(field, format!("entries must be >= {min}, got {}", list[0])));
    }
    Ok(())
}

impl RunConfig {
    /// Parses TOML; unknown keys and type mismatches name the offending field.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            Error::config(if path == "." { "config".into() } else { path }, inner.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses the JSON form, either a bare config or a manifest carrying one
    /// under `"config"`.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        let value = match value.get("config") {
            Some(inner) if value.get("config_hash").is_some() => inner.clone(),
            _ => value,
        };
        let cfg: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { "config".into() } else { path }, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`; `.json` files are read as JSON (manifests included),
    /// everything else as TOML.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json_str(&text)
        } else {
            Self::from_toml_str(&text)
        }
    }

    pub fn validate(&self) -> Result<()> {
        strictly_increasing("n_list", &self.n_list, 2)?;
        self.params.with_n(self.n_list[0]).validate()?;
        self.scenario.validate()?;
        self.exponents.validate()?;
        if self.exponents.theta != self.params.theta {
            return Err(Error::config(
                "exponents.theta",
                format!("must equal params.theta = {}, got {}", self.params.theta, self.exponents.theta),
            ));
        }
        self.f0.validate()?;
        if self.m_factor < MIN_FIELD_FACTOR {
            return Err(Error::config(
                "m_factor",
                format!("must be >= {MIN_FIELD_FACTOR}, got {}", self.m_factor),
            ));
        }
        if self.replicas == 0 {
            return Err(Error::config("replicas", "must be >= 1"));
        }
        if self.field_pool == 0 {
            return Err(Error::config("field_pool", "must be >= 1"));
        }
        self.options().steps()?;
        strictly_increasing("moments.n_list", &self.moments.n_list, 2)?;
        if self.moments.p == 0 || self.moments.p % 2 == 1 {
            return Err(Error::config("moments.p", format!("must be even and >= 2, got {}", self.moments.p)));
        }
        if self.moments.replicas < 2 {
            return Err(Error::config("moments.replicas", "must be >= 2"));
        }
        if self.moments.quadrature == 0 {
            return Err(Error::config("moments.quadrature", "must be >= 1"));
        }
        if self.chaos.bank_size == 0 {
            return Err(Error::config("chaos.bank_size", "must be >= 1"));
        }
        if self.chaos.draws < 2 {
            return Err(Error::config("chaos.draws", "must be >= 2"));
        }
        if self.chaos.baseline_draws < 2 {
            return Err(Error::config("chaos.baseline_draws", "must be >= 2"));
        }
        if self.calibration_samples == 0 {
            return Err(Error::config("calibration_samples", "must be >= 1"));
        }
        Ok(())
    }

    pub fn options(&self) -> RunOptions {
        RunOptions {
            eikonal_cadence: self.cadence.eikonal,
            snapshot_cadence: self.cadence.snapshot,
            ..RunOptions::new(self.dt, self.t_end)
        }
    }

    /// Compact JSON with sorted keys and the output directory blanked, so
    /// the hash does not depend on where results are written.
    pub fn canonical_json(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let value = serde_json::to_value(&c).expect("config serialises");
        serde_json::to_string(&value).expect("value serialises")
    }

    /// Hex SHA-256 of [`RunConfig::canonical_json`].
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_reference_config() {
        assert_eq!(RunConfig::from_toml_str("").unwrap(), RunConfig::default());
    }

    #[test]
    fn partial_tables_fill_from_defaults() {
        let cfg = RunConfig::from_toml_str(
            "seed = 9\nn_list = [8, 16]\n[params]\nu_max = 0.5\n[f0]\nkind = \"point_mass\"\nposition = [1.0, 2.0]\nvelocity = [0.0, 0.0]\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.params.u_max, 0.5);
        assert_eq!(cfg.params.k_n, ModelParams::default().k_n);
        assert!(matches!(cfg.f0, InitialSpec::PointMass { .. }));
    }

    fn field_of(text: &str) -> String {
        match RunConfig::from_toml_str(text).unwrap_err() {
            Error::Config { field, .. } => field,
            other => panic!("expected a config error, got {other}"),
        }
    }

    #[test]
    fn errors_name_the_field() {
        assert_eq!(field_of("n_list = [64, 64]"), "n_list");
        assert_eq!(field_of("[params]\ntheta = 0.25"), "params.theta");
        assert_eq!(field_of("[exponents]\ntheta = 0.1"), "exponents.theta");
        assert_eq!(field_of("[exponents]\nalpha = 0.2"), "exponents.alpha");
        assert_eq!(field_of("m_factor = 3"), "m_factor");
        assert_eq!(field_of("dt = 0.03\nt_end = 0.1"), "t_end");
        assert_eq!(field_of("[params]\nk_n = \"stiff\""), "params.k_n");
        assert_eq!(field_of("[cadence]\neikonal = 0"), "cadence.eikonal");
        assert_eq!(field_of("[moments]\np = 3"), "moments.p");
        assert!(field_of("[params]\nbogus = 1").starts_with("params"));
    }

    #[test]
    fn hash_ignores_output_dir_and_key_order() {
        let a = RunConfig::from_toml_str("seed = 1\nreplicas = 3\noutput_dir = \"a\"").unwrap();
        let b = RunConfig::from_toml_str("output_dir = \"b\"\nreplicas = 3\nseed = 1").unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig::from_toml_str("seed = 2\nreplicas = 3").unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn json_round_trip_through_a_manifest() {
        let cfg = RunConfig {
            seed: 17,
            ..RunConfig::default()
        };
        let bare = RunConfig::from_json_str(&cfg.canonical_json()).unwrap();
        assert_eq!(bare.hash(), cfg.hash());
        let manifest = format!(r#"{{"config_hash": "{}", "config": {}}}"#, cfg.hash(), cfg.canonical_json());
        assert_eq!(RunConfig::from_json_str(&manifest).unwrap().hash(), cfg.hash());
    }
}
