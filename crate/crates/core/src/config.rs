//! Pipeline configuration, loaded from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Percent;
use crate::evalharness::{DEFAULT_KS, DEFAULT_SWEEP};
use crate::factorization::MfHyper;
use crate::relevance::CtrHyper;
use crate::sequence::SeqHyper;
use crate::synth::SynthConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// `ratings.dat` / `movies.dat` at the configured paths.
    Movielens,
    /// A generated corpus written under the output directory.
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub ratings: PathBuf,
    pub movies: PathBuf,
    /// Seeded user subsample size; 0 keeps every user.
    pub max_users: usize,
    pub synthetic: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Movielens,
            ratings: PathBuf::from("data/ml-1m/ratings.dat"),
            movies: PathBuf::from("data/ml-1m/movies.dat"),
            max_users: 0,
            synthetic: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Session share used for short-term preferences.
    pub x: Percent,
    pub ks: Vec<usize>,
    /// Session shares for the sweep; empty skips it.
    pub sweep_x: Vec<Percent>,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    pub out: PathBuf,
    pub data: DataConfig,
    pub mf: MfHyper,
    pub sequence: SeqHyper,
    pub ctr: CtrHyper,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            x: Percent::new(30).expect("30 is a valid percentage"),
            ks: DEFAULT_KS.to_vec(),
            sweep_x: DEFAULT_SWEEP
                .iter()
                .map(|&x| Percent::new(x).expect("sweep grid is valid"))
                .collect(),
            threads: 0,
            out: PathBuf::from("out"),
            data: DataConfig::default(),
            mf: MfHyper::default(),
            sequence: SeqHyper::default(),
            ctr: CtrHyper::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(ConfigError::Invalid("ks must be a non-empty list of positive integers".into()));
        }
        if let Some(&k) = self.ks.iter().find(|&&k| k > crate::corpus::TEST_NEGATIVES + 1) {
            return Err(ConfigError::Invalid(format!("k = {k} exceeds the 50-item test pool")));
        }
        if self.mf.dim == 0 || self.ctr.dim == 0 || self.ctr.hidden == 0 {
            return Err(ConfigError::Invalid("latent dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical config with run-local fields (thread
    /// count, output directory) blanked.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.threads = 0;
        canonical.out = PathBuf::new();
        digest(&canonical)
    }
}

/// Hex SHA-256 of the JSON encoding of `value`.
pub fn digest<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("value serializes");
    hex::encode(Sha256::digest(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = PipelineConfig::default();
        let back = PipelineConfig::from_toml_str(&cfg.to_toml(), Path::new("inline")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_files_fill_in_defaults() {
        let cfg = PipelineConfig::from_toml_str("seed = 7\n[data]\nmax_users = 50\n", Path::new("inline")).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.data.max_users, 50);
        assert_eq!(cfg.mf, MfHyper::default());
    }

    #[test]
    fn hash_ignores_threads_and_out_only() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.threads = 4;
        b.out = PathBuf::from("/elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn rejects_bad_values() {
        assert!(PipelineConfig::from_toml_str("x = 0\n", Path::new("inline")).is_err());
        assert!(PipelineConfig::from_toml_str("ks = [60]\n", Path::new("inline")).is_err());
        assert!(PipelineConfig::from_toml_str("bogus = 1\n", Path::new("inline")).is_err());
    }
}
