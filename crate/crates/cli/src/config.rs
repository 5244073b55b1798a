use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use attncomp::{SyntheticParams, TrainConfig};
use serde::Deserialize;

pub const SEED_ENV: &str = "ATTNCOMP_SEED";

/// `ATTNCOMP_SEED` if set, else the flag value, else `fallback`.
pub fn resolve_seed(flag: Option<u64>, fallback: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| attncomp::Error::Invalid(format!("{SEED_ENV}=`{v}` is not an unsigned integer")).into()),
        Err(_) => Ok(flag.unwrap_or(fallback)),
    }
}

/// Training configuration file.
///
/// ```toml
/// heads = 4
/// d_a = 64
///
/// [train]
/// learning_rate = 2e-4
/// epochs = 8
///
/// [synthetic]
/// d_model = 32
/// ```
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainFile {
    pub heads: usize,
    pub d_a: usize,
    /// Weights bundle to start from instead of a random head.
    pub init_weights: Option<PathBuf>,
    pub train: TrainConfig,
    pub synthetic: SyntheticParams,
}

impl Default for TrainFile {
    fn default() -> Self {
        Self {
            heads: 4,
            d_a: 64,
            init_weights: None,
            train: TrainConfig::default(),
            synthetic: SyntheticParams::default(),
        }
    }
}

impl TrainFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let file: TrainFile = toml::from_str(&text)
            .map_err(|e| attncomp::Error::Invalid(format!("{}: {e}", path.display())))?;
        if file.heads == 0 || file.d_a == 0 {
            return Err(attncomp::Error::Invalid("heads and d_a must be positive".into()).into());
        }
        file.train.validate()?;
        file.synthetic.validate()?;
        Ok(file)
    }
}
