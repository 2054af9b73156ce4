//! Optional TOML configuration file. Every field mirrors a CLI flag;
//! explicit flags always win over file values.

use std::path::Path;

use serde::Deserialize;

use crate::error::{AppError, Result};

#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub grid_rows: Option<usize>,
    pub grid_cols: Option<usize>,
    pub resolution: Option<usize>,
    pub metrics: Option<Vec<String>>,
    pub har: Option<bool>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub target_val_loss: Option<f64>,
    pub prf_depth: Option<usize>,
    pub prf_mode: Option<String>,
}

pub fn load(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| AppError::Config(format!("{}: {e}", path.display())))
}

/// Flag value if given, else config-file value, else the default.
pub fn pick<T: Clone>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_flags_win() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(&path, "seed = 9\nepochs = 12\nprf_mode = \"max\"\n").unwrap();
        let cfg = load(&path).unwrap();
        assert_eq!(cfg.seed, Some(9));
        assert_eq!(pick(Some(1u64), cfg.seed, 0), 1);
        assert_eq!(pick(None, cfg.seed, 0), 9);
        assert_eq!(pick(None::<u64>, None, 7), 7);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(&path, "sede = 9\n").unwrap();
        assert!(matches!(load(&path), Err(AppError::Config(_))));
    }
}
