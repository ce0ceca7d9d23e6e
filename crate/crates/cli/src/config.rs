use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use air_core::synthdata::DatasetParams;
use air_core::trainer::TrainConfig;

/// One experiment in a file. Paths are relative to the file's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// Generates the dataset at `data` when it does not exist yet.
    pub dataset: Option<DatasetParams>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub deterministic: bool,
}

impl RunConfig {
    pub fn parse(text: &str, base: &Path) -> Result<Self, String> {
        let mut cfg: RunConfig = serde_json::from_str(text).map_err(|e| e.to_string())?;
        for p in [&mut cfg.data, &mut cfg.out].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, base).map_err(|e| format!("{}: {e}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paths_resolve_against_config_dir() {
        let cfg = RunConfig::parse(
            r#"{"data": "d", "out": "/abs/o", "train": {"epochs": 2}}"#,
            Path::new("/runs/a"),
        )
        .unwrap();
        assert_eq!(cfg.data, Some(PathBuf::from("/runs/a/d")));
        assert_eq!(cfg.out, Some(PathBuf::from("/abs/o")));
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.clip_c, 0.01);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse(r#"{"epochs": 2}"#, Path::new(".")).is_err());
        assert!(RunConfig::parse(r#"{"train": {"lr_typo": 1}}"#, Path::new(".")).is_err());
    }
}
