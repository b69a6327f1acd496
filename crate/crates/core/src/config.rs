//! Run configuration: one JSON document with a section per stage plus the
//! global seed and output directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusConfig;
use crate::error::{Error, Result};
use crate::evalkit::EvalConfig;
use crate::records::{read_file, FORMAT_VERSION};
use crate::sftpair::{PairsConfig, SftConfig};
use crate::steering::SteerConfig;
use crate::tinylm::{ModelConfig, Precision};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub format_version: u32,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub sft: SftConfig,
    pub pairs: PairsConfig,
    pub steer: SteerConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            format_version: FORMAT_VERSION,
            seed: 1,
            out_dir: PathBuf::from("runs/default"),
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            sft: SftConfig::default(),
            pairs: PairsConfig::default(),
            steer: SteerConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parse a JSON config; missing fields take their defaults.
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| {
            Error::Config(format!(
                "{}:{}:{}: {e}",
                origin.display(),
                e.line(),
                e.column()
            ))
        })?;
        Ok(cfg)
    }

    /// Load a config file. The literal name `default` gives the built-in defaults.
    pub fn load(path: &Path) -> Result<Self> {
        if path.as_os_str() == "default" {
            return Ok(RunConfig::default());
        }
        if !path.exists() {
            return Err(Error::Config(format!(
                "config file {} not found",
                path.display()
            )));
        }
        RunConfig::from_json(&read_file(path)?, path)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "format_version {} not supported (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        self.corpus.validate()?;
        let mut model = self.model.clone();
        if model.vocab_size == 0 {
            model.vocab_size = 1;
        }
        model.validate()?;
        if model.precision != Precision::Fast {
            return Err(Error::Config(
                "model.precision: pipeline runs use \"fast\"; \"check\" is for gradient checks".into(),
            ));
        }
        self.sft.validate()?;
        self.pairs.sampling.validate()?;
        self.steer.validate()?;
        self.eval.validate()?;
        if self.model.context_len < self.corpus.context_len {
            return Err(Error::Config(format!(
                "model.context_len {} is shorter than corpus.context_len {}",
                self.model.context_len, self.corpus.context_len
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_reparses_to_equal_config() {
        let mut cfg = RunConfig::default();
        cfg.seed = 7;
        cfg.eval.alphas = vec![0.0, 0.25, 1.0];
        let back = RunConfig::from_json(&cfg.to_json(), Path::new("echo.json")).unwrap();
        assert_eq!(back, cfg);
        assert!(RunConfig::default().validate().is_ok());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = RunConfig::from_json(r#"{"seed": 3, "sft": {"epochs": 2}}"#, Path::new("c.json")).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.sft.epochs, 2);
        assert_eq!(cfg.sft.lr, SftConfig::default().lr);
    }

    #[test]
    fn unknown_keys_are_rejected_with_position() {
        let text = "{\n  \"seed\": 1,\n  \"steer\": {\"betta\": 2}\n}";
        let err = RunConfig::from_json(text, Path::new("c.json")).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Config(_)));
        assert!(msg.contains("c.json:3:") && msg.contains("betta"), "{msg}");
    }
}
