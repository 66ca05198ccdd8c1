use std::fs;
use std::path::Path;

use lsra_core::model::ModelConfig;
use lsra_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Contents of a run config file: a `[model]` table and an optional
/// `[train]` table. Unknown keys are errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: Option<TrainConfig>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string() + &location(text, e.span())))?;
        cfg.model.validate().map_err(|e| CliError::Config(format!("[model] {e}")))?;
        if let Some(t) = &cfg.train {
            t.validate().map_err(|e| CliError::Config(format!("[train] {e}")))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn train(&self) -> Result<&TrainConfig> {
        self.train
            .as_ref()
            .ok_or_else(|| CliError::Config("this command needs a [train] table".into()))
    }

    /// Seed every random choice derives from.
    pub fn seed(&self) -> u64 {
        self.train.as_ref().map_or(0, |t| t.seed)
    }
}

fn location(text: &str, span: Option<std::ops::Range<usize>>) -> String {
    let Some(span) = span else { return String::new() };
    let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
    format!(" (line {line})")
}
