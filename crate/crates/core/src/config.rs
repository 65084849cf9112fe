//! Run configuration: one TOML file with a section per module.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::CorpusConfig;
use crate::decode::{Algorithm, DecodeConfig};
use crate::error::{Error, Result};
use crate::losses::{LossWeights, Objective};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

pub const PRESETS: [&str; 7] = [
    "ar_desk",
    "cmlm_desk",
    "ctc_desk",
    "ctc_cmlm_desk",
    "orthros_cmlm_desk",
    "orthros_ctc_desk",
    "paper_scale",
];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub decode: DecodeConfig,
    pub data: CorpusConfig,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<RunConfig> {
        let model = ModelConfig::preset(name)?;
        let train = TrainConfig::default();
        let decode = DecodeConfig::default();
        let (objective, decode) = match name {
            "ar_desk" => (Objective::Ar, DecodeConfig { algorithm: Algorithm::ArBeam, ..decode }),
            "cmlm_desk" => (Objective::Cmlm, decode),
            "ctc_desk" => (Objective::Ctc, DecodeConfig { algorithm: Algorithm::CtcGreedy, ..decode }),
            "ctc_cmlm_desk" => (Objective::CtcCmlm, DecodeConfig { algorithm: Algorithm::CtcCmlm, ..decode }),
            "orthros_ctc_desk" => (
                Objective::OrthrosCtc,
                DecodeConfig { algorithm: Algorithm::CtcBeam, length_beam: 20, rescore: true, ..decode },
            ),
            _ => (Objective::OrthrosCmlm, DecodeConfig { rescore: true, ..decode }),
        };
        let train = if name == "paper_scale" {
            TrainConfig {
                epochs: 50,
                batch_size: 256,
                lr_constant: 5.0,
                warmup_steps: 25_000,
                objective,
                ..train
            }
        } else {
            TrainConfig { objective, ..train }
        };
        let mut loss = LossWeights::default();
        if name == "orthros_ctc_desk" {
            // a 1-block AR decoder must out-rank CTC's own choice to be useful
            loss.lambda_ar = 3.0;
        }
        let cfg = RunConfig {
            model,
            train,
            loss,
            decode,
            ..RunConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Writes the effective configuration as `config.toml` under `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.toml"), self.to_toml())?;
        Ok(())
    }

    /// Applies `section.key=value` with the value parsed as a TOML literal
    /// (bare words are taken as strings). Unknown keys are errors.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let (section, field) = key
            .trim()
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("override key {key:?} is not section.key")))?;
        let raw = raw.trim();
        let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(raw.to_string()),
        };
        let mut doc = toml::Value::try_from(&*self).expect("run config serializes");
        let table = doc
            .get_mut(section)
            .and_then(toml::Value::as_table_mut)
            .ok_or_else(|| Error::Config(format!("unknown section {section:?}")))?;
        table.insert(field.to_string(), value);
        let updated: RunConfig = doc.try_into().map_err(|e: toml::de::Error| Error::Config(format!("{key}: {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.decode.validate()?;
        self.data.validate()?;
        let (m, d) = (&self.model, &self.data);
        if m.vocab_size != d.vocab_size {
            return Err(Error::Config(format!(
                "model.vocab_size {} differs from data.vocab_size {}",
                m.vocab_size, d.vocab_size
            )));
        }
        if m.frame_dim != d.frame_dim {
            return Err(Error::Config(format!(
                "model.frame_dim {} differs from data.frame_dim {}",
                m.frame_dim, d.frame_dim
            )));
        }
        if m.max_target_len < d.len_range.1 {
            return Err(Error::Config(format!(
                "model.max_target_len {} is below the longest target {}",
                m.max_target_len, d.len_range.1
            )));
        }
        Ok(())
    }
}
