use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of reserved ids at the start of the default layout.
pub const NUM_SPECIAL: usize = 5;

/// Token table with the special ids the models and decoders rely on.
///
/// Default layout: `0 = <blank>`, `1 = <pad>`, `2 = <mask>`, `3 = <s>`,
/// `4 = </s>`, then content tokens `w5, w6, ...`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub tokens: Vec<String>,
    pub pad: usize,
    pub mask: usize,
    pub bos: usize,
    pub eos: usize,
    pub blank: usize,
}

impl Vocabulary {
    pub fn with_size(size: usize) -> Result<Self> {
        if size < NUM_SPECIAL + 1 {
            return Err(Error::Config(format!("vocabulary size {size} < {}", NUM_SPECIAL + 1)));
        }
        let mut tokens: Vec<String> = ["<blank>", "<pad>", "<mask>", "<s>", "</s>"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        tokens.extend((NUM_SPECIAL..size).map(|i| format!("w{i}")));
        Ok(Vocabulary {
            tokens,
            pad: 1,
            mask: 2,
            bos: 3,
            eos: 4,
            blank: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_special(&self, id: usize) -> bool {
        [self.pad, self.mask, self.bos, self.eos, self.blank].contains(&id)
    }

    /// Ids of all non-special tokens in ascending order.
    pub fn content_ids(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.is_special(i)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let ids = [self.pad, self.mask, self.bos, self.eos, self.blank];
        for (i, a) in ids.iter().enumerate() {
            if *a >= self.len() || ids[i + 1..].contains(a) {
                return Err(Error::Config(format!("special ids must be distinct and in range: {ids:?}")));
            }
        }
        if self.blank != 0 {
            return Err(Error::Config("blank id must be 0".into()));
        }
        if self.len() < NUM_SPECIAL + 1 {
            return Err(Error::Config("vocabulary needs at least one content token".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let v: Vocabulary = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            msg: e.to_string(),
        })?;
        v.validate()?;
        Ok(v)
    }
}
