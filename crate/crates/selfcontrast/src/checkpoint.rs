//! Portable JSON checkpoints for the toy policy.
//!
//! ```json
//! {
//!   "format": "selfcontrast-toylm",
//!   "version": 1,
//!   "dims": {"vocab": 23, "context": 8, "embed": 8, "hidden": 32},
//!   "vocab": "abcdefghij0123456789",
//!   "layout": "E[vocab,embed] W1[context*embed,hidden] b1[hidden] W2[hidden,vocab] b2[vocab]; row-major",
//!   "seed_lineage": [{"stage": "sft", "seed": 7}],
//!   "params": [ ... ]
//! }
//! ```
//!
//! `vocab` lists the non-reserved symbols; ids 0, 1 and 2 are BOS, EOS and
//! PAD and symbol `k` of the string has id `k + 3`. `params` is the flat
//! parameter vector in the stated layout, each number in shortest round-trip
//! decimal form, so a save/load cycle is bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use selfcontrast_core::corpus::Vocab;
use selfcontrast_core::toylm::{Dims, ModelParams};

use crate::formats::{read_json, write_json, FormatError};

pub const FORMAT: &str = "selfcontrast-toylm";
pub const VERSION: u32 = 1;
pub const LAYOUT: &str = "E[vocab,embed] W1[context*embed,hidden] b1[hidden] W2[hidden,vocab] b2[vocab]; row-major";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedEntry {
    pub stage: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub dims: Dims,
    pub vocab: Vocab,
    pub layout: String,
    pub seed_lineage: Vec<SeedEntry>,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn new(params: &ModelParams, vocab: &Vocab, seed_lineage: Vec<SeedEntry>) -> Self {
        Checkpoint {
            format: FORMAT.to_string(),
            version: VERSION,
            dims: params.dims(),
            vocab: vocab.clone(),
            layout: LAYOUT.to_string(),
            seed_lineage,
            params: params.as_slice().to_vec(),
        }
    }

    /// Validates the header and rebuilds the model.
    pub fn model(&self) -> Result<ModelParams, String> {
        if self.format != FORMAT {
            return Err(format!("unknown checkpoint format {:?}", self.format));
        }
        if self.version != VERSION {
            return Err(format!("unsupported checkpoint version {}", self.version));
        }
        if self.dims.vocab != self.vocab.size() {
            return Err(format!("dims.vocab = {} but the vocabulary has {} ids", self.dims.vocab, self.vocab.size()));
        }
        ModelParams::from_flat(self.dims, self.params.clone()).map_err(|e| e.to_string())
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        let ck: Checkpoint = read_json(path)?;
        ck.model().map_err(|message| FormatError::Json { path: path.to_path_buf(), message })?;
        Ok(ck)
    }
}
