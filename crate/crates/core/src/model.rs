//! The fixed model shared by every method: input frontend, frozen backbone,
//! and verbalizer head, built deterministically from a task and a seed.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{DomainPairSpec, EmbeddingGeometry, TaskKind, TokenLayout, HARD_IDS, MASK_ID, RESERVED};
use crate::embedding::{EmbeddingTable, FeatureLift, Frontend, PromptParameters};
use crate::encoder::{BackboneInit, BackboneWeights, VerbalizerHead, WeightSnapshot};
use crate::error::{Error, Result};

/// Vocabulary of the toy2d frontend (reserved ids plus a few spare rows).
const TOY_VOCAB: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptInit {
    TableRows,
    Gaussian,
}

/// Verbalizer readout rows: seeded Gaussian, or the table rows of one label
/// token per class rescaled to norm `head_scale` (token tasks only; toy2d
/// always uses Gaussian rows).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInit {
    Random,
    LabelTokens,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub hidden: usize,
    pub seed: u64,
    pub backbone: BackboneInit,
    pub head_init: HeadInit,
    pub head_std: f64,
    pub head_scale: f64,
    pub geometry: EmbeddingGeometry,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            hidden: 128,
            seed: 7,
            backbone: BackboneInit::default(),
            head_init: HeadInit::LabelTokens,
            head_std: 1.0,
            head_scale: 6.0,
            geometry: EmbeddingGeometry::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.hidden == 0 {
            return Err(Error::config("model dim and hidden must be positive"));
        }
        if !(self.head_std > 0.0) || !(self.head_scale > 0.0) {
            return Err(Error::config("head_std and head_scale must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub frontend: Frontend,
    pub backbone: BackboneWeights,
    pub head: VerbalizerHead,
    pub layout: Option<TokenLayout>,
}

impl Model {
    pub fn build(task: &DomainPairSpec, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (table, max_input_len, lift, layout) = match task.task {
            TaskKind::TokenStats => {
                let layout = TokenLayout::new(task.vocab, task.classes)?;
                let table = layout.embedding_table(config.dim, &config.geometry, config.seed);
                (table, task.seq_len, None, Some(layout))
            }
            TaskKind::Toy2d => {
                let table = EmbeddingTable::gaussian(TOY_VOCAB, config.dim, 1.0, config.seed);
                (table, 1, Some(FeatureLift::seeded(config.dim, config.seed)), None)
            }
        };
        let frontend = Frontend {
            table,
            hard_ids: HARD_IDS.to_vec(),
            mask_id: MASK_ID,
            max_input_len,
            lift,
        };
        let backbone = BackboneWeights::seeded(config.dim, config.hidden, config.backbone, config.seed);
        let head = match (config.head_init, &layout) {
            (HeadInit::LabelTokens, Some(layout)) => {
                let mut readout = Array2::zeros((task.classes, config.dim));
                for c in 0..task.classes {
                    let row = frontend.table.row(layout.label_token(c))?;
                    let norm = row.dot(&row).sqrt();
                    if norm == 0.0 {
                        return Err(Error::config(format!("label token of class {c} has a zero embedding")));
                    }
                    readout.row_mut(c).assign(&(&row * (config.head_scale / norm)));
                }
                VerbalizerHead::new(readout, task.label_names())?
            }
            _ => VerbalizerHead::seeded(task.label_names(), config.dim, config.head_std, config.seed)?,
        };
        Ok(Self {
            frontend,
            backbone,
            head,
            layout,
        })
    }

    pub fn dim(&self) -> usize {
        self.frontend.dim()
    }

    pub fn classes(&self) -> usize {
        self.head.classes()
    }

    /// Initial soft prompt: leading neutral rows of the table, or
    /// seeded Gaussian rows of unit expected norm.
    pub fn initial_prompt(&self, init: PromptInit, len: usize, seed: u64) -> Result<PromptParameters> {
        if len == 0 {
            return Err(Error::config("prompt length must be positive"));
        }
        match init {
            PromptInit::TableRows => {
                let vocab = self.frontend.table.vocab_size();
                let ids: Vec<usize> = match &self.layout {
                    Some(layout) => layout.prompt_init_ids(len),
                    None => (0..len).map(|i| RESERVED + i % (vocab - RESERVED)).collect(),
                };
                PromptParameters::from_table_rows(&self.frontend.table, &ids)
            }
            PromptInit::Gaussian => Ok(PromptParameters::gaussian(len, self.dim(), 1.0, seed)),
        }
    }

    pub fn snapshot(&self, seed: u64) -> WeightSnapshot {
        WeightSnapshot::new(seed, self.backbone.clone(), self.head.clone())
    }
}
