use serde::{Deserialize, Serialize};

use super::{ModelError, Result};
use crate::tensor::nn::AttentionConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// `M`, latent tokens per part.
    pub num_queries: usize,
    /// `D`, token width.
    pub dim: usize,
    pub heads: usize,
    /// `L`, intra/inter rounds.
    pub layers: usize,
    /// `N`, surface points encoded per part.
    pub points_per_part: usize,
    /// Inter-part attention on; `false` leaves parts fully independent.
    pub inter_attention: bool,
    /// Slice encoder and slice queries present.
    pub slice_branch: bool,
    pub query_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_queries: 256,
            dim: 32,
            heads: 4,
            layers: 3,
            points_per_part: 2048,
            inter_attention: true,
            slice_branch: false,
            query_init_std: 1.0,
        }
    }
}

impl ModelConfig {
    /// A small configuration for tests.
    pub fn tiny() -> Self {
        Self {
            num_queries: 8,
            dim: 16,
            heads: 2,
            layers: 1,
            points_per_part: 64,
            ..Self::default()
        }
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig::new(self.dim, self.heads).expect("validated config")
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_queries == 0 || self.points_per_part == 0 || self.layers == 0 {
            return Err(ModelError::Config(format!("zero-sized config {self:?}")));
        }
        if !(self.query_init_std > 0.0) {
            return Err(ModelError::Config("query_init_std must be positive".into()));
        }
        AttentionConfig::new(self.dim, self.heads).map_err(|e| ModelError::Config(e.to_string()))?;
        Ok(())
    }
}
