//! The shape network.
//!
//! Parameter layout (names in the [`ParamStore`]):
//!
//! | prefix              | role                                              |
//! |---------------------|---------------------------------------------------|
//! | `posemb`            | Fourier features → D, shared by encoders/decoder  |
//! | `enc`               | surface encoder cross-attention block             |
//! | `queries.{p}`       | part queries `L_p`, `M×D`                         |
//! | `hpt.{l}.intra/inter` | part transformer rounds                         |
//! | `dec`, `head1/2`    | query cross-attention block and scalar head       |
//! | `slice_enc`         | slice encoder (stage II)                          |
//! | `slice_queries.{p}` | slice queries `L_{p,s}` (stage II)                |
//!
//! All coordinates and SDF values inside the network are normalized: one
//! unit is half the phantom box edge.

mod config;
mod forward;

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::Point;
use crate::phantom::NUM_PARTS;
use crate::rng;
use crate::tensor::nn::{init_attention_block, init_linear, init_posemb, AttentionConfig};
use crate::tensor::{load_checkpoint, save_checkpoint, ParamStore, Tensor, TensorError};

pub use config::ModelConfig;
pub use forward::{DecodeBatch, Encoded};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("part index {0} out of range")]
    PartIndex(usize),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("slice branch not initialized")]
    NoSliceBranch,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("config file: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Which encoder and query set produce a part's code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    Surface,
    Slice,
}

impl Branch {
    pub fn encoder(self) -> &'static str {
        match self {
            Branch::Surface => "enc",
            Branch::Slice => "slice_enc",
        }
    }

    pub fn query(self, p: usize) -> String {
        match self {
            Branch::Surface => format!("queries.{p}"),
            Branch::Slice => format!("slice_queries.{p}"),
        }
    }
}

/// Where a part's latent came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Surface,
    Slice,
    QuerySubstituted,
}

/// Part mask `M_p`; `true` means the part is hidden.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskVector(pub [bool; NUM_PARTS]);

impl MaskVector {
    pub fn none() -> Self {
        Self([false; NUM_PARTS])
    }

    pub fn all() -> Self {
        Self([true; NUM_PARTS])
    }

    pub fn only(parts: &[usize]) -> Self {
        let mut m = [false; NUM_PARTS];
        for &p in parts {
            m[p] = true;
        }
        Self(m)
    }

    pub fn k(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn is_masked(&self, p: usize) -> bool {
        self.0[p]
    }

    /// Training draw: no mask with probability `p_none`, otherwise `K`
    /// uniform in `{1, 2}` with the parts chosen uniformly.
    pub fn sample(rng: &mut impl Rng, p_none: f64) -> Self {
        if rng.gen::<f64>() < p_none {
            return Self::none();
        }
        let k = rng.gen_range(1..=2);
        let parts = rand::seq::index::sample(rng, NUM_PARTS, k);
        Self::only(&parts.into_vec())
    }
}

/// Per-part `M×D` codes with their provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSet {
    pub codes: Vec<Tensor<f32>>,
    pub provenance: [Provenance; NUM_PARTS],
}

impl LatentSet {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.codes.len() != NUM_PARTS {
            return Err(ModelError::Config(format!("{} codes, expected {NUM_PARTS}", self.codes.len())));
        }
        for c in &self.codes {
            if c.shape() != [cfg.num_queries, cfg.dim] {
                return Err(ModelError::Config(format!("code shape {:?}", c.shape())));
            }
            if !c.is_finite() {
                return Err(ModelError::NonFinite("latent".into()));
            }
        }
        Ok(())
    }

    /// All codes stacked into one `P·M × D` buffer.
    pub fn flatten(&self) -> Vec<f32> {
        self.codes.iter().flat_map(|c| c.data().iter().copied()).collect()
    }

    pub fn from_flat(data: &[f32], cfg: &ModelConfig, provenance: [Provenance; NUM_PARTS]) -> Result<Self> {
        let n = cfg.num_queries * cfg.dim;
        if data.len() != n * NUM_PARTS {
            return Err(ModelError::Config(format!("{} values for a latent set", data.len())));
        }
        let codes = data
            .chunks(n)
            .map(|c| Tensor::new([cfg.num_queries, cfg.dim], c.to_vec()))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { codes, provenance })
    }
}

/// Network weights plus configuration.
#[derive(Debug, Clone)]
pub struct VecHeart {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
}

pub const HEAD_HIDDEN: usize = 64;

impl VecHeart {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, "model-init", 0);
        let mut s = ParamStore::new();
        let att = config.attention();
        let (m, d) = (config.num_queries, config.dim);
        init_posemb(&mut s, "posemb", d, &mut r)?;
        init_attention_block(&mut s, "enc", &att, true, &mut r)?;
        for p in 0..NUM_PARTS {
            s.insert(format!("queries.{p}"), gaussian(&[m, d], config.query_init_std, &mut r))?;
        }
        for l in 0..config.layers {
            init_attention_block(&mut s, &format!("hpt.{l}.intra"), &att, false, &mut r)?;
            if config.inter_attention {
                init_attention_block(&mut s, &format!("hpt.{l}.inter"), &att, false, &mut r)?;
            }
        }
        init_attention_block(&mut s, "dec", &att, true, &mut r)?;
        crate::tensor::nn::init_layer_norm(&mut s, "head.ln", d)?;
        init_linear(&mut s, "head1", d, HEAD_HIDDEN, &mut r)?;
        init_linear(&mut s, "head2", HEAD_HIDDEN, 1, &mut r)?;
        let mut model = Self { config, params: s };
        if model.config.slice_branch {
            model.config.slice_branch = false;
            model.init_slice_branch()?;
        }
        Ok(model)
    }

    /// Create `Enc_s` and `L_{p,s}` as copies of the surface encoder and
    /// part queries.
    pub fn init_slice_branch(&mut self) -> Result<()> {
        if self.config.slice_branch {
            return Ok(());
        }
        let copies: Vec<(String, Tensor<f32>)> = self
            .params
            .iter()
            .filter_map(|(n, p)| {
                let new = if let Some(rest) = n.strip_prefix("enc.") {
                    format!("slice_enc.{rest}")
                } else {
                    let rest = n.strip_prefix("queries.")?;
                    format!("slice_queries.{rest}")
                };
                Some((new, p.tensor.clone()))
            })
            .collect();
        for (n, t) in copies {
            self.params.insert(n, t)?;
        }
        self.config.slice_branch = true;
        Ok(())
    }

    pub fn attention(&self) -> AttentionConfig {
        self.config.attention()
    }

    /// Parameters trained in stage II.
    pub fn is_slice_param(name: &str) -> bool {
        name.starts_with("slice_enc.") || name.starts_with("slice_queries.")
    }

    /// Checksum over every stage-I parameter.
    pub fn stage1_checksum(&self) -> u64 {
        self.params.checksum_where(|n| !Self::is_slice_param(n))
    }

    /// Writes the checkpoint and a `<path>.json` config sidecar.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        save_checkpoint(&self.params, path)?;
        std::fs::write(config_path(path), serde_json::to_string_pretty(&self.config)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let config: ModelConfig = serde_json::from_str(&std::fs::read_to_string(config_path(path))?)?;
        config.validate()?;
        let params = load_checkpoint(path)?;
        let reference = VecHeart::new(config.clone(), 0)?;
        for (n, p) in reference.params.iter() {
            match params.get(n) {
                Some(q) if q.tensor.shape() == p.tensor.shape() => {}
                _ => return Err(ModelError::Config(format!("checkpoint lacks `{n}` or has the wrong shape"))),
            }
        }
        Ok(Self { config, params })
    }
}

pub fn config_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn gaussian(shape: &[usize], std: f64, r: &mut impl Rng) -> Tensor<f32> {
    use rand_distr::{Distribution, Normal};
    let n = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape.to_vec(), |_| n.sample(r) as f32)
}

/// Scale-normalized copy of a point list.
pub fn normalize_points(points: &[Point], half_extent: f64) -> Vec<Point> {
    points.iter().map(|p| [p[0] / half_extent, p[1] / half_extent, p[2] / half_extent]).collect()
}

#[cfg(test)]
mod tests;
