//! Losses and the two-stage optimization.
//!
//! Stage I fits the surface encoder, part queries, part transformer and
//! decoder on complete phantoms with `L_sdf + L_inter` under completion
//! masking. Stage II trains only the slice encoder and slice queries with
//! `L_sdf + L_inter + λ_la·L_la`, everything else frozen.

mod data;
pub mod eval;
mod stage;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::geometry::GeometryError;
use crate::model::{LatentSet, ModelError};
use crate::phantom::{PhantomError, NUM_PARTS};
use crate::tensor::TensorError;

pub use data::{PhantomData, CONTACT_SAMPLES_PER_PART, SURFACE_POOL_FACTOR};
pub use stage::{
    stage1_step, stage2_step, train_stage1, train_stage2, validation_latent_alignment, write_loss_csv, EpochRecord,
    TrainReport,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite loss at epoch {epoch}, step {step}: {report}")]
    NonFinite { epoch: usize, step: usize, report: String },
    #[error("stage I checkpoint missing: {0}")]
    MissingStage1(String),
    #[error("stage I parameters changed during stage II")]
    FrozenViolated,
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub lr: f64,
    /// Cosine decay of the learning rate down to `lr · lr_final_ratio` at
    /// the last step; 1 keeps it constant.
    pub lr_final_ratio: f64,
    pub sigma: f64,
    pub lambda_la: f64,
    /// Probability of training a step without any mask (`K = 0`).
    pub p_no_mask: f64,
    pub lax_drop_p: f64,
    /// Upper end of the per-sample displacement scale, mm.
    pub lambda_max_mm: f64,
    pub near_queries: usize,
    pub uniform_queries: usize,
    /// Standard deviation of near-surface query offsets, normalized units.
    pub near_std: f64,
    /// Half-width of the uniform query box, normalized units.
    pub uniform_extent: f64,
    /// Contact points drawn per step for `L_inter`.
    pub contact_batch: usize,
    pub slice_samples: usize,
    pub use_inter_loss: bool,
    /// Multiplier of `L_inter` in the objective.
    pub inter_weight: f64,
    /// Fraction of the run over which the `L_inter` weight ramps up from 0.
    pub inter_warmup: f64,
    pub force_no_mask: bool,
    pub checkpoint_every: usize,
    pub out_dir: Option<PathBuf>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_stage1: 200,
            epochs_stage2: 100,
            lr: 2e-3,
            lr_final_ratio: 0.05,
            sigma: 50.0,
            lambda_la: 0.001,
            p_no_mask: 1.0 / 3.0,
            lax_drop_p: crate::slicer::LAX_DROP_P,
            lambda_max_mm: crate::slicer::LAMBDA_MAX_MM,
            near_queries: 1024,
            uniform_queries: 256,
            near_std: 0.05,
            uniform_extent: 1.1,
            contact_batch: 256,
            slice_samples: crate::slicer::DEFAULT_SAMPLES_PER_CONTOUR,
            use_inter_loss: true,
            inter_weight: 0.01,
            inter_warmup: 0.0,
            force_no_mask: false,
            checkpoint_every: 0,
            out_dir: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Full-length schedule: 1000 / 500 epochs.
    pub fn full() -> Self {
        Self {
            epochs_stage1: 1000,
            epochs_stage2: 500,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad("sigma must be positive");
        }
        if !(self.lambda_la >= 0.0 && self.lambda_la.is_finite()) {
            return bad("lambda_la must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.lax_drop_p) || !(0.0..=1.0).contains(&self.p_no_mask) {
            return bad("probabilities must lie in [0, 1]");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.inter_weight >= 0.0 && self.inter_weight.is_finite()) || !(0.0..=1.0).contains(&self.inter_warmup) {
            return bad("inter_weight must be non-negative and inter_warmup in [0, 1]");
        }
        if !(self.lr_final_ratio > 0.0 && self.lr_final_ratio <= 1.0) {
            return bad("lr_final_ratio must lie in (0, 1]");
        }
        if !(self.lambda_max_mm >= 0.0) || !(self.near_std >= 0.0) || !(self.uniform_extent > 0.0) {
            return bad("negative sampling scale");
        }
        if self.near_queries + self.uniform_queries == 0 {
            return bad("no query points");
        }
        if self.slice_samples == 0 {
            return bad("slice_samples must be positive");
        }
        Ok(())
    }

    /// `L_inter` weight at `step` of `total`.
    pub fn inter_weight_at(&self, step: usize, total: usize) -> f64 {
        let ramp = self.inter_warmup * total as f64;
        if ramp <= 0.0 {
            self.inter_weight
        } else {
            self.inter_weight * (step as f64 / ramp).min(1.0)
        }
    }

    /// Learning rate at `step` of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if total <= 1 {
            return self.lr;
        }
        let t = step.min(total - 1) as f64 / (total - 1) as f64;
        let w = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
        self.lr * (self.lr_final_ratio + (1.0 - self.lr_final_ratio) * w)
    }
}

/// Loss values of one step or an epoch mean.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_sdf: f64,
    /// `L_inter` as optimized: divided by the number of contact points.
    pub l_inter: f64,
    /// `L_inter` as a plain sum over contact points and their parts.
    pub l_inter_sum: f64,
    pub l_la: f64,
    pub total: f64,
    pub per_part_sdf: [f64; NUM_PARTS],
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.l_sdf, self.l_inter, self.l_inter_sum, self.l_la, self.total]
            .iter()
            .chain(&self.per_part_sdf)
            .all(|v| v.is_finite())
    }

    pub(crate) fn accumulate(&mut self, o: &LossReport) {
        self.l_sdf += o.l_sdf;
        self.l_inter += o.l_inter;
        self.l_inter_sum += o.l_inter_sum;
        self.l_la += o.l_la;
        self.total += o.total;
        for (a, b) in self.per_part_sdf.iter_mut().zip(&o.per_part_sdf) {
            *a += b;
        }
    }

    pub(crate) fn scaled(mut self, s: f64) -> Self {
        self.l_sdf *= s;
        self.l_inter *= s;
        self.l_inter_sum *= s;
        self.l_la *= s;
        self.total *= s;
        for a in self.per_part_sdf.iter_mut() {
            *a *= s;
        }
        self
    }
}

/// Mean over parts of the per-part mean absolute error.
pub fn loss_sdf(pred: &[[f64; NUM_PARTS]], gt: &[[f64; NUM_PARTS]]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(TrainError::Shape(format!("{} predictions vs {} targets", pred.len(), gt.len())));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred
        .iter()
        .zip(gt)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>())
        .sum();
    Ok(sum / (pred.len() * NUM_PARTS) as f64)
}

/// `Σ_q Σ_{p∈N(q)} tanh(max(−σ·s_p(q), 0))`. Each inner slice holds the
/// predictions of the parts near one contact point.
pub fn loss_inter(contact_preds: &[Vec<f64>], sigma: f64) -> f64 {
    contact_preds
        .iter()
        .flatten()
        .map(|&s| (-sigma * s).max(0.0).tanh())
        .sum()
}

/// `(1/P) Σ_p ‖C_{p,s} − C_p‖_F`.
pub fn loss_latent_align(slice: &LatentSet, surface: &LatentSet) -> Result<f64> {
    if slice.codes.len() != NUM_PARTS || surface.codes.len() != NUM_PARTS {
        return Err(TrainError::Shape("latent sets need one code per part".into()));
    }
    let mut total = 0.0;
    for (a, b) in slice.codes.iter().zip(&surface.codes) {
        if a.shape() != b.shape() {
            return Err(TrainError::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let ss: f64 = a.data().iter().zip(b.data()).map(|(x, y)| ((x - y) as f64).powi(2)).sum();
        total += ss.sqrt();
    }
    Ok(total / NUM_PARTS as f64)
}

#[cfg(test)]
mod tests;
