//! Flow matching over part-latent sequences (3D+t generation).
//!
//! A sequence is `T` latent sets at phases in `[0, 1)`. The denoiser groups
//! consecutive latent rows of a part into patch tokens, adds a learned token
//! position and the frame's conditioning (periodic phase kernel features and
//! flow time), appends one conditioning token per frame and runs a stack of
//! full-attention blocks over every token of the sequence.
//!
//! Training uses the linear interpolant `x_τ = (1−τ)x₀ + τx₁` with the
//! velocity target `x₁ − x₀`, `x₀ = x_init + 0.1·ε` and `τ ~ Beta(½, ½)`.

use std::io::Write as _;
use std::path::Path;

use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::geometry::{chamfer_distance, GeometryError, Mesh, Point};
use crate::model::{LatentSet, MaskVector, ModelConfig, ModelError, Provenance, VecHeart, Branch};
use crate::phantom::{PhantomSpec, NUM_PARTS};
use crate::rng;
use crate::tensor::nn::{attention_block, init_attention_block, init_layer_norm, init_linear, layer_norm, linear, AttentionConfig};
use crate::tensor::{AdamConfig, Graph, ParamStore, Segment, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum FlowError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid sequence: {0}")]
    Sequence(String),
    #[error("invalid flow config: {0}")]
    Config(String),
    #[error("non-finite flow loss at step {0}")]
    NonFinite(usize),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FlowError>;

pub const DEFAULT_FRAMES: usize = 8;
pub const INIT_NOISE: f64 = 0.1;
/// Octaves of the flow-time features.
const TAU_OCTAVES: usize = 4;

/// `k_i(t) = exp(−sin²(π(t−μ_i)) / (2s²))`.
pub fn pgk_encode(t: f64, centers: &[f64], s: f64) -> Vec<f64> {
    centers
        .iter()
        .map(|&mu| {
            let d = (std::f64::consts::PI * (t - mu)).sin();
            (-d * d / (2.0 * s * s)).exp()
        })
        .collect()
}

/// `n` evenly spaced kernel centers `i/n`.
pub fn pgk_centers(n: usize) -> Vec<f64> {
    (0..n).map(|i| i as f64 / n as f64).collect()
}

/// One flow time `τ ~ Beta(½, ½)`.
pub fn beta_sample_t(seed: u64) -> f64 {
    beta_draw(&mut rng::stream(seed, "flow-tau", 0))
}

fn beta_draw(r: &mut impl rand::Rng) -> f64 {
    Beta::new(0.5, 0.5).expect("valid shape").sample(r)
}

/// Closed-form CDF of Beta(½, ½): `(2/π)·asin(√x)`.
pub fn arcsine_cdf(x: f64) -> f64 {
    2.0 / std::f64::consts::PI * x.clamp(0.0, 1.0).sqrt().asin()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowSequence {
    pub frames: Vec<LatentSet>,
    pub phases: Vec<f64>,
}

impl FlowSequence {
    /// Frames at phases `i/T`.
    pub fn uniform(frames: Vec<LatentSet>) -> Self {
        let t = frames.len();
        Self {
            frames,
            phases: (0..t).map(|i| i as f64 / t as f64).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.len() < 2 || self.frames.len() != self.phases.len() {
            return Err(FlowError::Sequence(format!(
                "{} frames, {} phases",
                self.frames.len(),
                self.phases.len()
            )));
        }
        if self.phases.iter().any(|p| !(0.0..1.0).contains(p)) || self.phases.windows(2).any(|w| w[1] <= w[0]) {
            return Err(FlowError::Sequence("phases must increase strictly within [0, 1)".into()));
        }
        let shape = self.frames[0].codes.first().map(|c| c.shape().to_vec());
        for f in &self.frames {
            if f.codes.len() != NUM_PARTS || f.codes.iter().any(|c| Some(c.shape().to_vec()) != shape) {
                return Err(FlowError::Sequence("frames differ in shape".into()));
            }
        }
        Ok(())
    }

    /// Frames concatenated, frame-major then part-major.
    pub fn flatten(&self) -> Vec<f32> {
        self.frames.iter().flat_map(|f| f.flatten()).collect()
    }

    pub fn from_flat(data: &[f32], frames: usize, m: usize, d: usize) -> Result<Self> {
        let per = NUM_PARTS * m * d;
        if data.len() != per * frames {
            return Err(FlowError::Sequence(format!("{} values for {frames} frames", data.len())));
        }
        let cfg = ModelConfig {
            num_queries: m,
            dim: d,
            ..ModelConfig::default()
        };
        let frames = data
            .chunks(per)
            .map(|c| LatentSet::from_flat(c, &cfg, [Provenance::Surface; NUM_PARTS]))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self::uniform(frames))
    }
}

/// Periodic linear interpolation to `t_out` frames at phases `j/t_out`.
pub fn resample_sequence(seq: &FlowSequence, t_out: usize) -> Result<FlowSequence> {
    seq.validate()?;
    if t_out < 2 {
        return Err(FlowError::Sequence(format!("t_out = {t_out}")));
    }
    let n = seq.len();
    let mut frames = Vec::with_capacity(t_out);
    for j in 0..t_out {
        let t = j as f64 / t_out as f64;
        // Last frame at or before t, cyclically.
        let i = match seq.phases.iter().rposition(|&p| p <= t) {
            Some(i) => i,
            None => n - 1,
        };
        let k = (i + 1) % n;
        let (p0, mut p1) = (seq.phases[i], seq.phases[k]);
        let mut tt = t;
        if p1 <= p0 {
            p1 += 1.0;
        }
        if tt < p0 {
            tt += 1.0;
        }
        let w = ((tt - p0) / (p1 - p0)) as f32;
        let (a, b) = (&seq.frames[i], &seq.frames[k]);
        let codes = a
            .codes
            .iter()
            .zip(&b.codes)
            .map(|(x, y)| {
                let data = x.data().iter().zip(y.data()).map(|(u, v)| (1.0 - w) * u + w * v).collect();
                Tensor::new(x.shape().to_vec(), data)
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        frames.push(LatentSet {
            codes,
            provenance: a.provenance,
        });
    }
    Ok(FlowSequence::uniform(frames))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub frames: usize,
    pub num_queries: usize,
    pub dim: usize,
    /// Latent rows per token.
    pub patch: usize,
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub pgk_centers: usize,
    pub pgk_bandwidth: f64,
    pub lr: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            frames: DEFAULT_FRAMES,
            num_queries: 256,
            dim: 32,
            patch: 8,
            width: 64,
            heads: 4,
            blocks: 4,
            pgk_centers: 8,
            pgk_bandwidth: 0.2,
            lr: 1e-2,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 || self.blocks == 0 || self.pgk_centers == 0 {
            return Err(FlowError::Config("frames ≥ 2, blocks ≥ 1, centers ≥ 1".into()));
        }
        if self.patch == 0 || !self.num_queries.is_multiple_of(self.patch) {
            return Err(FlowError::Config(format!("patch {} must divide M = {}", self.patch, self.num_queries)));
        }
        if !(self.pgk_bandwidth > 0.0) || !(self.lr > 0.0) {
            return Err(FlowError::Config("bandwidth and lr must be positive".into()));
        }
        self.attention()?;
        Ok(())
    }

    fn attention(&self) -> Result<AttentionConfig> {
        Ok(AttentionConfig::new(self.width, self.heads)?)
    }

    fn tokens_per_frame(&self) -> usize {
        NUM_PARTS * self.num_queries / self.patch
    }

    fn cond_dim(&self) -> usize {
        self.pgk_centers + 1 + 2 * TAU_OCTAVES
    }

    fn numel(&self) -> usize {
        self.frames * NUM_PARTS * self.num_queries * self.dim
    }
}

#[derive(Debug, Clone)]
pub struct FlowModel {
    pub config: FlowConfig,
    pub params: ParamStore<f32>,
}

impl FlowModel {
    pub fn new(config: FlowConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, "flow-init", 0);
        let mut s = ParamStore::new();
        let w = config.width;
        let att = config.attention()?;
        s.insert("x_init", Tensor::zeros([config.frames * NUM_PARTS * config.num_queries, config.dim]))?;
        init_linear(&mut s, "in", config.patch * config.dim, w, &mut r)?;
        let pos = Tensor::from_fn([config.tokens_per_frame(), w], |_| {
            let z: f64 = StandardNormal.sample(&mut r);
            (0.02 * z) as f32
        });
        s.insert("pos", pos)?;
        init_linear(&mut s, "cond", config.cond_dim(), w, &mut r)?;
        for b in 0..config.blocks {
            init_attention_block(&mut s, &format!("blk.{b}"), &att, false, &mut r)?;
        }
        init_layer_norm(&mut s, "out.ln", w)?;
        init_linear(&mut s, "out", w, config.patch * config.dim, &mut r)?;
        Ok(Self { config, params: s })
    }

    /// Conditioning features of one frame: PGK of the phase, then `τ` and
    /// its sin/cos octaves.
    pub fn cond_features(&self, phase: f64, tau: f64) -> Vec<f32> {
        let c = &self.config;
        let mut f = pgk_encode(phase, &pgk_centers(c.pgk_centers), c.pgk_bandwidth);
        f.push(tau);
        for k in 0..TAU_OCTAVES {
            let a = std::f64::consts::PI * (1u32 << k) as f64 * tau;
            f.push(a.sin());
            f.push(a.cos());
        }
        f.into_iter().map(|v| v as f32).collect()
    }

    /// `v_θ(x, τ)` for a `T·P·M × D` input node.
    pub fn g_velocity(&self, g: &mut Graph, x: Var, tau: f64, phases: &[f64]) -> Result<Var> {
        let c = &self.config;
        if phases.len() != c.frames {
            return Err(FlowError::Sequence(format!("{} phases for {} frames", phases.len(), c.frames)));
        }
        let per = c.tokens_per_frame();
        let n_tok = c.frames * per;
        let patches = g.reshape(x, [n_tok, c.patch * c.dim])?;
        let h = linear(g, &self.params, "in", patches)?;
        let pos = g.param(&self.params, "pos")?;
        let pos = g.concat_rows(&vec![pos; c.frames])?;
        let h = g.add(h, pos)?;

        let feats: Vec<f32> = phases.iter().flat_map(|&p| self.cond_features(p, tau)).collect();
        let feats = g.constant([c.frames, c.cond_dim()], feats)?;
        let cond = linear(g, &self.params, "cond", feats)?;
        let mut expand = vec![0.0f32; n_tok * c.frames];
        for t in 0..n_tok {
            expand[t * c.frames + t / per] = 1.0;
        }
        let expand = g.constant([n_tok, c.frames], expand)?;
        let per_token = g.matmul(expand, cond)?;
        let h = g.add(h, per_token)?;
        let mut h = g.concat_rows(&[h, cond])?;

        let att = c.attention()?;
        let total = n_tok + c.frames;
        let seg = [Segment::full(total, total)];
        for b in 0..c.blocks {
            h = attention_block(g, &self.params, &format!("blk.{b}"), h, None, &seg, &att)?;
        }
        let h = g.slice_rows(h, 0, n_tok)?;
        let h = layer_norm(g, &self.params, "out.ln", h)?;
        let out = linear(g, &self.params, "out", h)?;
        Ok(g.reshape(out, [c.frames * NUM_PARTS * c.num_queries, c.dim])?)
    }

    /// Value-level velocity on a flat `T·P·M·D` buffer.
    pub fn velocity(&self, x: &[f32], tau: f64, phases: &[f64]) -> Result<Vec<f32>> {
        let c = &self.config;
        let mut g = Graph::new();
        let xv = g.constant([c.frames * NUM_PARTS * c.num_queries, c.dim], x.to_vec())?;
        let v = self.g_velocity(&mut g, xv, tau, phases)?;
        Ok(g.value(v).to_vec())
    }

    fn phases(&self) -> Vec<f64> {
        (0..self.config.frames).map(|i| i as f64 / self.config.frames as f64).collect()
    }

    /// `x₀ = x_init + 0.1·ε` for a seed.
    pub fn initial_sample(&self, seed: u64) -> Vec<f32> {
        let mut r = rng::stream(seed, "flow-x0", 0);
        self.params
            .get("x_init")
            .expect("x_init exists")
            .tensor
            .data()
            .iter()
            .map(|&v| {
                let z: f64 = StandardNormal.sample(&mut r);
                v + (INIT_NOISE * z) as f32
            })
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        crate::tensor::save_checkpoint(&self.params, path)?;
        let cfg = serde_json::to_string_pretty(&self.config).map_err(|e| FlowError::Config(e.to_string()))?;
        std::fs::write(crate::model::config_path(path), cfg)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(crate::model::config_path(path))?;
        let config: FlowConfig = serde_json::from_str(&text).map_err(|e| FlowError::Config(e.to_string()))?;
        let params = crate::tensor::load_checkpoint(path)?;
        let reference = FlowModel::new(config.clone(), 0)?;
        for (n, p) in reference.params.iter() {
            match params.get(n) {
                Some(q) if q.tensor.shape() == p.tensor.shape() => {}
                _ => return Err(FlowError::Config(format!("checkpoint lacks `{n}` or has the wrong shape"))),
            }
        }
        Ok(Self { config, params })
    }
}

/// Mean squared difference over every entry.
pub fn fm_loss_value(pred: &[f32], target: &[f32]) -> f64 {
    let s: f64 = pred.iter().zip(target).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
    s / pred.len().max(1) as f64
}

/// Flat target of `x1` at the model's frame count.
fn target_values(model: &FlowModel, x1: &FlowSequence) -> Result<Vec<f32>> {
    let c = &model.config;
    let x1 = if x1.len() == c.frames { x1.clone() } else { resample_sequence(x1, c.frames)? };
    x1.validate()?;
    let x1 = x1.flatten();
    if x1.len() != c.numel() {
        return Err(FlowError::Sequence(format!("{} values, expected {}", x1.len(), c.numel())));
    }
    Ok(x1)
}

fn g_interpolant(g: &mut Graph, x0: Var, x1: Var, tau: f64) -> Result<Var> {
    let a = g.scale(x0, (1.0 - tau) as f32);
    let b = g.scale(x1, tau as f32);
    Ok(g.add(a, b)?)
}

/// `x_τ = (1−τ)·x₀ + τ·x₁`, evaluated with the same ops as training.
pub fn interpolant(x0: &[f32], x1: &[f32], tau: f64) -> Result<Vec<f32>> {
    if x0.len() != x1.len() || x0.is_empty() {
        return Err(FlowError::Sequence(format!("{} vs {} values", x0.len(), x1.len())));
    }
    let mut g = Graph::new();
    let a = g.constant([x0.len()], x0.to_vec())?;
    let b = g.constant([x1.len()], x1.to_vec())?;
    let x = g_interpolant(&mut g, a, b, tau)?;
    Ok(g.value(x).to_vec())
}

/// Builds the velocity regression loss for one `(τ, ε)` draw from `r`.
fn g_fm_loss(model: &FlowModel, g: &mut Graph, x1: &[f32], r: &mut impl rand::Rng) -> Result<Var> {
    let c = &model.config;
    let tau = beta_draw(r);
    let noise: Vec<f32> = (0..x1.len())
        .map(|_| {
            let z: f64 = StandardNormal.sample(r);
            (INIT_NOISE * z) as f32
        })
        .collect();
    let rows = c.frames * NUM_PARTS * c.num_queries;
    let init = g.param(&model.params, "x_init")?;
    let eps = g.constant([rows, c.dim], noise)?;
    let x0 = g.add(init, eps)?;
    let target_x1 = g.constant([rows, c.dim], x1.to_vec())?;
    let xt = g_interpolant(g, x0, target_x1, tau)?;
    let v = model.g_velocity(g, xt, tau, &model.phases())?;
    let target = g.sub(target_x1, x0)?;
    let d = g.sub(v, target)?;
    let d = g.square(d);
    Ok(g.mean(d))
}

/// One optimizer step on one target sequence; returns the loss before the
/// update.
pub fn fm_train_step(model: &mut FlowModel, x1: &FlowSequence, seed: u64, step: usize) -> Result<f64> {
    let x1 = target_values(model, x1)?;
    let mut r = rng::stream(seed, "fm-step", step as u64);
    let mut g = Graph::new();
    let loss = g_fm_loss(model, &mut g, &x1, &mut r)?;
    let value = g.scalar(loss) as f64;
    if !value.is_finite() {
        return Err(FlowError::NonFinite(step));
    }
    g.backward(loss)?;
    model.params.zero_grad();
    model.params.accumulate_grads(&g);
    model.params.adam_step(&AdamConfig {
        lr: model.config.lr,
        ..AdamConfig::default()
    });
    Ok(value)
}

/// Mean loss over `draws` fixed `(τ, ε)` draws per sequence, no update.
pub fn fm_eval_loss(model: &FlowModel, data: &[FlowSequence], draws: usize, seed: u64) -> Result<f64> {
    if data.is_empty() || draws == 0 {
        return Err(FlowError::Sequence("nothing to evaluate".into()));
    }
    let mut total = 0.0;
    for (i, x1) in data.iter().enumerate() {
        let x1 = target_values(model, x1)?;
        let mut r = rng::stream(seed, "fm-eval", i as u64);
        for _ in 0..draws {
            let mut g = Graph::new();
            let loss = g_fm_loss(model, &mut g, &x1, &mut r)?;
            total += g.scalar(loss) as f64;
        }
    }
    Ok(total / (data.len() * draws) as f64)
}

/// Train for `steps` steps cycling through `data`; returns the loss curve.
pub fn fm_train(model: &mut FlowModel, data: &[FlowSequence], steps: usize, seed: u64) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(FlowError::Sequence("no training sequences".into()));
    }
    model.params.set_all_trainable(true);
    (0..steps)
        .map(|s| fm_train_step(model, &data[s % data.len()], seed, s))
        .collect()
}

/// Euler integration of the learned field from `x₀`; `steps = 1` is the
/// one-step sampler `x̂₁ = x₀ + v_θ(x₀, 0)`.
pub fn fm_sample(model: &FlowModel, steps: usize, seed: u64) -> Result<FlowSequence> {
    if steps == 0 {
        return Err(FlowError::Config("steps must be ≥ 1".into()));
    }
    let c = &model.config;
    let mut x = model.initial_sample(seed);
    let phases = model.phases();
    let dt = 1.0 / steps as f64;
    for k in 0..steps {
        let v = model.velocity(&x, k as f64 * dt, &phases)?;
        for (xi, vi) in x.iter_mut().zip(v) {
            *xi += dt as f32 * vi;
        }
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(FlowError::NonFinite(steps));
    }
    FlowSequence::from_flat(&x, c.frames, c.num_queries, c.dim)
}

/// Mean over parts of the Chamfer distance between the first and the last
/// frame's meshes.
pub fn cycle_cd(first: &[Mesh], last: &[Mesh], samples: usize, seed: u64) -> Result<f64> {
    if first.len() != last.len() || first.is_empty() {
        return Err(FlowError::Sequence("frame mesh lists differ".into()));
    }
    let mut total = 0.0;
    for (p, (a, b)) in first.iter().zip(last).enumerate() {
        // One stream per part for both frames: identical meshes give
        // identical samples.
        let r = rng::stream(seed, "cycle-cd", p as u64);
        let pa = a.sample_surface(samples, &mut r.clone())?;
        let pb = b.sample_surface(samples, &mut r.clone())?;
        total += chamfer_distance(&pa, &pb)?;
    }
    Ok(total / first.len() as f64)
}

/// Contraction profile `s(t) = 1 − A·(1 − cos 2πt)/2`.
pub fn contraction(t: f64, amplitude: f64) -> f64 {
    1.0 - amplitude * (1.0 - (std::f64::consts::TAU * t).cos()) * 0.5
}

/// `frames` uniformly scaled copies of `spec` about its part centroid.
pub fn animate_phantom(spec: &PhantomSpec, frames: usize, amplitude: f64) -> Vec<PhantomSpec> {
    let mut pivot = [0.0; 3];
    for p in &spec.parts {
        for a in 0..3 {
            pivot[a] += p.center[a] / NUM_PARTS as f64;
        }
    }
    (0..frames)
        .map(|i| spec.scaled_about(pivot, contraction(i as f64 / frames as f64, amplitude)))
        .collect()
}

/// Encode every frame of an animation with the surface branch.
pub fn encode_sequence(model: &VecHeart, frames: &[PhantomSpec], seed: u64) -> Result<FlowSequence> {
    let n = model.config.points_per_part;
    let latents = frames
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let mut r = rng::stream(seed, "sequence-surface", i as u64);
            let clouds: Vec<Vec<Point>> = spec
                .parts
                .iter()
                .map(|p| p.sample_surface(n, &mut r).iter().map(|q| spec.to_normalized(*q)).collect())
                .collect();
            let refs: Vec<&[Point]> = clouds.iter().map(Vec::as_slice).collect();
            model.latents(Branch::Surface, &refs, &MaskVector::none())
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(FlowSequence::uniform(latents))
}

/// `frame_000.obj …` with all parts of a frame in one file (one `o` group
/// per part) and a `phases.txt` manifest.
pub fn export_obj_sequence(dir: impl AsRef<Path>, frames: &[Vec<Mesh>], phases: &[f64]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut manifest = std::fs::File::create(dir.join("phases.txt"))?;
    for (i, (meshes, phase)) in frames.iter().zip(phases).enumerate() {
        let name = format!("frame_{i:03}.obj");
        let mut out = String::new();
        let mut base = 0usize;
        for (p, m) in meshes.iter().enumerate() {
            out.push_str(&format!("o {}\n", crate::phantom::PART_NAMES[p]));
            for v in &m.vertices {
                out.push_str(&format!("v {} {} {}\n", v[0], v[1], v[2]));
            }
            for t in &m.triangles {
                out.push_str(&format!(
                    "f {} {} {}\n",
                    base + t[0] as usize + 1,
                    base + t[1] as usize + 1,
                    base + t[2] as usize + 1
                ));
            }
            base += m.vertices.len();
        }
        std::fs::write(dir.join(&name), out)?;
        writeln!(manifest, "{name} {phase}")?;
    }
    Ok(())
}
