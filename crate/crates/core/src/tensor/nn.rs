//! Layers built from tape ops: linear maps, layer norm, pre-norm attention
//! blocks and the Fourier positional embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::normal_tensor;
use super::{Graph, ParamStore, Real, Result, Segment, Tensor, TensorError, Var};

/// Octaves per axis of the Fourier point embedding.
/// Initial scale of the projections that write into the residual stream.
pub const RESIDUAL_INIT_SCALE: f64 = 0.1;
pub const FOURIER_OCTAVES: usize = 5;
/// Width of the raw feature vector: the coordinates, then sin and cos per
/// axis per octave.
pub const FOURIER_DIM: usize = 3 + 3 * 2 * FOURIER_OCTAVES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub ffn_hidden: usize,
}

impl AttentionConfig {
    /// `head_dim = model_dim / num_heads`, feed-forward width `4·model_dim`.
    pub fn new(model_dim: usize, num_heads: usize) -> Result<Self> {
        let cfg = Self {
            model_dim,
            num_heads,
            head_dim: if num_heads == 0 { 0 } else { model_dim / num_heads },
            ffn_hidden: 4 * model_dim,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.num_heads == 0 || self.head_dim == 0 || self.ffn_hidden == 0 {
            return Err(TensorError::Invalid(format!("non-positive attention config {self:?}")));
        }
        if self.num_heads * self.head_dim != self.model_dim {
            return Err(TensorError::Invalid(format!(
                "{} heads × {} != {}",
                self.num_heads, self.head_dim, self.model_dim
            )));
        }
        Ok(())
    }
}

pub fn init_linear<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    init_linear_scaled(store, name, fan_in, fan_out, 1.0, rng)
}

/// [`init_linear`] with the weight deviation multiplied by `gain`.
pub fn init_linear_scaled<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    gain: f64,
    rng: &mut impl Rng,
) -> Result<()> {
    let std = gain / (fan_in as f64).sqrt();
    store.insert(format!("{name}.w"), normal_tensor(&[fan_in, fan_out], std, rng))?;
    store.insert(format!("{name}.b"), Tensor::zeros([fan_out]))?;
    Ok(())
}

pub fn linear<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, name: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{name}.w"))?;
    let b = g.param(store, &format!("{name}.b"))?;
    g.linear(x, w, Some(b))
}

pub fn init_layer_norm<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<()> {
    store.insert(format!("{name}.gamma"), Tensor::from_fn([dim], |_| T::one()))?;
    store.insert(format!("{name}.beta"), Tensor::zeros([dim]))?;
    Ok(())
}

pub fn layer_norm<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, name: &str, x: Var) -> Result<Var> {
    let gm = g.param(store, &format!("{name}.gamma"))?;
    let bt = g.param(store, &format!("{name}.beta"))?;
    g.layer_norm(x, Some((gm, bt)))
}

/// Registers the projections of one multi-head attention under `prefix`.
pub fn init_multihead_attention<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    cfg: &AttentionConfig,
    rng: &mut impl Rng,
) -> Result<()> {
    for p in ["q", "k", "v"] {
        init_linear(store, &format!("{prefix}.{p}"), cfg.model_dim, cfg.model_dim, rng)?;
    }
    init_linear_scaled(store, &format!("{prefix}.o"), cfg.model_dim, cfg.model_dim, RESIDUAL_INIT_SCALE, rng)?;
    Ok(())
}

/// Project, attend per head, concatenate heads, project out.
pub fn multihead_attention<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    query: Var,
    context: Var,
    segments: &[Segment],
    cfg: &AttentionConfig,
) -> Result<Var> {
    if g.shape(query).last() != Some(&cfg.model_dim) || g.shape(context).last() != Some(&cfg.model_dim) {
        return Err(TensorError::ShapeMismatch {
            op: "multihead_attention",
            lhs: g.shape(query).to_vec(),
            rhs: g.shape(context).to_vec(),
        });
    }
    let q = linear(g, store, &format!("{prefix}.q"), query)?;
    let k = linear(g, store, &format!("{prefix}.k"), context)?;
    let v = linear(g, store, &format!("{prefix}.v"), context)?;
    let a = g.attention(q, k, v, cfg.num_heads, segments)?;
    linear(g, store, &format!("{prefix}.o"), a)
}

/// Registers a pre-norm transformer block. `cross` adds a separate norm for
/// the context rows.
pub fn init_attention_block<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    cfg: &AttentionConfig,
    cross: bool,
    rng: &mut impl Rng,
) -> Result<()> {
    cfg.validate()?;
    init_layer_norm(store, &format!("{prefix}.ln_q"), cfg.model_dim)?;
    if cross {
        init_layer_norm(store, &format!("{prefix}.ln_kv"), cfg.model_dim)?;
    }
    init_multihead_attention(store, &format!("{prefix}.attn"), cfg, rng)?;
    init_layer_norm(store, &format!("{prefix}.ln_ffn"), cfg.model_dim)?;
    init_linear(store, &format!("{prefix}.ffn1"), cfg.model_dim, cfg.ffn_hidden, rng)?;
    init_linear_scaled(store, &format!("{prefix}.ffn2"), cfg.ffn_hidden, cfg.model_dim, RESIDUAL_INIT_SCALE, rng)?;
    Ok(())
}

/// `h = x + MHA(LN(x), LN(ctx)); out = h + FFN(LN(h))`, FFN with GELU.
/// With `context = None` the block is self-attention over `x`.
pub fn attention_block<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    context: Option<Var>,
    segments: &[Segment],
    cfg: &AttentionConfig,
) -> Result<Var> {
    let xn = layer_norm(g, store, &format!("{prefix}.ln_q"), x)?;
    let ctx = match context {
        Some(c) => layer_norm(g, store, &format!("{prefix}.ln_kv"), c)?,
        None => xn,
    };
    let a = multihead_attention(g, store, &format!("{prefix}.attn"), xn, ctx, segments, cfg)?;
    let h = g.add(x, a)?;
    let hn = layer_norm(g, store, &format!("{prefix}.ln_ffn"), h)?;
    let f = linear(g, store, &format!("{prefix}.ffn1"), hn)?;
    let f = g.gelu(f);
    let f = linear(g, store, &format!("{prefix}.ffn2"), f)?;
    g.add(h, f)
}

/// Raw features `x ++ [sin(π·2^k·x_a)]_{a,k} ++ [cos(π·2^k·x_a)]_{a,k}`,
/// axis-major within each trig half.
pub fn fourier_features<T: Real>(points: &[[f64; 3]]) -> Result<Tensor<T>> {
    if points.is_empty() {
        return Err(TensorError::Invalid("no points to embed".into()));
    }
    let mut data = Vec::with_capacity(points.len() * FOURIER_DIM);
    for p in points {
        if p.iter().any(|c| !c.is_finite()) {
            return Err(TensorError::NonFinite(format!("point {p:?}")));
        }
        let half = 3 * FOURIER_OCTAVES;
        let start = data.len();
        data.resize(start + FOURIER_DIM, T::zero());
        let (raw, row) = data[start..].split_at_mut(3);
        for (a, &x) in p.iter().enumerate() {
            raw[a] = T::lit(x);
            for k in 0..FOURIER_OCTAVES {
                let arg = std::f64::consts::PI * (1u32 << k) as f64 * x;
                row[a * FOURIER_OCTAVES + k] = T::lit(arg.sin());
                row[half + a * FOURIER_OCTAVES + k] = T::lit(arg.cos());
            }
        }
    }
    Tensor::new([points.len(), FOURIER_DIM], data)
}

pub fn init_posemb<T: Real>(store: &mut ParamStore<T>, prefix: &str, dim: usize, rng: &mut impl Rng) -> Result<()> {
    init_linear(store, prefix, FOURIER_DIM, dim, rng)
}

/// Fourier features followed by a learned linear map to the model width.
pub fn fourier_posemb<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    points: &[[f64; 3]],
) -> Result<Var> {
    let feats = g.leaf(fourier_features(points)?);
    linear(g, store, prefix, feats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fourier_origin_and_half() {
        let f = fourier_features::<f64>(&[[0.0, 0.0, 0.0], [0.5, 0.0, 0.0]]).unwrap();
        let (o, h) = f.data().split_at(FOURIER_DIM);
        let half = 3 * FOURIER_OCTAVES;
        assert!(o[..3 + half].iter().all(|v| *v == 0.0));
        assert!(o[3 + half..].iter().all(|v| *v == 1.0));
        assert_eq!(h[0], 0.5);
        assert!((h[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fourier_rejects_nan() {
        assert!(fourier_features::<f32>(&[[f64::NAN, 0.0, 0.0]]).is_err());
    }

    #[test]
    fn posemb_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        init_posemb(&mut store, "pe", 32, &mut rng).unwrap();
        let mut g = Graph::new();
        let pts: Vec<[f64; 3]> = (0..5).map(|i| [i as f64 * 0.1, 0.0, -0.2]).collect();
        let e = fourier_posemb(&mut g, &store, "pe", &pts).unwrap();
        assert_eq!(g.shape(e), &[5, 32]);
    }

    #[test]
    fn config_validation() {
        assert!(AttentionConfig::new(32, 4).is_ok());
        assert_eq!(AttentionConfig::new(32, 4).unwrap().head_dim, 8);
        assert!(AttentionConfig::new(30, 4).is_err());
    }

    #[test]
    fn mha_output_shape_large() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = AttentionConfig::new(32, 4).unwrap();
        let mut store = ParamStore::<f32>::new();
        init_multihead_attention(&mut store, "a", &cfg, &mut rng).unwrap();
        let mut g = Graph::new();
        let q = g.leaf(normal_tensor(&[256, 32], 1.0, &mut rng));
        let kv = g.leaf(normal_tensor(&[2048, 32], 1.0, &mut rng));
        let o = multihead_attention(&mut g, &store, "a", q, kv, &[Segment::full(256, 2048)], &cfg).unwrap();
        assert_eq!(g.shape(o), &[256, 32]);
    }
}
