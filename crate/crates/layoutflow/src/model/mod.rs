//! The vector-field network: a small permutation-equivariant
//! transformer encoder over element slots.
//!
//! # Architecture
//!
//! Each real element is embedded in two halves: a geometry half
//! (`4 -> dim/2`) and a type half (`bits -> dim/2`), each with a learned
//! additive mask vector that flags whether the channel carries condition
//! content. The halves are concatenated and fused (`dim -> dim`) into the
//! token stream. Pre-layer-norm encoder blocks follow: full self-attention
//! over the real tokens, a sinusoidal-time MLP output added to every token
//! after each attention block, and a GELU feed-forward. A final layer norm
//! and linear head project every token back to its `4 + bits` field slice.
//! Padded slots never enter the computation and their outputs are exactly
//! zero; there is no positional encoding, so tokens commute.
//!
//! Forward returns the retained activations; `backward` consumes them and
//! produces parameter gradients by hand-rolled reverse-mode accumulation.

mod backward;
mod forward;
mod ops;

pub use forward::ForwardTrace;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::ConditionMask;
use crate::data::{FlowVector, GEOMETRY_DIMS};
use crate::error::{Error, Result};
use crate::scalar::{s, Scalar};

/// Variance of a layer-norm denominator guard.
pub(crate) const LN_EPS: f64 = 1e-5;

/// Frequency span of the sinusoidal time features.
const TIME_FREQ_MAX: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ff_dim: usize,
    pub nmax: usize,
    pub bits: usize,
    pub time_embed_dim: usize,
}

impl ModelConfig {
    /// Desk-scale default used by the test suites and the CLI.
    pub fn desk(nmax: usize, bits: usize) -> Self {
        ModelConfig {
            layers: 2,
            heads: 4,
            dim: 64,
            ff_dim: 256,
            nmax,
            bits,
            time_embed_dim: 32,
        }
    }

    /// Full-scale configuration (4 layers, 8 heads, width 512).
    pub fn full(nmax: usize, bits: usize) -> Self {
        ModelConfig {
            layers: 4,
            heads: 8,
            dim: 512,
            ff_dim: 2048,
            nmax,
            bits,
            time_embed_dim: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.nmax == 0 || self.bits == 0 || self.ff_dim == 0 {
            return Err(Error::domain("model dimensions must be positive"));
        }
        if self.dim == 0 || self.dim % 2 != 0 {
            return Err(Error::domain("model width must be positive and even"));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::domain(format!(
                "width {} must divide into {} heads",
                self.dim, self.heads
            )));
        }
        if self.time_embed_dim < 4 || self.time_embed_dim % 2 != 0 {
            return Err(Error::domain("time embedding width must be even and at least 4"));
        }
        Ok(())
    }

    /// Scalars per element slot the network consumes and produces.
    pub fn slot_dims(&self) -> usize {
        GEOMETRY_DIMS + self.bits
    }

    pub fn half(&self) -> usize {
        self.dim / 2
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Dense layer `y = W x + b` with `w` stored row-major `[out x in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<S> {
    pub w: Vec<S>,
    pub b: Vec<S>,
    pub out_dim: usize,
    pub in_dim: usize,
}

impl<S: Scalar> Linear<S> {
    fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Linear { w: vec![S::zero(); out_dim * in_dim], b: vec![S::zero(); out_dim], out_dim, in_dim }
    }

    fn init(out_dim: usize, in_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = s::<S>((1.0 / in_dim as f64).sqrt());
        let mut lin = Linear::zeros(out_dim, in_dim);
        for w in &mut lin.w {
            *w = std * S::standard_normal(rng);
        }
        lin
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<S> {
    pub gain: Vec<S>,
    pub bias: Vec<S>,
}

impl<S: Scalar> LayerNorm<S> {
    fn unit(dim: usize) -> Self {
        LayerNorm { gain: vec![S::one(); dim], bias: vec![S::zero(); dim] }
    }

    fn zeros(dim: usize) -> Self {
        LayerNorm { gain: vec![S::zero(); dim], bias: vec![S::zero(); dim] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<S> {
    pub ln1: LayerNorm<S>,
    pub wq: Linear<S>,
    pub wk: Linear<S>,
    pub wv: Linear<S>,
    pub wo: Linear<S>,
    pub ln2: LayerNorm<S>,
    pub ff1: Linear<S>,
    pub ff2: Linear<S>,
}

/// All learnable tensors. `tensors()`/`tensors_mut()` expose them in one
/// fixed canonical order shared by the optimizer, the checkpoint format
/// and the gradient checks.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters<S> {
    pub geom_embed: Linear<S>,
    pub type_embed: Linear<S>,
    /// Additive geometry-mask vectors, indexed by the `m_pos` flag.
    pub pos_mask_embed: [Vec<S>; 2],
    /// Additive type-mask vectors, indexed by the `m_type` flag.
    pub type_mask_embed: [Vec<S>; 2],
    pub fuse: Linear<S>,
    pub time_mlp1: Linear<S>,
    pub time_mlp2: Linear<S>,
    pub layers: Vec<EncoderLayer<S>>,
    pub final_ln: LayerNorm<S>,
    pub output: Linear<S>,
}

impl<S: Scalar> ModelParameters<S> {
    /// Zero-valued parameters (the shape for gradients and moments).
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let half = cfg.half();
        ModelParameters {
            geom_embed: Linear::zeros(half, GEOMETRY_DIMS),
            type_embed: Linear::zeros(half, cfg.bits),
            pos_mask_embed: [vec![S::zero(); half], vec![S::zero(); half]],
            type_mask_embed: [vec![S::zero(); half], vec![S::zero(); half]],
            fuse: Linear::zeros(cfg.dim, cfg.dim),
            time_mlp1: Linear::zeros(cfg.dim, cfg.time_embed_dim),
            time_mlp2: Linear::zeros(cfg.dim, cfg.dim),
            layers: (0..cfg.layers)
                .map(|_| EncoderLayer {
                    ln1: LayerNorm::zeros(cfg.dim),
                    wq: Linear::zeros(cfg.dim, cfg.dim),
                    wk: Linear::zeros(cfg.dim, cfg.dim),
                    wv: Linear::zeros(cfg.dim, cfg.dim),
                    wo: Linear::zeros(cfg.dim, cfg.dim),
                    ln2: LayerNorm::zeros(cfg.dim),
                    ff1: Linear::zeros(cfg.ff_dim, cfg.dim),
                    ff2: Linear::zeros(cfg.dim, cfg.ff_dim),
                })
                .collect(),
            final_ln: LayerNorm::zeros(cfg.dim),
            output: Linear::zeros(cfg.slot_dims(), cfg.dim),
        }
    }

    /// Fresh parameters: weights `N(0, 1/fan_in)`, biases zero, layer
    /// norms at identity, mask embeddings `N(0, 2/dim)`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let half = cfg.half();
        let embed_std = s::<S>((1.0 / half as f64).sqrt());
        let embed = |rng: &mut ChaCha8Rng| {
            (0..half).map(|_| embed_std * S::standard_normal(rng)).collect::<Vec<S>>()
        };
        ModelParameters {
            geom_embed: Linear::init(half, GEOMETRY_DIMS, &mut rng),
            type_embed: Linear::init(half, cfg.bits, &mut rng),
            pos_mask_embed: [embed(&mut rng), embed(&mut rng)],
            type_mask_embed: [embed(&mut rng), embed(&mut rng)],
            fuse: Linear::init(cfg.dim, cfg.dim, &mut rng),
            time_mlp1: Linear::init(cfg.dim, cfg.time_embed_dim, &mut rng),
            time_mlp2: Linear::init(cfg.dim, cfg.dim, &mut rng),
            layers: (0..cfg.layers)
                .map(|_| EncoderLayer {
                    ln1: LayerNorm::unit(cfg.dim),
                    wq: Linear::init(cfg.dim, cfg.dim, &mut rng),
                    wk: Linear::init(cfg.dim, cfg.dim, &mut rng),
                    wv: Linear::init(cfg.dim, cfg.dim, &mut rng),
                    wo: Linear::init(cfg.dim, cfg.dim, &mut rng),
                    ln2: LayerNorm::unit(cfg.dim),
                    ff1: Linear::init(cfg.ff_dim, cfg.dim, &mut rng),
                    ff2: Linear::init(cfg.dim, cfg.ff_dim, &mut rng),
                })
                .collect(),
            final_ln: LayerNorm::unit(cfg.dim),
            output: Linear::init(cfg.slot_dims(), cfg.dim, &mut rng),
        }
    }

    /// Tensors in canonical order with stable names.
    pub fn tensors(&self) -> Vec<(String, &[S])> {
        let mut out: Vec<(String, &[S])> = vec![
            ("geom_embed.w".into(), &self.geom_embed.w),
            ("geom_embed.b".into(), &self.geom_embed.b),
            ("type_embed.w".into(), &self.type_embed.w),
            ("type_embed.b".into(), &self.type_embed.b),
            ("pos_mask_embed.0".into(), &self.pos_mask_embed[0]),
            ("pos_mask_embed.1".into(), &self.pos_mask_embed[1]),
            ("type_mask_embed.0".into(), &self.type_mask_embed[0]),
            ("type_mask_embed.1".into(), &self.type_mask_embed[1]),
            ("fuse.w".into(), &self.fuse.w),
            ("fuse.b".into(), &self.fuse.b),
            ("time_mlp1.w".into(), &self.time_mlp1.w),
            ("time_mlp1.b".into(), &self.time_mlp1.b),
            ("time_mlp2.w".into(), &self.time_mlp2.w),
            ("time_mlp2.b".into(), &self.time_mlp2.b),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.ln1.gain"), &l.ln1.gain));
            out.push((format!("layer{i}.ln1.bias"), &l.ln1.bias));
            out.push((format!("layer{i}.wq.w"), &l.wq.w));
            out.push((format!("layer{i}.wq.b"), &l.wq.b));
            out.push((format!("layer{i}.wk.w"), &l.wk.w));
            out.push((format!("layer{i}.wk.b"), &l.wk.b));
            out.push((format!("layer{i}.wv.w"), &l.wv.w));
            out.push((format!("layer{i}.wv.b"), &l.wv.b));
            out.push((format!("layer{i}.wo.w"), &l.wo.w));
            out.push((format!("layer{i}.wo.b"), &l.wo.b));
            out.push((format!("layer{i}.ln2.gain"), &l.ln2.gain));
            out.push((format!("layer{i}.ln2.bias"), &l.ln2.bias));
            out.push((format!("layer{i}.ff1.w"), &l.ff1.w));
            out.push((format!("layer{i}.ff1.b"), &l.ff1.b));
            out.push((format!("layer{i}.ff2.w"), &l.ff2.w));
            out.push((format!("layer{i}.ff2.b"), &l.ff2.b));
        }
        out.push(("final_ln.gain".into(), &self.final_ln.gain));
        out.push(("final_ln.bias".into(), &self.final_ln.bias));
        out.push(("output.w".into(), &self.output.w));
        out.push(("output.b".into(), &self.output.b));
        out
    }

    /// Mutable view in the same canonical order as [`Self::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Vec<S>)> {
        let [pm0, pm1] = &mut self.pos_mask_embed;
        let [tm0, tm1] = &mut self.type_mask_embed;
        let mut out: Vec<(String, &mut Vec<S>)> = vec![
            ("geom_embed.w".into(), &mut self.geom_embed.w),
            ("geom_embed.b".into(), &mut self.geom_embed.b),
            ("type_embed.w".into(), &mut self.type_embed.w),
            ("type_embed.b".into(), &mut self.type_embed.b),
            ("pos_mask_embed.0".into(), pm0),
            ("pos_mask_embed.1".into(), pm1),
            ("type_mask_embed.0".into(), tm0),
            ("type_mask_embed.1".into(), tm1),
            ("fuse.w".into(), &mut self.fuse.w),
            ("fuse.b".into(), &mut self.fuse.b),
            ("time_mlp1.w".into(), &mut self.time_mlp1.w),
            ("time_mlp1.b".into(), &mut self.time_mlp1.b),
            ("time_mlp2.w".into(), &mut self.time_mlp2.w),
            ("time_mlp2.b".into(), &mut self.time_mlp2.b),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.ln1.gain"), &mut l.ln1.gain));
            out.push((format!("layer{i}.ln1.bias"), &mut l.ln1.bias));
            out.push((format!("layer{i}.wq.w"), &mut l.wq.w));
            out.push((format!("layer{i}.wq.b"), &mut l.wq.b));
            out.push((format!("layer{i}.wk.w"), &mut l.wk.w));
            out.push((format!("layer{i}.wk.b"), &mut l.wk.b));
            out.push((format!("layer{i}.wv.w"), &mut l.wv.w));
            out.push((format!("layer{i}.wv.b"), &mut l.wv.b));
            out.push((format!("layer{i}.wo.w"), &mut l.wo.w));
            out.push((format!("layer{i}.wo.b"), &mut l.wo.b));
            out.push((format!("layer{i}.ln2.gain"), &mut l.ln2.gain));
            out.push((format!("layer{i}.ln2.bias"), &mut l.ln2.bias));
            out.push((format!("layer{i}.ff1.w"), &mut l.ff1.w));
            out.push((format!("layer{i}.ff1.b"), &mut l.ff1.b));
            out.push((format!("layer{i}.ff2.w"), &mut l.ff2.w));
            out.push((format!("layer{i}.ff2.b"), &mut l.ff2.b));
        }
        out.push(("final_ln.gain".into(), &mut self.final_ln.gain));
        out.push(("final_ln.bias".into(), &mut self.final_ln.bias));
        out.push(("output.w".into(), &mut self.output.w));
        out.push(("output.b".into(), &mut self.output.b));
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Element-wise `self += other`.
    pub fn add_assign(&mut self, other: &Self) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    /// Element-wise `self *= factor`.
    pub fn scale(&mut self, factor: S) {
        for (_, t) in self.tensors_mut() {
            for x in t.iter_mut() {
                *x *= factor;
            }
        }
    }

    /// Flattens every tensor, in canonical order, widened to `f64`.
    pub fn to_flat_f64(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter().map(|&v| v.as_f64()))
            .collect()
    }

    /// Rebuilds parameters from a canonical-order flat vector.
    pub fn from_flat_f64(cfg: &ModelConfig, flat: &[f64]) -> Result<Self> {
        let mut params = Self::zeros(cfg);
        let expected = params.num_params();
        if flat.len() != expected {
            return Err(Error::format(format!(
                "parameter vector holds {} values, model needs {expected}",
                flat.len()
            )));
        }
        let mut offset = 0;
        for (_, t) in params.tensors_mut() {
            for x in t.iter_mut() {
                *x = s(flat[offset]);
                offset += 1;
            }
        }
        Ok(params)
    }
}

/// Sinusoidal time features: `[sin(w_i t) .. , cos(w_i t) ..]` with the
/// frequencies geometrically spaced from 1 to 1000.
pub fn time_features<S: Scalar>(t: S, time_embed_dim: usize) -> Vec<S> {
    let half = time_embed_dim / 2;
    let mut feats = Vec::with_capacity(2 * half);
    for i in 0..half {
        let expo = if half > 1 { i as f64 / (half - 1) as f64 } else { 0.0 };
        let w = s::<S>(TIME_FREQ_MAX.powf(expo));
        feats.push((w * t).sin());
    }
    for i in 0..half {
        let expo = if half > 1 { i as f64 / (half - 1) as f64 } else { 0.0 };
        let w = s::<S>(TIME_FREQ_MAX.powf(expo));
        feats.push((w * t).cos());
    }
    feats
}

/// Configuration plus parameters: the callable network.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorFieldModel<S> {
    pub config: ModelConfig,
    pub params: ModelParameters<S>,
}

impl<S: Scalar> VectorFieldModel<S> {
    /// Fresh, randomly initialized network.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ModelParameters::init(&config, seed);
        Ok(VectorFieldModel { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ModelParameters<S>) -> Result<Self> {
        config.validate()?;
        let expected = ModelParameters::<S>::zeros(&config).num_params();
        if params.num_params() != expected {
            return Err(Error::contract("parameter shapes do not match the config"));
        }
        Ok(VectorFieldModel { config, params })
    }

    /// Predicted field at `(t, x)` under the condition mask, plus the
    /// retained activations for [`Self::backward`]. Padded slots of the
    /// output are exactly zero.
    pub fn forward(
        &self,
        x: &FlowVector<S>,
        t: S,
        mask: &ConditionMask<S>,
    ) -> Result<(Vec<S>, ForwardTrace<S>)> {
        forward::run(self, x, t, mask)
    }

    /// Parameter gradients given the output adjoint `d_out` (same length
    /// as the forward output).
    pub fn backward(&self, trace: &ForwardTrace<S>, d_out: &[S]) -> Result<ModelParameters<S>> {
        backward::run(self, trace, d_out)
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }
}
