//! Deep prompts: learned key/value rows injected into every attention layer.
//!
//! A deep prompt never enters the token stream. Each layer owns a pair of
//! tensors shaped `[p, n_heads, d_head]` that are reshaped to `[p, d_model]`
//! (the head-blocked column layout the encoder expects) and prepended to that
//! layer's keys and values. Queries are untouched, so the backbone processes
//! the same positions it would without the prompt.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{LayerKv, ModelConfig, PastKv};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Prompt shape and initialization recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    /// Number of prompt rows per layer.
    pub length: usize,
    /// Standard deviation of the normal initializer.
    pub init_std: f64,
    /// Base seed for drawing initial prompt values.
    pub seed: u64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            length: 16,
            init_std: 0.02,
            seed: 0,
        }
    }
}

/// One layer's prompt parameters, each `[p, n_heads, d_head]`.
#[derive(Debug, Clone)]
pub struct PromptLayer {
    pub key: Tensor,
    pub value: Tensor,
}

/// Learned prompts for every encoder layer.
#[derive(Debug, Clone)]
pub struct DeepPrompt {
    pub layers: Vec<PromptLayer>,
}

impl DeepPrompt {
    pub fn prefix_len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.key.shape()[0])
    }

    /// Prompt tensors in canonical order, matching the encoder's trainable
    /// registration order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("prompt.layer{l}.key"), &layer.key));
            out.push((format!("prompt.layer{l}.value"), &layer.value));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("prompt.layer{l}.key"), &mut layer.key));
            out.push((format!("prompt.layer{l}.value"), &mut layer.value));
        }
        out
    }

    /// Total prompt parameter count: `2 * n_layers * p * d_model`.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.key.len() + l.value.len()).sum()
    }

    /// Reshape into the encoder's past key/value form, `[p, d_model]` per
    /// tensor. The payload is shared, not copied: `[p, H, d_head]` and
    /// `[p, H*d_head]` have identical row-major layouts.
    pub fn as_past_kv(&self) -> Result<PastKv> {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let p = l.key.shape()[0];
                let d: usize = l.key.shape()[1] * l.key.shape()[2];
                Ok(LayerKv {
                    key: l.key.reshaped(&[p, d]).map_err(Error::from)?,
                    value: l.value.reshaped(&[p, d]).map_err(Error::from)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PastKv { layers })
    }

    /// Rebuild from past key/value form. Inverse of [`Self::as_past_kv`].
    pub fn from_past_kv(past: &PastKv, cfg: &ModelConfig) -> Result<Self> {
        let dh = cfg.d_head();
        let layers = past
            .layers
            .iter()
            .map(|kv| {
                let p = kv.key.shape()[0];
                Ok(PromptLayer {
                    key: kv.key.reshaped(&[p, cfg.n_heads, dh]).map_err(Error::from)?,
                    value: kv.value.reshaped(&[p, cfg.n_heads, dh]).map_err(Error::from)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }
}

/// Draw fresh prompts: normal(0, init_std^2), layer by layer, key before
/// value. Equal seeds give bitwise-equal prompts.
pub fn init_prompts(cfg: &ModelConfig, pc: &PromptConfig) -> Result<DeepPrompt> {
    if pc.length > cfg.max_seq {
        return Err(Error::Input(format!(
            "prompt length {} exceeds the max_seq budget {}",
            pc.length, cfg.max_seq
        )));
    }
    if !(pc.init_std > 0.0 && pc.init_std.is_finite()) {
        return Err(Error::Input(format!(
            "prompt init_std must be positive and finite, got {}",
            pc.init_std
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(pc.seed);
    let shape = [pc.length, cfg.n_heads, cfg.d_head()];
    let layers = (0..cfg.n_layers)
        .map(|_| PromptLayer {
            key: Tensor::randn(&shape, pc.init_std, &mut rng),
            value: Tensor::randn(&shape, pc.init_std, &mut rng),
        })
        .collect();
    Ok(DeepPrompt { layers })
}

/// Fraction of parameters that are tuned: `tuned / (tuned + frozen)`.
pub fn tuned_param_ratio(tuned: usize, frozen_backbone: usize) -> Result<f64> {
    if frozen_backbone == 0 {
        return Err(Error::Internal(
            "tuned_param_ratio needs a nonzero backbone count".into(),
        ));
    }
    Ok(tuned as f64 / (tuned + frozen_backbone) as f64)
}
