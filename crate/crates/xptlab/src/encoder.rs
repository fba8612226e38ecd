//! A small pre-norm transformer encoder wired for past key/value injection.
//!
//! The encoder is deliberately tiny (the default is 4 layers, 4 heads,
//! d_model 64) so that full training runs finish in minutes on a CPU. Every
//! attention layer accepts an optional block of extra key/value rows that are
//! prepended to the keys and values computed from the input; queries are
//! never extended. Deep prompts from [`crate::prompts`] enter through exactly
//! this mechanism.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{NodeId, Tape, Tensor};

/// Large finite offset used to mask padded keys before softmax. Finite so the
/// debug finiteness checks stay meaningful, yet large enough that the
/// exponential underflows to exactly zero.
pub const MASK_OFFSET: f64 = -1e30;

/// Epsilon inside every layer-norm variance.
pub const LN_EPS: f64 = 1e-5;

/// Standard deviation for weight initialization.
pub const INIT_STD: f64 = 0.02;

/// Architecture and vocabulary layout of the encoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub n_classes: usize,
    pub cls_token_id: usize,
    pub pad_token_id: usize,
    pub mask_token_id: usize,
}

impl ModelConfig {
    /// The configuration used throughout the experiments. Sized so that the
    /// full multi-seed comparison finishes in well under half an hour on a
    /// single CPU core; wider or deeper variants learn no faster under the
    /// no-warmup schedule and blow that budget.
    pub fn desk_default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            d_model: 32,
            d_ff: 128,
            vocab_size: 512,
            max_seq: 32,
            n_classes: 2,
            cls_token_id: 0,
            pad_token_id: 1,
            mask_token_id: 2,
        }
    }

    /// A miniature configuration for fast unit tests.
    pub fn tiny() -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            vocab_size: 32,
            max_seq: 16,
            n_classes: 2,
            cls_token_id: 0,
            pad_token_id: 1,
            mask_token_id: 2,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return Err(Error::Input("model dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Input(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_classes < 2 {
            return Err(Error::Input("need at least two classes".into()));
        }
        if self.max_seq < 2 {
            return Err(Error::Input("max_seq must be at least 2".into()));
        }
        let specials = [self.cls_token_id, self.pad_token_id, self.mask_token_id];
        for &s in &specials {
            if s >= self.vocab_size {
                return Err(Error::Input(format!(
                    "special token id {s} outside vocabulary of size {}",
                    self.vocab_size
                )));
            }
        }
        if specials[0] == specials[1] || specials[0] == specials[2] || specials[1] == specials[2] {
            return Err(Error::Input("special token ids must be distinct".into()));
        }
        Ok(())
    }
}

/// Weights of a single transformer layer.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
}

/// All encoder weights. The backbone is everything except the classifier
/// head; the MLM head is tied to the token embeddings and owns no weights.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub token_embeddings: Tensor,
    pub position_embeddings: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_ln_gain: Tensor,
    pub final_ln_bias: Tensor,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

impl EncoderParams {
    /// Fresh weights: matrices and embeddings N(0, 0.02^2), layer-norm gains
    /// one, all biases zero. The draw order is fixed, so equal seeds give
    /// bitwise-equal parameters.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let token_embeddings = Tensor::randn(&[cfg.vocab_size, d], INIT_STD, &mut rng);
        let position_embeddings = Tensor::randn(&[cfg.max_seq, d], INIT_STD, &mut rng);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams {
                ln1_gain: Tensor::full(&[d], 1.0),
                ln1_bias: Tensor::zeros(&[d]),
                wq: Tensor::randn(&[d, d], INIT_STD, &mut rng),
                wk: Tensor::randn(&[d, d], INIT_STD, &mut rng),
                wv: Tensor::randn(&[d, d], INIT_STD, &mut rng),
                wo: Tensor::randn(&[d, d], INIT_STD, &mut rng),
                ln2_gain: Tensor::full(&[d], 1.0),
                ln2_bias: Tensor::zeros(&[d]),
                w1: Tensor::randn(&[d, cfg.d_ff], INIT_STD, &mut rng),
                w2: Tensor::randn(&[cfg.d_ff, d], INIT_STD, &mut rng),
            })
            .collect();
        Self {
            token_embeddings,
            position_embeddings,
            layers,
            final_ln_gain: Tensor::full(&[d], 1.0),
            final_ln_bias: Tensor::zeros(&[d]),
            head_weight: Tensor::randn(&[d, cfg.n_classes], INIT_STD, &mut rng),
            head_bias: Tensor::zeros(&[cfg.n_classes]),
        }
    }

    /// Re-draw only the classifier head, leaving the backbone untouched.
    pub fn reinit_head(&mut self, cfg: &ModelConfig, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.head_weight = Tensor::randn(&[cfg.d_model, cfg.n_classes], INIT_STD, &mut rng);
        self.head_bias = Tensor::zeros(&[cfg.n_classes]);
    }

    /// Backbone tensors in their canonical order.
    pub fn backbone_named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("token_embeddings".into(), &self.token_embeddings),
            ("position_embeddings".into(), &self.position_embeddings),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{l}.ln1_gain"), &layer.ln1_gain));
            out.push((format!("layer{l}.ln1_bias"), &layer.ln1_bias));
            out.push((format!("layer{l}.wq"), &layer.wq));
            out.push((format!("layer{l}.wk"), &layer.wk));
            out.push((format!("layer{l}.wv"), &layer.wv));
            out.push((format!("layer{l}.wo"), &layer.wo));
            out.push((format!("layer{l}.ln2_gain"), &layer.ln2_gain));
            out.push((format!("layer{l}.ln2_bias"), &layer.ln2_bias));
            out.push((format!("layer{l}.w1"), &layer.w1));
            out.push((format!("layer{l}.w2"), &layer.w2));
        }
        out.push(("final_ln_gain".into(), &self.final_ln_gain));
        out.push(("final_ln_bias".into(), &self.final_ln_bias));
        out
    }

    pub fn head_named(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("head_weight".into(), &self.head_weight),
            ("head_bias".into(), &self.head_bias),
        ]
    }

    /// Backbone plus head, canonical order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.backbone_named();
        out.extend(self.head_named());
        out
    }

    /// Mutable view in the same canonical order as [`Self::named`].
    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("token_embeddings".into(), &mut self.token_embeddings),
            ("position_embeddings".into(), &mut self.position_embeddings),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{l}.ln1_gain"), &mut layer.ln1_gain));
            out.push((format!("layer{l}.ln1_bias"), &mut layer.ln1_bias));
            out.push((format!("layer{l}.wq"), &mut layer.wq));
            out.push((format!("layer{l}.wk"), &mut layer.wk));
            out.push((format!("layer{l}.wv"), &mut layer.wv));
            out.push((format!("layer{l}.wo"), &mut layer.wo));
            out.push((format!("layer{l}.ln2_gain"), &mut layer.ln2_gain));
            out.push((format!("layer{l}.ln2_bias"), &mut layer.ln2_bias));
            out.push((format!("layer{l}.w1"), &mut layer.w1));
            out.push((format!("layer{l}.w2"), &mut layer.w2));
        }
        out.push(("final_ln_gain".into(), &mut self.final_ln_gain));
        out.push(("final_ln_bias".into(), &mut self.final_ln_bias));
        out.push(("head_weight".into(), &mut self.head_weight));
        out.push(("head_bias".into(), &mut self.head_bias));
        out
    }

    /// Element counts as (backbone, head).
    pub fn param_counts(&self) -> (usize, usize) {
        let backbone = self.backbone_named().iter().map(|(_, t)| t.len()).sum();
        let head = self.head_named().iter().map(|(_, t)| t.len()).sum();
        (backbone, head)
    }

    /// Little-endian serialization of backbone payloads in canonical order.
    pub fn backbone_bytes(&self) -> Vec<u8> {
        let mut bytes = Vec::new();
        for (_, t) in self.backbone_named() {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes
    }

    /// Hex SHA-256 of [`Self::backbone_bytes`], used to audit backbone
    /// freezing across a tuning run.
    pub fn backbone_checksum(&self) -> String {
        hex(&Sha256::digest(self.backbone_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Extra key/value rows for one layer, shape `[p, d_model]` each with
/// head-blocked columns.
#[derive(Debug, Clone)]
pub struct LayerKv {
    pub key: Tensor,
    pub value: Tensor,
}

/// Past key/value rows for every layer. Length must equal the layer count of
/// the encoder it is used with.
#[derive(Debug, Clone)]
pub struct PastKv {
    pub layers: Vec<LayerKv>,
}

impl PastKv {
    /// Shared prefix length across layers.
    pub fn prefix_len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.key.shape()[0])
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.layers.len() != cfg.n_layers {
            return Err(Error::Input(format!(
                "past key/values cover {} layers, model has {}",
                self.layers.len(),
                cfg.n_layers
            )));
        }
        let p = self.prefix_len();
        for (l, kv) in self.layers.iter().enumerate() {
            for (what, t) in [("key", &kv.key), ("value", &kv.value)] {
                if t.shape() != [p, cfg.d_model] {
                    return Err(Error::Input(format!(
                        "layer {l} past {what} has shape {:?}, expected [{p}, {}]",
                        t.shape(),
                        cfg.d_model
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Which parameter groups are registered as trainable leaves when binding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BindMode {
    /// Everything frozen; backward never runs.
    Inference,
    /// Backbone trainable, classifier head frozen; used for MLM pretraining
    /// where the head never enters the graph.
    Pretrain,
    /// Backbone and head trainable; no prompts expected.
    FineTune,
    /// Backbone frozen; prompts and head trainable.
    PromptTune,
    /// Everything trainable, for gradient checking.
    AllTrainable,
}

impl BindMode {
    fn backbone_trainable(self) -> bool {
        matches!(self, BindMode::Pretrain | BindMode::FineTune | BindMode::AllTrainable)
    }

    fn head_trainable(self) -> bool {
        matches!(self, BindMode::FineTune | BindMode::PromptTune | BindMode::AllTrainable)
    }

    fn prompts_trainable(self) -> bool {
        matches!(self, BindMode::PromptTune | BindMode::AllTrainable)
    }
}

/// Tape-registered weights of one layer.
pub struct BoundLayer {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
}

/// Tape-registered past key/value rows of one layer.
pub struct BoundKv {
    pub key: Tensor,
    pub value: Tensor,
}

/// Tape-registered view of the encoder (and optional past key/values), ready
/// for [`forward`]. `trainables` lists the leaves in registration order.
pub struct Bound {
    pub cfg: ModelConfig,
    pub(crate) token_embeddings: Tensor,
    pub(crate) position_embeddings: Tensor,
    pub(crate) layers: Vec<BoundLayer>,
    pub(crate) final_ln_gain: Tensor,
    pub(crate) final_ln_bias: Tensor,
    pub(crate) head_weight: Tensor,
    pub(crate) head_bias: Tensor,
    pub(crate) past: Option<Vec<BoundKv>>,
    pub trainables: Vec<(String, NodeId)>,
}

impl Bound {
    pub fn prefix_len(&self) -> usize {
        self.past
            .as_ref()
            .and_then(|p| p.first())
            .map_or(0, |kv| kv.key.shape()[0])
    }

    /// Registered weights of layer `i`, for probing single layers.
    pub fn layer(&self, i: usize) -> &BoundLayer {
        &self.layers[i]
    }

    /// Registered past key/values of layer `i`, if any were bound.
    pub fn past_layer(&self, i: usize) -> Option<&BoundKv> {
        self.past.as_ref().map(|p| &p[i])
    }
}

/// Register encoder parameters (and optional past key/values) on a tape.
///
/// The trainable leaf order is fixed: backbone in canonical order, then the
/// head, then prompt keys/values layer by layer. Every sample in a batch is
/// bound in this same order, which keeps per-sample gradient lists aligned.
pub fn bind(
    tape: &mut Tape,
    cfg: &ModelConfig,
    params: &EncoderParams,
    past: Option<&PastKv>,
    mode: BindMode,
) -> Result<Bound> {
    if params.layers.len() != cfg.n_layers {
        return Err(Error::Input(format!(
            "parameters have {} layers, config says {}",
            params.layers.len(),
            cfg.n_layers
        )));
    }
    if let Some(p) = past {
        p.validate(cfg)?;
    }

    let mut trainables = Vec::new();
    let mut reg = |tape: &mut Tape, name: String, t: &Tensor, trainable: bool| -> Tensor {
        if trainable {
            let bound = tape.leaf(t);
            trainables.push((name, bound.node().expect("leaf has a node")));
            bound
        } else {
            tape.constant(t)
        }
    };

    let bb = mode.backbone_trainable();
    let token_embeddings = reg(tape, "token_embeddings".into(), &params.token_embeddings, bb);
    let position_embeddings = reg(
        tape,
        "position_embeddings".into(),
        &params.position_embeddings,
        bb,
    );
    let layers: Vec<BoundLayer> = params
        .layers
        .iter()
        .enumerate()
        .map(|(l, layer)| BoundLayer {
            ln1_gain: reg(tape, format!("layer{l}.ln1_gain"), &layer.ln1_gain, bb),
            ln1_bias: reg(tape, format!("layer{l}.ln1_bias"), &layer.ln1_bias, bb),
            wq: reg(tape, format!("layer{l}.wq"), &layer.wq, bb),
            wk: reg(tape, format!("layer{l}.wk"), &layer.wk, bb),
            wv: reg(tape, format!("layer{l}.wv"), &layer.wv, bb),
            wo: reg(tape, format!("layer{l}.wo"), &layer.wo, bb),
            ln2_gain: reg(tape, format!("layer{l}.ln2_gain"), &layer.ln2_gain, bb),
            ln2_bias: reg(tape, format!("layer{l}.ln2_bias"), &layer.ln2_bias, bb),
            w1: reg(tape, format!("layer{l}.w1"), &layer.w1, bb),
            w2: reg(tape, format!("layer{l}.w2"), &layer.w2, bb),
        })
        .collect();
    let final_ln_gain = reg(tape, "final_ln_gain".into(), &params.final_ln_gain, bb);
    let final_ln_bias = reg(tape, "final_ln_bias".into(), &params.final_ln_bias, bb);

    let hd = mode.head_trainable();
    let head_weight = reg(tape, "head_weight".into(), &params.head_weight, hd);
    let head_bias = reg(tape, "head_bias".into(), &params.head_bias, hd);

    let past_bound = match past {
        Some(p) => {
            let pt = mode.prompts_trainable();
            let mut bound = Vec::with_capacity(p.layers.len());
            for (l, kv) in p.layers.iter().enumerate() {
                bound.push(BoundKv {
                    key: reg(tape, format!("prompt.layer{l}.key"), &kv.key, pt),
                    value: reg(tape, format!("prompt.layer{l}.value"), &kv.value, pt),
                });
            }
            Some(bound)
        }
        None => None,
    };

    Ok(Bound {
        cfg: cfg.clone(),
        token_embeddings,
        position_embeddings,
        layers,
        final_ln_gain,
        final_ln_bias,
        head_weight,
        head_bias,
        past: past_bound,
        trainables,
    })
}

/// Hidden states and the pooled CLS row from one forward pass.
pub struct EncoderOutput {
    /// Final hidden states, `[seq, d_model]`.
    pub hidden: Tensor,
    /// Row 0 of the hidden states, `[1, d_model]`.
    pub cls: Tensor,
}

/// Multi-head self-attention over `x` with optional extra key/value rows.
///
/// `past` rows are prepended to the keys and values of every head; queries
/// always come from `x` alone, so the output keeps `x`'s row count.
/// `pad_mask[i] == true` hides input position `i` from all queries; past rows
/// can never be masked.
pub fn attention_with_prefix(
    tape: &mut Tape,
    x: &Tensor,
    layer: &BoundLayer,
    past: Option<&BoundKv>,
    pad_mask: Option<&[bool]>,
    cfg: &ModelConfig,
) -> Result<Tensor> {
    let seq = x.shape()[0];
    let dh = cfg.d_head();

    let q = tape.matmul(x, &layer.wq)?;
    let k = tape.matmul(x, &layer.wk)?;
    let v = tape.matmul(x, &layer.wv)?;

    let (k_full, v_full, p) = match past {
        Some(kv) => {
            let p = kv.key.shape()[0];
            (
                tape.concat_rows(&kv.key, &k)?,
                tape.concat_rows(&kv.value, &v)?,
                p,
            )
        }
        None => (k, v, 0),
    };

    let mask = match pad_mask {
        Some(m) => {
            if m.len() != seq {
                return Err(Error::Input(format!(
                    "pad mask has {} entries for {} positions",
                    m.len(),
                    seq
                )));
            }
            let mut row = vec![0.0; p + seq];
            for (j, &hidden) in m.iter().enumerate() {
                if hidden {
                    row[p + j] = MASK_OFFSET;
                }
            }
            let full: Vec<f64> = row
                .iter()
                .cycle()
                .take(seq * (p + seq))
                .cloned()
                .collect();
            let t = Tensor::from_vec(&[seq, p + seq], full)?;
            Some(tape.constant(&t))
        }
        None => None,
    };

    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let qh = tape.slice_cols(&q, h * dh, dh)?;
        let kh = tape.slice_cols(&k_full, h * dh, dh)?;
        let vh = tape.slice_cols(&v_full, h * dh, dh)?;
        let kt = tape.transpose(&kh)?;
        let raw = tape.matmul(&qh, &kt)?;
        let mut scores = tape.scale(&raw, scale)?;
        if let Some(m) = &mask {
            scores = tape.add(&scores, m)?;
        }
        let attn = tape.softmax(&scores, 1)?;
        heads.push(tape.matmul(&attn, &vh)?);
    }
    let ctx = tape.concat_cols(&heads)?;
    Ok(tape.matmul(&ctx, &layer.wo)?)
}

/// Full encoder pass over an unpadded token sequence.
pub fn forward(tape: &mut Tape, tokens: &[usize], bound: &Bound) -> Result<EncoderOutput> {
    forward_impl(tape, tokens, bound, None)
}

/// Encoder pass over a padded buffer: positions at `real_len` and beyond are
/// masked out of attention, so the CLS representation matches a pass over
/// `tokens[..real_len]` alone, no matter what the padded tail contains.
pub fn forward_padded(
    tape: &mut Tape,
    tokens: &[usize],
    real_len: usize,
    bound: &Bound,
) -> Result<EncoderOutput> {
    if real_len == 0 || real_len > tokens.len() {
        return Err(Error::Input(format!(
            "real length {real_len} invalid for buffer of {} tokens",
            tokens.len()
        )));
    }
    let mask: Vec<bool> = (0..tokens.len()).map(|i| i >= real_len).collect();
    forward_impl(tape, tokens, bound, Some(&mask))
}

fn forward_impl(
    tape: &mut Tape,
    tokens: &[usize],
    bound: &Bound,
    pad_mask: Option<&[bool]>,
) -> Result<EncoderOutput> {
    let cfg = &bound.cfg;
    let seq = tokens.len();
    if seq == 0 {
        return Err(Error::Input("empty token sequence".into()));
    }
    if seq > cfg.max_seq {
        return Err(Error::Input(format!(
            "sequence length {seq} exceeds max_seq {}",
            cfg.max_seq
        )));
    }
    if tokens[0] != cfg.cls_token_id {
        return Err(Error::Input(format!(
            "sequences must begin with CLS (id {}), got {}",
            cfg.cls_token_id, tokens[0]
        )));
    }
    for &t in tokens {
        if t >= cfg.vocab_size {
            return Err(Error::Input(format!(
                "token id {t} outside vocabulary of size {}",
                cfg.vocab_size
            )));
        }
    }
    if let Some(past) = &bound.past {
        if past.len() != bound.layers.len() {
            return Err(Error::Input(format!(
                "past key/values cover {} layers, model has {}",
                past.len(),
                bound.layers.len()
            )));
        }
    }

    let emb = tape.gather_rows(&bound.token_embeddings, tokens)?;
    let positions: Vec<usize> = (0..seq).collect();
    let pos = tape.gather_rows(&bound.position_embeddings, &positions)?;
    let mut h = tape.add(&emb, &pos)?;

    for (l, layer) in bound.layers.iter().enumerate() {
        let normed = tape.layer_norm(&h, &layer.ln1_gain, &layer.ln1_bias, LN_EPS)?;
        let past_l = bound.past.as_ref().map(|p| &p[l]);
        let att = attention_with_prefix(tape, &normed, layer, past_l, pad_mask, cfg)?;
        h = tape.add(&h, &att)?;

        let normed2 = tape.layer_norm(&h, &layer.ln2_gain, &layer.ln2_bias, LN_EPS)?;
        let mid = tape.matmul(&normed2, &layer.w1)?;
        let act = tape.gelu(&mid)?;
        let ff = tape.matmul(&act, &layer.w2)?;
        h = tape.add(&h, &ff)?;
    }

    let hidden = tape.layer_norm(&h, &bound.final_ln_gain, &bound.final_ln_bias, LN_EPS)?;
    let cls = tape.gather_rows(&hidden, &[0])?;
    Ok(EncoderOutput { hidden, cls })
}

/// Classifier logits from a pooled CLS row, `[1, n_classes]`.
pub fn classify(tape: &mut Tape, cls: &Tensor, bound: &Bound) -> Result<Tensor> {
    let scores = tape.matmul(cls, &bound.head_weight)?;
    Ok(tape.add_bias(&scores, &bound.head_bias)?)
}

/// Masked-language-model logits, `[seq, vocab]`. The output head is tied to
/// the token embeddings: logits are hidden states times the transposed
/// embedding table.
pub fn mlm_logits(tape: &mut Tape, hidden: &Tensor, bound: &Bound) -> Result<Tensor> {
    let et = tape.transpose(&bound.token_embeddings)?;
    Ok(tape.matmul(hidden, &et)?)
}
