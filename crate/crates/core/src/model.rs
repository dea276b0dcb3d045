//! Detector graph: patch backbone, 2D sinusoidal positions, optional prompt
//! stage, six encoder layers, connectivity, six decoder layers, fusion and
//! the class/box heads.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::connectivity::{self, ConnectivityConfig, ConnectivityError, LAYERS};
use crate::deprompt::{self, DePromptConfig, DePromptError, PromptBranchPair, PromptLayout, PromptWeight, WeightVar};
use crate::nn::{FeedForward, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamStore, Session};
use crate::posenc::sinusoidal_2d;
use crate::rng::{rng_for, stream};
use crate::tape::Var;
use crate::tensor::{Tensor, TensorError};

pub const BACKBONE_PREFIX: &str = "backbone.";
pub const QUERY_PARAM: &str = "decoder.query_pos";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_queries: usize,
    pub ffn_dim: usize,
    /// Foreground classes; the heads add one "no object" logit.
    pub n_classes: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub channels: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 6,
            n_dec_layers: 6,
            n_queries: 16,
            ffn_dim: 128,
            n_classes: 10,
            patch_size: 8,
            image_size: 64,
            channels: 1,
            dropout: 0.0,
        }
    }
}

/// A configuration field that failed validation.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub field: &'static str,
    pub message: String,
}

impl ConfigError {
    pub fn new(field: &'static str, message: impl Into<String>) -> Self {
        ConfigError { field, message: message.into() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

impl core::error::Error for ConfigError {}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ConfigError::new(
                "model.d_model",
                format!("d_model {} must be a positive multiple of n_heads {}", self.d_model, self.n_heads),
            ));
        }
        if !self.d_model.is_multiple_of(4) {
            return Err(ConfigError::new("model.d_model", "must be divisible by 4 for 2D positional embedding"));
        }
        if self.n_enc_layers != LAYERS {
            return Err(ConfigError::new("model.n_enc_layers", "must be 6"));
        }
        if self.n_dec_layers != LAYERS {
            return Err(ConfigError::new("model.n_dec_layers", "must be 6"));
        }
        if self.n_queries == 0 {
            return Err(ConfigError::new("model.n_queries", "must be positive"));
        }
        if self.ffn_dim == 0 {
            return Err(ConfigError::new("model.ffn_dim", "must be positive"));
        }
        if self.n_classes == 0 {
            return Err(ConfigError::new("model.n_classes", "must be positive"));
        }
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(ConfigError::new(
                "model.image_size",
                format!("image_size {} must be a positive multiple of patch_size {}", self.image_size, self.patch_size),
            ));
        }
        if self.channels == 0 {
            return Err(ConfigError::new("model.channels", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ConfigError::new("model.dropout", "must be in [0, 1)"));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct DetectorConfig {
    pub model: ModelConfig,
    pub deprompt: DePromptConfig,
    pub connectivity: ConnectivityConfig,
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate()?;
        self.deprompt
            .validate()
            .map_err(|e| ConfigError::new("deprompt", format!("{e}")))?;
        self.connectivity
            .validate()
            .map_err(|_| ConfigError::new("connectivity.a_scalar", "must be in [0, 1]"))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    Config(ConfigError),
    Tensor(TensorError),
    Prompt(DePromptError),
    Connectivity(ConnectivityError),
    ImageShape { expected: [usize; 3], got: Vec<usize> },
    WrongMemoryCount(usize),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::Config(e) => write!(f, "invalid config: {e}"),
            ModelError::Tensor(e) => write!(f, "{e}"),
            ModelError::Prompt(e) => write!(f, "prompt: {e}"),
            ModelError::Connectivity(e) => write!(f, "connectivity: {e}"),
            ModelError::ImageShape { expected, got } => {
                write!(f, "image shape {got:?} incompatible with expected {expected:?}")
            }
            ModelError::WrongMemoryCount(n) => write!(f, "decoder needs 6 memories, got {n}"),
        }
    }
}

impl core::error::Error for ModelError {}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Tensor(e)
    }
}

impl From<DePromptError> for ModelError {
    fn from(e: DePromptError) -> Self {
        ModelError::Prompt(e)
    }
}

impl From<ConnectivityError> for ModelError {
    fn from(e: ConnectivityError) -> Self {
        ModelError::Connectivity(e)
    }
}

impl From<ConfigError> for ModelError {
    fn from(e: ConfigError) -> Self {
        ModelError::Config(e)
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    ffn: FeedForward,
    norm2: LayerNorm,
}

impl EncoderLayer {
    fn new(i: usize, c: &ModelConfig) -> Self {
        let p = format!("encoder.{i}");
        EncoderLayer {
            attn: MultiHeadAttention::new(&format!("{p}.self_attn"), c.d_model, c.n_heads),
            norm1: LayerNorm::new(&format!("{p}.norm1"), c.d_model),
            ffn: FeedForward::new(&format!("{p}.ffn"), c.d_model, c.ffn_dim),
            norm2: LayerNorm::new(&format!("{p}.norm2"), c.d_model),
        }
    }

    fn init(&self, store: &mut ParamStore, rng: &mut crate::rng::DetRng) {
        self.attn.init(store, rng);
        self.norm1.init(store);
        self.ffn.init(store, rng);
        self.norm2.init(store);
    }

    fn forward(&self, s: &mut Session, src: Var, pos: Var) -> Result<Var, TensorError> {
        let qk = s.tape.add(src, pos)?;
        let a = self.attn.forward(s, qk, qk, src)?;
        let a = s.dropout(a)?;
        let x = s.tape.add(src, a)?;
        let x = self.norm1.forward(s, x)?;
        let f = self.ffn.forward(s, x)?;
        let f = s.dropout(f)?;
        let y = s.tape.add(x, f)?;
        self.norm2.forward(s, y)
    }
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_attn: MultiHeadAttention,
    norm1: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm2: LayerNorm,
    ffn: FeedForward,
    norm3: LayerNorm,
}

impl DecoderLayer {
    fn new(j: usize, c: &ModelConfig) -> Self {
        let p = format!("decoder.{j}");
        DecoderLayer {
            self_attn: MultiHeadAttention::new(&format!("{p}.self_attn"), c.d_model, c.n_heads),
            norm1: LayerNorm::new(&format!("{p}.norm1"), c.d_model),
            cross_attn: MultiHeadAttention::new(&format!("{p}.cross_attn"), c.d_model, c.n_heads),
            norm2: LayerNorm::new(&format!("{p}.norm2"), c.d_model),
            ffn: FeedForward::new(&format!("{p}.ffn"), c.d_model, c.ffn_dim),
            norm3: LayerNorm::new(&format!("{p}.norm3"), c.d_model),
        }
    }

    fn init(&self, store: &mut ParamStore, rng: &mut crate::rng::DetRng) {
        self.self_attn.init(store, rng);
        self.norm1.init(store);
        self.cross_attn.init(store, rng);
        self.norm2.init(store);
        self.ffn.init(store, rng);
        self.norm3.init(store);
    }

    fn forward(&self, s: &mut Session, tgt: Var, query_pos: Var, memory: Var, pos: Var) -> Result<Var, TensorError> {
        let qk = s.tape.add(tgt, query_pos)?;
        let a = self.self_attn.forward(s, qk, qk, tgt)?;
        let a = s.dropout(a)?;
        let x = s.tape.add(tgt, a)?;
        let x = self.norm1.forward(s, x)?;
        let q = s.tape.add(x, query_pos)?;
        let k = s.tape.add(memory, pos)?;
        let c = self.cross_attn.forward(s, q, k, memory)?;
        let c = s.dropout(c)?;
        let y = s.tape.add(x, c)?;
        let y = self.norm2.forward(s, y)?;
        let f = self.ffn.forward(s, y)?;
        let f = s.dropout(f)?;
        let z = s.tape.add(y, f)?;
        self.norm3.forward(s, z)
    }
}

/// Class logits `[Q, n_classes + 1]` (last column is "no object") and
/// sigmoid boxes `[Q, 4]` in `(cx, cy, w, h)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionVars {
    pub logits: Var,
    pub boxes: Var,
}

/// Every intermediate of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Memories `0..=6`; index 0 is the encoder input.
    pub memories: Vec<Var>,
    /// Memory fed to each decoder layer.
    pub decoder_memories: Vec<Var>,
    pub decoder_outputs: Vec<Var>,
    pub fused: Var,
    pub prompt_w: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Detector {
    config: DetectorConfig,
    backbone: Linear,
    prompts: PromptBranchPair,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    class_head: Mlp,
    box_head: Mlp,
    pos_embed: Tensor,
}

impl Detector {
    pub fn new(config: DetectorConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let c = &config.model;
        let patch_dim = c.patch_size * c.patch_size * c.channels;
        Ok(Detector {
            config,
            backbone: Linear::new("backbone.patch_embed", patch_dim, c.d_model),
            prompts: PromptBranchPair::new(c.d_model, c.n_heads),
            encoder: (0..LAYERS).map(|i| EncoderLayer::new(i, c)).collect(),
            decoder: (0..LAYERS).map(|j| DecoderLayer::new(j, c)).collect(),
            class_head: Mlp::new("head.class", &[c.d_model, c.d_model, c.n_classes + 1]),
            box_head: Mlp::new("head.box", &[c.d_model, c.d_model, c.d_model, 4]),
            pos_embed: sinusoidal_2d(c.grid(), c.grid(), c.d_model)?,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn prompts(&self) -> &PromptBranchPair {
        &self.prompts
    }

    pub fn pos_embed(&self) -> &Tensor {
        &self.pos_embed
    }

    /// Fresh parameters from `seed`.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = rng_for(seed, stream::INIT, 0);
        let mut store = ParamStore::new();
        let c = &self.config.model;
        self.backbone.init(&mut store, &mut rng);
        self.prompts.init(&mut store, &mut rng, self.config.deprompt.layout);
        for l in &self.encoder {
            l.init(&mut store, &mut rng);
        }
        let limit = crate::math::sqrt(3.0);
        let q = (0..c.n_queries * c.d_model).map(|_| rng.gen_range(-limit..limit)).collect();
        store.insert(QUERY_PARAM, Tensor::from_parts(alloc::vec![c.n_queries, c.d_model], q));
        for l in &self.decoder {
            l.init(&mut store, &mut rng);
        }
        self.class_head.init(&mut store, &mut rng);
        self.box_head.init(&mut store, &mut rng);
        self.config.connectivity.init_params(&mut store);
        store
    }

    /// Zeroes the final layer of both heads.
    pub fn zero_head_outputs(&self, store: &mut ParamStore) {
        self.class_head.last().init_zero(store);
        self.box_head.last().init_zero(store);
    }

    /// Makes every encoder layer a pass-through up to normalization: zero
    /// attention output projection and zero FFN.
    pub fn passthrough_encoder(&self, store: &mut ParamStore) {
        for l in &self.encoder {
            l.attn.out.init_zero(store);
            l.ffn.up.init_zero(store);
            l.ffn.down.init_zero(store);
        }
    }

    /// Flattens an `[H, W, C]` image into patch rows `[T, p*p*C]`.
    pub fn patchify(&self, image: &Tensor) -> Result<Tensor, ModelError> {
        let c = &self.config.model;
        let s = image.shape();
        if s.len() != 3 || !s[0].is_multiple_of(c.patch_size) || !s[1].is_multiple_of(c.patch_size) || s[2] != c.channels {
            return Err(ModelError::ImageShape { expected: [c.image_size, c.image_size, c.channels], got: s.to_vec() });
        }
        let (h, w, ch) = (s[0], s[1], s[2]);
        let p = c.patch_size;
        let (gh, gw) = (h / p, w / p);
        let px = image.data();
        let mut out = Vec::with_capacity(h * w * ch);
        for py in 0..gh {
            for pxi in 0..gw {
                for dy in 0..p {
                    for dx in 0..p {
                        let base = ((py * p + dy) * w + pxi * p + dx) * ch;
                        out.extend_from_slice(&px[base..base + ch]);
                    }
                }
            }
        }
        Ok(Tensor::from_parts(alloc::vec![gh * gw, p * p * ch], out))
    }

    /// Visual tokens `[T, d]` and the positional embedding `[T, d]`.
    pub fn embed_image(&self, s: &mut Session, image: &Tensor) -> Result<(Var, Var), ModelError> {
        let c = &self.config.model;
        if image.shape() != [c.image_size, c.image_size, c.channels] {
            return Err(ModelError::ImageShape {
                expected: [c.image_size, c.image_size, c.channels],
                got: image.shape().to_vec(),
            });
        }
        let patches = self.patchify(image)?;
        let x = s.tape.constant(patches);
        let tokens = self.backbone.forward(s, x)?;
        let pos = s.tape.constant(self.pos_embed.clone());
        Ok((tokens, pos))
    }

    /// Six layer-wise memories; memory `i` is layer `i` applied to memory
    /// `i - 1`, with `input` as memory 0.
    pub fn encode(&self, s: &mut Session, input: Var, pos: Var) -> Result<Vec<Var>, ModelError> {
        if s.tape.shape(input) != s.tape.shape(pos) {
            return Err(TensorError::ShapeMismatch {
                op: "encode",
                lhs: s.tape.shape(input).to_vec(),
                rhs: s.tape.shape(pos).to_vec(),
            }
            .into());
        }
        let mut out = Vec::with_capacity(LAYERS);
        let mut x = input;
        for l in &self.encoder {
            x = l.forward(s, x, pos)?;
            out.push(x);
        }
        Ok(out)
    }

    /// Runs decoder layer `j` on the `j`-th supplied memory.
    pub fn decode(&self, s: &mut Session, memories: &[Var], pos: Var) -> Result<Vec<Var>, ModelError> {
        if memories.len() != LAYERS {
            return Err(ModelError::WrongMemoryCount(memories.len()));
        }
        for &m in memories {
            if s.tape.shape(m) != s.tape.shape(pos) {
                return Err(TensorError::ShapeMismatch {
                    op: "decode",
                    lhs: s.tape.shape(m).to_vec(),
                    rhs: s.tape.shape(pos).to_vec(),
                }
                .into());
            }
        }
        let c = &self.config.model;
        let query_pos = s.var(QUERY_PARAM)?;
        let mut tgt = s.tape.constant(Tensor::zeros(alloc::vec![c.n_queries, c.d_model]));
        let mut out = Vec::with_capacity(LAYERS);
        for (layer, &mem) in self.decoder.iter().zip(memories) {
            tgt = layer.forward(s, tgt, query_pos, mem, pos)?;
            out.push(tgt);
        }
        Ok(out)
    }

    pub fn predict(&self, s: &mut Session, features: Var) -> Result<PredictionVars, ModelError> {
        let logits = self.class_head.forward(s, features)?;
        let raw = self.box_head.forward(s, features)?;
        let boxes = s.tape.sigmoid(raw)?;
        Ok(PredictionVars { logits, boxes })
    }

    /// Everything up to the fused decoder feature.
    pub fn forward(&self, s: &mut Session, image: &Tensor, w: PromptWeight) -> Result<ForwardOutput, ModelError> {
        let (tokens, pos) = self.embed_image(s, image)?;
        let x = s.tape.add(tokens, pos)?;
        let (input, prompt_w) = match self.config.deprompt.layout {
            PromptLayout::Off => (x, None),
            PromptLayout::Single => (self.prompts.base.forward(s, x)?, None),
            PromptLayout::Decoupled => {
                let wv = WeightVar::from_weight(s, w)?;
                let value = wv.value(s);
                (deprompt::deprompt_forward(s, x, &self.prompts, wv)?, Some(value))
            }
        };
        let layers = self.encode(s, input, pos)?;
        let mut memories = Vec::with_capacity(LAYERS + 1);
        memories.push(input);
        memories.extend(layers);
        let decoder_memories = connectivity::memories_for_decoder(s, &self.config.connectivity, &memories)?;
        let decoder_outputs = self.decode(s, &decoder_memories, pos)?;
        let fused = connectivity::fuse_decoder_outputs(s, self.config.connectivity.fusion, &decoder_outputs)?;
        Ok(ForwardOutput { memories, decoder_memories, decoder_outputs, fused, prompt_w })
    }
}
