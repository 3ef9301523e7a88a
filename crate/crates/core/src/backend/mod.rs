//! Contract over a latent text-to-image diffusion model, plus a deterministic
//! toy implementation small enough to verify every formula by brute force.

mod params;
mod schedule;
mod text;
mod toy;

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3, Array4, ArrayD, ArrayView3, Axis};
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{resize_bilinear, resize_bilinear_adjoint};

pub use params::{read_param_files, write_param_files, ParamStore};
pub use schedule::{DiffusionSchedule, Sampler};
pub use text::{tokenize, word_embedding, PromptPiece};
pub use toy::{ToyBackend, ToySpec};

/// A latent tensor `[channels, height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentImage {
    pub data: Array3<f64>,
    pub scale_factor: usize,
}

impl LatentImage {
    pub fn new(data: Array3<f64>, scale_factor: usize) -> Result<Self> {
        let (_, h, w) = data.dim();
        if h == 0 || w == 0 {
            return Err(Error::InvalidArgument("latent spatial dims must be >= 1".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent".into()));
        }
        Ok(Self { data, scale_factor })
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn spatial(&self) -> (usize, usize) {
        let (_, h, w) = self.data.dim();
        (h, w)
    }

    pub(crate) fn with_data(&self, data: Array3<f64>) -> Self {
        Self {
            data,
            scale_factor: self.scale_factor,
        }
    }
}

/// Gaussian noise drawn from a seeded stream.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSample {
    pub data: Array3<f64>,
    pub seed: u64,
}

impl NoiseSample {
    pub fn draw(shape: (usize, usize, usize), seed: u64) -> Self {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Self::draw_from(shape, &mut rng, seed)
    }

    pub fn draw_from(shape: (usize, usize, usize), rng: &mut impl rand::Rng, seed: u64) -> Self {
        let data = Array3::from_shape_simple_fn(shape, || standard_normal(rng));
        Self { data, seed }
    }
}

pub(crate) fn standard_normal(rng: &mut impl rand::Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// A learnable pseudo-word appended to the text encoder vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptToken {
    pub name: String,
    pub embedding: Vec<f64>,
    pub init_source: String,
}

impl ConceptToken {
    pub fn new(name: impl Into<String>, embedding: Vec<f64>, init_source: impl Into<String>) -> Result<Self> {
        let token = Self {
            name: name.into(),
            embedding,
            init_source: init_source.into(),
        };
        if token.name.is_empty() || token.name.contains(['[', ']']) {
            return Err(Error::InvalidArgument(format!("invalid token name `{}`", token.name)));
        }
        if token.embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding of `{}`", token.name)));
        }
        Ok(token)
    }

    /// `[name]`, the form the token takes inside prompt templates.
    pub fn placeholder(&self) -> String {
        format!("[{}]", self.name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotSource {
    Concept(String),
    Word(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSlot {
    pub position: usize,
    pub source: SlotSource,
}

/// Encoded prompt `[num_tokens, embed_dim]` with the provenance of each row.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub data: Array2<f64>,
    pub slots: Vec<TokenSlot>,
}

impl TextEmbedding {
    pub fn num_tokens(&self) -> usize {
        self.data.nrows()
    }

    /// Position of a concept token in the prompt.
    pub fn slot_of(&self, name: &str) -> Result<usize> {
        self.slots
            .iter()
            .find(|s| matches!(&s.source, SlotSource::Concept(n) if n == name))
            .map(|s| s.position)
            .ok_or_else(|| Error::TokenNotInPrompt(name.to_string()))
    }

    /// Sums the gradient rows that belong to concept token `name`.
    pub fn token_gradient(&self, grad: &Array2<f64>, name: &str) -> Array1<f64> {
        let mut out = Array1::zeros(self.data.ncols());
        for slot in &self.slots {
            if matches!(&slot.source, SlotSource::Concept(n) if n == name) {
                out += &grad.row(slot.position);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Down,
    Mid,
    Up,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerTag {
    pub name: String,
    pub block: BlockKind,
}

/// Cross-attention probabilities, one `[heads, tokens, h, w]` tensor per
/// recorded layer. Only upsampling-block layers are recorded.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttentionRecord {
    pub maps: Vec<Array4<f64>>,
    pub layer_tags: Vec<LayerTag>,
}

impl CrossAttentionRecord {
    /// Largest deviation of the per-position token sums from 1.
    pub fn max_normalization_error(&self) -> f64 {
        self.maps
            .iter()
            .flat_map(|m| m.sum_axis(Axis(1)).into_iter().map(|s| (s - 1.0).abs()))
            .fold(0.0, f64::max)
    }

    /// Smallest recorded attention grid, by area.
    pub fn common_resolution(&self) -> (usize, usize) {
        self.maps
            .iter()
            .map(|m| {
                let (_, _, h, w) = m.dim();
                (h, w)
            })
            .min_by_key(|&(h, w)| h * w)
            .unwrap_or((0, 0))
    }

    /// Map of one token: mean over heads, bilinearly resized to the common
    /// resolution, then mean over layers.
    pub fn token_map(&self, slot: usize) -> Result<Array2<f64>> {
        let (h, w) = self.common_resolution();
        if self.maps.is_empty() {
            return Err(Error::InvalidArgument("attention record is empty".into()));
        }
        let mut acc = Array2::zeros((h, w));
        for m in &self.maps {
            if slot >= m.dim().1 {
                return Err(Error::InvalidArgument(format!("token slot {slot} out of range")));
            }
            let head_mean = m.index_axis(Axis(1), slot).mean_axis(Axis(0)).expect("heads >= 1");
            acc += &resize_bilinear(head_mean.view(), h, w);
        }
        Ok(acc / self.maps.len() as f64)
    }

    /// Adjoint of [`token_map`](Self::token_map): spreads a gradient on the
    /// aggregated map back over every layer, head and position.
    pub fn token_map_adjoint(&self, slot: usize, grad: &Array2<f64>) -> Vec<Array4<f64>> {
        let layers = self.maps.len() as f64;
        self.maps
            .iter()
            .map(|m| {
                let (heads, _, h, w) = m.dim();
                let back = resize_bilinear_adjoint(grad.view(), h, w) / (layers * heads as f64);
                let mut g = Array4::zeros(m.dim());
                for head in 0..heads {
                    g.slice_mut(ndarray::s![head, slot, .., ..]).assign(&back);
                }
                g
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Toy,
    External,
}

/// Which denoiser weights an optimizer may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamSelector {
    /// Key and value projections of every cross-attention layer.
    CrossAttentionKv,
    /// No denoiser weights; only registered tokens.
    FreezeAll,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    pub latent_shape: (usize, usize, usize),
    pub attention_resolutions: Vec<(usize, usize)>,
    pub trainable_selector: String,
    /// Parameters needed to rebuild a toy backend bit-identically.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub toy: Option<ToySpec>,
}

/// Named tensors an optimizer is allowed to update.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParamSet {
    pub weights: Vec<String>,
    pub tokens: Vec<String>,
}

/// Gradients of a scalar with respect to the latent, the prompt rows and
/// the trainable weights.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub latent: Array3<f64>,
    pub text: Array2<f64>,
    pub weights: BTreeMap<String, ArrayD<f64>>,
}

/// Inference surface of a latent diffusion model.
pub trait Backend {
    fn descriptor(&self) -> BackendDescriptor;

    fn schedule(&self) -> &DiffusionSchedule;

    fn encode_image(&self, image: ArrayView3<'_, f64>) -> Result<LatentImage>;

    /// Decodes to an RGB tensor clipped to [0, 1].
    fn decode_latent(&self, latent: &LatentImage) -> Result<Array3<f64>>;

    /// Embedding of an ordinary vocabulary word.
    fn word_embedding(&self, word: &str) -> Result<Array1<f64>>;

    /// Resolves `[name]` placeholders against `tokens` first, then against
    /// tokens registered with the backend.
    fn encode_prompt(&self, template: &str, tokens: &[&ConceptToken]) -> Result<TextEmbedding>;

    fn predict_noise(&self, x_t: &LatentImage, c: &TextEmbedding, t: usize) -> Result<(NoiseSample, CrossAttentionRecord)>;

    fn add_noise(&self, x0: &LatentImage, eps: &NoiseSample, t: usize) -> Result<LatentImage> {
        Ok(x0.with_data(self.schedule().add_noise(x0.data.view(), eps.data.view(), t)?))
    }

    fn denoise_step(&self, x_t: &LatentImage, eps_pred: &NoiseSample, t: usize) -> Result<LatentImage> {
        Ok(x_t.with_data(self.schedule().denoise_step(x_t.data.view(), eps_pred.data.view(), t)?))
    }
}

/// A backend that exposes reverse-mode gradients and mutable weights, which
/// is what concept learning, guidance and RoI matching need.
pub trait TrainableBackend: Backend + Clone {
    /// Intermediates saved by [`forward`](Self::forward) for the backward pass.
    type Tape;

    fn forward(&self, x_t: &LatentImage, c: &TextEmbedding, t: usize) -> Result<(Array3<f64>, CrossAttentionRecord, Self::Tape)>;

    /// Pulls back upstream gradients on the predicted noise and on the
    /// recorded attention maps.
    fn backward(&self, tape: &Self::Tape, grad_eps: Option<ArrayView3<'_, f64>>, grad_maps: Option<&[Array4<f64>]>) -> Result<Gradients>;

    fn trainable_params(&self, selector: ParamSelector) -> ParamSet;

    fn params(&self) -> &ParamStore;

    fn params_mut(&mut self) -> &mut ParamStore;

    fn register_token(&mut self, token: ConceptToken) -> Result<()>;

    fn token(&self, name: &str) -> Option<&ConceptToken>;

    fn token_mut(&mut self, name: &str) -> Option<&mut ConceptToken>;

    /// Digest of every weight *not* selected by `selector`.
    fn frozen_digest(&self, selector: ParamSelector) -> String {
        let trainable = self.trainable_params(selector).weights;
        self.params().digest(|name| !trainable.iter().any(|t| t == name))
    }
}
