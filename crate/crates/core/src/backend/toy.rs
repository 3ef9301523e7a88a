//! Desk-scale denoiser: identity image codec, hashed word embeddings, one
//! multi-head cross-attention layer (queries from latent positions, keys and
//! values from the prompt) and a linear head.
//!
//! The head predicts a clean latent `x0_hat = W_out * attn + b` and converts
//! it to a noise prediction with the schedule,
//! `eps = (x_t - sqrt(a_t) x0_hat) / sqrt(1 - a_t)`.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayD, ArrayView2, ArrayView3, Axis, Ix1, Ix2, Ix3};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::standard_normal;
use super::text::{tokenize, word_embedding, PromptPiece};
use super::{
    Backend, BackendDescriptor, BackendKind, BlockKind, ConceptToken, CrossAttentionRecord, DiffusionSchedule,
    Gradients, LatentImage, LayerTag, NoiseSample, ParamSelector, ParamSet, SlotSource, TextEmbedding, TokenSlot,
    TrainableBackend,
};
use crate::error::{Error, Result};
use crate::masking::BinaryMask;

const LAYER: &str = "attn.up.0";
const TO_Q: &str = "attn.up.0.to_q";
const POS_Q: &str = "attn.up.0.pos_q";
const TO_K: &str = "attn.up.0.to_k";
const TO_V: &str = "attn.up.0.to_v";
const TO_OUT: &str = "head.to_out";
const BIAS: &str = "head.bias";
const TIME: &str = "time.embed";

// 1 - a_t is floored here so degenerate schedules do not divide by zero.
const MIN_NOISE_VAR: f64 = 1e-12;

/// Everything needed to rebuild a toy backend bit-identically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToySpec {
    pub seed: u64,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub timesteps: usize,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            seed: 0,
            channels: 3,
            height: 16,
            width: 16,
            embed_dim: 8,
            num_heads: 2,
            timesteps: DiffusionSchedule::DEFAULT_STEPS,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyBackend {
    spec: ToySpec,
    schedule: DiffusionSchedule,
    params: ParamStore,
    tokens: BTreeMap<String, ConceptToken>,
}

/// Saved activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ToyTape {
    text: Array2<f64>,
    queries: Vec<Array2<f64>>,
    keys: Vec<Array2<f64>>,
    values: Vec<Array2<f64>>,
    attn: Vec<Array2<f64>>,
    sqrt_alpha: f64,
    inv_sigma: f64,
    shape: (usize, usize, usize),
}

impl ToyBackend {
    pub fn new(spec: ToySpec) -> Result<Self> {
        let schedule = DiffusionSchedule::scaled_linear(spec.timesteps)?;
        Self::with_schedule(spec, schedule)
    }

    pub fn with_schedule(spec: ToySpec, schedule: DiffusionSchedule) -> Result<Self> {
        if [spec.channels, spec.height, spec.width, spec.embed_dim, spec.num_heads].contains(&0) {
            return Err(Error::InvalidArgument("toy backend dims must be >= 1".into()));
        }
        if schedule.max_timestep() != spec.timesteps {
            return Err(Error::InvalidArgument("schedule length does not match spec.timesteps".into()));
        }
        let ToySpec {
            channels: c,
            height: h,
            width: w,
            embed_dim: e,
            num_heads: nh,
            ..
        } = spec;
        let d = e;
        let n = h * w;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(spec.seed);
        let mut gauss = |shape: &[usize], std: f64| {
            ArrayD::from_shape_simple_fn(shape, || std * standard_normal(&mut rng))
        };
        let to_q = gauss(&[nh, d, c], (1.0 / c as f64).sqrt());
        let to_k = gauss(&[nh, d, e], (1.0 / e as f64).sqrt());
        let to_v = gauss(&[nh, d, e], (1.0 / e as f64).sqrt());
        let to_out = gauss(&[c, nh * d], (1.0 / (nh * d) as f64).sqrt());
        let bias = gauss(&[c], 0.1);

        // random Fourier features of normalized (row, col) coordinates
        let mut pos = ArrayD::zeros(vec![nh, n, d]);
        for head in 0..nh {
            for k in 0..d {
                let fy = 2.0 * standard_normal(&mut rng);
                let fx = 2.0 * standard_normal(&mut rng);
                let phase = rng.random::<f64>() * std::f64::consts::TAU;
                for i in 0..h {
                    for j in 0..w {
                        let y = (i as f64 + 0.5) / h as f64 * 2.0 - 1.0;
                        let x = (j as f64 + 0.5) / w as f64 * 2.0 - 1.0;
                        pos[[head, i * w + j, k]] = 2f64.sqrt() * (fy * y + fx * x + phase).cos();
                    }
                }
            }
        }
        let time = ArrayD::from_shape_fn(vec![spec.timesteps + 1, c], |ix| {
            let (t, ch) = (ix[0] as f64, ix[1] as f64);
            0.1 * ((t + 1.0) * (ch + 1.0) * 0.7).sin()
        });

        let mut params = ParamStore::default();
        params.insert(TO_Q, to_q);
        params.insert(POS_Q, pos);
        params.insert(TO_K, to_k);
        params.insert(TO_V, to_v);
        params.insert(TO_OUT, to_out);
        params.insert(BIAS, bias);
        params.insert(TIME, time);
        Ok(Self {
            spec,
            schedule,
            params,
            tokens: BTreeMap::new(),
        })
    }

    pub fn spec(&self) -> &ToySpec {
        &self.spec
    }

    pub fn tokens(&self) -> impl Iterator<Item = &ConceptToken> {
        self.tokens.values()
    }

    /// Replaces all weights. Names and shapes must match the current store.
    pub fn load_params(&mut self, store: ParamStore) -> Result<()> {
        for (name, t) in self.params.iter() {
            match store.get(name) {
                Some(new) if new.shape() == t.shape() => {}
                _ => return Err(Error::InvalidArgument(format!("parameter {name} missing or misshapen"))),
            }
        }
        self.params = store;
        Ok(())
    }

    /// Rewires the positional query term so that the token at `slot` of
    /// `prompt` attends with logit `+gain` inside `region` and `-gain`
    /// outside, leaving every other token's logits untouched. Content queries
    /// are scaled by `query_scale`.
    pub fn plant_attention(
        &mut self,
        prompt: &TextEmbedding,
        slot: usize,
        region: &BinaryMask,
        gain: f64,
        query_scale: f64,
    ) -> Result<()> {
        let (h, w) = (self.spec.height, self.spec.width);
        if region.dims() != (h, w) {
            return Err(Error::shape("plant_attention", format!("{:?}", (h, w)), format!("{:?}", region.dims())));
        }
        let d = self.spec.embed_dim;
        let to_k = self.param3(TO_K).to_owned();
        let mut pos = Array3::<f64>::zeros((self.spec.num_heads, h * w, d));
        for head in 0..self.spec.num_heads {
            let keys = prompt.data.dot(&to_k.index_axis(Axis(0), head).t());
            let target = keys.row(slot).to_owned();
            // Gram-Schmidt against the other tokens' keys
            let mut basis: Vec<Array1<f64>> = Vec::new();
            for (j, k) in keys.rows().into_iter().enumerate() {
                if j == slot {
                    continue;
                }
                let mut v = k.to_owned();
                for b in &basis {
                    v = &v - &(b * b.dot(&v));
                }
                let norm = v.dot(&v).sqrt();
                if norm > 1e-12 {
                    basis.push(v / norm);
                }
            }
            let mut u = target.clone();
            for b in &basis {
                u = &u - &(b * b.dot(&u));
            }
            let overlap = u.dot(&target);
            if overlap.abs() < 1e-9 {
                return Err(Error::InvalidArgument(
                    "cannot plant attention: token key lies in the span of the other keys".into(),
                ));
            }
            let dir = u * ((d as f64).sqrt() / overlap);
            for p in 0..h * w {
                let sign = if region.view()[[p / w, p % w]] == 1.0 { 1.0 } else { -1.0 };
                pos.slice_mut(s![head, p, ..]).assign(&(&dir * (sign * gain)));
            }
        }
        *self.params.get_mut(POS_Q).expect("pos_q") = pos.into_dyn();
        let q = self.params.get_mut(TO_Q).expect("to_q");
        q.mapv_inplace(|v| v * query_scale);
        Ok(())
    }

    fn param3(&self, name: &str) -> ndarray::ArrayView3<'_, f64> {
        self.params[name].view().into_dimensionality::<Ix3>().expect("rank-3 parameter")
    }

    fn param2(&self, name: &str) -> ArrayView2<'_, f64> {
        self.params[name].view().into_dimensionality::<Ix2>().expect("rank-2 parameter")
    }

    fn check_latent(&self, x: &LatentImage) -> Result<()> {
        let want = (self.spec.channels, self.spec.height, self.spec.width);
        if x.dim() != want {
            return Err(Error::shape("toy denoiser latent", format!("{want:?}"), format!("{:?}", x.dim())));
        }
        Ok(())
    }

    fn record(&self, attn: &[Array2<f64>]) -> CrossAttentionRecord {
        let (h, w) = (self.spec.height, self.spec.width);
        let n_tok = attn[0].ncols();
        let mut maps = Array4::zeros((attn.len(), n_tok, h, w));
        for (head, a) in attn.iter().enumerate() {
            for p in 0..h * w {
                for k in 0..n_tok {
                    maps[[head, k, p / w, p % w]] = a[[p, k]];
                }
            }
        }
        CrossAttentionRecord {
            maps: vec![maps],
            layer_tags: vec![LayerTag {
                name: LAYER.into(),
                block: BlockKind::Up,
            }],
        }
    }
}

impl std::ops::Index<&str> for ParamStore {
    type Output = ArrayD<f64>;

    fn index(&self, name: &str) -> &ArrayD<f64> {
        self.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }
}

/// `[C, H, W]` -> `[H * W, C]`
fn to_rows(x: ArrayView3<'_, f64>) -> Array2<f64> {
    let (ch, h, w) = x.dim();
    Array2::from_shape_fn((h * w, ch), |(p, c)| x[[c, p / w, p % w]])
}

fn from_rows(rows: &Array2<f64>, (ch, h, w): (usize, usize, usize)) -> Array3<f64> {
    Array3::from_shape_fn((ch, h, w), |(c, i, j)| rows[[i * w + j, c]])
}

fn softmax_rows(mut s: Array2<f64>) -> Array2<f64> {
    for mut row in s.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    s
}

impl Backend for ToyBackend {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            kind: BackendKind::Toy,
            latent_shape: (self.spec.channels, self.spec.height, self.spec.width),
            attention_resolutions: vec![(self.spec.height, self.spec.width)],
            trainable_selector: format!("{TO_K}, {TO_V} and registered concept tokens"),
            toy: Some(self.spec),
        }
    }

    fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    fn encode_image(&self, image: ArrayView3<'_, f64>) -> Result<LatentImage> {
        let (ch, h, w) = image.dim();
        if ch != self.spec.channels || h != self.spec.height || w != self.spec.width {
            return Err(Error::shape(
                "encode_image",
                format!("{:?}", (self.spec.channels, self.spec.height, self.spec.width)),
                format!("{:?}", (ch, h, w)),
            ));
        }
        LatentImage::new(image.to_owned(), 1)
    }

    fn decode_latent(&self, latent: &LatentImage) -> Result<Array3<f64>> {
        self.check_latent(latent)?;
        if latent.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent".into()));
        }
        Ok(latent.data.mapv(|v| v.clamp(0.0, 1.0)))
    }

    fn word_embedding(&self, word: &str) -> Result<Array1<f64>> {
        Ok(word_embedding(&word.to_lowercase(), self.spec.seed, self.spec.embed_dim))
    }

    fn encode_prompt(&self, template: &str, tokens: &[&ConceptToken]) -> Result<TextEmbedding> {
        let pieces = tokenize(template)?;
        let e = self.spec.embed_dim;
        let mut data = Array2::zeros((pieces.len(), e));
        let mut slots = Vec::with_capacity(pieces.len());
        for (pos, piece) in pieces.into_iter().enumerate() {
            match piece {
                PromptPiece::Word(word) => {
                    data.row_mut(pos).assign(&word_embedding(&word, self.spec.seed, e));
                    slots.push(TokenSlot {
                        position: pos,
                        source: SlotSource::Word(word),
                    });
                }
                PromptPiece::Concept(name) => {
                    let token = tokens
                        .iter()
                        .copied()
                        .find(|t| t.name == name)
                        .or_else(|| self.tokens.get(&name))
                        .ok_or_else(|| Error::UnknownPlaceholder(format!("[{name}]")))?;
                    if token.embedding.len() != e {
                        return Err(Error::shape("concept token embedding", e, token.embedding.len()));
                    }
                    data.row_mut(pos).assign(&Array1::from(token.embedding.clone()));
                    slots.push(TokenSlot {
                        position: pos,
                        source: SlotSource::Concept(name),
                    });
                }
            }
        }
        Ok(TextEmbedding { data, slots })
    }

    fn predict_noise(&self, x_t: &LatentImage, c: &TextEmbedding, t: usize) -> Result<(NoiseSample, CrossAttentionRecord)> {
        let (eps, record, _) = self.forward(x_t, c, t)?;
        Ok((NoiseSample { data: eps, seed: 0 }, record))
    }
}

impl TrainableBackend for ToyBackend {
    type Tape = ToyTape;

    fn forward(&self, x_t: &LatentImage, c: &TextEmbedding, t: usize) -> Result<(Array3<f64>, CrossAttentionRecord, ToyTape)> {
        self.schedule.check_timestep(t, 1)?;
        self.check_latent(x_t)?;
        let ToySpec {
            channels: ch,
            height: h,
            width: w,
            embed_dim: e,
            num_heads: nh,
            ..
        } = self.spec;
        if c.data.ncols() != e || c.data.nrows() == 0 {
            return Err(Error::shape("text embedding", format!("[n, {e}]"), format!("{:?}", c.data.dim())));
        }
        let d = e;
        let n = h * w;
        let scale = 1.0 / (d as f64).sqrt();

        // positions x channels, plus the timestep embedding
        let x = to_rows(x_t.data.view());
        let time = self.params[TIME].view().into_dimensionality::<Ix2>().expect("rank-2");
        let hidden = &x + &time.row(t);

        let (to_q, pos, to_k, to_v) = (self.param3(TO_Q), self.param3(POS_Q), self.param3(TO_K), self.param3(TO_V));
        let mut queries = Vec::with_capacity(nh);
        let mut keys = Vec::with_capacity(nh);
        let mut values = Vec::with_capacity(nh);
        let mut attn = Vec::with_capacity(nh);
        let mut out = Array2::zeros((n, nh * d));
        for head in 0..nh {
            let q = hidden.dot(&to_q.index_axis(Axis(0), head).t()) + pos.index_axis(Axis(0), head);
            let k = c.data.dot(&to_k.index_axis(Axis(0), head).t());
            let v = c.data.dot(&to_v.index_axis(Axis(0), head).t());
            let a = softmax_rows(q.dot(&k.t()) * scale);
            out.slice_mut(s![.., head * d..(head + 1) * d]).assign(&a.dot(&v));
            queries.push(q);
            keys.push(k);
            values.push(v);
            attn.push(a);
        }
        let bias = self.params[BIAS].view().into_dimensionality::<Ix1>().expect("rank-1");
        let x0_hat = out.dot(&self.param2(TO_OUT).t()) + bias;

        let a_t = self.schedule.alpha_bar(t);
        let sqrt_alpha = a_t.sqrt();
        let inv_sigma = 1.0 / (1.0 - a_t).max(MIN_NOISE_VAR).sqrt();
        let eps_rows = (&x - &(x0_hat * sqrt_alpha)) * inv_sigma;
        let eps = from_rows(&eps_rows, (ch, h, w));
        if eps.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("toy denoiser output".into()));
        }
        let record = self.record(&attn);
        let tape = ToyTape {
            text: c.data.clone(),
            queries,
            keys,
            values,
            attn,
            sqrt_alpha,
            inv_sigma,
            shape: (ch, h, w),
        };
        Ok((eps, record, tape))
    }

    fn backward(&self, tape: &ToyTape, grad_eps: Option<ArrayView3<'_, f64>>, grad_maps: Option<&[Array4<f64>]>) -> Result<Gradients> {
        let (ch, h, w) = tape.shape;
        let n = h * w;
        let nh = self.spec.num_heads;
        let d = self.spec.embed_dim;
        let e = self.spec.embed_dim;
        let n_tok = tape.text.nrows();
        let scale = 1.0 / (d as f64).sqrt();

        let g_eps = match grad_eps {
            Some(g) => {
                if g.dim() != tape.shape {
                    return Err(Error::shape("backward grad_eps", format!("{:?}", tape.shape), format!("{:?}", g.dim())));
                }
                to_rows(g)
            }
            None => Array2::zeros((n, ch)),
        };
        if let Some(maps) = grad_maps {
            if maps.len() != 1 || maps[0].dim() != (nh, n_tok, h, w) {
                return Err(Error::shape("backward grad_maps", format!("[{nh}, {n_tok}, {h}, {w}]"), "other"));
            }
        }

        let mut g_x = &g_eps * tape.inv_sigma;
        let g_x0 = &g_eps * (-tape.sqrt_alpha * tape.inv_sigma);
        let g_out = g_x0.dot(&self.param2(TO_OUT));

        let (to_q, to_k, to_v) = (self.param3(TO_Q), self.param3(TO_K), self.param3(TO_V));
        let mut g_text = Array2::zeros((n_tok, e));
        let mut g_to_k = Array3::zeros((nh, d, e));
        let mut g_to_v = Array3::zeros((nh, d, e));
        for head in 0..nh {
            let a = &tape.attn[head];
            let g_o = g_out.slice(s![.., head * d..(head + 1) * d]);
            let mut g_a = g_o.dot(&tape.values[head].t());
            if let Some(maps) = grad_maps {
                let gm = maps[0].index_axis(Axis(0), head);
                for p in 0..n {
                    for k in 0..n_tok {
                        g_a[[p, k]] += gm[[k, p / w, p % w]];
                    }
                }
            }
            let g_v = a.t().dot(&g_o);
            // softmax backward, row by row
            let row_dot = (a * &g_a).sum_axis(Axis(1)).insert_axis(Axis(1));
            let g_s = a * &(&g_a - &row_dot);
            let g_q = g_s.dot(&tape.keys[head]) * scale;
            let g_k = g_s.t().dot(&tape.queries[head]) * scale;

            g_x += &g_q.dot(&to_q.index_axis(Axis(0), head));
            g_to_k.index_axis_mut(Axis(0), head).assign(&g_k.t().dot(&tape.text));
            g_to_v.index_axis_mut(Axis(0), head).assign(&g_v.t().dot(&tape.text));
            g_text += &g_k.dot(&to_k.index_axis(Axis(0), head));
            g_text += &g_v.dot(&to_v.index_axis(Axis(0), head));
        }
        let latent = from_rows(&g_x, (ch, h, w));
        let mut weights = BTreeMap::new();
        weights.insert(TO_K.to_string(), g_to_k.into_dyn());
        weights.insert(TO_V.to_string(), g_to_v.into_dyn());
        Ok(Gradients {
            latent,
            text: g_text,
            weights,
        })
    }

    fn trainable_params(&self, selector: ParamSelector) -> ParamSet {
        let weights = match selector {
            ParamSelector::CrossAttentionKv => vec![TO_K.to_string(), TO_V.to_string()],
            ParamSelector::FreezeAll => vec![],
        };
        ParamSet {
            weights,
            tokens: self.tokens.keys().cloned().collect(),
        }
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn register_token(&mut self, token: ConceptToken) -> Result<()> {
        if token.embedding.len() != self.spec.embed_dim {
            return Err(Error::shape("register_token", self.spec.embed_dim, token.embedding.len()));
        }
        if self.tokens.contains_key(&token.name) {
            return Err(Error::DuplicateToken(token.name));
        }
        self.tokens.insert(token.name.clone(), token);
        Ok(())
    }

    fn token(&self, name: &str) -> Option<&ConceptToken> {
        self.tokens.get(name)
    }

    fn token_mut(&mut self, name: &str) -> Option<&mut ConceptToken> {
        self.tokens.get_mut(name)
    }
}
