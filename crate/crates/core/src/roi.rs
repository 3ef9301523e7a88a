//! Region-of-interest matching through a learned region token `w*`.
//!
//! Target matching starts `w*` from an already learned concept token and
//! optimizes only that embedding, so its attention covers the source mask.
//! The token's attention on a new image then segments the matching region.
//! Source discovery learns `w*` and the cross-attention keys and values
//! from several images that share a concept, then reads the mask the same way.

use ndarray::{Array2, Array3, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{ConceptToken, NoiseSample, ParamSelector, TrainableBackend};
use crate::concept::augment::{augment, AugmentationConfig, SourceSample};
use crate::concept::losses::{attention_loss, diffusion_mse};
use crate::concept::prompt::{build_prompt, DISCOVERY_TEMPLATE, REGION_TEMPLATE};
use crate::concept::train::{eval_draws, update_token};
use crate::error::{Error, Result};
use crate::masking::{binarize_map, normalize_min_max, resize_nearest, BinaryMask, Resolution};
use crate::optim::Adam;
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionPurpose {
    TargetMatching,
    SourceDiscovery,
}

impl RegionPurpose {
    pub fn template(self) -> &'static str {
        match self {
            RegionPurpose::TargetMatching => REGION_TEMPLATE,
            RegionPurpose::SourceDiscovery => DISCOVERY_TEMPLATE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionToken {
    pub token: ConceptToken,
    pub trained_for: RegionPurpose,
    pub object_class: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub token_name: String,
    /// Discovery only: word whose embedding initializes `w*`.
    pub init_word: String,
    /// Discovery only.
    pub augmentation: AugmentationConfig,
    pub eval_draws: usize,
}

impl Default for RegionConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            learning_rate: 1e-5,
            seed: 0,
            token_name: "w*".into(),
            init_word: "style".into(),
            augmentation: AugmentationConfig::disabled(),
            eval_draws: 8,
        }
    }
}

impl RegionConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        self.augmentation.validate()
    }
}

/// A trained region token together with the backend it lives in.
#[derive(Debug, Clone)]
pub struct RegionTraining<B> {
    pub region: RegionToken,
    pub backend: B,
    /// Per-step loss of the optimized objective.
    pub trace: Vec<f64>,
    /// Mean objective over fixed evaluation draws, before and after.
    pub initial_eval: f64,
    pub final_eval: f64,
}

/// Adds `w*` initialized from `source_token` and fits only its embedding so
/// that its attention matches the source mask.
pub fn learn_target_matcher<B: TrainableBackend>(
    backend: &B,
    source_token: &str,
    source: &SourceSample,
    cfg: &RegionConfig,
) -> Result<RegionTraining<B>> {
    cfg.validate()?;
    source.mask.require_nonempty()?;
    let v = backend
        .token(source_token)
        .ok_or_else(|| Error::InvalidArgument(format!("learned concept token [{source_token}] is not loaded")))?;
    let name = cfg.token_name.as_str();
    let mut b = backend.clone();
    b.register_token(ConceptToken::new(name, v.embedding.clone(), source_token)?)?;

    let prompt = build_prompt(REGION_TEMPLATE, &source.object_class, name, None)?;
    let x0 = b.encode_image(source.image.view())?;
    let max_t = b.schedule().max_timestep();
    let loss_at = |b: &B, t: usize, eps: &NoiseSample, with_grad: bool| -> Result<(f64, Option<ndarray::Array1<f64>>)> {
        let c = b.encode_prompt(&prompt, &[])?;
        let slot = c.slot_of(name)?;
        let x_t = b.add_noise(&x0, eps, t)?;
        let (_, record, tape) = b.forward(&x_t, &c, t)?;
        let loss = attention_loss(&record, slot, &source.mask)?;
        if !with_grad {
            return Ok((loss.value, None));
        }
        let g = b.backward(&tape, None, Some(&loss.grad_maps))?;
        Ok((loss.value, Some(c.token_gradient(&g.text, name))))
    };
    let draws = eval_draws(x0.dim(), max_t, derive_seed(cfg.seed, "eval"), cfg.eval_draws);
    let evaluate = |b: &B| -> Result<f64> {
        let mut sum = 0.0;
        for (t, eps) in &draws {
            sum += loss_at(b, *t, eps, false)?.0;
        }
        Ok(sum / draws.len().max(1) as f64)
    };

    let initial_eval = evaluate(&b)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "noise"));
    let mut adam = Adam::new(cfg.learning_rate);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let t = rng.random_range(1..=max_t);
        let eps = NoiseSample::draw_from(x0.dim(), &mut rng, step as u64);
        let (value, grad) = loss_at(&b, t, &eps, true)?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("attention loss at step {step} (t={t})")));
        }
        adam.begin_step();
        update_token(&mut b, &mut adam, name, &grad.expect("gradient requested"))?;
        trace.push(value);
    }
    let final_eval = evaluate(&b)?;
    let token = b.token(name).expect("registered above").clone();
    Ok(RegionTraining {
        region: RegionToken {
            token,
            trained_for: RegionPurpose::TargetMatching,
            object_class: source.object_class.clone(),
        },
        backend: b,
        trace,
        initial_eval,
        final_eval,
    })
}

/// Learns a fresh `w*` plus the cross-attention keys and values with the
/// plain diffusion loss over `images`, sampling one image per step.
pub fn learn_common_concept_token<B: TrainableBackend>(
    backend: &B,
    images: &[Array3<f64>],
    object_class: &str,
    cfg: &RegionConfig,
) -> Result<RegionTraining<B>> {
    cfg.validate()?;
    if images.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "concept discovery needs at least two images, got {}",
            images.len()
        )));
    }
    let name = cfg.token_name.as_str();
    let mut b = backend.clone();
    let init = b.word_embedding(&cfg.init_word)?;
    b.register_token(ConceptToken::new(name, init.to_vec(), cfg.init_word.clone())?)?;
    let prompt = build_prompt(DISCOVERY_TEMPLATE, object_class, name, None)?;
    let samples = images
        .iter()
        .map(|img| {
            let (_, h, w) = img.dim();
            SourceSample::new(img.clone(), BinaryMask::ones(h, w, Resolution::Image), object_class, DISCOVERY_TEMPLATE)
        })
        .collect::<Result<Vec<_>>>()?;
    let max_t = b.schedule().max_timestep();
    let shape = b.descriptor().latent_shape;

    let loss_at = |b: &B, image: ArrayView3<'_, f64>, t: usize, eps: &NoiseSample, with_grad: bool| {
        let c = b.encode_prompt(&prompt, &[])?;
        let x0 = b.encode_image(image)?;
        let x_t = b.add_noise(&x0, eps, t)?;
        let (pred, _, tape) = b.forward(&x_t, &c, t)?;
        let loss = diffusion_mse(pred.view(), eps.data.view())?;
        if !with_grad {
            return Ok::<_, Error>((loss.value, None));
        }
        let g = b.backward(&tape, Some(loss.grad_eps.view()), None)?;
        let token = c.token_gradient(&g.text, name);
        Ok((loss.value, Some((g.weights, token))))
    };
    let draws = eval_draws(shape, max_t, derive_seed(cfg.seed, "eval"), cfg.eval_draws);
    let evaluate = |b: &B| -> Result<f64> {
        let mut sum = 0.0;
        for s in &samples {
            for (t, eps) in &draws {
                sum += loss_at(b, s.image.view(), *t, eps, false)?.0;
            }
        }
        Ok(sum / (samples.len() * draws.len()).max(1) as f64)
    };

    let initial_eval = evaluate(&b)?;
    let trainable = b.trainable_params(ParamSelector::CrossAttentionKv).weights;
    let mut pick_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "image-pick"));
    let mut aug_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "augment"));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "noise"));
    let mut adam = Adam::new(cfg.learning_rate);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let sample = &samples[pick_rng.random_range(0..samples.len())];
        let (sample, _) = augment(sample, &cfg.augmentation, &mut aug_rng);
        let t = noise_rng.random_range(1..=max_t);
        let eps = NoiseSample::draw_from(shape, &mut noise_rng, step as u64);
        let (value, grads) = loss_at(&b, sample.image.view(), t, &eps, true)?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("diffusion loss at step {step} (t={t})")));
        }
        let (weights, token_grad) = grads.expect("gradient requested");
        adam.begin_step();
        for pname in &trainable {
            let g = weights
                .get(pname)
                .ok_or_else(|| Error::InvalidArgument(format!("backend returned no gradient for {pname}")))?;
            let p = b.params_mut().get_mut(pname).expect("trainable parameter exists");
            adam.update(&format!("param:{pname}"), p, g);
        }
        update_token(&mut b, &mut adam, name, &token_grad)?;
        trace.push(value);
    }
    let final_eval = evaluate(&b)?;
    let token = b.token(name).expect("registered above").clone();
    Ok(RegionTraining {
        region: RegionToken {
            token,
            trained_for: RegionPurpose::SourceDiscovery,
            object_class: object_class.to_string(),
        },
        backend: b,
        trace,
        initial_eval,
        final_eval,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionConfig {
    pub probe_timesteps: Vec<usize>,
    pub threshold: f64,
    pub largest_component: bool,
    pub seed: u64,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            probe_timesteps: vec![10, 25, 40],
            threshold: 0.5,
            largest_component: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub mask: BinaryMask,
    /// Min-max normalized attention, upsampled to image resolution.
    pub raw_map: Array2<f64>,
    /// Mean raw value inside the mask minus mean raw value outside.
    pub confidence: f64,
}

/// Reads the region token's attention on `image` and turns it into a mask at
/// image resolution. `backend` must have the token registered.
pub fn extract_mask<B: TrainableBackend>(
    backend: &B,
    region: &RegionToken,
    image: ArrayView3<'_, f64>,
    cfg: &ExtractionConfig,
) -> Result<MatchResult> {
    if cfg.probe_timesteps.is_empty() {
        return Err(Error::InvalidArgument("at least one probe timestep is required".into()));
    }
    let name = region.token.name.as_str();
    let prompt = build_prompt(region.trained_for.template(), &region.object_class, name, None)?;
    let c = backend.encode_prompt(&prompt, &[&region.token])?;
    let slot = c.slot_of(name)?;
    let x0 = backend.encode_image(image)?;
    let max_t = backend.schedule().max_timestep();

    let mut acc: Option<Array2<f64>> = None;
    for &t in &cfg.probe_timesteps {
        if t == 0 || t > max_t {
            return Err(Error::TimestepOutOfRange { t, min: 1, max: max_t });
        }
        let eps = NoiseSample::draw(x0.dim(), derive_seed(cfg.seed, &format!("probe-{t}")));
        let x_t = backend.add_noise(&x0, &eps, t)?;
        let (_, record) = backend.predict_noise(&x_t, &c, t)?;
        let map = record.token_map(slot)?;
        acc = Some(match acc {
            Some(a) => a + map,
            None => map,
        });
    }
    let mean = acc.expect("nonempty probes") / cfg.probe_timesteps.len() as f64;
    let (lo, hi) = mean.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if (hi - lo).is_nan() || hi - lo <= 1e-12 {
        return Err(Error::DegenerateAttention(format!(
            "attention of [{name}] is constant ({lo:.6}) over the probe timesteps; no region can be extracted"
        )));
    }
    let normalized = normalize_min_max(mean.view());
    let mut mask = binarize_map(normalized.view(), cfg.threshold, Resolution::Attention);
    if cfg.largest_component {
        mask = mask.largest_component();
    }
    mask.require_nonempty()?;
    let (_, h, w) = image.dim();
    let mask = mask.resized(h, w, Resolution::Image);
    let raw_map = resize_nearest(normalized.view(), h, w);
    let confidence = region_contrast(&raw_map, &mask);
    Ok(MatchResult { mask, raw_map, confidence })
}

fn region_contrast(raw: &Array2<f64>, mask: &BinaryMask) -> f64 {
    let (mut sin, mut nin, mut sout, mut nout) = (0.0, 0usize, 0.0, 0usize);
    for (&r, &m) in raw.iter().zip(mask.view().iter()) {
        if m == 1.0 {
            sin += r;
            nin += 1;
        } else {
            sout += r;
            nout += 1;
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    mean(sin, nin) - mean(sout, nout)
}

/// Mask of the region matching a target-matching token on a new image.
pub fn extract_target_mask<B: TrainableBackend>(
    backend: &B,
    region: &RegionToken,
    image: ArrayView3<'_, f64>,
    cfg: &ExtractionConfig,
) -> Result<MatchResult> {
    if region.trained_for != RegionPurpose::TargetMatching {
        return Err(Error::InvalidArgument("region token was not trained for target matching".into()));
    }
    extract_mask(backend, region, image, cfg)
}

/// Concept mask on one of the discovery images, usable as a source mask.
pub fn extract_source_mask<B: TrainableBackend>(
    backend: &B,
    region: &RegionToken,
    image: ArrayView3<'_, f64>,
    cfg: &ExtractionConfig,
) -> Result<MatchResult> {
    if region.trained_for != RegionPurpose::SourceDiscovery {
        return Err(Error::InvalidArgument("region token was not trained for source discovery".into()));
    }
    extract_mask(backend, region, image, cfg)
}
