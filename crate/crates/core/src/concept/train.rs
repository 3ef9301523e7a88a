//! The concept-learning loop: per step, augment the source sample, draw a
//! timestep and noise, evaluate the context, attention and RoI losses on
//! that draw, and take one Adam step on the concept token and the
//! cross-attention key/value projections.

use std::collections::BTreeMap;

use ndarray::{Array1, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::augment::{augment, AugmentationConfig, SourceSample};
use super::checkpoint::ConceptCheckpoint;
use super::losses::{attention_loss, context_loss, roi_loss, roi_loss_with_grad, total_loss};
use super::prompt::{build_prompt, build_token_prompt, ZoomTag, ROI_TEMPLATE};
use crate::backend::{ConceptToken, NoiseSample, ParamSelector, TrainableBackend};
use crate::error::{Error, Result};
use crate::masking::{soften, Resolution};
use crate::optim::Adam;
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub lambda_att: f64,
    pub lambda_roi: f64,
    pub alpha: f64,
    pub seed: u64,
    pub augmentation: AugmentationConfig,
    pub optimizer: OptimizerKind,
    /// Vocabulary word whose embedding initializes the concept token.
    pub init_word: String,
    pub token_name: String,
    pub trainable: ParamSelector,
    /// Fixed (t, noise) draws used to report the loss before and after training.
    pub eval_draws: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            learning_rate: 1e-5,
            lambda_att: 0.5,
            lambda_roi: 0.5,
            alpha: 0.5,
            seed: 0,
            augmentation: AugmentationConfig::default(),
            optimizer: OptimizerKind::Adam,
            init_word: "style".into(),
            token_name: "v*".into(),
            trainable: ParamSelector::CrossAttentionKv,
            eval_draws: 8,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidArgument("training steps must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if !(self.lambda_att >= 0.0 && self.lambda_roi >= 0.0) {
            return Err(Error::InvalidArgument("loss weights must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidArgument("alpha must lie in [0, 1]".into()));
        }
        self.augmentation.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_con: f64,
    pub l_att: f64,
    pub l_roi: f64,
    pub l_tot: f64,
}

impl LossBreakdown {
    fn mean(items: &[LossBreakdown]) -> Self {
        let n = items.len().max(1) as f64;
        let mut acc = Self::default();
        for l in items {
            acc.l_con += l.l_con;
            acc.l_att += l.l_att;
            acc.l_roi += l.l_roi;
            acc.l_tot += l.l_tot;
        }
        Self {
            l_con: acc.l_con / n,
            l_att: acc.l_att / n,
            l_roi: acc.l_roi / n,
            l_tot: acc.l_tot / n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub t: usize,
    pub losses: LossBreakdown,
}

/// CSV with columns `step,l_con,l_att,l_roi,l_tot`.
pub fn loss_trace_csv(trace: &[LossRecord]) -> String {
    let mut out = String::from("step,l_con,l_att,l_roi,l_tot\n");
    for r in trace {
        let l = r.losses;
        out.push_str(&format!("{},{},{},{},{}\n", r.step, l.l_con, l.l_att, l.l_roi, l.l_tot));
    }
    out
}

/// Gradients of the total loss for one step.
#[derive(Debug, Clone)]
pub struct StepGradients {
    pub weights: BTreeMap<String, ArrayD<f64>>,
    pub token: Array1<f64>,
}

/// Evaluates the three losses for a single `(sample, t, eps)` draw using the
/// concept token registered under `token_name`, optionally with gradients.
#[allow(clippy::too_many_arguments)]
pub fn concept_step<B: TrainableBackend>(
    backend: &B,
    token_name: &str,
    sample: &SourceSample,
    zoom: Option<ZoomTag>,
    t: usize,
    eps: &NoiseSample,
    cfg: &TrainingConfig,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<StepGradients>)> {
    let context_prompt = build_prompt(&sample.prompt_template, &sample.object_class, token_name, zoom)?;
    let roi_prompt = build_token_prompt(ROI_TEMPLATE, token_name)?;
    let c = backend.encode_prompt(&context_prompt, &[])?;
    let c_star = backend.encode_prompt(&roi_prompt, &[])?;
    let slot = c.slot_of(token_name)?;

    let x0 = backend.encode_image(sample.image.view())?;
    let (lh, lw) = x0.spatial();
    let mask_latent = sample.mask.resized(lh, lw, Resolution::Latent);
    let soft = soften(&mask_latent, cfg.alpha)?;
    let x_t = backend.add_noise(&x0, eps, t)?;

    let (eps_pred, record, tape) = backend.forward(&x_t, &c, t)?;
    let con = context_loss(eps_pred.view(), eps.data.view(), &soft)?;
    let att = attention_loss(&record, slot, &sample.mask)?;

    let (l_roi, grads) = if with_grad {
        let scaled_maps: Vec<_> = att.grad_maps.iter().map(|g| g * cfg.lambda_att).collect();
        let main = backend.backward(&tape, Some(con.grad_eps.view()), Some(&scaled_maps))?;
        let (l_roi, roi) = roi_loss_with_grad(backend, &x_t, &mask_latent, &c_star, t, eps.data.view(), cfg.lambda_roi)?;
        let trainable = backend.trainable_params(cfg.trainable).weights;
        let mut weights = BTreeMap::new();
        for name in trainable {
            let g = match (main.weights.get(&name), roi.weights.get(&name)) {
                (Some(a), Some(b)) => a + b,
                _ => return Err(Error::InvalidArgument(format!("backend returned no gradient for {name}"))),
            };
            weights.insert(name, g);
        }
        let token = c.token_gradient(&main.text, token_name) + c_star.token_gradient(&roi.text, token_name);
        (l_roi, Some(StepGradients { weights, token }))
    } else {
        (roi_loss(backend, &x_t, &mask_latent, &c_star, t, eps.data.view())?, None)
    };

    let losses = LossBreakdown {
        l_con: con.value,
        l_att: att.value,
        l_roi,
        l_tot: total_loss(con.value, att.value, l_roi, cfg.lambda_att, cfg.lambda_roi),
    };
    Ok((losses, grads))
}

/// Result of [`train_concept`].
#[derive(Debug, Clone)]
pub struct TrainOutcome<B> {
    pub checkpoint: ConceptCheckpoint,
    pub trace: Vec<LossRecord>,
    /// Mean loss over the fixed evaluation draws before the first step.
    pub initial_eval: LossBreakdown,
    /// Same draws after the last step.
    pub final_eval: LossBreakdown,
    /// The fine-tuned backend with the concept token registered.
    pub tuned: B,
}

pub fn source_digest(sample: &SourceSample) -> String {
    let mut h = Sha256::new();
    for v in sample.image.iter() {
        h.update(v.to_le_bytes());
    }
    for v in sample.mask.view().iter() {
        h.update([*v as u8]);
    }
    h.update(sample.object_class.as_bytes());
    h.update([0]);
    h.update(sample.prompt_template.as_bytes());
    hex::encode(h.finalize())
}

pub(crate) fn eval_draws(shape: (usize, usize, usize), max_t: usize, seed: u64, count: usize) -> Vec<(usize, NoiseSample)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let t = rng.random_range(1..=max_t);
            (t, NoiseSample::draw_from(shape, &mut rng, i as u64))
        })
        .collect()
}

/// Learns a concept token from one masked source image and fine-tunes the
/// cross-attention keys and values of a copy of `base`.
pub fn train_concept<B: TrainableBackend>(base: &B, sample: &SourceSample, cfg: &TrainingConfig) -> Result<TrainOutcome<B>> {
    cfg.validate()?;
    sample.mask.require_nonempty()?;
    let token_name = cfg.token_name.as_str();
    let mut tuned = base.clone();
    if tuned.token(token_name).is_some() {
        return Err(Error::DuplicateToken(token_name.to_string()));
    }
    let init = base.word_embedding(&cfg.init_word)?;
    tuned.register_token(ConceptToken::new(token_name, init.to_vec(), cfg.init_word.clone())?)?;

    let shape = base.descriptor().latent_shape;
    let max_t = base.schedule().max_timestep();
    let draws = eval_draws(shape, max_t, derive_seed(cfg.seed, "eval"), cfg.eval_draws);
    let evaluate = |backend: &B| -> Result<LossBreakdown> {
        let mut all = Vec::with_capacity(draws.len());
        for (t, eps) in &draws {
            all.push(concept_step(backend, token_name, sample, None, *t, eps, cfg, false)?.0);
        }
        Ok(LossBreakdown::mean(&all))
    };
    let initial_eval = evaluate(&tuned)?;

    let mut aug_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "augment"));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "noise"));
    let mut adam = Adam::new(cfg.learning_rate);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (augmented, zoom) = augment(sample, &cfg.augmentation, &mut aug_rng);
        let t = noise_rng.random_range(1..=max_t);
        let eps = NoiseSample::draw_from(shape, &mut noise_rng, step as u64);
        let (losses, grads) = concept_step(&tuned, token_name, &augmented, zoom, t, &eps, cfg, true)?;
        if !losses.l_tot.is_finite() {
            return Err(Error::NonFinite(format!(
                "total loss at step {step} (t={t}): l_con={} l_att={} l_roi={}",
                losses.l_con, losses.l_att, losses.l_roi
            )));
        }
        let grads = grads.expect("gradients requested");
        adam.begin_step();
        for (name, g) in &grads.weights {
            let p = tuned
                .params_mut()
                .get_mut(name)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
            adam.update(&format!("param:{name}"), p, g);
        }
        update_token(&mut tuned, &mut adam, token_name, &grads.token)?;
        trace.push(LossRecord { step, t, losses });
    }
    let final_eval = evaluate(&tuned)?;
    let checkpoint = ConceptCheckpoint::from_training(base, &tuned, cfg, source_digest(sample), &sample.object_class)?;
    Ok(TrainOutcome {
        checkpoint,
        trace,
        initial_eval,
        final_eval,
        tuned,
    })
}

pub(crate) fn update_token<B: TrainableBackend>(backend: &mut B, adam: &mut Adam, name: &str, grad: &Array1<f64>) -> Result<()> {
    let token = backend
        .token_mut(name)
        .ok_or_else(|| Error::InvalidArgument(format!("token {name} is not registered")))?;
    let mut emb = ArrayD::from_shape_vec(IxDyn(&[token.embedding.len()]), token.embedding.clone())
        .expect("1-d embedding");
    let g = grad.clone().into_dyn();
    adam.update(&format!("token:{name}"), &mut emb, &g);
    if emb.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("embedding of {name}")));
    }
    token.embedding = emb.into_raw_vec_and_offset().0;
    Ok(())
}
