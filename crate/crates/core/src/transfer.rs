//! Concept transfer into a masked target region, and two-stage generation.
//!
//! Editing noises the target latent to `t_start`, then at every step blends
//! the out-of-mask region back from the target, nudges the latent so the
//! concept token's attention matches the target mask, and denoises. A final
//! blend against the clean target makes out-of-mask preservation exact.

use std::ops::RangeInclusive;

use ndarray::{Array2, Array3, ArrayView3, Zip};
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, LatentImage, NoiseSample, TextEmbedding, TrainableBackend};
use crate::concept::losses::{attention_objective, attention_target};
use crate::concept::prompt::{build_object_prompt, build_prompt, GENERATION_BASE_TEMPLATE, GENERATION_CONCEPT_TEMPLATE};
use crate::error::{Error, Result};
use crate::masking::{BinaryMask, Resolution};
use crate::seed::derive_seed;

/// `t_start` values outside this window are accepted with a warning.
pub const T_START_WINDOW: RangeInclusive<usize> = 5..=15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlendMode {
    /// Reference is the target re-noised to the current step with the cached noise.
    NoiseMatched,
    /// Reference is the noised start latent at every step.
    FixedStart,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditConfig {
    pub t_start: usize,
    /// Guidance step size; 0 disables guidance.
    pub eta: f64,
    pub guidance_iters: usize,
    pub blend_mode: BlendMode,
    pub seed: u64,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            t_start: 10,
            eta: 0.05,
            guidance_iters: 1,
            blend_mode: BlendMode::NoiseMatched,
            seed: 0,
        }
    }
}

impl EditConfig {
    pub fn validate(&self, max_t: usize) -> Result<()> {
        if self.t_start > max_t {
            return Err(Error::TimestepOutOfRange {
                t: self.t_start,
                min: 0,
                max: max_t,
            });
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidArgument(format!("eta must be finite and >= 0, got {}", self.eta)));
        }
        Ok(())
    }
}

/// Warning text for a `t_start` outside [`T_START_WINDOW`].
pub fn t_start_warning(t_start: usize) -> Option<String> {
    (!T_START_WINDOW.contains(&t_start)).then(|| {
        format!(
            "t_start = {t_start} lies outside the recommended window {}..={}",
            T_START_WINDOW.start(),
            T_START_WINDOW.end()
        )
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisedStart {
    pub latent: LatentImage,
    /// Noise used for the start latent, reused for noise-matched blending.
    pub eps: NoiseSample,
}

pub fn noise_to_tstart<B: Backend>(backend: &B, x_tg: &LatentImage, t_start: usize, seed: u64) -> Result<NoisedStart> {
    let max_t = backend.schedule().max_timestep();
    if t_start > max_t {
        return Err(Error::TimestepOutOfRange {
            t: t_start,
            min: 0,
            max: max_t,
        });
    }
    if let Some(w) = t_start_warning(t_start) {
        log::warn!("{w}");
    }
    let eps = NoiseSample::draw(x_tg.dim(), derive_seed(seed, "edit-noise"));
    Ok(NoisedStart {
        latent: backend.add_noise(x_tg, &eps, t_start)?,
        eps,
    })
}

/// `mask * x_t + (1 - mask) * reference`, selecting entries exactly.
pub fn blend_step(x_t: &LatentImage, reference: &LatentImage, mask: &BinaryMask) -> Result<LatentImage> {
    if x_t.dim() != reference.dim() {
        return Err(Error::shape("blend reference", format!("{:?}", x_t.dim()), format!("{:?}", reference.dim())));
    }
    if mask.resolution() != Resolution::Latent || mask.dims() != x_t.spatial() {
        return Err(Error::shape(
            "blend mask (latent resolution)",
            format!("{:?}", x_t.spatial()),
            format!("{:?} at {:?}", mask.dims(), mask.resolution()),
        ));
    }
    let m = mask.view();
    let mut out = reference.data.clone();
    Zip::indexed(&mut out).and(&x_t.data).for_each(|(_, i, j), o, &x| {
        if m[[i, j]] == 1.0 {
            *o = x;
        }
    });
    Ok(x_t.with_data(out))
}

/// Attention objective of `slot` at `x` and its gradient with respect to `x`.
pub fn guidance_gradient<B: TrainableBackend>(
    backend: &B,
    x: &LatentImage,
    c: &TextEmbedding,
    slot: usize,
    t: usize,
    target: &Array2<f64>,
) -> Result<(f64, Array3<f64>)> {
    let (_, record, tape) = backend.forward(x, c, t)?;
    let obj = attention_objective(&record, slot, target)?;
    let grads = backend.backward(&tape, None, Some(&obj.grad_maps))?;
    if grads.latent.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("guidance gradient at t={t}")));
    }
    Ok((obj.value, grads.latent))
}

/// One gradient step `x - eta * grad` on the attention objective of
/// `token_name` against `mask` (bilinearly resized to the attention grid).
pub fn guidance_step<B: TrainableBackend>(
    backend: &B,
    x: &LatentImage,
    c: &TextEmbedding,
    token_name: &str,
    t: usize,
    mask: &BinaryMask,
    eta: f64,
) -> Result<LatentImage> {
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::InvalidArgument(format!("eta must be finite and >= 0, got {eta}")));
    }
    if eta == 0.0 {
        return Ok(x.clone());
    }
    let slot = c.slot_of(token_name)?;
    let target = guidance_target(backend, x, c, t, mask)?;
    let (_, grad) = guidance_gradient(backend, x, c, slot, t, &target)?;
    Ok(x.with_data(descend(x.data.view(), &grad, eta)))
}

fn descend(x: ArrayView3<'_, f64>, grad: &Array3<f64>, eta: f64) -> Array3<f64> {
    &x - &(grad * eta)
}

fn guidance_target<B: Backend>(backend: &B, x: &LatentImage, c: &TextEmbedding, t: usize, mask: &BinaryMask) -> Result<Array2<f64>> {
    let (_, record) = backend.predict_noise(x, c, t)?;
    Ok(attention_target(&record, mask))
}

/// One denoising step of an edit.
#[derive(Debug, Clone, PartialEq)]
pub struct EditState {
    pub t: usize,
    /// After blending.
    pub x_prime: LatentImage,
    /// After guidance.
    pub x_double_prime: LatentImage,
    /// Attention objective at `x_prime` and at `x_double_prime`.
    pub objective_before: f64,
    pub objective_after: f64,
}

#[derive(Debug, Clone)]
pub struct EditOutcome {
    pub image: Array3<f64>,
    pub latent: LatentImage,
    pub trace: Vec<EditState>,
}

impl EditOutcome {
    /// Attention objective after the last guidance step, if any step ran.
    pub fn final_objective(&self) -> Option<f64> {
        self.trace.last().map(|s| s.objective_after)
    }
}

/// Paints the concept named `token_name` into `mask` of `image`. `prompt`
/// must contain `[token_name]`.
pub fn edit_image<B: TrainableBackend>(
    backend: &B,
    image: ArrayView3<'_, f64>,
    mask: &BinaryMask,
    prompt: &str,
    token_name: &str,
    cfg: &EditConfig,
) -> Result<EditOutcome> {
    cfg.validate(backend.schedule().max_timestep())?;
    let x_tg = backend.encode_image(image)?;
    let (lh, lw) = x_tg.spatial();
    if mask.dims() != (image.dim().1, image.dim().2) {
        return Err(Error::shape(
            "target mask",
            format!("{:?}", (image.dim().1, image.dim().2)),
            format!("{:?}", mask.dims()),
        ));
    }
    let mask_lat = mask.resized(lh, lw, Resolution::Latent);
    let c = backend.encode_prompt(prompt, &[])?;
    let slot = c.slot_of(token_name)?;

    let start = noise_to_tstart(backend, &x_tg, cfg.t_start, cfg.seed)?;
    let mut x = start.latent.clone();
    let mut trace = Vec::with_capacity(cfg.t_start);
    let mut target: Option<Array2<f64>> = None;
    for t in (1..=cfg.t_start).rev() {
        let reference = match cfg.blend_mode {
            BlendMode::NoiseMatched => backend.add_noise(&x_tg, &start.eps, t)?,
            BlendMode::FixedStart => start.latent.clone(),
        };
        let x_prime = blend_step(&x, &reference, &mask_lat)?;
        let (_, record) = backend.predict_noise(&x_prime, &c, t)?;
        let target = target.get_or_insert_with(|| attention_target(&record, mask));
        let objective_before = attention_objective(&record, slot, target)?.value;

        let mut x_double_prime = x_prime.clone();
        if cfg.eta > 0.0 {
            for _ in 0..cfg.guidance_iters {
                let (_, grad) = guidance_gradient(backend, &x_double_prime, &c, slot, t, target)?;
                x_double_prime = x_double_prime.with_data(descend(x_double_prime.data.view(), &grad, cfg.eta));
            }
        }
        let (eps_pred, record) = backend.predict_noise(&x_double_prime, &c, t)?;
        let objective_after = attention_objective(&record, slot, target)?.value;
        x = backend.denoise_step(&x_double_prime, &eps_pred, t)?;
        trace.push(EditState {
            t,
            x_prime,
            x_double_prime,
            objective_before,
            objective_after,
        });
    }
    let latent = blend_step(&x, &x_tg, &mask_lat)?;
    let image = backend.decode_latent(&latent)?;
    Ok(EditOutcome { image, latent, trace })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    /// Number of initial steps run on the base model.
    pub t_s: usize,
    pub object_class: String,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            t_s: 5,
            object_class: String::new(),
            seed: 0,
        }
    }
}

/// Full sampling run from seeded noise at `t = T`: the first `t_s` steps use
/// `base` with `base_prompt`, the rest use `tuned` with `tuned_prompt`.
pub fn generate_two_stage<B: Backend, C: Backend>(
    base: &B,
    base_prompt: &str,
    tuned: &C,
    tuned_prompt: &str,
    t_s: usize,
    seed: u64,
) -> Result<Array3<f64>> {
    let (db, dt) = (base.descriptor(), tuned.descriptor());
    if db.latent_shape != dt.latent_shape {
        return Err(Error::shape("tuned latent shape", format!("{:?}", db.latent_shape), format!("{:?}", dt.latent_shape)));
    }
    if base.schedule().alphas_bar() != tuned.schedule().alphas_bar() {
        return Err(Error::InvalidArgument("base and tuned backends use different schedules".into()));
    }
    let max_t = base.schedule().max_timestep();
    if t_s > max_t {
        return Err(Error::TimestepOutOfRange { t: t_s, min: 0, max: max_t });
    }
    let c_base = if t_s > 0 { Some(base.encode_prompt(base_prompt, &[])?) } else { None };
    let c_tuned = if t_s < max_t { Some(tuned.encode_prompt(tuned_prompt, &[])?) } else { None };
    let noise = NoiseSample::draw(db.latent_shape, derive_seed(seed, "generation"));
    let mut x = LatentImage::new(noise.data, 1)?;
    for (k, t) in (1..=max_t).rev().enumerate() {
        x = if k < t_s {
            let (eps, _) = base.predict_noise(&x, c_base.as_ref().expect("base prompt"), t)?;
            base.denoise_step(&x, &eps, t)?
        } else {
            let (eps, _) = tuned.predict_noise(&x, c_tuned.as_ref().expect("tuned prompt"), t)?;
            tuned.denoise_step(&x, &eps, t)?
        };
    }
    tuned.decode_latent(&x)
}

/// Generates a new `object_class` instance carrying the concept `token_name`.
pub fn generate_with_concept<B: Backend, C: Backend>(base: &B, tuned: &C, token_name: &str, cfg: &GenerationConfig) -> Result<Array3<f64>> {
    let base_prompt = build_object_prompt(GENERATION_BASE_TEMPLATE, &cfg.object_class)?;
    let tuned_prompt = build_prompt(GENERATION_CONCEPT_TEMPLATE, &cfg.object_class, token_name, None)?;
    generate_two_stage(base, &base_prompt, tuned, &tuned_prompt, cfg.t_s, cfg.seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ConceptToken, ToyBackend, ToySpec};

    fn spec() -> ToySpec {
        ToySpec {
            seed: 5,
            height: 4,
            width: 4,
            ..ToySpec::default()
        }
    }

    fn tuned() -> ToyBackend {
        let mut b = ToyBackend::new(spec()).unwrap();
        let emb = b.word_embedding("style").unwrap().to_vec();
        b.register_token(ConceptToken::new("v*", emb, "style").unwrap()).unwrap();
        b
    }

    fn latent(seed: u64) -> LatentImage {
        LatentImage::new(NoiseSample::draw((3, 4, 4), seed).data, 1).unwrap()
    }

    #[test]
    fn blend_elementwise_oracle() {
        let (x, r) = (latent(1), latent(2));
        let mask = BinaryMask::from_fn(4, 4, Resolution::Latent, |i, j| (i + 2 * j) % 3 == 0);
        let out = blend_step(&x, &r, &mask).unwrap();
        for c in 0..3 {
            for i in 0..4 {
                for j in 0..4 {
                    let m = mask.view()[[i, j]];
                    assert_eq!(out.data[[c, i, j]], m * x.data[[c, i, j]] + (1.0 - m) * r.data[[c, i, j]]);
                }
            }
        }
        assert_eq!(blend_step(&out, &r, &mask).unwrap(), out);
        assert_eq!(blend_step(&x, &r, &BinaryMask::ones(4, 4, Resolution::Latent)).unwrap(), x);
        assert_eq!(blend_step(&x, &r, &BinaryMask::zeros(4, 4, Resolution::Latent)).unwrap(), r);
        assert!(blend_step(&x, &r, &BinaryMask::ones(4, 4, Resolution::Image)).is_err());
    }

    #[test]
    fn noise_to_tstart_cases() {
        let b = tuned();
        let x = latent(3);
        assert_eq!(noise_to_tstart(&b, &x, 0, 1).unwrap().latent, x);
        assert_eq!(noise_to_tstart(&b, &x, 10, 1).unwrap(), noise_to_tstart(&b, &x, 10, 1).unwrap());
        assert!(noise_to_tstart(&b, &x, 51, 1).is_err());
        assert!(t_start_warning(5).is_none() && t_start_warning(15).is_none());
        assert!(t_start_warning(4).is_some() && t_start_warning(16).is_some());
    }

    #[test]
    fn guidance_zero_eta_is_identity() {
        let b = tuned();
        let c = b.encode_prompt("A chair with [v*] style", &[]).unwrap();
        let x = latent(4);
        let mask = BinaryMask::from_fn(4, 4, Resolution::Image, |i, _| i < 2);
        assert_eq!(guidance_step(&b, &x, &c, "v*", 10, &mask, 0.0).unwrap(), x);
    }

    #[test]
    fn guidance_single_token_full_mask_is_identity() {
        let b = tuned();
        let c = b.encode_prompt("[v*]", &[]).unwrap();
        let x = latent(4);
        let out = guidance_step(&b, &x, &c, "v*", 10, &BinaryMask::ones(4, 4, Resolution::Image), 0.5).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn guidance_descends() {
        let b = tuned();
        let c = b.encode_prompt("A chair with [v*] style", &[]).unwrap();
        let mask = BinaryMask::from_fn(4, 4, Resolution::Image, |i, j| i < 2 && j < 2);
        let slot = c.slot_of("v*").unwrap();
        for seed in 0..5 {
            let x = latent(seed);
            let target = guidance_target(&b, &x, &c, 20, &mask).unwrap();
            let (before, _) = guidance_gradient(&b, &x, &c, slot, 20, &target).unwrap();
            let y = guidance_step(&b, &x, &c, "v*", 20, &mask, 1e-3).unwrap();
            let (after, _) = guidance_gradient(&b, &y, &c, slot, 20, &target).unwrap();
            assert!(after <= before, "seed {seed}: {after} > {before}");
        }
    }

    #[test]
    fn edit_preserves_outside_and_empty_mask_is_identity() {
        let b = tuned();
        let image = Array3::from_shape_fn((3, 4, 4), |(c, i, j)| (c + i + j) as f64 / 10.0);
        let mask = BinaryMask::from_fn(4, 4, Resolution::Image, |i, j| i >= 2 && j >= 1);
        let cfg = EditConfig::default();
        let out = edit_image(&b, image.view(), &mask, "A chair with [v*] style", "v*", &cfg).unwrap();
        for c in 0..3 {
            for i in 0..4 {
                for j in 0..4 {
                    if mask.view()[[i, j]] == 0.0 {
                        assert_eq!(out.latent.data[[c, i, j]], image[[c, i, j]]);
                    }
                }
            }
        }
        assert_eq!(out.trace.len(), 10);
        let none = edit_image(&b, image.view(), &BinaryMask::zeros(4, 4, Resolution::Image), "A chair with [v*] style", "v*", &cfg).unwrap();
        assert_eq!(none.image, b.decode_latent(&b.encode_image(image.view()).unwrap()).unwrap());
        let zero = EditConfig { t_start: 0, eta: 0.0, ..cfg };
        let id = edit_image(&b, image.view(), &mask, "A chair with [v*] style", "v*", &zero).unwrap();
        assert_eq!(id.image, image);
    }

    #[test]
    fn generation_endpoints_and_identity() {
        let base = ToyBackend::new(spec()).unwrap();
        let tuned = tuned();
        let cfg = GenerationConfig {
            object_class: "vase".into(),
            seed: 9,
            ..Default::default()
        };
        let all_base = generate_with_concept(&base, &tuned, "v*", &GenerationConfig { t_s: 50, ..cfg.clone() }).unwrap();
        let base_only = generate_two_stage(&base, "a photo of an vase", &base, "unused", 50, 9).unwrap();
        assert_eq!(all_base, base_only);
        let all_tuned = generate_with_concept(&base, &tuned, "v*", &GenerationConfig { t_s: 0, ..cfg.clone() }).unwrap();
        let tuned_only = generate_two_stage(&tuned, "unused", &tuned, "a photo of an vase, with [v*] style", 0, 9).unwrap();
        assert_eq!(all_tuned, tuned_only);
        let p = "a photo of an vase";
        let reference = generate_two_stage(&base, p, &base.clone(), p, 0, 9).unwrap();
        for t_s in [1, 5, 25, 49] {
            assert_eq!(generate_two_stage(&base, p, &base.clone(), p, t_s, 9).unwrap(), reference);
        }
        assert_eq!(generate_with_concept(&base, &tuned, "v*", &cfg).unwrap(), generate_with_concept(&base, &tuned, "v*", &cfg).unwrap());
    }
}
