//! The three concept-learning objectives and their weighted sum. Every MSE
//! uses mean reduction. Each loss also returns the gradient of its value
//! with respect to the quantity it reads (attention maps or predicted noise).

use ndarray::{Array2, Array3, Array4, ArrayView3, Zip};

use crate::backend::{Backend, CrossAttentionRecord, Gradients, LatentImage, TextEmbedding, TrainableBackend};
use crate::error::{Error, Result};
use crate::masking::{apply_mask, resize_to, BinaryMask, ResizeMode, Resolution, SoftMask};

#[derive(Debug, Clone)]
pub struct AttentionLoss {
    pub value: f64,
    /// Gradient with respect to every recorded attention map.
    pub grad_maps: Vec<Array4<f64>>,
}

/// Attention target: `mask` bilinearly resized to the record's common grid.
pub fn attention_target(record: &CrossAttentionRecord, mask: &BinaryMask) -> Array2<f64> {
    let (h, w) = record.common_resolution();
    resize_to(mask.view(), h, w, ResizeMode::Bilinear)
}

/// MSE between the token's head- and layer-averaged attention map and the
/// bilinearly resized mask.
pub fn attention_loss(record: &CrossAttentionRecord, token_slot: usize, mask: &BinaryMask) -> Result<AttentionLoss> {
    let map = record.token_map(token_slot)?;
    let target = attention_target(record, mask);
    let (value, grad) = mse_2d(&map, &target);
    Ok(AttentionLoss {
        value,
        grad_maps: record.token_map_adjoint(token_slot, &grad),
    })
}

/// Same objective against an already-resized target map (guidance uses this).
pub fn attention_objective(record: &CrossAttentionRecord, token_slot: usize, target: &Array2<f64>) -> Result<AttentionLoss> {
    let map = record.token_map(token_slot)?;
    if map.dim() != target.dim() {
        return Err(Error::shape("attention objective", format!("{:?}", map.dim()), format!("{:?}", target.dim())));
    }
    let (value, grad) = mse_2d(&map, target);
    Ok(AttentionLoss {
        value,
        grad_maps: record.token_map_adjoint(token_slot, &grad),
    })
}

fn mse_2d(a: &Array2<f64>, b: &Array2<f64>) -> (f64, Array2<f64>) {
    let n = a.len() as f64;
    let diff = a - b;
    let value = diff.iter().map(|d| d * d).sum::<f64>() / n;
    (value, diff * (2.0 / n))
}

#[derive(Debug, Clone)]
pub struct NoiseLoss {
    pub value: f64,
    /// Gradient with respect to the predicted noise.
    pub grad_eps: Array3<f64>,
}

/// `mean((M_soft * (eps_pred - eps))^2)` with the soft mask broadcast over
/// channels.
pub fn context_loss(eps_pred: ArrayView3<'_, f64>, eps_true: ArrayView3<'_, f64>, soft_mask: &SoftMask) -> Result<NoiseLoss> {
    if eps_pred.dim() != eps_true.dim() {
        return Err(Error::shape("context_loss", format!("{:?}", eps_true.dim()), format!("{:?}", eps_pred.dim())));
    }
    if soft_mask.resolution() != Resolution::Latent {
        return Err(Error::InvalidArgument("context loss mask must be at latent resolution".into()));
    }
    let residual = &eps_pred - &eps_true;
    let weighted = apply_mask(soft_mask.view(), residual.view())?;
    let n = weighted.len() as f64;
    let value = weighted.iter().map(|v| v * v).sum::<f64>() / n;
    // d/d eps_pred of mean((m r)^2) = 2 m^2 r / n
    let grad_eps = apply_mask(soft_mask.view(), weighted.view())? * (2.0 / n);
    Ok(NoiseLoss { value, grad_eps })
}

/// Plain `mean((eps_pred - eps)^2)`.
pub fn diffusion_mse(eps_pred: ArrayView3<'_, f64>, eps_true: ArrayView3<'_, f64>) -> Result<NoiseLoss> {
    if eps_pred.dim() != eps_true.dim() {
        return Err(Error::shape("diffusion_mse", format!("{:?}", eps_true.dim()), format!("{:?}", eps_pred.dim())));
    }
    let n = eps_pred.len() as f64;
    let mut value = 0.0;
    let grad_eps = Zip::from(eps_pred).and(eps_true).map_collect(|&p, &e| {
        value += (p - e) * (p - e);
        2.0 * (p - e) / n
    });
    Ok(NoiseLoss { value: value / n, grad_eps })
}

fn masked_input(x_t: &LatentImage, mask_latent: &BinaryMask) -> Result<LatentImage> {
    if mask_latent.resolution() != Resolution::Latent {
        return Err(Error::InvalidArgument("RoI loss mask must be at latent resolution".into()));
    }
    LatentImage::new(apply_mask(mask_latent.view(), x_t.data.view())?, x_t.scale_factor)
}

/// `mean((eps_theta(M * x_t, c*, t) - eps)^2)` over the full canvas.
pub fn roi_loss<B: Backend>(
    backend: &B,
    x_t: &LatentImage,
    mask_latent: &BinaryMask,
    c_star: &TextEmbedding,
    t: usize,
    eps_true: ArrayView3<'_, f64>,
) -> Result<f64> {
    let masked = masked_input(x_t, mask_latent)?;
    let (pred, _) = backend.predict_noise(&masked, c_star, t)?;
    Ok(diffusion_mse(pred.data.view(), eps_true)?.value)
}

/// [`roi_loss`] plus its gradients, scaled by `weight`, with respect to the
/// prompt rows and trainable weights.
pub fn roi_loss_with_grad<B: TrainableBackend>(
    backend: &B,
    x_t: &LatentImage,
    mask_latent: &BinaryMask,
    c_star: &TextEmbedding,
    t: usize,
    eps_true: ArrayView3<'_, f64>,
    weight: f64,
) -> Result<(f64, Gradients)> {
    let masked = masked_input(x_t, mask_latent)?;
    let (pred, _, tape) = backend.forward(&masked, c_star, t)?;
    let loss = diffusion_mse(pred.view(), eps_true)?;
    let grads = backend.backward(&tape, Some((loss.grad_eps * weight).view()), None)?;
    Ok((loss.value, grads))
}

/// `l_con + lambda_att * l_att + lambda_roi * l_roi`.
pub fn total_loss(l_con: f64, l_att: f64, l_roi: f64, lambda_att: f64, lambda_roi: f64) -> f64 {
    l_con + lambda_att * l_att + lambda_roi * l_roi
}
