//! Training-time augmentation of the source sample. Geometric transforms
//! (flip, zoom) move the mask with the image; photometric ones leave it alone.

use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::prompt::ZoomTag;
use crate::error::{Error, Result};
use crate::masking::BinaryMask;

/// Fill value for pixels exposed by zooming out.
const NEUTRAL: f64 = 0.5;

/// The source image, its concept mask and the host object's class word.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSample {
    pub image: Array3<f64>,
    pub mask: BinaryMask,
    pub object_class: String,
    pub prompt_template: String,
}

impl SourceSample {
    pub fn new(image: Array3<f64>, mask: BinaryMask, object_class: impl Into<String>, prompt_template: impl Into<String>) -> Result<Self> {
        let (c, h, w) = image.dim();
        if c != 3 {
            return Err(Error::shape("source image channels", 3, c));
        }
        if mask.dims() != (h, w) {
            return Err(Error::shape("source mask", format!("{:?}", (h, w)), format!("{:?}", mask.dims())));
        }
        let object_class = object_class.into();
        if object_class.trim().is_empty() {
            return Err(Error::InvalidArgument("object class must be nonempty".into()));
        }
        Ok(Self {
            image,
            mask,
            object_class,
            prompt_template: prompt_template.into(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub p_hflip: f64,
    pub p_grayscale: f64,
    pub p_zoom: f64,
    pub zoom_min: f64,
    pub zoom_max: f64,
    pub p_jitter: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            p_hflip: 0.5,
            p_grayscale: 0.1,
            p_zoom: 0.3,
            zoom_min: 0.6,
            zoom_max: 1.4,
            p_jitter: 0.3,
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
        }
    }
}

impl AugmentationConfig {
    /// Every transform disabled.
    pub fn disabled() -> Self {
        Self {
            p_hflip: 0.0,
            p_grayscale: 0.0,
            p_zoom: 0.0,
            p_jitter: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_hflip", self.p_hflip),
            ("p_grayscale", self.p_grayscale),
            ("p_zoom", self.p_zoom),
            ("p_jitter", self.p_jitter),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if !(self.zoom_min > 0.0 && self.zoom_min <= self.zoom_max) {
            return Err(Error::InvalidArgument("zoom range must be positive with min <= max".into()));
        }
        for (name, s) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::InvalidArgument(format!("{name} jitter must lie in [0, 1], got {s}")));
            }
        }
        Ok(())
    }
}

/// Applies flip, zoom, grayscale and colour jitter, each with its own
/// probability, in that order. Returns the zoom direction when zoom fired.
pub fn augment(sample: &SourceSample, cfg: &AugmentationConfig, rng: &mut impl Rng) -> (SourceSample, Option<ZoomTag>) {
    let mut out = sample.clone();
    let mut zoom_tag = None;
    if rng.random::<f64>() < cfg.p_hflip {
        out = hflip(&out);
    }
    if rng.random::<f64>() < cfg.p_zoom {
        let scale = cfg.zoom_min + (cfg.zoom_max - cfg.zoom_min) * rng.random::<f64>();
        out = zoom(&out, scale);
        zoom_tag = if scale < 1.0 {
            Some(ZoomTag::Out)
        } else if scale > 1.0 {
            Some(ZoomTag::In)
        } else {
            None
        };
    }
    if rng.random::<f64>() < cfg.p_grayscale {
        out.image = grayscale(&out.image);
    }
    if rng.random::<f64>() < cfg.p_jitter {
        let mut factor = |s: f64| 1.0 + s * (2.0 * rng.random::<f64>() - 1.0);
        let (b, c, s) = (factor(cfg.brightness), factor(cfg.contrast), factor(cfg.saturation));
        out.image = jitter(&out.image, b, c, s);
    }
    (out, zoom_tag)
}

pub fn hflip(sample: &SourceSample) -> SourceSample {
    let mut image = sample.image.clone();
    image.invert_axis(Axis(2));
    SourceSample {
        image,
        mask: sample.mask.flip_horizontal(),
        ..sample.clone()
    }
}

/// Source index hit by output index `i` when zooming by `scale` about the
/// centre; `None` when it falls outside the source.
fn zoom_source(i: usize, len: usize, scale: f64) -> Option<usize> {
    let half = len as f64 / 2.0;
    let src = (i as f64 + 0.5 - half) / scale + half;
    if src < 0.0 || src >= len as f64 {
        None
    } else {
        Some(src.floor() as usize)
    }
}

/// Centre zoom with nearest sampling. `scale < 1` shrinks the content and
/// pads with a neutral border; `scale > 1` crops and enlarges.
pub fn zoom(sample: &SourceSample, scale: f64) -> SourceSample {
    let (c, h, w) = sample.image.dim();
    let rows: Vec<_> = (0..h).map(|i| zoom_source(i, h, scale)).collect();
    let cols: Vec<_> = (0..w).map(|j| zoom_source(j, w, scale)).collect();
    let image = Array3::from_shape_fn((c, h, w), |(ch, i, j)| match (rows[i], cols[j]) {
        (Some(si), Some(sj)) => sample.image[[ch, si, sj]],
        _ => NEUTRAL,
    });
    SourceSample {
        image,
        mask: zoom_mask(&sample.mask, scale),
        ..sample.clone()
    }
}

pub fn zoom_mask(mask: &BinaryMask, scale: f64) -> BinaryMask {
    let (h, w) = mask.dims();
    let rows: Vec<_> = (0..h).map(|i| zoom_source(i, h, scale)).collect();
    let cols: Vec<_> = (0..w).map(|j| zoom_source(j, w, scale)).collect();
    let m = mask.view();
    BinaryMask::from_fn(h, w, mask.resolution(), |i, j| match (rows[i], cols[j]) {
        (Some(si), Some(sj)) => m[[si, sj]] == 1.0,
        _ => false,
    })
}

fn luma(image: &Array3<f64>) -> Array2<f64> {
    let (_, h, w) = image.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        0.299 * image[[0, i, j]] + 0.587 * image[[1, i, j]] + 0.114 * image[[2, i, j]]
    })
}

pub fn grayscale(image: &Array3<f64>) -> Array3<f64> {
    let y = luma(image);
    let (c, h, w) = image.dim();
    Array3::from_shape_fn((c, h, w), |(_, i, j)| y[[i, j]])
}

/// Brightness, contrast and saturation factors (1.0 = unchanged).
pub fn jitter(image: &Array3<f64>, brightness: f64, contrast: f64, saturation: f64) -> Array3<f64> {
    let bright = image.mapv(|v| (v * brightness).clamp(0.0, 1.0));
    let mean = luma(&bright).mean().unwrap_or(0.0);
    let contrasted = bright.mapv(|v| ((v - mean) * contrast + mean).clamp(0.0, 1.0));
    let y = luma(&contrasted);
    let (c, h, w) = image.dim();
    Array3::from_shape_fn((c, h, w), |(ch, i, j)| {
        let g = y[[i, j]];
        (g + (contrasted[[ch, i, j]] - g) * saturation).clamp(0.0, 1.0)
    })
}
