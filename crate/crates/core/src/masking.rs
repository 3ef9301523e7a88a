//! Region masks: binary masks, the soft relaxation used by the context loss,
//! resolution transport between image, latent and attention grids, and
//! binarization of attention maps.

use std::collections::VecDeque;
use std::path::Path;

use image::{DynamicImage, GrayImage, Luma};
use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid a mask lives on. Operations never resize implicitly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resolution {
    Image,
    Latent,
    Attention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizeMode {
    Nearest,
    Bilinear,
}

/// A mask whose entries are exactly 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    data: Array2<f64>,
    resolution: Resolution,
}

impl BinaryMask {
    /// Builds a mask from values that must be exactly 0.0 or 1.0.
    pub fn new(data: Array2<f64>, resolution: Resolution) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("mask must have at least one entry".into()));
        }
        if let Some(v) = data.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArgument(format!(
                "binary mask entries must be 0 or 1, found {v}"
            )));
        }
        Ok(Self { data, resolution })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        resolution: Resolution,
        f: impl Fn(usize, usize) -> bool,
    ) -> Self {
        let data = Array2::from_shape_fn((height, width), |(i, j)| if f(i, j) { 1.0 } else { 0.0 });
        Self { data, resolution }
    }

    pub fn ones(height: usize, width: usize, resolution: Resolution) -> Self {
        Self::from_fn(height, width, resolution, |_, _| true)
    }

    pub fn zeros(height: usize, width: usize, resolution: Resolution) -> Self {
        Self::from_fn(height, width, resolution, |_, _| false)
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn resolution(&self) -> Resolution {
        self.resolution
    }

    pub fn dims(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1.0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    /// Rejects masks with no selected entries.
    pub fn require_nonempty(&self) -> Result<()> {
        if self.is_empty() {
            Err(Error::EmptyMask)
        } else {
            Ok(())
        }
    }

    /// Nearest-neighbour resize; the result stays binary.
    pub fn resized(&self, height: usize, width: usize, resolution: Resolution) -> Self {
        Self {
            data: resize_nearest(self.data.view(), height, width),
            resolution,
        }
    }

    /// Relabels the grid without touching the data. Only valid when the two
    /// grids coincide (e.g. an identity image codec).
    pub fn with_resolution(mut self, resolution: Resolution) -> Self {
        self.resolution = resolution;
        self
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = self.data.clone();
        data.invert_axis(Axis(1));
        Self {
            data,
            resolution: self.resolution,
        }
    }

    pub fn iou(&self, other: &BinaryMask) -> Result<f64> {
        if self.dims() != other.dims() {
            return Err(Error::shape("iou", format!("{:?}", self.dims()), format!("{:?}", other.dims())));
        }
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.data.iter().zip(other.data.iter()) {
            if a == 1.0 && b == 1.0 {
                inter += 1;
            }
            if a == 1.0 || b == 1.0 {
                union += 1;
            }
        }
        Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
    }

    /// Keeps only the largest 4-connected component. Ties go to the
    /// component found first in row-major order.
    pub fn largest_component(&self) -> Self {
        let (h, w) = self.dims();
        let mut label = vec![usize::MAX; h * w];
        let mut best: Option<(usize, usize)> = None; // (label, size)
        let mut next = 0;
        let mut queue = VecDeque::new();
        for start in 0..h * w {
            if label[start] != usize::MAX || self.data[[start / w, start % w]] != 1.0 {
                continue;
            }
            let mut size = 0;
            label[start] = next;
            queue.push_back(start);
            while let Some(idx) = queue.pop_front() {
                size += 1;
                let (i, j) = (idx / w, idx % w);
                let mut visit = |ni: usize, nj: usize| {
                    let n = ni * w + nj;
                    if label[n] == usize::MAX && self.data[[ni, nj]] == 1.0 {
                        label[n] = next;
                        queue.push_back(n);
                    }
                };
                if i > 0 {
                    visit(i - 1, j);
                }
                if i + 1 < h {
                    visit(i + 1, j);
                }
                if j > 0 {
                    visit(i, j - 1);
                }
                if j + 1 < w {
                    visit(i, j + 1);
                }
            }
            if best.is_none_or(|(_, s)| size > s) {
                best = Some((next, size));
            }
            next += 1;
        }
        match best {
            None => self.clone(),
            Some((keep, _)) => Self::from_fn(h, w, self.resolution, |i, j| label[i * w + j] == keep),
        }
    }
}

/// `alpha + (1 - alpha) * M`: full weight inside the region, `alpha` outside.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    data: Array2<f64>,
    alpha: f64,
    resolution: Resolution,
}

impl SoftMask {
    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn resolution(&self) -> Resolution {
        self.resolution
    }

    pub fn dims(&self) -> (usize, usize) {
        self.data.dim()
    }
}

pub fn soften(mask: &BinaryMask, alpha: f64) -> Result<SoftMask> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let data = mask.data.mapv(|m| alpha + (1.0 - alpha) * m);
    Ok(SoftMask {
        data,
        alpha,
        resolution: mask.resolution,
    })
}

/// Reads a single-channel 8-bit raster. Pixels >= 128 are selected.
/// Multi-channel files are accepted only when every colour channel agrees.
pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let gray = to_single_channel(img).map_err(|message| Error::Image {
        path: path.to_path_buf(),
        message,
    })?;
    Ok(mask_from_gray(&gray))
}

pub fn mask_from_gray(gray: &GrayImage) -> BinaryMask {
    let (w, h) = gray.dimensions();
    BinaryMask::from_fn(h as usize, w as usize, Resolution::Image, |i, j| {
        gray.get_pixel(j as u32, i as u32).0[0] >= 128
    })
}

fn to_single_channel(img: DynamicImage) -> std::result::Result<GrayImage, String> {
    match img {
        DynamicImage::ImageLuma8(g) => Ok(g),
        DynamicImage::ImageLumaA8(g) => Ok(GrayImage::from_fn(g.width(), g.height(), |x, y| {
            Luma([g.get_pixel(x, y).0[0]])
        })),
        DynamicImage::ImageRgb8(rgb) => {
            let mut out = GrayImage::new(rgb.width(), rgb.height());
            for (x, y, p) in rgb.enumerate_pixels() {
                let [r, g, b] = p.0;
                if r != g || g != b {
                    return Err(format!("mask pixel ({x}, {y}) has unequal channels"));
                }
                out.put_pixel(x, y, Luma([r]));
            }
            Ok(out)
        }
        DynamicImage::ImageRgba8(rgba) => {
            let mut out = GrayImage::new(rgba.width(), rgba.height());
            for (x, y, p) in rgba.enumerate_pixels() {
                let [r, g, b, _] = p.0;
                if r != g || g != b {
                    return Err(format!("mask pixel ({x}, {y}) has unequal channels"));
                }
                out.put_pixel(x, y, Luma([r]));
            }
            Ok(out)
        }
        other => Err(format!("mask must be 8-bit, got {:?}", other.color())),
    }
}

/// Writes the mask as an 8-bit grayscale PNG with values 0 and 255.
pub fn save_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_mask_png(mask)?).map_err(|e| Error::io(path, e))
}

pub fn encode_mask_png(mask: &BinaryMask) -> Result<Vec<u8>> {
    let (h, w) = mask.dims();
    let gray = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask.data[[y as usize, x as usize]] == 1.0 { 255 } else { 0 }])
    });
    let mut buf = std::io::Cursor::new(Vec::new());
    gray.write_to(&mut buf, image::ImageFormat::Png).map_err(|e| Error::Image {
        path: "<memory>".into(),
        message: e.to_string(),
    })?;
    Ok(buf.into_inner())
}

pub fn resize_to(map: ArrayView2<'_, f64>, height: usize, width: usize, mode: ResizeMode) -> Array2<f64> {
    match mode {
        ResizeMode::Nearest => resize_nearest(map, height, width),
        ResizeMode::Bilinear => resize_bilinear(map, height, width),
    }
}

fn nearest_index(out: usize, out_len: usize, in_len: usize) -> usize {
    // floor((out + 0.5) * in / out_len) in exact integer arithmetic
    (((2 * out + 1) * in_len) / (2 * out_len)).min(in_len - 1)
}

pub fn resize_nearest(map: ArrayView2<'_, f64>, height: usize, width: usize) -> Array2<f64> {
    let (ih, iw) = map.dim();
    Array2::from_shape_fn((height, width), |(i, j)| {
        map[[nearest_index(i, height, ih), nearest_index(j, width, iw)]]
    })
}

/// Interpolation taps along one axis (half-pixel centres, clamped edges).
fn bilinear_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            let w1 = src - i0 as f64;
            (i0, i1, 1.0 - w1, w1)
        })
        .collect()
}

pub fn resize_bilinear(map: ArrayView2<'_, f64>, height: usize, width: usize) -> Array2<f64> {
    let (ih, iw) = map.dim();
    if (ih, iw) == (height, width) {
        return map.to_owned();
    }
    let rows = bilinear_taps(height, ih);
    let cols = bilinear_taps(width, iw);
    Array2::from_shape_fn((height, width), |(i, j)| {
        let (r0, r1, wr0, wr1) = rows[i];
        let (c0, c1, wc0, wc1) = cols[j];
        let top = wc0 * map[[r0, c0]] + wc1 * map[[r0, c1]];
        let bottom = wc0 * map[[r1, c0]] + wc1 * map[[r1, c1]];
        wr0 * top + wr1 * bottom
    })
}

/// Transpose of [`resize_bilinear`]: maps a gradient on the resized grid back
/// onto the source grid.
pub fn resize_bilinear_adjoint(grad: ArrayView2<'_, f64>, in_height: usize, in_width: usize) -> Array2<f64> {
    let (oh, ow) = grad.dim();
    if (oh, ow) == (in_height, in_width) {
        return grad.to_owned();
    }
    let rows = bilinear_taps(oh, in_height);
    let cols = bilinear_taps(ow, in_width);
    let mut out = Array2::zeros((in_height, in_width));
    for i in 0..oh {
        let (r0, r1, wr0, wr1) = rows[i];
        for j in 0..ow {
            let (c0, c1, wc0, wc1) = cols[j];
            let g = grad[[i, j]];
            out[[r0, c0]] += wr0 * wc0 * g;
            out[[r0, c1]] += wr0 * wc1 * g;
            out[[r1, c0]] += wr1 * wc0 * g;
            out[[r1, c1]] += wr1 * wc1 * g;
        }
    }
    out
}

/// Elementwise product broadcast over the leading channel axis.
pub fn apply_mask(mask: ArrayView2<'_, f64>, x: ArrayView3<'_, f64>) -> Result<Array3<f64>> {
    let (_, h, w) = x.dim();
    if mask.dim() != (h, w) {
        return Err(Error::shape("apply_mask", format!("{:?}", (h, w)), format!("{:?}", mask.dim())));
    }
    Ok(&x * &mask.insert_axis(Axis(0)))
}

/// Min-max normalizes `map` to [0, 1]; constant maps normalize to all zeros.
pub fn normalize_min_max(map: ArrayView2<'_, f64>) -> Array2<f64> {
    let min = map.iter().copied().fold(f64::INFINITY, f64::min);
    let max = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if range.is_nan() || range <= 0.0 {
        return Array2::zeros(map.dim());
    }
    map.mapv(|v| (v - min) / range)
}

/// Min-max normalizes, then selects entries at or above `threshold`. Entries
/// at the minimum are never selected, so a constant map yields an empty mask
/// and threshold 0 selects exactly the entries above the minimum.
pub fn binarize_map(map: ArrayView2<'_, f64>, threshold: f64, resolution: Resolution) -> BinaryMask {
    let norm = normalize_min_max(map);
    let (h, w) = norm.dim();
    BinaryMask::from_fn(h, w, resolution, |i, j| {
        let v = norm[[i, j]];
        v > 0.0 && v >= threshold
    })
}
