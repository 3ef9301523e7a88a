//! 8-bit RGB raster files <-> `[3, H, W]` tensors in [0, 1].

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{Array3, ArrayView3};

use crate::error::{Error, Result};

pub fn load_rgb(path: impl AsRef<Path>) -> Result<Array3<f64>> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8();
    Ok(rgb_to_tensor(&img))
}

pub fn rgb_to_tensor(img: &RgbImage) -> Array3<f64> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, i, j)| {
        img.get_pixel(j as u32, i as u32).0[c] as f64 / 255.0
    })
}

pub fn tensor_to_rgb(tensor: ArrayView3<'_, f64>) -> Result<RgbImage> {
    let (c, h, w) = tensor.dim();
    if c != 3 {
        return Err(Error::shape("tensor_to_rgb", 3, c));
    }
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (i, j) = (y as usize, x as usize);
        Rgb([q(tensor[[0, i, j]]), q(tensor[[1, i, j]]), q(tensor[[2, i, j]])])
    }))
}

pub fn encode_png(tensor: ArrayView3<'_, f64>) -> Result<Vec<u8>> {
    let img = tensor_to_rgb(tensor)?;
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png).map_err(|e| Error::Image {
        path: "<memory>".into(),
        message: e.to_string(),
    })?;
    Ok(buf.into_inner())
}

pub fn save_rgb(tensor: ArrayView3<'_, f64>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_png(tensor)?).map_err(|e| Error::io(path, e))
}
