//! Conversions between 8-bit images and `[-1, 1]` tensors, and grid tiling.

use candle_core::{DType, Device, Tensor};
use image::{imageops::FilterType, Rgb, RgbImage};

use crate::error::{Error, Result};

/// `(1, 3, S, S)` tensor in `[-1, 1]`, resizing to `size` when needed.
pub fn image_to_tensor(img: &RgbImage, size: usize, dtype: DType) -> Result<Tensor> {
    let img = if img.dimensions() == (size as u32, size as u32) {
        img.clone()
    } else {
        image::imageops::resize(img, size as u32, size as u32, FilterType::Triangle)
    };
    let mut data = vec![0f64; 3 * size * size];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * size + y as usize) * size + x as usize] = p.0[c] as f64 / 127.5 - 1.0;
        }
    }
    Ok(Tensor::from_vec(data, (1, 3, size, size), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn images_to_tensor(imgs: &[&RgbImage], size: usize, dtype: DType) -> Result<Tensor> {
    let ts = imgs.iter().map(|i| image_to_tensor(i, size, dtype)).collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&ts, 0)?)
}

/// `(N, 3, H, W)` tensor, clipped to `[-1, 1]`, to images.
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<RgbImage>> {
    let (n, c, h, w) = t.dims4()?;
    if c != 3 {
        return Err(Error::shape(3, c));
    }
    let data: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    Ok((0..n)
        .map(|i| {
            RgbImage::from_fn(w as u32, h as u32, |x, y| {
                Rgb([0, 1, 2].map(|ch| {
                    let v = data[((i * c + ch) * h + y as usize) * w + x as usize].clamp(-1.0, 1.0);
                    ((v + 1.0) * 127.5).round() as u8
                }))
            })
        })
        .collect())
}

/// Tiles equally sized images row-major into `cols` columns.
pub fn tile_grid(images: &[RgbImage], cols: usize) -> Result<RgbImage> {
    let first = images.first().ok_or_else(|| Error::invalid("no images to tile"))?;
    if cols == 0 {
        return Err(Error::invalid("grid needs at least one column"));
    }
    let (w, h) = first.dimensions();
    if images.iter().any(|i| i.dimensions() != (w, h)) {
        return Err(Error::invalid("grid tiles differ in size"));
    }
    let rows = images.len().div_ceil(cols);
    let mut out = RgbImage::new(w * cols as u32, h * rows as u32);
    for (n, img) in images.iter().enumerate() {
        image::imageops::replace(&mut out, img, ((n % cols) as u32 * w) as i64, ((n / cols) as u32 * h) as i64);
    }
    Ok(out)
}

/// Near-square column count for `n` tiles.
pub fn grid_columns(n: usize) -> usize {
    (n as f64).sqrt().ceil().max(1.0) as usize
}
