//! Random resized crop: the view generator for self-supervision.

use rand::Rng;
use vinil_tensor::Tensor;

use crate::error::{Error, Result};

const SCALE: (f64, f64) = (0.6, 1.0);
const ASPECT: (f64, f64) = (3.0 / 4.0, 4.0 / 3.0);
const ATTEMPTS: usize = 10;

/// Crop window in pixel units of the source image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropParams {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl CropParams {
    pub fn full(height: usize, width: usize) -> Self {
        CropParams { top: 0, left: 0, height, width }
    }
}

/// Draws a crop covering a uniform `[0.6, 1.0]` fraction of the area with a
/// log-uniform aspect ratio in `[3/4, 4/3]`. Falls back to the full image if
/// no draw fits after a few attempts.
pub fn sample_crop<R: Rng + ?Sized>(height: usize, width: usize, rng: &mut R) -> CropParams {
    let area = (height * width) as f64;
    let (log_lo, log_hi) = (ASPECT.0.ln(), ASPECT.1.ln());
    for _ in 0..ATTEMPTS {
        let target = area * rng.gen_range(SCALE.0..=SCALE.1);
        let aspect = rng.gen_range(log_lo..=log_hi).exp();
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if (1..=width).contains(&w) && (1..=height).contains(&h) {
            let top = rng.gen_range(0..=height - h);
            let left = rng.gen_range(0..=width - w);
            return CropParams { top, left, height: h, width: w };
        }
    }
    CropParams::full(height, width)
}

/// Crops `image` (`[C,H,W]`) to `crop` and resizes back to `H×W` bilinearly.
pub fn resized_crop(image: &Tensor, crop: &CropParams) -> Result<Tensor> {
    let &[channels, height, width] = image.shape() else {
        return Err(Error::Data(format!("expected a [C,H,W] image, got {:?}", image.shape())));
    };
    if crop.height == 0
        || crop.width == 0
        || crop.top + crop.height > height
        || crop.left + crop.width > width
    {
        return Err(Error::Data(format!("crop {crop:?} outside a {height}x{width} image")));
    }
    let src = image.data();
    let mut out = vec![0.0; src.len()];
    let sy = crop.height as f64 / height as f64;
    let sx = crop.width as f64 / width as f64;
    let clamp_h = |v: f64| v.clamp(0.0, (crop.height - 1) as f64);
    let clamp_w = |v: f64| v.clamp(0.0, (crop.width - 1) as f64);
    for y in 0..height {
        let fy = clamp_h((y as f64 + 0.5) * sy - 0.5);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(crop.height - 1);
        let ty = fy - y0 as f64;
        for x in 0..width {
            let fx = clamp_w((x as f64 + 0.5) * sx - 0.5);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(crop.width - 1);
            let tx = fx - x0 as f64;
            for c in 0..channels {
                let at = |yy: usize, xx: usize| src[(c * height + crop.top + yy) * width + crop.left + xx];
                let v = if tx == 0.0 && ty == 0.0 {
                    at(y0, x0)
                } else {
                    let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
                    let bottom = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
                    top * (1.0 - ty) + bottom * ty
                };
                out[(c * height + y) * width + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok(Tensor::new(image.shape().to_vec(), out)?)
}

/// One random resized crop of a `[C,H,W]` image.
pub fn augment<R: Rng + ?Sized>(image: &Tensor, rng: &mut R) -> Result<Tensor> {
    let (h, w) = match image.shape() {
        [_, h, w] => (*h, *w),
        s => return Err(Error::Data(format!("expected a [C,H,W] image, got {s:?}"))),
    };
    let crop = sample_crop(h, w, rng);
    resized_crop(image, &crop)
}

/// Augments every image of a `[B,C,H,W]` batch independently.
pub fn augment_batch<R: Rng + ?Sized>(batch: &Tensor, rng: &mut R) -> Result<Tensor> {
    if batch.rank() != 4 {
        return Err(Error::Data(format!("expected a [B,C,H,W] batch, got {:?}", batch.shape())));
    }
    let item_shape = &batch.shape()[1..];
    let views = (0..batch.rows())
        .map(|i| {
            let img = Tensor::new(item_shape.to_vec(), batch.row(i).to_vec())?;
            augment(&img, rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&views.iter().collect::<Vec<_>>())?)
}
