use image::GrayImage;

use super::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean intensity of a frame on the 0..=255 scale.
pub fn frame_mean(frame: &GrayImage) -> f64 {
    let raw = frame.as_raw();
    if raw.is_empty() {
        return 0.0;
    }
    raw.iter().map(|&v| v as u64).sum::<u64>() as f64 / raw.len() as f64
}

/// Side of the square context region around a box:
/// `sqrt((w + 2p)(h + 2p))` with `p = context·(w + h)/2`.
pub fn exemplar_side(b: &BBox, context: f64) -> f64 {
    let p = context * (b.w + b.h) / 2.0;
    ((b.w + 2.0 * p) * (b.h + 2.0 * p)).sqrt()
}

/// Square crop of the context region around `b`, resized to `out_size`.
pub fn crop_patch(frame: &GrayImage, b: &BBox, context: f64, out_size: usize) -> Result<Tensor<f32>> {
    if b.is_degenerate() {
        return Err(Error::Input(format!("degenerate box {b}")));
    }
    let (cx, cy) = b.center();
    crop_square(frame, (cx, cy), exemplar_side(b, context), out_size, None)
}

/// Bilinear resample of the `side`-wide square centered at `center` to
/// `out_size` pixels, scaled to [0, 1]. Samples outside the frame read the
/// frame mean (or `fill`, on the 0..=255 scale).
pub fn crop_square(
    frame: &GrayImage,
    center: (f64, f64),
    side: f64,
    out_size: usize,
    fill: Option<f64>,
) -> Result<Tensor<f32>> {
    if out_size < 8 {
        return Err(Error::Input(format!("output size {out_size} below 8")));
    }
    if !(side > 0.0) || !side.is_finite() {
        return Err(Error::Input(format!("crop side {side} must be positive")));
    }
    let fill = fill.unwrap_or_else(|| frame_mean(frame));
    let (fw, fh) = (frame.width() as i64, frame.height() as i64);
    let raw = frame.as_raw();
    let px = |x: i64, y: i64| -> f64 {
        if x < 0 || y < 0 || x >= fw || y >= fh {
            fill
        } else {
            raw[(y * fw + x) as usize] as f64
        }
    };
    let step = side / out_size as f64;
    // pixel centers sit at integer coordinates
    let x0 = center.0 - side / 2.0 + step / 2.0 - 0.5;
    let y0 = center.1 - side / 2.0 + step / 2.0 - 0.5;
    let xs: Vec<(i64, f64)> = (0..out_size)
        .map(|i| {
            let s = x0 + i as f64 * step;
            (s.floor() as i64, s - s.floor())
        })
        .collect();
    let mut out = Tensor::zeros([1, 1, out_size, out_size]);
    let data = out.data_mut();
    for r in 0..out_size {
        let s = y0 + r as f64 * step;
        let (iy, ty) = (s.floor() as i64, s - s.floor());
        for (c, &(ix, tx)) in xs.iter().enumerate() {
            let top = px(ix, iy) * (1.0 - tx) + px(ix + 1, iy) * tx;
            let v = if ty == 0.0 {
                top
            } else {
                let bottom = px(ix, iy + 1) * (1.0 - tx) + px(ix + 1, iy + 1) * tx;
                top * (1.0 - ty) + bottom * ty
            };
            data[r * out_size + c] = (v / 255.0) as f32;
        }
    }
    Ok(out)
}
