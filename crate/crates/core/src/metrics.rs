//! Plain (non-differentiable) evaluation metrics.

use crate::error::{Error, Result};
use crate::types::{BinaryMask, FaceImage};

/// PSNR reported for identical images (or an empty region).
pub const PSNR_CAP: f64 = 100.0;

pub fn mean_abs_diff(a: &FaceImage, b: &FaceImage) -> Result<f64> {
    same_size(a, b)?;
    let n = a.pixels().len();
    Ok(a.pixels().iter().zip(b.pixels()).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum::<f64>() / n as f64)
}

/// PSNR in dB for values in [0, 1], capped at `PSNR_CAP`.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (-10.0 * mse.log10()).min(PSNR_CAP)
}

/// PSNR restricted to hole pixels (all three channels).
pub fn masked_psnr(output: &FaceImage, target: &FaceImage, mask: &BinaryMask) -> Result<f64> {
    same_size(output, target)?;
    if mask.width() != target.width() || mask.height() != target.height() {
        return Err(Error::Shape(format!(
            "mask {}x{} does not match image {}x{}",
            mask.width(),
            mask.height(),
            target.width(),
            target.height()
        )));
    }
    let plane = target.width() * target.height();
    let mut sum = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        for (i, &m) in mask.data().iter().enumerate() {
            if m == 1 {
                let d = output.pixels()[c * plane + i] as f64 - target.pixels()[c * plane + i] as f64;
                sum += d * d;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Ok(PSNR_CAP);
    }
    Ok(psnr_from_mse(sum / count as f64))
}

fn same_size(a: &FaceImage, b: &FaceImage) -> Result<()> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::Shape(format!("images differ in size: {}x{} vs {}x{}", a.width(), a.height(), b.width(), b.height())));
    }
    Ok(())
}
