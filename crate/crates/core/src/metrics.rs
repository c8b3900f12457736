//! Evaluation measures: PSNR, SSIM, region IoU and boundary F.

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::photometric::{ssim_map, PhotometricConfig};
use crate::tensor::Grid;

/// Returned when the inputs are identical (MSE of zero).
pub const PSNR_CAP_DB: f64 = 99.0;

/// Peak signal-to-noise ratio for signals with unit peak.
pub fn psnr(a: &Grid, b: &Grid) -> Result<f64> {
    a.check_same_shape(b, "psnr")?;
    let n = a.data().len();
    if n == 0 {
        return Ok(PSNR_CAP_DB);
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n as f64;
    if mse <= 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Mean of the SSIM map over all pixels and channels.
pub fn mean_ssim(a: &Grid, b: &Grid) -> Result<f64> {
    Ok(ssim_map(a, b, &PhotometricConfig::default())?.mean())
}

/// Region similarity `|A ∩ B| / |A ∪ B|`, defined as 1 when both are empty.
pub fn iou(pred: &BinaryMask, truth: &BinaryMask) -> Result<f64> {
    pred.check_same(truth, "iou")?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &t) in pred.as_slice().iter().zip(truth.as_slice()) {
        inter += usize::from(p && t);
        union += usize::from(p || t);
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Set pixels with at least one unset 4-neighbor inside the frame.
pub fn boundary(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = (mask.height(), mask.width());
    BinaryMask::from_fn(h, w, |y, x| {
        if !mask.get(y, x) {
            return false;
        }
        (y > 0 && !mask.get(y - 1, x))
            || (y + 1 < h && !mask.get(y + 1, x))
            || (x > 0 && !mask.get(y, x - 1))
            || (x + 1 < w && !mask.get(y, x + 1))
    })
}

/// Dilation by a Euclidean disk of the given radius.
fn dilate(mask: &BinaryMask, radius: usize) -> BinaryMask {
    let (h, w) = (mask.height(), mask.width());
    let r = radius as isize;
    let mut offsets = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                offsets.push((dy, dx));
            }
        }
    }
    let mut out = BinaryMask::empty(h, w);
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            for &(dy, dx) in &offsets {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                    out.set(yy as usize, xx as usize, true);
                }
            }
        }
    }
    out
}

/// 0.8% of the frame diagonal, rounded up.
pub fn default_boundary_tolerance(height: usize, width: usize) -> usize {
    let diag = ((height * height + width * width) as f64).sqrt();
    (0.008 * diag).ceil() as usize
}

/// Boundary F-measure with dilation matching at `tolerance` pixels.
pub fn boundary_f(pred: &BinaryMask, truth: &BinaryMask, tolerance: usize) -> Result<f64> {
    pred.check_same(truth, "boundary_f")?;
    let bp = boundary(pred);
    let bt = boundary(truth);
    let (np, nt) = (bp.count(), bt.count());
    if np == 0 && nt == 0 {
        return Ok(1.0);
    }
    if np == 0 || nt == 0 {
        return Ok(0.0);
    }
    let dp = dilate(&bp, tolerance);
    let dt = dilate(&bt, tolerance);
    let matched = |a: &BinaryMask, cover: &BinaryMask| {
        a.as_slice()
            .iter()
            .zip(cover.as_slice())
            .filter(|(&x, &c)| x && c)
            .count()
    };
    let precision = matched(&bp, &dt) as f64 / np as f64;
    let recall = matched(&bt, &dp) as f64 / nt as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Crops both grids to the tight bounding box of `mask`.
pub fn crop_to_bbox_pair(a: &Grid, b: &Grid, mask: &BinaryMask) -> Result<(Grid, Grid)> {
    a.check_same_shape(b, "crop_to_bbox_pair")?;
    mask.check_plane(a, "crop_to_bbox_pair")?;
    let bb = mask.bounding_box().ok_or(Error::EmptyCrop)?;
    Ok((
        a.crop(bb.row_min, bb.row_max + 1, bb.col_min, bb.col_max + 1)?,
        b.crop(bb.row_min, bb.row_max + 1, bb.col_min, bb.col_max + 1)?,
    ))
}
