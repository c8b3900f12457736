//! Masked photometric reconstruction loss: a weighted sum of per-pixel L1
//! error and structural dissimilarity between the warped previous frame and
//! the current frame.
//!
//! Local SSIM statistics use a uniform square window clipped to the frame and
//! restricted to masked pixels, so the loss reads nothing outside the mask.

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::tensor::Grid;
use crate::warp::{warp, warp_backward, FlowField};

#[derive(Debug, Clone, PartialEq)]
pub struct PhotometricConfig {
    pub lambda_l1: f64,
    pub lambda_ssim: f64,
    /// Side of the square SSIM window; odd, at least 3.
    pub ssim_window: usize,
    pub ssim_c1: f64,
    pub ssim_c2: f64,
    /// Bounding-box growth applied to the object mask before the loss.
    pub mask_pad: usize,
    /// Use `λ_L1·|Δ| − λ_SSIM·SSIM` instead of the nonnegative DSSIM form.
    pub literal_ssim_sign: bool,
}

impl Default for PhotometricConfig {
    fn default() -> Self {
        Self {
            lambda_l1: 0.15,
            lambda_ssim: 0.85,
            ssim_window: 7,
            ssim_c1: 0.01 * 0.01,
            ssim_c2: 0.03 * 0.03,
            mask_pad: 20,
            literal_ssim_sign: false,
        }
    }
}

impl PhotometricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_l1 >= 0.0 && self.lambda_ssim >= 0.0) {
            return Err(Error::Argument("loss weights must be >= 0".into()));
        }
        if self.ssim_window < 3 || self.ssim_window % 2 == 0 {
            return Err(Error::Argument(format!(
                "ssim window must be odd and >= 3, got {}",
                self.ssim_window
            )));
        }
        if !(self.ssim_c1 > 0.0 && self.ssim_c2 > 0.0) {
            return Err(Error::Argument("ssim stabilizers must be > 0".into()));
        }
        Ok(())
    }
}

/// Value of the masked loss plus the number of pixels it averaged over.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhotometricLoss {
    pub value: f64,
    pub masked_pixels: usize,
}

impl PhotometricLoss {
    pub fn is_empty_mask(&self) -> bool {
        self.masked_pixels == 0
    }
}

/// Per-pixel SSIM and its partial derivatives with respect to the windowed
/// moments of the first image: mean, mean of squares, mean of cross products.
struct SsimPixel {
    ssim: f64,
    d_mean: f64,
    d_sq: f64,
    d_cross: f64,
    count: f64,
}

fn ssim_pixel(
    a: &Grid,
    b: &Grid,
    mask: Option<&BinaryMask>,
    y: usize,
    x: usize,
    c: usize,
    cfg: &PhotometricConfig,
) -> SsimPixel {
    let r = cfg.ssim_window / 2;
    let (h, w) = (a.height(), a.width());
    let (mut n, mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for qy in y.saturating_sub(r)..(y + r + 1).min(h) {
        for qx in x.saturating_sub(r)..(x + r + 1).min(w) {
            if mask.is_some_and(|m| !m.get(qy, qx)) {
                continue;
            }
            let va = a.get(qy, qx, c);
            let vb = b.get(qy, qx, c);
            n += 1.0;
            sa += va;
            sb += vb;
            saa += va * va;
            sbb += vb * vb;
            sab += va * vb;
        }
    }
    let (mu_a, mu_b) = (sa / n, sb / n);
    let var_a = saa / n - mu_a * mu_a;
    let var_b = sbb / n - mu_b * mu_b;
    let cov = sab / n - mu_a * mu_b;
    let (c1, c2) = (cfg.ssim_c1, cfg.ssim_c2);
    let num_l = 2.0 * mu_a * mu_b + c1;
    let num_s = 2.0 * cov + c2;
    let den_l = mu_a * mu_a + mu_b * mu_b + c1;
    let den_s = var_a + var_b + c2;
    let den = den_l * den_s;
    let ssim = num_l * num_s / den;
    // Chain through var_a = E[a²] − μa² and cov = E[ab] − μa·μb.
    let d_mean = (2.0 * mu_b * num_s - 2.0 * mu_b * num_l) / den
        - ssim * (2.0 * mu_a / den_l - 2.0 * mu_a / den_s);
    SsimPixel {
        ssim,
        d_mean,
        d_sq: -ssim / den_s,
        d_cross: 2.0 * num_l / den,
        count: n,
    }
}

/// Per-pixel, per-channel structural similarity over the configured window.
pub fn ssim_map(a: &Grid, b: &Grid, config: &PhotometricConfig) -> Result<Grid> {
    config.validate()?;
    a.check_same_shape(b, "ssim_map")?;
    let (h, w, ch) = a.shape();
    let mut out = Grid::zeros(h, w, ch);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                out.set(y, x, c, ssim_pixel(a, b, None, y, x, c, config).ssim);
            }
        }
    }
    Ok(out)
}

/// Forward and reverse pass of the masked loss. The gradient is with respect
/// to `warped` only; `current` is data.
pub fn photometric_loss_and_grad(
    current: &Grid,
    warped: &Grid,
    mask: &BinaryMask,
    config: &PhotometricConfig,
) -> Result<(PhotometricLoss, Grid)> {
    config.validate()?;
    current.check_same_shape(warped, "photometric loss")?;
    mask.check_plane(current, "photometric loss")?;
    let (h, w, ch) = current.shape();
    let mut grad = Grid::zeros(h, w, ch);
    let masked = mask.count();
    if masked == 0 {
        return Ok((
            PhotometricLoss {
                value: 0.0,
                masked_pixels: 0,
            },
            grad,
        ));
    }
    let norm = 1.0 / (masked * ch) as f64;
    let ssim_weight = if config.literal_ssim_sign {
        -config.lambda_ssim
    } else {
        -0.5 * config.lambda_ssim
    };
    let r = config.ssim_window / 2;
    let mut total = 0.0;
    // Moment sensitivities accumulated per window center, then scattered.
    let mut coef = vec![(0.0, 0.0, 0.0); h * w * ch];
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            for c in 0..ch {
                let diff = warped.get(y, x, c) - current.get(y, x, c);
                let s = ssim_pixel(warped, current, Some(mask), y, x, c, config);
                let ssim_term = if config.literal_ssim_sign {
                    -config.lambda_ssim * s.ssim
                } else {
                    0.5 * config.lambda_ssim * (1.0 - s.ssim)
                };
                total += config.lambda_l1 * diff.abs() + ssim_term;
                let sign = if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                grad.add_at(y, x, c, norm * config.lambda_l1 * sign);
                let u = norm * ssim_weight / s.count;
                coef[(y * w + x) * ch + c] = (u * s.d_mean, u * s.d_sq, u * s.d_cross);
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            for c in 0..ch {
                let (dm, ds, dc) = coef[(y * w + x) * ch + c];
                if dm == 0.0 && ds == 0.0 && dc == 0.0 {
                    continue;
                }
                for qy in y.saturating_sub(r)..(y + r + 1).min(h) {
                    for qx in x.saturating_sub(r)..(x + r + 1).min(w) {
                        if !mask.get(qy, qx) {
                            continue;
                        }
                        let va = warped.get(qy, qx, c);
                        let vb = current.get(qy, qx, c);
                        grad.add_at(qy, qx, c, dm + 2.0 * va * ds + vb * dc);
                    }
                }
            }
        }
    }
    Ok((
        PhotometricLoss {
            value: total * norm,
            masked_pixels: masked,
        },
        grad,
    ))
}

/// Masked, count-normalized L1 + DSSIM reconstruction loss.
pub fn masked_photometric_loss(
    current: &Grid,
    warped: &Grid,
    mask: &BinaryMask,
    config: &PhotometricConfig,
) -> Result<PhotometricLoss> {
    photometric_loss_and_grad(current, warped, mask, config).map(|(l, _)| l)
}

/// Gradient of `masked_photometric_loss(current, warp(previous, flow))` with
/// respect to both flow components.
pub fn loss_gradient_wrt_flow(
    current: &Grid,
    previous: &Grid,
    flow: &FlowField,
    mask: &BinaryMask,
    config: &PhotometricConfig,
) -> Result<(PhotometricLoss, FlowField)> {
    let warped = warp(previous, flow)?;
    let (loss, g_warped) = photometric_loss_and_grad(current, &warped, mask, config)?;
    if loss.is_empty_mask() {
        return Ok((loss, FlowField::zeros(flow.height(), flow.width())));
    }
    let (_, g_flow) = warp_backward(previous, flow, &g_warped)?;
    Ok((loss, g_flow))
}
