//! Two-convolution flow estimator and its end-to-end photometric gradient.
//!
//! Per-frame features at `1/scale` resolution are concatenated
//! (current, previous), mapped by a 1×1 convolution and then a 3×3
//! convolution to two channels, and bilinearly upsampled to a full
//! resolution flow. There is no nonlinearity, so the model is affine in the
//! features for fixed weights.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::mask::{mask_to_bbox, BinaryMask};
use crate::photometric::{photometric_loss_and_grad, PhotometricConfig};
use crate::tensor::{
    bilinear_resize, bilinear_resize_backward, box_downsample, conv2d, conv2d_backward,
    ConvKernel, Grid,
};
use crate::warp::{warp, warp_backward, FlowField};

/// Fixed (never trained) stand-in for a pretrained backbone.
///
/// Channels, in order: block-averaged intensities, horizontal and vertical
/// central differences of each intensity channel, then `tanh` of a seeded
/// random 3×3 filter bank applied to the block-averaged intensities.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    scale: usize,
    channels: usize,
    image_channels: usize,
    seed: u64,
    bank: Option<ConvKernel>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack(pub Grid);

impl FeatureStack {
    pub fn grid(&self) -> &Grid {
        &self.0
    }
}

impl FeatureExtractor {
    pub fn new(scale: usize, channels: usize, image_channels: usize, seed: u64) -> Result<Self> {
        if scale == 0 {
            return Err(Error::Argument("feature scale must be >= 1".into()));
        }
        let fixed = 3 * image_channels;
        if channels < fixed {
            return Err(Error::Argument(format!(
                "need at least {fixed} feature channels for {image_channels}-channel frames, got {channels}"
            )));
        }
        let random = channels - fixed;
        let bank = if random > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let std = (1.0 / (9 * image_channels) as f64).sqrt() * 4.0;
            let normal = Normal::new(0.0, std).expect("positive std");
            let weights = (0..random * image_channels * 9)
                .map(|_| normal.sample(&mut rng))
                .collect();
            let bias = (0..random).map(|_| normal.sample(&mut rng) * 0.5).collect();
            Some(ConvKernel::new(
                image_channels,
                random,
                3,
                3,
                weights,
                Some(bias),
            )?)
        } else {
            None
        };
        Ok(Self {
            scale,
            channels,
            image_channels,
            seed,
            bank,
        })
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn extract(&self, frame: &Grid) -> Result<FeatureStack> {
        if frame.channels() != self.image_channels {
            return Err(Error::Dimension(format!(
                "extractor built for {}-channel frames, got {}",
                self.image_channels,
                frame.channels()
            )));
        }
        let low = box_downsample(frame, self.scale)?;
        let (h, w, ic) = low.shape();
        let mut out = Grid::zeros(h, w, self.channels);
        let random = match &self.bank {
            Some(k) => Some(conv2d(&low, k)?),
            None => None,
        };
        for y in 0..h {
            for x in 0..w {
                for c in 0..ic {
                    out.set(y, x, c, low.get(y, x, c));
                    let gx = 0.5 * (low.get(y, (x + 1).min(w - 1), c) - low.get(y, x.saturating_sub(1), c));
                    let gy = 0.5 * (low.get((y + 1).min(h - 1), x, c) - low.get(y.saturating_sub(1), x, c));
                    out.set(y, x, ic + 2 * c, gx);
                    out.set(y, x, ic + 2 * c + 1, gy);
                }
                if let Some(r) = &random {
                    for k in 0..r.channels() {
                        out.set(y, x, 3 * ic + k, r.get(y, x, k).tanh());
                    }
                }
            }
        }
        Ok(FeatureStack(out))
    }
}

/// How a fresh parameter set is initialized. Both variants predict exactly
/// zero flow.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MotionInit {
    /// Every weight and bias zero. Gradients reach only the second bias, so
    /// the model can express uniform translation only.
    Zeros,
    /// First convolution drawn from `N(0, std²)` with the given seed; second
    /// convolution and both biases zero.
    SeededFirstLayer { std: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionConfig {
    /// Channels of the concatenated (current, previous) feature input.
    pub input_channels: usize,
    pub mid_channels: usize,
    pub scale: usize,
    pub init: MotionInit,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self {
            input_channels: 32,
            mid_channels: 16,
            scale: 8,
            init: MotionInit::Zeros,
        }
    }
}

impl MotionConfig {
    /// Full-width layers sized for ResNet18 `conv_3x` features.
    pub fn full_width() -> Self {
        Self {
            input_channels: 256,
            mid_channels: 96,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionParams {
    pub w1: ConvKernel,
    pub w2: ConvKernel,
    pub scale: usize,
}

impl MotionParams {
    pub fn new(config: &MotionConfig) -> Result<Self> {
        if config.input_channels == 0 || config.input_channels % 2 != 0 {
            return Err(Error::Argument(format!(
                "input channels must be a positive even count, got {}",
                config.input_channels
            )));
        }
        if config.scale == 0 {
            return Err(Error::Argument("upsample scale must be >= 1".into()));
        }
        let mut w1 = ConvKernel::zeros(config.input_channels, config.mid_channels, 1, 1, true)?;
        let w2 = ConvKernel::zeros(config.mid_channels, 2, 3, 3, true)?;
        if let MotionInit::SeededFirstLayer { std, seed } = config.init {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, std)
                .map_err(|e| Error::Argument(format!("init std: {e}")))?;
            for v in w1.weights_mut() {
                *v = normal.sample(&mut rng);
            }
        }
        Ok(Self {
            w1,
            w2,
            scale: config.scale,
        })
    }

    pub fn param_count(&self) -> usize {
        self.w1.param_count() + self.w2.param_count()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        self.w1.flatten_into(&mut v);
        self.w2.flatten_into(&mut v);
        v
    }

    /// A copy of `self` with all scalars replaced from `flat`.
    pub fn with_values(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.param_count() {
            return Err(Error::Dimension(format!(
                "expected {} motion parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut out = self.clone();
        let rest = out.w1.load_from(flat)?;
        out.w2.load_from(rest)?;
        Ok(out)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w1: self.w1.zeros_like(),
            w2: self.w2.zeros_like(),
            scale: self.scale,
        }
    }
}

struct ForwardCache {
    input: Grid,
    mid: Grid,
    low: Grid,
}

fn forward(
    params: &MotionParams,
    feat_current: &FeatureStack,
    feat_previous: &FeatureStack,
) -> Result<(FlowField, ForwardCache)> {
    if feat_current.0.shape() != feat_previous.0.shape() {
        return Err(Error::Dimension(format!(
            "feature shapes differ: {:?} vs {:?}",
            feat_current.0.shape(),
            feat_previous.0.shape()
        )));
    }
    let input = Grid::concat_channels(&[&feat_current.0, &feat_previous.0])?;
    let mid = conv2d(&input, &params.w1)?;
    let low = conv2d(&mid, &params.w2)?;
    let flow = FlowField::from_grid(bilinear_resize(&low, params.scale)?)?;
    Ok((flow, ForwardCache { input, mid, low }))
}

/// Full-resolution flow `O_{t,t-1}` for one frame pair.
pub fn predict_flow(
    params: &MotionParams,
    feat_current: &FeatureStack,
    feat_previous: &FeatureStack,
) -> Result<FlowField> {
    forward(params, feat_current, feat_previous).map(|(f, _)| f)
}

/// One training pair: frames `t` and `t-1`, their features, and the object
/// mask of frame `t` (before bounding-box expansion).
#[derive(Debug, Clone, Copy)]
pub struct FramePair<'a> {
    pub current: &'a Grid,
    pub previous: &'a Grid,
    pub feat_current: &'a FeatureStack,
    pub feat_previous: &'a FeatureStack,
    pub mask: &'a BinaryMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalStatus {
    Ok,
    /// The loss region is empty; loss and gradient are zero.
    EmptyMask,
    /// The gradient vanished exactly; a relaxed steepest descent step is
    /// undefined here.
    ZeroGradient,
}

#[derive(Debug, Clone)]
pub struct MotionEval {
    pub loss: f64,
    pub grad: MotionParams,
    pub status: EvalStatus,
}

pub(crate) fn eval_with_region(
    params: &MotionParams,
    pair: &FramePair<'_>,
    region: &BinaryMask,
    config: &PhotometricConfig,
) -> Result<MotionEval> {
    let (flow, cache) = forward(params, pair.feat_current, pair.feat_previous)?;
    if pair.current.height() != flow.height() || pair.current.width() != flow.width() {
        return Err(Error::Dimension(format!(
            "flow {}x{} does not cover frame {}x{}",
            flow.height(),
            flow.width(),
            pair.current.height(),
            pair.current.width()
        )));
    }
    let warped = warp(pair.previous, &flow)?;
    let (loss, g_warped) = photometric_loss_and_grad(pair.current, &warped, region, config)?;
    if loss.is_empty_mask() {
        return Ok(MotionEval {
            loss: 0.0,
            grad: params.zeros_like(),
            status: EvalStatus::EmptyMask,
        });
    }
    let (_, g_flow) = warp_backward(pair.previous, &flow, &g_warped)?;
    let g_low = bilinear_resize_backward(cache.low.shape(), params.scale, g_flow.as_grid())?;
    let (g_mid, g_w2) = conv2d_backward(&cache.mid, &params.w2, &g_low)?;
    let (_, g_w1) = conv2d_backward(&cache.input, &params.w1, &g_mid)?;
    let grad = MotionParams {
        w1: g_w1,
        w2: g_w2,
        scale: params.scale,
    };
    let status = if grad.to_vec().iter().all(|&g| g == 0.0) {
        EvalStatus::ZeroGradient
    } else {
        EvalStatus::Ok
    };
    Ok(MotionEval {
        loss: loss.value,
        grad,
        status,
    })
}

/// Masked photometric loss of the predicted flow on one pair, and its exact
/// gradient with respect to every motion parameter.
pub fn loss_and_gradient(
    params: &MotionParams,
    pair: &FramePair<'_>,
    config: &PhotometricConfig,
) -> Result<MotionEval> {
    let region = mask_to_bbox(pair.mask, config.mask_pad);
    eval_with_region(params, pair, &region, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn textured(h: usize, w: usize, phase: f64) -> Grid {
        Grid::from_fn(h, w, 1, |y, x, _| {
            0.5 + 0.25 * ((x as f64 + phase) * 0.45).sin() + 0.2 * (y as f64 * 0.3).cos()
        })
    }

    #[test]
    fn extractor_is_deterministic_and_shaped() {
        let ex = FeatureExtractor::new(8, 16, 3, 42).unwrap();
        let frame = Grid::from_fn(64, 64, 3, |y, x, c| ((x * 3 + y * 5 + c) % 17) as f64 / 17.0);
        let a = ex.extract(&frame).unwrap();
        let b = FeatureExtractor::new(8, 16, 3, 42)
            .unwrap()
            .extract(&frame)
            .unwrap();
        assert_eq!(a.0.shape(), (8, 8, 16));
        assert_eq!(a, b);
    }

    #[test]
    fn constant_frame_has_flat_gradient_channels() {
        let ex = FeatureExtractor::new(8, 16, 1, 1).unwrap();
        let f = ex.extract(&Grid::filled(32, 32, 1, 0.3)).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(f.0.get(y, x, 1), 0.0);
                assert_eq!(f.0.get(y, x, 2), 0.0);
            }
        }
    }

    #[test]
    fn extractor_rejects_too_few_channels() {
        assert!(FeatureExtractor::new(8, 8, 3, 0).is_err());
    }

    #[test]
    fn zero_params_predict_zero_flow() {
        let cfg = MotionConfig {
            init: MotionInit::Zeros,
            ..Default::default()
        };
        let p = MotionParams::new(&cfg).unwrap();
        let ex = FeatureExtractor::new(8, 16, 1, 3).unwrap();
        let f = ex.extract(&textured(32, 32, 0.0)).unwrap();
        let flow = predict_flow(&p, &f, &f).unwrap();
        assert!(flow.as_grid().data().iter().all(|&v| v == 0.0));
        // Seeded first layer still predicts zero flow.
        let p = MotionParams::new(&MotionConfig {
            init: MotionInit::SeededFirstLayer { std: 0.1, seed: 7 },
            ..Default::default()
        })
        .unwrap();
        let flow = predict_flow(&p, &f, &f).unwrap();
        assert!(flow.as_grid().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_bias_gives_uniform_flow() {
        let mut p = MotionParams::new(&MotionConfig {
            init: MotionInit::Zeros,
            ..Default::default()
        })
        .unwrap();
        p.w2.bias_mut().unwrap().copy_from_slice(&[1.25, -0.5]);
        let ex = FeatureExtractor::new(8, 16, 1, 3).unwrap();
        let f = ex.extract(&textured(32, 32, 0.0)).unwrap();
        let flow = predict_flow(&p, &f, &f).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!((flow.du(y, x), flow.dv(y, x)), (1.25, -0.5));
            }
        }
    }

    #[test]
    fn prediction_is_composition_of_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = MotionParams::new(&MotionConfig::default()).unwrap();
        let p = p.with_values(
            &(0..p.param_count())
                .map(|_| rng.random_range(-0.2..0.2))
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let ex = FeatureExtractor::new(8, 16, 1, 3).unwrap();
        let fa = ex.extract(&textured(32, 32, 0.0)).unwrap();
        let fb = ex.extract(&textured(32, 32, 2.0)).unwrap();
        let flow = predict_flow(&p, &fa, &fb).unwrap();
        let cat = Grid::concat_channels(&[&fa.0, &fb.0]).unwrap();
        let manual = bilinear_resize(
            &conv2d(&conv2d(&cat, &p.w1).unwrap(), &p.w2).unwrap(),
            8,
        )
        .unwrap();
        assert_eq!(flow.as_grid(), &manual);
    }

    #[test]
    fn mismatched_features_error() {
        let p = MotionParams::new(&MotionConfig::default()).unwrap();
        let a = FeatureStack(Grid::zeros(4, 4, 16));
        let b = FeatureStack(Grid::zeros(4, 5, 16));
        assert!(matches!(predict_flow(&p, &a, &b), Err(Error::Dimension(_))));
        let c = FeatureStack(Grid::zeros(4, 4, 8));
        assert!(predict_flow(&p, &c, &c).is_err());
    }

    #[test]
    fn identical_frames_zero_params_zero_loss() {
        let p = MotionParams::new(&MotionConfig::default()).unwrap();
        let ex = FeatureExtractor::new(8, 16, 1, 3).unwrap();
        let img = textured(32, 32, 0.0);
        let f = ex.extract(&img).unwrap();
        let mask = BinaryMask::full(32, 32);
        let pair = FramePair {
            current: &img,
            previous: &img,
            feat_current: &f,
            feat_previous: &f,
            mask: &mask,
        };
        let e = loss_and_gradient(&p, &pair, &PhotometricConfig::default()).unwrap();
        assert!(e.loss.abs() < 1e-12);
    }

    #[test]
    fn empty_mask_reports_status() {
        let p = MotionParams::new(&MotionConfig::default()).unwrap();
        let ex = FeatureExtractor::new(8, 16, 1, 3).unwrap();
        let a = textured(32, 32, 0.0);
        let b = textured(32, 32, 1.5);
        let (fa, fb) = (ex.extract(&a).unwrap(), ex.extract(&b).unwrap());
        let mask = BinaryMask::empty(32, 32);
        let pair = FramePair {
            current: &a,
            previous: &b,
            feat_current: &fa,
            feat_previous: &fb,
            mask: &mask,
        };
        let e = loss_and_gradient(&p, &pair, &PhotometricConfig::default()).unwrap();
        assert_eq!(e.status, EvalStatus::EmptyMask);
        assert_eq!(e.loss, 0.0);
        assert!(e.grad.to_vec().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn flow_is_linear_in_second_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let base = MotionParams::new(&MotionConfig::default()).unwrap();
        let ex = FeatureExtractor::new(8, 16, 1, 3).unwrap();
        let fa = ex.extract(&textured(32, 32, 0.0)).unwrap();
        let fb = ex.extract(&textured(32, 32, 1.0)).unwrap();
        let mut rand_w2 = |p: &MotionParams| {
            let mut q = p.clone();
            for v in q.w2.weights_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            for v in q.w2.bias_mut().unwrap() {
                *v = rng.random_range(-1.0..1.0);
            }
            q
        };
        let pa = rand_w2(&base);
        let pb = rand_w2(&base);
        let (a, b) = (0.7, -1.3);
        let mut pc = base.clone();
        for i in 0..pc.w2.weights().len() {
            pc.w2.weights_mut()[i] = a * pa.w2.weights()[i] + b * pb.w2.weights()[i];
        }
        for i in 0..2 {
            pc.w2.bias_mut().unwrap()[i] = a * pa.w2.bias().unwrap()[i] + b * pb.w2.bias().unwrap()[i];
        }
        let fa_ = predict_flow(&pa, &fa, &fb).unwrap().into_grid();
        let fb_ = predict_flow(&pb, &fa, &fb).unwrap().into_grid();
        let fc = predict_flow(&pc, &fa, &fb).unwrap().into_grid();
        let sup = fa_.scale(a).add(&fb_.scale(b)).unwrap();
        assert!(fc.max_abs_diff(&sup).unwrap() <= 1e-6);
    }
}
