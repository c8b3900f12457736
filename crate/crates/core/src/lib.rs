//! Online optical flow with relaxed steepest descent.
//!
//! A tiny two-convolution motion model is fitted per frame pair against a
//! masked photometric loss (L1 plus DSSIM of the warped previous frame). The
//! step size `α = L / ‖J‖²` assumes the loss has an ideal minimum of zero.
//! Fitted flows feed a gated integration head that fuses warped past
//! probability maps into the current one.
//!
//! All grids are `f64`, row-major `[y][x][c]`.

pub mod error;
pub mod integration;
pub mod mask;
pub mod metrics;
pub mod motion;
pub mod online;
pub mod optim;
pub mod photometric;
pub mod tensor;
pub mod warp;

pub use error::{Error, Result};
pub use integration::{
    bce_loss, integrate, train_integration, HistoryState, IntegrationConfig, IntegrationParams,
    IntegrationSample, PastFrame, TrainConfig, TrainResult,
};
pub use mask::{mask_to_bbox, BinaryMask, BoundingBox};
pub use metrics::{boundary_f, crop_to_bbox_pair, iou, mean_ssim, psnr};
pub use motion::{
    loss_and_gradient, predict_flow, FeatureExtractor, FeatureStack, FramePair, MotionConfig,
    MotionInit, MotionParams,
};
pub use online::{
    run_batched, run_streaming, MotionSession, OnlineOptimizer, OptimizationTrace, PairFlow,
    SessionConfig,
};
pub use optim::{rsd_optimize, rsd_step, RsdConfig, StepOutcome};
pub use photometric::{masked_photometric_loss, ssim_map, PhotometricConfig};
pub use tensor::{ConvKernel, Grid};
pub use warp::{warp, warp_backward, warp_chain, FlowField};
