//! Per-object online flow estimation over a frame stream.
//!
//! Every update starts from freshly initialized motion parameters and runs a
//! fixed number of optimizer iterations on the masked photometric loss. The
//! streaming runner updates on every new frame; the batched runner updates
//! every `N` frames on the `N` most recent pairs jointly.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::mask::{mask_to_bbox, BinaryMask};
use crate::motion::{
    eval_with_region, predict_flow, FeatureExtractor, FeatureStack, FramePair, MotionConfig,
    MotionParams,
};
use crate::optim::{adam_step, rsd_update, AdamState, Objective, RsdConfig, RsdStepRecord, StepOutcome};
use crate::photometric::{photometric_loss_and_grad, PhotometricConfig};
use crate::tensor::Grid;
use crate::warp::{warp, FlowField};

/// Mean masked photometric loss over a batch of pairs, as a function of the
/// flattened motion parameters.
pub struct MotionObjective<'a> {
    template: MotionParams,
    pairs: Vec<(FramePair<'a>, BinaryMask)>,
    config: PhotometricConfig,
}

impl<'a> MotionObjective<'a> {
    pub fn new(
        template: &MotionParams,
        pairs: &[FramePair<'a>],
        config: &PhotometricConfig,
    ) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Argument("motion objective needs at least one pair".into()));
        }
        Ok(Self {
            template: template.clone(),
            pairs: pairs
                .iter()
                .map(|p| (*p, mask_to_bbox(p.mask, config.mask_pad)))
                .collect(),
            config: config.clone(),
        })
    }

    pub fn params(&self, flat: &[f64]) -> Result<MotionParams> {
        self.template.with_values(flat)
    }
}

impl Objective for MotionObjective<'_> {
    fn dim(&self) -> usize {
        self.template.param_count()
    }

    fn evaluate(&self, flat: &[f64]) -> Result<f64> {
        let params = self.params(flat)?;
        let mut total = 0.0;
        for (pair, region) in &self.pairs {
            let flow = predict_flow(&params, pair.feat_current, pair.feat_previous)?;
            let warped = warp(pair.previous, &flow)?;
            total += photometric_loss_and_grad(pair.current, &warped, region, &self.config)?
                .0
                .value;
        }
        Ok(total / self.pairs.len() as f64)
    }

    fn gradient(&self, flat: &[f64]) -> Result<Vec<f64>> {
        self.value_and_gradient(flat).map(|(_, g)| g)
    }

    fn value_and_gradient(&self, flat: &[f64]) -> Result<(f64, Vec<f64>)> {
        let params = self.params(flat)?;
        let n = self.pairs.len() as f64;
        let mut loss = 0.0;
        let mut grad = vec![0.0; flat.len()];
        for (pair, region) in &self.pairs {
            let e = eval_with_region(&params, pair, region, &self.config)?;
            loss += e.loss;
            for (g, v) in grad.iter_mut().zip(e.grad.to_vec()) {
                *g += v;
            }
        }
        grad.iter_mut().for_each(|g| *g /= n);
        Ok((loss / n, grad))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OnlineOptimizer {
    Rsd(RsdConfig),
    Sgd { lr: f64 },
    Adam { lr: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// All requested iterations ran.
    Completed,
    /// Loss reached the floor.
    Converged,
    /// Gradient vanished with nonzero loss; the last parameters are kept.
    Stationary,
}

/// Result of optimizing one parameter set.
#[derive(Debug, Clone)]
pub struct OptimizationTrace {
    pub params: Vec<f64>,
    /// Loss before each iteration followed by the loss at the returned
    /// parameters.
    pub losses: Vec<f64>,
    /// Step records (relaxed steepest descent only).
    pub steps: Vec<RsdStepRecord>,
    pub stop: StopReason,
}

impl OptimizationTrace {
    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("at least the initial loss")
    }

    pub fn initial_loss(&self) -> f64 {
        self.losses[0]
    }
}

/// Runs `iterations` updates of `optimizer` from `init`.
pub fn optimize(
    objective: &dyn Objective,
    init: &[f64],
    optimizer: &OnlineOptimizer,
    iterations: usize,
) -> Result<OptimizationTrace> {
    let mut params = init.to_vec();
    let (mut loss, mut grad) = objective.value_and_gradient(&params)?;
    let mut losses = vec![loss];
    let mut steps = Vec::new();
    let mut adam = AdamState::new(params.len());
    let mut stop = StopReason::Completed;
    for i in 0..iterations {
        match optimizer {
            OnlineOptimizer::Rsd(cfg) => match rsd_update(&params, loss, &grad, i, cfg) {
                Ok(StepOutcome::Stepped { params: p, record }) => {
                    steps.push(record);
                    params = p;
                }
                Ok(StepOutcome::Converged { .. }) => {
                    stop = StopReason::Converged;
                    break;
                }
                Err(Error::Stationary { .. }) => {
                    stop = StopReason::Stationary;
                    break;
                }
                Err(e) => return Err(e),
            },
            OnlineOptimizer::Sgd { lr } => {
                if !(*lr > 0.0) {
                    return Err(Error::Argument(format!("learning rate must be > 0, got {lr}")));
                }
                params = params.iter().zip(&grad).map(|(p, g)| p - lr * g).collect();
            }
            OnlineOptimizer::Adam { lr } => {
                params = adam_step(objective, &params, *lr, &mut adam)?;
            }
        }
        (loss, grad) = objective.value_and_gradient(&params)?;
        losses.push(loss);
    }
    Ok(OptimizationTrace {
        params,
        losses,
        steps,
        stop,
    })
}

#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub motion: MotionConfig,
    pub photometric: PhotometricConfig,
    pub optimizer: OnlineOptimizer,
    /// Optimizer iterations per update.
    pub iterations: usize,
    /// Seed of the fixed feature extractor's random filter bank.
    pub feature_seed: u64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            motion: MotionConfig::default(),
            photometric: PhotometricConfig::default(),
            optimizer: OnlineOptimizer::Rsd(RsdConfig::default()),
            iterations: 5,
            feature_seed: 2021,
        }
    }
}

impl SessionConfig {
    /// Interval-2 batching with two iterations per update.
    pub fn rsd_star() -> (Self, usize) {
        (
            Self {
                iterations: 2,
                ..Self::default()
            },
            2,
        )
    }
}

#[derive(Debug, Clone)]
pub struct CachedFrame {
    pub index: usize,
    pub frame: Grid,
    pub features: FeatureStack,
}

/// Bounded store of recent frames and their features, evicting the oldest.
#[derive(Debug, Clone)]
pub struct FrameCache {
    capacity: usize,
    entries: VecDeque<CachedFrame>,
}

impl FrameCache {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Argument("frame cache capacity must be >= 1".into()));
        }
        Ok(Self {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, entry: CachedFrame) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(entry);
    }

    pub fn get(&self, index: usize) -> Option<&CachedFrame> {
        self.entries.iter().find(|e| e.index == index)
    }

    pub fn indices(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.index).collect()
    }
}

/// Flow for the pair `(current, current − 1)`.
#[derive(Debug, Clone)]
pub struct PairFlow {
    pub current: usize,
    /// Frame index at which the producing update ran.
    pub updated_at: usize,
    pub flow: FlowField,
    pub trace: OptimizationTrace,
}

/// One object's online estimation state: fixed extractor, configuration and
/// instrumentation counters.
#[derive(Debug, Clone)]
pub struct MotionSession {
    config: SessionConfig,
    extractor: FeatureExtractor,
    extractions: usize,
}

impl MotionSession {
    pub fn new(config: SessionConfig, image_channels: usize) -> Result<Self> {
        config.photometric.validate()?;
        if config.iterations == 0 {
            return Err(Error::Argument("iterations must be >= 1".into()));
        }
        let extractor = FeatureExtractor::new(
            config.motion.scale,
            config.motion.input_channels / 2,
            image_channels,
            config.feature_seed,
        )?;
        MotionParams::new(&config.motion)?;
        Ok(Self {
            config,
            extractor,
            extractions: 0,
        })
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    /// Number of feature extractions performed so far.
    pub fn extractions(&self) -> usize {
        self.extractions
    }

    pub fn extract(&mut self, frame: &Grid) -> Result<FeatureStack> {
        self.extractions += 1;
        self.extractor.extract(frame)
    }

    /// Fresh parameters optimized on `pairs` jointly; returns the parameters
    /// and the optimizer trace.
    pub fn fit(&self, pairs: &[FramePair<'_>]) -> Result<(MotionParams, OptimizationTrace)> {
        let init = MotionParams::new(&self.config.motion)?;
        let objective = MotionObjective::new(&init, pairs, &self.config.photometric)?;
        let trace = optimize(
            &objective,
            &init.to_vec(),
            &self.config.optimizer,
            self.config.iterations,
        )?;
        Ok((objective.params(&trace.params)?, trace))
    }
}

fn check_stream(frames: &[Grid], masks: &[BinaryMask]) -> Result<()> {
    if frames.len() < 2 {
        return Err(Error::Argument("need at least two frames".into()));
    }
    if masks.len() != frames.len() {
        return Err(Error::Argument(format!(
            "{} masks for {} frames",
            masks.len(),
            frames.len()
        )));
    }
    Ok(())
}

/// Updates on every frame `t ≥ 1` using the cached frame `t − 1`.
/// `masks[t]` is the object mask of frame `t`.
pub fn run_streaming(
    session: &mut MotionSession,
    frames: &[Grid],
    masks: &[BinaryMask],
) -> Result<Vec<PairFlow>> {
    check_stream(frames, masks)?;
    let mut cache = FrameCache::new(2)?;
    let mut out = Vec::with_capacity(frames.len() - 1);
    for (t, frame) in frames.iter().enumerate() {
        let features = session.extract(frame)?;
        if t > 0 {
            let prev = cache
                .get(t - 1)
                .ok_or_else(|| Error::Internal(format!("frame {} missing from cache", t - 1)))?;
            let pair = FramePair {
                current: frame,
                previous: &prev.frame,
                feat_current: &features,
                feat_previous: &prev.features,
                mask: &masks[t],
            };
            let (params, trace) = session.fit(&[pair])?;
            let flow = predict_flow(&params, &features, &prev.features)?;
            out.push(PairFlow {
                current: t,
                updated_at: t,
                flow,
                trace,
            });
        }
        cache.push(CachedFrame {
            index: t,
            frame: frame.clone(),
            features,
        });
    }
    Ok(out)
}

/// Updates at every `t > 0` with `t mod interval == 0`, jointly on the pairs
/// `(t−i+1, t−i)` for `i = 1..=interval`. Pairs after the last multiple of
/// `interval` are not emitted.
pub fn run_batched(
    session: &mut MotionSession,
    frames: &[Grid],
    masks: &[BinaryMask],
    interval: usize,
) -> Result<Vec<PairFlow>> {
    check_stream(frames, masks)?;
    if interval == 0 {
        return Err(Error::Argument("update interval must be >= 1".into()));
    }
    let mut cache = FrameCache::new(interval + 1)?;
    let mut out = Vec::new();
    for (t, frame) in frames.iter().enumerate() {
        let features = session.extract(frame)?;
        if t != 0 && t % interval == 0 {
            let lookup = |idx: usize| -> Result<(&Grid, &FeatureStack)> {
                if idx == t {
                    return Ok((frame, &features));
                }
                cache
                    .get(idx)
                    .map(|c| (&c.frame, &c.features))
                    .ok_or_else(|| Error::Internal(format!("frame {idx} missing from cache")))
            };
            let mut batch = Vec::with_capacity(interval);
            let mut currents = Vec::with_capacity(interval);
            // Oldest pair first.
            for i in (1..=interval).rev() {
                currents.push(t - i + 1);
                let (cur, fcur) = lookup(t - i + 1)?;
                let (prev, fprev) = lookup(t - i)?;
                batch.push(FramePair {
                    current: cur,
                    previous: prev,
                    feat_current: fcur,
                    feat_previous: fprev,
                    mask: &masks[t - i + 1],
                });
            }
            if batch.len() != interval {
                return Err(Error::Internal(format!(
                    "batch holds {} pairs, expected {interval}",
                    batch.len()
                )));
            }
            let (params, trace) = session.fit(&batch)?;
            for (pair, &current) in batch.iter().zip(&currents) {
                let flow = predict_flow(&params, pair.feat_current, pair.feat_previous)?;
                out.push(PairFlow {
                    current,
                    updated_at: t,
                    flow,
                    trace: trace.clone(),
                });
            }
        }
        cache.push(CachedFrame {
            index: t,
            frame: frame.clone(),
            features,
        });
    }
    Ok(out)
}
