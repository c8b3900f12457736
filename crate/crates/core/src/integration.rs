//! Gated fusion of the current probability map with flow-warped history.
//!
//! ```text
//! x    = w_x  * P_t
//! h1   = w_h1 * W(P_{t-1}, O_{t,t-1})
//! h2   = w_h2 * W(W(P_{t-2}, O_{t-1,t-2}), O_{t,t-1})
//! r1   = w_r1 * |I_t − W(I_{t-1}, O_{t,t-1})|
//! r2   = w_r2 * |I_t − W(W(I_{t-2}, O_{t-1,t-2}), O_{t,t-1})|
//! out  = clamp(x + h1·(1 − σ(r1)) + h2·(1 − σ(r2)), 0, 1)
//! ```
//!
//! Reconstruction errors are kept per color channel, so the gate kernels
//! take as many input channels as the frames have.

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::tensor::{conv2d, conv2d_backward, sigmoid, ConvKernel, ConvKernelShape, Grid};
use crate::warp::{warp, warp_chain, FlowField};

#[derive(Debug, Clone, PartialEq)]
pub struct IntegrationParams {
    pub w_x: ConvKernel,
    pub w_h1: ConvKernel,
    pub w_h2: ConvKernel,
    pub w_r1: ConvKernel,
    pub w_r2: ConvKernel,
}

const BLOB_MAGIC: &[u8; 4] = b"IGP1";

impl IntegrationParams {
    /// `w_x` is a centered identity; every other kernel and all biases are
    /// zero, so the untrained network passes `P_t` through unchanged.
    pub fn new(image_channels: usize) -> Result<Self> {
        let mut w_x = ConvKernel::zeros(1, 1, 3, 3, true)?;
        w_x.set_weight(0, 0, 1, 1, 1.0);
        Ok(Self {
            w_x,
            w_h1: ConvKernel::zeros(1, 1, 3, 3, true)?,
            w_h2: ConvKernel::zeros(1, 1, 3, 3, true)?,
            w_r1: ConvKernel::zeros(image_channels, 1, 3, 3, true)?,
            w_r2: ConvKernel::zeros(image_channels, 1, 3, 3, true)?,
        })
    }

    pub fn kernels(&self) -> [&ConvKernel; 5] {
        [&self.w_x, &self.w_h1, &self.w_h2, &self.w_r1, &self.w_r2]
    }

    fn kernels_mut(&mut self) -> [&mut ConvKernel; 5] {
        [
            &mut self.w_x,
            &mut self.w_h1,
            &mut self.w_h2,
            &mut self.w_r1,
            &mut self.w_r2,
        ]
    }

    pub fn image_channels(&self) -> usize {
        self.w_r1.in_channels()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for k in self.kernels() {
            k.flatten_into(&mut v);
        }
        v
    }

    pub fn with_values(&self, flat: &[f64]) -> Result<Self> {
        let n: usize = self.kernels().iter().map(|k| k.param_count()).sum();
        if flat.len() != n {
            return Err(Error::Dimension(format!(
                "expected {n} integration parameters, got {}",
                flat.len()
            )));
        }
        let mut out = self.clone();
        let mut rest = flat;
        for k in out.kernels_mut() {
            rest = k.load_from(rest)?;
        }
        Ok(out)
    }

    fn zeros_like(&self) -> Self {
        Self {
            w_x: self.w_x.zeros_like(),
            w_h1: self.w_h1.zeros_like(),
            w_h2: self.w_h2.zeros_like(),
            w_r1: self.w_r1.zeros_like(),
            w_r2: self.w_r2.zeros_like(),
        }
    }

    /// Little-endian blob: magic, kernel count, then per kernel a shape
    /// header (`in, out, kh, kw` as u32, bias flag as u8) followed by the
    /// weights and optional bias as f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(BLOB_MAGIC);
        out.extend_from_slice(&5u32.to_le_bytes());
        for k in self.kernels() {
            let s = k.shape();
            for d in [s.in_channels, s.out_channels, s.kernel_h, s.kernel_w] {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.push(u8::from(s.has_bias));
            let mut v = Vec::new();
            k.flatten_into(&mut v);
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if cur.len() < n {
                return Err(Error::Format("integration blob truncated".into()));
            }
            let (head, tail) = cur.split_at(n);
            cur = tail;
            Ok(head)
        };
        if take(4)? != BLOB_MAGIC {
            return Err(Error::Format("bad integration blob magic".into()));
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
        let count = u32_at(take(4)?);
        if count != 5 {
            return Err(Error::Format(format!("expected 5 kernels, found {count}")));
        }
        let mut kernels = Vec::with_capacity(5);
        for _ in 0..5 {
            let mut dims = [0usize; 4];
            for d in &mut dims {
                *d = u32_at(take(4)?);
            }
            let shape = ConvKernelShape {
                in_channels: dims[0],
                out_channels: dims[1],
                kernel_h: dims[2],
                kernel_w: dims[3],
                has_bias: match take(1)?[0] {
                    0 => false,
                    1 => true,
                    b => return Err(Error::Format(format!("bad bias flag {b}"))),
                },
            };
            let n_w = shape.in_channels * shape.out_channels * shape.kernel_h * shape.kernel_w;
            let n = n_w + if shape.has_bias { shape.out_channels } else { 0 };
            let raw = take(n.checked_mul(8).ok_or_else(|| Error::Format("kernel too large".into()))?)?;
            let vals: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let kernel = ConvKernel::new(
                shape.in_channels,
                shape.out_channels,
                shape.kernel_h,
                shape.kernel_w,
                vals[..n_w].to_vec(),
                shape.has_bias.then(|| vals[n_w..].to_vec()),
            )
            .map_err(|e| Error::Format(format!("bad kernel in blob: {e}")))?;
            kernels.push(kernel);
        }
        if !cur.is_empty() {
            return Err(Error::Format("trailing bytes after integration blob".into()));
        }
        let mut it = kernels.into_iter();
        let mut next = || it.next().expect("five kernels");
        Ok(Self {
            w_x: next(),
            w_h1: next(),
            w_h2: next(),
            w_r1: next(),
            w_r2: next(),
        })
    }
}

/// A previous frame with its probability map.
#[derive(Debug, Clone, PartialEq)]
pub struct PastFrame {
    pub frame: Grid,
    pub prob: Grid,
}

/// Up to two previous frames. `two_back` carries `O_{t-1,t-2}` and is only
/// meaningful when `one_back` is present.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HistoryState {
    pub one_back: Option<PastFrame>,
    pub two_back: Option<(PastFrame, FlowField)>,
}

impl HistoryState {
    pub fn depth(&self) -> usize {
        match (&self.one_back, &self.two_back) {
            (None, _) => 0,
            (Some(_), None) => 1,
            (Some(_), Some(_)) => 2,
        }
    }

    /// Drops entries beyond `depth`.
    pub fn truncated(&self, depth: usize) -> Self {
        Self {
            one_back: if depth >= 1 { self.one_back.clone() } else { None },
            two_back: if depth >= 2 { self.two_back.clone() } else { None },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegrationConfig {
    /// When false the gates are fixed at 1 (`out = x + h1 + h2`).
    pub use_gates: bool,
}

impl Default for IntegrationConfig {
    fn default() -> Self {
        Self { use_gates: true }
    }
}

struct Branch {
    warped_prob: Grid,
    error: Grid,
    h: Grid,
    r: Grid,
    gate: Grid,
}

struct Forward {
    raw: Grid,
    out: Grid,
    branches: Vec<Branch>,
}

fn check_prob(prob: &Grid, frame: &Grid, what: &str) -> Result<()> {
    if prob.channels() != 1 {
        return Err(Error::Dimension(format!("{what}: probability map must have 1 channel")));
    }
    prob.check_same_plane(frame, what)
}

fn forward(
    params: &IntegrationParams,
    frame: &Grid,
    prob: &Grid,
    history: &HistoryState,
    flow: &FlowField,
    config: &IntegrationConfig,
) -> Result<Forward> {
    check_prob(prob, frame, "integrate")?;
    if history.two_back.is_some() && history.one_back.is_none() {
        return Err(Error::Argument(
            "two-frame history requires the one-frame history".into(),
        ));
    }
    let x = conv2d(prob, &params.w_x)?;
    let mut raw = x;
    let mut branches = Vec::new();
    let mut pasts: Vec<(Grid, Grid, &ConvKernel, &ConvKernel)> = Vec::new();
    if let Some(p1) = &history.one_back {
        check_prob(&p1.prob, frame, "history t-1")?;
        frame.check_same_shape(&p1.frame, "history t-1 frame")?;
        pasts.push((
            warp(&p1.prob, flow)?,
            warp(&p1.frame, flow)?,
            &params.w_h1,
            &params.w_r1,
        ));
    }
    if let Some((p2, older)) = &history.two_back {
        check_prob(&p2.prob, frame, "history t-2")?;
        frame.check_same_shape(&p2.frame, "history t-2 frame")?;
        pasts.push((
            warp_chain(&p2.prob, older, flow)?,
            warp_chain(&p2.frame, older, flow)?,
            &params.w_h2,
            &params.w_r2,
        ));
    }
    for (warped_prob, warped_frame, wh, wr) in pasts {
        let error = frame.sub(&warped_frame)?.abs();
        let h = conv2d(&warped_prob, wh)?;
        let r = conv2d(&error, wr)?;
        let gate = if config.use_gates {
            r.map(|v| 1.0 - sigmoid(v))
        } else {
            Grid::filled(r.height(), r.width(), 1, 1.0)
        };
        raw = raw.add(&h.mul(&gate)?)?;
        branches.push(Branch {
            warped_prob,
            error,
            h,
            r,
            gate,
        });
    }
    let out = raw.clamp(0.0, 1.0);
    Ok(Forward { raw, out, branches })
}

/// Refined probability map `P̄_t` for the current frame `I_t` with initial
/// map `P_t`, given `O_{t,t-1}` and the available history.
pub fn integrate(
    params: &IntegrationParams,
    frame: &Grid,
    prob: &Grid,
    history: &HistoryState,
    flow: &FlowField,
    config: &IntegrationConfig,
) -> Result<Grid> {
    forward(params, frame, prob, history, flow, config).map(|f| f.out)
}

/// Clamp applied to predictions before taking logs.
pub const BCE_EPS: f64 = 1e-7;

/// Mean binary cross entropy of a one-channel prediction against a mask.
pub fn bce_loss(prediction: &Grid, target: &BinaryMask) -> Result<f64> {
    target.check_plane(prediction, "bce_loss")?;
    let n = prediction.height() * prediction.width();
    if n == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for y in 0..prediction.height() {
        for x in 0..prediction.width() {
            let p = prediction.get(y, x, 0).clamp(BCE_EPS, 1.0 - BCE_EPS);
            total -= if target.get(y, x) { p.ln() } else { (1.0 - p).ln() };
        }
    }
    Ok(total / n as f64)
}

fn bce_grad(prediction: &Grid, target: &BinaryMask) -> Grid {
    let n = (prediction.height() * prediction.width()) as f64;
    Grid::from_fn(prediction.height(), prediction.width(), 1, |y, x, _| {
        let p = prediction.get(y, x, 0);
        if !(BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
            return 0.0;
        }
        if target.get(y, x) {
            -1.0 / (p * n)
        } else {
            1.0 / ((1.0 - p) * n)
        }
    })
}

/// One supervised example for the refinement head.
#[derive(Debug, Clone)]
pub struct IntegrationSample {
    pub frame: Grid,
    pub prob: Grid,
    pub history: HistoryState,
    /// `O_{t,t-1}`.
    pub flow: FlowField,
    pub target: BinaryMask,
}

/// BCE of the refined map for one sample and its gradient with respect to
/// every parameter.
pub fn sample_loss_and_gradient(
    params: &IntegrationParams,
    sample: &IntegrationSample,
    config: &IntegrationConfig,
) -> Result<(f64, IntegrationParams)> {
    let f = forward(
        params,
        &sample.frame,
        &sample.prob,
        &sample.history,
        &sample.flow,
        config,
    )?;
    let loss = bce_loss(&f.out, &sample.target)?;
    let g_out = bce_grad(&f.out, &sample.target);
    // Clamp passes gradient on the closed unit interval.
    let g_raw = g_out.zip_map(&f.raw, |g, r| if (0.0..=1.0).contains(&r) { g } else { 0.0 })?;
    let mut grad = params.zeros_like();
    grad.w_x = conv2d_backward(&sample.prob, &params.w_x, &g_raw)?.1;
    let kernels = [
        (&params.w_h1, &params.w_r1),
        (&params.w_h2, &params.w_r2),
    ];
    for (i, b) in f.branches.iter().enumerate() {
        let (wh, wr) = kernels[i];
        let g_h = g_raw.mul(&b.gate)?;
        let g_wh = conv2d_backward(&b.warped_prob, wh, &g_h)?.1;
        let g_wr = if config.use_gates {
            // d(1 − σ(r))/dr = −σ(r)(1 − σ(r))
            let g_r = Grid::from_fn(b.r.height(), b.r.width(), 1, |y, x, _| {
                let s = sigmoid(b.r.get(y, x, 0));
                -g_raw.get(y, x, 0) * b.h.get(y, x, 0) * s * (1.0 - s)
            });
            conv2d_backward(&b.error, wr, &g_r)?.1
        } else {
            wr.zeros_like()
        };
        if i == 0 {
            grad.w_h1 = g_wh;
            grad.w_r1 = g_wr;
        } else {
            grad.w_h2 = g_wh;
            grad.w_r2 = g_wr;
        }
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Whether `w_x` is trained. Off by default so that with no history the
    /// trained head still returns `P_t` exactly.
    pub train_appearance_path: bool,
    pub integration: IntegrationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            lr: 2.0,
            train_appearance_path: false,
            integration: IntegrationConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub params: IntegrationParams,
    /// Mean training BCE before each epoch, then after the last one.
    pub epoch_losses: Vec<f64>,
}

/// Mean BCE and gradient over a dataset, summed in sample order.
pub fn dataset_loss_and_gradient(
    params: &IntegrationParams,
    samples: &[IntegrationSample],
    config: &IntegrationConfig,
) -> Result<(f64, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::Argument("empty training set".into()));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; params.to_vec().len()];
    for s in samples {
        let (l, g) = sample_loss_and_gradient(params, s, config)?;
        loss += l;
        for (a, b) in grad.iter_mut().zip(g.to_vec()) {
            *a += b;
        }
    }
    let n = samples.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((loss / n, grad))
}

/// Full-batch gradient descent on mean BCE.
pub fn train_integration(
    params: &IntegrationParams,
    samples: &[IntegrationSample],
    config: &TrainConfig,
) -> Result<TrainResult> {
    if samples.is_empty() {
        return Err(Error::Argument("empty training set".into()));
    }
    if !(config.lr >= 0.0) {
        return Err(Error::Argument(format!("learning rate must be >= 0, got {}", config.lr)));
    }
    let wx_len = params.w_x.param_count();
    let mut flat = params.to_vec();
    let mut current = params.clone();
    let mut epoch_losses = Vec::with_capacity(config.epochs + 1);
    for _ in 0..config.epochs {
        let (loss, grad) = dataset_loss_and_gradient(&current, samples, &config.integration)?;
        epoch_losses.push(loss);
        if config.lr == 0.0 {
            continue;
        }
        let start = if config.train_appearance_path { 0 } else { wx_len };
        for i in start..flat.len() {
            flat[i] -= config.lr * grad[i];
        }
        current = current.with_values(&flat)?;
    }
    let (loss, _) = dataset_loss_and_gradient(&current, samples, &config.integration)?;
    epoch_losses.push(loss);
    Ok(TrainResult {
        params: current,
        epoch_losses,
    })
}
