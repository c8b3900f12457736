//! Backward warping by dense flow.
//!
//! Convention: the flow `O_{t,t-1}` stores, for each pixel `(u, v)` of frame
//! `t`, the displacement to its position in frame `t-1`. Warping samples the
//! source (frame `t-1`) at `(u + du, v + dv)`, so the reconstruction moves in
//! the direction opposite to the flow. Sample coordinates are clamped to the
//! frame (border replication).

use crate::error::{dim_err, Error, Result};
use crate::tensor::Grid;

/// Per-pixel `(du, dv)` displacements, stored as a two-channel grid:
/// channel 0 is the horizontal (column) component, channel 1 the vertical.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField(Grid);

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self(Grid::zeros(height, width, 2))
    }

    pub fn uniform(height: usize, width: usize, du: f64, dv: f64) -> Self {
        Self(Grid::from_fn(height, width, 2, |_, _, c| {
            if c == 0 {
                du
            } else {
                dv
            }
        }))
    }

    pub fn from_grid(grid: Grid) -> Result<Self> {
        if grid.channels() != 2 {
            return Err(dim_err(format!(
                "flow needs 2 channels, got {}",
                grid.channels()
            )));
        }
        Ok(Self(grid))
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> (f64, f64),
    ) -> Self {
        let mut g = Grid::zeros(height, width, 2);
        for y in 0..height {
            for x in 0..width {
                let (du, dv) = f(y, x);
                g.set(y, x, 0, du);
                g.set(y, x, 1, dv);
            }
        }
        Self(g)
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    #[inline]
    pub fn du(&self, y: usize, x: usize) -> f64 {
        self.0.get(y, x, 0)
    }

    #[inline]
    pub fn dv(&self, y: usize, x: usize) -> f64 {
        self.0.get(y, x, 1)
    }

    pub fn as_grid(&self) -> &Grid {
        &self.0
    }

    pub fn into_grid(self) -> Grid {
        self.0
    }

    pub fn magnitude(&self, y: usize, x: usize) -> f64 {
        self.du(y, x).hypot(self.dv(y, x))
    }

    pub fn max_abs_diff(&self, other: &FlowField) -> Result<f64> {
        self.0.max_abs_diff(&other.0)
    }

    fn check_plane(&self, g: &Grid, what: &str) -> Result<()> {
        if g.height() == self.height() && g.width() == self.width() {
            Ok(())
        } else {
            Err(dim_err(format!(
                "{what}: grid {}x{} vs flow {}x{}",
                g.height(),
                g.width(),
                self.height(),
                self.width()
            )))
        }
    }
}

/// One axis of a clamped bilinear sample.
#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
    /// Whether the clamped coordinate still moves with the flow
    /// (right-continuous at integer positions).
    live: bool,
}

#[inline]
fn tap(coord: f64, n: usize) -> Tap {
    let last = (n - 1) as f64;
    let live = coord >= 0.0 && coord < last;
    let c = coord.clamp(0.0, last);
    let lo = c.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    Tap {
        lo,
        hi,
        frac: c - lo as f64,
        live,
    }
}

/// Reconstructs the current frame from `source` (the previous frame) by
/// sampling at flow-displaced coordinates.
pub fn warp(source: &Grid, flow: &FlowField) -> Result<Grid> {
    flow.check_plane(source, "warp")?;
    let (h, w, ch) = source.shape();
    let mut out = Grid::zeros(h, w, ch);
    if h == 0 || w == 0 {
        return Ok(out);
    }
    for y in 0..h {
        for x in 0..w {
            let tx = tap(x as f64 + flow.du(y, x), w);
            let ty = tap(y as f64 + flow.dv(y, x), h);
            for c in 0..ch {
                let a = source.get(ty.lo, tx.lo, c);
                let b = source.get(ty.lo, tx.hi, c);
                let d = source.get(ty.hi, tx.lo, c);
                let e = source.get(ty.hi, tx.hi, c);
                let top = (1.0 - tx.frac) * a + tx.frac * b;
                let bot = (1.0 - tx.frac) * d + tx.frac * e;
                out.set(y, x, c, (1.0 - ty.frac) * top + ty.frac * bot);
            }
        }
    }
    Ok(out)
}

/// Gradients of `<warp(source, flow), upstream>` with respect to the source
/// and the flow.
pub fn warp_backward(
    source: &Grid,
    flow: &FlowField,
    upstream: &Grid,
) -> Result<(Grid, FlowField)> {
    flow.check_plane(source, "warp_backward")?;
    source.check_same_shape(upstream, "warp_backward upstream")?;
    let (h, w, ch) = source.shape();
    let mut g_src = Grid::zeros(h, w, ch);
    let mut g_flow = Grid::zeros(h, w, 2);
    if h == 0 || w == 0 {
        return Ok((g_src, FlowField(g_flow)));
    }
    for y in 0..h {
        for x in 0..w {
            let tx = tap(x as f64 + flow.du(y, x), w);
            let ty = tap(y as f64 + flow.dv(y, x), h);
            let (fx, fy) = (tx.frac, ty.frac);
            let mut gu = 0.0;
            let mut gv = 0.0;
            for c in 0..ch {
                let g = upstream.get(y, x, c);
                if g == 0.0 {
                    continue;
                }
                let a = source.get(ty.lo, tx.lo, c);
                let b = source.get(ty.lo, tx.hi, c);
                let d = source.get(ty.hi, tx.lo, c);
                let e = source.get(ty.hi, tx.hi, c);
                g_src.add_at(ty.lo, tx.lo, c, (1.0 - fy) * (1.0 - fx) * g);
                g_src.add_at(ty.lo, tx.hi, c, (1.0 - fy) * fx * g);
                g_src.add_at(ty.hi, tx.lo, c, fy * (1.0 - fx) * g);
                g_src.add_at(ty.hi, tx.hi, c, fy * fx * g);
                if tx.live {
                    gu += g * ((1.0 - fy) * (b - a) + fy * (e - d));
                }
                if ty.live {
                    gv += g * ((1.0 - fx) * (d - a) + fx * (e - b));
                }
            }
            g_flow.set(y, x, 0, gu);
            g_flow.set(y, x, 1, gv);
        }
    }
    Ok((g_src, FlowField(g_flow)))
}

/// Two-step warp used to bring a map from frame `t-2` into frame `t`:
/// first by `O_{t-1,t-2}` (`older_flow`), then by `O_{t,t-1}` (`newer_flow`).
pub fn warp_chain(source: &Grid, older_flow: &FlowField, newer_flow: &FlowField) -> Result<Grid> {
    if older_flow.height() != newer_flow.height() || older_flow.width() != newer_flow.width() {
        return Err(Error::Dimension("warp_chain: flow shapes differ".into()));
    }
    let once = warp(source, older_flow)?;
    warp(&once, newer_flow)
}
