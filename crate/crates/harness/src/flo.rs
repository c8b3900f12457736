//! Middlebury `.flo` files and color-wheel visualization.

use std::fs;
use std::path::Path;

use rsdflow_core::{FlowField, Grid};

use crate::error::{HarnessError, Result};

/// `"PIEH"` on disk; reads as the float 202021.25 in little endian.
pub const FLO_MAGIC: [u8; 4] = *b"PIEH";

pub fn encode_flo(flow: &FlowField) -> Result<Vec<u8>> {
    let (h, w) = (flow.height(), flow.width());
    let mut out = Vec::with_capacity(12 + h * w * 8);
    out.extend_from_slice(&FLO_MAGIC);
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (flow.du(y, x), flow.dv(y, x));
            if !u.is_finite() || !v.is_finite() {
                return Err(HarnessError::Format(format!("non-finite flow at ({y}, {x})")));
            }
            out.extend_from_slice(&(u as f32).to_le_bytes());
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_flo(bytes: &[u8]) -> Result<FlowField> {
    if bytes.len() < 12 {
        return Err(HarnessError::Format("flo header truncated".into()));
    }
    if bytes[..4] != FLO_MAGIC {
        return Err(HarnessError::Format(format!("bad flo magic {:02x?}", &bytes[..4])));
    }
    let dim = |i: usize| i32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let (w, h) = (dim(4), dim(8));
    if w <= 0 || h <= 0 {
        return Err(HarnessError::Format(format!("bad flo size {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let need = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| HarnessError::Format("flo size overflows".into()))?;
    let body = &bytes[12..];
    if body.len() != need {
        return Err(HarnessError::Format(format!(
            "flo body has {} bytes, expected {need} for {w}x{h}",
            body.len()
        )));
    }
    let vals: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    Ok(FlowField::from_fn(h, w, |y, x| {
        let i = 2 * (y * w + x);
        (vals[i], vals[i + 1])
    }))
}

pub fn write_flo(flow: &FlowField, path: &Path) -> Result<()> {
    let bytes = encode_flo(flow)?;
    fs::write(path, bytes).map_err(|e| HarnessError::io(path, e))
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    let bytes = fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    decode_flo(&bytes)
}

fn hsv_to_rgb(h_deg: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = h_deg.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Hue in degrees of an RGB triple; `None` for grays.
pub fn rgb_hue(rgb: [f64; 3]) -> Option<f64> {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    if d <= 1e-12 {
        return None;
    }
    let h = if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    };
    Some(h * 60.0)
}

/// Direction as hue, magnitude (relative to the frame maximum) as
/// saturation over a white base. Zero flow is white.
pub fn colorize_flow(flow: &FlowField) -> Grid {
    let (h, w) = (flow.height(), flow.width());
    let mut max = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            max = max.max(flow.magnitude(y, x));
        }
    }
    let mut out = Grid::filled(h, w, 3, 1.0);
    if max == 0.0 {
        return out;
    }
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (flow.du(y, x), flow.dv(y, x));
            let hue = v.atan2(u).to_degrees();
            let rgb = hsv_to_rgb(hue, flow.magnitude(y, x) / max, 1.0);
            for (c, val) in rgb.into_iter().enumerate() {
                out.set(y, x, c, val);
            }
        }
    }
    out
}
