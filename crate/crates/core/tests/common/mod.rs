#![allow(dead_code)]

use rsdflow_core::{BinaryMask, Grid};

/// Smooth 3-channel pattern translated by `t * (dx, dy)`.
pub fn moving_frame(h: usize, w: usize, t: f64, (dx, dy): (f64, f64), phase: f64) -> Grid {
    Grid::from_fn(h, w, 3, |y, x, c| {
        let u = x as f64 - t * dx;
        let v = y as f64 - t * dy;
        let k = c as f64;
        0.5 + 0.2 * (0.31 * u + 0.17 * v + phase + k).sin()
            + 0.15 * (0.23 * v - 0.11 * u + 2.0 * phase - k).cos()
    })
}

pub fn moving_disk(h: usize, w: usize, t: f64, (dx, dy): (f64, f64), r: f64) -> BinaryMask {
    let (cy, cx) = (h as f64 / 2.0 + t * dy, w as f64 / 2.0 + t * dx);
    BinaryMask::from_fn(h, w, |y, x| {
        (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r
    })
}

pub fn sequence(n: usize, size: usize, motion: (f64, f64)) -> (Vec<Grid>, Vec<BinaryMask>) {
    let frames = (0..n).map(|t| moving_frame(size, size, t as f64, motion, 0.3)).collect();
    let masks = (0..n)
        .map(|t| moving_disk(size, size, t as f64, motion, size as f64 / 5.0))
        .collect();
    (frames, masks)
}
