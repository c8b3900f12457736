//! Procedural sequences with exact ground-truth flow.
//!
//! A smooth textured patch moves over a faint static background. Frame `t`
//! samples the patch bilinearly at `(x − ox_t, y − oy_t)`, so subpixel
//! positions are exact interpolations of the patch texture. The object mask
//! is the set of pixels whose sample falls inside the patch (and outside the
//! occluder, when one is present).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rsdflow_core::{BinaryMask, FlowField, Grid};

use crate::error::{HarnessError, Result};
use crate::io::{IndexMask, SequenceBundle};

/// A static rectangle drawn above the moving patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Occluder {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub seed: u64,
    pub patch_height: usize,
    pub patch_width: usize,
    /// Per-frame `(dx, dy)` displacement of the patch; `motions.len() + 1`
    /// frames are rendered.
    pub motions: Vec<(f64, f64)>,
    /// Patch top-left corner `(x, y)` in frame 0. `None` centers the whole
    /// trajectory.
    pub start: Option<(f64, f64)>,
    pub occluder: Option<Occluder>,
    /// Peak-to-peak amplitude of the background texture.
    pub background_contrast: f64,
    /// Shortest wavelength, in pixels, of the patch texture.
    pub texture_period: f64,
}

impl SynthSpec {
    /// `frames` frames of constant motion `(dx, dy)` at `height × width`.
    pub fn translating(height: usize, width: usize, frames: usize, motion: (f64, f64), seed: u64) -> Self {
        let side = (height.min(width) * 3) / 8;
        Self {
            height,
            width,
            channels: 3,
            seed,
            patch_height: side,
            patch_width: side,
            motions: vec![motion; frames.saturating_sub(1)],
            start: None,
            occluder: None,
            background_contrast: 0.02,
            texture_period: 14.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSequence {
    pub bundle: SequenceBundle,
    /// Ground-truth `O_{t,t-1}` for `t = 1..`, indexed from 0.
    pub flows: Vec<FlowField>,
    /// Patch top-left `(x, y)` per frame.
    pub positions: Vec<(f64, f64)>,
    pub patch: Grid,
}

impl SyntheticSequence {
    pub fn frames(&self) -> &[Grid] {
        &self.bundle.frames
    }

    /// Object mask of every frame.
    pub fn masks(&self) -> Vec<BinaryMask> {
        self.bundle
            .masks
            .iter()
            .map(|m| m.as_ref().expect("synthetic masks are complete").object(1))
            .collect()
    }
}

/// Sum of a few random low-frequency sinusoids per channel, shifted into
/// `[0.5 − amp, 0.5 + amp]`.
pub fn smooth_texture(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize, amp: f64, min_period: f64) -> Grid {
    const WAVES: usize = 5;
    let mut waves = Vec::with_capacity(c * WAVES);
    for _ in 0..c * WAVES {
        let period: f64 = rng.random_range(min_period..min_period * 2.5);
        let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let k = std::f64::consts::TAU / period;
        waves.push((k * theta.cos(), k * theta.sin(), phase));
    }
    Grid::from_fn(h, w, c, |y, x, ch| {
        let s: f64 = waves[ch * WAVES..(ch + 1) * WAVES]
            .iter()
            .map(|(kx, ky, p)| (kx * x as f64 + ky * y as f64 + p).sin())
            .sum();
        0.5 + amp * s / WAVES as f64 * 2.0_f64.sqrt()
    })
}

fn bilinear(patch: &Grid, u: f64, v: f64, c: usize) -> f64 {
    let (ph, pw) = (patch.height(), patch.width());
    let x0 = (u.floor() as usize).min(pw - 1);
    let y0 = (v.floor() as usize).min(ph - 1);
    let x1 = (x0 + 1).min(pw - 1);
    let y1 = (y0 + 1).min(ph - 1);
    let fx = u - x0 as f64;
    let fy = v - y0 as f64;
    let top = patch.get(y0, x0, c) * (1.0 - fx) + patch.get(y0, x1, c) * fx;
    let bot = patch.get(y1, x0, c) * (1.0 - fx) + patch.get(y1, x1, c) * fx;
    top * (1.0 - fy) + bot * fy
}

pub fn synthesize_sequence(spec: &SynthSpec) -> Result<SyntheticSequence> {
    let (h, w) = (spec.height, spec.width);
    if h == 0 || w == 0 || spec.channels == 0 {
        return Err(HarnessError::Usage("empty synthetic frame".into()));
    }
    if spec.patch_height < 2 || spec.patch_width < 2 {
        return Err(HarnessError::Usage("patch must be at least 2x2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let patch = smooth_texture(&mut rng, spec.patch_height, spec.patch_width, spec.channels, 0.3, spec.texture_period);
    let background = smooth_texture(&mut rng, h, w, spec.channels, spec.background_contrast / 2.0, 10.0)
        .add_scalar(-0.15);
    let occluder_tex = smooth_texture(&mut rng, h, w, spec.channels, 0.15, 5.0);

    // Trajectory relative to the frame-0 corner.
    let mut rel = vec![(0.0, 0.0)];
    for &(dx, dy) in &spec.motions {
        let &(x, y) = rel.last().expect("nonempty");
        rel.push((x + dx, y + dy));
    }
    let (min_x, max_x) = rel.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (min_y, max_y) = rel.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.1), b.max(p.1)));
    let (sx, sy) = spec.start.unwrap_or_else(|| {
        let span_x = max_x - min_x + (spec.patch_width - 1) as f64;
        let span_y = max_y - min_y + (spec.patch_height - 1) as f64;
        (
            ((w - 1) as f64 - span_x) / 2.0 - min_x,
            ((h - 1) as f64 - span_y) / 2.0 - min_y,
        )
    });
    let positions: Vec<(f64, f64)> = rel.iter().map(|(x, y)| (sx + x, sy + y)).collect();
    for (t, &(ox, oy)) in positions.iter().enumerate() {
        let inside = ox >= 0.0
            && oy >= 0.0
            && ox + (spec.patch_width - 1) as f64 <= (w - 1) as f64
            && oy + (spec.patch_height - 1) as f64 <= (h - 1) as f64;
        if !inside {
            return Err(HarnessError::Usage(format!(
                "patch leaves the {h}x{w} frame at frame {t} (corner x={ox}, y={oy})"
            )));
        }
    }

    let occluded = |y: usize, x: usize| {
        spec.occluder.is_some_and(|o| {
            (o.top..o.top + o.height).contains(&y) && (o.left..o.left + o.width).contains(&x)
        })
    };
    let mut frames = Vec::with_capacity(positions.len());
    let mut masks = Vec::with_capacity(positions.len());
    for &(ox, oy) in &positions {
        let uv = |y: usize, x: usize| {
            let u = x as f64 - ox;
            let v = y as f64 - oy;
            let on = u >= 0.0
                && v >= 0.0
                && u <= (spec.patch_width - 1) as f64
                && v <= (spec.patch_height - 1) as f64;
            on.then_some((u, v))
        };
        let frame = Grid::from_fn(h, w, spec.channels, |y, x, c| {
            if occluded(y, x) {
                occluder_tex.get(y, x, c)
            } else if let Some((u, v)) = uv(y, x) {
                bilinear(&patch, u, v, c)
            } else {
                background.get(y, x, c)
            }
        });
        let mask = BinaryMask::from_fn(h, w, |y, x| !occluded(y, x) && uv(y, x).is_some());
        frames.push(frame);
        masks.push(Some(IndexMask::from_binary(&mask, 1)));
    }
    let flows = spec
        .motions
        .iter()
        .enumerate()
        .map(|(i, &(dx, dy))| {
            let m = masks[i + 1].as_ref().expect("set above");
            FlowField::from_fn(h, w, |y, x| {
                if m.label(y, x) == 1 {
                    (-dx, -dy)
                } else {
                    (0.0, 0.0)
                }
            })
        })
        .collect();
    Ok(SyntheticSequence {
        bundle: SequenceBundle {
            frames,
            masks,
            object_count: 1,
            names: (0..positions.len()).map(|i| format!("{i:05}")).collect(),
        },
        flows,
        positions,
        patch,
    })
}
