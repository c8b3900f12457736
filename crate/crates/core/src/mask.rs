use crate::error::{dim_err, Result};
use crate::tensor::Grid;

/// Foreground indicator over a frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

/// Inclusive pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub row_min: usize,
    pub row_max: usize,
    pub col_min: usize,
    pub col_max: usize,
}

impl BoundingBox {
    pub fn rows(&self) -> usize {
        self.row_max - self.row_min + 1
    }

    pub fn cols(&self) -> usize {
        self.col_max - self.col_min + 1
    }
}

impl BinaryMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(dim_err(format!(
                "mask data length {} != {height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// `M(u, v) = P(u, v) > 0.5` on the first channel of a probability map.
    pub fn from_probability(prob: &Grid) -> Self {
        Self::threshold(prob, 0.5)
    }

    pub fn threshold(grid: &Grid, level: f64) -> Self {
        Self::from_fn(grid.height(), grid.width(), |y, x| grid.get(y, x, 0) > level)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// One-channel 0/1 grid.
    pub fn to_grid(&self) -> Grid {
        Grid::from_fn(self.height, self.width, 1, |y, x, _| {
            if self.get(y, x) {
                1.0
            } else {
                0.0
            }
        })
    }

    pub fn bounding_box(&self) -> Option<BoundingBox> {
        let mut bb: Option<BoundingBox> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.get(y, x) {
                    continue;
                }
                bb = Some(match bb {
                    None => BoundingBox {
                        row_min: y,
                        row_max: y,
                        col_min: x,
                        col_max: x,
                    },
                    Some(b) => BoundingBox {
                        row_min: b.row_min.min(y),
                        row_max: b.row_max.max(y),
                        col_min: b.col_min.min(x),
                        col_max: b.col_max.max(x),
                    },
                });
            }
        }
        bb
    }

    pub(crate) fn check_plane(&self, g: &Grid, what: &str) -> Result<()> {
        if g.height() == self.height && g.width() == self.width {
            Ok(())
        } else {
            Err(dim_err(format!(
                "{what}: mask {}x{} vs grid {}x{}",
                self.height,
                self.width,
                g.height(),
                g.width()
            )))
        }
    }

    pub(crate) fn check_same(&self, other: &BinaryMask, what: &str) -> Result<()> {
        if self.height == other.height && self.width == other.width {
            Ok(())
        } else {
            Err(dim_err(format!(
                "{what}: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )))
        }
    }
}

/// Filled bounding box of the set pixels, grown by `pad` on every side and
/// clamped to the frame. An empty mask stays empty.
pub fn mask_to_bbox(mask: &BinaryMask, pad: usize) -> BinaryMask {
    let Some(bb) = mask.bounding_box() else {
        return BinaryMask::empty(mask.height, mask.width);
    };
    let r0 = bb.row_min.saturating_sub(pad);
    let r1 = (bb.row_max + pad).min(mask.height - 1);
    let c0 = bb.col_min.saturating_sub(pad);
    let c1 = (bb.col_max + pad).min(mask.width - 1);
    BinaryMask::from_fn(mask.height, mask.width, |y, x| {
        (r0..=r1).contains(&y) && (c0..=c1).contains(&x)
    })
}
