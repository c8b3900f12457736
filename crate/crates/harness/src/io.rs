//! Sequence folders, frame images and index masks.
//!
//! A sequence directory holds `frames/` and `masks/`. Files are ordered by
//! the number in their stem; a mask belongs to the frame with the same stem.
//! Frames may be PNG or binary PPM/PGM. Masks are paletted or grayscale
//! PNGs (or PGMs) whose values are object indices, 0 being background.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rsdflow_core::{BinaryMask, Grid};

use crate::error::{HarnessError, Result};

/// Per-pixel object labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl IndexMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(HarnessError::Format(format!(
                "{} labels for a {height}x{width} mask",
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn from_binary(mask: &BinaryMask, label: u8) -> Self {
        Self {
            height: mask.height(),
            width: mask.width(),
            labels: mask.as_slice().iter().map(|&b| if b { label } else { 0 }).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn label(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn object(&self, label: u8) -> BinaryMask {
        BinaryMask::from_fn(self.height, self.width, |y, x| self.label(y, x) == label)
    }

    /// Sorted nonzero labels present.
    pub fn object_labels(&self) -> Vec<u8> {
        self.labels
            .iter()
            .filter(|&&l| l != 0)
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SequenceBundle {
    pub frames: Vec<Grid>,
    /// One slot per frame; frame 0 always has a mask.
    pub masks: Vec<Option<IndexMask>>,
    pub object_count: usize,
    /// File stems, used to name outputs.
    pub names: Vec<String>,
}

impl SequenceBundle {
    pub fn height(&self) -> usize {
        self.frames[0].height()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }

    /// Labels of the objects annotated in frame 0.
    pub fn object_labels(&self) -> Vec<u8> {
        self.masks[0].as_ref().map(IndexMask::object_labels).unwrap_or_default()
    }
}

fn numeric_key(path: &Path) -> (u64, String) {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let digits: String = stem.chars().filter(char::is_ascii_digit).collect();
    (digits.parse().unwrap_or(u64::MAX), stem)
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| HarnessError::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| HarnessError::io(dir, e))?.path();
        let ext = path
            .extension()
            .map(|e| e.to_string_lossy().to_ascii_lowercase())
            .unwrap_or_default();
        if matches!(ext.as_str(), "png" | "ppm" | "pgm" | "pnm") {
            files.push(path);
        }
    }
    files.sort_by_key(|p| numeric_key(p));
    Ok(files)
}

fn stem(path: &Path) -> String {
    numeric_key(path).1
}

/// Decodes a color or gray image into `[0, 1]` with 3 channels.
pub fn read_frame(path: &Path) -> Result<Grid> {
    let img = image::open(path)
        .map_err(|e| HarnessError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb32f();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().into_iter().map(f64::from).collect();
    Ok(Grid::from_vec(h, w, 3, data)?)
}

/// Writes a 3-channel (or 1-channel) grid in `[0, 1]` as 8-bit PNG.
pub fn write_frame_png(grid: &Grid, path: &Path) -> Result<()> {
    let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let (h, w, c) = grid.shape();
    let rgb: Vec<u8> = (0..h * w)
        .flat_map(|i| {
            let (y, x) = (i / w, i % w);
            (0..3).map(move |k| to_u8(grid.get(y, x, if c == 1 { 0 } else { k })))
        })
        .collect();
    image::save_buffer(path, &rgb, w as u32, h as u32, image::ColorType::Rgb8).map_err(|e| {
        HarnessError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    })
}

fn read_png_indices(path: &Path, bytes: &[u8]) -> Result<IndexMask> {
    let bad = |message: String| HarnessError::Image {
        path: path.to_path_buf(),
        message,
    };
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| bad(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let bits = info.bit_depth as usize;
    let channels = match info.color_type {
        png::ColorType::Indexed | png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        other => return Err(bad(format!("mask must be paletted or grayscale, got {other:?}"))),
    };
    if bits == 16 {
        return Err(bad("16-bit masks are not supported".into()));
    }
    let mut labels = Vec::with_capacity(w * h);
    for row in buf[..info.buffer_size()].chunks(info.line_size) {
        for x in 0..w {
            let v = if bits == 8 {
                row[x * channels]
            } else {
                let per_byte = 8 / bits;
                let byte = row[x / per_byte];
                let shift = 8 - bits * (x % per_byte + 1);
                (byte >> shift) & ((1u8 << bits) - 1)
            };
            labels.push(v);
        }
    }
    IndexMask::new(h, w, labels)
}

pub fn read_index_mask(path: &Path) -> Result<IndexMask> {
    let bytes = fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    if bytes.starts_with(b"\x89PNG") {
        return read_png_indices(path, &bytes);
    }
    let img = image::load_from_memory(&bytes)
        .map_err(|e| HarnessError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    IndexMask::new(h, w, img.into_raw())
}

/// Davis-style palette: index 0 black, then saturated distinct colors.
fn palette() -> Vec<u8> {
    let mut p = vec![0u8; 256 * 3];
    for i in 1..256usize {
        // Bit-interleaved color map, the usual choice for label images.
        let (mut r, mut g, mut b) = (0u8, 0u8, 0u8);
        let mut c = i;
        for j in 0..8 {
            r |= ((c & 1) as u8) << (7 - j);
            g |= (((c >> 1) & 1) as u8) << (7 - j);
            b |= (((c >> 2) & 1) as u8) << (7 - j);
            c >>= 3;
        }
        p[i * 3..i * 3 + 3].copy_from_slice(&[r, g, b]);
    }
    p
}

pub fn write_index_mask(mask: &IndexMask, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), mask.width as u32, mask.height as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(palette());
    let fail = |e: png::EncodingError| HarnessError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut writer = enc.write_header().map_err(fail)?;
    writer.write_image_data(&mask.labels).map_err(fail)?;
    writer.finish().map_err(fail)
}

/// Loads `dir/frames` and `dir/masks`.
pub fn load_sequence(dir: &Path) -> Result<SequenceBundle> {
    let frame_paths = list_images(&dir.join("frames"))?;
    if frame_paths.is_empty() {
        return Err(HarnessError::Dataset {
            path: dir.join("frames"),
            message: "no frame images found".into(),
        });
    }
    let mut frames = Vec::with_capacity(frame_paths.len());
    for p in &frame_paths {
        let f = read_frame(p)?;
        if let Some(first) = frames.first() {
            let first: &Grid = first;
            if f.shape() != first.shape() {
                return Err(HarnessError::Dataset {
                    path: p.clone(),
                    message: format!(
                        "resolution {}x{} differs from the first frame's {}x{}",
                        f.height(),
                        f.width(),
                        first.height(),
                        first.width()
                    ),
                });
            }
        }
        frames.push(f);
    }
    let names: Vec<String> = frame_paths.iter().map(|p| stem(p)).collect();
    let mask_dir = dir.join("masks");
    let mask_paths = if mask_dir.is_dir() {
        list_images(&mask_dir)?
    } else {
        Vec::new()
    };
    let mut masks: Vec<Option<IndexMask>> = vec![None; frames.len()];
    for p in &mask_paths {
        let Some(slot) = names.iter().position(|n| *n == stem(p)) else {
            continue;
        };
        let m = read_index_mask(p)?;
        if (m.height, m.width) != (frames[0].height(), frames[0].width()) {
            return Err(HarnessError::Dataset {
                path: p.clone(),
                message: format!(
                    "mask is {}x{}, frames are {}x{}",
                    m.height,
                    m.width,
                    frames[0].height(),
                    frames[0].width()
                ),
            });
        }
        masks[slot] = Some(m);
    }
    let Some(first) = &masks[0] else {
        return Err(HarnessError::Dataset {
            path: mask_dir,
            message: format!("missing mask for first frame '{}'", names[0]),
        });
    };
    let object_count = first.object_labels().len();
    Ok(SequenceBundle {
        frames,
        masks,
        object_count,
        names,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_order_beats_lexicographic() {
        let mut v = [PathBuf::from("10.png"), PathBuf::from("9.png"), PathBuf::from("00002.png")];
        v.sort_by_key(|p| numeric_key(p));
        assert_eq!(v[0], PathBuf::from("00002.png"));
        assert_eq!(v[2], PathBuf::from("10.png"));
    }

    #[test]
    fn labels_scan() {
        let m = IndexMask::new(2, 3, vec![0, 2, 2, 1, 0, 1]).unwrap();
        assert_eq!(m.object_labels(), vec![1, 2]);
        assert_eq!(m.object(2).count(), 2);
    }

    #[test]
    fn palette_starts_black_and_is_distinct() {
        let p = palette();
        assert_eq!(&p[..3], &[0, 0, 0]);
        assert_ne!(&p[3..6], &p[6..9]);
    }
}
