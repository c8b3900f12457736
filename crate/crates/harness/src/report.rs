//! JSON experiment reports.
//!
//! Everything except the `timing` block is a pure function of the run
//! options, so two runs with the same seed serialize identically once timing
//! is dropped.

use serde::Serialize;

use crate::error::Result;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize)]
pub struct ConfigEcho {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub interval: usize,
    pub iterations: usize,
    pub history: usize,
    pub lambda_l1: f64,
    pub lambda_ssim: f64,
    pub literal_ssim_sign: bool,
    pub ssim_window: usize,
    pub mask_pad: usize,
    pub feature_seed: u64,
    pub feature_channels: usize,
    pub mid_channels: usize,
    pub upsample_scale: usize,
    pub rsd_max_alpha: Option<f64>,
    pub input: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Timing {
    /// Feature extraction, optimization and warping only; file I/O is not
    /// counted.
    pub compute_seconds: f64,
    pub frames_processed: usize,
    pub fps: f64,
}

impl Timing {
    pub fn new(compute_seconds: f64, frames_processed: usize) -> Self {
        let fps = if compute_seconds > 0.0 {
            frames_processed as f64 / compute_seconds
        } else {
            0.0
        };
        Self {
            compute_seconds,
            frames_processed,
            fps,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport<R: Serialize> {
    pub schema_version: u32,
    pub preset: String,
    pub config: ConfigEcho,
    pub results: R,
    pub timing: Timing,
}

impl<R: Serialize> ExperimentReport<R> {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Serialization with the `timing` block removed.
    pub fn deterministic_json(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(map) = v.as_object_mut() {
            map.remove("timing");
        }
        Ok(serde_json::to_string_pretty(&v)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_view_drops_timing_only() {
        let r = ExperimentReport {
            schema_version: SCHEMA_VERSION,
            preset: "x".into(),
            config: ConfigEcho {
                seed: 1,
                height: 2,
                width: 2,
                frames: 2,
                interval: 1,
                iterations: 1,
                history: 0,
                lambda_l1: 0.15,
                lambda_ssim: 0.85,
                literal_ssim_sign: false,
                ssim_window: 7,
                mask_pad: 20,
                feature_seed: 0,
                feature_channels: 16,
                mid_channels: 16,
                upsample_scale: 8,
                rsd_max_alpha: Some(1e3),
                input: None,
            },
            results: vec![1.5],
            timing: Timing::new(0.5, 3),
        };
        let full = r.to_json().unwrap();
        let det = r.deterministic_json().unwrap();
        assert!(full.contains("\"fps\""));
        assert!(!det.contains("timing"));
        assert!(det.contains("\"schema_version\": 1"));
    }
}
