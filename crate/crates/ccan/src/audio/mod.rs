//! Audio ingestion and MFCC feature extraction.
//!
//! Clips are fixed-length (10 s by default); anything within one frame hop
//! of the target duration is accepted as-is, otherwise the clip is padded
//! with zeros or truncated and the adjustment is reported. The MFCC chain
//! is: Hamming-windowed frames, power spectrum via a radix-2 FFT (frames
//! zero-padded to the next power of two), a 40-band triangular mel
//! filterbank from 0 Hz to Nyquist, log with a 1e-10 floor, and an
//! orthonormal DCT-II keeping the first 28 coefficients (c0 included).

mod cache;
mod mfcc;
mod wav;

pub use cache::{read_cache, write_cache};
pub use mfcc::{dct2_orthonormal, extract_mfcc, fft_inplace, mel_filterbank, MfccPipeline};
pub use wav::load_wav;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A mono audio clip with samples in [-1, 1].
#[derive(Debug, Clone)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub source_path: String,
}

/// Feature extraction settings. Defaults follow the reference setup:
/// 40 ms frames with a 20 ms hop and 28 cepstral coefficients.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FeatureConfig {
    pub frame_ms: f64,
    pub hop_ms: f64,
    pub mfcc_dim: usize,
    pub mel_filters: usize,
    pub log_floor: f64,
    pub clip_seconds: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            frame_ms: 40.0,
            hop_ms: 20.0,
            mfcc_dim: 28,
            mel_filters: 40,
            log_floor: 1e-10,
            clip_seconds: 10.0,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_ms <= 0.0 || self.hop_ms <= 0.0 || self.clip_seconds <= 0.0 {
            return Err(Error::Config(
                "frame_ms, hop_ms and clip_seconds must be positive".into(),
            ));
        }
        if self.mfcc_dim == 0 || self.mfcc_dim > self.mel_filters {
            return Err(Error::Config(format!(
                "mfcc_dim {} must be in 1..={} (mel_filters)",
                self.mfcc_dim, self.mel_filters
            )));
        }
        if self.log_floor <= 0.0 {
            return Err(Error::Config("log_floor must be positive".into()));
        }
        Ok(())
    }

    pub fn frame_len(&self, sample_rate: u32) -> usize {
        (sample_rate as f64 * self.frame_ms / 1000.0).round() as usize
    }

    pub fn hop_len(&self, sample_rate: u32) -> usize {
        (sample_rate as f64 * self.hop_ms / 1000.0).round() as usize
    }
}

/// T x D matrix of MFCC frames for one clip, stored row-major as f32
/// (the on-disk cache element type).
#[derive(Debug, Clone, PartialEq)]
pub struct MfccMatrix {
    pub clip_id: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl MfccMatrix {
    pub fn new(clip_id: String, rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Feature(format!(
                "matrix {clip_id}: {rows}x{cols} does not match {} values",
                data.len()
            )));
        }
        Ok(MfccMatrix {
            clip_id,
            rows,
            cols,
            data,
        })
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.cols..(t + 1) * self.cols]
    }
}

/// How a clip's duration was adjusted to the configured length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DurationFix {
    Unchanged,
    Padded(usize),
    Truncated(usize),
}

/// Brings a clip to the configured duration. Lengths within one hop of the
/// target pass through untouched; anything else is zero-padded or truncated.
pub fn conform_duration(mut clip: AudioClip, cfg: &FeatureConfig) -> (AudioClip, DurationFix) {
    let target = (cfg.clip_seconds * clip.sample_rate as f64).round() as usize;
    let hop = cfg.hop_len(clip.sample_rate);
    let n = clip.samples.len();
    if n.abs_diff(target) <= hop {
        return (clip, DurationFix::Unchanged);
    }
    if n < target {
        let missing = target - n;
        clip.samples.resize(target, 0.0);
        (clip, DurationFix::Padded(missing))
    } else {
        let extra = n - target;
        clip.samples.truncate(target);
        (clip, DurationFix::Truncated(extra))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(n: usize, rate: u32) -> AudioClip {
        AudioClip {
            samples: vec![0.25; n],
            sample_rate: rate,
            source_path: "test".into(),
        }
    }

    #[test]
    fn duration_within_one_hop_is_left_alone() {
        let cfg = FeatureConfig::default();
        // 10 s at 16 kHz is 160000 samples, hop is 320
        let (c, fix) = conform_duration(clip(160000 + 320, 16000), &cfg);
        assert_eq!(fix, DurationFix::Unchanged);
        assert_eq!(c.samples.len(), 160320);
    }

    #[test]
    fn long_and_short_clips_are_conformed() {
        let cfg = FeatureConfig::default();
        let (c, fix) = conform_duration(clip(200000, 16000), &cfg);
        assert_eq!(fix, DurationFix::Truncated(40000));
        assert_eq!(c.samples.len(), 160000);
        let (c, fix) = conform_duration(clip(1000, 16000), &cfg);
        assert_eq!(fix, DurationFix::Padded(159000));
        assert_eq!(c.samples.len(), 160000);
        assert_eq!(c.samples[999], 0.25);
        assert_eq!(c.samples[1000], 0.0);
    }

    #[test]
    fn config_validation() {
        let mut cfg = FeatureConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.mfcc_dim = 41;
        assert!(cfg.validate().is_err());
    }
}
