use std::f64::consts::PI;

use rayon::prelude::*;

use crate::error::{Error, Result};

use super::{AudioClip, FeatureConfig, MfccMatrix};

/// In-place iterative radix-2 FFT. `re`/`im` length must be a power of two.
pub fn fft_inplace(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    debug_assert!(n.is_power_of_two() && im.len() == n);
    // bit-reversal permutation
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let ang = -2.0 * PI / len as f64;
        let (wr, wi) = (ang.cos(), ang.sin());
        let mut i = 0;
        while i < n {
            let (mut cr, mut ci) = (1.0f64, 0.0f64);
            for k in 0..len / 2 {
                let (ur, ui) = (re[i + k], im[i + k]);
                let (vr, vi) = (
                    re[i + k + len / 2] * cr - im[i + k + len / 2] * ci,
                    re[i + k + len / 2] * ci + im[i + k + len / 2] * cr,
                );
                re[i + k] = ur + vr;
                im[i + k] = ui + vi;
                re[i + k + len / 2] = ur - vr;
                im[i + k + len / 2] = ui - vi;
                let next_cr = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = next_cr;
            }
            i += len;
        }
        len <<= 1;
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank over the one-sided spectrum of an `n_fft`-point
/// FFT: `n_filters` rows of `n_fft/2 + 1` weights, spanning 0 Hz to Nyquist.
pub fn mel_filterbank(n_filters: usize, n_fft: usize, sample_rate: f64) -> Vec<Vec<f64>> {
    let n_bins = n_fft / 2 + 1;
    let mel_hi = hz_to_mel(sample_rate / 2.0);
    let points: Vec<f64> = (0..n_filters + 2)
        .map(|i| mel_to_hz(mel_hi * i as f64 / (n_filters + 1) as f64))
        .collect();
    let mut bank = vec![vec![0.0; n_bins]; n_filters];
    for (m, filter) in bank.iter_mut().enumerate() {
        let (lo, mid, hi) = (points[m], points[m + 1], points[m + 2]);
        for (k, weight) in filter.iter_mut().enumerate() {
            let f = k as f64 * sample_rate / n_fft as f64;
            let rise = if mid > lo { (f - lo) / (mid - lo) } else { 0.0 };
            let fall = if hi > mid { (hi - f) / (hi - mid) } else { 0.0 };
            *weight = rise.min(fall).max(0.0);
        }
    }
    bank
}

/// Center frequency in Hz of triangular filter `m` (0-indexed).
pub fn mel_filter_center(m: usize, n_filters: usize, sample_rate: f64) -> f64 {
    let mel_hi = hz_to_mel(sample_rate / 2.0);
    mel_to_hz(mel_hi * (m + 1) as f64 / (n_filters + 1) as f64)
}

/// Orthonormal DCT-II matrix: `n_out` rows by `n_in` columns.
pub fn dct2_orthonormal(n_out: usize, n_in: usize) -> Vec<Vec<f64>> {
    let mut m = vec![vec![0.0; n_in]; n_out];
    for (k, row) in m.iter_mut().enumerate() {
        let scale = if k == 0 {
            (1.0 / n_in as f64).sqrt()
        } else {
            (2.0 / n_in as f64).sqrt()
        };
        for (n, v) in row.iter_mut().enumerate() {
            *v = scale * (PI * (2.0 * n as f64 + 1.0) * k as f64 / (2.0 * n_in as f64)).cos();
        }
    }
    m
}

/// Precomputed window, filterbank and DCT table for one sample rate.
pub struct MfccPipeline {
    cfg: FeatureConfig,
    frame_len: usize,
    hop: usize,
    n_fft: usize,
    window: Vec<f64>,
    filterbank: Vec<Vec<f64>>,
    dct: Vec<Vec<f64>>,
}

impl MfccPipeline {
    pub fn new(cfg: &FeatureConfig, sample_rate: u32) -> Result<Self> {
        cfg.validate()?;
        let frame_len = cfg.frame_len(sample_rate);
        let hop = cfg.hop_len(sample_rate);
        if frame_len < 2 || hop == 0 {
            return Err(Error::Config(format!(
                "degenerate framing: frame {frame_len} samples, hop {hop} samples",
            )));
        }
        let n_fft = frame_len.next_power_of_two();
        let window = (0..frame_len)
            .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (frame_len - 1) as f64).cos())
            .collect();
        Ok(MfccPipeline {
            cfg: cfg.clone(),
            frame_len,
            hop,
            n_fft,
            window,
            filterbank: mel_filterbank(cfg.mel_filters, n_fft, sample_rate as f64),
            dct: dct2_orthonormal(cfg.mfcc_dim, cfg.mel_filters),
        })
    }

    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn frame_count(&self, n_samples: usize) -> usize {
        if n_samples < self.frame_len {
            0
        } else {
            (n_samples - self.frame_len) / self.hop + 1
        }
    }

    /// Log mel-band energies of one frame (`frame_len` samples); the
    /// pre-DCT stage of the pipeline.
    pub fn log_mel_energies(&self, frame: &[f64]) -> Vec<f64> {
        debug_assert_eq!(frame.len(), self.frame_len);
        let mut re = vec![0.0; self.n_fft];
        let mut im = vec![0.0; self.n_fft];
        for (i, (&s, &w)) in frame.iter().zip(&self.window).enumerate() {
            re[i] = s * w;
        }
        fft_inplace(&mut re, &mut im);
        let power: Vec<f64> = (0..self.n_fft / 2 + 1)
            .map(|k| re[k] * re[k] + im[k] * im[k])
            .collect();
        self.filterbank
            .iter()
            .map(|filter| {
                let e: f64 = filter.iter().zip(&power).map(|(w, p)| w * p).sum();
                e.max(self.cfg.log_floor).ln()
            })
            .collect()
    }

    fn mfcc_frame(&self, frame: &[f64]) -> Vec<f64> {
        let log_mel = self.log_mel_energies(frame);
        self.dct
            .iter()
            .map(|row| row.iter().zip(&log_mel).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn extract(&self, clip: &AudioClip) -> Result<MfccMatrix> {
        let t = self.frame_count(clip.samples.len());
        if t == 0 {
            return Err(Error::Feature(format!(
                "{}: clip of {} samples is shorter than one {}-sample frame",
                clip.source_path,
                clip.samples.len(),
                self.frame_len
            )));
        }
        let d = self.cfg.mfcc_dim;
        let rows: Vec<Vec<f64>> = (0..t)
            .into_par_iter()
            .map(|ti| {
                let frame = &clip.samples[ti * self.hop..ti * self.hop + self.frame_len];
                self.mfcc_frame(frame)
            })
            .collect();
        let mut data = Vec::with_capacity(t * d);
        for row in rows {
            data.extend(row.into_iter().map(|v| v as f32));
        }
        MfccMatrix::new(clip.source_path.clone(), t, d, data)
    }
}

/// Full MFCC extraction for one clip at its declared sample rate.
pub fn extract_mfcc(clip: &AudioClip, cfg: &FeatureConfig) -> Result<MfccMatrix> {
    MfccPipeline::new(cfg, clip.sample_rate)?.extract(clip)
}
