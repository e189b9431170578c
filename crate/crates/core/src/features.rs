//! MFCC front-end: one second of 16 kHz audio becomes a 101 × 40 feature matrix.
//!
//! Pipeline per frame: reflect-padded centered framing, periodic Hann window
//! zero-padded to the FFT size, power spectrum, Slaney-style mel filterbank,
//! natural log with a floor, and an orthonormal DCT-II over the mel axis.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::error::{ensure, KwsError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfccConfig {
    pub sample_rate: u32,
    pub win_length: usize,
    pub hop: usize,
    pub fft_size: usize,
    pub n_mels: usize,
    pub n_mfcc: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            win_length: 480,
            hop: 160,
            fft_size: 512,
            n_mels: 40,
            n_mfcc: 40,
            fmin: 0.0,
            fmax: 8000.0,
            log_floor: 1e-10,
        }
    }
}

impl MfccConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.n_mfcc >= 1 && self.n_mfcc <= self.n_mels,
            Config,
            "n_mfcc ({}) must be in [1, n_mels = {}]",
            self.n_mfcc,
            self.n_mels
        );
        ensure!(
            self.win_length >= 1 && self.win_length <= self.fft_size,
            Config,
            "win_length ({}) must be in [1, fft_size = {}]",
            self.win_length,
            self.fft_size
        );
        ensure!(self.hop >= 1, Config, "hop must be positive");
        ensure!(
            self.fmin >= 0.0 && self.fmin < self.fmax,
            Config,
            "need 0 <= fmin < fmax, got [{}, {}]",
            self.fmin,
            self.fmax
        );
        ensure!(
            self.fmax <= self.sample_rate as f64 / 2.0,
            Config,
            "fmax {} exceeds Nyquist {}",
            self.fmax,
            self.sample_rate as f64 / 2.0
        );
        ensure!(self.log_floor > 0.0, Config, "log_floor must be positive");
        Ok(())
    }

    /// Frames produced for `len` samples under centered framing.
    pub fn frame_count(&self, len: usize) -> usize {
        1 + len / self.hop
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }
}

const F_SP: f64 = 200.0 / 3.0;
const MIN_LOG_HZ: f64 = 1000.0;
const MIN_LOG_MEL: f64 = MIN_LOG_HZ / F_SP;

fn log_step() -> f64 {
    6.4f64.ln() / 27.0
}

/// Slaney mel scale: linear (3/200 mel per Hz) below 1 kHz, logarithmic above.
pub fn hz_to_mel(f: f64) -> Result<f64> {
    ensure!(f >= 0.0, Range, "frequency must be non-negative, got {f}");
    Ok(if f < MIN_LOG_HZ {
        f / F_SP
    } else {
        MIN_LOG_MEL + (f / MIN_LOG_HZ).ln() / log_step()
    })
}

pub fn mel_to_hz(m: f64) -> Result<f64> {
    ensure!(m >= 0.0, Range, "mel value must be non-negative, got {m}");
    Ok(if m < MIN_LOG_MEL {
        m * F_SP
    } else {
        MIN_LOG_HZ * (log_step() * (m - MIN_LOG_MEL)).exp()
    })
}

/// Filter edge/center frequencies in Hz: `n_mels + 2` points uniform in mel.
pub fn mel_points(cfg: &MfccConfig) -> Result<Vec<f64>> {
    let lo = hz_to_mel(cfg.fmin)?;
    let hi = hz_to_mel(cfg.fmax)?;
    let n = cfg.n_mels + 2;
    (0..n)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n - 1) as f64))
        .collect()
}

/// Triangular, area-normalized filters; `n_mels` rows of `fft_size / 2 + 1` weights.
pub fn mel_filterbank(cfg: &MfccConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let pts = mel_points(cfg)?;
    let n_bins = cfg.n_bins();
    let bin_hz = cfg.sample_rate as f64 / cfg.fft_size as f64;
    let mut fb = Vec::with_capacity(cfg.n_mels);
    for i in 0..cfg.n_mels {
        let (l, c, r) = (pts[i], pts[i + 1], pts[i + 2]);
        let norm = 2.0 / (r - l);
        let row: Vec<f64> = (0..n_bins)
            .map(|k| {
                let f = k as f64 * bin_hz;
                let lower = (f - l) / (c - l);
                let upper = (r - f) / (r - c);
                lower.min(upper).max(0.0) * norm
            })
            .collect();
        if row.iter().all(|&w| w == 0.0) {
            return Err(KwsError::Config(format!(
                "mel filter {i} ({l:.1}-{r:.1} Hz) covers no FFT bin; reduce n_mels or raise fft_size"
            )));
        }
        fb.push(row);
    }
    Ok(fb)
}

/// Orthonormal DCT-II basis, `n_out` rows × `n` columns.
fn dct_matrix(n: usize, n_out: usize) -> Vec<Vec<f64>> {
    (0..n_out)
        .map(|k| {
            let scale = if k == 0 {
                (1.0 / n as f64).sqrt()
            } else {
                (2.0 / n as f64).sqrt()
            };
            (0..n)
                .map(|i| scale * (PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos())
                .collect()
        })
        .collect()
}

/// Row-major frames × coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub frames: usize,
    pub coeffs: usize,
    pub values: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(frames: usize, coeffs: usize, values: Vec<f32>) -> Result<Self> {
        ensure!(
            values.len() == frames * coeffs,
            Contract,
            "feature matrix {frames}x{coeffs} needs {} values, got {}",
            frames * coeffs,
            values.len()
        );
        Ok(Self {
            frames,
            coeffs,
            values,
        })
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.values[t * self.coeffs..(t + 1) * self.coeffs]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.frames, self.coeffs)
    }

    /// Debug dump, one frame per row.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for t in 0..self.frames {
            let row = self.frame(t);
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    s.push(',');
                }
                let _ = write!(s, "{v}");
            }
            s.push('\n');
        }
        s
    }
}

/// Precomputed extractor; shareable across threads.
#[derive(Clone)]
pub struct Mfcc {
    cfg: MfccConfig,
    window: Vec<f64>,
    filterbank: Vec<Vec<f64>>,
    dct: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Mfcc {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Mfcc")
            .field("cfg", &self.cfg)
            .finish_non_exhaustive()
    }
}

impl Mfcc {
    pub fn new(cfg: MfccConfig) -> Result<Self> {
        let filterbank = mel_filterbank(&cfg)?;
        // periodic Hann, centered inside the FFT frame
        let lead = (cfg.fft_size - cfg.win_length) / 2;
        let mut window = vec![0.0; cfg.fft_size];
        for n in 0..cfg.win_length {
            window[lead + n] = 0.5 - 0.5 * (2.0 * PI * n as f64 / cfg.win_length as f64).cos();
        }
        let dct = dct_matrix(cfg.n_mels, cfg.n_mels);
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        Ok(Self {
            cfg,
            window,
            filterbank,
            dct,
            fft,
        })
    }

    pub fn config(&self) -> &MfccConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &[Vec<f64>] {
        &self.filterbank
    }

    fn check_clip(&self, clip: &AudioClip) -> Result<()> {
        ensure!(
            clip.sample_rate == self.cfg.sample_rate,
            Contract,
            "clip sample rate {} differs from extractor rate {}",
            clip.sample_rate,
            self.cfg.sample_rate
        );
        ensure!(
            clip.len() == self.cfg.sample_rate as usize,
            Contract,
            "clip must hold exactly {} samples (one second), got {}",
            self.cfg.sample_rate,
            clip.len()
        );
        Ok(())
    }

    /// Mel power spectrum per frame, before the log.
    pub fn mel_energies(&self, clip: &AudioClip) -> Result<Vec<Vec<f64>>> {
        self.check_clip(clip)?;
        let n = clip.len();
        let pad = self.cfg.fft_size / 2;
        ensure!(n > pad, Contract, "clip too short for reflect padding");
        // numpy-style reflect (edge sample not repeated)
        let padded: Vec<f64> = (0..n + 2 * pad)
            .map(|j| {
                let i = j as i64 - pad as i64;
                let idx = if i < 0 {
                    -i
                } else if i >= n as i64 {
                    2 * (n as i64 - 1) - i
                } else {
                    i
                };
                clip.samples[idx as usize] as f64
            })
            .collect();

        let frames = self.cfg.frame_count(n);
        let n_bins = self.cfg.n_bins();
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.fft_size];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0; n_bins];
        let mut out = Vec::with_capacity(frames);
        for t in 0..frames {
            let start = t * self.cfg.hop;
            for (k, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(padded[start + k] * self.window[k], 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, b) in power.iter_mut().zip(&buf) {
                *p = b.norm_sqr();
            }
            out.push(
                self.filterbank
                    .iter()
                    .map(|row| row.iter().zip(&power).map(|(w, p)| w * p).sum())
                    .collect(),
            );
        }
        Ok(out)
    }

    pub fn log_mel(&self, clip: &AudioClip) -> Result<Vec<Vec<f64>>> {
        let floor = self.cfg.log_floor;
        Ok(self
            .mel_energies(clip)?
            .into_iter()
            .map(|row| row.into_iter().map(|e| e.max(floor).ln()).collect())
            .collect())
    }

    pub fn dct(&self, log_mel: &[f64]) -> Vec<f64> {
        self.dct[..self.cfg.n_mfcc]
            .iter()
            .map(|basis| basis.iter().zip(log_mel).map(|(b, x)| b * x).sum())
            .collect()
    }

    /// Inverse of [`Mfcc::dct`] when all `n_mels` coefficients are kept.
    pub fn idct(&self, coeffs: &[f64]) -> Vec<f64> {
        (0..self.cfg.n_mels)
            .map(|i| {
                coeffs
                    .iter()
                    .zip(&self.dct)
                    .map(|(c, basis)| c * basis[i])
                    .sum()
            })
            .collect()
    }

    pub fn compute(&self, clip: &AudioClip) -> Result<FeatureMatrix> {
        let log_mel = self.log_mel(clip)?;
        let frames = log_mel.len();
        let mut values = Vec::with_capacity(frames * self.cfg.n_mfcc);
        for row in &log_mel {
            values.extend(self.dct(row).into_iter().map(|v| v as f32));
        }
        FeatureMatrix::new(frames, self.cfg.n_mfcc, values)
    }
}

pub fn compute_mfcc(clip: &AudioClip, cfg: &MfccConfig) -> Result<FeatureMatrix> {
    Mfcc::new(cfg.clone())?.compute(clip)
}
