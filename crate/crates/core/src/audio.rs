//! PCM audio clips: WAV ingestion and the augmentations applied during training.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{ensure, KwsError, Result};

pub const SAMPLE_RATE: u32 = 16_000;
/// One second of audio at [`SAMPLE_RATE`]; the length every clip is fitted to before featurization.
pub const CLIP_SAMPLES: usize = SAMPLE_RATE as usize;

/// Mono audio with samples normalized to `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        ensure!(
            !samples.is_empty(),
            Contract,
            "audio clip must be non-empty"
        );
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_ms(&self) -> f64 {
        self.samples.len() as f64 * 1000.0 / self.sample_rate as f64
    }

    /// Zero-pads the tail of short clips and center-crops long ones to exactly `len` samples.
    pub fn fit_to_length(&self, len: usize) -> AudioClip {
        let n = self.samples.len();
        let samples = if n >= len {
            let start = (n - len) / 2;
            self.samples[start..start + len].to_vec()
        } else {
            let mut out = self.samples.clone();
            out.resize(len, 0.0);
            out
        };
        AudioClip {
            samples,
            sample_rate: self.sample_rate,
        }
    }
}

/// Reads a 16-bit PCM, mono, 16 kHz RIFF/WAVE file.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let bytes =
        fs::read(path).map_err(|e| KwsError::io(format!("reading {}", path.display()), e))?;
    parse_wav(&bytes).map_err(|e| match e {
        KwsError::Corrupt { reason, .. } => KwsError::Corrupt {
            path: path.to_path_buf(),
            reason,
        },
        other => other,
    })
}

fn corrupt(reason: impl Into<String>) -> KwsError {
    KwsError::Corrupt {
        path: "<memory>".into(),
        reason: reason.into(),
    }
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Parses an in-memory WAV image. See [`read_wav`].
pub fn parse_wav(bytes: &[u8]) -> Result<AudioClip> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(corrupt("missing RIFF/WAVE header"));
    }
    let mut pos = 12;
    let mut fmt_seen = false;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        match id {
            b"fmt " => {
                if size < 16 || body + 16 > bytes.len() {
                    return Err(corrupt("truncated fmt chunk"));
                }
                check_format(
                    u16_at(bytes, body),
                    u16_at(bytes, body + 2),
                    u32_at(bytes, body + 4),
                    u16_at(bytes, body + 14),
                )?;
                fmt_seen = true;
            }
            b"data" => {
                if !fmt_seen {
                    return Err(corrupt("data chunk precedes fmt chunk"));
                }
                let available = bytes.len() - body;
                if size > available {
                    return Err(corrupt(format!(
                        "data chunk declares {size} bytes but only {available} remain"
                    )));
                }
                if size & 1 == 1 {
                    return Err(corrupt("data chunk holds an odd number of bytes"));
                }
                let samples: Vec<f32> = bytes[body..body + size]
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 / 32768.0)
                    .collect();
                if samples.is_empty() {
                    return Err(corrupt("empty data chunk"));
                }
                return Ok(AudioClip {
                    samples,
                    sample_rate: SAMPLE_RATE,
                });
            }
            _ => {}
        }
        // chunks are word aligned
        pos = body + size + (size & 1);
    }
    Err(corrupt("no data chunk"))
}

fn check_format(format: u16, channels: u16, rate: u32, bits: u16) -> Result<()> {
    let bad = |field: &'static str, found: String, expected: &str| KwsError::Format {
        field,
        found,
        expected: expected.to_string(),
    };
    if format != 1 {
        return Err(bad("audio_format", format.to_string(), "1 (PCM)"));
    }
    if channels != 1 {
        return Err(bad("channels", channels.to_string(), "1"));
    }
    if rate != SAMPLE_RATE {
        return Err(bad("sample_rate", rate.to_string(), "16000"));
    }
    if bits != 16 {
        return Err(bad("bits_per_sample", bits.to_string(), "16"));
    }
    Ok(())
}

/// Encodes a clip as 16-bit PCM WAV. Samples are clamped and rounded to the nearest int16.
pub fn encode_wav(clip: &AudioClip) -> Vec<u8> {
    encode_wav_raw(&quantize(&clip.samples), 1, clip.sample_rate)
}

pub(crate) fn quantize(samples: &[f32]) -> Vec<i16> {
    samples
        .iter()
        .map(|&s| {
            (s.clamp(-1.0, 1.0) * 32768.0)
                .round()
                .clamp(-32768.0, 32767.0) as i16
        })
        .collect()
}

/// Raw WAV writer; lets tests produce files with arbitrary channel counts and rates.
pub fn encode_wav_raw(data: &[i16], channels: u16, sample_rate: u32) -> Vec<u8> {
    let data_len = (data.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&channels.to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * channels as u32 * 2).to_le_bytes());
    out.extend_from_slice(&(channels * 2).to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for s in data {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_wav(clip))
        .map_err(|e| KwsError::io(format!("writing {}", path.display()), e))
}

fn ms_to_samples(ms: f64, rate: u32) -> i64 {
    (ms * rate as f64 / 1000.0).round() as i64
}

/// Shifts content by `shift_ms`: positive moves it later (zero-filled head),
/// negative moves it earlier (zero-filled tail). Length is preserved.
pub fn time_shift(clip: &AudioClip, shift_ms: f64) -> Result<AudioClip> {
    ensure!(
        shift_ms.abs() <= clip.duration_ms(),
        Range,
        "shift of {shift_ms} ms exceeds clip duration {} ms",
        clip.duration_ms()
    );
    Ok(shift_samples(
        clip,
        ms_to_samples(shift_ms, clip.sample_rate),
    ))
}

pub(crate) fn shift_samples(clip: &AudioClip, shift: i64) -> AudioClip {
    let n = clip.samples.len();
    let k = shift.unsigned_abs().min(n as u64) as usize;
    let mut out = vec![0.0f32; n];
    if shift >= 0 {
        out[k..].copy_from_slice(&clip.samples[..n - k]);
    } else {
        out[..n - k].copy_from_slice(&clip.samples[k..]);
    }
    AudioClip {
        samples: out,
        sample_rate: clip.sample_rate,
    }
}

/// Adds `volume` times the noise window starting at `offset`, clamping to `[-1, 1]`.
pub fn mix_noise_at(
    clip: &AudioClip,
    noise: &AudioClip,
    offset: usize,
    volume: f32,
) -> Result<AudioClip> {
    ensure!(
        volume >= 0.0,
        Range,
        "noise volume must be non-negative, got {volume}"
    );
    ensure!(
        offset + clip.len() <= noise.len(),
        Range,
        "noise of {} samples cannot cover a {}-sample clip at offset {offset}",
        noise.len(),
        clip.len()
    );
    let samples = clip
        .samples
        .iter()
        .zip(&noise.samples[offset..])
        .map(|(&c, &n)| (c + volume * n).clamp(-1.0, 1.0))
        .collect();
    Ok(AudioClip {
        samples,
        sample_rate: clip.sample_rate,
    })
}

/// [`mix_noise_at`] with a uniformly random crop offset.
pub fn mix_noise<R: Rng + ?Sized>(
    clip: &AudioClip,
    noise: &AudioClip,
    volume: f32,
    rng: &mut R,
) -> Result<AudioClip> {
    ensure!(
        noise.len() >= clip.len(),
        Range,
        "noise ({} samples) shorter than clip ({} samples)",
        noise.len(),
        clip.len()
    );
    let offset = rng.gen_range(0..=noise.len() - clip.len());
    mix_noise_at(clip, noise, offset, volume)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn clip(v: &[f32]) -> AudioClip {
        AudioClip::new(v.to_vec(), SAMPLE_RATE).unwrap()
    }

    fn ramp(n: usize) -> AudioClip {
        clip(&(0..n).map(|i| i as f32 / n as f32).collect::<Vec<_>>())
    }

    #[test]
    fn one_second_file_round_trips() {
        let c = ramp(CLIP_SAMPLES);
        let parsed = parse_wav(&encode_wav(&c)).unwrap();
        assert_eq!(parsed.len(), 16_000);
        assert_eq!(parsed.sample_rate, 16_000);
        for (a, b) in parsed.samples.iter().zip(&c.samples) {
            assert!((a - b).abs() <= 1.0 / 32768.0);
        }
    }

    #[test]
    fn int16_min_maps_to_minus_one() {
        let parsed = parse_wav(&encode_wav_raw(&[-32768, 0, 16384], 1, 16_000)).unwrap();
        assert_eq!(parsed.samples, vec![-1.0, 0.0, 0.5]);
    }

    #[test]
    fn stereo_44k_is_rejected_naming_the_field() {
        let err = parse_wav(&encode_wav_raw(&[0; 8], 2, 44_100)).unwrap_err();
        match err {
            KwsError::Format { field, .. } => assert_eq!(field, "channels"),
            other => panic!("unexpected {other:?}"),
        }
        let err = parse_wav(&encode_wav_raw(&[0; 8], 1, 44_100)).unwrap_err();
        assert!(err.to_string().contains("sample_rate"), "{err}");
    }

    #[test]
    fn truncated_data_chunk_is_corrupt() {
        let mut bytes = encode_wav_raw(&[1, 2, 3, 4], 1, 16_000);
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(parse_wav(&bytes), Err(KwsError::Corrupt { .. })));
    }

    #[test]
    fn skips_unknown_chunks() {
        let plain = encode_wav_raw(&[5, 6, 7], 1, 16_000);
        let mut bytes = plain[..36].to_vec();
        bytes.extend_from_slice(b"LIST");
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(&[1, 2, 3, 0]);
        bytes.extend_from_slice(&plain[36..]);
        let parsed = parse_wav(&bytes).unwrap();
        assert_eq!(parsed.len(), 3);
    }

    #[test]
    fn shift_zero_is_identity() {
        let c = ramp(CLIP_SAMPLES);
        assert_eq!(time_shift(&c, 0.0).unwrap(), c);
    }

    #[test]
    fn shift_forward_100ms() {
        let c = ramp(CLIP_SAMPLES);
        let s = time_shift(&c, 100.0).unwrap();
        assert!(s.samples[..1600].iter().all(|&v| v == 0.0));
        assert_eq!(&s.samples[1600..], &c.samples[..14_400]);
    }

    #[test]
    fn shift_backward_100ms() {
        let c = ramp(CLIP_SAMPLES);
        let s = time_shift(&c, -100.0).unwrap();
        assert_eq!(&s.samples[..14_400], &c.samples[1600..]);
        assert!(s.samples[14_400..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shift_longer_than_clip_is_range_error() {
        let c = ramp(160);
        assert!(matches!(time_shift(&c, 20.0), Err(KwsError::Range(_))));
    }

    #[test]
    fn mix_volume_zero_is_identity() {
        let c = clip(&[0.1, -0.2, 0.3]);
        let n = clip(&[0.5, 0.5, 0.5, 0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(mix_noise(&c, &n, 0.0, &mut rng).unwrap(), c);
    }

    #[test]
    fn mix_arithmetic_and_clamp() {
        let out = mix_noise_at(&clip(&[0.1, -0.2]), &clip(&[0.4, 0.4]), 0, 0.5).unwrap();
        assert!((out.samples[0] - 0.3).abs() < 1e-7);
        assert!(out.samples[1].abs() < 1e-7);
        let out = mix_noise_at(&clip(&[0.9]), &clip(&[0.9]), 0, 1.0).unwrap();
        assert_eq!(out.samples, vec![1.0]);
    }

    #[test]
    fn short_noise_is_range_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = mix_noise(&clip(&[0.0; 4]), &clip(&[0.0; 3]), 0.1, &mut rng);
        assert!(matches!(r, Err(KwsError::Range(_))));
    }

    #[test]
    fn fit_pads_tail_and_center_crops() {
        let c = clip(&[1.0, 2.0]);
        assert_eq!(c.fit_to_length(4).samples, vec![1.0, 2.0, 0.0, 0.0]);
        let c = clip(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(c.fit_to_length(2).samples, vec![3.0, 4.0]);
    }

    proptest! {
        #[test]
        fn augmentation_preserves_length_and_range(
            samples in prop::collection::vec(-1.0f32..=1.0, 1..400),
            shift in -1000i64..1000,
            volume in 0.0f32..4.0,
            seed in any::<u64>(),
        ) {
            let c = clip(&samples);
            let shift = shift % (c.len() as i64 + 1);
            let shifted = shift_samples(&c, shift);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise: Vec<f32> = (0..c.len() + 37).map(|_| rng.gen_range(-1.0..=1.0)).collect();
            let mixed = mix_noise(&shifted, &clip(&noise), volume, &mut rng).unwrap();
            prop_assert_eq!(mixed.len(), c.len());
            prop_assert!(mixed.samples.iter().all(|v| (-1.0..=1.0).contains(v)));
        }

        #[test]
        fn shift_round_trip_on_untouched_range(
            samples in prop::collection::vec(-1.0f32..=1.0, 1..400),
            s in 0usize..400,
        ) {
            let c = clip(&samples);
            let s = s.min(c.len());
            let back = shift_samples(&shift_samples(&c, s as i64), -(s as i64));
            let n = c.len();
            prop_assert_eq!(&back.samples[..n - s], &c.samples[..n - s]);
        }
    }
}
