//! Synthetic datasets for smoke tests and desk-scale training runs.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{write_wav, AudioClip, CLIP_SAMPLES, SAMPLE_RATE};
use crate::dataset::{assign_split, DatasetManifest, ManifestEntry, BACKGROUND_NOISE_DIR};
use crate::error::{KwsError, Result};

#[derive(Debug, Clone)]
pub struct ToneSetConfig {
    /// `(label, base frequency in Hz)` per class.
    pub classes: Vec<(String, f64)>,
    pub per_class: usize,
    pub seed: u64,
    /// Also write a `_background_noise_` directory with two 3 s noise files.
    pub noise_files: bool,
}

impl Default for ToneSetConfig {
    fn default() -> Self {
        Self {
            classes: vec![
                ("low".into(), 400.0),
                ("mid".into(), 1200.0),
                ("high".into(), 3000.0),
            ],
            per_class: 50,
            seed: 0,
            noise_files: true,
        }
    }
}

/// Tone burst with random onset, length, level and a ±3 % frequency jitter over light white noise.
pub fn tone_clip(freq: f64, rng: &mut impl Rng) -> AudioClip {
    let f = freq * rng.gen_range(0.97..1.03);
    let amp = rng.gen_range(0.2..0.6);
    let len = rng.gen_range(0.3..0.6) * SAMPLE_RATE as f64;
    let onset = rng.gen_range(0.0..(CLIP_SAMPLES as f64 - len));
    let phase = rng.gen_range(0.0..2.0 * PI);
    let samples = (0..CLIP_SAMPLES)
        .map(|i| {
            let t = i as f64 - onset;
            let tone = if (0.0..len).contains(&t) {
                let env = 0.5 - 0.5 * (2.0 * PI * t / len).cos();
                amp * env * (2.0 * PI * f * i as f64 / SAMPLE_RATE as f64 + phase).sin()
            } else {
                0.0
            };
            (tone + rng.gen_range(-0.01..0.01)) as f32
        })
        .collect();
    AudioClip {
        samples,
        sample_rate: SAMPLE_RATE,
    }
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| KwsError::io(format!("creating {}", p.display()), e))
}

/// Writes `<root>/<label>/spk<class>x<i>_nohash_0.wav` for every clip and returns the manifest.
/// Every file gets its own speaker token, so splits spread roughly 80/10/10.
pub fn write_tone_dataset(root: &Path, cfg: &ToneSetConfig) -> Result<DatasetManifest> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut entries = Vec::new();
    for (label, (name, freq)) in cfg.classes.iter().enumerate() {
        let dir = root.join(name);
        mkdir(&dir)?;
        for i in 0..cfg.per_class {
            let file = format!("s{}c{label}x{i}_nohash_0.wav", cfg.seed);
            write_wav(dir.join(&file), &tone_clip(*freq, &mut rng))?;
            let path = format!("{name}/{file}");
            entries.push(ManifestEntry {
                split: assign_split(&path, 80, 10),
                path,
                label,
                offset: None,
                volume: None,
            });
        }
    }
    if cfg.noise_files {
        let dir = root.join(BACKGROUND_NOISE_DIR);
        mkdir(&dir)?;
        let white: Vec<f32> = (0..3 * CLIP_SAMPLES)
            .map(|_| rng.gen_range(-0.5..0.5))
            .collect();
        // leaky-integrated white noise: a crude brown/pink mix
        let mut acc = 0.0f32;
        let brown: Vec<f32> = (0..3 * CLIP_SAMPLES)
            .map(|_| {
                acc = 0.98 * acc + rng.gen_range(-0.1..0.1);
                acc.clamp(-1.0, 1.0)
            })
            .collect();
        write_wav(
            dir.join("white_noise.wav"),
            &AudioClip {
                samples: white,
                sample_rate: SAMPLE_RATE,
            },
        )?;
        write_wav(
            dir.join("brown_noise.wav"),
            &AudioClip {
                samples: brown,
                sample_rate: SAMPLE_RATE,
            },
        )?;
    }
    DatasetManifest::new(
        cfg.classes.iter().map(|(n, _)| n.clone()).collect(),
        entries,
    )
}
