//! Dataset manifests with speaker-stable hash splits, and training-time augmentation.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha1::{Digest, Sha1};

use crate::audio::{self, AudioClip, CLIP_SAMPLES};
use crate::error::{ensure, KwsError, Result};

pub const BACKGROUND_NOISE_DIR: &str = "_background_noise_";
pub const UNKNOWN_LABEL: &str = "unknown";
pub const SILENCE_LABEL: &str = "silence";

/// The ten command words of the standard twelve-class Speech Commands task.
pub const DEFAULT_KEYWORDS: [&str; 10] = [
    "yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = KwsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(KwsError::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// The part of a file name identifying its speaker: the text before `_nohash_`,
/// otherwise the whole stem.
pub fn speaker_token(filename: &str) -> &str {
    let base = filename.rsplit(['/', '\\']).next().unwrap_or(filename);
    match base.find("_nohash_") {
        Some(i) => &base[..i],
        None => base.rsplit_once('.').map_or(base, |(stem, _)| stem),
    }
}

/// Bucket in `[0, 100)` from the last eight hex digits of SHA-1 of the speaker token.
pub fn split_bucket(filename: &str) -> u32 {
    let digest = Sha1::digest(speaker_token(filename).as_bytes());
    let tail = u32::from_be_bytes([digest[16], digest[17], digest[18], digest[19]]);
    tail % 100
}

pub fn assign_split(filename: &str, train_pct: u32, val_pct: u32) -> Split {
    let bucket = split_bucket(filename);
    if bucket < train_pct {
        Split::Train
    } else if bucket < train_pct + val_pct {
        Split::Validation
    } else {
        Split::Test
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the dataset root, `/`-separated.
    pub path: String,
    pub label: usize,
    pub split: Split,
    /// Crop start (samples) for synthesized silence entries.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<usize>,
    /// Gain applied to the crop for synthesized silence entries.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub volume: Option<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub labels: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(labels: Vec<String>, mut entries: Vec<ManifestEntry>) -> Result<Self> {
        ensure!(
            !labels.is_empty() && labels.len() <= crate::nn::N_LABELS,
            Contract,
            "manifest needs between 1 and {} labels, got {}",
            crate::nn::N_LABELS,
            labels.len()
        );
        let mut seen = labels.clone();
        seen.sort();
        seen.dedup();
        ensure!(
            seen.len() == labels.len(),
            Contract,
            "duplicate label names"
        );
        for e in &entries {
            ensure!(
                e.label < labels.len(),
                Contract,
                "entry {} has label {} outside [0, {})",
                e.path,
                e.label,
                labels.len()
            );
        }
        sort_entries(&mut entries);
        Ok(Self { labels, entries })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn label_count(&self, label: usize) -> usize {
        self.entries.iter().filter(|e| e.label == label).count()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: DatasetManifest = serde_json::from_str(text)?;
        DatasetManifest::new(m.labels, m.entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| KwsError::io(format!("reading manifest {}", path.display()), e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::store::write_atomic(path.as_ref(), self.to_json()?.as_bytes())
    }
}

fn sort_entries(entries: &mut [ManifestEntry]) {
    entries.sort_by(|a, b| {
        a.path
            .cmp(&b.path)
            .then(a.offset.cmp(&b.offset))
            .then(a.label.cmp(&b.label))
    });
}

#[derive(Debug, Clone)]
pub struct ManifestOptions {
    pub train_pct: u32,
    pub val_pct: u32,
    /// Upper bound of the uniform gain applied to synthesized silence crops.
    pub noise_vol_max: f32,
    pub seed: u64,
}

impl Default for ManifestOptions {
    fn default() -> Self {
        Self {
            train_pct: 80,
            val_pct: 10,
            noise_vol_max: 0.1,
            seed: 0,
        }
    }
}

fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd =
        fs::read_dir(dir).map_err(|e| KwsError::io(format!("listing {}", dir.display()), e))?;
    let mut out = Vec::new();
    for ent in rd {
        let p = ent
            .map_err(|e| KwsError::io(format!("listing {}", dir.display()), e))?
            .path();
        if p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn relative(root: &Path, p: &Path) -> String {
    p.strip_prefix(root)
        .unwrap_or(p)
        .components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

/// Builds the keyword / unknown / silence manifest for a Speech-Commands-style tree:
/// one directory per word plus `_background_noise_`.
pub fn build_manifest(
    root: impl AsRef<Path>,
    keywords: &[&str],
    opts: &ManifestOptions,
) -> Result<DatasetManifest> {
    let root = root.as_ref();
    ensure!(!keywords.is_empty(), Config, "keyword list is empty");
    let mut word_dirs: BTreeMap<String, PathBuf> = BTreeMap::new();
    if root.is_dir() {
        let rd = fs::read_dir(root)
            .map_err(|e| KwsError::io(format!("listing {}", root.display()), e))?;
        for ent in rd {
            let p = ent
                .map_err(|e| KwsError::io(format!("listing {}", root.display()), e))?
                .path();
            if p.is_dir() {
                let name = p.file_name().unwrap().to_string_lossy().into_owned();
                if !name.starts_with('_') && !name.starts_with('.') {
                    word_dirs.insert(name, p);
                }
            }
        }
    }
    let missing: Vec<&str> = keywords
        .iter()
        .copied()
        .filter(|k| !word_dirs.contains_key(*k))
        .collect();
    if !missing.is_empty() {
        return Err(KwsError::Ingestion(format!(
            "missing keyword directories under {}: {}",
            root.display(),
            missing.join(", ")
        )));
    }

    let mut labels: Vec<String> = keywords.iter().map(|s| s.to_string()).collect();
    labels.push(UNKNOWN_LABEL.into());
    labels.push(SILENCE_LABEL.into());
    let unknown_id = keywords.len();
    let silence_id = unknown_id + 1;

    let entry = |path: String, label: usize| ManifestEntry {
        split: assign_split(&path, opts.train_pct, opts.val_pct),
        path,
        label,
        offset: None,
        volume: None,
    };

    let mut entries = Vec::new();
    let mut keyword_total = 0usize;
    for (id, k) in keywords.iter().enumerate() {
        let files = wav_files(&word_dirs[*k])?;
        keyword_total += files.len();
        entries.extend(files.iter().map(|f| entry(relative(root, f), id)));
    }
    if keyword_total == 0 {
        return Err(KwsError::Ingestion(format!(
            "keyword directories under {} contain no .wav files",
            root.display()
        )));
    }
    let per_class = (keyword_total as f64 / keywords.len() as f64).round() as usize;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut unknown = Vec::new();
    for (name, dir) in &word_dirs {
        if !keywords.contains(&name.as_str()) {
            unknown.extend(wav_files(dir)?);
        }
    }
    unknown.shuffle(&mut rng);
    unknown.truncate(per_class);
    entries.extend(unknown.iter().map(|f| entry(relative(root, f), unknown_id)));

    let noise_dir = root.join(BACKGROUND_NOISE_DIR);
    if noise_dir.is_dir() {
        let noise: Vec<(String, usize)> = wav_files(&noise_dir)?
            .into_iter()
            .map(|p| Ok((relative(root, &p), audio::read_wav(&p)?.len())))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .filter(|(_, len)| *len >= CLIP_SAMPLES)
            .collect();
        if !noise.is_empty() {
            for i in 0..per_class {
                let (path, len) = &noise[rng.gen_range(0..noise.len())];
                let offset = rng.gen_range(0..=len - CLIP_SAMPLES);
                let volume = rng.gen_range(0.0..=opts.noise_vol_max);
                entries.push(ManifestEntry {
                    path: path.clone(),
                    label: silence_id,
                    split: assign_split(
                        &format!("silence{i}_nohash_0"),
                        opts.train_pct,
                        opts.val_pct,
                    ),
                    offset: Some(offset),
                    volume: Some(volume),
                });
            }
        }
    }

    DatasetManifest::new(labels, entries)
}

/// Augmentation settings. Shift is drawn from `Uniform[-shift_ms, shift_ms]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub shift_ms: f64,
    pub noise_prob: f64,
    pub noise_vol_max: f32,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            shift_ms: 100.0,
            noise_prob: 0.8,
            noise_vol_max: 0.1,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            shift_ms: 0.0,
            noise_prob: 0.0,
            noise_vol_max: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.shift_ms >= 0.0,
            Config,
            "shift range must be non-negative"
        );
        ensure!(
            (0.0..=1.0).contains(&self.noise_prob),
            Config,
            "noise probability {} outside [0, 1]",
            self.noise_prob
        );
        ensure!(
            self.noise_vol_max >= 0.0,
            Config,
            "noise_vol_max must be non-negative"
        );
        Ok(())
    }

    /// Generator for one (epoch, sample) pair; independent of worker scheduling.
    pub fn rng_for(&self, epoch: usize, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((epoch as u64) << 32) | index as u64);
        rng
    }

    /// Random time shift, then noise mixing with probability `noise_prob`.
    pub fn apply<R: Rng + ?Sized>(
        &self,
        clip: &AudioClip,
        noise: &[AudioClip],
        rng: &mut R,
    ) -> Result<AudioClip> {
        let max_shift = (self.shift_ms * clip.sample_rate as f64 / 1000.0).round() as i64;
        let mut out = if max_shift > 0 {
            let max_shift = max_shift.min(clip.len() as i64);
            audio::shift_samples(clip, rng.gen_range(-max_shift..=max_shift))
        } else {
            clip.clone()
        };
        if !noise.is_empty() && self.noise_prob > 0.0 && rng.gen_bool(self.noise_prob) {
            let n = &noise[rng.gen_range(0..noise.len())];
            let volume = rng.gen_range(0.0..=self.noise_vol_max);
            out = audio::mix_noise(&out, n, volume, rng)?;
        }
        Ok(out)
    }
}

/// A manifest bound to the directory its relative paths resolve against.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn new(root: impl Into<PathBuf>, manifest: DatasetManifest) -> Self {
        Self {
            root: root.into(),
            manifest,
        }
    }

    /// Loads the entry's audio fitted to one second. Silence entries are noise crops.
    pub fn load_clip(&self, entry: &ManifestEntry) -> Result<AudioClip> {
        let clip = audio::read_wav(self.root.join(&entry.path))?;
        match (entry.offset, entry.volume) {
            (Some(offset), Some(volume)) => {
                let silent = AudioClip {
                    samples: vec![0.0; CLIP_SAMPLES],
                    sample_rate: clip.sample_rate,
                };
                audio::mix_noise_at(&silent, &clip, offset, volume)
            }
            _ => Ok(clip.fit_to_length(CLIP_SAMPLES)),
        }
    }

    /// All background-noise clips at least one second long; empty when the directory is absent.
    pub fn background_noise(&self) -> Result<Vec<AudioClip>> {
        let dir = self.root.join(BACKGROUND_NOISE_DIR);
        if !dir.is_dir() {
            return Ok(Vec::new());
        }
        Ok(wav_files(&dir)?
            .iter()
            .map(audio::read_wav)
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .filter(|c| c.len() >= CLIP_SAMPLES)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn same_speaker_same_split() {
        assert_eq!(speaker_token("abc_nohash_0.wav"), "abc");
        assert_eq!(speaker_token("yes/abc_nohash_7.wav"), "abc");
        assert_eq!(
            assign_split("abc_nohash_0.wav", 80, 10),
            assign_split("abc_nohash_7.wav", 80, 10)
        );
    }

    #[test]
    fn token_falls_back_to_stem() {
        assert_eq!(speaker_token("dir/speaker42.wav"), "speaker42");
        assert_eq!(speaker_token("noext"), "noext");
    }

    #[test]
    fn full_train_percentage_is_always_train() {
        for name in ["a", "abc123_nohash_0.wav", "zzz_nohash_1.wav", "q.wav"] {
            assert_eq!(assign_split(name, 100, 0), Split::Train);
        }
    }

    // Frozen with an independent SHA-1 (python hashlib):
    // sha1("abc123") = 6367c48d...e529f5ee, 0xe529f5ee % 100 = 98.
    #[test]
    fn golden_split_for_abc123() {
        assert_eq!(split_bucket("abc123_nohash_0.wav"), 98);
        assert_eq!(assign_split("abc123_nohash_0.wav", 80, 10), Split::Test);
        // sha1("abc") = a9993e36...9cd0d89d, 0x9cd0d89d % 100 = 37
        assert_eq!(split_bucket("abc_nohash_3.wav"), 37);
    }

    #[test]
    fn manifest_rejects_out_of_range_labels() {
        let e = ManifestEntry {
            path: "a.wav".into(),
            label: 3,
            split: Split::Train,
            offset: None,
            volume: None,
        };
        assert!(DatasetManifest::new(vec!["a".into(), "b".into()], vec![e]).is_err());
    }

    #[test]
    fn augment_config_validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        let bad = AugmentConfig {
            noise_prob: 1.5,
            ..AugmentConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn split_is_deterministic_and_speaker_stable(
            speaker in "[a-f0-9]{4,10}",
            a in 0u32..50,
            b in 0u32..50,
        ) {
            let f1 = format!("word/{speaker}_nohash_{a}.wav");
            let f2 = format!("other/{speaker}_nohash_{b}.wav");
            prop_assert_eq!(assign_split(&f1, 80, 10), assign_split(&f1, 80, 10));
            prop_assert_eq!(assign_split(&f1, 80, 10), assign_split(&f2, 80, 10));
        }
    }
}
