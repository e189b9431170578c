//! Latency harness: warmup, timed runs with per-stage breakdown, and
//! latency/accuracy tradeoff tables.
//!
//! Each timed run measures featurization, the forward pass, and the whole
//! featurize→forward path from the same monotonic clock. End-to-end is its own
//! interval rather than a sum, so gaps between stages are included.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{AudioClip, CLIP_SAMPLES, SAMPLE_RATE};
use crate::dataset::{Dataset, Split};
use crate::error::{ensure, KwsError, Result};
use crate::eval::evaluate_accuracy;
use crate::features::Mfcc;
use crate::nn::Model;

#[derive(Debug, Clone)]
pub enum InputSource {
    /// The same clip every run.
    Fixed(AudioClip),
    /// `count` uniform-noise clips generated from `seed`, cycled.
    Random { seed: u64, count: usize },
    /// Caller-provided clips, cycled.
    Clips(Vec<AudioClip>),
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub runs: usize,
    pub warmup: usize,
    pub input: InputSource,
    pub device_label: String,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            runs: 100,
            warmup: 10,
            input: InputSource::Random { seed: 0, count: 8 },
            device_label: "local".into(),
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.runs >= 1, Config, "runs must be at least 1");
        Ok(())
    }

    fn clips(&self) -> Result<Vec<AudioClip>> {
        let clips = match &self.input {
            InputSource::Fixed(c) => vec![c.clone()],
            InputSource::Random { seed, count } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                (0..(*count).max(1))
                    .map(|_| AudioClip {
                        samples: (0..CLIP_SAMPLES)
                            .map(|_| rng.gen_range(-0.5..0.5))
                            .collect(),
                        sample_rate: SAMPLE_RATE,
                    })
                    .collect()
            }
            InputSource::Clips(c) => c.clone(),
        };
        ensure!(
            !clips.is_empty(),
            Config,
            "benchmark input source holds no clips"
        );
        Ok(clips)
    }
}

/// Summary statistics in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub p50: f64,
    pub p95: f64,
    pub p99: f64,
    pub max: f64,
    pub samples: usize,
}

/// Linear-interpolated percentile of sorted data, `q` in `[0, 100]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = (q / 100.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl StageStats {
    pub fn from_samples(ms: &[f64]) -> Result<Self> {
        ensure!(!ms.is_empty(), Contract, "no samples to summarize");
        let mut sorted = ms.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = ms.len() as f64;
        let mean = ms.iter().sum::<f64>() / n;
        let var = ms.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Ok(Self {
            mean,
            std: var.sqrt(),
            min: sorted[0],
            p50: percentile(&sorted, 50.0),
            p95: percentile(&sorted, 95.0),
            p99: percentile(&sorted, 99.0),
            max: sorted[sorted.len() - 1],
            samples: ms.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub device_label: String,
    pub model: String,
    pub params: usize,
    pub multiplies: usize,
    pub runs: usize,
    pub warmup: usize,
    pub featurize: StageStats,
    pub forward: StageStats,
    pub end_to_end: StageStats,
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,mean,std,min,p50,p95,p99,max,samples\n");
        for (name, st) in [
            ("featurize", &self.featurize),
            ("forward", &self.forward),
            ("end_to_end", &self.end_to_end),
        ] {
            let _ = writeln!(
                s,
                "{name},{},{},{},{},{},{},{},{}",
                st.mean, st.std, st.min, st.p50, st.p95, st.p99, st.max, st.samples
            );
        }
        s
    }
}

fn elapsed_ms(from: Instant, to: Instant) -> Result<f64> {
    let d = to.duration_since(from);
    if d.is_zero() {
        return Err(KwsError::Harness(
            "clock returned a zero-length interval; timer resolution is insufficient".into(),
        ));
    }
    Ok(d.as_secs_f64() * 1000.0)
}

/// Single-threaded: warmup runs are executed and discarded, then `runs` runs are timed.
pub fn run_bench(model: &Model, name: &str, cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    model.validate()?;
    let clips = cfg.clips()?;
    let mfcc = Mfcc::new(model.mfcc.clone())?;
    for i in 0..cfg.warmup {
        let f = mfcc.compute(&clips[i % clips.len()])?;
        std::hint::black_box(model.forward(&f)?);
    }
    let mut feat = Vec::with_capacity(cfg.runs);
    let mut fwd = Vec::with_capacity(cfg.runs);
    let mut e2e = Vec::with_capacity(cfg.runs);
    for i in 0..cfg.runs {
        let clip = &clips[i % clips.len()];
        let t0 = Instant::now();
        let f = mfcc.compute(clip)?;
        let t1 = Instant::now();
        let out = model.forward(&f)?;
        let t2 = Instant::now();
        std::hint::black_box(out);
        feat.push(elapsed_ms(t0, t1)?);
        fwd.push(elapsed_ms(t1, t2)?);
        e2e.push(elapsed_ms(t0, t2)?);
    }
    let (h, w) = (
        model.mfcc.frame_count(model.mfcc.sample_rate as usize),
        model.mfcc.n_mfcc,
    );
    Ok(BenchReport {
        device_label: cfg.device_label.clone(),
        model: name.to_string(),
        params: model.count_params(),
        multiplies: model.count_multiplies(h, w),
        runs: cfg.runs,
        warmup: cfg.warmup,
        featurize: StageStats::from_samples(&feat)?,
        forward: StageStats::from_samples(&fwd)?,
        end_to_end: StageStats::from_samples(&e2e)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    pub name: String,
    pub params: usize,
    pub multiplies: usize,
    pub accuracy: f64,
    pub p50_ms: f64,
}

/// One row per model (test accuracy and p50 end-to-end latency), sorted by multiplies ascending.
pub fn emit_tradeoff(
    models: &[(String, Model)],
    data: &Dataset,
    cfg: &BenchConfig,
) -> Result<Vec<TradeoffRow>> {
    ensure!(
        models.len() >= 2,
        Contract,
        "a tradeoff curve needs at least two models, got {}",
        models.len()
    );
    ensure!(
        data.manifest.count(Split::Test) > 0,
        Contract,
        "the manifest has an empty test split"
    );
    let mut rows = Vec::with_capacity(models.len());
    for (name, model) in models {
        let report = run_bench(model, name, cfg)?;
        rows.push(TradeoffRow {
            name: name.clone(),
            params: report.params,
            multiplies: report.multiplies,
            accuracy: evaluate_accuracy(model, data, Split::Test)?,
            p50_ms: report.end_to_end.p50,
        });
    }
    rows.sort_by(|a, b| a.multiplies.cmp(&b.multiplies).then(a.name.cmp(&b.name)));
    Ok(rows)
}

pub fn tradeoff_csv(rows: &[TradeoffRow]) -> String {
    let mut s = String::from("name,params,multiplies,accuracy,p50_ms\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.name, r.params, r.multiplies, r.accuracy, r.p50_ms
        );
    }
    s
}
