//! Boundary API consumed by the browser demo: load a `.kwsm` image, then score
//! one-second 16 kHz PCM windows.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::error::{ensure, KwsError, Result};
use crate::features::Mfcc;
use crate::nn::{ops, Model};
use crate::store;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferResult {
    pub posteriors: Vec<f32>,
    pub featurize_ms: f64,
    pub forward_ms: f64,
}

impl InferResult {
    pub fn argmax(&self) -> usize {
        ops::argmax(&self.posteriors)
    }
}

#[derive(Debug, Clone)]
pub struct Engine {
    model: Model,
    mfcc: Mfcc,
}

impl Engine {
    pub fn new(model: Model) -> Result<Self> {
        let mfcc = Mfcc::new(model.mfcc.clone())?;
        Ok(Self { model, mfcc })
    }

    /// `load_model(bytes) -> handle`
    pub fn load_model(bytes: &[u8]) -> Result<Self> {
        Self::new(store::from_bytes(bytes)?)
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn labels(&self) -> &[String] {
        &self.model.labels
    }

    /// `infer_pcm(handle, float[16000]) -> {posteriors[12], featurize_ms, forward_ms}`
    pub fn infer_pcm(&self, pcm: &[f32]) -> Result<InferResult> {
        let n = self.model.mfcc.sample_rate as usize;
        ensure!(
            pcm.len() == n,
            Contract,
            "infer_pcm expects {n} samples, got {}",
            pcm.len()
        );
        let clip = AudioClip {
            samples: pcm.iter().map(|s| s.clamp(-1.0, 1.0)).collect(),
            sample_rate: self.model.mfcc.sample_rate,
        };
        let t0 = Instant::now();
        let f = self.mfcc.compute(&clip)?;
        let t1 = Instant::now();
        let out = self.model.forward(&f)?;
        let t2 = Instant::now();
        Ok(InferResult {
            posteriors: out.posteriors,
            featurize_ms: (t1 - t0).as_secs_f64() * 1000.0,
            forward_ms: (t2 - t1).as_secs_f64() * 1000.0,
        })
    }
}

/// Lays out demo assets: `<out>/models/<name>.kwsm` (byte copy) and `<out>/labels.json`.
pub fn export_assets(model_path: &Path, name: &str, out_dir: &Path) -> Result<()> {
    ensure!(
        !name.is_empty() && !name.contains(['/', '\\']) && name != "." && name != "..",
        Config,
        "invalid model asset name {name:?}"
    );
    let bytes = std::fs::read(model_path)
        .map_err(|e| KwsError::io(format!("reading {}", model_path.display()), e))?;
    let model = store::from_bytes(&bytes)?;
    let models = out_dir.join("models");
    std::fs::create_dir_all(&models)
        .map_err(|e| KwsError::io(format!("creating {}", models.display()), e))?;
    store::write_atomic(&models.join(format!("{name}.kwsm")), &bytes)?;
    let labels = serde_json::to_vec_pretty(&model.labels)?;
    store::write_atomic(&out_dir.join("labels.json"), &labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelSpec;

    #[test]
    fn infer_from_bytes() {
        let m = Model::init(ModelSpec::res8_narrow(), 2).unwrap();
        let engine = Engine::load_model(&store::to_bytes(&m).unwrap()).unwrap();
        let pcm: Vec<f32> = (0..16_000).map(|i| (i as f32 * 0.05).sin() * 0.3).collect();
        let r = engine.infer_pcm(&pcm).unwrap();
        assert_eq!(r.posteriors.len(), 12);
        assert!((r.posteriors.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        assert!(r.featurize_ms >= 0.0 && r.forward_ms >= 0.0);
        assert!(engine.infer_pcm(&pcm[..8000]).is_err());
    }
}
