use rayon::prelude::*;

use crate::dataset::{Dataset, Split};
use crate::error::{ensure, Result};
use crate::features::{FeatureMatrix, Mfcc, MfccConfig};
use crate::nn::{ops, Model};

/// Anything that maps a feature matrix to class posteriors.
pub trait Classifier: Sync {
    fn posteriors(&self, features: &FeatureMatrix) -> Result<Vec<f32>>;

    /// Front-end configuration the classifier expects.
    fn mfcc_config(&self) -> MfccConfig {
        MfccConfig::default()
    }
}

impl Classifier for Model {
    fn posteriors(&self, features: &FeatureMatrix) -> Result<Vec<f32>> {
        Ok(self.forward(features)?.posteriors)
    }

    fn mfcc_config(&self) -> MfccConfig {
        self.mfcc.clone()
    }
}

/// Share of `split` entries whose posterior argmax equals the label. No augmentation.
pub fn evaluate_accuracy(
    classifier: &impl Classifier,
    data: &Dataset,
    split: Split,
) -> Result<f64> {
    let entries: Vec<_> = data.manifest.split(split).collect();
    ensure!(!entries.is_empty(), Contract, "the {split} split is empty");
    let mfcc = Mfcc::new(classifier.mfcc_config())?;
    let hits = entries
        .par_iter()
        .map(|e| {
            let f = mfcc.compute(&data.load_clip(e)?)?;
            Ok((ops::argmax(&classifier.posteriors(&f)?) == e.label) as usize)
        })
        .collect::<Result<Vec<usize>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / entries.len() as f64)
}
