mod common;

use std::collections::HashMap;

use kws_core::bench::{emit_tradeoff, tradeoff_csv, BenchConfig, InputSource};
use kws_core::dataset::{Dataset, Split};
use kws_core::eval::{evaluate_accuracy, Classifier};
use kws_core::features::{FeatureMatrix, Mfcc, MfccConfig};
use kws_core::nn::{Model, ModelSpec, N_LABELS};
use kws_core::slim::{slim, SlimConfig};
use kws_core::synth::{write_tone_dataset, ToneSetConfig};
use kws_core::KwsError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn key(f: &FeatureMatrix) -> Vec<u32> {
    f.values.iter().map(|v| v.to_bits()).collect()
}

/// Remembers the label of every clip it was shown.
struct Oracle(HashMap<Vec<u32>, usize>);

impl Classifier for Oracle {
    fn posteriors(&self, f: &FeatureMatrix) -> kws_core::Result<Vec<f32>> {
        let mut p = vec![0.0; N_LABELS];
        p[self.0[&key(f)]] = 1.0;
        Ok(p)
    }
}

/// Uniform random posteriors seeded by the feature bits, so repeated calls agree.
struct Coin(u64);

fn coin_posteriors(seed: u64, f: &FeatureMatrix) -> Vec<f32> {
    let h = key(f)
        .iter()
        .fold(seed, |h, &b| h.rotate_left(5) ^ b as u64)
        .wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let mut rng = ChaCha8Rng::seed_from_u64(h);
    (0..N_LABELS).map(|_| rng.gen::<f32>()).collect()
}

impl Classifier for Coin {
    fn posteriors(&self, f: &FeatureMatrix) -> kws_core::Result<Vec<f32>> {
        Ok(coin_posteriors(self.0, f))
    }
}

fn twelve_class(root: &std::path::Path) -> Dataset {
    let classes = (0..N_LABELS)
        .map(|i| (format!("c{i}"), 300.0 + 450.0 * i as f64))
        .collect();
    let cfg = ToneSetConfig {
        classes,
        per_class: 12,
        seed: 4,
        noise_files: false,
    };
    Dataset::new(root, write_tone_dataset(root, &cfg).unwrap())
}

fn features_by_split(data: &Dataset, split: Split) -> Vec<(FeatureMatrix, usize)> {
    let mfcc = Mfcc::new(MfccConfig::default()).unwrap();
    data.manifest
        .split(split)
        .map(|e| (mfcc.compute(&data.load_clip(e).unwrap()).unwrap(), e.label))
        .collect()
}

#[test]
fn oracle_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = twelve_class(dir.path());
    let feats = features_by_split(&data, Split::Train);
    let oracle = Oracle(feats.iter().map(|(f, l)| (key(f), *l)).collect());
    assert_eq!(
        evaluate_accuracy(&oracle, &data, Split::Train).unwrap(),
        1.0
    );
}

#[test]
fn random_classifier_matches_sequential_count() {
    let dir = tempfile::tempdir().unwrap();
    let data = twelve_class(dir.path());
    let feats = features_by_split(&data, Split::Train);
    let hits = feats
        .iter()
        .filter(|(f, l)| {
            let p = coin_posteriors(77, f);
            let best = (0..N_LABELS).fold(0, |b, i| if p[i] > p[b] { i } else { b });
            best == *l
        })
        .count();
    let expected = hits as f64 / feats.len() as f64;
    let acc = evaluate_accuracy(&Coin(77), &data, Split::Train).unwrap();
    assert_eq!(acc, expected);
    assert!(
        (acc - 1.0 / 12.0).abs() < 0.1,
        "accuracy {acc} far from chance"
    );
}

#[test]
fn empty_split_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = common::tone_dataset(dir.path(), 1);
    let mut train_only = data.clone();
    train_only
        .manifest
        .entries
        .retain(|e| e.split == Split::Train);
    let m = Model::init(ModelSpec::res8_narrow(), 0).unwrap();
    assert!(matches!(
        evaluate_accuracy(&m, &train_only, Split::Test),
        Err(KwsError::Contract(_))
    ));
}

#[test]
fn tradeoff_rows() {
    let dir = tempfile::tempdir().unwrap();
    let data = common::tone_dataset(dir.path(), 2);
    let base = Model::init(ModelSpec::res8_narrow().slim_ready(true), 1).unwrap();
    let models = vec![
        ("res8-narrow".to_string(), base.clone()),
        (
            "res8-narrow-40".to_string(),
            slim(&base, &SlimConfig::new(0.4)).unwrap().0,
        ),
        (
            "res8-narrow-80".to_string(),
            slim(&base, &SlimConfig::new(0.8)).unwrap().0,
        ),
    ];
    let cfg = BenchConfig {
        runs: 3,
        warmup: 1,
        input: InputSource::Random { seed: 0, count: 2 },
        device_label: "test".into(),
    };
    let rows = emit_tradeoff(&models, &data, &cfg).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, ["res8-narrow-80", "res8-narrow-40", "res8-narrow"]);
    assert!(rows.windows(2).all(|w| w[0].multiplies < w[1].multiplies));
    assert!(rows
        .iter()
        .all(|r| (0.0..=1.0).contains(&r.accuracy) && r.p50_ms > 0.0));
    let csv = tradeoff_csv(&rows);
    assert!(csv.starts_with("name,params,multiplies,accuracy,p50_ms\n"));
    assert_eq!(csv.lines().count(), 4);

    assert!(matches!(
        emit_tradeoff(&models[..1], &data, &cfg),
        Err(KwsError::Contract(_))
    ));
}
