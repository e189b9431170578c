//! Oracles and fixtures shared by the integration suites. Nothing here calls
//! the code path it is used to check.
#![allow(dead_code)]

use std::path::Path;

use kws_core::dataset::{Dataset, DatasetManifest};
use kws_core::nn::{Model, ModelSpec, Tensor, N_LABELS};
use kws_core::synth::{write_tone_dataset, ToneSetConfig};
use kws_core::train::{batch_loss, Batch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Tiny slim-ready configuration with base width 2.
pub fn tiny_model(seed: u64, widths: Vec<usize>) -> Model<f64> {
    tiny_config(2, widths, true, seed)
}

/// Small f64 model with γ and the linear bias moved off their defaults so every path is exercised.
pub fn tiny_config(base: usize, widths: Vec<usize>, slim_ready: bool, seed: u64) -> Model<f64> {
    let mut spec = ModelSpec::new("tiny", base).slim_ready(slim_ready);
    spec.inner_widths = widths;
    let mut m = Model::<f64>::init(spec, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for b in &mut m.blocks {
        if let Some(g) = &mut b.bn1.gamma {
            g.data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.gen_range(0.5..1.5));
        }
    }
    m.fc_bias
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = rng.gen_range(-0.2..0.2));
    m
}

pub fn random_batch(n: usize, h: usize, w: usize, seed: u64) -> Batch<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = (0..n)
        .map(|_| (0..h * w).map(|_| rng.gen_range(-2.0..2.0)).collect())
        .collect();
    let labels = (0..n).map(|_| rng.gen_range(0..N_LABELS)).collect();
    Batch::new(inputs, labels, h, w).unwrap()
}

/// Central finite differences of the batch loss w.r.t. every trainable element.
/// Steps much above 1e-5 start to straddle ReLU kinks.
pub fn finite_difference_grads(
    model: &Model<f64>,
    batch: &Batch<f64>,
    step: f64,
) -> Vec<Tensor<f64>> {
    let mut probe = model.clone();
    let shapes: Vec<Vec<usize>> = model
        .trainable()
        .iter()
        .map(|t| t.shape().to_vec())
        .collect();
    let mut out = Vec::with_capacity(shapes.len());
    for (ti, shape) in shapes.iter().enumerate() {
        let n: usize = shape.iter().product();
        let mut g = vec![0.0; n];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = probe.trainable()[ti].data()[i];
            probe.trainable_mut()[ti].data_mut()[i] = orig + step;
            let up = batch_loss(&probe, batch).unwrap();
            probe.trainable_mut()[ti].data_mut()[i] = orig - step;
            let down = batch_loss(&probe, batch).unwrap();
            probe.trainable_mut()[ti].data_mut()[i] = orig;
            *gi = (up - down) / (2.0 * step);
        }
        out.push(Tensor::new(shape.clone(), g).unwrap());
    }
    out
}

/// Worst relative error between two gradient sets; entries where both are below
/// `tiny` in magnitude are compared absolutely against `tiny_abs` instead.
pub fn worst_relative_error(
    analytic: &[Tensor<f64>],
    numeric: &[Tensor<f64>],
    tiny: f64,
    tiny_abs: f64,
) -> (f64, bool) {
    let mut worst = 0.0f64;
    let mut ok = true;
    for (a, n) in analytic.iter().zip(numeric) {
        for (&x, &y) in a.data().iter().zip(n.data()) {
            let scale = x.abs().max(y.abs());
            if scale < tiny {
                ok &= (x - y).abs() < tiny_abs;
            } else {
                let rel = (x - y).abs() / scale;
                worst = worst.max(rel);
            }
        }
    }
    (worst, ok)
}

/// Three-class synthetic tone set (50 clips per class) written under `root`.
pub fn tone_dataset(root: &Path, seed: u64) -> Dataset {
    let manifest: DatasetManifest = write_tone_dataset(
        root,
        &ToneSetConfig {
            seed,
            ..ToneSetConfig::default()
        },
    )
    .unwrap();
    Dataset::new(root, manifest)
}
