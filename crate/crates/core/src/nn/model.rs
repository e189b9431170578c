//! res8-family residual keyword-spotting network.
//!
//! ```text
//! input 1×H×W → conv0 (C×1×3×3) → ReLU → avgpool(4,3)
//!   → blocks: x ↦ ReLU(x + BN2(conv2(ReLU(BN1(conv1(x))))))
//!   → spatial mean → linear (12×C + 12) → softmax
//! ```
//! Block `b` narrows to `inner_widths[b]` channels between its two convolutions;
//! that width is what channel slimming removes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::BatchNorm;
use super::ops;
use super::tensor::{Scalar, Tensor};
use super::N_LABELS;
use crate::error::{ensure, Result};
use crate::features::{FeatureMatrix, MfccConfig};

pub const POOL: (usize, usize) = (4, 3);
pub const N_BLOCKS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: String,
    pub base_channels: usize,
    pub inner_widths: Vec<usize>,
    pub n_labels: usize,
    /// Prunable BN layers carry a learnable scale γ.
    pub slim_ready: bool,
}

impl ModelSpec {
    pub fn new(arch: impl Into<String>, base_channels: usize) -> Self {
        Self {
            arch: arch.into(),
            base_channels,
            inner_widths: vec![base_channels; N_BLOCKS],
            n_labels: N_LABELS,
            slim_ready: false,
        }
    }

    pub fn res8() -> Self {
        Self::new("res8", 45)
    }

    pub fn res8_narrow() -> Self {
        Self::new("res8-narrow", 19)
    }

    /// `res8` or `res8-narrow`.
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "res8" => Ok(Self::res8()),
            "res8-narrow" => Ok(Self::res8_narrow()),
            other => Err(crate::KwsError::Config(format!(
                "unknown architecture {other:?} (expected res8 or res8-narrow)"
            ))),
        }
    }

    pub fn slim_ready(mut self, on: bool) -> Self {
        self.slim_ready = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.base_channels >= 1,
            Contract,
            "base_channels must be positive"
        );
        ensure!(
            self.n_labels == N_LABELS,
            Contract,
            "n_labels must be {N_LABELS}, got {}",
            self.n_labels
        );
        ensure!(
            !self.inner_widths.is_empty(),
            Contract,
            "model needs at least one residual block"
        );
        for (b, &k) in self.inner_widths.iter().enumerate() {
            ensure!(
                (1..=self.base_channels).contains(&k),
                Contract,
                "block {b} inner width {k} outside [1, {}]",
                self.base_channels
            );
        }
        Ok(())
    }

    /// Closed-form trainable parameter count (running statistics excluded).
    pub fn count_params(&self) -> usize {
        let c = self.base_channels;
        let blocks: usize = self.inner_widths.iter().map(|&k| 9 * k * (c + c)).sum();
        let gammas: usize = if self.slim_ready {
            self.inner_widths.iter().sum()
        } else {
            0
        };
        9 * c + blocks + self.n_labels * c + self.n_labels + gammas
    }

    /// Multiply-accumulates for one `h × w` input: conv0 at full resolution,
    /// block convolutions at pooled resolution (padding taps included), plus the linear layer.
    pub fn count_multiplies(&self, h: usize, w: usize) -> usize {
        let c = self.base_channels;
        let pooled = (h / POOL.0) * (w / POOL.1);
        let blocks: usize = self
            .inner_widths
            .iter()
            .map(|&k| 2 * pooled * 9 * k * c)
            .sum();
        h * w * 9 * c + blocks + self.n_labels * c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock<T = f32> {
    /// `[k, C, 3, 3]`
    pub conv1: Tensor<T>,
    pub bn1: BatchNorm<T>,
    /// `[C, k, 3, 3]`
    pub conv2: Tensor<T>,
    pub bn2: BatchNorm<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T = f32> {
    pub spec: ModelSpec,
    pub labels: Vec<String>,
    pub mfcc: MfccConfig,
    /// `[C, 1, 3, 3]`
    pub conv0: Tensor<T>,
    pub blocks: Vec<ResBlock<T>>,
    /// `[12, C]`
    pub fc_weight: Tensor<T>,
    /// `[12]`
    pub fc_bias: Tensor<T>,
}

/// Raw logits and their softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward<T> {
    pub logits: Vec<T>,
    pub posteriors: Vec<T>,
}

pub fn default_labels() -> Vec<String> {
    crate::dataset::DEFAULT_KEYWORDS
        .iter()
        .map(|s| s.to_string())
        .chain([
            crate::dataset::UNKNOWN_LABEL.into(),
            crate::dataset::SILENCE_LABEL.into(),
        ])
        .collect()
}

/// Pads a label list to the model's 12 outputs with `_unused<i>` placeholders.
pub fn pad_labels(labels: &[String]) -> Vec<String> {
    let mut out = labels.to_vec();
    for i in labels.len()..N_LABELS {
        out.push(format!("_unused{i}"));
    }
    out
}

impl<T: Scalar> Model<T> {
    /// He-uniform convolutions, unit γ, identity running statistics, small uniform linear layer.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = spec.base_channels;
        let mut he = |shape: &[usize], fan_in: usize| {
            let bound = (6.0 / fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| T::of(rng.gen_range(-bound..bound) as f32 as f64))
        };
        let conv0 = he(&[c, 1, 3, 3], 9);
        let mut blocks = Vec::with_capacity(spec.inner_widths.len());
        for &k in &spec.inner_widths {
            blocks.push(ResBlock {
                conv1: he(&[k, c, 3, 3], 9 * c),
                bn1: BatchNorm::identity(k, spec.slim_ready),
                conv2: he(&[c, k, 3, 3], 9 * k),
                bn2: BatchNorm::identity(c, false),
            });
        }
        let bound = 1.0 / (c as f64).sqrt();
        let fc_weight = Tensor::from_fn(&[N_LABELS, c], |_| {
            T::of(rng.gen_range(-bound..bound) as f32 as f64)
        });
        let model = Self {
            labels: default_labels(),
            mfcc: MfccConfig::default(),
            conv0,
            blocks,
            fc_weight,
            fc_bias: Tensor::zeros(&[N_LABELS]),
            spec,
        };
        model.validate()?;
        Ok(model)
    }

    /// Every tensor zero; γ (when present) one.
    pub fn zeros(spec: ModelSpec) -> Result<Self> {
        let mut m = Self::init(spec, 0)?;
        for t in m.trainable_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let c = self.spec.base_channels;
        ensure!(
            self.labels.len() == N_LABELS,
            Contract,
            "model needs {N_LABELS} labels, has {}",
            self.labels.len()
        );
        ensure!(
            self.conv0.shape() == [c, 1, 3, 3],
            Contract,
            "conv0 shape {:?}",
            self.conv0.shape()
        );
        ensure!(
            self.blocks.len() == self.spec.inner_widths.len(),
            Contract,
            "spec declares {} blocks, model has {}",
            self.spec.inner_widths.len(),
            self.blocks.len()
        );
        for (b, (blk, &k)) in self.blocks.iter().zip(&self.spec.inner_widths).enumerate() {
            ensure!(
                blk.conv1.shape() == [k, c, 3, 3],
                Contract,
                "block {b} conv1 shape {:?}",
                blk.conv1.shape()
            );
            ensure!(
                blk.conv2.shape() == [c, k, 3, 3],
                Contract,
                "block {b} conv2 shape {:?}",
                blk.conv2.shape()
            );
            blk.bn1.validate()?;
            blk.bn2.validate()?;
            ensure!(
                blk.bn1.channels() == k && blk.bn2.channels() == c,
                Contract,
                "block {b} batchnorm widths"
            );
            ensure!(
                blk.bn1.gamma.is_some() == self.spec.slim_ready,
                Contract,
                "block {b}: γ presence must match slim_ready = {}",
                self.spec.slim_ready
            );
            ensure!(
                blk.bn2.gamma.is_none(),
                Contract,
                "block {b}: only bn1 carries γ"
            );
        }
        ensure!(
            self.fc_weight.shape() == [N_LABELS, c],
            Contract,
            "fc weight shape {:?}",
            self.fc_weight.shape()
        );
        ensure!(
            self.fc_bias.shape() == [N_LABELS],
            Contract,
            "fc bias shape {:?}",
            self.fc_bias.shape()
        );
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            labels: self.labels.clone(),
            mfcc: self.mfcc.clone(),
            conv0: self.conv0.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| ResBlock {
                    conv1: b.conv1.cast(),
                    bn1: b.bn1.cast(),
                    conv2: b.conv2.cast(),
                    bn2: b.bn2.cast(),
                })
                .collect(),
            fc_weight: self.fc_weight.cast(),
            fc_bias: self.fc_bias.cast(),
        }
    }

    pub fn count_params(&self) -> usize {
        self.spec.count_params()
    }

    pub fn count_multiplies(&self, h: usize, w: usize) -> usize {
        self.spec.count_multiplies(h, w)
    }

    /// Trainable tensors in canonical order: conv0, then per block conv1, γ (if any), conv2,
    /// then fc weight and bias. Gradient sets follow this order.
    pub fn trainable(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![&self.conv0];
        for b in &self.blocks {
            out.push(&b.conv1);
            if let Some(g) = &b.bn1.gamma {
                out.push(g);
            }
            out.push(&b.conv2);
        }
        out.push(&self.fc_weight);
        out.push(&self.fc_bias);
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.conv0];
        for b in &mut self.blocks {
            out.push(&mut b.conv1);
            if let Some(g) = &mut b.bn1.gamma {
                out.push(g);
            }
            out.push(&mut b.conv2);
        }
        out.push(&mut self.fc_weight);
        out.push(&mut self.fc_bias);
        out
    }

    /// Every stored tensor with its canonical name, in serialization order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("conv0.weight".to_string(), &self.conv0)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.conv1.weight"), &b.conv1));
            out.push((format!("blocks.{i}.bn1.running_mean"), &b.bn1.running_mean));
            out.push((format!("blocks.{i}.bn1.running_var"), &b.bn1.running_var));
            if let Some(g) = &b.bn1.gamma {
                out.push((format!("blocks.{i}.bn1.gamma"), g));
            }
            out.push((format!("blocks.{i}.conv2.weight"), &b.conv2));
            out.push((format!("blocks.{i}.bn2.running_mean"), &b.bn2.running_mean));
            out.push((format!("blocks.{i}.bn2.running_var"), &b.bn2.running_var));
        }
        out.push(("fc.weight".into(), &self.fc_weight));
        out.push(("fc.bias".into(), &self.fc_bias));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![("conv0.weight".to_string(), &mut self.conv0)];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("blocks.{i}.conv1.weight"), &mut b.conv1));
            out.push((
                format!("blocks.{i}.bn1.running_mean"),
                &mut b.bn1.running_mean,
            ));
            out.push((
                format!("blocks.{i}.bn1.running_var"),
                &mut b.bn1.running_var,
            ));
            if let Some(g) = &mut b.bn1.gamma {
                out.push((format!("blocks.{i}.bn1.gamma"), g));
            }
            out.push((format!("blocks.{i}.conv2.weight"), &mut b.conv2));
            out.push((
                format!("blocks.{i}.bn2.running_mean"),
                &mut b.bn2.running_mean,
            ));
            out.push((
                format!("blocks.{i}.bn2.running_var"),
                &mut b.bn2.running_var,
            ));
        }
        out.push(("fc.weight".into(), &mut self.fc_weight));
        out.push(("fc.bias".into(), &mut self.fc_bias));
        out
    }

    /// Inference forward pass over an `h × w` feature grid (frames × coefficients).
    pub fn forward_raw(&self, input: &[T], h: usize, w: usize) -> Result<Forward<T>> {
        ensure!(
            input.len() == h * w,
            Contract,
            "input holds {} values, expected {h}x{w}",
            input.len()
        );
        ensure!(
            h >= POOL.0 && w >= POOL.1,
            Contract,
            "input {h}x{w} smaller than the pooling kernel"
        );
        let c = self.spec.base_channels;
        let mut x = ops::conv3x3(
            &ops::pad_planes(input, 1, h, w),
            1,
            h,
            w,
            self.conv0.data(),
            c,
        );
        ops::relu_inplace(&mut x);
        let (mut x, ph, pw) = ops::avg_pool(&x, c, h, w, POOL.0, POOL.1);
        let plane = ph * pw;
        for (blk, &k) in self.blocks.iter().zip(&self.spec.inner_widths) {
            let mut t = ops::conv3x3(
                &ops::pad_planes(&x, c, ph, pw),
                c,
                ph,
                pw,
                blk.conv1.data(),
                k,
            );
            blk.bn1.apply_inplace(&mut t, plane);
            ops::relu_inplace(&mut t);
            let mut u = ops::conv3x3(
                &ops::pad_planes(&t, k, ph, pw),
                k,
                ph,
                pw,
                blk.conv2.data(),
                c,
            );
            blk.bn2.apply_inplace(&mut u, plane);
            for (xi, ui) in x.iter_mut().zip(&u) {
                *xi += *ui;
            }
            ops::relu_inplace(&mut x);
        }
        let inv = T::one() / T::of(plane as f64);
        let pooled: Vec<T> = x
            .chunks(plane)
            .map(|ch| ch.iter().copied().sum::<T>() * inv)
            .collect();
        let logits: Vec<T> = (0..N_LABELS)
            .map(|j| {
                let row = &self.fc_weight.data()[j * c..(j + 1) * c];
                row.iter().zip(&pooled).map(|(a, b)| *a * *b).sum::<T>() + self.fc_bias.data()[j]
            })
            .collect();
        let posteriors = ops::softmax(&logits);
        Ok(Forward { logits, posteriors })
    }

    pub fn forward(&self, f: &FeatureMatrix) -> Result<Forward<T>> {
        let input: Vec<T> = f.values.iter().map(|&v| T::of(v as f64)).collect();
        self.forward_raw(&input, f.frames, f.coeffs)
    }
}
