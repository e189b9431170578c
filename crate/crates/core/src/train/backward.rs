//! Train-mode forward pass with cached activations and exact reverse-mode gradients.
//!
//! Batch normalization here uses batch statistics over (sample, row, column).
//! Per-sample work runs on the rayon pool; every cross-sample reduction is
//! performed sequentially in sample order, so results do not depend on the
//! number of worker threads.

use rayon::prelude::*;

use crate::error::{ensure, Result};
use crate::nn::ops::{self, log_sum_exp};
use crate::nn::{Model, Scalar, Tensor, BN_EPS, N_LABELS, POOL};

/// Feature grids of identical shape with one label each.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub inputs: Vec<Vec<T>>,
    pub labels: Vec<usize>,
    pub h: usize,
    pub w: usize,
}

impl<T: Scalar> Batch<T> {
    pub fn new(inputs: Vec<Vec<T>>, labels: Vec<usize>, h: usize, w: usize) -> Result<Self> {
        ensure!(!inputs.is_empty(), Contract, "batch is empty");
        ensure!(
            inputs.len() == labels.len(),
            Contract,
            "{} inputs but {} labels",
            inputs.len(),
            labels.len()
        );
        ensure!(
            inputs.iter().all(|x| x.len() == h * w),
            Contract,
            "every input must hold {h}x{w} values"
        );
        ensure!(
            h >= POOL.0 && w >= POOL.1,
            Contract,
            "input {h}x{w} smaller than the pooling kernel"
        );
        for &l in &labels {
            ensure!(l < N_LABELS, Contract, "label {l} outside [0, {N_LABELS})");
        }
        Ok(Self {
            inputs,
            labels,
            h,
            w,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// One gradient tensor per trainable tensor, in [`Model::trainable`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet<T = f32> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> GradientSet<T> {
    pub fn zeros_like(model: &Model<T>) -> Self {
        Self {
            tensors: model
                .trainable()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data().iter().all(|v| v.is_finite()))
    }
}

/// Batch mean and biased variance of one batch-norm layer, used for running-stat updates.
#[derive(Debug, Clone, PartialEq)]
pub struct BnBatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Elements per channel that contributed.
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct BackwardOutput<T> {
    pub loss: T,
    pub grads: GradientSet<T>,
    /// `(bn1, bn2)` per block.
    pub bn_stats: Vec<(BnBatchStats<T>, BnBatchStats<T>)>,
    /// Predictions of the train-mode forward, for running accuracy.
    pub predictions: Vec<usize>,
}

/// `−ln softmax(logits)[label]` via log-sum-exp.
pub fn cross_entropy<T: Scalar>(logits: &[T], label: usize) -> Result<T> {
    ensure!(
        label < logits.len(),
        Contract,
        "label {label} outside [0, {})",
        logits.len()
    );
    Ok(log_sum_exp(logits) - logits[label])
}

struct BnCache<T> {
    xhat: Vec<Vec<T>>,
    inv_std: Vec<T>,
    stats: BnBatchStats<T>,
}

/// Train-mode BN over a batch of `[c, plane]` activations; returns normalized outputs (pre-γ) and cache.
fn bn_train_forward<T: Scalar>(x: &[Vec<T>], c: usize, plane: usize) -> BnCache<T> {
    let m = (x.len() * plane) as f64;
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for xs in x {
            s += xs[ch * plane..(ch + 1) * plane].iter().copied().sum::<T>();
        }
        let mu = s / T::of(m);
        let mut v = T::zero();
        for xs in x {
            for &e in &xs[ch * plane..(ch + 1) * plane] {
                v += (e - mu) * (e - mu);
            }
        }
        mean[ch] = mu;
        var[ch] = v / T::of(m);
    }
    let inv_std: Vec<T> = var
        .iter()
        .map(|&v| T::one() / (v + T::of(BN_EPS)).sqrt())
        .collect();
    let xhat = x
        .par_iter()
        .map(|xs| {
            let mut out = xs.clone();
            for (ch, chunk) in out.chunks_mut(plane).enumerate() {
                for e in chunk {
                    *e = (*e - mean[ch]) * inv_std[ch];
                }
            }
            out
        })
        .collect();
    BnCache {
        xhat,
        inv_std,
        stats: BnBatchStats {
            mean,
            var,
            count: m as usize,
        },
    }
}

/// Given `d xhat`, returns `d x` for train-mode normalization.
fn bn_train_backward<T: Scalar>(
    dxhat: &[Vec<T>],
    cache: &BnCache<T>,
    c: usize,
    plane: usize,
) -> Vec<Vec<T>> {
    let m = T::of((dxhat.len() * plane) as f64);
    let mut sum_d = vec![T::zero(); c];
    let mut sum_dx = vec![T::zero(); c];
    for (d, xh) in dxhat.iter().zip(&cache.xhat) {
        for ch in 0..c {
            let r = ch * plane..(ch + 1) * plane;
            for (a, b) in d[r.clone()].iter().zip(&xh[r]) {
                sum_d[ch] += *a;
                sum_dx[ch] += *a * *b;
            }
        }
    }
    dxhat
        .par_iter()
        .zip(&cache.xhat)
        .map(|(d, xh)| {
            let mut out = vec![T::zero(); c * plane];
            for ch in 0..c {
                let (md, mdx, is) = (sum_d[ch] / m, sum_dx[ch] / m, cache.inv_std[ch]);
                for i in ch * plane..(ch + 1) * plane {
                    out[i] = is * (d[i] - md - xh[i] * mdx);
                }
            }
            out
        })
        .collect()
}

struct BlockCache<T> {
    xp: Vec<Vec<T>>,
    bn1: BnCache<T>,
    /// ReLU(γ·x̂₁), padded for conv2.
    rp: Vec<Vec<T>>,
    bn2: BnCache<T>,
    /// Block output (after the final ReLU).
    out: Vec<Vec<T>>,
}

fn sum_in_order<T: Scalar>(parts: Vec<Vec<T>>) -> Vec<T> {
    let mut it = parts.into_iter();
    let mut acc = it.next().unwrap_or_default();
    for p in it {
        for (a, b) in acc.iter_mut().zip(&p) {
            *a += *b;
        }
    }
    acc
}

/// Mean cross-entropy over the batch and its exact gradient w.r.t. every trainable tensor.
pub fn model_backward<T: Scalar>(model: &Model<T>, batch: &Batch<T>) -> Result<BackwardOutput<T>> {
    model.validate()?;
    let n = batch.len();
    ensure!(n > 0, Contract, "batch is empty");
    let (h, w) = (batch.h, batch.w);
    let c = model.spec.base_channels;
    let (ph, pw) = (h / POOL.0, w / POOL.1);
    let plane = ph * pw;

    // stem
    let stem: Vec<(Vec<T>, Vec<T>, Vec<T>)> = batch
        .inputs
        .par_iter()
        .map(|x| {
            let xp = ops::pad_planes(x, 1, h, w);
            let z = ops::conv3x3(&xp, 1, h, w, model.conv0.data(), c);
            let mut a = z.clone();
            ops::relu_inplace(&mut a);
            let (p, _, _) = ops::avg_pool(&a, c, h, w, POOL.0, POOL.1);
            (xp, z, p)
        })
        .collect();
    let mut x: Vec<Vec<T>> = stem.iter().map(|s| s.2.clone()).collect();

    let mut caches = Vec::with_capacity(model.blocks.len());
    for (blk, &k) in model.blocks.iter().zip(&model.spec.inner_widths) {
        let xp: Vec<Vec<T>> = x
            .par_iter()
            .map(|xs| ops::pad_planes(xs, c, ph, pw))
            .collect();
        let u: Vec<Vec<T>> = xp
            .par_iter()
            .map(|p| ops::conv3x3(p, c, ph, pw, blk.conv1.data(), k))
            .collect();
        let bn1 = bn_train_forward(&u, k, plane);
        let gamma = blk.bn1.gamma.as_ref().map(|g| g.data().to_vec());
        let rp: Vec<Vec<T>> = bn1
            .xhat
            .par_iter()
            .map(|xh| {
                let mut r = xh.clone();
                if let Some(g) = &gamma {
                    for (ch, chunk) in r.chunks_mut(plane).enumerate() {
                        chunk.iter_mut().for_each(|e| *e *= g[ch]);
                    }
                }
                ops::relu_inplace(&mut r);
                ops::pad_planes(&r, k, ph, pw)
            })
            .collect();
        let s: Vec<Vec<T>> = rp
            .par_iter()
            .map(|p| ops::conv3x3(p, k, ph, pw, blk.conv2.data(), c))
            .collect();
        let bn2 = bn_train_forward(&s, c, plane);
        let out: Vec<Vec<T>> = x
            .par_iter()
            .zip(&bn2.xhat)
            .map(|(xs, sh)| {
                xs.iter()
                    .zip(sh)
                    .map(|(a, b)| (*a + *b).max(T::zero()))
                    .collect()
            })
            .collect();
        x = out.clone();
        caches.push(BlockCache {
            xp,
            bn1,
            rp,
            bn2,
            out,
        });
    }

    // head
    let inv_plane = T::one() / T::of(plane as f64);
    let feats: Vec<Vec<T>> = x
        .iter()
        .map(|xs| {
            xs.chunks(plane)
                .map(|ch| ch.iter().copied().sum::<T>() * inv_plane)
                .collect()
        })
        .collect();
    let fw = model.fc_weight.data();
    let fb = model.fc_bias.data();
    let inv_n = T::one() / T::of(n as f64);
    let mut loss = T::zero();
    let mut d_fw = vec![T::zero(); N_LABELS * c];
    let mut d_fb = vec![T::zero(); N_LABELS];
    let mut d_x: Vec<Vec<T>> = Vec::with_capacity(n);
    let mut predictions = Vec::with_capacity(n);
    for (f, &label) in feats.iter().zip(&batch.labels) {
        let logits: Vec<T> = (0..N_LABELS)
            .map(|j| {
                fw[j * c..(j + 1) * c]
                    .iter()
                    .zip(f)
                    .map(|(a, b)| *a * *b)
                    .sum::<T>()
                    + fb[j]
            })
            .collect();
        loss += cross_entropy(&logits, label)?;
        predictions.push(ops::argmax(&logits));
        let mut dl = ops::softmax(&logits);
        dl[label] -= T::one();
        dl.iter_mut().for_each(|v| *v *= inv_n);
        let mut df = vec![T::zero(); c];
        for j in 0..N_LABELS {
            d_fb[j] += dl[j];
            for ch in 0..c {
                d_fw[j * c + ch] += dl[j] * f[ch];
                df[ch] += dl[j] * fw[j * c + ch];
            }
        }
        d_x.push(
            df.iter()
                .flat_map(|&g| std::iter::repeat_n(g * inv_plane, plane))
                .collect(),
        );
    }
    loss *= inv_n;

    let mut block_grads = Vec::with_capacity(model.blocks.len());
    for ((blk, &k), cache) in model
        .blocks
        .iter()
        .zip(&model.spec.inner_widths)
        .zip(&caches)
        .rev()
    {
        // y = ReLU(x + BN2(s))
        let d_pre: Vec<Vec<T>> = d_x
            .iter()
            .zip(&cache.out)
            .map(|(d, y)| {
                d.iter()
                    .zip(y)
                    .map(|(g, v)| if *v > T::zero() { *g } else { T::zero() })
                    .collect()
            })
            .collect();
        let d_s = bn_train_backward(&d_pre, &cache.bn2, c, plane);
        let conv2: Vec<(Vec<T>, Vec<T>)> = cache
            .rp
            .par_iter()
            .zip(&d_s)
            .map(|(rp, ds)| {
                let (dr, dw) = ops::conv3x3_backward(rp, k, ph, pw, blk.conv2.data(), c, ds, true);
                (dr.unwrap(), dw)
            })
            .collect();
        let (d_r, dw2): (Vec<Vec<T>>, Vec<Vec<T>>) = conv2.into_iter().unzip();
        let dw2 = sum_in_order(dw2);

        let gamma = blk.bn1.gamma.as_ref().map(|g| g.data().to_vec());
        let mut d_gamma = vec![T::zero(); k];
        let mut d_xhat = Vec::with_capacity(n);
        for (s, (dr, xh)) in d_r.iter().zip(&cache.bn1.xhat).enumerate() {
            let rp = &cache.rp[s];
            let mut dx = vec![T::zero(); k * plane];
            for ch in 0..k {
                let g = gamma.as_ref().map_or(T::one(), |g| g[ch]);
                for y in 0..ph {
                    for xx in 0..pw {
                        let i = ch * plane + y * pw + xx;
                        // relu mask from the padded post-activation copy
                        let active =
                            rp[ch * (ph + 2) * (pw + 2) + (y + 1) * (pw + 2) + xx + 1] > T::zero();
                        if active {
                            d_gamma[ch] += dr[i] * xh[i];
                            dx[i] = dr[i] * g;
                        }
                    }
                }
            }
            d_xhat.push(dx);
        }
        let d_u = bn_train_backward(&d_xhat, &cache.bn1, k, plane);
        let conv1: Vec<(Vec<T>, Vec<T>)> = cache
            .xp
            .par_iter()
            .zip(&d_u)
            .map(|(xp, du)| {
                let (dx, dw) = ops::conv3x3_backward(xp, c, ph, pw, blk.conv1.data(), k, du, true);
                (dx.unwrap(), dw)
            })
            .collect();
        let (d_in, dw1): (Vec<Vec<T>>, Vec<Vec<T>>) = conv1.into_iter().unzip();
        let dw1 = sum_in_order(dw1);
        d_x = d_pre
            .iter()
            .zip(&d_in)
            .map(|(a, b)| a.iter().zip(b).map(|(p, q)| *p + *q).collect())
            .collect();
        block_grads.push((dw1, gamma.map(|_| d_gamma), dw2));
    }
    block_grads.reverse();

    let dw0: Vec<Vec<T>> = stem
        .par_iter()
        .zip(&d_x)
        .map(|((xp, z, _), dp)| {
            let mut dz = ops::avg_pool_backward(dp, c, h, w, POOL.0, POOL.1);
            for (g, v) in dz.iter_mut().zip(z) {
                if *v <= T::zero() {
                    *g = T::zero();
                }
            }
            ops::conv3x3_backward(xp, 1, h, w, model.conv0.data(), c, &dz, false).1
        })
        .collect();
    let dw0 = sum_in_order(dw0);

    let mut tensors = vec![Tensor::new(model.conv0.shape().to_vec(), dw0)?];
    for ((dw1, dg, dw2), blk) in block_grads.into_iter().zip(&model.blocks) {
        tensors.push(Tensor::new(blk.conv1.shape().to_vec(), dw1)?);
        if let Some(dg) = dg {
            tensors.push(Tensor::new(vec![dg.len()], dg)?);
        }
        tensors.push(Tensor::new(blk.conv2.shape().to_vec(), dw2)?);
    }
    tensors.push(Tensor::new(vec![N_LABELS, c], d_fw)?);
    tensors.push(Tensor::new(vec![N_LABELS], d_fb)?);

    let bn_stats = caches
        .into_iter()
        .map(|cache| (cache.bn1.stats, cache.bn2.stats))
        .collect();
    Ok(BackwardOutput {
        loss,
        grads: GradientSet { tensors },
        bn_stats,
        predictions,
    })
}

/// Mean loss only (train-mode batch statistics); the objective differentiated by [`model_backward`].
pub fn batch_loss<T: Scalar>(model: &Model<T>, batch: &Batch<T>) -> Result<T> {
    Ok(model_backward(model, batch)?.loss)
}

/// Moves running statistics toward the batch statistics:
/// `running ← (1 − m)·running + m·batch`, with the unbiased variance.
pub fn update_running_stats<T: Scalar>(
    model: &mut Model<T>,
    stats: &[(BnBatchStats<T>, BnBatchStats<T>)],
    bn_momentum: f64,
) {
    let m = T::of(bn_momentum);
    let keep = T::one() - m;
    for (blk, (s1, s2)) in model.blocks.iter_mut().zip(stats) {
        for (bn, s) in [(&mut blk.bn1, s1), (&mut blk.bn2, s2)] {
            let unbias = if s.count > 1 {
                T::of(s.count as f64 / (s.count - 1) as f64)
            } else {
                T::one()
            };
            for (r, v) in bn.running_mean.data_mut().iter_mut().zip(&s.mean) {
                *r = keep * *r + m * *v;
            }
            for (r, v) in bn.running_var.data_mut().iter_mut().zip(&s.var) {
                *r = keep * *r + m * *v * unbias;
            }
        }
    }
}

/// Adds `λ·sign(γ)` (sign 0 ↦ 0) to every γ gradient.
pub fn l1_subgrad_gammas<T: Scalar>(
    model: &Model<T>,
    grads: &mut GradientSet<T>,
    lambda_l1: f64,
) -> Result<()> {
    ensure!(
        model.spec.slim_ready,
        Contract,
        "the L1 penalty applies to batch-norm scales; this model has none (train it slim-ready)"
    );
    ensure!(lambda_l1 >= 0.0, Config, "lambda_l1 must be non-negative");
    let lambda = T::of(lambda_l1);
    let mut idx = 1;
    for blk in &model.blocks {
        idx += 1; // conv1
        let gamma = blk
            .bn1
            .gamma
            .as_ref()
            .expect("slim-ready model carries gamma");
        for (g, v) in grads.tensors[idx].data_mut().iter_mut().zip(gamma.data()) {
            if *v > T::zero() {
                *g += lambda;
            } else if *v < T::zero() {
                *g -= lambda;
            }
        }
        idx += 2; // gamma, conv2
    }
    Ok(())
}

/// Heavy-ball SGD: `v ← μ·v + g; p ← p − lr·v`.
pub fn sgd_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &GradientSet<T>,
    velocity: &mut GradientSet<T>,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    ensure!(
        params.len() == grads.tensors.len() && params.len() == velocity.tensors.len(),
        Contract,
        "parameter/gradient/velocity counts differ"
    );
    let (lr, mu) = (T::of(lr), T::of(momentum));
    for ((p, g), v) in params
        .iter_mut()
        .zip(&grads.tensors)
        .zip(&mut velocity.tensors)
    {
        ensure!(
            p.shape() == g.shape() && p.shape() == v.shape(),
            Contract,
            "shape mismatch: param {:?}, grad {:?}",
            p.shape(),
            g.shape()
        );
        for ((pi, gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = mu * *vi + *gi;
            *pi -= lr * *vi;
        }
    }
    Ok(())
}
