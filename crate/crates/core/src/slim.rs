//! Network slimming: rank batch-norm scales globally, drop the smallest
//! channels of each block's bottleneck, and rebuild a narrower model.
//!
//! Only `bn1` of each residual block is prunable. Removing channel `j` of block
//! `b` removes output filter `j` of `conv1`, entry `j` of `bn1`, and input
//! channel `j` of `conv2`; the block's input/output width stays `C`, so the
//! identity skips are untouched.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, KwsError, Result};
use crate::nn::Model;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaEntry {
    pub layer: usize,
    pub channel: usize,
    pub magnitude: f32,
}

/// Kept channel indices per prunable layer, strictly increasing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneMask {
    pub kept: Vec<Vec<usize>>,
}

impl PruneMask {
    pub fn full(model: &Model) -> Self {
        Self {
            kept: model
                .spec
                .inner_widths
                .iter()
                .map(|&k| (0..k).collect())
                .collect(),
        }
    }

    pub fn kept_total(&self) -> usize {
        self.kept.iter().map(Vec::len).sum()
    }

    pub fn validate_for(&self, model: &Model) -> Result<()> {
        ensure!(
            self.kept.len() == model.blocks.len(),
            Contract,
            "mask covers {} layers, model has {} prunable layers",
            self.kept.len(),
            model.blocks.len()
        );
        for (b, (kept, &width)) in self.kept.iter().zip(&model.spec.inner_widths).enumerate() {
            ensure!(
                !kept.is_empty(),
                Contract,
                "mask keeps no channel of layer {b}"
            );
            ensure!(
                kept.windows(2).all(|p| p[0] < p[1]),
                Contract,
                "kept indices of layer {b} must be strictly increasing"
            );
            ensure!(
                kept.iter().all(|&j| j < width),
                Contract,
                "layer {b} keeps an index outside [0, {width})"
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlimConfig {
    /// Share of prunable channels to remove, in `[0, 1)`.
    pub fraction: f64,
    pub min_keep: usize,
}

impl SlimConfig {
    pub fn new(fraction: f64) -> Self {
        Self {
            fraction,
            min_keep: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            (0.0..1.0).contains(&self.fraction),
            Config,
            "prune fraction must be in [0, 1), got {}",
            self.fraction
        );
        ensure!(self.min_keep >= 1, Config, "min_keep must be at least 1");
        Ok(())
    }
}

/// `<arch>-40` style name for a slim variant.
pub fn variant_name(arch: &str, fraction: f64) -> String {
    format!("{arch}-{}", (fraction * 100.0).round() as i64)
}

/// |γ| for every channel of every prunable layer, ordered by (layer, channel).
pub fn collect_gammas(model: &Model) -> Result<Vec<GammaEntry>> {
    let mut out = Vec::new();
    for (layer, blk) in model.blocks.iter().enumerate() {
        let gamma = blk.bn1.gamma.as_ref().ok_or_else(|| {
            KwsError::Contract(
                "model has no batch-norm scales to rank; train it slim-ready first".into(),
            )
        })?;
        out.extend(
            gamma
                .data()
                .iter()
                .enumerate()
                .map(|(channel, g)| GammaEntry {
                    layer,
                    channel,
                    magnitude: g.abs(),
                }),
        );
    }
    Ok(out)
}

/// Removes the `round(fraction · N)` globally smallest |γ| (ties by layer, then channel),
/// skipping any candidate whose removal would leave its layer below `min_keep`.
pub fn select_channels(gammas: &[GammaEntry], cfg: &SlimConfig) -> Result<PruneMask> {
    cfg.validate()?;
    ensure!(!gammas.is_empty(), Contract, "no channels to rank");
    let n_layers = gammas.iter().map(|g| g.layer).max().unwrap() + 1;
    let mut width = vec![0usize; n_layers];
    for g in gammas {
        width[g.layer] += 1;
    }
    let mut ranked: Vec<&GammaEntry> = gammas.iter().collect();
    ranked.sort_by(|a, b| {
        a.magnitude
            .total_cmp(&b.magnitude)
            .then(a.layer.cmp(&b.layer))
            .then(a.channel.cmp(&b.channel))
    });
    let target = (cfg.fraction * gammas.len() as f64).round() as usize;
    let mut remaining = width.clone();
    let mut pruned = vec![Vec::new(); n_layers];
    let mut removed = 0;
    for g in ranked {
        if removed == target {
            break;
        }
        if remaining[g.layer] > cfg.min_keep {
            remaining[g.layer] -= 1;
            pruned[g.layer].push(g.channel);
            removed += 1;
        }
    }
    let kept = (0..n_layers)
        .map(|l| {
            let mut gone = pruned[l].clone();
            gone.sort_unstable();
            let mut keep: Vec<usize> = gammas
                .iter()
                .filter(|g| g.layer == l && gone.binary_search(&g.channel).is_err())
                .map(|g| g.channel)
                .collect();
            keep.sort_unstable();
            keep
        })
        .collect();
    Ok(PruneMask { kept })
}

/// Builds the narrower model; every unpruned tensor is copied verbatim.
pub fn prune_model(model: &Model, mask: &PruneMask) -> Result<Model> {
    mask.validate_for(model)?;
    let mut out = model.clone();
    for ((blk, kept), width) in out
        .blocks
        .iter_mut()
        .zip(&mask.kept)
        .zip(out.spec.inner_widths.iter_mut())
    {
        blk.conv1 = blk.conv1.select(0, kept)?;
        blk.bn1 = blk.bn1.select(kept)?;
        blk.conv2 = blk.conv2.select(1, kept)?;
        *width = kept.len();
    }
    out.validate()?;
    Ok(out)
}

/// collect → select → prune in one call.
pub fn slim(model: &Model, cfg: &SlimConfig) -> Result<(Model, PruneMask)> {
    let mask = select_channels(&collect_gammas(model)?, cfg)?;
    let pruned = prune_model(model, &mask)?;
    Ok((pruned, mask))
}
