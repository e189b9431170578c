//! The forward pass against a straight-line f64 reference written from the
//! layer definitions, sharing no code with the engine's kernels.
#![allow(clippy::needless_range_loop)]

use kws_core::nn::{Model, ModelSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;

type Planes = Vec<Vec<Vec<f64>>>;

fn conv(x: &Planes, w: &[f32], cout: usize) -> Planes {
    let (cin, h, wd) = (x.len(), x[0].len(), x[0][0].len());
    let mut y = vec![vec![vec![0.0; wd]; h]; cout];
    for o in 0..cout {
        for i in 0..h {
            for j in 0..wd {
                let mut s = 0.0;
                for c in 0..cin {
                    for di in 0..3 {
                        for dj in 0..3 {
                            let (ii, jj) =
                                (i as isize + di as isize - 1, j as isize + dj as isize - 1);
                            if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < wd {
                                s += w[((o * cin + c) * 3 + di) * 3 + dj] as f64
                                    * x[c][ii as usize][jj as usize];
                            }
                        }
                    }
                }
                y[o][i][j] = s;
            }
        }
    }
    y
}

fn bn(x: &mut Planes, mean: &[f32], var: &[f32], gamma: Option<&[f32]>) {
    for (c, plane) in x.iter_mut().enumerate() {
        let g = gamma.map_or(1.0, |g| g[c] as f64);
        for v in plane.iter_mut().flatten() {
            *v = g * (*v - mean[c] as f64) / (var[c] as f64 + EPS).sqrt();
        }
    }
}

fn relu(x: &mut Planes) {
    x.iter_mut()
        .flatten()
        .flatten()
        .for_each(|v| *v = v.max(0.0));
}

fn reference_logits(m: &Model, input: &[f32], h: usize, w: usize) -> Vec<f64> {
    let c = m.spec.base_channels;
    let x: Planes = vec![(0..h)
        .map(|i| (0..w).map(|j| input[i * w + j] as f64).collect())
        .collect()];
    let mut y = conv(&x, m.conv0.data(), c);
    relu(&mut y);
    let (ph, pw) = (h / 4, w / 3);
    let mut x: Planes = y
        .iter()
        .map(|p| {
            (0..ph)
                .map(|i| {
                    (0..pw)
                        .map(|j| {
                            let mut s = 0.0;
                            for a in 0..4 {
                                for b in 0..3 {
                                    s += p[4 * i + a][3 * j + b];
                                }
                            }
                            s / 12.0
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    for blk in &m.blocks {
        let k = blk.bn1.running_mean.data().len();
        let mut t = conv(&x, blk.conv1.data(), k);
        bn(
            &mut t,
            blk.bn1.running_mean.data(),
            blk.bn1.running_var.data(),
            blk.bn1.gamma.as_ref().map(|g| g.data()),
        );
        relu(&mut t);
        let mut u = conv(&t, blk.conv2.data(), c);
        bn(
            &mut u,
            blk.bn2.running_mean.data(),
            blk.bn2.running_var.data(),
            None,
        );
        for (xc, uc) in x.iter_mut().zip(&u) {
            for (xr, ur) in xc.iter_mut().zip(uc) {
                for (a, b) in xr.iter_mut().zip(ur) {
                    *a = (*a + b).max(0.0);
                }
            }
        }
    }
    let pooled: Vec<f64> = x
        .iter()
        .map(|p| p.iter().flatten().sum::<f64>() / (ph * pw) as f64)
        .collect();
    let fw = m.fc_weight.data();
    (0..fw.len() / c)
        .map(|o| {
            m.fc_bias.data()[o] as f64
                + (0..c)
                    .map(|i| fw[o * c + i] as f64 * pooled[i])
                    .sum::<f64>()
        })
        .collect()
}

fn randomized(spec: ModelSpec, seed: u64) -> Model {
    let mut m = Model::init(spec, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    for blk in &mut m.blocks {
        for bn in [&mut blk.bn1, &mut blk.bn2] {
            bn.running_mean
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.gen_range(-0.3..0.3));
            bn.running_var
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.gen_range(0.3..2.0));
        }
        if let Some(g) = &mut blk.bn1.gamma {
            g.data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.gen_range(-1.5..1.5));
        }
    }
    m.fc_bias
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = rng.gen_range(-0.5..0.5));
    m
}

fn check(m: &Model, h: usize, w: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..5 {
        let input: Vec<f32> = (0..h * w).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let got = m.forward_raw(&input, h, w).unwrap();
        let want = reference_logits(m, &input, h, w);
        for (g, r) in got.logits.iter().zip(&want) {
            assert!(
                (*g as f64 - r).abs() <= 1e-4 * r.abs().max(1.0),
                "{g} vs {r}"
            );
        }
        let z: f64 = want.iter().map(|v| v.exp()).sum();
        for (p, r) in got.posteriors.iter().zip(&want) {
            assert!((*p as f64 - r.exp() / z).abs() < 1e-5);
        }
    }
}

#[test]
fn tiny_model_matches_reference() {
    let mut spec = ModelSpec::new("tiny", 2).slim_ready(true);
    spec.inner_widths = vec![2, 1, 2];
    check(&randomized(spec, 3), 13, 8, 9);
}

#[test]
fn full_size_narrow_model_matches_reference() {
    check(&randomized(ModelSpec::res8_narrow(), 5), 101, 40, 10);
}

#[test]
fn pooling_drops_remainders() {
    // 15×11 pools to 3×3, discarding the last three rows and two columns
    let mut spec = ModelSpec::new("odd", 3);
    spec.inner_widths = vec![3, 3];
    check(&randomized(spec, 8), 15, 11, 12);
}
