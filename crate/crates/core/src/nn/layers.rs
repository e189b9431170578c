//! Tensor-level layer API over the slice kernels in [`super::ops`].

use super::ops;
use super::tensor::{Scalar, Tensor};
use crate::error::{ensure, Result};

pub const BN_EPS: f64 = 1e-5;

/// Inference-time batch normalization without a shift term.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T = f32> {
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    /// Per-channel scale; present only on slim-ready or pruned layers.
    pub gamma: Option<Tensor<T>>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn identity(channels: usize, with_gamma: bool) -> Self {
        Self {
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], T::one()),
            gamma: with_gamma.then(|| Tensor::filled(&[channels], T::one())),
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        ensure!(
            self.running_var.len() == c,
            Contract,
            "running_var has {} channels, expected {c}",
            self.running_var.len()
        );
        if let Some(g) = &self.gamma {
            ensure!(
                g.len() == c,
                Contract,
                "gamma has {} channels, expected {c}",
                g.len()
            );
        }
        ensure!(
            self.running_var.data().iter().all(|v| *v >= T::zero()),
            Contract,
            "running variance must be non-negative"
        );
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> BatchNorm<U> {
        BatchNorm {
            running_mean: self.running_mean.cast(),
            running_var: self.running_var.cast(),
            gamma: self.gamma.as_ref().map(Tensor::cast),
        }
    }

    pub fn select(&self, keep: &[usize]) -> Result<Self> {
        Ok(Self {
            running_mean: self.running_mean.select(0, keep)?,
            running_var: self.running_var.select(0, keep)?,
            gamma: self.gamma.as_ref().map(|g| g.select(0, keep)).transpose()?,
        })
    }

    pub(crate) fn apply_inplace(&self, x: &mut [T], plane: usize) {
        ops::batchnorm_infer_inplace(
            x,
            plane,
            self.running_mean.data(),
            self.running_var.data(),
            self.gamma.as_ref().map(|g| g.data()),
            T::of(BN_EPS),
        );
    }
}

fn chw(x: &Tensor<impl Scalar>) -> Result<(usize, usize, usize)> {
    ensure!(
        x.shape().len() == 3,
        Contract,
        "expected a [C, H, W] tensor, got shape {:?}",
        x.shape()
    );
    Ok((x.shape()[0], x.shape()[1], x.shape()[2]))
}

/// 3×3 cross-correlation, stride 1, zero padding 1, no bias.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>) -> Result<Tensor<T>> {
    let (cin, h, w) = chw(input)?;
    let ws = weight.shape();
    ensure!(
        ws.len() == 4 && ws[1] == cin && ws[2] == 3 && ws[3] == 3,
        Contract,
        "weight shape {ws:?} incompatible with input [{cin}, {h}, {w}]"
    );
    let cout = ws[0];
    let y = ops::conv3x3(
        &ops::pad_planes(input.data(), cin, h, w),
        cin,
        h,
        w,
        weight.data(),
        cout,
    );
    Tensor::new(vec![cout, h, w], y)
}

pub fn batchnorm_infer<T: Scalar>(x: &Tensor<T>, bn: &BatchNorm<T>) -> Result<Tensor<T>> {
    let (c, h, w) = chw(x)?;
    bn.validate()?;
    ensure!(
        bn.channels() == c,
        Contract,
        "batchnorm has {} channels, input has {c}",
        bn.channels()
    );
    let mut out = x.clone();
    bn.apply_inplace(out.data_mut(), h * w);
    Ok(out)
}

pub fn avg_pool<T: Scalar>(x: &Tensor<T>, kernel: (usize, usize)) -> Result<Tensor<T>> {
    let (c, h, w) = chw(x)?;
    let (kh, kw) = kernel;
    ensure!(kh >= 1 && kw >= 1, Contract, "pool kernel must be positive");
    ensure!(
        h >= kh && w >= kw,
        Contract,
        "input {h}x{w} smaller than pool kernel {kh}x{kw}"
    );
    let (y, oh, ow) = ops::avg_pool(x.data(), c, h, w, kh, kw);
    Tensor::new(vec![c, oh, ow], y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn identity_kernel() {
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let x = t(&[1, 4, 5], (0..20).map(|i| i as f64).collect());
        assert_eq!(conv2d(&x, &t(&[1, 1, 3, 3], k)).unwrap(), x);
    }

    #[test]
    fn ones_kernel_over_ones() {
        let y = conv2d(
            &t(&[1, 3, 3], vec![1.0; 9]),
            &t(&[1, 1, 3, 3], vec![1.0; 9]),
        )
        .unwrap();
        assert_eq!(y.data()[4], 9.0);
        for corner in [0, 2, 6, 8] {
            assert_eq!(y.data()[corner], 4.0);
        }
        assert_eq!(y.data()[1], 6.0);
    }

    #[test]
    fn expansion_conv_shape() {
        let x = Tensor::<f32>::zeros(&[1, 101, 40]);
        let y = conv2d(&x, &Tensor::zeros(&[19, 1, 3, 3])).unwrap();
        assert_eq!(y.shape(), &[19, 101, 40]);
        assert!(conv2d(&x, &Tensor::zeros(&[19, 2, 3, 3])).is_err());
    }

    #[test]
    fn batchnorm_cases() {
        let x = t(&[1, 1, 2], vec![2.0, -1.0]);
        let bn = BatchNorm::<f64>::identity(1, false);
        let y = batchnorm_infer(&x, &bn).unwrap();
        assert!((y.data()[0] - 2.0 / (1.0 + 1e-5f64).sqrt()).abs() < 1e-15);

        let bn = BatchNorm {
            running_mean: t(&[1], vec![1.0]),
            running_var: t(&[1], vec![1.0]),
            gamma: Some(t(&[1], vec![3.0])),
        };
        let y = batchnorm_infer(&t(&[1, 1, 1], vec![2.0]), &bn).unwrap();
        assert!((y.data()[0] - 2.999985).abs() < 1e-6);

        let bn = BatchNorm {
            gamma: Some(t(&[1], vec![0.0])),
            ..bn
        };
        let y = batchnorm_infer(&t(&[1, 1, 3], vec![5.0, -7.0, 1e6]), &bn).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));

        assert!(batchnorm_infer(
            &t(&[2, 1, 1], vec![0.0, 0.0]),
            &BatchNorm::identity(3, false)
        )
        .is_err());
    }

    #[test]
    fn pool_cases() {
        let y = avg_pool(&Tensor::<f32>::filled(&[2, 101, 40], 0.25), (4, 3)).unwrap();
        assert_eq!(y.shape(), &[2, 25, 13]);
        assert!(y.data().iter().all(|v| *v == 0.25));
        let y = avg_pool(&t(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]), (2, 2)).unwrap();
        assert_eq!(y.data(), &[2.5]);
        assert!(avg_pool(&t(&[1, 2, 2], vec![0.0; 4]), (4, 3)).is_err());
    }

    proptest! {
        #[test]
        fn conv_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut r = |n| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
            let x = t(&[2, 6, 5], r(60));
            let y = t(&[2, 6, 5], r(60));
            let w = t(&[3, 2, 3, 3], r(54));
            let mix = t(&[2, 6, 5], x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect());
            let lhs = conv2d(&mix, &w).unwrap();
            let (cx, cy) = (conv2d(&x, &w).unwrap(), conv2d(&y, &w).unwrap());
            for i in 0..lhs.len() {
                let rhs = a * cx.data()[i] + b * cy.data()[i];
                prop_assert!((lhs.data()[i] - rhs).abs() <= 1e-5 * rhs.abs().max(1.0));
            }
        }

        #[test]
        fn gamma_scaling_is_exact(g in -4.0f64..4.0, c in -4.0f64..4.0, v in prop::collection::vec(-5.0f64..5.0, 4)) {
            let x = t(&[2, 1, 2], v);
            let mk = |g1: f64| BatchNorm {
                running_mean: t(&[2], vec![0.3, -0.2]),
                running_var: t(&[2], vec![0.5, 2.0]),
                gamma: Some(t(&[2], vec![g1, 1.5])),
            };
            let base = batchnorm_infer(&x, &mk(g)).unwrap();
            let scaled = batchnorm_infer(&x, &mk(g * c)).unwrap();
            for i in 0..2 {
                let expect = base.data()[i] * c;
                prop_assert!((scaled.data()[i] - expect).abs() <= 1e-12 * expect.abs().max(1.0));
            }
            prop_assert_eq!(&scaled.data()[2..], &base.data()[2..]);
        }
    }
}
