mod common;

use common::{finite_difference_grads, random_batch, tiny_model, worst_relative_error};
use kws_core::nn::{Model, ModelSpec};
use kws_core::train::{model_backward, GradientSet};

#[test]
fn analytic_gradients_match_finite_differences() {
    let model = tiny_model(17, vec![2, 1, 2]);
    let batch = random_batch(3, 13, 8, 18);
    let analytic = model_backward(&model, &batch).unwrap().grads;
    let numeric = finite_difference_grads(&model, &batch, 1e-5);
    let (worst, ok) = worst_relative_error(&analytic.tensors, &numeric, 1e-6, 1e-8);
    assert!(ok && worst < 1e-4, "worst relative error {worst:e}");
}

#[test]
fn gradients_without_gamma() {
    let mut spec = ModelSpec::new("tiny", 3);
    spec.inner_widths = vec![3, 2, 1];
    let model = Model::<f64>::init(spec, 5).unwrap();
    let batch = random_batch(2, 16, 9, 6);
    let analytic = model_backward(&model, &batch).unwrap().grads;
    assert_eq!(
        analytic.tensors.len(),
        GradientSet::zeros_like(&model).tensors.len()
    );
    let numeric = finite_difference_grads(&model, &batch, 1e-5);
    let (worst, ok) = worst_relative_error(&analytic.tensors, &numeric, 1e-6, 1e-8);
    assert!(ok && worst < 1e-4, "worst relative error {worst:e}");
}

#[test]
fn f32_and_f64_gradients_agree() {
    let model = tiny_model(3, vec![2, 2, 2]);
    let batch = random_batch(4, 13, 8, 4);
    let g64 = model_backward(&model, &batch).unwrap();
    let m32: Model<f32> = model.cast();
    let b32 = kws_core::train::Batch::new(
        batch
            .inputs
            .iter()
            .map(|x| x.iter().map(|&v| v as f32).collect())
            .collect(),
        batch.labels.clone(),
        13,
        8,
    )
    .unwrap();
    let g32 = model_backward(&m32, &b32).unwrap();
    assert!((g64.loss - g32.loss as f64).abs() < 1e-4);
    for (a, b) in g64.grads.tensors.iter().zip(&g32.grads.tensors) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - *y as f64).abs() < 1e-3 * x.abs().max(1.0));
        }
    }
}
