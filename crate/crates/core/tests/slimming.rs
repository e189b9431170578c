use kws_core::nn::{Model, ModelSpec};
use kws_core::slim::{
    collect_gammas, prune_model, select_channels, slim, variant_name, PruneMask, SlimConfig,
};
use kws_core::KwsError;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_gammas(seed: u64) -> Model {
    let mut m = Model::init(ModelSpec::res8_narrow().slim_ready(true), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for blk in &mut m.blocks {
        let g = blk.bn1.gamma.as_mut().unwrap();
        g.data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-1.0..1.0));
    }
    m
}

#[test]
fn narrow_has_57_prunable_channels() {
    assert_eq!(collect_gammas(&random_gammas(0)).unwrap().len(), 57);
    let plain = Model::init(ModelSpec::res8_narrow(), 0).unwrap();
    assert!(matches!(collect_gammas(&plain), Err(KwsError::Contract(_))));
}

#[test]
fn uniform_width_four_budget() {
    let m = random_gammas(1);
    let mask = PruneMask {
        kept: vec![vec![0, 5, 9, 18]; 3],
    };
    let p = prune_model(&m, &mask).unwrap();
    assert_eq!(p.spec.inner_widths, [4, 4, 4]);
    assert_eq!(p.count_params(), 4_527);
    assert_eq!(p.spec.arch, "res8-narrow");
}

#[test]
fn full_mask_is_identity() {
    let m = random_gammas(2);
    assert_eq!(prune_model(&m, &PruneMask::full(&m)).unwrap(), m);
    assert_eq!(slim(&m, &SlimConfig::new(0.0)).unwrap().0, m);
}

#[test]
fn kept_tensors_are_copied_verbatim() {
    let m = random_gammas(3);
    let (p, mask) = slim(&m, &SlimConfig::new(0.5)).unwrap();
    for (b, kept) in mask.kept.iter().enumerate() {
        let (src, dst) = (&m.blocks[b], &p.blocks[b]);
        for (j, &k) in kept.iter().enumerate() {
            assert_eq!(
                dst.bn1.gamma.as_ref().unwrap().data()[j],
                src.bn1.gamma.as_ref().unwrap().data()[k]
            );
            assert_eq!(
                &dst.conv1.data()[j * 19 * 9..(j + 1) * 19 * 9],
                &src.conv1.data()[k * 19 * 9..(k + 1) * 19 * 9]
            );
        }
        assert_eq!(dst.bn2, src.bn2);
    }
    assert_eq!(p.conv0, m.conv0);
    assert_eq!(p.fc_weight, m.fc_weight);
}

#[test]
fn invalid_fraction_and_mask() {
    let m = random_gammas(4);
    for f in [1.0, -0.1, 1.5] {
        assert!(matches!(
            slim(&m, &SlimConfig::new(f)),
            Err(KwsError::Config(_))
        ));
    }
    let empty = PruneMask {
        kept: vec![vec![0], vec![], vec![1]],
    };
    assert!(matches!(
        prune_model(&m, &empty),
        Err(KwsError::Contract(_))
    ));
    assert_eq!(variant_name("res8", 0.4), "res8-40");
    assert_eq!(variant_name("res8-narrow", 0.8), "res8-narrow-80");
}

proptest! {
    #[test]
    fn larger_fractions_never_grow(seed in 0u64..1000, a in 0.0f64..0.95, b in 0.0f64..0.95) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let m = random_gammas(seed);
        let g = collect_gammas(&m).unwrap();
        let small = prune_model(&m, &select_channels(&g, &SlimConfig::new(lo)).unwrap()).unwrap();
        let large = prune_model(&m, &select_channels(&g, &SlimConfig::new(hi)).unwrap()).unwrap();
        prop_assert!(small.count_params() >= large.count_params());
        prop_assert!(small.count_multiplies(101, 40) >= large.count_multiplies(101, 40));
    }

    #[test]
    fn every_layer_keeps_at_least_min_keep(seed in 0u64..1000, f in 0.0f64..0.999, min_keep in 1usize..5) {
        let m = random_gammas(seed);
        let cfg = SlimConfig { fraction: f, min_keep };
        let mask = select_channels(&collect_gammas(&m).unwrap(), &cfg).unwrap();
        prop_assert!(mask.kept.iter().all(|k| k.len() >= min_keep));
        prop_assert!(mask.kept.iter().all(|k| k.windows(2).all(|w| w[0] < w[1])));
        // the removal count is exact unless the floor blocks it
        let target = (f * 57.0).round() as usize;
        prop_assert_eq!(57 - mask.kept_total(), target.min(57 - 3 * min_keep));
    }
}
