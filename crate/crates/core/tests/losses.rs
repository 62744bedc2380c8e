//! Loss values against closed forms, identities at initialization, margin
//! symmetries and contract errors.

use std::f64::consts::LN_2;

use proptest::prelude::*;
use tldpo::data::{generate_synthetic, PreferenceExample, SyntheticTaskConfig};
use tldpo::losses::{bt_probability, margin_u, reward_log_ratio, value_of, LossConfig, PreferencePair};
use tldpo::model::{snapshot_reference, Cell, GridImage, ModelConfig, PolicyModel, ReferenceModel};
use tldpo::targeting::noisy_mask_features;
use tldpo::Error;

/// A two-token model whose next-token distribution ignores its input:
/// the output projection is zero, so `π = softmax(bias)`.
fn constant_model(bias: [f64; 2]) -> PolicyModel {
    let cfg = ModelConfig {
        vocab_size: 2,
        object_classes: 1,
        attributes: 1,
        grid_size: 1,
        d_model: 2,
        layers: 1,
        max_len: 8,
        ..ModelConfig::default()
    };
    let mut m = PolicyModel::new(cfg).unwrap();
    let n = m.params().len();
    m.params_mut()[n - 1].data_mut().copy_from_slice(&bias);
    m
}

fn one_cell() -> GridImage {
    GridImage::filled(1, Cell { obj: 0, attr: 0 })
}

#[test]
fn rewards_match_closed_form() {
    // π_θ = (0.8, 0.2), π_ref = (0.5, 0.5), β = 0.1.
    let policy = constant_model([0.8f64.ln(), 0.2f64.ln()]);
    let reference = snapshot_reference(&constant_model([0.0, 0.0]));
    let r = reward_log_ratio(&policy, &reference, &one_cell(), &[0], &[0], &[1.0], 0.1).unwrap();
    assert!((r - 0.047_000_362_924_573_56).abs() < 1e-12, "{r}"); // 0.1·ln 1.6
    let pair = PreferencePair::new(one_cell(), vec![0], vec![0], vec![1]);
    let u = margin_u(&policy, &reference, &pair, 0.1).unwrap();
    assert!((u - 0.138_629_436_111_989_06).abs() < 1e-12, "{u}"); // 0.1·ln 4
    let loss = value_of(&policy, &reference, 0.1, |s, g| s.dpo_loss(g, std::slice::from_ref(&pair))).unwrap();
    let expect = (1.0 + (-u).exp()).ln();
    assert!((loss - expect).abs() < 1e-12);
    assert!((loss - 0.6262).abs() < 1e-4);
    assert!((bt_probability(u, 0.0) - 1.0 / (1.0 + (-u).exp())).abs() < 1e-15);
}

#[test]
fn weights_select_tokens() {
    let policy = constant_model([0.8f64.ln(), 0.2f64.ln()]);
    let reference = snapshot_reference(&constant_model([0.0, 0.0]));
    // Two tokens, only the second counts: 0.1·ln(0.4).
    let r = reward_log_ratio(&policy, &reference, &one_cell(), &[0], &[0, 1], &[0.0, 1.0], 0.1).unwrap();
    assert!((r - 0.1 * 0.4f64.ln()).abs() < 1e-12);
}

fn setup(seed: u64) -> (PolicyModel, ReferenceModel, Vec<PreferenceExample>) {
    let task = SyntheticTaskConfig {
        dataset_size: 6,
        seed,
        ..SyntheticTaskConfig::default()
    };
    let m = PolicyModel::new_randomized(ModelConfig {
        seed,
        init_scale: 0.3,
        ..ModelConfig::default()
    })
    .unwrap();
    let r = snapshot_reference(&m);
    (m, r, generate_synthetic(&task).unwrap())
}

#[test]
fn every_loss_is_ln2_at_reference() {
    let (m, r, data) = setup(1);
    let cfg = LossConfig::default();
    for ex in &data {
        let target = ex.target_pair().unwrap();
        let feats = m.features(&ex.image).unwrap();
        let masked = noisy_mask_features(&feats, ex.image.g, &ex.bbox, 1.0, 5).unwrap();
        let dpo = value_of(&m, &r, 0.1, |s, g| s.dpo_loss(g, &[ex.full_pair()])).unwrap();
        let lt = value_of(&m, &r, 0.1, |s, g| s.target_generation_loss(g, &target)).unwrap();
        let lc = value_of(&m, &r, 0.1, |s, g| {
            s.target_condition_loss(g, &feats, &masked, &target.question, &target.y_w)
        })
        .unwrap();
        let total = value_of(&m, &r, 0.1, |s, g| Ok(s.tl_dpo_loss(g, &target, &masked, &cfg)?.total)).unwrap();
        for v in [dpo, lt, lc] {
            assert!((v - LN_2).abs() < 1e-12, "{v}");
        }
        assert!((total - 2.0 * LN_2).abs() < 1e-12);
    }
}

#[test]
fn total_is_weighted_sum_of_terms() {
    let (m, _, data) = setup(2);
    let reference = snapshot_reference(
        &PolicyModel::new_randomized(ModelConfig { seed: 99, init_scale: 0.3, ..ModelConfig::default() }).unwrap(),
    );
    let cfg = LossConfig { w_t: 0.3, w_c: 2.5, ..LossConfig::default() };
    let ex = &data[0];
    let target = ex.target_pair().unwrap();
    let feats = m.features(&ex.image).unwrap();
    let masked = noisy_mask_features(&feats, ex.image.g, &ex.bbox, 1.0, 5).unwrap();
    let terms = value_of(&m, &reference, 0.1, |s, g| {
        let t = s.tl_dpo_loss(g, &target, &masked, &cfg)?;
        let a = g.scale(t.generation, cfg.w_t)?;
        let b = g.scale(t.condition, cfg.w_c)?;
        let sum = g.add(a, b)?;
        g.sub(t.total, sum)
    })
    .unwrap();
    assert!(terms.abs() < 1e-12);
}

#[test]
fn condition_loss_with_unmasked_image_is_ln2() {
    let (m, _, data) = setup(3);
    let reference = snapshot_reference(
        &PolicyModel::new_randomized(ModelConfig { seed: 7, init_scale: 0.3, ..ModelConfig::default() }).unwrap(),
    );
    let ex = &data[0];
    let feats = m.features(&ex.image).unwrap();
    let v = value_of(&m, &reference, 0.1, |s, g| s.target_condition_loss(g, &feats, &feats, &ex.question, &ex.y_r)).unwrap();
    assert!((v - LN_2).abs() < 1e-12);
}

#[test]
fn contract_errors() {
    let (m, r, data) = setup(4);
    let ex = &data[0];
    let target = ex.target_pair().unwrap();
    assert!(matches!(value_of(&m, &r, 0.1, |s, g| s.dpo_loss(g, std::slice::from_ref(&target))), Err(Error::Contract(_))));
    assert!(matches!(value_of(&m, &r, 0.1, |s, g| s.dpo_loss(g, &[])), Err(Error::Contract(_))));
    assert!(matches!(
        value_of(&m, &r, 0.1, |s, g| s.target_generation_loss(g, &ex.full_pair())),
        Err(Error::Contract(_))
    ));
    let mut zero = target.clone();
    zero.mask_w = Some(vec![0.0; zero.y_w.len()]);
    zero.mask_l = Some(vec![0.0; zero.y_l.len()]);
    assert!(matches!(
        value_of(&m, &r, 0.1, |s, g| s.target_generation_loss(g, &zero)),
        Err(Error::DegenerateTarget(_))
    ));
    assert!(matches!(value_of(&m, &r, 0.0, |s, g| s.dpo_loss(g, &[ex.full_pair()])), Err(Error::Config { .. })));
    let other = snapshot_reference(&PolicyModel::new(ModelConfig { d_model: 16, ..m.config().clone() }).unwrap());
    assert!(matches!(margin_u(&m, &other, &ex.full_pair(), 0.1), Err(Error::Contract(_))));
    let bad = LossConfig { w_t: 0.0, w_c: 0.0, ..LossConfig::default() };
    assert!(bad.validate().is_err());
}

fn shifted(m: &PolicyModel, c: f64) -> PolicyModel {
    let mut m = m.clone();
    let n = m.params().len();
    m.params_mut()[n - 1].data_mut().iter_mut().for_each(|b| *b += c);
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn margin_is_antisymmetric(seed in 0u64..500, idx in 0usize..6) {
        let (_, _, data) = setup(seed);
        let m = PolicyModel::new_randomized(ModelConfig { seed: seed + 1, init_scale: 0.3, ..ModelConfig::default() }).unwrap();
        let r = snapshot_reference(&PolicyModel::new_randomized(ModelConfig { seed: seed + 2, init_scale: 0.3, ..ModelConfig::default() }).unwrap());
        for pair in [data[idx].full_pair(), data[idx].target_pair().unwrap()] {
            let u = margin_u(&m, &r, &pair, 0.1).unwrap();
            let v = margin_u(&m, &r, &pair.swapped(), 0.1).unwrap();
            prop_assert_eq!(u, -v);
        }
    }

    #[test]
    fn margin_ignores_logit_shifts(seed in 0u64..500, c in -20.0f64..20.0, idx in 0usize..6) {
        let (_, _, data) = setup(seed);
        let m = PolicyModel::new_randomized(ModelConfig { seed: seed + 1, init_scale: 0.3, ..ModelConfig::default() }).unwrap();
        let r0 = PolicyModel::new_randomized(ModelConfig { seed: seed + 2, init_scale: 0.3, ..ModelConfig::default() }).unwrap();
        let pair = data[idx].target_pair().unwrap();
        let u = margin_u(&m, &snapshot_reference(&r0), &pair, 0.1).unwrap();
        let v = margin_u(&shifted(&m, c), &snapshot_reference(&shifted(&r0, -c)), &pair, 0.1).unwrap();
        prop_assert!((u - v).abs() < 1e-10, "{} vs {}", u, v);
    }

    #[test]
    fn margin_scales_linearly_in_beta(seed in 0u64..500, beta in 0.01f64..5.0) {
        let (_, _, data) = setup(seed);
        let m = PolicyModel::new_randomized(ModelConfig { seed: seed + 1, init_scale: 0.3, ..ModelConfig::default() }).unwrap();
        let r = snapshot_reference(&PolicyModel::new_randomized(ModelConfig { seed: seed + 2, init_scale: 0.3, ..ModelConfig::default() }).unwrap());
        let pair = data[0].target_pair().unwrap();
        let u1 = margin_u(&m, &r, &pair, 1.0).unwrap();
        let ub = margin_u(&m, &r, &pair, beta).unwrap();
        prop_assert!((ub - beta * u1).abs() < 1e-12 * (1.0 + u1.abs() * beta));
    }
}

#[test]
fn zero_area_box_gives_ln2_condition_loss() {
    let (_, _, data) = setup(5);
    let m = PolicyModel::new_randomized(ModelConfig { seed: 8, init_scale: 0.3, ..ModelConfig::default() }).unwrap();
    let r = snapshot_reference(&PolicyModel::new(ModelConfig::default()).unwrap());
    let ex = &data[0];
    let feats = m.features(&ex.image).unwrap();
    let empty = tldpo::model::BoundingBox::new(1, 1, 1, 3);
    let masked = noisy_mask_features(&feats, ex.image.g, &empty, 1.0, 3).unwrap();
    let v = value_of(&m, &r, 0.1, |s, g| s.target_condition_loss(g, &feats, &masked, &ex.question, &ex.y_r)).unwrap();
    assert_eq!(v, LN_2);
}

#[test]
fn condition_loss_matches_two_forward_passes() {
    let (_, _, data) = setup(6);
    let beta = 0.7;
    for seed in 0..4 {
        let m = PolicyModel::new_randomized(ModelConfig { seed, init_scale: 0.4, ..ModelConfig::default() }).unwrap();
        let r = snapshot_reference(
            &PolicyModel::new_randomized(ModelConfig { seed: seed + 50, init_scale: 0.4, ..ModelConfig::default() }).unwrap(),
        );
        for ex in &data {
            let feats = m.features(&ex.image).unwrap();
            let masked = noisy_mask_features(&feats, ex.image.g, &ex.bbox, 1.0, seed).unwrap();
            let total = |model: &PolicyModel, f| -> f64 {
                model.log_prob_features(f, &ex.question, &ex.y_r).unwrap().iter().sum()
            };
            let u = beta * (total(&m, &feats) - total(&r, &feats)) - beta * (total(&m, &masked) - total(&r, &masked));
            let loss = value_of(&m, &r, beta, |s, g| s.target_condition_loss(g, &feats, &masked, &ex.question, &ex.y_r)).unwrap();
            assert!((loss - (1.0 + (-u).exp()).ln()).abs() < 1e-12);
            assert_eq!(loss < LN_2, u > 0.0);
        }
    }
}

#[test]
fn target_scoped_condition_term_uses_the_label_mask() {
    use tldpo::losses::ConditionScope;
    let (_, _, data) = setup(7);
    let m = PolicyModel::new_randomized(ModelConfig { seed: 1, init_scale: 0.4, ..ModelConfig::default() }).unwrap();
    let r = snapshot_reference(&PolicyModel::new_randomized(ModelConfig { seed: 2, init_scale: 0.4, ..ModelConfig::default() }).unwrap());
    let cfg = LossConfig { condition_scope: ConditionScope::Target, w_t: 0.0, ..LossConfig::default() };
    for ex in &data {
        let target = ex.target_pair().unwrap();
        let feats = m.features(&ex.image).unwrap();
        let masked = noisy_mask_features(&feats, ex.image.g, &ex.bbox, 1.0, 2).unwrap();
        let w = target.mask_w.clone().unwrap();
        let score = |model: &PolicyModel, f| model.masked_sequence_log_prob_features(f, &target.question, &target.y_w, &w).unwrap();
        let u = 0.1 * (score(&m, &feats) - score(&r, &feats)) - 0.1 * (score(&m, &masked) - score(&r, &masked));
        let v = value_of(&m, &r, 0.1, |s, g| Ok(s.tl_dpo_loss(g, &target, &masked, &cfg)?.total)).unwrap();
        assert!((v - (1.0 + (-u).exp()).ln()).abs() < 1e-12);
    }
    assert!(toml::from_str::<LossConfig>("condition_scope = \"target\"").is_ok());
}
