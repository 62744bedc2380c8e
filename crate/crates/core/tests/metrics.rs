//! Evaluation metrics on untrained models, where their values are known.

use tldpo::data::{generate_synthetic, SyntheticTaskConfig};
use tldpo::losses::LossConfig;
use tldpo::model::{snapshot_reference, ModelConfig, PolicyModel};
use tldpo::verification::{evaluate, hallucination_rate, masked_dependency_margin, preference_accuracy};

fn dataset(n: usize, seed: u64) -> Vec<tldpo::data::PreferenceExample> {
    generate_synthetic(&SyntheticTaskConfig {
        dataset_size: n,
        seed,
        ..SyntheticTaskConfig::default()
    })
    .unwrap()
}

#[test]
fn untrained_hallucination_rate_is_chance() {
    let task = SyntheticTaskConfig::default();
    let data = dataset(2000, 21);
    let m = PolicyModel::new(ModelConfig::default()).unwrap();
    let rate = hallucination_rate(&m, &task.vocab(), &data).unwrap();
    // Attributes are uniform, so a model that always reads the same one is
    // wrong with probability (A−1)/A; 4 binomial standard errors.
    let p = (task.attributes as f64 - 1.0) / task.attributes as f64;
    let se = (p * (1.0 - p) / data.len() as f64).sqrt();
    assert!((rate - p).abs() < 4.0 * se, "{rate}");
    assert!(rate >= 0.75);
}

#[test]
fn margin_is_near_zero_at_random_init() {
    let data = dataset(1000, 22);
    let m = PolicyModel::new(ModelConfig {
        seed: 5,
        ..ModelConfig::default()
    })
    .unwrap();
    let margin = masked_dependency_margin(&m, &data, 1.0, 9).unwrap();
    assert!(margin.abs() < 0.05, "{margin}");
    let randomized = PolicyModel::new_randomized(ModelConfig {
        seed: 5,
        ..ModelConfig::default()
    })
    .unwrap();
    let margin = masked_dependency_margin(&randomized, &data, 1.0, 9).unwrap();
    assert!(margin.abs() < 0.05, "{margin}");
}

#[test]
fn metrics_are_deterministic() {
    let data = dataset(64, 23);
    let task = SyntheticTaskConfig::default();
    let m = PolicyModel::new_randomized(ModelConfig {
        seed: 8,
        init_scale: 0.3,
        ..ModelConfig::default()
    })
    .unwrap();
    let r = snapshot_reference(&PolicyModel::new(ModelConfig::default()).unwrap());
    let a = evaluate(&m, &r, &task.vocab(), &data, &LossConfig::default(), 4).unwrap();
    let b = evaluate(&m, &r, &task.vocab(), &data, &LossConfig::default(), 4).unwrap();
    assert_eq!(a, b);
    let jsonl = a.to_jsonl().unwrap();
    assert_eq!(jsonl.lines().count(), 1);
    assert!(jsonl.contains("\"hallucination_rate\""));
    assert!(a.to_table().contains("preference accuracy"));
    let pairs: Vec<_> = data.iter().map(|e| e.target_pair().unwrap()).collect();
    assert_eq!(preference_accuracy(&m, &r, &pairs, 0.1).unwrap(), a.preference_accuracy);
}

#[test]
fn missing_ground_truth_is_an_input_error() {
    let mut data = dataset(2, 24);
    data[1].gt_attr = None;
    let m = PolicyModel::new(ModelConfig::default()).unwrap();
    let err = hallucination_rate(&m, &SyntheticTaskConfig::default().vocab(), &data).unwrap_err();
    assert!(err.to_string().contains(&data[1].id));
}
