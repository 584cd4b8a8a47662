//! Compacted model vs masked dense model: outputs must match and the
//! physical parameter count must equal the controller's accounting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use secateur_core::compact::compact;
use secateur_core::gates::{GateParams, GateSet, HardConcreteConfig};
use secateur_core::model::{GatedTransformer, HeadKind, ModelConfig};
use secateur_core::sparsity::{binarize_to_target, compacted_param_count, prunable_param_count};

fn configs() -> Vec<ModelConfig> {
    vec![
        ModelConfig { num_layers: 2, hidden_dim: 16, num_heads: 2, ffn_dim: 8, vocab_size: 40, max_seq_len: 6 },
        ModelConfig { num_layers: 4, hidden_dim: 32, num_heads: 4, ffn_dim: 24, vocab_size: 80, max_seq_len: 8 },
    ]
}

fn make_model(config: ModelConfig, seed: u64) -> GatedTransformer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = GatedTransformer::init(config, &mut rng).unwrap();
    m.add_head("t", HeadKind::Classification { num_classes: 4 }, &mut rng);
    m
}

/// Random but budget-respecting binary mask via the binarize machinery with
/// random gate parameters.
fn random_mask(config: &ModelConfig, target: f64, rng: &mut ChaCha8Rng) -> GateSet {
    let k = config.gate_layout().total();
    let gp = GateParams {
        log_alpha: (0..k).map(|_| rng.gen_range(-3.0..3.0)).collect(),
        config: HardConcreteConfig::default(),
    };
    binarize_to_target(&gp, config, target, None).unwrap().mask
}

#[test]
fn compact_forward_matches_masked_dense_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst: f64 = 0.0;
    let mut batches_checked = 0;
    for config in configs() {
        let m = make_model(config, 77);
        for &t in &[0.4, 0.9, 0.95, 0.98] {
            let mask = random_mask(&config, t, &mut rng);
            let cm = compact(&m, &mask).unwrap();
            for _ in 0..7 {
                let batch = rng.gen_range(1..4);
                let tokens: Vec<u32> = (0..batch * config.max_seq_len)
                    .map(|_| rng.gen_range(0..config.vocab_size as u32))
                    .collect();
                let dense = m.forward(&tokens, batch, Some(&mask), "t").unwrap();
                let small = cm.forward(&tokens, batch, "t").unwrap();
                let diff = dense
                    .iter()
                    .zip(&small)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max);
                worst = worst.max(diff);
                assert!(diff < 1e-8, "t={t}: diff {diff}");
                batches_checked += 1;
            }
        }
    }
    assert!(batches_checked >= 56);
    // the surgery is designed to be exact, not merely close
    assert!(worst < 1e-12, "worst diff {worst}");
}

#[test]
fn all_ones_mask_keeps_every_parameter() {
    for config in configs() {
        let m = make_model(config, 5);
        let ones = GateSet::all_ones(config.gate_layout());
        let cm = compact(&m, &ones).unwrap();
        assert_eq!(cm.prunable_param_count(), prunable_param_count(&config));
    }
}

#[test]
fn physical_count_matches_accounting_for_random_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for config in configs() {
        let m = make_model(config, 6);
        for &t in &[0.3, 0.6, 0.9, 0.97] {
            let mask = random_mask(&config, t, &mut rng);
            let cm = compact(&m, &mask).unwrap();
            let counted = cm.prunable_param_count();
            assert_eq!(counted, compacted_param_count(&mask, &config).unwrap());
            assert!(
                counted as f64 <= (1.0 - t) * prunable_param_count(&config) as f64,
                "budget exceeded at t={t}"
            );
        }
    }
}

#[test]
fn empty_layers_reduce_to_residual_passthrough() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let config = configs()[0];
    let m = make_model(config, 9);
    // drop everything in layer 0, keep layer 1 intact
    let mut mask = GateSet::all_ones(config.gate_layout());
    for j in 0..config.num_heads {
        mask.z_head[j] = 0.0;
    }
    for j in 0..config.ffn_dim {
        mask.z_fc[j] = 0.0;
    }
    mask.z_mha[0] = 0.0;
    mask.z_ffn[0] = 0.0;
    let cm = compact(&m, &mask).unwrap();
    assert!(cm.layers[0].attn.is_none() && cm.layers[0].ffn.is_none());

    let tokens: Vec<u32> = (0..config.max_seq_len).map(|_| rng.gen_range(0..40)).collect();
    let dense = m.forward(&tokens, 1, Some(&mask), "t").unwrap();
    let small = cm.forward(&tokens, 1, "t").unwrap();
    assert_eq!(dense, small);
}

#[test]
fn compaction_rejects_non_binary_masks() {
    let config = configs()[0];
    let m = make_model(config, 10);
    let mut mask = GateSet::all_ones(config.gate_layout());
    mask.z_head[0] = 0.5;
    assert!(compact(&m, &mask).is_err());
}
