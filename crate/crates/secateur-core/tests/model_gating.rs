//! Gate semantics of the transformer: gate-zero equals manual weight
//! surgery, both forward paths agree, and structural symmetries hold.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use secateur_core::gates::GateSet;
use secateur_core::graph::Graph;
use secateur_core::model::{GatedTransformer, HeadKind, ModelConfig};
use secateur_core::optim::Optimizer;
use secateur_core::tensor::Tensor;

fn small_configs() -> Vec<ModelConfig> {
    vec![
        ModelConfig { num_layers: 2, hidden_dim: 16, num_heads: 2, ffn_dim: 8, vocab_size: 30, max_seq_len: 6 },
        ModelConfig { num_layers: 3, hidden_dim: 24, num_heads: 3, ffn_dim: 10, vocab_size: 50, max_seq_len: 5 },
    ]
}

fn make_model(config: ModelConfig, seed: u64) -> GatedTransformer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = GatedTransformer::init(config, &mut rng).unwrap();
    m.add_head("t", HeadKind::Classification { num_classes: 3 }, &mut rng);
    m
}

fn rand_tokens(config: &ModelConfig, batch: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    (0..batch * config.max_seq_len)
        .map(|_| rng.gen_range(0..config.vocab_size as u32))
        .collect()
}

fn rand_gates(config: &ModelConfig, rng: &mut ChaCha8Rng) -> GateSet {
    let mut set = GateSet::all_ones(config.gate_layout());
    for z in set
        .z_mha
        .iter_mut()
        .chain(&mut set.z_ffn)
        .chain(&mut set.z_head)
        .chain(&mut set.z_fc)
        .chain(&mut set.z_hidden)
    {
        *z = rng.gen_range(0.0..1.0);
    }
    set
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Zero the parameter entries that realize a closed gate, through the
/// public parameter names only (independent of the forward code).
enum Surgery {
    Head { layer: usize, head: usize },
    FcUnit { layer: usize, unit: usize },
    MhaSublayer { layer: usize },
    FfnSublayer { layer: usize },
    HiddenColumn { col: usize },
}

fn apply_surgery(m: &mut GatedTransformer, s: &Surgery) {
    let cfg = m.config;
    let zero_all = |m: &mut GatedTransformer, name: &str| {
        let ix = m.params.by_name(name).unwrap_or_else(|| panic!("missing {name}"));
        for v in m.params.get_mut(ix).data_mut() {
            *v = 0.0;
        }
    };
    // zero one row (rows index the first dim) or one column of a matrix
    let zero_row = |m: &mut GatedTransformer, name: &str, row: usize| {
        let ix = m.params.by_name(name).unwrap();
        let cols = m.params.get(ix).shape()[1];
        for v in &mut m.params.get_mut(ix).data_mut()[row * cols..(row + 1) * cols] {
            *v = 0.0;
        }
    };
    let zero_col = |m: &mut GatedTransformer, name: &str, col: usize| {
        let ix = m.params.by_name(name).unwrap();
        let (rows, cols) = (m.params.get(ix).shape()[0], m.params.get(ix).shape()[1]);
        let data = m.params.get_mut(ix).data_mut();
        for r in 0..rows {
            data[r * cols + col] = 0.0;
        }
    };
    let zero_entry = |m: &mut GatedTransformer, name: &str, i: usize| {
        let ix = m.params.by_name(name).unwrap();
        m.params.get_mut(ix).data_mut()[i] = 0.0;
    };

    match *s {
        // a head's contribution dies with its value/output projections
        Surgery::Head { layer, head } => {
            zero_all(m, &format!("layer{layer}.head{head}.wv"));
            zero_all(m, &format!("layer{layer}.head{head}.bv"));
            zero_all(m, &format!("layer{layer}.head{head}.wo"));
        }
        Surgery::FcUnit { layer, unit } => {
            zero_col(m, &format!("layer{layer}.ffn.win"), unit);
            zero_entry(m, &format!("layer{layer}.ffn.bin"), unit);
            zero_row(m, &format!("layer{layer}.ffn.wout"), unit);
        }
        Surgery::MhaSublayer { layer } => {
            for head in 0..cfg.num_heads {
                apply_surgery(m, &Surgery::Head { layer, head });
            }
            zero_all(m, &format!("layer{layer}.attn.bo"));
        }
        Surgery::FfnSublayer { layer } => {
            zero_all(m, &format!("layer{layer}.ffn.wout"));
            zero_all(m, &format!("layer{layer}.ffn.bout"));
        }
        // read rows and write columns of every matrix touching the column
        Surgery::HiddenColumn { col } => {
            for layer in 0..cfg.num_layers {
                for head in 0..cfg.num_heads {
                    zero_row(m, &format!("layer{layer}.head{head}.wq"), col);
                    zero_row(m, &format!("layer{layer}.head{head}.wk"), col);
                    zero_row(m, &format!("layer{layer}.head{head}.wv"), col);
                    zero_col(m, &format!("layer{layer}.head{head}.wo"), col);
                }
                zero_entry(m, &format!("layer{layer}.attn.bo"), col);
                zero_row(m, &format!("layer{layer}.ffn.win"), col);
                zero_col(m, &format!("layer{layer}.ffn.wout"), col);
                zero_entry(m, &format!("layer{layer}.ffn.bout"), col);
            }
        }
    }
}

fn gate_for_surgery(config: &ModelConfig, s: &Surgery) -> GateSet {
    let mut g = GateSet::all_ones(config.gate_layout());
    match *s {
        Surgery::Head { layer, head } => g.z_head[layer * config.num_heads + head] = 0.0,
        Surgery::FcUnit { layer, unit } => g.z_fc[layer * config.ffn_dim + unit] = 0.0,
        Surgery::MhaSublayer { layer } => g.z_mha[layer] = 0.0,
        Surgery::FfnSublayer { layer } => g.z_ffn[layer] = 0.0,
        Surgery::HiddenColumn { col } => g.z_hidden[col] = 0.0,
    }
    g
}

#[test]
fn all_ones_gates_equal_ungated_model_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for config in small_configs() {
        let m = make_model(config, 7);
        let tokens = rand_tokens(&config, 3, &mut rng);
        let ones = GateSet::all_ones(config.gate_layout());
        let gated = m.forward(&tokens, 3, Some(&ones), "t").unwrap();
        let ungated = m.forward(&tokens, 3, None, "t").unwrap();
        assert_eq!(gated, ungated);
    }
}

#[test]
fn graph_forward_matches_inference_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for config in small_configs() {
        let m = make_model(config, 8);
        for _ in 0..5 {
            let tokens = rand_tokens(&config, 2, &mut rng);
            let gates = rand_gates(&config, &mut rng);
            let mut g = Graph::new();
            let mut binds = Vec::new();
            let gv = m.gate_constants(&mut g, &gates).unwrap();
            let out = m.forward_graph(&mut g, &mut binds, &tokens, 2, gv, "t").unwrap();
            let tape = g.value(out).into_data();
            let eval = m.forward(&tokens, 2, Some(&gates), "t").unwrap();
            assert_eq!(tape, eval, "tape and inference paths diverged");
        }
    }
}

#[test]
fn suppressing_all_sublayers_gives_residual_passthrough() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for config in small_configs() {
        let m = make_model(config, 9);
        let tokens = rand_tokens(&config, 2, &mut rng);
        let mut gates = GateSet::all_ones(config.gate_layout());
        for z in gates.z_mha.iter_mut().chain(&mut gates.z_ffn) {
            *z = 0.0;
        }
        let out = m.forward(&tokens, 2, Some(&gates), "t").unwrap();

        // reference: embeddings only, no encoder layers
        let empty_cfg = ModelConfig { num_layers: 0, ..config };
        // can't build a 0-layer model through init (config validation), so
        // compare against the encoder states: they must equal raw embeddings
        drop(empty_cfg);
        let states = m.encoder_states(&tokens, 2, Some(&gates)).unwrap();
        let d = config.hidden_dim;
        let tok_ix = m.params.by_name("emb.tok").unwrap();
        let pos_ix = m.params.by_name("emb.pos").unwrap();
        let tok = m.params.get(tok_ix).data();
        let pos = m.params.get(pos_ix).data();
        for (r, &t) in tokens.iter().enumerate() {
            let s = r % config.max_seq_len;
            for c in 0..d {
                let want = tok[t as usize * d + c] + pos[s * d + c];
                assert_eq!(states[r * d + c], want);
            }
        }
        assert_eq!(out.len(), 2 * 3);
    }
}

#[test]
fn gate_zero_matches_manual_weight_zeroing() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut cases = 0usize;
    for config in small_configs() {
        for trial in 0..8 {
            let surgeries = [
                Surgery::Head {
                    layer: rng.gen_range(0..config.num_layers),
                    head: rng.gen_range(0..config.num_heads),
                },
                Surgery::FcUnit {
                    layer: rng.gen_range(0..config.num_layers),
                    unit: rng.gen_range(0..config.ffn_dim),
                },
                Surgery::MhaSublayer { layer: rng.gen_range(0..config.num_layers) },
                Surgery::FfnSublayer { layer: rng.gen_range(0..config.num_layers) },
                Surgery::HiddenColumn { col: rng.gen_range(0..config.hidden_dim) },
            ];
            for s in surgeries {
                let m = make_model(config, 100 + trial);
                let tokens = rand_tokens(&config, 2, &mut rng);
                let gates = gate_for_surgery(&config, &s);
                let gated = m.forward(&tokens, 2, Some(&gates), "t").unwrap();

                let mut cut = m.clone();
                apply_surgery(&mut cut, &s);
                let ones = GateSet::all_ones(config.gate_layout());
                let zeroed = cut.forward(&tokens, 2, Some(&ones), "t").unwrap();

                let diff = max_abs_diff(&gated, &zeroed);
                assert!(diff < 1e-10, "surgery equivalence failed: diff {diff}");
                cases += 1;
            }
        }
    }
    assert!(cases >= 80);
}

#[test]
fn permuting_heads_with_their_gates_preserves_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for config in small_configs() {
        let m = make_model(config, 11);
        let tokens = rand_tokens(&config, 2, &mut rng);
        let mut gates = rand_gates(&config, &mut rng);
        let base = m.forward(&tokens, 2, Some(&gates), "t").unwrap();

        // rotate the heads of layer 0 by one, swapping weights and gates
        let mut permuted = m.clone();
        let nh = config.num_heads;
        let names = ["wq", "bq", "wk", "bk", "wv", "bv", "wo"];
        let originals: Vec<Vec<Tensor>> = (0..nh)
            .map(|j| {
                names
                    .iter()
                    .map(|n| {
                        let ix = m.params.by_name(&format!("layer0.head{j}.{n}")).unwrap();
                        m.params.get(ix).clone()
                    })
                    .collect()
            })
            .collect();
        for j in 0..nh {
            let src = (j + 1) % nh;
            for (n, name) in names.iter().enumerate() {
                let ix = permuted.params.by_name(&format!("layer0.head{j}.{name}")).unwrap();
                *permuted.params.get_mut(ix) = originals[src][n].clone();
            }
        }
        let old_gates = gates.z_head.clone();
        for j in 0..nh {
            gates.z_head[j] = old_gates[(j + 1) % nh];
        }
        let rotated = permuted.forward(&tokens, 2, Some(&gates), "t").unwrap();
        // summation order over heads changes, so allow rounding noise
        assert!(max_abs_diff(&base, &rotated) < 1e-12);
    }
}

#[test]
fn head_contribution_scales_linearly_in_its_gates() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let config = small_configs()[0];
    let m = make_model(config, 12);
    let tokens = rand_tokens(&config, 2, &mut rng);
    let last = config.num_layers - 1;

    let states = |z_mha: f64, z_head: f64| {
        let mut gates = GateSet::all_ones(config.gate_layout());
        gates.z_ffn[last] = 0.0; // nothing downstream of the head under test
        gates.z_mha[last] = z_mha;
        gates.z_head[last * config.num_heads] = z_head;
        m.encoder_states(&tokens, 2, Some(&gates)).unwrap()
    };

    // contribution of head (last, 0) at full gate
    let full: Vec<f64> = states(1.0, 1.0)
        .iter()
        .zip(states(1.0, 0.0))
        .map(|(a, b)| a - b)
        .collect();
    for (a, b) in [(0.5, 0.8), (0.25, 1.0), (1.0, 0.3)] {
        let scaled: Vec<f64> = states(a, b).iter().zip(states(a, 0.0)).map(|(x, y)| x - y).collect();
        for (s, f) in scaled.iter().zip(&full) {
            assert!((s - a * b * f).abs() < 1e-12, "expected {} got {s}", a * b * f);
        }
    }
}

#[test]
fn frozen_embeddings_stay_bit_identical_through_a_training_step() {
    let config = small_configs()[0];
    let mut m = make_model(config, 13);
    m.set_embeddings_trainable(false);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let tokens = rand_tokens(&config, 2, &mut rng);
    let labels = vec![0u32, 2];

    let emb_before: Vec<Tensor> = m
        .embedding_params()
        .iter()
        .map(|&ix| m.params.get(ix).clone())
        .collect();

    let gates = GateSet::all_ones(config.gate_layout());
    let mut g = Graph::new();
    let mut binds = Vec::new();
    let gv = m.gate_constants(&mut g, &gates).unwrap();
    let logits = m.forward_graph(&mut g, &mut binds, &tokens, 2, gv, "t").unwrap();
    let loss = g.cross_entropy_mean(logits, &labels).unwrap();
    g.backward(loss).unwrap();

    let mut grads = Vec::new();
    for (ix, var) in &binds {
        if let Some(grad) = g.grad(*var) {
            grads.push((*ix, grad.to_vec()));
        }
    }
    // no gradient reached the frozen tables
    for ix in m.embedding_params() {
        assert!(grads.iter().all(|(gix, _)| *gix != ix));
    }
    let mut opt = Optimizer::adam(1e-2).unwrap();
    opt.step(&mut m.params, &grads).unwrap();

    for (ix, before) in m.embedding_params().iter().zip(&emb_before) {
        assert_eq!(m.params.get(*ix).data(), before.data());
    }

    // and the trainable collection honors the flag
    let frozen_list = m.trainable_parameters(true);
    assert!(m.embedding_params().iter().all(|ix| !frozen_list.contains(ix)));
    let thawed_list = m.trainable_parameters(false);
    assert!(m.embedding_params().iter().all(|ix| thawed_list.contains(ix)));
}

#[test]
fn gate_layout_mismatch_rejected() {
    let configs = small_configs();
    let m = make_model(configs[0], 15);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let tokens = rand_tokens(&configs[0], 1, &mut rng);
    let wrong = GateSet::all_ones(configs[1].gate_layout());
    assert!(m.forward(&tokens, 1, Some(&wrong), "t").is_err());
}

#[test]
fn unknown_task_head_rejected() {
    let m = make_model(small_configs()[0], 17);
    let tokens = vec![0u32; small_configs()[0].max_seq_len];
    assert!(m.forward(&tokens, 1, None, "nope").is_err());
}
