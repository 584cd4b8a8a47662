//! Expected-sparsity accounting, the Lagrangian constraint, and mask
//! binarization at an exact parameter budget.
//!
//! The prunable set counts every parameter governed by a gate: head
//! projections and their biases, FFN matrices and biases, the sublayer
//! write biases and layernorms. Embeddings, the final layernorm and task
//! heads are excluded. Costs follow exact compaction surgery, so for binary
//! gates the expected sparsity coincides with parameter counting of the
//! physically extracted model:
//!
//! * head (i,j): `p_mha * p_head * (4*d*dh*hbar + 3*dh)` — read rows and
//!   write columns shrink with the retained-column fraction `hbar`, the
//!   head-internal biases do not;
//! * fc unit (i,j): `p_ffn * p_fc * (2*d*hbar + 1)`;
//! * per-sublayer overhead (write bias + layernorm): `p_gate * 3*d*hbar`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::gates::{
    deterministic_gate, prob_nonzero_on_graph, GateParams, GateSet, HardConcreteConfig,
};
use crate::graph::{Graph, Var};
use crate::model::ModelConfig;
use crate::optim::Optimizer;
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Sparsity constraint state: the target plus its learned multipliers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityTarget {
    /// Desired fraction of removed prunable weights, in [0, 1).
    pub target: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub multiplier_lr: f64,
}

impl SparsityTarget {
    pub fn new(target: f64, multiplier_lr: f64) -> Result<Self, CoreError> {
        if !(0.0..1.0).contains(&target) {
            return Err(CoreError::Invalid(format!("sparsity target must be in [0,1), got {target}")));
        }
        if !(multiplier_lr > 0.0) {
            return Err(CoreError::Invalid(format!("multiplier_lr must be positive, got {multiplier_lr}")));
        }
        Ok(SparsityTarget { target, lambda1: 0.0, lambda2: 0.0, multiplier_lr })
    }

    /// Linear warmup of the effective target over the first 20% of steps.
    pub fn warmed(&self, step: usize, total_steps: usize) -> f64 {
        let ramp = (0.2 * total_steps as f64).max(1.0);
        self.target * ((step as f64 / ramp).min(1.0))
    }

    /// Gradient-ascent step on the multipliers, making the constraint
    /// adversarial. `effective_target` allows the warmup schedule.
    pub fn update_multipliers(&mut self, s_hat: f64, effective_target: f64) {
        let gap = s_hat - effective_target;
        self.lambda1 += self.multiplier_lr * gap;
        self.lambda2 += self.multiplier_lr * gap * gap;
    }
}

/// Total prunable parameter count at all-gates-open.
pub fn prunable_param_count(config: &ModelConfig) -> u64 {
    let d = config.hidden_dim as u64;
    let nf = config.ffn_dim as u64;
    let n = config.num_layers as u64;
    n * (4 * d * d + 2 * d * nf + nf + 9 * d)
}

/// Exact per-unit costs for a given retained-column count.
#[derive(Debug, Clone, Copy)]
pub struct UnitCosts {
    pub head: u64,
    pub fc: u64,
    /// One sublayer's write bias + layernorm, paid when its coarse gate opens.
    pub sublayer_overhead: u64,
}

pub fn unit_costs(config: &ModelConfig, retained_columns: u64) -> UnitCosts {
    let dh = config.head_dim() as u64;
    UnitCosts {
        head: 4 * dh * retained_columns + 3 * dh,
        fc: 2 * retained_columns + 1,
        sublayer_overhead: 3 * retained_columns,
    }
}

/// Expected fraction of removed prunable weights given per-variable open
/// probabilities.
pub fn expected_sparsity(probs: &GateSet, config: &ModelConfig) -> Result<f64, CoreError> {
    if probs.layout != config.gate_layout() {
        return Err(CoreError::Shape(format!(
            "probability layout {:?} does not match model {:?}",
            probs.layout,
            config.gate_layout()
        )));
    }
    let d = config.hidden_dim as f64;
    let dh = config.head_dim() as f64;
    let hbar = probs.z_hidden.iter().sum::<f64>() / d;
    let head_cost = 4.0 * d * dh * hbar + 3.0 * dh;
    let fc_cost = 2.0 * d * hbar + 1.0;
    let overhead = 3.0 * d * hbar;

    let mut retained = 0.0;
    for i in 0..config.num_layers {
        let p_mha = probs.z_mha[i];
        let p_ffn = probs.z_ffn[i];
        let head_sum: f64 = (0..config.num_heads).map(|j| probs.head(i, j)).sum();
        let fc_sum: f64 = (0..config.ffn_dim).map(|j| probs.fc(i, j)).sum();
        retained += p_mha * (head_sum * head_cost + overhead);
        retained += p_ffn * (fc_sum * fc_cost + overhead);
    }
    Ok(1.0 - retained / prunable_param_count(config) as f64)
}

/// Gate probability vectors bound on a graph, one per family.
#[derive(Debug, Clone, Copy)]
pub struct ProbVars {
    pub p_mha: Var,
    pub p_ffn: Var,
    pub p_head: Var,
    pub p_fc: Var,
    pub p_hidden: Var,
}

/// Open-gate probabilities for a flat structural vector on the graph,
/// split into families per the model's layout.
pub fn prob_vars_on_graph(
    g: &mut Graph,
    log_alpha: Var,
    cfg: &HardConcreteConfig,
    config: &ModelConfig,
) -> Result<ProbVars, CoreError> {
    let l = config.gate_layout();
    let p = prob_nonzero_on_graph(g, log_alpha, cfg);
    Ok(ProbVars {
        p_mha: g.slice(p, l.mha_offset(), l.num_layers)?,
        p_ffn: g.slice(p, l.ffn_offset(), l.num_layers)?,
        p_head: g.slice(p, l.head_offset(), l.num_layers * l.num_heads)?,
        p_fc: g.slice(p, l.fc_offset(), l.num_layers * l.ffn_dim)?,
        p_hidden: g.slice(p, l.hidden_offset(), l.hidden_dim)?,
    })
}

/// Expected sparsity on the graph; differentiable wrt the gate parameters
/// feeding the probability vectors.
pub fn expected_sparsity_on_graph(
    g: &mut Graph,
    probs: ProbVars,
    config: &ModelConfig,
) -> Result<Var, CoreError> {
    let d = config.hidden_dim as f64;
    let dh = config.head_dim() as f64;
    let nh = config.num_heads;
    let nf = config.ffn_dim;

    let hbar = g.mean(probs.p_hidden);
    // scalar cost factors, all linear in hbar
    let head_cost = {
        let s = g.scale(hbar, 4.0 * d * dh);
        g.add_const(s, 3.0 * dh)
    };
    let fc_cost = {
        let s = g.scale(hbar, 2.0 * d);
        g.add_const(s, 1.0)
    };
    let overhead = g.scale(hbar, 3.0 * d);

    let mut retained: Option<Var> = None;
    let push = |g: &mut Graph, term: Var, acc: &mut Option<Var>| -> Result<(), CoreError> {
        *acc = Some(match *acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
        Ok(())
    };
    for i in 0..config.num_layers {
        let p_mha = g.slice(probs.p_mha, i, 1)?;
        let p_ffn = g.slice(probs.p_ffn, i, 1)?;
        let head_slice = g.slice(probs.p_head, i * nh, nh)?;
        let head_sum = g.sum(head_slice);
        let fc_slice = g.slice(probs.p_fc, i * nf, nf)?;
        let fc_sum = g.sum(fc_slice);

        let heads = g.mul(head_sum, head_cost)?;
        let heads = g.add(heads, overhead)?;
        let heads = g.mul(heads, p_mha)?;
        push(g, heads, &mut retained)?;

        let fcs = g.mul(fc_sum, fc_cost)?;
        let fcs = g.add(fcs, overhead)?;
        let fcs = g.mul(fcs, p_ffn)?;
        push(g, fcs, &mut retained)?;
    }
    let retained = retained.expect("at least one layer");
    let scaled = g.scale(retained, -1.0 / prunable_param_count(config) as f64);
    Ok(g.add_const(scaled, 1.0))
}

/// lambda1 * (s - t) + lambda2 * (s - t)^2
pub fn lagrangian_penalty(s_hat: f64, target: &SparsityTarget, effective_target: f64) -> f64 {
    let gap = s_hat - effective_target;
    target.lambda1 * gap + target.lambda2 * gap * gap
}

/// The same penalty on the graph, differentiable through `s_hat`.
pub fn lagrangian_penalty_on_graph(
    g: &mut Graph,
    s_hat: Var,
    target: &SparsityTarget,
    effective_target: f64,
) -> Result<Var, CoreError> {
    let gap = g.add_const(s_hat, -effective_target);
    let linear = g.scale(gap, target.lambda1);
    let sq = g.square(gap);
    let quad = g.scale(sq, target.lambda2);
    g.add(linear, quad)
}

/// Binary mask at an exact retained-parameter budget.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BinarizeOutcome {
    pub mask: GateSet,
    /// Retained prunable parameters of the corresponding compacted model.
    pub retained_params: u64,
    pub achieved_sparsity: f64,
    /// Set when the budget admitted no structural unit at all.
    pub empty: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Family {
    Head,
    Fc,
}

/// Rank structural units by deterministic gate value and greedily retain
/// them until one more would exceed the `(1 - t) * M` budget.
///
/// The residual-column gates binarize first, by thresholding the
/// deterministic gate at 1/2; their retained count fixes every unit cost.
/// Coarse gates are implied open the moment a child is retained (paying the
/// sublayer overhead) and closed otherwise. Ties rank heads before fc
/// units, then by (layer, unit) ascending. `ranks` overrides the
/// deterministic-gate ranking (used for random-mask ablations).
pub fn binarize_to_target(
    gate_params: &GateParams,
    config: &ModelConfig,
    target: f64,
    ranks: Option<&[f64]>,
) -> Result<BinarizeOutcome, CoreError> {
    let layout = config.gate_layout();
    if gate_params.len() != layout.total() {
        return Err(CoreError::Shape(format!(
            "gate params have {} entries, layout requires {}",
            gate_params.len(),
            layout.total()
        )));
    }
    if !(0.0..=1.0).contains(&target) {
        return Err(CoreError::Invalid(format!("target must be in [0,1], got {target}")));
    }
    let cfg = &gate_params.config;
    let det = |ix: usize| deterministic_gate(gate_params.log_alpha[ix], cfg);
    let rank_of = |ix: usize| match ranks {
        Some(r) => r[ix],
        None => det(ix),
    };

    let mut mask = GateSet {
        z_mha: vec![0.0; layout.num_layers],
        z_ffn: vec![0.0; layout.num_layers],
        z_head: vec![0.0; layout.num_layers * layout.num_heads],
        z_fc: vec![0.0; layout.num_layers * layout.ffn_dim],
        z_hidden: vec![0.0; layout.hidden_dim],
        layout,
    };

    // residual columns first: threshold, not budgeted
    let mut retained_cols = 0u64;
    for c in 0..layout.hidden_dim {
        if det(layout.hidden_offset() + c) >= 0.5 {
            mask.z_hidden[c] = 1.0;
            retained_cols += 1;
        }
    }
    let costs = unit_costs(config, retained_cols);
    let budget = (1.0 - target) * prunable_param_count(config) as f64;

    // (family, layer, unit, flat index)
    let mut units: Vec<(Family, usize, usize, usize)> = Vec::new();
    for layer in 0..layout.num_layers {
        for head in 0..layout.num_heads {
            units.push((Family::Head, layer, head, layout.head_index(layer, head)));
        }
    }
    for layer in 0..layout.num_layers {
        for unit in 0..layout.ffn_dim {
            units.push((Family::Fc, layer, unit, layout.fc_index(layer, unit)));
        }
    }
    units.sort_by(|a, b| {
        rank_of(b.3)
            .partial_cmp(&rank_of(a.3))
            .expect("finite ranks")
            .then_with(|| (matches!(a.0, Family::Fc), a.1, a.2).cmp(&(matches!(b.0, Family::Fc), b.1, b.2)))
    });

    let mut spent = 0u64;
    let mut any = false;
    if retained_cols > 0 {
        for (family, layer, unit, _flat) in units {
            let (unit_cost, coarse_open) = match family {
                Family::Head => (costs.head, mask.z_mha[layer] == 1.0),
                Family::Fc => (costs.fc, mask.z_ffn[layer] == 1.0),
            };
            let marginal = unit_cost + if coarse_open { 0 } else { costs.sublayer_overhead };
            if (spent + marginal) as f64 > budget {
                break;
            }
            spent += marginal;
            any = true;
            match family {
                Family::Head => {
                    mask.z_mha[layer] = 1.0;
                    mask.z_head[layer * layout.num_heads + unit] = 1.0;
                }
                Family::Fc => {
                    mask.z_ffn[layer] = 1.0;
                    mask.z_fc[layer * layout.ffn_dim + unit] = 1.0;
                }
            }
        }
    }
    if !any {
        // budget (or column threshold) admitted nothing: empty mask
        for z in mask.z_hidden.iter_mut() {
            *z = 0.0;
        }
    }
    let retained_params = if any { spent } else { 0 };
    Ok(BinarizeOutcome {
        mask,
        retained_params,
        achieved_sparsity: 1.0 - retained_params as f64 / prunable_param_count(config) as f64,
        empty: !any,
    })
}

/// Exact prunable-parameter count of the compacted model a normalized
/// binary mask describes.
pub fn compacted_param_count(mask: &GateSet, config: &ModelConfig) -> Result<u64, CoreError> {
    if !mask.is_binary() {
        return Err(CoreError::Invalid("parameter counting requires a binary mask".into()));
    }
    let mask = mask.normalized();
    let retained_cols = mask.z_hidden.iter().filter(|&&z| z == 1.0).count() as u64;
    let costs = unit_costs(config, retained_cols);
    if retained_cols == 0 {
        return Ok(0);
    }
    let mut total = 0u64;
    for i in 0..config.num_layers {
        if mask.z_mha[i] == 1.0 {
            total += costs.sublayer_overhead;
            for j in 0..config.num_heads {
                if mask.head(i, j) == 1.0 {
                    total += costs.head;
                }
            }
        }
        if mask.z_ffn[i] == 1.0 {
            total += costs.sublayer_overhead;
            for j in 0..config.ffn_dim {
                if mask.fc(i, j) == 1.0 {
                    total += costs.fc;
                }
            }
        }
    }
    Ok(total)
}

/// Result of driving gates to a target with no task loss.
#[derive(Debug, Clone)]
pub struct ClosedLoopOutcome {
    pub gate_params: GateParams,
    pub target: SparsityTarget,
    pub final_expected_sparsity: f64,
    pub steps_run: usize,
}

/// Standalone controller loop: optimize gate parameters against the
/// Lagrangian penalty alone. Serves as its own oracle for convergence and
/// produces realistic masks for benchmarks.
pub fn drive_gates_to_target<R: Rng>(
    config: &ModelConfig,
    target_sparsity: f64,
    steps: usize,
    structure_lr: f64,
    rng: &mut R,
) -> Result<ClosedLoopOutcome, CoreError> {
    let hc = HardConcreteConfig::default();
    let mut gate_params = GateParams::init(config.gate_layout().total(), hc, rng);
    let mut target = SparsityTarget::new(target_sparsity, structure_lr)?;
    let mut store = ParamSet::new();
    let ix = store.add(
        "gates",
        Tensor::from_vec(gate_params.log_alpha.clone()).with_requires_grad(true),
    );
    let mut opt = Optimizer::adam(structure_lr)?;
    let mut s_val = 0.0;
    let mut steps_run = 0;
    for step in 0..steps {
        let eff = target.warmed(step, steps);
        let mut g = Graph::new();
        let la = g.leaf(store.get(ix));
        let probs = prob_vars_on_graph(&mut g, la, &hc, config)?;
        let s_hat = expected_sparsity_on_graph(&mut g, probs, config)?;
        let penalty = lagrangian_penalty_on_graph(&mut g, s_hat, &target, eff)?;
        g.backward(penalty)?;
        s_val = g.item(s_hat);
        if let Some(grad) = g.grad(la) {
            opt.step(&mut store, &[(ix, grad.to_vec())])?;
        }
        target.update_multipliers(s_val, eff);
        steps_run = step + 1;
        // converged and warmup finished: nothing left to move
        if step > steps / 5 && (s_val - target.target).abs() < 5e-3 {
            break;
        }
    }
    gate_params.log_alpha = store.get(ix).data().to_vec();
    Ok(ClosedLoopOutcome {
        gate_params,
        target,
        final_expected_sparsity: s_val,
        steps_run,
    })
}

#[cfg(test)]
mod tests {
    extern crate std;

    use super::*;
    use crate::gates::GateSet;

    fn cfg() -> ModelConfig {
        ModelConfig { num_layers: 2, hidden_dim: 16, num_heads: 2, ffn_dim: 8, vocab_size: 30, max_seq_len: 6 }
    }

    #[test]
    fn full_model_has_zero_sparsity_and_empty_model_one() {
        let c = cfg();
        let ones = GateSet::all_ones(c.gate_layout());
        assert_eq!(expected_sparsity(&ones, &c).unwrap(), 0.0);
        let mut zeros = ones.clone();
        for z in zeros
            .z_mha
            .iter_mut()
            .chain(&mut zeros.z_ffn)
            .chain(&mut zeros.z_head)
            .chain(&mut zeros.z_fc)
            .chain(&mut zeros.z_hidden)
        {
            *z = 0.0;
        }
        assert_eq!(expected_sparsity(&zeros, &c).unwrap(), 1.0);
    }

    #[test]
    fn penalty_examples() {
        let t = SparsityTarget { target: 0.5, lambda1: 0.0, lambda2: 1.0, multiplier_lr: 1.0 };
        assert_eq!(lagrangian_penalty(0.5, &t, 0.5), 0.0);
        assert!((lagrangian_penalty(0.6, &t, 0.5) - 0.01).abs() < 1e-15);
        let t = SparsityTarget { target: 0.5, lambda1: 1.0, lambda2: 0.0, multiplier_lr: 1.0 };
        assert!((lagrangian_penalty(0.45, &t, 0.5) - (-0.05)).abs() < 1e-15);
    }

    #[test]
    fn multiplier_updates_follow_the_gap() {
        let mut t = SparsityTarget::new(0.9, 1.0).unwrap();
        t.update_multipliers(0.9, 0.9);
        assert_eq!((t.lambda1, t.lambda2), (0.0, 0.0));
        t.update_multipliers(0.85, 0.9); // too dense
        assert!((t.lambda1 + 0.05).abs() < 1e-15);
        assert!(t.lambda2 > 0.0);
    }

    #[test]
    fn graph_sparsity_matches_plain_computation() {
        let c = cfg();
        let hc = HardConcreteConfig::default();
        let k = c.gate_layout().total();
        let las: Vec<f64> = (0..k).map(|i| -2.0 + 4.0 * (i as f64 / k as f64)).collect();
        let gp = GateParams { log_alpha: las.clone(), config: hc };
        let probs = c.gate_layout().unflatten(&gp.probabilities()).unwrap();
        let plain = expected_sparsity(&probs, &c).unwrap();

        let mut g = Graph::new();
        let la = g.leaf(&Tensor::from_vec(las));
        let pv = prob_vars_on_graph(&mut g, la, &hc, &c).unwrap();
        let s = expected_sparsity_on_graph(&mut g, pv, &c).unwrap();
        assert!((g.item(s) - plain).abs() < 1e-12);
    }

    #[test]
    fn sparsity_monotone_in_every_probability() {
        let c = cfg();
        let layout = c.gate_layout();
        let mut rng = crate::rngutil::stream(41, "mono");
        let flat: Vec<f64> = (0..layout.total()).map(|_| rand::Rng::gen_range(&mut rng, 0.05..0.95)).collect();
        let base_set = layout.unflatten(&flat).unwrap();
        let base = expected_sparsity(&base_set, &c).unwrap();
        for i in 0..layout.total() {
            let mut bumped = flat.clone();
            bumped[i] = (bumped[i] + 0.1).min(1.0);
            let s = expected_sparsity(&layout.unflatten(&bumped).unwrap(), &c).unwrap();
            assert!(s <= base + 1e-15, "raising probability {i} raised sparsity");
        }
    }

    #[test]
    fn binarize_at_zero_target_retains_everything() {
        let c = cfg();
        let mut rng = crate::rngutil::stream(1, "binzero");
        let gp = GateParams::init(c.gate_layout().total(), HardConcreteConfig::default(), &mut rng);
        let out = binarize_to_target(&gp, &c, 0.0, None).unwrap();
        assert!(out.mask.z_head.iter().all(|&z| z == 1.0));
        assert!(out.mask.z_fc.iter().all(|&z| z == 1.0));
        assert_eq!(out.retained_params, prunable_param_count(&c));
        assert_eq!(out.achieved_sparsity, 0.0);
    }

    #[test]
    fn binarize_tie_break_is_lexicographic() {
        let c = cfg();
        let k = c.gate_layout().total();
        let gp = GateParams { log_alpha: vec![2.0; k], config: HardConcreteConfig::default() };
        let out = binarize_to_target(&gp, &c, 0.5, None).unwrap();
        // equal ranks: heads fill first, layer-major; the retained set is a
        // prefix of the enumeration order
        let flat_children: Vec<f64> = out
            .mask
            .z_head
            .iter()
            .chain(out.mask.z_fc.iter())
            .copied()
            .collect();
        let first_zero = flat_children.iter().position(|&z| z == 0.0).unwrap_or(flat_children.len());
        assert!(flat_children[first_zero..].iter().all(|&z| z == 0.0), "retained set is not a prefix");
        assert!((out.retained_params as f64) <= 0.5 * prunable_param_count(&c) as f64);
        // determinism
        let again = binarize_to_target(&gp, &c, 0.5, None).unwrap();
        assert_eq!(again.mask, out.mask);
    }

    #[test]
    fn binarized_mask_matches_exact_compacted_count() {
        let c = cfg();
        let mut rng = crate::rngutil::stream(7, "bincount");
        for t in [0.4, 0.7, 0.9, 0.95] {
            let mut gp = GateParams::init(c.gate_layout().total(), HardConcreteConfig::default(), &mut rng);
            for la in gp.log_alpha.iter_mut() {
                *la = rand::Rng::gen_range(&mut rng, -3.0..3.0);
            }
            let out = binarize_to_target(&gp, &c, t, None).unwrap();
            let counted = compacted_param_count(&out.mask, &c).unwrap();
            assert_eq!(counted, out.retained_params);
            let probs = out.mask.clone();
            let s = expected_sparsity(&probs, &c).unwrap();
            assert!((s - out.achieved_sparsity).abs() < 1e-12);
            assert!(out.retained_params as f64 <= (1.0 - t) * prunable_param_count(&c) as f64);
        }
    }

    #[test]
    fn impossible_budget_returns_empty_mask() {
        let c = cfg();
        let k = c.gate_layout().total();
        let gp = GateParams { log_alpha: vec![2.0; k], config: HardConcreteConfig::default() };
        // one head (plus overhead) already exceeds the budget at t ~ 1
        let out = binarize_to_target(&gp, &c, 0.9999, None).unwrap();
        assert!(out.empty);
        assert_eq!(out.retained_params, 0);
        assert!(out.mask.flatten().iter().all(|&z| z == 0.0));
    }
}
