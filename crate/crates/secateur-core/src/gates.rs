//! Hard-concrete gate distribution and the structural-variable layout.
//!
//! Each structural variable is parameterized by one unconstrained
//! `log_alpha`. Sampling stretches a binary-concrete draw over
//! `[stretch_lo, stretch_hi]` and clamps to `[0, 1]`, which puts point
//! masses at exactly 0 and 1 while staying differentiable in between.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::graph::{Graph, Var};
use crate::kernels::sigmoid;
use crate::rngutil;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HardConcreteConfig {
    /// Temperature of the underlying concrete distribution.
    pub beta: f64,
    /// Lower stretch bound, strictly negative.
    pub stretch_lo: f64,
    /// Upper stretch bound, strictly greater than one.
    pub stretch_hi: f64,
}

impl Default for HardConcreteConfig {
    fn default() -> Self {
        HardConcreteConfig { beta: 2.0 / 3.0, stretch_lo: -0.1, stretch_hi: 1.1 }
    }
}

impl HardConcreteConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        if !(self.beta > 0.0) {
            return Err(CoreError::Invalid(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.stretch_lo < 0.0 && self.stretch_hi > 1.0) {
            return Err(CoreError::Invalid(format!(
                "stretch interval must satisfy lo < 0 < 1 < hi, got [{}, {}]",
                self.stretch_lo, self.stretch_hi
            )));
        }
        Ok(())
    }

    fn span(&self) -> f64 {
        self.stretch_hi - self.stretch_lo
    }

    /// The constant `beta * ln(-lo/hi)` in the open-gate probability.
    fn prob_shift(&self) -> f64 {
        self.beta * libm::log(-self.stretch_lo / self.stretch_hi)
    }
}

/// One stochastic gate draw. `u` must lie strictly inside (0, 1).
pub fn sample_gate(log_alpha: f64, u: f64, cfg: &HardConcreteConfig) -> Result<f64, CoreError> {
    if !(u > 0.0 && u < 1.0) {
        return Err(CoreError::Invalid(format!("uniform draw must be in (0,1), got {u}")));
    }
    let s = sigmoid((libm::log(u) - libm::log(1.0 - u) + log_alpha) / cfg.beta);
    Ok((s * cfg.span() + cfg.stretch_lo).clamp(0.0, 1.0))
}

/// Closed-form probability that a sampled gate is strictly positive.
pub fn prob_nonzero(log_alpha: f64, cfg: &HardConcreteConfig) -> f64 {
    sigmoid(log_alpha - cfg.prob_shift())
}

/// Deterministic test-time gate value (the u = 1/2 path).
pub fn deterministic_gate(log_alpha: f64, cfg: &HardConcreteConfig) -> f64 {
    (sigmoid(log_alpha) * cfg.span() + cfg.stretch_lo).clamp(0.0, 1.0)
}

/// Sample a vector of gates on the graph: differentiable wrt `log_alpha`
/// wherever the clamp is inactive. `u` entries must be strictly in (0, 1).
pub fn sample_gates_on_graph(
    g: &mut Graph,
    log_alpha: Var,
    u: &[f64],
    cfg: &HardConcreteConfig,
) -> Result<Var, CoreError> {
    if g.shape(log_alpha).iter().product::<usize>() != u.len() {
        return Err(CoreError::Shape(format!(
            "gate params {:?} vs {} uniform draws",
            g.shape(log_alpha),
            u.len()
        )));
    }
    let mut logits = Vec::with_capacity(u.len());
    for &ui in u {
        if !(ui > 0.0 && ui < 1.0) {
            return Err(CoreError::Invalid(format!("uniform draw must be in (0,1), got {ui}")));
        }
        logits.push(libm::log(ui) - libm::log(1.0 - ui));
    }
    let noise = g.constant(&[u.len()], &logits);
    let shifted = g.add(log_alpha, noise)?;
    let scaled = g.scale(shifted, 1.0 / cfg.beta);
    let s = g.sigmoid(scaled);
    let stretched = g.scale(s, cfg.span());
    let moved = g.add_const(stretched, cfg.stretch_lo);
    Ok(g.clamp01(moved))
}

/// Open-gate probabilities for a vector of gate parameters, on the graph.
pub fn prob_nonzero_on_graph(g: &mut Graph, log_alpha: Var, cfg: &HardConcreteConfig) -> Var {
    let shifted = g.add_const(log_alpha, -cfg.prob_shift());
    g.sigmoid(shifted)
}

/// Unconstrained parameters for every structural variable of one mask set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    pub log_alpha: Vec<f64>,
    pub config: HardConcreteConfig,
}

impl GateParams {
    /// All gates start near open: log_alpha ~ Normal(2.0, 0.01).
    pub fn init<R: Rng>(count: usize, cfg: HardConcreteConfig, rng: &mut R) -> Self {
        let log_alpha = (0..count)
            .map(|_| 2.0 + 0.01 * rngutil::standard_normal(rng))
            .collect();
        GateParams { log_alpha, config: cfg }
    }

    pub fn len(&self) -> usize {
        self.log_alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_alpha.is_empty()
    }

    pub fn deterministic(&self) -> Vec<f64> {
        self.log_alpha.iter().map(|&la| deterministic_gate(la, &self.config)).collect()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.log_alpha.iter().map(|&la| prob_nonzero(la, &self.config)).collect()
    }
}

/// Where each gate family lives inside the flat K-long structural vector.
///
/// Order: `z_mha[N] | z_ffn[N] | z_head[N*n_h] | z_fc[N*n_f] | z_hidden[d]`,
/// all layer-major. Every consumer of flat gate vectors (sampling, the
/// sparsity controller, coupling deltas, mask agreement) uses this layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateLayout {
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub hidden_dim: usize,
}

impl GateLayout {
    pub fn total(&self) -> usize {
        2 * self.num_layers
            + self.num_layers * self.num_heads
            + self.num_layers * self.ffn_dim
            + self.hidden_dim
    }

    pub fn mha_offset(&self) -> usize {
        0
    }

    pub fn ffn_offset(&self) -> usize {
        self.num_layers
    }

    pub fn head_offset(&self) -> usize {
        2 * self.num_layers
    }

    pub fn fc_offset(&self) -> usize {
        2 * self.num_layers + self.num_layers * self.num_heads
    }

    pub fn hidden_offset(&self) -> usize {
        self.fc_offset() + self.num_layers * self.ffn_dim
    }

    pub fn head_index(&self, layer: usize, head: usize) -> usize {
        self.head_offset() + layer * self.num_heads + head
    }

    pub fn fc_index(&self, layer: usize, unit: usize) -> usize {
        self.fc_offset() + layer * self.ffn_dim + unit
    }

    /// Split a flat K-long vector into a structured [`GateSet`].
    pub fn unflatten(&self, flat: &[f64]) -> Result<GateSet, CoreError> {
        if flat.len() != self.total() {
            return Err(CoreError::Shape(format!(
                "gate vector has {} entries, layout requires {}",
                flat.len(),
                self.total()
            )));
        }
        Ok(GateSet {
            z_mha: flat[self.mha_offset()..self.ffn_offset()].to_vec(),
            z_ffn: flat[self.ffn_offset()..self.head_offset()].to_vec(),
            z_head: flat[self.head_offset()..self.fc_offset()].to_vec(),
            z_fc: flat[self.fc_offset()..self.hidden_offset()].to_vec(),
            z_hidden: flat[self.hidden_offset()..].to_vec(),
            layout: *self,
        })
    }
}

/// Realized gate values for all five families of one model configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateSet {
    /// Per-layer coarse attention gates, length N.
    pub z_mha: Vec<f64>,
    /// Per-layer coarse FFN gates, length N.
    pub z_ffn: Vec<f64>,
    /// Per-head gates, layer-major, length N * n_h.
    pub z_head: Vec<f64>,
    /// Per-FFN-unit gates, layer-major, length N * n_f.
    pub z_fc: Vec<f64>,
    /// Residual-column gates shared by all layers, length d.
    pub z_hidden: Vec<f64>,
    pub layout: GateLayout,
}

impl GateSet {
    pub fn all_ones(layout: GateLayout) -> Self {
        GateSet {
            z_mha: vec![1.0; layout.num_layers],
            z_ffn: vec![1.0; layout.num_layers],
            z_head: vec![1.0; layout.num_layers * layout.num_heads],
            z_fc: vec![1.0; layout.num_layers * layout.ffn_dim],
            z_hidden: vec![1.0; layout.hidden_dim],
            layout,
        }
    }

    pub fn head(&self, layer: usize, head: usize) -> f64 {
        self.z_head[layer * self.layout.num_heads + head]
    }

    pub fn fc(&self, layer: usize, unit: usize) -> f64 {
        self.z_fc[layer * self.layout.ffn_dim + unit]
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.layout.total());
        flat.extend_from_slice(&self.z_mha);
        flat.extend_from_slice(&self.z_ffn);
        flat.extend_from_slice(&self.z_head);
        flat.extend_from_slice(&self.z_fc);
        flat.extend_from_slice(&self.z_hidden);
        flat
    }

    pub fn is_binary(&self) -> bool {
        self.flatten().iter().all(|&z| z == 0.0 || z == 1.0)
    }

    /// Coarse gates carry no structure of their own: a binary mask where a
    /// coarse gate is open with no open children is rewritten as closed, so
    /// masks have one canonical form before compaction or reporting.
    pub fn normalized(&self) -> GateSet {
        let mut out = self.clone();
        for layer in 0..self.layout.num_layers {
            let heads = &self.z_head
                [layer * self.layout.num_heads..(layer + 1) * self.layout.num_heads];
            if heads.iter().all(|&z| z == 0.0) {
                out.z_mha[layer] = 0.0;
            }
            let units =
                &self.z_fc[layer * self.layout.ffn_dim..(layer + 1) * self.layout.ffn_dim];
            if units.iter().all(|&z| z == 0.0) {
                out.z_ffn[layer] = 0.0;
            }
        }
        out
    }

    /// Fraction of structural variables on which two masks agree exactly.
    pub fn agreement(&self, other: &GateSet) -> f64 {
        let a = self.flatten();
        let b = other.flatten();
        debug_assert_eq!(a.len(), b.len());
        let same = a.iter().zip(&b).filter(|(x, y)| x == y).count();
        same as f64 / a.len() as f64
    }
}

/// Draw one uniform vector for a whole gate family set.
pub fn draw_uniforms<R: Rng>(count: usize, rng: &mut R) -> Vec<f64> {
    (0..count).map(|_| rngutil::open_unit(rng)).collect()
}
