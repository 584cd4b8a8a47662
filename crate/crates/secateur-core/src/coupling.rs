//! Strategies for sharing structural variables between the target and
//! auxiliary task, and multi-task loss assembly.
//!
//! The delta formulation adds task offsets in the unconstrained log-alpha
//! space (not in realized gate space): `log_alpha_task = base + delta_task`.
//! Realized gates then stay in [0, 1] by construction and both the base and
//! the offsets receive gradient from either task.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::gates::{GateParams, HardConcreteConfig};
use crate::graph::{Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskRole {
    Target,
    Aux,
}

impl TaskRole {
    pub fn label(&self) -> &'static str {
        match self {
            TaskRole::Target => "target",
            TaskRole::Aux => "aux",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CouplingStrategy {
    /// One shared set of structural variables for both tasks.
    SingleMask,
    /// Fully independent structural variables; only model weights couple.
    MultiMask,
    /// Shared base plus regularized task-specific offsets.
    Delta { reg_weight: f64 },
}

impl CouplingStrategy {
    pub fn delta_default() -> Self {
        CouplingStrategy::Delta { reg_weight: 1e-2 }
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        if let CouplingStrategy::Delta { reg_weight } = self {
            if *reg_weight < 0.0 {
                return Err(CoreError::Invalid(format!(
                    "delta regularizer weight must be non-negative, got {reg_weight}"
                )));
            }
        }
        Ok(())
    }
}

/// Structural parameters under a coupling strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CoupledGateParams {
    Single {
        base: GateParams,
    },
    Multi {
        target: GateParams,
        aux: GateParams,
    },
    Delta {
        base: GateParams,
        delta_target: Vec<f64>,
        delta_aux: Vec<f64>,
        reg_weight: f64,
    },
}

impl CoupledGateParams {
    /// Fresh parameters for a strategy; deltas start at zero so training
    /// begins from exact structural sharing.
    pub fn init<R: rand::Rng>(
        strategy: CouplingStrategy,
        count: usize,
        hc: HardConcreteConfig,
        rng: &mut R,
    ) -> Result<Self, CoreError> {
        strategy.validate()?;
        Ok(match strategy {
            CouplingStrategy::SingleMask => {
                CoupledGateParams::Single { base: GateParams::init(count, hc, rng) }
            }
            CouplingStrategy::MultiMask => CoupledGateParams::Multi {
                target: GateParams::init(count, hc, rng),
                aux: GateParams::init(count, hc, rng),
            },
            CouplingStrategy::Delta { reg_weight } => CoupledGateParams::Delta {
                base: GateParams::init(count, hc, rng),
                delta_target: vec![0.0; count],
                delta_aux: vec![0.0; count],
                reg_weight,
            },
        })
    }

    pub fn strategy(&self) -> CouplingStrategy {
        match self {
            CoupledGateParams::Single { .. } => CouplingStrategy::SingleMask,
            CoupledGateParams::Multi { .. } => CouplingStrategy::MultiMask,
            CoupledGateParams::Delta { reg_weight, .. } => {
                CouplingStrategy::Delta { reg_weight: *reg_weight }
            }
        }
    }

    pub fn hard_concrete(&self) -> &HardConcreteConfig {
        match self {
            CoupledGateParams::Single { base } => &base.config,
            CoupledGateParams::Multi { target, .. } => &target.config,
            CoupledGateParams::Delta { base, .. } => &base.config,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            CoupledGateParams::Single { base } => base.len(),
            CoupledGateParams::Multi { target, .. } => target.len(),
            CoupledGateParams::Delta { base, .. } => base.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Effective structural parameters for one task.
    pub fn resolve(&self, task: TaskRole) -> GateParams {
        match self {
            CoupledGateParams::Single { base } => base.clone(),
            CoupledGateParams::Multi { target, aux } => match task {
                TaskRole::Target => target.clone(),
                TaskRole::Aux => aux.clone(),
            },
            CoupledGateParams::Delta { base, delta_target, delta_aux, .. } => {
                let delta = match task {
                    TaskRole::Target => delta_target,
                    TaskRole::Aux => delta_aux,
                };
                GateParams {
                    log_alpha: base.log_alpha.iter().zip(delta).map(|(b, d)| b + d).collect(),
                    config: base.config,
                }
            }
        }
    }

    /// w * (||delta_T||^2 + ||delta_A||^2); rejected for strategies without
    /// delta offsets.
    pub fn delta_regularizer(&self) -> Result<f64, CoreError> {
        match self {
            CoupledGateParams::Delta { delta_target, delta_aux, reg_weight, .. } => {
                let sq = |v: &[f64]| v.iter().map(|d| d * d).sum::<f64>();
                Ok(reg_weight * (sq(delta_target) + sq(delta_aux)))
            }
            _ => Err(CoreError::Invalid(
                "delta regularizer requested under a strategy without delta offsets".into(),
            )),
        }
    }
}

/// Leaf variables for the gate parameters of one coupled set, bound once
/// per training step.
#[derive(Debug, Clone, Copy)]
pub enum CoupledGateVars {
    Single { base: Var },
    Multi { target: Var, aux: Var },
    Delta { base: Var, delta_target: Var, delta_aux: Var },
}

impl CoupledGateVars {
    /// Effective log-alpha vector for a task on the graph.
    pub fn resolve(&self, g: &mut Graph, task: TaskRole) -> Result<Var, CoreError> {
        Ok(match self {
            CoupledGateVars::Single { base } => *base,
            CoupledGateVars::Multi { target, aux } => match task {
                TaskRole::Target => *target,
                TaskRole::Aux => *aux,
            },
            CoupledGateVars::Delta { base, delta_target, delta_aux } => {
                let delta = match task {
                    TaskRole::Target => *delta_target,
                    TaskRole::Aux => *delta_aux,
                };
                g.add(*base, delta)?
            }
        })
    }

    /// Regularizer on the graph; `None` for strategies without deltas.
    pub fn delta_regularizer(
        &self,
        g: &mut Graph,
        reg_weight: f64,
    ) -> Result<Option<Var>, CoreError> {
        match self {
            CoupledGateVars::Delta { delta_target, delta_aux, .. } => {
                let sq_t = g.square(*delta_target);
                let sum_t = g.sum(sq_t);
                let sq_a = g.square(*delta_aux);
                let sum_a = g.sum(sq_a);
                let total = g.add(sum_t, sum_a)?;
                Ok(Some(g.scale(total, reg_weight)))
            }
            _ => Ok(None),
        }
    }
}

/// Loss weights for the target and auxiliary task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskWeights {
    pub target: f64,
    pub aux: f64,
}

impl Default for TaskWeights {
    fn default() -> Self {
        TaskWeights { target: 1.0, aux: 1.0 }
    }
}

impl TaskWeights {
    pub fn new(target: f64, aux: f64) -> Result<Self, CoreError> {
        if !(target > 0.0 && aux > 0.0) {
            return Err(CoreError::Invalid(format!("task weights must be positive, got ({target}, {aux})")));
        }
        Ok(TaskWeights { target, aux })
    }

    pub fn for_role(&self, role: TaskRole) -> f64 {
        match role {
            TaskRole::Target => self.target,
            TaskRole::Aux => self.aux,
        }
    }
}

/// w_T * loss_T + w_A * loss_A + penalty + reg, with absent terms dropped.
pub fn multitask_loss(
    loss_target: Option<f64>,
    loss_aux: Option<f64>,
    weights: TaskWeights,
    penalty: f64,
    reg: f64,
) -> f64 {
    loss_target.map_or(0.0, |l| weights.target * l)
        + loss_aux.map_or(0.0, |l| weights.aux * l)
        + penalty
        + reg
}

/// Graph version of [`multitask_loss`].
pub fn multitask_loss_on_graph(
    g: &mut Graph,
    loss_target: Option<Var>,
    loss_aux: Option<Var>,
    weights: TaskWeights,
    penalty: Option<Var>,
    reg: Option<Var>,
) -> Result<Var, CoreError> {
    let mut total: Option<Var> = None;
    let push = |g: &mut Graph, term: Var, acc: &mut Option<Var>| -> Result<(), CoreError> {
        *acc = Some(match *acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
        Ok(())
    };
    if let Some(l) = loss_target {
        let w = g.scale(l, weights.target);
        push(g, w, &mut total)?;
    }
    if let Some(l) = loss_aux {
        let w = g.scale(l, weights.aux);
        push(g, w, &mut total)?;
    }
    if let Some(p) = penalty {
        push(g, p, &mut total)?;
    }
    if let Some(r) = reg {
        push(g, r, &mut total)?;
    }
    total.ok_or_else(|| CoreError::Invalid("multitask loss with no terms".into()))
}
