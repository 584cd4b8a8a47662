//! Toy pre-layernorm encoder transformer with five structural gate families.
//!
//! Gate placement:
//! * each head's output is scaled by `z_mha[i] * z_head[i][j]` (the bias of
//!   the output projection sits inside the coarse gate, so a closed coarse
//!   gate silences the whole sublayer);
//! * each FFN unit is scaled by `z_ffn[i] * z_fc[i][j]`, with the write bias
//!   inside the coarse gate;
//! * `z_hidden` masks the residual columns a sublayer reads (post-layernorm)
//!   and writes (pre-residual-add). Embeddings and the final pooled head are
//!   never gated, so dropped columns still carry the embedding values.
//!
//! Masking both the read and the write side is what lets compaction remove
//! the corresponding rows and columns of every sublayer matrix while keeping
//! outputs exactly equal to the masked dense model.
//!
//! The same arithmetic is implemented twice: once on the autodiff graph for
//! training, once straight-line for inference. Both call the shared kernels
//! in the same order, and an equivalence test pins them together.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::gates::{GateLayout, GateSet};
use crate::graph::{Graph, Var};
use crate::kernels;
use crate::params::{ParamIx, ParamSet};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;
const INIT_SD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 4,
            hidden_dim: 64,
            num_heads: 4,
            ffn_dim: 128,
            vocab_size: 1000,
            max_seq_len: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        let all_positive = self.num_layers > 0
            && self.hidden_dim > 0
            && self.num_heads > 0
            && self.ffn_dim > 0
            && self.vocab_size > 2
            && self.max_seq_len > 0;
        if !all_positive {
            return Err(CoreError::Invalid(format!("all config dimensions must be positive: {self:?}")));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(CoreError::Invalid(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn gate_layout(&self) -> GateLayout {
        GateLayout {
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            ffn_dim: self.ffn_dim,
            hidden_dim: self.hidden_dim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Classification { num_classes: usize },
    Regression,
}

impl HeadKind {
    pub fn output_dim(&self) -> usize {
        match self {
            HeadKind::Classification { num_classes } => *num_classes,
            HeadKind::Regression => 1,
        }
    }
}

/// Per-task output head over the pooled final representation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskHead {
    pub task_id: String,
    pub kind: HeadKind,
    pub weight: ParamIx,
    pub bias: ParamIx,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HeadIx {
    wq: ParamIx,
    bq: ParamIx,
    wk: ParamIx,
    bk: ParamIx,
    wv: ParamIx,
    bv: ParamIx,
    wo: ParamIx,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerIx {
    ln1_gamma: ParamIx,
    ln1_beta: ParamIx,
    heads: Vec<HeadIx>,
    attn_bo: ParamIx,
    ln2_gamma: ParamIx,
    ln2_beta: ParamIx,
    ffn_win: ParamIx,
    ffn_bin: ParamIx,
    ffn_wout: ParamIx,
    ffn_bout: ParamIx,
}

/// Toy transformer: config, flat parameter storage and task heads.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GatedTransformer {
    pub config: ModelConfig,
    pub params: ParamSet,
    emb_tok: ParamIx,
    emb_pos: ParamIx,
    layers: Vec<LayerIx>,
    final_ln_gamma: ParamIx,
    final_ln_beta: ParamIx,
    heads: BTreeMap<String, TaskHead>,
}

/// Gate family vectors bound on a graph for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct GateVars {
    pub z_mha: Var,
    pub z_ffn: Var,
    pub z_head: Var,
    pub z_fc: Var,
    pub z_hidden: Var,
}

/// Pairs each parameter used in a pass with its graph leaf so gradients can
/// be routed back to the owning tensor.
pub type Bindings = Vec<(ParamIx, Var)>;

fn bind(g: &mut Graph, params: &ParamSet, ix: ParamIx, binds: &mut Bindings) -> Var {
    let v = g.leaf(params.get(ix));
    binds.push((ix, v));
    v
}

impl GatedTransformer {
    pub fn init<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self, CoreError> {
        config.validate()?;
        let d = config.hidden_dim;
        let dh = config.head_dim();
        let nf = config.ffn_dim;
        let mut params = ParamSet::new();

        let emb_tok = params.add(
            "emb.tok",
            Tensor::randn(&[config.vocab_size, d], 0.0, INIT_SD, rng).with_requires_grad(true),
        );
        let emb_pos = params.add(
            "emb.pos",
            Tensor::randn(&[config.max_seq_len, d], 0.0, INIT_SD, rng).with_requires_grad(true),
        );

        let mut layers = Vec::with_capacity(config.num_layers);
        for i in 0..config.num_layers {
            let ln1_gamma = params.add(format!("layer{i}.ln1.gamma"), ones(&[d]));
            let ln1_beta = params.add(format!("layer{i}.ln1.beta"), zeros(&[d]));
            let mut heads = Vec::with_capacity(config.num_heads);
            for j in 0..config.num_heads {
                heads.push(HeadIx {
                    wq: params.add(format!("layer{i}.head{j}.wq"), randn(&[d, dh], rng)),
                    bq: params.add(format!("layer{i}.head{j}.bq"), zeros(&[dh])),
                    wk: params.add(format!("layer{i}.head{j}.wk"), randn(&[d, dh], rng)),
                    bk: params.add(format!("layer{i}.head{j}.bk"), zeros(&[dh])),
                    wv: params.add(format!("layer{i}.head{j}.wv"), randn(&[d, dh], rng)),
                    bv: params.add(format!("layer{i}.head{j}.bv"), zeros(&[dh])),
                    wo: params.add(format!("layer{i}.head{j}.wo"), randn(&[dh, d], rng)),
                });
            }
            let attn_bo = params.add(format!("layer{i}.attn.bo"), zeros(&[d]));
            let ln2_gamma = params.add(format!("layer{i}.ln2.gamma"), ones(&[d]));
            let ln2_beta = params.add(format!("layer{i}.ln2.beta"), zeros(&[d]));
            let ffn_win = params.add(format!("layer{i}.ffn.win"), randn(&[d, nf], rng));
            let ffn_bin = params.add(format!("layer{i}.ffn.bin"), zeros(&[nf]));
            let ffn_wout = params.add(format!("layer{i}.ffn.wout"), randn(&[nf, d], rng));
            let ffn_bout = params.add(format!("layer{i}.ffn.bout"), zeros(&[d]));
            layers.push(LayerIx {
                ln1_gamma,
                ln1_beta,
                heads,
                attn_bo,
                ln2_gamma,
                ln2_beta,
                ffn_win,
                ffn_bin,
                ffn_wout,
                ffn_bout,
            });
        }
        let final_ln_gamma = params.add("final_ln.gamma", ones(&[d]));
        let final_ln_beta = params.add("final_ln.beta", zeros(&[d]));

        Ok(GatedTransformer {
            config,
            params,
            emb_tok,
            emb_pos,
            layers,
            final_ln_gamma,
            final_ln_beta,
            heads: BTreeMap::new(),
        })
    }

    pub fn add_head<R: Rng>(&mut self, task_id: &str, kind: HeadKind, rng: &mut R) -> &TaskHead {
        let d = self.config.hidden_dim;
        let c = kind.output_dim();
        let weight = self
            .params
            .add(format!("head.{task_id}.w"), randn(&[d, c], rng));
        let bias = self.params.add(format!("head.{task_id}.b"), zeros(&[c]));
        self.heads.insert(
            task_id.to_string(),
            TaskHead { task_id: task_id.to_string(), kind, weight, bias },
        );
        &self.heads[task_id]
    }

    pub fn head(&self, task_id: &str) -> Result<&TaskHead, CoreError> {
        self.heads
            .get(task_id)
            .ok_or_else(|| CoreError::Invalid(format!("no task head named '{task_id}'")))
    }

    pub fn heads(&self) -> impl Iterator<Item = &TaskHead> {
        self.heads.values()
    }

    pub fn embedding_params(&self) -> [ParamIx; 2] {
        [self.emb_tok, self.emb_pos]
    }

    /// Toggle whether gradients flow into the embedding tables.
    pub fn set_embeddings_trainable(&mut self, trainable: bool) {
        for ix in self.embedding_params() {
            self.params.get_mut(ix).set_requires_grad(trainable);
        }
    }

    /// All transformer and head parameters, excluding token/position
    /// embeddings when `freeze_embeddings` is set (the default recipe).
    pub fn trainable_parameters(&self, freeze_embeddings: bool) -> Vec<ParamIx> {
        let emb = self.embedding_params();
        self.params
            .iter()
            .map(|(ix, _, _)| ix)
            .filter(|ix| !(freeze_embeddings && emb.contains(ix)))
            .collect()
    }

    fn check_tokens(&self, tokens: &[u32], batch: usize) -> Result<usize, CoreError> {
        let seq = self.config.max_seq_len;
        if batch == 0 || tokens.len() != batch * seq {
            return Err(CoreError::Shape(format!(
                "expected {batch} x {seq} = {} token ids, got {}",
                batch * seq,
                tokens.len()
            )));
        }
        Ok(seq)
    }

    fn check_gates(&self, gates: &GateSet) -> Result<(), CoreError> {
        let want = self.config.gate_layout();
        if gates.layout != want {
            return Err(CoreError::Shape(format!(
                "gate layout {:?} does not match model layout {:?}",
                gates.layout, want
            )));
        }
        Ok(())
    }

    fn position_ids(&self, batch: usize) -> Vec<u32> {
        let seq = self.config.max_seq_len;
        let mut ids = Vec::with_capacity(batch * seq);
        for _ in 0..batch {
            ids.extend(0..seq as u32);
        }
        ids
    }

    /// Bind a structured gate set as constant graph inputs (evaluation-style
    /// forward on the tape).
    pub fn gate_constants(&self, g: &mut Graph, gates: &GateSet) -> Result<GateVars, CoreError> {
        self.check_gates(gates)?;
        Ok(GateVars {
            z_mha: g.constant(&[gates.z_mha.len()], &gates.z_mha),
            z_ffn: g.constant(&[gates.z_ffn.len()], &gates.z_ffn),
            z_head: g.constant(&[gates.z_head.len()], &gates.z_head),
            z_fc: g.constant(&[gates.z_fc.len()], &gates.z_fc),
            z_hidden: g.constant(&[gates.z_hidden.len()], &gates.z_hidden),
        })
    }

    /// Final per-sequence representation on the graph: embeddings, gated
    /// encoder stack, mean pooling, final layernorm. Returns `[batch, d]`.
    pub fn encode_graph(
        &self,
        g: &mut Graph,
        binds: &mut Bindings,
        tokens: &[u32],
        batch: usize,
        gates: GateVars,
    ) -> Result<Var, CoreError> {
        let x = self.encoder_states_graph(g, binds, tokens, batch, gates)?;
        let seq = self.config.max_seq_len;
        let pooled = g.mean_pool(x, batch, seq)?;
        let fg = bind(g, &self.params, self.final_ln_gamma, binds);
        let fb = bind(g, &self.params, self.final_ln_beta, binds);
        g.layer_norm(pooled, fg, fb)
    }

    /// Per-position final states `[batch*seq, d]` (used by the masked-token
    /// pretraining objective).
    pub fn encoder_states_graph(
        &self,
        g: &mut Graph,
        binds: &mut Bindings,
        tokens: &[u32],
        batch: usize,
        gates: GateVars,
    ) -> Result<Var, CoreError> {
        let seq = self.check_tokens(tokens, batch)?;
        self.check_gate_vars(g, gates)?;
        let nh = self.config.num_heads;
        let nf = self.config.ffn_dim;

        let tok_table = bind(g, &self.params, self.emb_tok, binds);
        let pos_table = bind(g, &self.params, self.emb_pos, binds);
        let tok = g.embedding(tok_table, tokens)?;
        let pos = g.embedding(pos_table, &self.position_ids(batch))?;
        let mut x = g.add(tok, pos)?;

        for (i, layer) in self.layers.iter().enumerate() {
            // attention sublayer
            let g1 = bind(g, &self.params, layer.ln1_gamma, binds);
            let b1 = bind(g, &self.params, layer.ln1_beta, binds);
            let u = g.layer_norm(x, g1, b1)?;
            let u = g.mul_row(u, gates.z_hidden)?;

            let mut acc: Option<Var> = None;
            for (j, head) in layer.heads.iter().enumerate() {
                let wq = bind(g, &self.params, head.wq, binds);
                let bq = bind(g, &self.params, head.bq, binds);
                let wk = bind(g, &self.params, head.wk, binds);
                let bk = bind(g, &self.params, head.bk, binds);
                let wv = bind(g, &self.params, head.wv, binds);
                let bv = bind(g, &self.params, head.bv, binds);
                let wo = bind(g, &self.params, head.wo, binds);

                let q = g.matmul(u, wq)?;
                let q = g.add_row(q, bq)?;
                let k = g.matmul(u, wk)?;
                let k = g.add_row(k, bk)?;
                let v = g.matmul(u, wv)?;
                let v = g.add_row(v, bv)?;
                let scores = g.attn_scores(q, k, batch, seq)?;
                let probs = g.softmax_rows(scores)?;
                let ctx = g.attn_apply(probs, v, batch, seq)?;
                let out = g.matmul(ctx, wo)?;
                let zj = g.slice(gates.z_head, i * nh + j, 1)?;
                let out = g.mul_scalar(out, zj)?;
                acc = Some(match acc {
                    None => out,
                    Some(a) => g.add(a, out)?,
                });
            }
            let bo = bind(g, &self.params, layer.attn_bo, binds);
            let attn = g.add_row(acc.expect("at least one head"), bo)?;
            let zi = g.slice(gates.z_mha, i, 1)?;
            let attn = g.mul_scalar(attn, zi)?;
            let attn = g.mul_row(attn, gates.z_hidden)?;
            x = g.add(x, attn)?;

            // FFN sublayer
            let g2 = bind(g, &self.params, layer.ln2_gamma, binds);
            let b2 = bind(g, &self.params, layer.ln2_beta, binds);
            let u2 = g.layer_norm(x, g2, b2)?;
            let u2 = g.mul_row(u2, gates.z_hidden)?;

            let win = bind(g, &self.params, layer.ffn_win, binds);
            let bin = bind(g, &self.params, layer.ffn_bin, binds);
            let wout = bind(g, &self.params, layer.ffn_wout, binds);
            let bout = bind(g, &self.params, layer.ffn_bout, binds);

            let h = g.matmul(u2, win)?;
            let h = g.add_row(h, bin)?;
            let h = g.relu(h);
            let zfc = g.slice(gates.z_fc, i * nf, nf)?;
            let h = g.mul_row(h, zfc)?;
            let f = g.matmul(h, wout)?;
            let f = g.add_row(f, bout)?;
            let zf = g.slice(gates.z_ffn, i, 1)?;
            let f = g.mul_scalar(f, zf)?;
            let f = g.mul_row(f, gates.z_hidden)?;
            x = g.add(x, f)?;
        }
        Ok(x)
    }

    fn check_gate_vars(&self, g: &Graph, gates: GateVars) -> Result<(), CoreError> {
        let l = self.config.gate_layout();
        let checks = [
            (gates.z_mha, l.num_layers, "z_mha"),
            (gates.z_ffn, l.num_layers, "z_ffn"),
            (gates.z_head, l.num_layers * l.num_heads, "z_head"),
            (gates.z_fc, l.num_layers * l.ffn_dim, "z_fc"),
            (gates.z_hidden, l.hidden_dim, "z_hidden"),
        ];
        for (v, want, name) in checks {
            let got: usize = g.shape(v).iter().product();
            if got != want {
                return Err(CoreError::Shape(format!("{name} has {got} entries, model requires {want}")));
            }
        }
        Ok(())
    }

    /// Task logits (or regression predictions) on the graph: `[batch, out]`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        binds: &mut Bindings,
        tokens: &[u32],
        batch: usize,
        gates: GateVars,
        task_id: &str,
    ) -> Result<Var, CoreError> {
        let rep = self.encode_graph(g, binds, tokens, batch, gates)?;
        let head = self.head(task_id)?;
        let w = bind(g, &self.params, head.weight, binds);
        let b = bind(g, &self.params, head.bias, binds);
        let logits = g.matmul(rep, w)?;
        g.add_row(logits, b)
    }

    /// Straight-line inference forward. `gates = None` runs the ungated
    /// reference model; `Some(all-ones)` is bitwise identical to it.
    pub fn forward(
        &self,
        tokens: &[u32],
        batch: usize,
        gates: Option<&GateSet>,
        task_id: &str,
    ) -> Result<Vec<f64>, CoreError> {
        let rep = self.encode(tokens, batch, gates)?;
        let head = self.head(task_id)?;
        let d = self.config.hidden_dim;
        let c = head.kind.output_dim();
        let w = self.params.get(head.weight).data();
        let b = self.params.get(head.bias).data();
        let mut logits = kernels::matmul_nn(&rep, w, batch, d, c);
        for r in 0..batch {
            for j in 0..c {
                logits[r * c + j] += b[j];
            }
        }
        Ok(logits)
    }

    /// Pooled, final-normalized representation `[batch, d]` without a tape.
    pub fn encode(
        &self,
        tokens: &[u32],
        batch: usize,
        gates: Option<&GateSet>,
    ) -> Result<Vec<f64>, CoreError> {
        let x = self.encoder_states(tokens, batch, gates)?;
        let seq = self.config.max_seq_len;
        let d = self.config.hidden_dim;
        let mut pooled = vec![0.0; batch * d];
        for b in 0..batch {
            for s in 0..seq {
                let row = &x[(b * seq + s) * d..(b * seq + s + 1) * d];
                for c in 0..d {
                    pooled[b * d + c] += row[c];
                }
            }
        }
        for v in pooled.iter_mut() {
            *v /= seq as f64;
        }
        let mut out = vec![0.0; batch * d];
        kernels::layer_norm_rows(
            &pooled,
            self.params.get(self.final_ln_gamma).data(),
            self.params.get(self.final_ln_beta).data(),
            &mut out,
            batch,
            d,
            LN_EPS,
        );
        Ok(out)
    }

    /// Per-position final states `[batch*seq, d]` without a tape.
    pub fn encoder_states(
        &self,
        tokens: &[u32],
        batch: usize,
        gates: Option<&GateSet>,
    ) -> Result<Vec<f64>, CoreError> {
        let seq = self.check_tokens(tokens, batch)?;
        if let Some(gs) = gates {
            self.check_gates(gs)?;
        }
        let d = self.config.hidden_dim;
        let dh = self.config.head_dim();
        let nf = self.config.ffn_dim;
        let rows = batch * seq;
        let vocab = self.config.vocab_size;

        let tok_table = self.params.get(self.emb_tok).data();
        let pos_table = self.params.get(self.emb_pos).data();
        let mut x = vec![0.0; rows * d];
        for (r, &t) in tokens.iter().enumerate() {
            let t = t as usize;
            if t >= vocab {
                return Err(CoreError::Invalid(format!("token id {t} >= vocab size {vocab}")));
            }
            let s = r % seq;
            for c in 0..d {
                x[r * d + c] = tok_table[t * d + c] + pos_table[s * d + c];
            }
        }

        let ones_d = vec![1.0; d];
        for (i, layer) in self.layers.iter().enumerate() {
            let z_hidden: &[f64] = gates.map(|gs| gs.z_hidden.as_slice()).unwrap_or(&ones_d);

            // attention sublayer
            let mut u = vec![0.0; rows * d];
            kernels::layer_norm_rows(
                &x,
                self.params.get(layer.ln1_gamma).data(),
                self.params.get(layer.ln1_beta).data(),
                &mut u,
                rows,
                d,
                LN_EPS,
            );
            mul_row_inplace(&mut u, z_hidden, rows, d);

            let mut attn: Option<Vec<f64>> = None;
            for (j, head) in layer.heads.iter().enumerate() {
                let q = proj(&u, self.params.get(head.wq).data(), self.params.get(head.bq).data(), rows, d, dh);
                let k = proj(&u, self.params.get(head.wk).data(), self.params.get(head.bk).data(), rows, d, dh);
                let v = proj(&u, self.params.get(head.wv).data(), self.params.get(head.bv).data(), rows, d, dh);
                let mut scores = kernels::attn_scores(&q, &k, batch, seq, dh);
                kernels::softmax_rows(&mut scores, rows, seq);
                let ctx = kernels::attn_apply(&scores, &v, batch, seq, dh);
                let mut out = kernels::matmul_nn(&ctx, self.params.get(head.wo).data(), rows, dh, d);
                let zj = gates.map(|gs| gs.head(i, j)).unwrap_or(1.0);
                for o in out.iter_mut() {
                    *o *= zj;
                }
                attn = Some(match attn {
                    None => out,
                    Some(mut a) => {
                        for (a, o) in a.iter_mut().zip(&out) {
                            *a += o;
                        }
                        a
                    }
                });
            }
            let mut attn = attn.expect("at least one head");
            let bo = self.params.get(layer.attn_bo).data();
            for r in 0..rows {
                for c in 0..d {
                    attn[r * d + c] += bo[c];
                }
            }
            let zi = gates.map(|gs| gs.z_mha[i]).unwrap_or(1.0);
            for v in attn.iter_mut() {
                *v *= zi;
            }
            mul_row_inplace(&mut attn, z_hidden, rows, d);
            for (xv, av) in x.iter_mut().zip(&attn) {
                *xv += av;
            }

            // FFN sublayer
            let mut u2 = vec![0.0; rows * d];
            kernels::layer_norm_rows(
                &x,
                self.params.get(layer.ln2_gamma).data(),
                self.params.get(layer.ln2_beta).data(),
                &mut u2,
                rows,
                d,
                LN_EPS,
            );
            mul_row_inplace(&mut u2, z_hidden, rows, d);

            let mut h = proj(
                &u2,
                self.params.get(layer.ffn_win).data(),
                self.params.get(layer.ffn_bin).data(),
                rows,
                d,
                nf,
            );
            for v in h.iter_mut() {
                *v = kernels::relu(*v);
            }
            if let Some(gs) = gates {
                let zfc = &gs.z_fc[i * nf..(i + 1) * nf];
                mul_row_inplace(&mut h, zfc, rows, nf);
            } else {
                let ones_nf = vec![1.0; nf];
                mul_row_inplace(&mut h, &ones_nf, rows, nf);
            }
            let mut f = kernels::matmul_nn(&h, self.params.get(layer.ffn_wout).data(), rows, nf, d);
            let bout = self.params.get(layer.ffn_bout).data();
            for r in 0..rows {
                for c in 0..d {
                    f[r * d + c] += bout[c];
                }
            }
            let zf = gates.map(|gs| gs.z_ffn[i]).unwrap_or(1.0);
            for v in f.iter_mut() {
                *v *= zf;
            }
            mul_row_inplace(&mut f, z_hidden, rows, d);
            for (xv, fv) in x.iter_mut().zip(&f) {
                *xv += fv;
            }
        }
        Ok(x)
    }
}

fn mul_row_inplace(x: &mut [f64], v: &[f64], rows: usize, cols: usize) {
    debug_assert_eq!(v.len(), cols);
    for r in 0..rows {
        for c in 0..cols {
            x[r * cols + c] *= v[c];
        }
    }
}

fn proj(x: &[f64], w: &[f64], b: &[f64], rows: usize, din: usize, dout: usize) -> Vec<f64> {
    let mut out = kernels::matmul_nn(x, w, rows, din, dout);
    for r in 0..rows {
        for c in 0..dout {
            out[r * dout + c] += b[c];
        }
    }
    out
}

fn randn<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::randn(shape, 0.0, INIT_SD, rng).with_requires_grad(true)
}

fn zeros(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape).with_requires_grad(true)
}

fn ones(shape: &[usize]) -> Tensor {
    let numel = shape.iter().product();
    Tensor::new(shape.to_vec(), vec![1.0; numel])
        .expect("consistent")
        .with_requires_grad(true)
}
