//! Mask-driven model surgery.
//!
//! A [`CompactModel`] stores only retained heads, FFN units and residual
//! columns. The residual stream itself stays at full width (embeddings are
//! never pruned), so each sublayer gathers its retained columns after the
//! layernorm and scatter-adds its output back. Dropped columns contribute
//! exactly zero in the masked dense model, which makes the compacted
//! forward bit-for-bit equal to it.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{Batch, Labels, TaskKind, TokenDataset};
use crate::error::CoreError;
use crate::gates::GateSet;
use crate::kernels;
use crate::metrics;
use crate::model::{GatedTransformer, HeadKind, ModelConfig, LN_EPS};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompactHead {
    pub wq: Vec<f64>,
    pub bq: Vec<f64>,
    pub wk: Vec<f64>,
    pub bk: Vec<f64>,
    pub wv: Vec<f64>,
    pub bv: Vec<f64>,
    pub wo: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompactAttn {
    pub ln_gamma: Vec<f64>,
    pub ln_beta: Vec<f64>,
    pub heads: Vec<CompactHead>,
    pub bo: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompactFfn {
    pub ln_gamma: Vec<f64>,
    pub ln_beta: Vec<f64>,
    pub units: usize,
    pub win: Vec<f64>,
    pub bin: Vec<f64>,
    pub wout: Vec<f64>,
    pub bout: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompactLayer {
    pub attn: Option<CompactAttn>,
    pub ffn: Option<CompactFfn>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompactTaskHead {
    pub kind: HeadKind,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Physically extracted submodel.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompactModel {
    pub config: ModelConfig,
    /// Residual columns the sublayers read and write, ascending.
    pub retained_cols: Vec<usize>,
    pub emb_tok: Vec<f64>,
    pub emb_pos: Vec<f64>,
    pub final_ln_gamma: Vec<f64>,
    pub final_ln_beta: Vec<f64>,
    pub layers: Vec<CompactLayer>,
    pub heads: BTreeMap<String, CompactTaskHead>,
}

fn gather_cols(data: &[f64], rows: usize, cols: usize, keep: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * keep.len());
    for r in 0..rows {
        for &c in keep {
            out.push(data[r * cols + c]);
        }
    }
    out
}

fn gather_rows(data: &[f64], cols: usize, keep: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(keep.len() * cols);
    for &r in keep {
        out.extend_from_slice(&data[r * cols..(r + 1) * cols]);
    }
    out
}

fn gather(data: &[f64], keep: &[usize]) -> Vec<f64> {
    keep.iter().map(|&i| data[i]).collect()
}

/// Extract the submodel a normalized binary mask describes.
pub fn compact(model: &GatedTransformer, masks: &GateSet) -> Result<CompactModel, CoreError> {
    if !masks.is_binary() {
        return Err(CoreError::Invalid("compaction requires a binary mask".into()));
    }
    if masks.layout != model.config.gate_layout() {
        return Err(CoreError::Shape("mask layout does not match the model".into()));
    }
    let masks = masks.normalized();
    let config = model.config;
    let d = config.hidden_dim;
    let dh = config.head_dim();
    let nf = config.ffn_dim;
    let retained_cols: Vec<usize> =
        (0..d).filter(|&c| masks.z_hidden[c] == 1.0).collect();
    let p = |name: &str| -> &[f64] {
        model
            .params
            .by_name(name)
            .map(|ix| model.params.get(ix).data())
            .expect("model parameter present")
    };

    let mut layers = Vec::with_capacity(config.num_layers);
    for i in 0..config.num_layers {
        let attn = if masks.z_mha[i] == 1.0 && !retained_cols.is_empty() {
            let mut heads = Vec::new();
            for j in 0..config.num_heads {
                if masks.head(i, j) != 1.0 {
                    continue;
                }
                heads.push(CompactHead {
                    wq: gather_rows(p(&alloc::format!("layer{i}.head{j}.wq")), dh, &retained_cols),
                    bq: p(&alloc::format!("layer{i}.head{j}.bq")).to_vec(),
                    wk: gather_rows(p(&alloc::format!("layer{i}.head{j}.wk")), dh, &retained_cols),
                    bk: p(&alloc::format!("layer{i}.head{j}.bk")).to_vec(),
                    wv: gather_rows(p(&alloc::format!("layer{i}.head{j}.wv")), dh, &retained_cols),
                    bv: p(&alloc::format!("layer{i}.head{j}.bv")).to_vec(),
                    wo: gather_cols(p(&alloc::format!("layer{i}.head{j}.wo")), dh, d, &retained_cols),
                });
            }
            Some(CompactAttn {
                ln_gamma: gather(p(&alloc::format!("layer{i}.ln1.gamma")), &retained_cols),
                ln_beta: gather(p(&alloc::format!("layer{i}.ln1.beta")), &retained_cols),
                heads,
                bo: gather(p(&alloc::format!("layer{i}.attn.bo")), &retained_cols),
            })
        } else {
            None
        };

        let ffn = if masks.z_ffn[i] == 1.0 && !retained_cols.is_empty() {
            let kept_units: Vec<usize> = (0..nf).filter(|&j| masks.fc(i, j) == 1.0).collect();
            // win is [d, nf]: keep retained rows then retained unit columns
            let win_rows = gather_rows(p(&alloc::format!("layer{i}.ffn.win")), nf, &retained_cols);
            let win = gather_cols(&win_rows, retained_cols.len(), nf, &kept_units);
            let wout_rows = gather_rows(p(&alloc::format!("layer{i}.ffn.wout")), d, &kept_units);
            let wout = gather_cols(&wout_rows, kept_units.len(), d, &retained_cols);
            Some(CompactFfn {
                ln_gamma: gather(p(&alloc::format!("layer{i}.ln2.gamma")), &retained_cols),
                ln_beta: gather(p(&alloc::format!("layer{i}.ln2.beta")), &retained_cols),
                units: kept_units.len(),
                win,
                bin: gather(p(&alloc::format!("layer{i}.ffn.bin")), &kept_units),
                wout,
                bout: gather(p(&alloc::format!("layer{i}.ffn.bout")), &retained_cols),
            })
        } else {
            None
        };
        layers.push(CompactLayer { attn, ffn });
    }

    let mut heads = BTreeMap::new();
    for th in model.heads() {
        heads.insert(
            th.task_id.clone(),
            CompactTaskHead {
                kind: th.kind,
                weight: model.params.get(th.weight).data().to_vec(),
                bias: model.params.get(th.bias).data().to_vec(),
            },
        );
    }

    Ok(CompactModel {
        config,
        retained_cols,
        emb_tok: p("emb.tok").to_vec(),
        emb_pos: p("emb.pos").to_vec(),
        final_ln_gamma: p("final_ln.gamma").to_vec(),
        final_ln_beta: p("final_ln.beta").to_vec(),
        layers,
        heads,
    })
}

impl CompactModel {
    /// Prunable parameters actually stored (embeddings, final layernorm and
    /// task heads excluded), counted from the tensors themselves.
    pub fn prunable_param_count(&self) -> u64 {
        let mut n = 0usize;
        for layer in &self.layers {
            if let Some(a) = &layer.attn {
                n += a.ln_gamma.len() + a.ln_beta.len() + a.bo.len();
                for h in &a.heads {
                    n += h.wq.len() + h.bq.len() + h.wk.len() + h.bk.len() + h.wv.len()
                        + h.bv.len() + h.wo.len();
                }
            }
            if let Some(f) = &layer.ffn {
                n += f.ln_gamma.len() + f.ln_beta.len() + f.win.len() + f.bin.len()
                    + f.wout.len() + f.bout.len();
            }
        }
        n as u64
    }

    /// Masked layernorm over the full-width stream, returning only the
    /// retained columns: statistics match the dense model exactly because
    /// dropped columns never receive sublayer writes.
    fn gathered_layer_norm(
        &self,
        x: &[f64],
        rows: usize,
        gamma: &[f64],
        beta: &[f64],
        out: &mut [f64],
    ) {
        let d = self.config.hidden_dim;
        let keep = &self.retained_cols;
        let dk = keep.len();
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let mut var = 0.0;
            for &v in row {
                let diff = v - mean;
                var += diff * diff;
            }
            var /= d as f64;
            let inv_std = 1.0 / libm::sqrt(var + LN_EPS);
            for (k, &c) in keep.iter().enumerate() {
                out[r * dk + k] = (row[c] - mean) * inv_std * gamma[k] + beta[k];
            }
        }
    }

    /// Per-position final states on the full-width residual stream.
    pub fn encoder_states(&self, tokens: &[u32], batch: usize) -> Result<Vec<f64>, CoreError> {
        let seq = self.config.max_seq_len;
        let d = self.config.hidden_dim;
        if tokens.len() != batch * seq {
            return Err(CoreError::Shape(alloc::format!(
                "expected {batch} x {seq} tokens, got {}",
                tokens.len()
            )));
        }
        let rows = batch * seq;
        let dk = self.retained_cols.len();
        let dh = self.config.head_dim();

        let mut x = vec![0.0; rows * d];
        for (r, &t) in tokens.iter().enumerate() {
            let t = t as usize;
            if t >= self.config.vocab_size {
                return Err(CoreError::Invalid(alloc::format!("token id {t} out of range")));
            }
            let s = r % seq;
            for c in 0..d {
                x[r * d + c] = self.emb_tok[t * d + c] + self.emb_pos[s * d + c];
            }
        }
        if dk == 0 {
            return Ok(x);
        }

        let mut u = vec![0.0; rows * dk];
        for layer in &self.layers {
            if let Some(attn) = &layer.attn {
                self.gathered_layer_norm(&x, rows, &attn.ln_gamma, &attn.ln_beta, &mut u);
                let mut acc: Option<Vec<f64>> = None;
                for head in &attn.heads {
                    let q = proj(&u, &head.wq, &head.bq, rows, dk, dh);
                    let k = proj(&u, &head.wk, &head.bk, rows, dk, dh);
                    let v = proj(&u, &head.wv, &head.bv, rows, dk, dh);
                    let mut scores = kernels::attn_scores(&q, &k, batch, seq, dh);
                    kernels::softmax_rows(&mut scores, rows, seq);
                    let ctx = kernels::attn_apply(&scores, &v, batch, seq, dh);
                    let out = kernels::matmul_nn(&ctx, &head.wo, rows, dh, dk);
                    acc = Some(match acc {
                        None => out,
                        Some(mut a) => {
                            for (a, o) in a.iter_mut().zip(&out) {
                                *a += o;
                            }
                            a
                        }
                    });
                }
                let mut out = acc.unwrap_or_else(|| vec![0.0; rows * dk]);
                for r in 0..rows {
                    for k in 0..dk {
                        out[r * dk + k] += attn.bo[k];
                    }
                }
                scatter_add(&mut x, &out, rows, d, dk, &self.retained_cols);
            }
            if let Some(ffn) = &layer.ffn {
                self.gathered_layer_norm(&x, rows, &ffn.ln_gamma, &ffn.ln_beta, &mut u);
                let units = ffn.units;
                let mut f = if units > 0 {
                    let mut h = proj(&u, &ffn.win, &ffn.bin, rows, dk, units);
                    for v in h.iter_mut() {
                        *v = kernels::relu(*v);
                    }
                    kernels::matmul_nn(&h, &ffn.wout, rows, units, dk)
                } else {
                    vec![0.0; rows * dk]
                };
                for r in 0..rows {
                    for k in 0..dk {
                        f[r * dk + k] += ffn.bout[k];
                    }
                }
                scatter_add(&mut x, &f, rows, d, dk, &self.retained_cols);
            }
        }
        Ok(x)
    }

    pub fn forward(&self, tokens: &[u32], batch: usize, task_id: &str) -> Result<Vec<f64>, CoreError> {
        let head = self
            .heads
            .get(task_id)
            .ok_or_else(|| CoreError::Invalid(alloc::format!("no task head named '{task_id}'")))?;
        let d = self.config.hidden_dim;
        let seq = self.config.max_seq_len;
        let x = self.encoder_states(tokens, batch)?;

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
        let mut rep = vec![0.0; batch * d];
        kernels::layer_norm_rows(
            &pooled,
            &self.final_ln_gamma,
            &self.final_ln_beta,
            &mut rep,
            batch,
            d,
            LN_EPS,
        );
        let c = head.kind.output_dim();
        let mut logits = kernels::matmul_nn(&rep, &head.weight, batch, d, c);
        for r in 0..batch {
            for j in 0..c {
                logits[r * c + j] += head.bias[j];
            }
        }
        Ok(logits)
    }

    /// Dataset metric with the same conventions as the dense model.
    pub fn evaluate_dataset(
        &self,
        ds: &TokenDataset,
        task_id: &str,
        batch_size: usize,
    ) -> Result<f64, CoreError> {
        let batches = ds.ordered_batches(batch_size);
        match ds.kind {
            TaskKind::Classification { num_classes } => {
                let mut correct = 0.0;
                let mut total = 0usize;
                for Batch { tokens, labels, size } in &batches {
                    let logits = self.forward(tokens, *size, task_id)?;
                    if let Labels::Class(ls) = labels {
                        correct += metrics::accuracy(&logits, num_classes, ls) * *size as f64;
                        total += size;
                    }
                }
                Ok(correct / total as f64)
            }
            TaskKind::Regression => {
                let mut preds = Vec::with_capacity(ds.len());
                let mut targets = Vec::with_capacity(ds.len());
                for Batch { tokens, labels, size } in &batches {
                    preds.extend(self.forward(tokens, *size, task_id)?);
                    if let Labels::Real(ts) = labels {
                        targets.extend_from_slice(ts);
                    }
                }
                metrics::pearson(&preds, &targets)
            }
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

fn scatter_add(x: &mut [f64], contrib: &[f64], rows: usize, d: usize, dk: usize, keep: &[usize]) {
    for r in 0..rows {
        for (k, &c) in keep.iter().enumerate() {
            x[r * d + c] += contrib[r * dk + k];
        }
    }
}
