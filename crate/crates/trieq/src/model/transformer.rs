//! Decoder-only transformer forward/backward over one global discrete
//! vocabulary, with the segment-length-normalized training loss.
//!
//! Pre-norm blocks, learned positional embeddings, GELU MLP, tied input and
//! output embeddings. All computation is f64 and strictly row-causal: the
//! logit row at position t is a function of ids[0..=t] only.

use super::assemble::AssembledSequence;
use super::math::*;
use super::params::{Gradients, Parameters};
use super::{Model, ModelError};
use crate::util::derive_seed;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Per-layer activation cache for one sequence.
struct LayerCache {
    x_in: Vec<f64>,      // residual stream entering the layer (T x d)
    ln1_out: Vec<f64>,   // (T x d)
    ln1_mean: Vec<f64>,  // (T)
    ln1_rstd: Vec<f64>,  // (T)
    q: Vec<f64>,         // (T x d)
    k: Vec<f64>,         // (T x d)
    v: Vec<f64>,         // (T x d)
    attn_w: Vec<f64>,    // (H x T x T), rows softmaxed over 0..=t
    ctx: Vec<f64>,       // concatenated head outputs, pre-Wo (T x d)
    attn_drop: Option<Vec<f64>>, // dropout mask on the attention branch
    x_mid: Vec<f64>,     // after attention residual (T x d)
    ln2_out: Vec<f64>,   // (T x d)
    ln2_mean: Vec<f64>,  // (T)
    ln2_rstd: Vec<f64>,  // (T)
    h_pre: Vec<f64>,     // (T x d_ff), pre-GELU
    h_act: Vec<f64>,     // (T x d_ff)
    mlp_drop: Option<Vec<f64>>, // dropout mask on the MLP branch
}

/// Full forward cache for one sequence.
pub(super) struct ForwardCache {
    t_len: usize,
    ids: Vec<u32>,
    layers: Vec<LayerCache>,
    x_final: Vec<f64>,    // residual stream after last layer (T x d)
    lnf_out: Vec<f64>,    // (T x d)
    lnf_mean: Vec<f64>,
    lnf_rstd: Vec<f64>,
    pub logits: Vec<f64>, // (T x V)
}

/// Whether a forward pass applies dropout (training) or not (evaluation).
#[derive(Debug, Clone, Copy)]
pub enum RunMode {
    Eval,
    Train { dropout_seed: u64 },
}

#[cfg(test)]
impl ForwardCache {
    /// Sum of every causal attention row, with its position (test hook).
    pub(super) fn attention_row_sums(&self, cfg: &super::ModelConfig) -> Vec<(f64, usize)> {
        let mut out = Vec::new();
        for lc in &self.layers {
            for h in 0..cfg.n_heads {
                for t in 0..self.t_len {
                    let row = &lc.attn_w
                        [(h * self.t_len + t) * self.t_len..(h * self.t_len + t) * self.t_len + t + 1];
                    out.push((row.iter().sum::<f64>(), t));
                }
            }
        }
        out
    }
}

impl Model {
    fn check_ids(&self, ids: &[u32]) -> Result<(), ModelError> {
        if ids.len() > self.config.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                example_id: "<raw>".into(),
                len: ids.len(),
                max: self.config.max_seq_len,
            });
        }
        for &id in ids {
            if id as usize >= self.config.vocab_size {
                return Err(ModelError::OutOfVocab(id));
            }
        }
        Ok(())
    }

    /// Per-position next-token logit rows for one sequence.
    pub fn forward(&self, ids: &[u32]) -> Result<Vec<Vec<f64>>, ModelError> {
        let cache = self.forward_cached(ids, RunMode::Eval)?;
        let v = self.config.vocab_size;
        Ok((0..ids.len()).map(|t| cache.logits[t * v..(t + 1) * v].to_vec()).collect())
    }

    /// Batched forward; each sequence is processed at its own length, so any
    /// trailing padding cannot influence the logits of real positions.
    pub fn forward_batch(&self, batch: &[Vec<u32>]) -> Result<Vec<Vec<Vec<f64>>>, ModelError> {
        batch.iter().map(|ids| self.forward(ids)).collect()
    }

    pub(super) fn forward_cached(
        &self,
        ids: &[u32],
        mode: RunMode,
    ) -> Result<ForwardCache, ModelError> {
        self.forward_cached_rows(ids, mode, None)
    }

    /// Forward with an optional mask of which logit rows are needed; skipped
    /// rows are left at zero (the loss never reads them).
    pub(super) fn forward_cached_rows(
        &self,
        ids: &[u32],
        mode: RunMode,
        needed_rows: Option<&[bool]>,
    ) -> Result<ForwardCache, ModelError> {
        self.check_ids(ids)?;
        let cfg = &self.config;
        let (d, t_len) = (cfg.d_model, ids.len());
        let heads = cfg.n_heads;
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let p = &self.params;

        let embed = &p.get("embed").data;
        let pos = &p.get("pos").data;
        let mut x = vec![0.0; t_len * d];
        for (t, &id) in ids.iter().enumerate() {
            let e = &embed[id as usize * d..(id as usize + 1) * d];
            let pe = &pos[t * d..(t + 1) * d];
            for i in 0..d {
                x[t * d + i] = e[i] + pe[i];
            }
        }

        let mut dropout_rng = match mode {
            RunMode::Train { dropout_seed } if cfg.dropout_rate > 0.0 => {
                Some(ChaCha8Rng::seed_from_u64(dropout_seed))
            }
            _ => None,
        };
        let sample_mask = |rng: &mut Option<ChaCha8Rng>, len: usize| -> Option<Vec<f64>> {
            rng.as_mut().map(|r| {
                let keep = 1.0 - cfg.dropout_rate;
                (0..len)
                    .map(|_| if r.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect()
            })
        };

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let name = |n: &str| format!("layer{l}.{n}");
            let x_in = x.clone();

            let mut ln1_out = vec![0.0; t_len * d];
            let (mut ln1_mean, mut ln1_rstd) = (vec![0.0; t_len], vec![0.0; t_len]);
            layernorm_fwd(
                &x_in,
                &p.get(&name("ln1.g")).data,
                &p.get(&name("ln1.b")).data,
                t_len,
                d,
                &mut ln1_out,
                &mut ln1_mean,
                &mut ln1_rstd,
            );

            let mut q = vec![0.0; t_len * d];
            let mut k = vec![0.0; t_len * d];
            let mut v = vec![0.0; t_len * d];
            linear_fwd(&ln1_out, &p.get(&name("attn.wq")).data, &p.get(&name("attn.bq")).data, t_len, d, d, &mut q);
            linear_fwd(&ln1_out, &p.get(&name("attn.wk")).data, &p.get(&name("attn.bk")).data, t_len, d, d, &mut k);
            linear_fwd(&ln1_out, &p.get(&name("attn.wv")).data, &p.get(&name("attn.bv")).data, t_len, d, d, &mut v);

            let mut attn_w = vec![0.0; heads * t_len * t_len];
            let mut ctx = vec![0.0; t_len * d];
            for h in 0..heads {
                let off = h * hd;
                for t in 0..t_len {
                    let qrow = &q[t * d + off..t * d + off + hd];
                    let w_row = &mut attn_w[(h * t_len + t) * t_len..(h * t_len + t) * t_len + t + 1];
                    for (t2, w) in w_row.iter_mut().enumerate() {
                        *w = dot(qrow, &k[t2 * d + off..t2 * d + off + hd]) * scale;
                    }
                    softmax_inplace(w_row);
                    let crow = &mut ctx[t * d + off..t * d + off + hd];
                    for t2 in 0..=t {
                        let a = attn_w[(h * t_len + t) * t_len + t2];
                        axpy(a, &v[t2 * d + off..t2 * d + off + hd], crow);
                    }
                }
            }

            let mut attn_out = vec![0.0; t_len * d];
            linear_fwd(&ctx, &p.get(&name("attn.wo")).data, &p.get(&name("attn.bo")).data, t_len, d, d, &mut attn_out);
            let attn_drop = sample_mask(&mut dropout_rng, t_len * d);
            if let Some(mask) = &attn_drop {
                for (o, m) in attn_out.iter_mut().zip(mask) {
                    *o *= m;
                }
            }
            for i in 0..t_len * d {
                x[i] = x_in[i] + attn_out[i];
            }
            let x_mid = x.clone();

            let mut ln2_out = vec![0.0; t_len * d];
            let (mut ln2_mean, mut ln2_rstd) = (vec![0.0; t_len], vec![0.0; t_len]);
            layernorm_fwd(
                &x_mid,
                &p.get(&name("ln2.g")).data,
                &p.get(&name("ln2.b")).data,
                t_len,
                d,
                &mut ln2_out,
                &mut ln2_mean,
                &mut ln2_rstd,
            );

            let mut h_pre = vec![0.0; t_len * cfg.d_ff];
            linear_fwd(&ln2_out, &p.get(&name("mlp.w1")).data, &p.get(&name("mlp.b1")).data, t_len, d, cfg.d_ff, &mut h_pre);
            let h_act: Vec<f64> = h_pre.iter().map(|&v| gelu(v)).collect();
            let mut mlp_out = vec![0.0; t_len * d];
            linear_fwd(&h_act, &p.get(&name("mlp.w2")).data, &p.get(&name("mlp.b2")).data, t_len, cfg.d_ff, d, &mut mlp_out);
            let mlp_drop = sample_mask(&mut dropout_rng, t_len * d);
            if let Some(mask) = &mlp_drop {
                for (o, m) in mlp_out.iter_mut().zip(mask) {
                    *o *= m;
                }
            }
            for i in 0..t_len * d {
                x[i] = x_mid[i] + mlp_out[i];
            }

            layers.push(LayerCache {
                x_in,
                ln1_out,
                ln1_mean,
                ln1_rstd,
                q,
                k,
                v,
                attn_w,
                ctx,
                attn_drop,
                x_mid,
                ln2_out,
                ln2_mean,
                ln2_rstd,
                h_pre,
                h_act,
                mlp_drop,
            });
        }

        let x_final = x;
        let mut lnf_out = vec![0.0; t_len * d];
        let (mut lnf_mean, mut lnf_rstd) = (vec![0.0; t_len], vec![0.0; t_len]);
        layernorm_fwd(
            &x_final,
            &p.get("final_ln.g").data,
            &p.get("final_ln.b").data,
            t_len,
            d,
            &mut lnf_out,
            &mut lnf_mean,
            &mut lnf_rstd,
        );

        // Tied output projection: logits = lnf_out @ embed^T (no bias).
        let vocab = cfg.vocab_size;
        let mut logits = vec![0.0; t_len * vocab];
        for t in 0..t_len {
            if let Some(need) = needed_rows {
                if !need[t] {
                    continue;
                }
            }
            let xt = &lnf_out[t * d..(t + 1) * d];
            let lt = &mut logits[t * vocab..(t + 1) * vocab];
            for (j, l) in lt.iter_mut().enumerate() {
                *l = dot(xt, &embed[j * d..(j + 1) * d]);
            }
        }

        Ok(ForwardCache {
            t_len,
            ids: ids.to_vec(),
            layers,
            x_final,
            lnf_out,
            lnf_mean,
            lnf_rstd,
            logits,
        })
    }

    /// Backward for one sequence given d(logits); accumulates into `grads`.
    fn backward(&self, cache: &ForwardCache, dlogits: &[f64], grads: &mut Gradients) {
        let cfg = &self.config;
        let (d, t_len, vocab) = (cfg.d_model, cache.t_len, cfg.vocab_size);
        let heads = cfg.n_heads;
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let p = &self.params;

        // Tied head: d_lnf = dlogits @ embed, d_embed += dlogits^T @ lnf_out.
        let embed = &p.get("embed").data;
        let mut d_lnf = vec![0.0; t_len * d];
        {
            let d_embed = &mut grads.get_mut("embed").data;
            for t in 0..t_len {
                let dlt = &dlogits[t * vocab..(t + 1) * vocab];
                let xt = &cache.lnf_out[t * d..(t + 1) * d];
                let dxt = &mut d_lnf[t * d..(t + 1) * d];
                for (j, &g) in dlt.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    axpy(g, &embed[j * d..(j + 1) * d], dxt);
                    axpy(g, xt, &mut d_embed[j * d..(j + 1) * d]);
                }
            }
        }

        // Final layer norm.
        let mut dx = vec![0.0; t_len * d];
        {
            let [dg, db] = grads.get_two_mut("final_ln.g", "final_ln.b");
            layernorm_bwd(
                &d_lnf,
                &cache.x_final,
                &p.get("final_ln.g").data,
                &cache.lnf_mean,
                &cache.lnf_rstd,
                t_len,
                d,
                &mut dg.data,
                &mut db.data,
                &mut dx,
            );
        }

        for l in (0..cfg.n_layers).rev() {
            let name = |n: &str| format!("layer{l}.{n}");
            let lc = &cache.layers[l];

            // MLP branch.
            let mut d_mlp_out = dx.clone();
            if let Some(mask) = &lc.mlp_drop {
                for (g, m) in d_mlp_out.iter_mut().zip(mask) {
                    *g *= m;
                }
            }
            let mut d_hact = vec![0.0; t_len * cfg.d_ff];
            {
                let [dw2, db2] = grads.get_two_mut(&name("mlp.w2"), &name("mlp.b2"));
                linear_bwd(&d_mlp_out, &lc.h_act, &p.get(&name("mlp.w2")).data, t_len, cfg.d_ff, d, &mut dw2.data, &mut db2.data, &mut d_hact);
            }
            let mut d_hpre = vec![0.0; t_len * cfg.d_ff];
            for i in 0..t_len * cfg.d_ff {
                d_hpre[i] = d_hact[i] * gelu_grad(lc.h_pre[i]);
            }
            let mut d_ln2 = vec![0.0; t_len * d];
            {
                let [dw1, db1] = grads.get_two_mut(&name("mlp.w1"), &name("mlp.b1"));
                linear_bwd(&d_hpre, &lc.ln2_out, &p.get(&name("mlp.w1")).data, t_len, d, cfg.d_ff, &mut dw1.data, &mut db1.data, &mut d_ln2);
            }
            let mut d_xmid = vec![0.0; t_len * d];
            {
                let [dg, db] = grads.get_two_mut(&name("ln2.g"), &name("ln2.b"));
                layernorm_bwd(&d_ln2, &lc.x_mid, &p.get(&name("ln2.g")).data, &lc.ln2_mean, &lc.ln2_rstd, t_len, d, &mut dg.data, &mut db.data, &mut d_xmid);
            }
            // Residual: gradient into x_mid is dx (skip) + d_xmid (branch).
            for i in 0..t_len * d {
                dx[i] += d_xmid[i];
            }

            // Attention branch.
            let mut d_attn_out = dx.clone();
            if let Some(mask) = &lc.attn_drop {
                for (g, m) in d_attn_out.iter_mut().zip(mask) {
                    *g *= m;
                }
            }
            let mut d_ctx = vec![0.0; t_len * d];
            {
                let [dwo, dbo] = grads.get_two_mut(&name("attn.wo"), &name("attn.bo"));
                linear_bwd(&d_attn_out, &lc.ctx, &p.get(&name("attn.wo")).data, t_len, d, d, &mut dwo.data, &mut dbo.data, &mut d_ctx);
            }

            let mut d_q = vec![0.0; t_len * d];
            let mut d_k = vec![0.0; t_len * d];
            let mut d_v = vec![0.0; t_len * d];
            let mut d_aw = vec![0.0; t_len]; // reused per (head, row)
            for h in 0..heads {
                let off = h * hd;
                for t in 0..t_len {
                    let dctx_row = &d_ctx[t * d + off..t * d + off + hd];
                    let aw_row = &lc.attn_w[(h * t_len + t) * t_len..(h * t_len + t) * t_len + t + 1];
                    let mut aw_dot = 0.0;
                    for t2 in 0..=t {
                        let s = dot(dctx_row, &lc.v[t2 * d + off..t2 * d + off + hd]);
                        d_aw[t2] = s;
                        aw_dot += aw_row[t2] * s;
                        axpy(aw_row[t2], dctx_row, &mut d_v[t2 * d + off..t2 * d + off + hd]);
                    }
                    let qrow = lc.q[t * d + off..t * d + off + hd].to_vec();
                    for t2 in 0..=t {
                        let ds = aw_row[t2] * (d_aw[t2] - aw_dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        axpy(ds, &lc.k[t2 * d + off..t2 * d + off + hd], &mut d_q[t * d + off..t * d + off + hd]);
                        axpy(ds, &qrow, &mut d_k[t2 * d + off..t2 * d + off + hd]);
                    }
                }
            }

            let mut d_ln1 = vec![0.0; t_len * d];
            {
                let [dwq, dbq] = grads.get_two_mut(&name("attn.wq"), &name("attn.bq"));
                linear_bwd(&d_q, &lc.ln1_out, &p.get(&name("attn.wq")).data, t_len, d, d, &mut dwq.data, &mut dbq.data, &mut d_ln1);
            }
            {
                let [dwk, dbk] = grads.get_two_mut(&name("attn.wk"), &name("attn.bk"));
                linear_bwd(&d_k, &lc.ln1_out, &p.get(&name("attn.wk")).data, t_len, d, d, &mut dwk.data, &mut dbk.data, &mut d_ln1);
            }
            {
                let [dwv, dbv] = grads.get_two_mut(&name("attn.wv"), &name("attn.bv"));
                linear_bwd(&d_v, &lc.ln1_out, &p.get(&name("attn.wv")).data, t_len, d, d, &mut dwv.data, &mut dbv.data, &mut d_ln1);
            }
            let mut d_xin = vec![0.0; t_len * d];
            {
                let [dg, db] = grads.get_two_mut(&name("ln1.g"), &name("ln1.b"));
                layernorm_bwd(&d_ln1, &lc.x_in, &p.get(&name("ln1.g")).data, &lc.ln1_mean, &lc.ln1_rstd, t_len, d, &mut dg.data, &mut db.data, &mut d_xin);
            }
            for i in 0..t_len * d {
                dx[i] += d_xin[i];
            }
        }

        // Embedding tables.
        let d_embed = &mut grads.get_mut("embed").data;
        for (t, &id) in cache.ids.iter().enumerate() {
            let de = &mut d_embed[id as usize * d..(id as usize + 1) * d];
            for i in 0..d {
                de[i] += dx[t * d + i];
            }
        }
        let d_pos = &mut grads.get_mut("pos").data;
        for t in 0..t_len {
            for i in 0..d {
                d_pos[t * d + i] += dx[t * d + i];
            }
        }
    }

    /// The length-normalized multi-segment loss for one sequence, computed
    /// from explicit logit rows. Per segment: mean cross-entropy over its
    /// masked positions (position t is predicted by logit row t-1); sequence
    /// loss: mean over segments.
    pub fn sequence_loss_from_logits(
        logits: &[Vec<f64>],
        seq: &AssembledSequence,
    ) -> Result<f64, ModelError> {
        let weights = segment_weights(seq, 1.0)?;
        let mut loss = 0.0;
        for (t, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let row = &logits[t - 1];
            let target = seq.ids[t] as usize;
            loss += w * cross_entropy(row, target);
        }
        Ok(loss)
    }

    /// Mean loss over a batch (no gradients).
    pub fn loss_batch(&self, batch: &[AssembledSequence]) -> Result<f64, ModelError> {
        let mut total = 0.0;
        for seq in batch {
            let needed = prediction_rows(seq);
            let cache =
                self.forward_cached_rows(&seq.ids[..seq.content_len], RunMode::Eval, Some(&needed))?;
            let rows: Vec<Vec<f64>> = (0..cache.t_len)
                .map(|t| cache.logits[t * self.config.vocab_size..(t + 1) * self.config.vocab_size].to_vec())
                .collect();
            total += Self::sequence_loss_from_logits(&rows, seq)?;
        }
        Ok(total / batch.len() as f64)
    }

    /// Mean loss over a batch plus gradients for every parameter tensor.
    pub fn loss_and_grads(
        &self,
        batch: &[AssembledSequence],
        mode: RunMode,
    ) -> Result<(f64, Gradients), ModelError> {
        let mut grads = Gradients::zeros(&self.config);
        let vocab = self.config.vocab_size;
        let batch_w = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for (b, seq) in batch.iter().enumerate() {
            let seq_mode = match mode {
                RunMode::Eval => RunMode::Eval,
                RunMode::Train { dropout_seed } => RunMode::Train {
                    dropout_seed: derive_seed(dropout_seed, &format!("item{b}")),
                },
            };
            let needed = prediction_rows(seq);
            let cache =
                self.forward_cached_rows(&seq.ids[..seq.content_len], seq_mode, Some(&needed))?;
            let weights = segment_weights(seq, batch_w)?;
            let mut dlogits = vec![0.0; cache.t_len * vocab];
            for (t, &w) in weights.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let target = seq.ids[t] as usize;
                let row = &cache.logits[(t - 1) * vocab..t * vocab];
                let mut probs = row.to_vec();
                softmax_inplace(&mut probs);
                total += w * -probs[target].max(1e-300).ln();
                let drow = &mut dlogits[(t - 1) * vocab..t * vocab];
                for j in 0..vocab {
                    drow[j] += w * (probs[j] - f64::from(j == target));
                }
            }
            self.backward(&cache, &dlogits, &mut grads);
        }
        Ok((total, grads))
    }
}

fn cross_entropy(row: &[f64], target: usize) -> f64 {
    let mut probs = row.to_vec();
    softmax_inplace(&mut probs);
    -probs[target].max(1e-300).ln()
}

/// Per-position loss weights implementing the segment normalization: a
/// masked position in segment s contributes 1/(|s| * n_segments) of the
/// sequence loss (times the batch weight). Position 0 can never be a target.
fn segment_weights(seq: &AssembledSequence, batch_w: f64) -> Result<Vec<f64>, ModelError> {
    if seq.segments.is_empty() || !seq.loss_mask.iter().any(|&m| m) {
        return Err(ModelError::NoMaskedPositions { example_id: seq.example_id.clone() });
    }
    let n_seg = seq.segments.len() as f64;
    let mut weights = vec![0.0; seq.content_len];
    for seg in &seq.segments {
        let len = (seg.end - seg.start) as f64;
        for t in seg.start..seg.end {
            debug_assert!(seq.loss_mask[t], "segment positions must be masked");
            debug_assert!(t > 0, "position 0 has no preceding logit row");
            weights[t] = batch_w / (len * n_seg);
        }
    }
    Ok(weights)
}

/// Logit rows the loss actually reads: row t-1 for every masked position t.
fn prediction_rows(seq: &AssembledSequence) -> Vec<bool> {
    let mut need = vec![false; seq.content_len];
    for seg in &seq.segments {
        for t in seg.start..seg.end {
            need[t - 1] = true;
        }
    }
    need
}

impl Parameters {
    /// Disjoint mutable access to two named tensors.
    pub fn get_two_mut(&mut self, a: &str, b: &str) -> [&mut super::params::Tensor; 2] {
        let ia = self.tensors.iter().position(|t| t.name == a).unwrap();
        let ib = self.tensors.iter().position(|t| t.name == b).unwrap();
        assert_ne!(ia, ib);
        if ia < ib {
            let (l, r) = self.tensors.split_at_mut(ib);
            [&mut l[ia], &mut r[0]]
        } else {
            let (l, r) = self.tensors.split_at_mut(ia);
            let [x, y] = [&mut r[0], &mut l[ib]];
            [x, y]
        }
    }
}
