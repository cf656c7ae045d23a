//! Greedy decoding with an incremental KV cache.

use super::math::*;
use super::{Model, ModelError};
use crate::channels::EOS;

/// Per-layer cached keys and values, growing one position at a time.
pub struct KvCache {
    k: Vec<Vec<f64>>, // per layer, flat (t_len x d)
    v: Vec<Vec<f64>>,
    t_len: usize,
}

impl KvCache {
    pub fn new(n_layers: usize) -> KvCache {
        KvCache { k: vec![Vec::new(); n_layers], v: vec![Vec::new(); n_layers], t_len: 0 }
    }

    pub fn len(&self) -> usize {
        self.t_len
    }

    pub fn is_empty(&self) -> bool {
        self.t_len == 0
    }
}

impl Model {
    /// Advance the cache by one token; returns the logit row at the new
    /// position. Same math as the full forward, computed incrementally.
    pub fn decode_step(&self, cache: &mut KvCache, id: u32) -> Result<Vec<f64>, ModelError> {
        let cfg = &self.config;
        if id as usize >= cfg.vocab_size {
            return Err(ModelError::OutOfVocab(id));
        }
        let t = cache.t_len;
        if t >= cfg.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                example_id: "<decode>".into(),
                len: t + 1,
                max: cfg.max_seq_len,
            });
        }
        let d = cfg.d_model;
        let heads = cfg.n_heads;
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let p = &self.params;

        let embed = &p.get("embed").data;
        let pos = &p.get("pos").data;
        let mut x = vec![0.0; d];
        for i in 0..d {
            x[i] = embed[id as usize * d + i] + pos[t * d + i];
        }

        for l in 0..cfg.n_layers {
            let name = |n: &str| format!("layer{l}.{n}");
            let mut ln1 = vec![0.0; d];
            let (mut m, mut r) = (vec![0.0; 1], vec![0.0; 1]);
            layernorm_fwd(&x, &p.get(&name("ln1.g")).data, &p.get(&name("ln1.b")).data, 1, d, &mut ln1, &mut m, &mut r);

            let mut q = vec![0.0; d];
            let mut k_new = vec![0.0; d];
            let mut v_new = vec![0.0; d];
            linear_fwd(&ln1, &p.get(&name("attn.wq")).data, &p.get(&name("attn.bq")).data, 1, d, d, &mut q);
            linear_fwd(&ln1, &p.get(&name("attn.wk")).data, &p.get(&name("attn.bk")).data, 1, d, d, &mut k_new);
            linear_fwd(&ln1, &p.get(&name("attn.wv")).data, &p.get(&name("attn.bv")).data, 1, d, d, &mut v_new);
            cache.k[l].extend_from_slice(&k_new);
            cache.v[l].extend_from_slice(&v_new);

            let all_k = &cache.k[l];
            let all_v = &cache.v[l];
            let mut ctx = vec![0.0; d];
            let mut scores = vec![0.0; t + 1];
            for h in 0..heads {
                let off = h * hd;
                for (t2, s) in scores.iter_mut().enumerate() {
                    *s = dot(&q[off..off + hd], &all_k[t2 * d + off..t2 * d + off + hd]) * scale;
                }
                softmax_inplace(&mut scores);
                for (t2, &a) in scores.iter().enumerate() {
                    axpy(a, &all_v[t2 * d + off..t2 * d + off + hd], &mut ctx[off..off + hd]);
                }
            }
            let mut attn_out = vec![0.0; d];
            linear_fwd(&ctx, &p.get(&name("attn.wo")).data, &p.get(&name("attn.bo")).data, 1, d, d, &mut attn_out);
            for i in 0..d {
                x[i] += attn_out[i];
            }

            let mut ln2 = vec![0.0; d];
            layernorm_fwd(&x, &p.get(&name("ln2.g")).data, &p.get(&name("ln2.b")).data, 1, d, &mut ln2, &mut m, &mut r);
            let mut h1 = vec![0.0; cfg.d_ff];
            linear_fwd(&ln2, &p.get(&name("mlp.w1")).data, &p.get(&name("mlp.b1")).data, 1, d, cfg.d_ff, &mut h1);
            for v in h1.iter_mut() {
                *v = gelu(*v);
            }
            let mut mlp_out = vec![0.0; d];
            linear_fwd(&h1, &p.get(&name("mlp.w2")).data, &p.get(&name("mlp.b2")).data, 1, cfg.d_ff, d, &mut mlp_out);
            for i in 0..d {
                x[i] += mlp_out[i];
            }
        }

        let mut lnf = vec![0.0; d];
        let (mut m, mut r) = (vec![0.0; 1], vec![0.0; 1]);
        layernorm_fwd(&x, &p.get("final_ln.g").data, &p.get("final_ln.b").data, 1, d, &mut lnf, &mut m, &mut r);
        let mut logits = vec![0.0; cfg.vocab_size];
        for (j, l) in logits.iter_mut().enumerate() {
            *l = dot(&lnf, &embed[j * d..(j + 1) * d]);
        }
        cache.t_len += 1;
        Ok(logits)
    }

    /// Greedy decode: feed the prefix, then repeatedly append the argmax
    /// token (ties resolve to the lowest id) until EOS or `max_new` tokens.
    /// EOS is not included in the returned ids.
    pub fn greedy_decode(&self, prefix: &[u32], max_new: usize) -> Result<Vec<u32>, ModelError> {
        assert!(max_new >= 1);
        let mut cache = KvCache::new(self.config.n_layers);
        let mut logits = vec![0.0; self.config.vocab_size];
        for &id in prefix {
            logits = self.decode_step(&mut cache, id)?;
        }
        let mut out = Vec::new();
        for _ in 0..max_new {
            let next = argmax(&logits) as u32;
            if next == EOS {
                break;
            }
            out.push(next);
            if cache.t_len >= self.config.max_seq_len {
                break;
            }
            logits = self.decode_step(&mut cache, next)?;
        }
        Ok(out)
    }
}
