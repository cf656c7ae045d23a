//! Named parameter tensors in a fixed, documented order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Tensor {
        Tensor { name: name.into(), rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// All learnable tensors. The vector order is the checkpoint serialization
/// order: embed, pos, then per layer (ln1.g, ln1.b, wq, bq, wk, bk, wv, bv,
/// wo, bo, ln2.g, ln2.b, w1, b1, w2, b2), then final_ln.g, final_ln.b.
/// The token embedding doubles as the output projection (weight tying).
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub tensors: Vec<Tensor>,
}

impl Parameters {
    /// Allocate all tensors (zero-filled) for a config.
    pub fn zeros(cfg: &ModelConfig) -> Parameters {
        let d = cfg.d_model;
        let mut tensors = vec![
            Tensor::zeros("embed", cfg.vocab_size, d),
            Tensor::zeros("pos", cfg.max_seq_len, d),
        ];
        for l in 0..cfg.n_layers {
            let p = |n: &str| format!("layer{l}.{n}");
            tensors.push(Tensor::zeros(p("ln1.g"), 1, d));
            tensors.push(Tensor::zeros(p("ln1.b"), 1, d));
            tensors.push(Tensor::zeros(p("attn.wq"), d, d));
            tensors.push(Tensor::zeros(p("attn.bq"), 1, d));
            tensors.push(Tensor::zeros(p("attn.wk"), d, d));
            tensors.push(Tensor::zeros(p("attn.bk"), 1, d));
            tensors.push(Tensor::zeros(p("attn.wv"), d, d));
            tensors.push(Tensor::zeros(p("attn.bv"), 1, d));
            tensors.push(Tensor::zeros(p("attn.wo"), d, d));
            tensors.push(Tensor::zeros(p("attn.bo"), 1, d));
            tensors.push(Tensor::zeros(p("ln2.g"), 1, d));
            tensors.push(Tensor::zeros(p("ln2.b"), 1, d));
            tensors.push(Tensor::zeros(p("mlp.w1"), cfg.d_ff, d));
            tensors.push(Tensor::zeros(p("mlp.b1"), 1, cfg.d_ff));
            tensors.push(Tensor::zeros(p("mlp.w2"), d, cfg.d_ff));
            tensors.push(Tensor::zeros(p("mlp.b2"), 1, d));
        }
        tensors.push(Tensor::zeros("final_ln.g", 1, d));
        tensors.push(Tensor::zeros("final_ln.b", 1, d));
        Parameters { tensors }
    }

    /// Random initialization: N(0, 0.02) for embeddings and weight matrices,
    /// zeros for biases, ones for layer-norm gains.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Parameters {
        let mut p = Self::zeros(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).unwrap();
        for t in p.tensors.iter_mut() {
            if t.name.ends_with(".g") {
                t.data.fill(1.0);
            } else if t.rows > 1 {
                // weight matrices and embeddings; all biases keep rows == 1
                // and stay zero
                for v in t.data.iter_mut() {
                    *v = normal.sample(&mut rng);
                }
            }
        }
        p
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .unwrap_or_else(|| panic!("no tensor named {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.tensors
            .iter_mut()
            .find(|t| t.name == name)
            .unwrap_or_else(|| panic!("no tensor named {name}"))
    }

    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Zero every value (reuse as a gradient accumulator).
    pub fn zero(&mut self) {
        for t in self.tensors.iter_mut() {
            t.data.fill(0.0);
        }
    }
}

/// Gradients share the Parameters layout.
pub type Gradients = Parameters;

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            max_seq_len: 32,
            vocab_size: 32,
            dropout_rate: 0.0,
        }
    }

    #[test]
    fn allocated_total_matches_closed_form() {
        for cfg in [tiny(), ModelConfig::toy(216)] {
            let p = Parameters::zeros(&cfg);
            assert_eq!(p.total_len(), cfg.param_count());
        }
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let cfg = tiny();
        let a = Parameters::init(&cfg, 1);
        let b = Parameters::init(&cfg, 1);
        let c = Parameters::init(&cfg, 2);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn layernorm_gains_start_at_one() {
        let p = Parameters::init(&tiny(), 0);
        assert!(p.get("layer0.ln1.g").data.iter().all(|&v| v == 1.0));
        assert!(p.get("final_ln.b").data.iter().all(|&v| v == 0.0));
        assert!(p.get("layer0.attn.bq").data.iter().all(|&v| v == 0.0));
    }
}
