//! Speculative decoding for mixed visual+text toy transformers.
//!
//! The crate bundles a desk-scale target model, a single-layer draft model
//! that reuses the target's hidden states and keeps its attention strictly in
//! the text domain, a tree-based draft/verify decoding engine, training
//! pipelines for both models, and a benchmark/analysis harness.

pub mod bench;
pub mod checkpoint;
pub mod draft;
pub mod error;
pub mod model;
pub mod numkernel;
pub mod specdec;
pub mod train;

pub use error::{Error, Result};

#[cfg(test)]
pub(crate) mod testutil {
    use crate::model::{ModelConfig, TokenSequence};
    use crate::numkernel::Rng;

    pub fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            num_layers: 4,
            hidden_dim: 16,
            num_heads: 2,
            vocab_size: 24,
            max_positions: 128,
            visual_alphabet: 4,
        }
    }

    pub fn random_seq(cfg: &ModelConfig, l_vis: usize, l_txt: usize, seed: u64) -> TokenSequence {
        let mut rng = Rng::new(seed);
        let mut seq = TokenSequence::new();
        for _ in 0..l_vis {
            let emb: Vec<f32> =
                (0..cfg.hidden_dim).map(|_| rng.next_gaussian() as f32 * 0.5).collect();
            seq.push_visual(emb, rng.next_below(cfg.visual_alphabet)).unwrap();
        }
        for _ in 0..l_txt {
            seq.push_text(rng.next_below(cfg.vocab_size) as u32);
        }
        seq
    }
}
