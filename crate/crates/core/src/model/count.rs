//! Closed-form parameter counts.

use super::{JamCrossConfig, TransformerConfig};

/// `V·d + T·d + L·(4d² + 2·d·d_ff)`.
pub fn dense_param_count(c: &TransformerConfig) -> usize {
    let d = c.d_model;
    c.vocab_size * d + c.max_seq_len * d + c.n_layers * (4 * d * d + 2 * d * c.d_ff)
}

/// Cross blocks per direction.
pub fn cross_block_count(n_layers: usize, insertion_every: usize) -> usize {
    n_layers / insertion_every
}

/// Two parents, minus one copy of the shared embedding, plus cross blocks in
/// both directions and the `2d × d` output projection.
pub fn cross_param_count(c: &JamCrossConfig) -> usize {
    let b = &c.branch;
    let d = b.d_model;
    let per_block = 4 * d * d + if c.cross_ffn { 2 * d * b.d_ff } else { 0 };
    2 * dense_param_count(b) - b.vocab_size * d
        + 2 * cross_block_count(b.n_layers, c.insertion_every) * per_block
        + 2 * d * d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{JamCross, Trainable, Transformer};

    #[test]
    fn toy_parent_matches_enumeration() {
        let c = TransformerConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 32,
            vocab_size: 64,
            max_seq_len: 16,
            ..TransformerConfig::toy(64)
        };
        let m = Transformer::init(c, 0).unwrap();
        assert_eq!(m.params().num_scalars(), dense_param_count(&c));
        assert_eq!(dense_param_count(&c), 64 * 8 + 16 * 8 + 2 * (4 * 64 + 2 * 8 * 32));
    }

    #[test]
    fn widening_grows_matrices_four_times_and_embeddings_twice() {
        let c = TransformerConfig::toy(50);
        let w = c.widened();
        let emb = |c: &TransformerConfig| (c.vocab_size + c.max_seq_len) * c.d_model;
        assert_eq!(emb(&w), 2 * emb(&c));
        assert_eq!(dense_param_count(&w) - emb(&w), 4 * (dense_param_count(&c) - emb(&c)));
    }

    #[test]
    fn cross_matches_enumeration() {
        for every in 1..=5 {
            for ffn in [false, true] {
                let c = JamCrossConfig {
                    cross_ffn: ffn,
                    ..JamCrossConfig::new(TransformerConfig::toy(40), every)
                };
                let m = JamCross::init(c, 1).unwrap();
                assert_eq!(m.params().num_scalars(), cross_param_count(&c), "every {every} ffn {ffn}");
            }
        }
    }

    /// Reference-scale sizes: 32 layers at d = 4096 with a 4× feed-forward,
    /// 4096 positions, and a ~58k text+image vocabulary.
    #[test]
    fn reference_scale_sizes() {
        let v = 50_265 + 8192 + 4 + 3;
        let c = TransformerConfig {
            n_layers: 32,
            d_model: 4096,
            n_heads: 32,
            d_ff: 4 * 4096,
            vocab_size: v,
            max_seq_len: 4096,
            ..TransformerConfig::toy(v)
        };
        let b = |n: usize| n as f64 / 1e9;
        assert!((b(dense_param_count(&c)) - 6.7).abs() < 0.1);
        assert!((b(dense_param_count(&c.widened())) - 26.0).abs() < 0.5);
        // With feed-forward cross blocks the sizes line up with the reported
        // 13B / 26B / 19B / 16B for no insertion and every 1 / 2 / 4 layers.
        for (every, size) in [(33, 13.0), (1, 26.0), (2, 19.0), (4, 16.0)] {
            let x = JamCrossConfig { cross_ffn: true, ..JamCrossConfig::new(c, every) };
            assert!((b(cross_param_count(&x)) - size).abs() < 0.7, "every {every}");
        }
        // attention-only cross blocks every layer would come to about 17.4B
        let attn_only = cross_param_count(&JamCrossConfig::new(c, 1));
        assert!((b(attn_only) - 17.4).abs() < 0.1);
    }
}
