//! Randomised properties of the model outputs and the checkpoint format.

use proptest::prelude::*;
use tinylm::{Checkpoint, Model, ModelConfig};

fn tiny() -> ModelConfig {
    ModelConfig { layers: 1, heads: 2, kv_heads: 1, dim: 8, hidden_dim: 16, vocab_size: 40, seq_len: 16, ..ModelConfig::toy() }
}

fn tokens() -> impl Strategy<Value = Vec<u32>> {
    prop::collection::vec(0u32..40, 2..16)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn next_token_distribution_sums_to_one(seq in tokens(), seed in any::<u64>()) {
        let ckpt = Checkpoint::init(tiny(), seed).unwrap();
        let model = ckpt.model().unwrap();
        let p = model.next_token_probs(&ckpt.params, &seq).unwrap();
        prop_assert_eq!(p.len(), 40 * seq.len());
        prop_assert!(p.iter().all(|x| *x >= 0.0));
        for row in p.chunks(40) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn per_token_nll_is_positive_and_finite(seq in tokens(), seed in any::<u64>()) {
        let ckpt = Checkpoint::init(tiny(), seed).unwrap();
        let nll = tinylm::forward_nll(&ckpt, &seq).unwrap();
        prop_assert!(nll.is_finite() && nll > 0.0);
    }

    #[test]
    fn earlier_positions_ignore_later_tokens(seq in tokens(), tail in 0u32..40, seed in any::<u64>()) {
        prop_assume!(seq.len() < 15);
        let ckpt = Checkpoint::init(tiny(), seed).unwrap();
        let model = Model::new(tiny()).unwrap();
        let mut longer = seq.clone();
        longer.push(tail);
        let a = model.next_token_probs(&ckpt.params, &seq).unwrap();
        let b = model.batch_probs(&ckpt.params, &[&longer]).unwrap();
        for (x, y) in a.iter().zip(&b[..a.len()]) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trips_through_disk(seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ckpt = Checkpoint::init(tiny(), seed).unwrap();
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        prop_assert_eq!(back.digest(), ckpt.digest());
        prop_assert_eq!(back.params, ckpt.params);
    }
}
