//! RankMe invariances and bounds.

use forge::diagnostics::{rankme, Smoothing};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn score(z: &[f64], rows: usize, cols: usize) -> f64 {
    rankme(z, rows, cols, Smoothing::None).unwrap().score
}

fn matrix() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (2usize..10, 2usize..8).prop_flat_map(|(r, c)| (Just(r), Just(c), prop::collection::vec(-3.0f64..3.0, r * c)))
}

proptest! {
    #[test]
    fn positive_scaling_leaves_score_unchanged((r, c, z) in matrix(), k in 0.01f64..100.0) {
        let scaled: Vec<f64> = z.iter().map(|x| k * x).collect();
        prop_assert!((score(&z, r, c) - score(&scaled, r, c)).abs() <= 1e-12 * (r.min(c) as f64));
    }

    #[test]
    fn row_order_does_not_matter((r, c, z) in matrix(), shift in 1usize..9) {
        let rotated: Vec<f64> = (0..r).flat_map(|i| z[((i + shift) % r) * c..((i + shift) % r + 1) * c].to_vec()).collect();
        prop_assert!((score(&z, r, c) - score(&rotated, r, c)).abs() <= 1e-12 * (r.min(c) as f64));
    }

    #[test]
    fn orthogonal_column_mixing_leaves_score_unchanged((r, c, z) in matrix(), seed in prop::collection::vec(-1.0f64..1.0, 64)) {
        let q = DMatrix::from_fn(c, c, |i, j| seed[(i * 8 + j) % 64] + if i == j { 2.0 } else { 0.0 }).qr().q();
        let m = DMatrix::from_row_slice(r, c, &z) * q;
        let mixed: Vec<f64> = (0..r).flat_map(|i| (0..c).map(move |j| (i, j))).map(|(i, j)| m[(i, j)]).collect();
        prop_assert!((score(&z, r, c) - score(&mixed, r, c)).abs() <= 1e-10 * (r.min(c) as f64));
    }

    #[test]
    fn stacking_a_matrix_on_itself_keeps_the_score((r, c, z) in matrix()) {
        let stacked: Vec<f64> = z.iter().chain(&z).copied().collect();
        prop_assert!((score(&z, r, c) - score(&stacked, 2 * r, c)).abs() <= 1e-10 * (r.min(c) as f64));
    }

    #[test]
    fn score_lies_between_one_and_the_smaller_dimension((r, c, z) in matrix()) {
        prop_assume!(z.iter().any(|x| x.abs() > 1e-6));
        let report = rankme(&z, r, c, Smoothing::None).unwrap();
        prop_assert!(report.score >= 1.0 - 1e-12 && report.score <= r.min(c) as f64 + 1e-9);
        prop_assert!(report.singular_values.iter().all(|s| *s >= 0.0));
    }
}

#[test]
fn diag_two_one_one_matches_closed_form() {
    let z = [2.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    // p = (1/2, 1/4, 1/4), entropy 1.5 ln 2
    assert!((score(&z, 3, 3) - 2f64.sqrt() * 2.0).abs() < 1e-12);
}

#[test]
fn trained_embeddings_outrank_a_collapsed_head() {
    use tinylm::{Checkpoint, HiddenTap, ModelConfig};
    let cfg = ModelConfig { layers: 1, heads: 2, kv_heads: 1, dim: 16, hidden_dim: 32, seq_len: 32, ..ModelConfig::toy() };
    let ckpt = Checkpoint::init(cfg, 3).unwrap();
    let samples: Vec<Vec<u32>> = (0..6).map(|i| (0..20).map(|j| ((i * 7 + j * 3) % 90 + 32) as u32).collect()).collect();
    let refs: Vec<&[u32]> = samples.iter().map(Vec::as_slice).collect();
    let z = tinylm::output_embeddings(&ckpt, &refs, HiddenTap::default()).unwrap();
    let rows = z.len() / 16;
    let full = score(&z, rows, 16);
    let collapsed: Vec<f64> = z.iter().enumerate().map(|(i, x)| if i % 16 == 0 { *x } else { 0.0 }).collect();
    assert!(full > score(&collapsed, rows, 16));
    assert!((score(&collapsed, rows, 16) - 1.0).abs() < 1e-9);
}
