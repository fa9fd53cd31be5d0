mod common;

use common::*;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn thin_qr_is_orthonormal(rows in 1usize..40, cols in 1usize..40, seed in any::<u64>()) {
        qr_orthogonality(rows, cols, seed)?;
    }

    #[test]
    fn gradient_agrees_with_central_differences(kind in kind_strategy(), n in 5usize..30, p in 1usize..8, seed in any::<u64>()) {
        gradient_matches_finite_differences(kind, n, p, seed)?;
    }

    #[test]
    fn local_step_preserves_orthogonal_complement(
        kind in kind_strategy(), b in 1usize..12, p in 1usize..16, h in 0.01f64..50.0, seed in any::<u64>()
    ) {
        complement_conserved(kind, b, p, h, seed)?;
    }

    #[test]
    fn local_step_never_increases_batch_loss(
        kind in kind_strategy(), b in 1usize..12, p in 1usize..16, h in 0.01f64..50.0, seed in any::<u64>()
    ) {
        batch_loss_monotone(kind, b, p, h, seed)?;
    }

    #[test]
    fn softmax_columns_sum_to_one(rows in 1usize..12, cols in 1usize..8, scale in 0.0f64..500.0, seed in any::<u64>()) {
        softmax_columns_normalized(rows, cols, scale, seed)?;
    }
}
