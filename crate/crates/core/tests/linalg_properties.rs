use algebraformer::linalg::{self, DenseMatrix, LuFactorization};
use proptest::prelude::*;

fn square(max: usize) -> impl Strategy<Value = DenseMatrix> {
    (1..=max).prop_flat_map(|n| {
        prop::collection::vec(-1.0f64..1.0, n * n).prop_map(move |v| DenseMatrix::new(n, n, v).unwrap())
    })
}

fn tall(max_n: usize) -> impl Strategy<Value = DenseMatrix> {
    (1..=max_n, 0..=8usize).prop_flat_map(|(n, extra)| {
        let m = n + extra;
        prop::collection::vec(-1.0f64..1.0, m * n).prop_map(move |v| DenseMatrix::new(m, n, v).unwrap())
    })
}

fn any_shape() -> impl Strategy<Value = DenseMatrix> {
    (1..=10usize, 1..=10usize).prop_flat_map(|(m, n)| {
        prop::collection::vec(-2.0f64..2.0, m * n).prop_map(move |v| DenseMatrix::new(m, n, v).unwrap())
    })
}

fn rhs(n: usize, seed: u64) -> Vec<f64> {
    (0..n).map(|i| ((i as f64 + 1.0) * (seed as f64 * 0.37 + 0.11)).sin()).collect()
}

fn gram_defect(q: &DenseMatrix) -> f64 {
    let g = q.transpose().matmul(q).unwrap();
    g.sub(&DenseMatrix::identity(g.rows())).unwrap().norm_fro()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn lu_residual_bounded_by_condition(a in square(12), seed in any::<u64>()) {
        let cond = linalg::condition_number(&a).unwrap();
        prop_assume!(cond < 1e6);
        let b = rhs(a.rows(), seed);
        let x = linalg::lu_solve(&a, &b).unwrap();
        let r = a.matvec(&x).unwrap().sub(&b);
        prop_assert!(r.norm2() / linalg::norm2(&b) <= cond * 1e-13);
    }

    #[test]
    fn lu_is_invariant_to_row_order(a in square(12), seed in any::<u64>(), shuffle in any::<u64>()) {
        prop_assume!(LuFactorization::factor(&a).is_ok());
        let n = a.rows();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut s = shuffle;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let b = rhs(n, seed);
        let pb: Vec<f64> = perm.iter().map(|&i| b[i]).collect();
        let x = linalg::lu_solve(&a, &b).unwrap();
        let y = linalg::lu_solve(&a.permute_rows(&perm), &pb).unwrap();
        prop_assert!(x.sub(&y).norm_inf() <= 1e-12 * x.norm_inf().max(1.0));
    }

    #[test]
    fn qr_and_svd_agree_on_tall_systems(a in tall(8), seed in any::<u64>()) {
        let s = linalg::svd(&a).unwrap();
        let sv = &s.singular_values;
        let cond = sv[0] / sv[sv.len() - 1];
        prop_assume!(cond < 1e6);
        let b = rhs(a.rows(), seed);
        let xq = linalg::qr_least_squares(&a, &b).unwrap();
        let xs = linalg::svd_least_squares(&a, &b, 1e-15).unwrap();
        prop_assert!(xq.sub(&xs).norm2() <= 1e-8 * xq.norm2().max(1e-300));
    }

    #[test]
    fn svd_factors_are_orthogonal(a in any_shape()) {
        let s = linalg::svd(&a).unwrap();
        prop_assert!(gram_defect(&s.u) <= 1e-10);
        prop_assert!(gram_defect(&s.v) <= 1e-10);
        prop_assert!(s.singular_values.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(s.reconstruct().sub(&a).unwrap().norm_fro() <= 1e-12 * a.norm_fro().max(1.0));
    }
}

/// Condition number of the 4×4 Hilbert matrix, from a 50-digit mpmath
/// evaluation of σ_max/σ_min.
const HILBERT4_COND: f64 = 15513.738738932588;

#[test]
fn hilbert_condition_matches_high_precision_reference() {
    let cond = linalg::condition_number(&DenseMatrix::hilbert(4)).unwrap();
    assert!((cond - HILBERT4_COND).abs() <= 0.01 * HILBERT4_COND, "{cond}");
}
