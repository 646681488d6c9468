use algebraformer::chebyshev::{self, ChebyshevGrid};
use proptest::prelude::*;

fn grid(n: usize) -> ChebyshevGrid {
    chebyshev::gauss_lobatto_nodes(n).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn monomials_differentiate_exactly((n, k) in (1usize..=32).prop_flat_map(|n| (Just(n), 0..=n))) {
        let g = grid(n);
        let d = chebyshev::diff_matrix(&g);
        let u = g.sample(|x| x.powi(k as i32));
        let du = d.apply(&u);
        let tol = 1e-9 * (n as f64 * n as f64).max(1.0);
        for (j, &x) in g.reference_nodes().iter().enumerate() {
            let exact = if k == 0 { 0.0 } else { k as f64 * x.powi(k as i32 - 1) };
            prop_assert!((du[j] - exact).abs() <= tol, "N={n} k={k} node {j}: {} vs {exact}", du[j]);
        }
    }

    #[test]
    fn interpolant_reproduces_polynomials(
        coeffs in prop::collection::vec(-1.0f64..1.0, 1..=10),
        x in 0.0f64..7.5,
    ) {
        let n = coeffs.len() + 2;
        let g = grid(n).mapped(0.0, 7.5).unwrap();
        let p = |t: f64| coeffs.iter().rev().fold(0.0, |acc, c| acc * (t / 7.5) + c);
        let values = g.sample(p);
        let y = chebyshev::barycentric_eval(&g, &values, x).unwrap();
        prop_assert!((y - p(x)).abs() <= 1e-11);
    }
}

#[test]
fn high_power_of_d_annihilates_low_degree_polynomials() {
    for n in 1..=8 {
        let g = grid(n);
        let d = chebyshev::diff_matrix(&g);
        let dn = d.matrix().norm_inf();
        for k in 0..=n {
            let mut v = g.sample(|x| (x + 0.3).powi(k as i32));
            let tol = 1e-6 * dn.powi(n as i32 + 1) * v.norm_inf();
            for _ in 0..=n {
                v = d.apply(&v);
            }
            assert!(v.norm_inf() <= tol, "N={n} k={k}: {}", v.norm_inf());
        }
    }
}

#[test]
fn reference_interval_scaling_is_identity() {
    for n in [2, 7, 16] {
        let d = chebyshev::diff_matrix(&grid(n));
        let s = chebyshev::scale_to_interval(&d, -1.0, 1.0).unwrap();
        assert_eq!(s.matrix(), d.matrix());
    }
}

#[test]
fn closed_form_diagonal_agrees_for_large_degree() {
    for n in [16, 32, 64] {
        let d = chebyshev::diff_matrix(&grid(n));
        let closed = chebyshev::closed_form_diagonal(n).unwrap();
        for (i, c) in closed.iter().enumerate() {
            let got = d.matrix()[(i, i)];
            assert!((got - c).abs() <= 1e-8 * c.abs().max(1.0), "N={n} i={i}: {got} vs {c}");
        }
    }
}

#[test]
fn exp_error_decays_monotonically() {
    let profile = chebyshev::convergence_profile(f64::exp, f64::exp, &[4, 8, 12, 16, 20, 24]).unwrap();
    for w in profile.windows(2) {
        assert!(w[1].1 <= w[0].1.max(1e-12), "{profile:?}");
    }
}
