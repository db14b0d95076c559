use proptest::prelude::*;
use skewcert::genericity::{flat_top_profile, genericity_feasible};
use skewcert::graph::{s_derivative, s_value, tail_bounds, tail_value};
use skewcert::srb::{fiber_norm_sq, fiber_pair_sum, histogram, Method, SampleCloud};
use skewcert::system::in_cde;
use skewcert::transversality::{tau_upper, TauOptions};
use skewcert::{build_partition, derive_constants, Contraction, ExpandingMap, Mat, TrigPolynomial, Word};

fn word(symbols: u32, max_len: usize) -> impl Strategy<Value = Word> {
    prop::collection::vec(0..symbols, 1..=max_len).prop_map(Word)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn extend_then_truncate_is_identity(a in word(3, 8), w in word(3, 8)) {
        let long = a.extend(&w);
        prop_assert_eq!(long.len(), a.len() + w.len());
        prop_assert_eq!(long.truncate(a.len()), a);
    }

    #[test]
    fn branch_chain_inverts_the_map(m in 2i64..6, a in word(2, 10), x in 0.0f64..1.0) {
        let e = ExpandingMap::scalar(m);
        let code = build_partition(&e, 0).unwrap();
        let chain = code.branch_chain(&a, &[x]).unwrap();
        let mut prev = x;
        for z in &chain {
            let back = (m as f64 * z[0]).rem_euclid(1.0);
            let gap = (back - prev).abs();
            prop_assert!(gap.min(1.0 - gap) < 1e-9);
            prev = z[0];
        }
    }

    #[test]
    fn extensions_stay_in_the_tail_radius(
        lambda in 0.35f64..0.95,
        eps in 0.1f64..2.0,
        a in word(3, 8),
        w in word(3, 20),
        x in 0.0f64..1.0,
    ) {
        let e = ExpandingMap::scalar(3);
        let code = build_partition(&e, 0).unwrap();
        let sys = derive_constants(e, Contraction::scalar(lambda).unwrap(), TrigPolynomial::cosine(eps)).unwrap();
        let k = &sys.constants;
        let long = a.extend(&w);
        let dv = (s_value(&sys, &code, &long, &[x]).unwrap()[0] - s_value(&sys, &code, &a, &[x]).unwrap()[0]).abs();
        prop_assert!(dv <= tail_value(k, a.len()) + 1e-12);
        let dd = (s_derivative(&sys, &code, &long, &[x]).unwrap()[(0, 0)] - s_derivative(&sys, &code, &a, &[x]).unwrap()[(0, 0)]).abs();
        prop_assert!(dd <= tail_bounds(k, a.len()).0 + 1e-12);
    }

    #[test]
    fn tau_is_bounded_by_the_word_count(lambda in 0.55f64..0.95, eps in 0.1f64..3.0, q in 1usize..4) {
        let e = ExpandingMap::scalar(2);
        let code = build_partition(&e, 0).unwrap();
        let sys = derive_constants(e, Contraction::scalar(lambda).unwrap(), TrigPolynomial::cosine(eps)).unwrap();
        let coarse = tau_upper(&sys, &code, q, 2, &TauOptions { grid_step: 1e-2, ..TauOptions::default() }).unwrap();
        let fine = tau_upper(&sys, &code, q, 2, &TauOptions { grid_step: 5e-3, ..TauOptions::default() }).unwrap();
        prop_assert!(coarse.tau_upper <= 1 << q);
        prop_assert!(fine.tau_upper <= coarse.tau_upper);
        prop_assert!(coarse.tau_upper >= 1);
    }

    #[test]
    fn pair_sums_match_brute_force(ys in prop::collection::vec(-1.0f64..1.0, 2..60), r in 0.01f64..0.5) {
        let (sum, pairs) = fiber_pair_sum(&ys, 1, r);
        let (mut bs, mut bp) = (0.0, 0u64);
        for (i, a) in ys.iter().enumerate() {
            for (j, b) in ys.iter().enumerate() {
                if i != j && (a - b).abs() < 2.0 * r {
                    bs += 2.0 * r - (a - b).abs();
                    bp += 1;
                }
            }
        }
        prop_assert!((sum - bs).abs() <= 1e-9 * bs.max(1.0));
        prop_assert_eq!(pairs, bp);
    }

    #[test]
    fn fiber_norm_is_translation_invariant(ys in prop::collection::vec(-1.0f64..1.0, 2..60), shift in -5.0f64..5.0) {
        let moved: Vec<f64> = ys.iter().map(|y| y + shift).collect();
        let (a, b) = (fiber_norm_sq(&ys, 1, 0.1), fiber_norm_sq(&moved, 1, 0.1));
        prop_assert!((a - b).abs() <= 1e-9 * a.max(1e-9));
    }

    #[test]
    fn histogram_accounts_for_every_point(
        pts in prop::collection::vec((0.0f64..1.0, -3.0f64..3.0), 1..200),
        half_width in 0.5f64..2.5,
    ) {
        let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        let n = x.len() as u64;
        let cloud = SampleCloud::new(1, 1, x, y, Method::Synthetic).unwrap();
        let h = histogram(&cloud, 8, 8, half_width).unwrap();
        prop_assert_eq!(h.counts.iter().sum::<u64>() + h.out_of_range, n);
    }

    #[test]
    fn profile_stays_in_range(s in -0.5f64..1.5) {
        let (rho, drho) = flat_top_profile(s);
        prop_assert!((0.0..=1.0).contains(&rho));
        prop_assert!(drho <= 0.0);
        prop_assert!(rho + s.abs() * drho.abs() < 1.7);
    }

    #[test]
    fn constants_solver_matches_membership(m in 2i64..6, diag in prop::collection::vec(0.05f64..1.1, 1..3), dim2 in any::<bool>()) {
        let e = if dim2 { ExpandingMap::diagonal(&[m, 2]).unwrap() } else { ExpandingMap::scalar(m) };
        let d = diag.len().min(e.dim());
        let c = Contraction::new(Mat::diag(&diag[..d])).unwrap();
        prop_assert_eq!(genericity_feasible(&e, &c), in_cde(&e, &c));
    }
}
