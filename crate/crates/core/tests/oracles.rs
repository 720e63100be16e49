//! The reference solvers used by the acceptance suite, checked on problems
//! with known answers, then used against the production code.

mod support;

use gmmdict_core::barycenter::project_simplex;
use gmmdict_core::transport::solve_exact_ot;
use gmmdict_core::CostMatrix;
use proptest::prelude::*;

#[test]
fn lp_oracle_small_problems() {
    // min x + 2y, x + y = 1
    let (v, x) = support::lp::minimize(&[1.0, 2.0], &[vec![1.0, 1.0]], &[1.0]).unwrap();
    assert!((v - 1.0).abs() < 1e-12);
    assert!((x[0] - 1.0).abs() < 1e-12);
    // infeasible: x = -1
    assert!(support::lp::minimize(&[1.0], &[vec![1.0]], &[-1.0]).is_none());
    // transport where the anti-diagonal is cheap
    let v = support::lp::transport_value(&[vec![5.0, 1.0], vec![1.0, 5.0]], &[0.5, 0.5], &[0.5, 0.5]);
    assert!((v - 1.0).abs() < 1e-12);
    // unbalanced marginals force mass onto an expensive cell
    let v = support::lp::transport_value(&[vec![0.0, 10.0], vec![10.0, 0.0]], &[0.7, 0.3], &[0.4, 0.6]);
    assert!((v - 3.0).abs() < 1e-12);
}

#[test]
fn qp_oracle_small_problems() {
    assert_eq!(support::qp::project(&[0.2, 0.8]), vec![0.2, 0.8]);
    let p = support::qp::project(&[2.0, 0.0, 0.0]);
    assert!((p[0] - 1.0).abs() < 1e-15 && p[1] == 0.0 && p[2] == 0.0);
    let p = support::qp::project(&[1.0, 1.0]);
    assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);
}

fn problem() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>, Vec<f64>)> {
    (1usize..=6, 1usize..=6).prop_flat_map(|(m, n)| {
        (
            proptest::collection::vec(proptest::collection::vec(0.0f64..20.0, n), m),
            proptest::collection::vec(0.01f64..1.0, m),
            proptest::collection::vec(0.01f64..1.0, n),
        )
            .prop_map(|(c, mu, nu)| {
                let (sm, sn): (f64, f64) = (mu.iter().sum(), nu.iter().sum());
                (c, mu.iter().map(|x| x / sm).collect(), nu.iter().map(|x| x / sn).collect())
            })
    })
}

proptest! {
    #[test]
    fn transport_matches_lp((cost, mu, nu) in problem()) {
        let (plan, value) = solve_exact_ot(&CostMatrix(cost.clone()), &mu, &nu).unwrap();
        let reference = support::lp::transport_value(&cost, &mu, &nu);
        prop_assert!((value - reference).abs() <= 1e-9 * reference.abs().max(1.0));
        prop_assert!(plan.marginal_error() < 1e-12);
        prop_assert!((plan.cost(&CostMatrix(cost)) - value).abs() < 1e-9);
    }

    #[test]
    fn degenerate_marginals_match_lp(m in 2usize..5, n in 2usize..5, c in proptest::collection::vec(0u8..4, 25)) {
        // integer costs and uniform marginals produce many ties
        let cost: Vec<Vec<f64>> = (0..m).map(|i| (0..n).map(|j| c[i * 5 + j] as f64).collect()).collect();
        let mu = vec![1.0 / m as f64; m];
        let nu = vec![1.0 / n as f64; n];
        let (_, value) = solve_exact_ot(&CostMatrix(cost.clone()), &mu, &nu).unwrap();
        prop_assert!((value - support::lp::transport_value(&cost, &mu, &nu)).abs() < 1e-9);
    }

    #[test]
    fn projection_matches_qp(v in proptest::collection::vec(-4.0f64..4.0, 1..7)) {
        let p = project_simplex(&v);
        let q = support::qp::project(&v);
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
