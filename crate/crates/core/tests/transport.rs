mod common;

use mfa_core::seed::{rng_for, sample_ball, Stream};
use mfa_core::transport::cloud_w2_sq;
use mfa_core::{coupled_distance, wasserstein, EmpiricalMeasure, HeadCloud, Order};
use proptest::prelude::*;
use rand::Rng;

const ORDERS: [Order; 3] = [Order::One, Order::Two, Order::Infinity];

fn uniform<R: Rng>(rng: &mut R, n: usize, d: usize) -> EmpiricalMeasure {
    EmpiricalMeasure::uniform(d, (0..n).flat_map(|_| sample_ball(rng, d, 1.0)).collect()).unwrap()
}

#[test]
fn assignment_matches_enumeration() {
    let mut rng = rng_for(3, Stream::Fuzz, &[]);
    for _ in 0..200 {
        let n = rng.random_range(1..=6);
        let (a, b) = (uniform(&mut rng, n, 3), uniform(&mut rng, n, 3));
        let (w1, w2, wi) = common::brute_force_w(&a, &b);
        assert_eq!(wasserstein(&a, &b, Order::One).unwrap(), w1);
        assert_eq!(wasserstein(&a, &b, Order::Two).unwrap(), w2);
        assert_eq!(wasserstein(&a, &b, Order::Infinity).unwrap(), wi);
    }
}

// A weight of m/n on an atom is the same measure as m uniform copies of it,
// so the flow solver must agree with the assignment solver on the expansion.
#[test]
fn weighted_flow_matches_expanded_assignment() {
    let mut rng = rng_for(4, Stream::Fuzz, &[]);
    for _ in 0..100 {
        let n = 6;
        let split = |rng: &mut rand_chacha::ChaCha8Rng| {
            let k = rng.random_range(2..=4);
            let mut counts = vec![1usize; k];
            for _ in k..n {
                let i = rng.random_range(0..k);
                counts[i] += 1;
            }
            counts
        };
        let (ca, cb) = (split(&mut rng), split(&mut rng));
        let pa: Vec<Vec<f64>> = ca.iter().map(|_| sample_ball(&mut rng, 2, 1.0)).collect();
        let pb: Vec<Vec<f64>> = cb.iter().map(|_| sample_ball(&mut rng, 2, 1.0)).collect();
        let weighted = |p: &[Vec<f64>], c: &[usize]| {
            EmpiricalMeasure::from_points(p, c.iter().map(|&m| m as f64 / n as f64).collect()).unwrap()
        };
        let expanded = |p: &[Vec<f64>], c: &[usize]| {
            EmpiricalMeasure::uniform(2, p.iter().zip(c).flat_map(|(x, &m)| x.repeat(m)).collect()).unwrap()
        };
        let (wa, wb) = (weighted(&pa, &ca), weighted(&pb, &cb));
        let (ea, eb) = (expanded(&pa, &ca), expanded(&pb, &cb));
        for o in ORDERS {
            let x = wasserstein(&wa, &wb, o).unwrap();
            let y = wasserstein(&ea, &eb, o).unwrap();
            assert!((x - y).abs() <= 1e-12, "{o:?}: {x} vs {y}");
        }
    }
}

#[test]
fn point_masses_are_at_their_distance() {
    let a = EmpiricalMeasure::uniform(2, vec![0.0, 0.0]).unwrap();
    let b = EmpiricalMeasure::uniform(2, vec![3.0, 4.0]).unwrap();
    for o in ORDERS {
        assert_eq!(wasserstein(&a, &b, o).unwrap(), 5.0);
    }
}

#[test]
fn clouds_with_permuted_atoms_are_at_distance_zero() {
    let mut rng = rng_for(5, Stream::Fuzz, &[]);
    let heads: Vec<_> = (0..4).map(|_| mfa_core::seed::xavier_head(&mut rng, 2, 4)).collect();
    let mut rev = heads.clone();
    rev.reverse();
    let a = HeadCloud::uniform(heads).unwrap();
    let b = HeadCloud::uniform(rev).unwrap();
    assert_eq!(cloud_w2_sq(&a, &b).unwrap(), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metric_axioms_and_order_monotonicity(seed in 0u64..10_000, n in 1usize..6) {
        let mut rng = rng_for(seed, Stream::Fuzz, &[6]);
        let (a, b, c) = (uniform(&mut rng, n, 3), uniform(&mut rng, n, 3), uniform(&mut rng, n, 3));
        for o in ORDERS {
            let ab = wasserstein(&a, &b, o).unwrap();
            prop_assert_eq!(wasserstein(&a, &a, o).unwrap(), 0.0);
            prop_assert!((ab - wasserstein(&b, &a, o).unwrap()).abs() <= 1e-12);
            let via = wasserstein(&a, &c, o).unwrap() + wasserstein(&c, &b, o).unwrap();
            prop_assert!(ab <= via + 1e-12);
        }
        let w1 = wasserstein(&a, &b, Order::One).unwrap();
        let w2 = wasserstein(&a, &b, Order::Two).unwrap();
        let wi = wasserstein(&a, &b, Order::Infinity).unwrap();
        prop_assert!(w1 <= w2 + 1e-12 && w2 <= wi + 1e-12);
    }

    #[test]
    fn marginals_contract_and_coupling_dominates(seed in 0u64..10_000, n in 1usize..6) {
        let mut rng = rng_for(seed, Stream::Fuzz, &[7]);
        let (a, b) = (uniform(&mut rng, n, 4), uniform(&mut rng, n, 4));
        for o in ORDERS {
            let full = wasserstein(&a, &b, o).unwrap();
            let xs = wasserstein(&a.marginal(0, 2).unwrap(), &b.marginal(0, 2).unwrap(), o).unwrap();
            prop_assert!(xs <= full + 1e-12);
        }
        prop_assert!(wasserstein(&a, &b, Order::Two).unwrap() <= coupled_distance(&a, &b).unwrap() + 1e-12);
    }
}
