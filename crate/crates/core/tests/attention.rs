use mfa_core::attention::gamma_with_shift;
use mfa_core::verify;
use mfa_core::linalg::norm;
use mfa_core::seed::{rng_for, Stream};
use mfa_core::{attention_gamma, gamma_z_jacobian, mha_velocity, project_ball, EmpiricalMeasure, HeadCloud, HeadParams};
use proptest::prelude::*;

fn fuzz(i: u64) -> rand_chacha::ChaCha8Rng {
    rng_for(7, Stream::Fuzz, &[i])
}

#[test]
fn projection_examples() {
    assert_eq!(project_ball(&[0.0, 0.0], 1.0).unwrap(), vec![0.0, 0.0]);
    assert_eq!(project_ball(&[0.3, -0.4], 1.0).unwrap(), vec![0.3, -0.4]);
    assert_eq!(project_ball(&[3.0, 0.0], 1.0).unwrap(), vec![2.0, 0.0]);
    assert!(project_ball(&[f64::NAN], 1.0).is_err());
    assert!(project_ball(&[1.0], 0.0).is_err());
}

#[test]
fn two_atom_closed_forms() {
    let mu = EmpiricalMeasure::uniform(2, vec![1.0, 0.0, -1.0, 0.0]).unwrap();
    let g = attention_gamma(&[1.0, 0.0], &mu, None).unwrap();
    assert!((g.value[0] - 1f64.tanh()).abs() < 1e-15);
    assert_eq!(g.value[1], 0.0);
    let j = gamma_z_jacobian(&[1.0, 0.0], &mu).unwrap();
    assert!((j[(0, 0)] - (1.0 - 1f64.tanh().powi(2))).abs() < 1e-15);
    assert_eq!(j[(1, 1)], 0.0);
}

#[test]
fn dirac_measure_returns_its_atom() {
    let mu = EmpiricalMeasure::uniform(3, vec![0.2, -0.7, 1.1]).unwrap();
    let g = attention_gamma(&[40.0, -3.0, 9.0], &mu, None).unwrap();
    assert_eq!(g.value, vec![0.2, -0.7, 1.1]);
    assert_eq!(gamma_z_jacobian(&[1.0, 1.0, 1.0], &mu).unwrap().frobenius(), 0.0);
}

#[test]
fn huge_logits_do_not_overflow() {
    let mu = EmpiricalMeasure::uniform(1, vec![1.0, -1.0]).unwrap();
    let g = attention_gamma(&[1e4], &mu, None).unwrap();
    assert_eq!(g.value, vec![1.0]);
    assert!(g.log_normalizer().is_finite());
}

// Changing the exponent shift is exact in real arithmetic; in floating point
// the rescaling by e^{-shift} rounds, so agreement is checked at ulp level.
#[test]
fn shift_changes_value_only_by_rounding() {
    let mut rng = fuzz(0);
    for _ in 0..200 {
        let mu = verify::random_measure(&mut rng, 4, 5, 1.5).unwrap();
        let z = mfa_core::seed::sample_ball(&mut rng, 4, 3.0);
        let a = attention_gamma(&z, &mu, None).unwrap();
        let b = gamma_with_shift(&z, &mu, a.shift - 2.5);
        for (x, y) in a.value.iter().zip(&b.value) {
            assert!((x - y).abs() <= 8.0 * f64::EPSILON * x.abs().max(1.0), "{x} vs {y}");
        }
        assert!((a.log_normalizer() - b.log_normalizer()).abs() < 1e-13);
    }
}

#[test]
fn zero_value_output_gives_zero_velocity() {
    let mut rng = fuzz(1);
    let mut h = mfa_core::seed::xavier_head(&mut rng, 2, 4);
    h.block_mut(mfa_core::Block::Output).fill(0.0);
    let nu = HeadCloud::uniform(vec![h]).unwrap();
    let mu = verify::random_measure(&mut rng, 4, 3, 1.0).unwrap();
    assert_eq!(mha_velocity(&[0.1, 0.2, 0.3, 0.4], &mu, &nu, 1.0).unwrap(), vec![0.0; 4]);
}

#[test]
fn zero_heads_velocity_is_zero() {
    let nu = HeadCloud::uniform(vec![HeadParams::zeros(2, 4)]).unwrap();
    let mu = EmpiricalMeasure::uniform(4, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    assert_eq!(mha_velocity(&[1.0, 2.0, 3.0, 4.0], &mu, &nu, 1.0).unwrap(), vec![0.0; 4]);
}

#[test]
fn derivatives_match_finite_differences() {
    let mut rng = fuzz(2);
    for _ in 0..50 {
        assert!(verify::jacobian_error(&mut rng).unwrap() <= 1e-6);
        assert!(verify::measure_derivative_error(&mut rng).unwrap() <= 1e-6);
        assert!(verify::hamiltonian_error(&mut rng).unwrap() <= 1e-6);
        assert!(verify::drift_error(&mut rng).unwrap() <= 1e-6);
        for e in verify::head_gradient_errors(&mut rng).unwrap() {
            assert!(e <= 1e-6);
        }
    }
}

proptest! {
    #[test]
    fn projection_norm_bound(x in prop::collection::vec(-50.0f64..50.0, 1..6), r in 0.1f64..5.0) {
        let p = project_ball(&x, r).unwrap();
        let n = norm(&p);
        prop_assert!(n <= (2.0 * r.max(1.0)).min(norm(&x)) * (1.0 + 1e-12));
    }

    #[test]
    fn gamma_lies_in_convex_hull_box(seed in 0u64..1000) {
        let mut rng = fuzz(10_000 + seed);
        let mu = verify::random_measure(&mut rng, 3, 4, 2.0).unwrap();
        let z = mfa_core::seed::sample_ball(&mut rng, 3, 5.0);
        let g = attention_gamma(&z, &mu, None).unwrap();
        for c in 0..3 {
            let lo = mu.iter().map(|(y, _)| y[c]).fold(f64::INFINITY, f64::min);
            let hi = mu.iter().map(|(y, _)| y[c]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(g.value[c] >= lo - 1e-12 && g.value[c] <= hi + 1e-12);
        }
    }

    #[test]
    fn tilted_covariance_is_positive_semidefinite(seed in 0u64..1000) {
        let mut rng = fuzz(20_000 + seed);
        let mu = verify::random_measure(&mut rng, 3, 5, 1.5).unwrap();
        let z = mfa_core::seed::sample_ball(&mut rng, 3, 3.0);
        let v = mfa_core::seed::sample_ball(&mut rng, 3, 1.0);
        let j = gamma_z_jacobian(&z, &mu).unwrap();
        prop_assert!(mfa_core::linalg::dot(&v, &j.mul_vec(&v)) >= -1e-14);
        prop_assert!((j[(0, 1)] - j[(1, 0)]).abs() < 1e-15);
    }
}
