use mfa_core::harness::{data_batch, grad_check};
use mfa_core::seed::{rng_for, xavier_head, Stream};
use mfa_core::{DiscreteModel, HeadCloud, LossSpec};

fn model(seed: u64, layers: usize, heads: usize) -> DiscreteModel {
    let mut rng = rng_for(seed, Stream::Pi, &[]);
    let pi = HeadCloud::uniform((0..6).map(|_| xavier_head(&mut rng, 2, 4)).collect()).unwrap();
    let mut rng = rng_for(seed, Stream::Init, &[]);
    DiscreteModel::from_pi(&pi, layers, heads, 1.0, &mut rng).unwrap()
}

#[test]
fn batch_gradient_matches_central_differences() {
    for loss in [
        LossSpec::GlobalQuadratic { target: vec![0.5, 0.0, -0.25, 0.0] },
        LossSpec::LabelQuadratic,
    ] {
        for seed in 0..3 {
            let m = model(seed, 4, 2);
            let batch = data_batch(seed, 0, 2, 3, 4, 1.0, &loss).unwrap();
            let rep = grad_check(&m, &loss, &batch, 1e-5, None).unwrap();
            assert!(rep.max_rel_err <= 1e-6, "seed {seed} {loss:?}: {}", rep.max_rel_err);
        }
    }
}

#[test]
fn finite_difference_error_shrinks_quadratically() {
    let loss = LossSpec::GlobalQuadratic { target: vec![0.5, 0.0, -0.25, 0.0] };
    let m = model(11, 3, 2);
    let batch = data_batch(11, 0, 1, 3, 4, 1.0, &loss).unwrap();
    let coarse = grad_check(&m, &loss, &batch, 4e-3, Some(&[(1, 0)])).unwrap().max_rel_err;
    let fine = grad_check(&m, &loss, &batch, 2e-3, Some(&[(1, 0)])).unwrap().max_rel_err;
    let ratio = coarse / fine;
    assert!((3.0..5.0).contains(&ratio), "ratio {ratio} ({coarse} vs {fine})");
}
