use mfa_core::checkpoint::{discrete_from_str, discrete_to_string, mean_field_from_str, mean_field_to_string};
use mfa_core::config::ExperimentConfig;
use mfa_core::harness::{data_batch, discrepancy_sup, param_divergence, probe_set};
use mfa_core::mean_field::time_lipschitz;
use mfa_core::optim::b_beta;
use mfa_core::seed::{rng_for, Stream};
use mfa_core::{
    batch_gradient, hat_nu_from, init_params, mean_field_gradient, r_map, Block, DiscreteModel, HeadCloud, HeadParams,
    LossSpec, MeanFieldHistory, MeanFieldParams, OptConfig, Sample,
};

fn defaults() -> (ExperimentConfig, HeadCloud, OptConfig) {
    let cfg = ExperimentConfig::default();
    let pi = cfg.pi().unwrap();
    let opt = cfg.opt();
    (cfg, pi, opt)
}

fn losses() -> [LossSpec; 2] {
    [LossSpec::GlobalQuadratic { target: vec![0.5, 0.0, 0.0, 0.0] }, LossSpec::LabelQuadratic]
}

fn model(pi: &HeadCloud, l: usize, h: usize, seed: u64) -> DiscreteModel {
    DiscreteModel::from_pi(pi, l, h, 1.0, &mut rng_for(seed, Stream::Init, &[])).unwrap()
}

#[test]
fn mean_field_on_the_discrete_grid_is_the_discrete_model() {
    let (_, pi, opt) = defaults();
    for loss in losses() {
        let mut dm = model(&pi, 8, 4, 1);
        let mut mf = MeanFieldParams::from_clouds(dm.layers().to_vec(), dm.beta).unwrap();
        let probes = probe_set(3, 4, 4, 4, 1.0, &loss).unwrap();
        for tau in 0..3 {
            for p in &probes {
                assert_eq!(dm.forward_backward(p, &loss).unwrap(), mf.integrate_forward_backward(p, &loss).unwrap());
                let fwd = mf.integrate_forward(p).unwrap();
                assert_eq!(mf.integrate_backward(&fwd, &loss).unwrap(), dm.forward_backward(p, &loss).unwrap());
            }
            assert_eq!(discrepancy_sup(&dm, &mf, &probes, &loss).unwrap(), 0.0);
            let batch = data_batch(3, tau, 2, 4, 4, 1.0, &loss).unwrap();
            let trajs = dm.trajectories(&batch, &loss).unwrap();
            let theta = &dm.layer(2).heads()[1];
            assert_eq!(
                batch_gradient(&trajs, 2, theta, 1.0).unwrap(),
                mean_field_gradient(&mf.trajectories(&batch, &loss).unwrap(), 2, theta, 1.0).unwrap()
            );
            dm.train_step(&batch, &loss, &opt).unwrap();
            mf.train_step(&batch, &loss, &opt).unwrap();
            assert_eq!(dm.layers(), mf.clouds());
        }
    }
}

#[test]
fn duplicating_heads_with_halved_weights_changes_nothing() {
    let (_, pi, _) = defaults();
    let loss = LossSpec::LabelQuadratic;
    let dm = model(&pi, 4, 8, 2);
    let dup = DiscreteModel::new(dm.layers().iter().map(HeadCloud::duplicated).collect(), dm.beta).unwrap();
    let mf = MeanFieldParams::from_pi(&pi, 16, 1.0).unwrap();
    let mf_dup = MeanFieldParams::from_pi(&pi.duplicated(), 16, 1.0).unwrap();
    for p in probe_set(4, 4, 4, 4, 1.0, &loss).unwrap() {
        assert_eq!(dm.forward_backward(&p, &loss).unwrap(), dup.forward_backward(&p, &loss).unwrap());
        assert_eq!(mf.integrate_forward_backward(&p, &loss).unwrap(), mf_dup.integrate_forward_backward(&p, &loss).unwrap());
    }
}

#[test]
fn euler_self_convergence_is_first_order() {
    let (cfg, pi, _) = defaults();
    let loss = cfg.loss_spec();
    let probes = probe_set(5, 4, 4, 4, 1.0, &loss).unwrap();
    let finals = |l: usize| -> Vec<Vec<f64>> {
        let mf = MeanFieldParams::from_pi(&pi, l, 1.0).unwrap();
        probes.iter().map(|p| mf.integrate_forward(p).unwrap().final_states().to_vec()).collect()
    };
    let (a, b, c) = (finals(64), finals(128), finals(256));
    let gap = |x: &[Vec<f64>], y: &[Vec<f64>]| {
        x.iter()
            .zip(y)
            .map(|(u, v)| mfa_core::linalg::dist_sq(u, v).sqrt())
            .fold(0.0, f64::max)
    };
    let ratio = gap(&a, &b) / gap(&b, &c);
    assert!((ratio - 2.0).abs() <= 0.2, "ratio {ratio}");
}

#[test]
fn initial_heads_follow_the_atom_weights() {
    let mut rng = rng_for(6, Stream::Pi, &[]);
    let heads: Vec<HeadParams> = (0..4).map(|_| mfa_core::seed::xavier_head(&mut rng, 2, 4)).collect();
    let w = vec![0.1, 0.2, 0.3, 0.4];
    let pi = HeadCloud::new(heads.clone(), w.clone()).unwrap();
    let layers = init_params(&pi, 50, 200, &mut rng_for(6, Stream::Init, &[])).unwrap();
    let n = 10_000.0;
    for (atom, wi) in heads.iter().zip(&w) {
        let count = layers.iter().flat_map(|c| c.heads()).filter(|h| *h == atom).count() as f64;
        let sigma = (n * wi * (1.0 - wi)).sqrt();
        assert!((count - n * wi).abs() <= 3.0 * sigma, "{count} vs {}", n * wi);
    }
    assert!(layers.iter().all(|c| c.weights().iter().all(|&x| x == 1.0 / 200.0)));
}

#[test]
fn permuting_tokens_permutes_trajectories() {
    let (_, pi, _) = defaults();
    let loss = LossSpec::LabelQuadratic;
    let dm = model(&pi, 4, 4, 7);
    let p = &probe_set(7, 1, 4, 4, 1.0, &loss).unwrap()[0];
    let perm = [2usize, 0, 3, 1];
    let shuffle = |v: &[f64]| perm.iter().flat_map(|&i| v[4 * i..4 * i + 4].to_vec()).collect::<Vec<_>>();
    let q = Sample::uniform(4, shuffle(&p.states), p.labels.as_deref().map(shuffle)).unwrap();
    let (a, b) = (dm.forward_backward(p, &loss).unwrap(), dm.forward_backward(&q, &loss).unwrap());
    for r in 0..=4 {
        for (x, y) in shuffle(&a.states[r]).iter().zip(&b.states[r]) {
            assert!((x - y).abs() <= 1e-14);
        }
        for (x, y) in shuffle(&a.adjoints[r]).iter().zip(&b.adjoints[r]) {
            assert!((x - y).abs() <= 1e-14);
        }
    }
}

#[test]
fn labels_ride_along_unchanged() {
    let (_, pi, _) = defaults();
    let loss = LossSpec::LabelQuadratic;
    let p = &probe_set(8, 1, 4, 4, 1.0, &loss).unwrap()[0];
    let t = model(&pi, 4, 2, 8).forward_backward(p, &loss).unwrap();
    assert_eq!(t.labels, p.labels);
}

#[test]
fn zero_heads_keep_states_and_costates_constant() {
    let zero = HeadCloud::uniform(vec![HeadParams::zeros(2, 4)]).unwrap();
    let loss = LossSpec::GlobalQuadratic { target: vec![0.5, 0.0, 0.0, 0.0] };
    let dm = DiscreteModel::from_pi(&zero, 4, 3, 1.0, &mut rng_for(0, Stream::Init, &[])).unwrap();
    let mf = MeanFieldParams::from_pi(&zero, 64, 1.0).unwrap();
    let probes = probe_set(9, 3, 4, 4, 1.0, &loss).unwrap();
    for p in &probes {
        let t = mf.integrate_forward_backward(p, &loss).unwrap();
        assert!(t.states.iter().all(|s| *s == p.states));
        assert!(t.adjoints.iter().all(|a| *a == t.adjoints[64]));
    }
    assert_eq!(discrepancy_sup(&dm, &mf, &probes, &loss).unwrap(), 0.0);
}

/// Heads with `θ_O = 0` do not move tokens; with labels equal to the inputs
/// the costates vanish and training reduces to weight decay.
#[test]
fn vanishing_costates_leave_pure_weight_decay() {
    let (_, pi, opt) = defaults();
    let mut heads = pi.heads().to_vec();
    heads.iter_mut().for_each(|h| h.block_mut(Block::Output).fill(0.0));
    let pi0 = HeadCloud::new(heads, pi.weights().to_vec()).unwrap();
    let loss = LossSpec::LabelQuadratic;
    let fixed = |tau: usize| -> Vec<Sample> {
        data_batch(10, tau, 2, 4, 4, 1.0, &loss)
            .unwrap()
            .into_iter()
            .map(|s| Sample::uniform(4, s.states.clone(), Some(s.states)).unwrap())
            .collect()
    };
    let mut dm = model(&pi0, 4, 4, 10);
    let mut mf = MeanFieldParams::from_pi(&pi0, 8, 1.0).unwrap();
    let decay = 1.0 - opt.eta_at(1) * opt.lambda;
    for tau in 0..3 {
        let before_d = dm.layers().to_vec();
        let before_m = mf.clouds().to_vec();
        dm.train_step(&fixed(tau), &loss, &opt).unwrap();
        mf.train_step(&fixed(tau), &loss, &opt).unwrap();
        for (old, new) in before_d.iter().chain(&before_m).zip(dm.layers().iter().chain(mf.clouds())) {
            for (a, b) in old.heads().iter().zip(new.heads()) {
                assert_eq!(&a.scaled(decay), b);
            }
        }
    }
}

#[test]
fn mean_field_atoms_stay_in_the_invariant_set() {
    let (cfg, pi, mut opt) = defaults();
    opt.beta1 = 0.9;
    opt.beta2 = 0.999;
    opt.lambda = 0.1;
    let loss = cfg.loss_spec();
    let mut mf = MeanFieldParams::from_pi(&pi, 16, 1.0).unwrap();
    let bound = b_beta(opt.beta1, opt.beta2) / opt.lambda;
    for tau in 0..5 {
        mf.train_step(&data_batch(11, tau, 2, 4, 4, 1.0, &loss).unwrap(), &loss, &opt).unwrap();
        for h in mf.clouds().iter().flat_map(|c| c.heads()) {
            assert!(r_map(h, opt.mode).max_abs() <= bound + 1e-12);
        }
    }
}

#[test]
fn hat_nu_starts_at_the_discrete_heads_and_tracks_the_mean_field_atoms() {
    let (cfg, pi, opt) = defaults();
    let loss = cfg.loss_spec();
    let l = 4;
    // Every layer holds π itself, so ν̂ must reproduce the mean-field atoms.
    let dm = DiscreteModel::new(vec![pi.clone(); l], 1.0).unwrap();
    let mut mf = MeanFieldParams::from_pi(&pi, l, 1.0).unwrap();
    let mut history = MeanFieldHistory::default();
    assert_eq!(hat_nu_from(&dm, &history, l, &opt, 0).unwrap(), dm.layers());
    for tau in 0..3 {
        history.push(mf.train_step(&data_batch(12, tau, 2, 4, 4, 1.0, &loss).unwrap(), &loss, &opt).unwrap());
        assert_eq!(hat_nu_from(&dm, &history, l, &opt, tau + 1).unwrap(), mf.clouds());
    }
    assert!(hat_nu_from(&dm, &history, l, &opt, 4).is_err());
}

#[test]
fn trained_divergence_respects_the_transport_inequality() {
    let (cfg, pi, opt) = defaults();
    let loss = cfg.loss_spec();
    let l_ref = 32;
    let mut dm = model(&pi, 8, 4, 13);
    let init = dm.clone();
    let mut mf = MeanFieldParams::from_pi(&pi, l_ref, 1.0).unwrap();
    let mut history = MeanFieldHistory::default();
    for tau in 0..3 {
        let batch = data_batch(13, tau, 2, 4, 4, 1.0, &loss).unwrap();
        history.push(mf.train_step(&batch, &loss, &opt).unwrap());
        dm.train_step(&batch, &loss, &opt).unwrap();
        let hat = hat_nu_from(&init, &history, l_ref, &opt, tau + 1).unwrap();
        let pd = param_divergence(&hat, dm.layers()).unwrap();
        for (c, w) in pd.coupled_sq.iter().zip(&pd.w2_sq) {
            assert!(*w <= c + 1e-15);
        }
    }
    assert!(time_lipschitz(&mf).unwrap() > 0.0);
    assert_eq!(time_lipschitz(&MeanFieldParams::from_pi(&pi, l_ref, 1.0).unwrap()).unwrap(), 0.0);
}

#[test]
fn checkpoints_round_trip_bit_for_bit() {
    let (cfg, pi, opt) = defaults();
    let loss = cfg.loss_spec();
    let mut dm = model(&pi, 4, 3, 14);
    let mut mf = MeanFieldParams::from_pi(&pi, 8, 1.0).unwrap();
    for tau in 0..2 {
        let batch = data_batch(14, tau, 2, 4, 4, 1.0, &loss).unwrap();
        dm.train_step(&batch, &loss, &opt).unwrap();
        mf.train_step(&batch, &loss, &opt).unwrap();
    }
    let (back, seed) = discrete_from_str(&discrete_to_string(&dm, 99).unwrap()).unwrap();
    assert_eq!((back, seed), (dm.clone(), 99));
    let (back, _) = mean_field_from_str(&mean_field_to_string(&mf, 5).unwrap()).unwrap();
    assert_eq!(back, mf);

    let text = discrete_to_string(&dm, 0).unwrap();
    assert!(mean_field_from_str(&text).is_err());
    let truncated = text.replacen("\"depth\": 4", "\"depth\": 3", 1);
    assert!(discrete_from_str(&truncated).is_err());
}
