mod common;

use common::{jitter, random_image, tiny_config};
use prompt_sid::losses::{mse, sc_loss, ReplayTerms};
use prompt_sid::nn::gradcheck::sampled_param_check;
use prompt_sid::sampling::srd_sample;
use prompt_sid::train::{patch_step, train_step, ModelState, TrainConfig};
use prompt_sid::{apply_noise, synth, ImageTensor, LossWeights, Model, NoiseSpec, Rng};

fn setup(
    seed: u64,
) -> (
    Model,
    prompt_sid::nn::params::ParamStore<f64>,
    ImageTensor<f64>,
) {
    let mut rng = Rng::new(seed);
    let (model, mut p) = Model::new::<f64>(tiny_config(1), &mut rng).unwrap();
    jitter(&mut p, 0.05, &mut rng);
    let x = random_image(8, 8, 1, &mut rng);
    (model, p, x)
}

fn const_replay(h: usize, w: usize, rng: &mut Rng) -> ReplayTerms<f64> {
    ReplayTerms {
        m1fx: random_image(h, w, 1, rng),
        m2fx: random_image(h, w, 1, rng),
        m3fx: random_image(h, w, 1, rng),
    }
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let (model, p, x) = setup(11);
    let replay = const_replay(4, 4, &mut Rng::new(12));
    let weights = LossWeights::default();
    let rng = Rng::new(13);
    let mut g = p.zeros_like();
    patch_step(
        &model,
        &p,
        &x,
        &weights,
        &mut rng.clone(),
        Some(&replay),
        Some(&mut g),
    )
    .unwrap();
    let report = sampled_param_check(&p, &g, 200, &mut Rng::new(14), |q| {
        let (l, _) = patch_step(
            &model,
            q,
            &x,
            &weights,
            &mut rng.clone(),
            Some(&replay),
            None,
        )
        .unwrap();
        l.total
    });
    assert_eq!(report.checked, 200);
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}

#[test]
fn consistency_gradient_ignores_the_replay_branch() {
    let (model, p, x) = setup(21);
    let weights = LossWeights {
        rec: 0.0,
        sc: 1.0,
        diff: 0.0,
    };
    let rng = Rng::new(22);
    let mut live = p.zeros_like();
    let (_, replay) = patch_step(
        &model,
        &p,
        &x,
        &weights,
        &mut rng.clone(),
        None,
        Some(&mut live),
    )
    .unwrap();
    let mut injected = p.zeros_like();
    patch_step(
        &model,
        &p,
        &x,
        &weights,
        &mut rng.clone(),
        Some(&replay),
        Some(&mut injected),
    )
    .unwrap();
    assert!(!live.is_zero());
    for (a, b) in live.tensors().iter().zip(injected.tensors()) {
        for (u, v) in a.iter().zip(b) {
            assert!((u - v).abs() <= 1e-12, "{u} vs {v}");
        }
    }
}

#[test]
fn reconstruction_only_gradient_matches_its_own_difference_quotient() {
    let (model, p, x) = setup(31);
    let weights = LossWeights {
        rec: 1.0,
        sc: 0.0,
        diff: 0.0,
    };
    let rng = Rng::new(32);
    let mut g = p.zeros_like();
    let (_, replay) = patch_step(
        &model,
        &p,
        &x,
        &weights,
        &mut rng.clone(),
        None,
        Some(&mut g),
    )
    .unwrap();
    let report = sampled_param_check(&p, &g, 100, &mut Rng::new(33), |q| {
        patch_step(
            &model,
            q,
            &x,
            &weights,
            &mut rng.clone(),
            Some(&replay),
            None,
        )
        .unwrap()
        .0
        .rec
    });
    assert!(report.max_rel_error < 1e-4, "{report:?}");

    let (l, _) = patch_step(&model, &p, &x, &weights, &mut rng.clone(), None, None).unwrap();
    assert_eq!(l.total, l.rec);
}

#[test]
fn zero_weights_give_identity_replay_and_zero_consistency() {
    let mut rng = Rng::new(41);
    let (model, mut p) = Model::new::<f64>(tiny_config(3), &mut rng).unwrap();
    p.fill_zero();
    let x = random_image(8, 10, 3, &mut rng);
    let r = Rng::new(42);
    let sample = srd_sample(&x, &mut r.clone()).unwrap();
    let (l, replay) = patch_step(
        &model,
        &p,
        &x,
        &LossWeights::default(),
        &mut r.clone(),
        None,
        None,
    )
    .unwrap();
    assert_eq!(replay.m1fx, sample.subs[0]);
    assert_eq!(replay.m2fx, sample.subs[1]);
    assert_eq!(replay.m3fx, sample.subs[2]);
    assert_eq!(l.sc, 0.0);
    let [m1, m2, m3] = &sample.subs;
    let direct = mse(m1, m2).unwrap() + mse(m1, m3).unwrap();
    assert!((l.rec - direct).abs() <= 1e-15 * direct.abs().max(1.0));
}

#[test]
fn replay_uses_the_training_pattern() {
    // A replay drawn with a different pattern must not pass for the real one.
    let mut rng = Rng::new(51);
    let (model, mut p) = Model::new::<f64>(tiny_config(1), &mut rng).unwrap();
    p.fill_zero();
    let x = random_image(8, 8, 1, &mut rng);
    let r = Rng::new(52);
    let (_, replay) = patch_step(
        &model,
        &p,
        &x,
        &LossWeights::default(),
        &mut r.clone(),
        None,
        None,
    )
    .unwrap();
    let own = srd_sample(&x, &mut r.clone()).unwrap();
    let other = srd_sample(&x, &mut Rng::new(53)).unwrap();
    assert_ne!(own.pattern, other.pattern);
    let [m1, m2, m3] = &own.subs;
    assert_eq!(sc_loss(m1, m2, m3, &replay).unwrap(), 0.0);
    let [o1, o2, o3] = other.subs;
    let wrong = ReplayTerms {
        m1fx: o1,
        m2fx: o2,
        m3fx: o3,
    };
    assert!(sc_loss(m1, m2, m3, &wrong).unwrap() > 0.0);
}

#[test]
fn short_training_run_lowers_the_loss() {
    let mut cfg = tiny_config(1);
    cfg.width = 8;
    let clean = synth::clean_set(6, 32, 32, 1, 3);
    let data: Vec<ImageTensor> = clean
        .iter()
        .enumerate()
        .map(|(i, c)| {
            apply_noise(
                c,
                NoiseSpec::GaussianFixed { sigma: 25.0 },
                &mut Rng::derive(4, &[i as u64]),
            )
            .unwrap()
        })
        .collect();
    let mut state = ModelState::<f32>::new(cfg, 5).unwrap();
    let tc = TrainConfig {
        total_steps: 200,
        batch: 2,
        patch: 16,
        lr: 1e-3,
        seed: 6,
        ..Default::default()
    };
    let mut totals = Vec::new();
    for _ in 0..200 {
        totals.push(train_step(&mut state, &data, &tc).unwrap().total);
    }
    let first: f64 = totals[..20].iter().sum::<f64>() / 20.0;
    let last: f64 = totals[180..].iter().sum::<f64>() / 20.0;
    assert!(last < first, "loss went from {first} to {last}");
}
