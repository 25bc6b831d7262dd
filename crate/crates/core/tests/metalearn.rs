mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use taml_core::infernet::{BalancingVariables, InferenceNet, Noise};
use taml_core::metalearn::*;
use taml_core::model::StyleModel;
use taml_core::taskgen::{sample_episode, Task};
use taml_core::text::Style;
use taml_core::Error;

fn tasks(n: usize) -> Vec<Task> {
    common::small_tasks(n)
}

fn parts() -> (StyleModel, InferenceNet) {
    common::default_parts()
}

fn learner(method: Method, cfg: MetaConfig) -> Learner {
    let (model, net) = parts();
    Learner::new(method, model, net, cfg, Streams::split(5)).unwrap()
}

#[test]
fn pinned_identity_taml_tracks_maml_at_half_step() {
    let gap = common::half_step_gap(20);
    assert!(gap < 1e-10, "{gap:e}");
}

#[test]
fn collapsed_posterior_first_update_matches_maml_at_half_step() {
    let train = tasks(4);
    let cfg = MetaConfig::default();
    let (model, net) = parts();
    let theta = model.init_params(&mut ChaCha8Rng::seed_from_u64(2));
    let psi = common::collapsed_psi(&net);
    let mut taml = Learner::from_params(Method::Taml, model.clone(), net.clone(), cfg.clone(), Streams::split(5), theta.clone(), psi.clone());
    let half = MetaConfig {
        inner_lr: cfg.inner_lr / 2.0,
        ..cfg
    };
    let mut maml = Learner::from_params(Method::Maml, model, net, half, Streams::split(5), theta, psi);
    taml.step(&train).unwrap();
    maml.step(&train).unwrap();
    assert!(taml.theta.max_abs_diff(&maml.theta) < 1e-10);
}

#[test]
fn zero_inner_steps_give_the_joint_query_gradient() {
    let (maml, taml) = common::zero_step_gaps();
    assert!(maml < 1e-12, "{maml:e}");
    assert!(taml < 1e-12, "{taml:e}");
}

#[test]
fn zero_steps_adapt_to_modulated_init_and_gamma_scales_displacement() {
    let train = tasks(1);
    let (model, _) = parts();
    let theta = model.init_params(&mut ChaCha8Rng::seed_from_u64(2));
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ep = sample_episode(&train[0], 0.7, 20, &mut rng).unwrap();
    let n = theta.len();

    let k0 = MetaConfig {
        inner_steps: 0,
        ..MetaConfig::default()
    };
    let plan = plan_batches(&ep, &k0, &mut rng).unwrap();
    let bal = BalancingVariables {
        omega: vec![0.3, 0.9],
        gamma: vec![1.0; n],
        z: (0..n).map(|i| 0.5 + 0.1 * i as f64).collect(),
    };
    let a = adapt(&model, &theta, &plan, &bal, 0.1, false).unwrap();
    assert_eq!(a.params, modulate_init(&theta, &bal.z).unwrap());

    let k1 = MetaConfig {
        inner_steps: 1,
        ..MetaConfig::default()
    };
    let plan = plan_batches(&ep, &k1, &mut rng).unwrap();
    let one = adapt(&model, &theta, &plan, &bal, 0.1, true).unwrap();
    let doubled = BalancingVariables {
        gamma: vec![2.0; n],
        ..bal.clone()
    };
    let two = adapt(&model, &theta, &plan, &doubled, 0.1, true).unwrap();
    let theta0 = &one.trajectory[0];
    for l in 0..n {
        let base = theta0.tensor(l).values();
        for ((a, b), t) in one.params.tensor(l).values().iter().zip(two.params.tensor(l).values()).zip(base) {
            // The subtraction from θ0 costs up to one ulp of θ0.
            assert!((2.0 * (a - t) - (b - t)).abs() <= 4e-16 * t.abs().max(1.0), "{a} {b} {t}");
        }
    }
}

#[test]
fn taml_objective_is_mean_nll_plus_weighted_kl() {
    let train = tasks(2);
    let cfg = MetaConfig {
        mc_samples: 3,
        ..MetaConfig::default()
    };
    let (model, net) = parts();
    let mut init = ChaCha8Rng::seed_from_u64(2);
    let theta = model.init_params(&mut init);
    let mut psi = net.init_params(&mut init);
    for t in psi.tensors_mut() {
        for (i, v) in t.values_mut().iter_mut().enumerate() {
            *v += 0.01 * ((i % 7) as f64 - 3.0);
        }
    }
    let episodes = sample_meta_batch(&train, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let noise_rng = ChaCha8Rng::seed_from_u64(4);
    let got = taml_meta_gradient(&model, &net, &theta, &psi, &episodes, &cfg, &Balancing::Inferred, &mut noise_rng.clone()).unwrap();

    let mut replay = noise_rng;
    let mut expected = 0.0;
    for pe in &episodes {
        let a = pe.episode.support_sentences(Style::A);
        let b = pe.episode.support_sentences(Style::B);
        let post = net.posterior(&psi, &model.backbone, [&a[..], &b[..]]).unwrap();
        let mut nll = 0.0;
        for _ in 0..cfg.mc_samples {
            let bal = post.transform(&Noise::draw(theta.len(), &mut replay));
            let adapted = adapt(&model, &theta, &pe.plan, &bal, cfg.inner_lr, false).unwrap();
            nll += model.task_loss(&adapted.params, &pe.plan.query).unwrap() / cfg.mc_samples as f64;
        }
        let w = 1.0 / (pe.episode.support_len() + pe.episode.query_len()) as f64;
        expected += nll + w * post.kl_to_prior();
    }
    assert!((got.objective - expected).abs() < 1e-10, "{} vs {expected}", got.objective);
    assert!(got.objective >= 0.0);
    assert!(got.psi.is_some());
}

#[test]
fn degenerate_tasks_are_skipped() {
    let train = tasks(2);
    let cfg = MetaConfig::default();
    let (model, net) = parts();
    let mut init = ChaCha8Rng::seed_from_u64(2);
    let theta = model.init_params(&mut init);
    let psi = net.init_params(&mut init);
    let mut episodes = sample_meta_batch(&train, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let mut broken = episodes[0].clone();
    broken.episode.support.retain(|e| e.style() == Style::A);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let err = taml_meta_gradient(&model, &net, &theta, &psi, std::slice::from_ref(&broken), &cfg, &Balancing::Inferred, &mut rng).unwrap_err();
    assert!(matches!(err, Error::AllTasksSkipped));
    episodes.push(broken);
    let mg = taml_meta_gradient(&model, &net, &theta, &psi, &episodes, &cfg, &Balancing::Inferred, &mut rng).unwrap();
    assert_eq!(mg.tasks.len(), episodes.len() - 1);
}

#[test]
fn maml_meta_loss_decreases_on_a_fixed_pair_of_tasks() {
    let train = tasks(2);
    let cfg = MetaConfig {
        meta_batch: 2,
        ..MetaConfig::default()
    };
    let mut l = learner(Method::Maml, cfg);
    let mut objectives = Vec::new();
    for _ in 0..50 {
        objectives.push(l.step(&train).unwrap().objective);
    }
    assert!(objectives.iter().all(|o| o.is_finite()));
    let head: f64 = objectives[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = objectives[45..].iter().sum::<f64>() / 5.0;
    assert!(tail < head, "{head} -> {tail}");
}

#[test]
fn baseline_loss_decreases_and_runs_are_deterministic() {
    let train = tasks(1);
    let cfg = MetaConfig {
        baseline_lr: 1e-2,
        ..MetaConfig::default()
    };
    let (model, _) = parts();
    let batch: Vec<_> = pooled_examples(&train).unwrap().into_iter().take(16).collect();
    let run = || {
        let mut theta = model.init_params(&mut ChaCha8Rng::seed_from_u64(2));
        let mut opt = Optimizer::new(OptimizerKind::Adam, cfg.baseline_lr, &theta);
        let losses: Vec<f64> = (0..100).map(|_| baseline_step(&model, &mut theta, &batch, &mut opt).unwrap()).collect();
        (theta, losses)
    };
    let (t1, l1) = run();
    let (t2, l2) = run();
    assert!(l1[99] < 0.5 * l1[0]);
    assert_eq!(t1, t2);
    assert_eq!(l1, l2);
    assert!(baseline_step(&model, &mut t1.clone(), &[], &mut Optimizer::new(OptimizerKind::Adam, 0.1, &t1)).is_err());
}

#[test]
fn meta_training_is_bit_deterministic() {
    let train = tasks(4);
    let cfg = MetaConfig {
        mc_samples: 2,
        ..MetaConfig::default()
    };
    let mut a = learner(Method::Taml, cfg.clone());
    let mut b = learner(Method::Taml, cfg);
    for _ in 0..5 {
        assert_eq!(a.step(&train).unwrap(), b.step(&train).unwrap());
    }
    assert_eq!(a.theta, b.theta);
    assert_eq!(a.psi, b.psi);
}

#[test]
fn meta_test_contracts() {
    let train = tasks(1);
    let cfg = MetaConfig::default();
    let (model, net) = parts();
    let theta = model.init_params(&mut ChaCha8Rng::seed_from_u64(2));
    let psi = common::collapsed_psi(&net);
    let ep = sample_episode(&train[0], 0.7, 20, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let test: Vec<_> = ep.query.iter().map(|e| e.source.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    let base = meta_test(Method::Baseline, &model, &net, &theta, &psi, &ep, &test, &cfg, &mut rng).unwrap();
    assert_eq!(base.adapted, vec![theta.clone()]);
    assert_eq!(base.transferred.len(), test.len());
    assert!(base.transferred.iter().zip(&test).all(|(o, i)| o.style == i.style.flip() && o.len() == i.len()));

    let t1 = meta_test(Method::Taml, &model, &net, &theta, &psi, &ep, &test, &cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let t2 = meta_test(Method::Taml, &model, &net, &theta, &psi, &ep, &test, &cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    assert_eq!(t1.transferred, t2.transferred);
    assert_eq!(t1.adapted.len(), cfg.mc_samples_eval);
    assert!(t1.adapted.windows(2).all(|w| w[0] == w[1]));
}
