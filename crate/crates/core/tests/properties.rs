use proptest::prelude::*;

use dreamland::controller::CmaState;
use dreamland::dream::{DreamConfig, DreamEnv, RandomizationPolicy, ZInit};
use dreamland::dropout_lstm::{lstm_step, LstmState, MaskSet};
use dreamland::envs::{
    collect_trajectories, policy_mean_return, DodgeConfig, DodgeWorld, Environment, TrackConfig, TrackWorld,
};
use dreamland::numerics::{log_sum_exp, SeededRng};
use dreamland::world_model::{mdn_loss, MdnOutput, ModelDims, WorldModelParams};

fn dims() -> ModelDims {
    ModelDims {
        latent: 3,
        action: 2,
        hidden: 6,
        mixtures: 2,
    }
}

fn random_model(seed: u64, scale: f64) -> WorldModelParams {
    let mut rng = SeededRng::new(seed);
    let mut p = WorldModelParams::init(dims(), &mut rng).unwrap();
    let flat: Vec<f64> = p.to_flat().iter().map(|_| scale * (2.0 * rng.uniform() - 1.0)).collect();
    p.set_flat(&flat).unwrap();
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn log_sum_exp_shifts_by_constant(v in prop::collection::vec(-50.0f64..50.0, 1..12), c in -100.0f64..100.0) {
        let base = log_sum_exp(&v).unwrap();
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        let got = log_sum_exp(&shifted).unwrap();
        prop_assert!((got - (base + c)).abs() <= 1e-12 * (base + c).abs().max(1.0));
    }

    #[test]
    fn heads_produce_valid_mixtures(seed in any::<u64>(), h in prop::collection::vec(-1e3f64..1e3, 6)) {
        let m = random_model(seed, 2.0);
        let p = m.heads_forward(&h).unwrap();
        let d = dims();
        for i in 0..d.latent {
            let row = p.mdn.pi_row(i);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
        prop_assert!(p.mdn.sigma.iter().all(|&s| s > 0.0 && s.is_finite()));
        prop_assert!(p.mdn.mu.iter().all(|x| x.is_finite()));
        prop_assert!((0.0..=1.0).contains(&p.d_hat) && p.r_hat.is_finite());
    }

    #[test]
    fn best_component_minimizes_mixture_loss(
        mu in prop::collection::vec(-3.0f64..3.0, 3),
        sigma in prop::collection::vec(0.1f64..3.0, 3),
        w in prop::collection::vec(0.01f64..1.0, 3),
        z in -4.0f64..4.0,
    ) {
        let total: f64 = w.iter().sum();
        let pi: Vec<f64> = w.iter().map(|x| x / total).collect();
        let mixed = mdn_loss(&MdnOutput::new(1, 3, pi, mu.clone(), sigma.clone()).unwrap(), &[z]).unwrap();
        let single: Vec<f64> = (0..3)
            .map(|j| {
                let mut onehot = vec![0.0; 3];
                onehot[j] = 1.0;
                mdn_loss(&MdnOutput::new(1, 3, onehot, mu.clone(), sigma.clone()).unwrap(), &[z]).unwrap()
            })
            .collect();
        let best = single.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assert!(best <= mixed + 1e-12);
    }

    #[test]
    fn lstm_step_is_deterministic(seed in any::<u64>(), p in 0.0f64..0.9) {
        let m = random_model(seed, 1.0);
        let d = dims();
        let mut rng = SeededRng::new(seed ^ 1);
        let mask = MaskSet::sample(p, d.input(), d.hidden, &d.action_indices(), &mut rng).unwrap();
        let x: Vec<f64> = (0..d.input()).map(|_| rng.normal()).collect();
        let mut s = LstmState::zeros(d.hidden);
        s.h.iter_mut().for_each(|v| *v = rng.normal());
        let a = lstm_step(&m.lstm, &s, &x, &mask).unwrap();
        let b = lstm_step(&m.lstm, &s, &x, &mask).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn dream_episodes_respect_step_limit(seed in any::<u64>(), max_ep_len in 1usize..40, policy in 0usize..3) {
        let mut m = random_model(seed, 0.5);
        // Rare sampled terminations, so most episodes reach the limit.
        m.done_b[0] = -8.0;
        let models = vec![m];
        let cfg = DreamConfig {
            p_infer: 0.1,
            policy: [RandomizationPolicy::Off, RandomizationPolicy::Episode, RandomizationPolicy::Step][policy],
            z_init: ZInit::StandardNormal,
            max_ep_len,
            ..DreamConfig::default()
        };
        let mut env = DreamEnv::new(&models, &[], cfg).unwrap();
        let out = env.run_episode(seed, |_, _| Ok(vec![0.3, -0.2])).unwrap();
        prop_assert!(out.steps <= max_ep_len);
        prop_assert!(out.steps >= 1);
        prop_assert!(!out.truncated || out.steps == max_ep_len);
    }

    #[test]
    fn cma_update_ignores_monotone_transforms(seed in any::<u64>(), scale in 0.01f64..100.0, shift in -1e3f64..1e3) {
        let mut a = CmaState::new(vec![0.5; 4], 0.7, 8, seed).unwrap();
        let mut b = a.clone();
        for _ in 0..3 {
            let xs = a.ask();
            let f: Vec<f64> = xs.iter().map(|x| -x.iter().map(|v| (v - 1.0).powi(2)).sum::<f64>()).collect();
            let g: Vec<f64> = f.iter().map(|v| scale * v + shift).collect();
            a.tell(&xs, &f).unwrap();
            b.tell(&b.ask(), &g).unwrap();
        }
        prop_assert_eq!(a.mean(), b.mean());
        prop_assert_eq!(a.sigma(), b.sigma());
        prop_assert_eq!(a.covariance(), b.covariance());
    }

    #[test]
    fn environments_stay_finite_and_clamp_actions(seed in any::<u64>(), a0 in -5.0f64..5.0, a1 in -5.0f64..5.0) {
        let envs: Vec<Box<dyn Environment>> = vec![
            Box::new(TrackWorld::new(TrackConfig::default()).unwrap()),
            Box::new(DodgeWorld::new(DodgeConfig::default()).unwrap()),
        ];
        for mut env in envs {
            let act: Vec<f64> = [a0, a1][..env.action_dim()].to_vec();
            let clamped: Vec<f64> = act.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
            let mut outs = Vec::new();
            for a in [&act, &clamped] {
                let mut rng = SeededRng::new(seed);
                env.reset(&mut rng);
                let mut zs = Vec::new();
                for _ in 0..50 {
                    let st = env.step(a, &mut rng).unwrap();
                    prop_assert!(st.z.iter().all(|v| v.is_finite()) && st.reward.is_finite());
                    zs.push(st.z);
                    if st.done {
                        break;
                    }
                }
                outs.push(zs);
            }
            prop_assert_eq!(&outs[0], &outs[1]);
        }
    }

    #[test]
    fn trajectories_end_exactly_once(seed in any::<u64>(), mix in 0.0f64..=1.0) {
        let mut env = TrackWorld::new(TrackConfig { max_ep_len: 120, ..TrackConfig::default() }).unwrap();
        for t in collect_trajectories(&mut env, 3, mix, seed).unwrap() {
            prop_assert!(t.len() <= 120);
            prop_assert_eq!(t.steps.iter().filter(|s| s.d).count(), 1);
            prop_assert!(t.steps.last().unwrap().d);
        }
    }
}

#[test]
fn standard_normal_starts_have_unit_moments() {
    let models = vec![random_model(3, 0.5)];
    let cfg = DreamConfig {
        z_init: ZInit::StandardNormal,
        ..DreamConfig::default()
    };
    let mut env = DreamEnv::new(&models, &[], cfg).unwrap();
    let n = 10_000;
    let zs: Vec<Vec<f64>> = (0..n).map(|i| env.reset(i as u64).unwrap()).collect();
    for i in 0..dims().latent {
        let mean = zs.iter().map(|z| z[i]).sum::<f64>() / n as f64;
        let var = zs.iter().map(|z| (z[i] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 4.0 / (n as f64).sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() < 0.1, "var {var}");
    }
}

#[test]
fn even_done_probability_ends_half_the_steps() {
    let mut m = random_model(4, 0.5);
    m.done_w.iter_mut().for_each(|w| *w = 0.0);
    m.done_b[0] = 0.0;
    let models = vec![m];
    let cfg = DreamConfig {
        z_init: ZInit::StandardNormal,
        max_ep_len: 1_000_000,
        ..DreamConfig::default()
    };
    let mut env = DreamEnv::new(&models, &[], cfg).unwrap();
    let (mut steps, mut ends) = (0usize, 0usize);
    let mut seed = 0;
    while steps < 10_000 {
        let out = env.run_episode(seed, |_, _| Ok(vec![0.0, 0.0])).unwrap();
        steps += out.steps;
        ends += 1;
        seed += 1;
    }
    let freq = ends as f64 / steps as f64;
    assert!((freq - 0.5).abs() < 4.0 * (0.25 / steps as f64).sqrt(), "termination frequency {freq}");
}

#[test]
fn step_masks_differ_between_seeds() {
    let models = vec![random_model(5, 0.5)];
    let cfg = DreamConfig {
        p_infer: 0.1,
        policy: RandomizationPolicy::Step,
        z_init: ZInit::StandardNormal,
        max_ep_len: 20,
        ..DreamConfig::default()
    };
    let mut env = DreamEnv::new(&models, &[], cfg).unwrap();
    let mut ids = |seed: u64| -> Vec<u64> {
        env.reset(seed).unwrap();
        let mut out = Vec::new();
        while !env.is_done() {
            env.step(&[0.1, 0.1]).unwrap();
            out.push(env.active_mask().id());
        }
        out
    };
    for pair in 0..100u64 {
        assert_ne!(ids(2 * pair), ids(2 * pair + 1));
    }
}

#[test]
fn equal_seeds_emit_equal_streams() {
    let mut a = SeededRng::new(99);
    let mut b = SeededRng::new(99);
    assert!((0..1_000_000).all(|_| a.uniform().to_bits() == b.uniform().to_bits()));
}

#[test]
fn process_noise_has_configured_spread() {
    // A parked car moves only through noise, so the first speed is |N(0, σ)|.
    let sigma = 0.05;
    let mut env = TrackWorld::new(TrackConfig {
        noise_std: sigma,
        ..TrackConfig::default()
    })
    .unwrap();
    let mut rng = SeededRng::new(8);
    let n = 20_000;
    let mut sq = 0.0;
    for _ in 0..n {
        env.reset(&mut rng);
        let st = env.step(&[0.0, 0.0], &mut rng).unwrap();
        sq += st.z[1] * st.z[1];
    }
    // E[max(X, 0)²] = σ² / 2 for X ~ N(0, σ²).
    let est = (2.0 * sq / n as f64).sqrt();
    assert!((est - sigma).abs() < 0.05 * sigma, "estimated σ {est}");
}

#[test]
fn expert_beats_random_by_a_wide_margin() {
    let envs: Vec<Box<dyn Environment>> = vec![
        Box::new(TrackWorld::new(TrackConfig::default()).unwrap()),
        Box::new(DodgeWorld::new(DodgeConfig::default()).unwrap()),
    ];
    for mut env in envs {
        let (expert, _) = policy_mean_return(env.as_mut(), 1.0, 100, 11).unwrap();
        let (random, _) = policy_mean_return(env.as_mut(), 0.0, 100, 12).unwrap();
        assert!(expert >= 5.0 * random.abs(), "{}: expert {expert}, random {random}", env.name());
    }
}
