use approx::assert_relative_eq;
use dualarm_core::agent::*;
use dualarm_core::env::{Env, EnvConfig, GoalPair};
use dualarm_core::nn::{Checkpoint, DenseNet, Gradients};
use nalgebra::Vector3;
use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config() -> AgentConfig {
    AgentConfig {
        hidden: 16,
        batch_size: 16,
        updates_per_episode: 4,
        episodes: 3,
        ..AgentConfig::default()
    }
}

fn planar_env() -> Env {
    Env::new(EnvConfig::planar()).unwrap()
}

fn collect_episode(env: &mut Env, agent: &CherAgent, seed: u64) -> EpisodeOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rollout(env, agent, seed, None, true, &mut rng).unwrap()
}

fn batch_from(env: &mut Env, agent: &CherAgent, n: usize, seed: u64) -> Batch {
    let ep = collect_episode(env, agent, seed);
    let items: Vec<&Transition> = ep.transitions.iter().take(n).collect();
    Batch::from_transitions(&agent.nets.features, &items)
}

/// Agent whose critics are randomized so their action gradients are not trivially small.
fn agent_with_live_critics(config: AgentConfig, seed: u64) -> (Env, CherAgent) {
    let env = planar_env();
    let mut agent = build_agent(&env, &config, seed).unwrap();
    agent.nets.reward_critic.orthogonal_init(seed + 11, 1.0);
    agent.nets.cost_critic.orthogonal_init(seed + 12, 1.0);
    agent.nets.policy.orthogonal_init(seed + 13, 1.0);
    (env, agent)
}

fn flat(g: &Gradients) -> Vec<f64> {
    g.param_slices().concat()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Central differences of `f` over every parameter of `net`.
fn finite_difference(net: &DenseNet, h: f64, mut f: impl FnMut(&DenseNet) -> f64) -> Vec<f64> {
    let mut probe = net.clone();
    let sizes: Vec<usize> = net.param_slices().iter().map(|s| s.len()).collect();
    let mut out = Vec::new();
    for (g, &len) in sizes.iter().enumerate() {
        for i in 0..len {
            let orig = probe.param_slices()[g][i];
            probe.param_slices_mut()[g][i] = orig + h;
            let up = f(&probe);
            probe.param_slices_mut()[g][i] = orig - h;
            let down = f(&probe);
            probe.param_slices_mut()[g][i] = orig;
            out.push((up - down) / (2.0 * h));
        }
    }
    out
}

fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1e-3 * scale))
        .fold(0.0, f64::max)
}

#[test]
fn greedy_action_is_repeatable() {
    let env = planar_env();
    let agent = build_agent(&env, &small_config(), 1).unwrap();
    let obs = env.observation();
    let g = *env.goals();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = agent.act(&obs, &g, false, &mut rng).unwrap();
    let b = agent.act(&obs, &g, false, &mut rng).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, agent.nets.deterministic_action(&obs, &g).unwrap());
}

#[test]
fn zero_noise_exploration_is_greedy() {
    let env = planar_env();
    let cfg = AgentConfig {
        sigma: 0.0,
        epsilon: 0.0,
        ..small_config()
    };
    let agent = build_agent(&env, &cfg, 2).unwrap();
    let obs = env.observation();
    let g = *env.goals();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    assert_eq!(
        agent.act(&obs, &g, true, &mut rng).unwrap(),
        agent.act(&obs, &g, false, &mut rng).unwrap()
    );
}

#[test]
fn exploration_noise_has_configured_std() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let sigma = 0.2;
    let n = 10_000;
    let samples: Vec<f64> = (0..n).map(|_| explore_action(&[0.0], sigma, 0.0, &mut rng)[0]).collect();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let std = (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    assert!((std - sigma).abs() < 0.1 * sigma, "std {std}");
}

#[test]
fn reward_target_arithmetic() {
    assert_relative_eq!(reward_target(0.0, -5.0, 0.98, -50.0), -4.9, epsilon = 1e-12);
    assert_eq!(reward_target(-1.0, 0.0, 0.98, -50.0), -1.0);
    assert_eq!(reward_target(-1.0, -60.0, 0.98, -50.0), -50.0);
    assert_eq!(reward_target(0.0, 3.0, 0.98, -50.0), 0.0);
    assert_relative_eq!(AgentConfig::default().return_floor(), -50.0, epsilon = 1e-9);
}

#[test]
fn critic_targets_match_manual_bootstrap() {
    let (mut env, agent) = agent_with_live_critics(small_config(), 5);
    let batch = batch_from(&mut env, &agent, 12, 6);
    let (yr, yc) = agent.critic_targets(&batch).unwrap();
    let n = &agent.nets;
    for i in 0..batch.len() {
        let f: Vec<f64> = batch.next_features.row(i).to_vec();
        let a = n.policy_target.forward_one(&f).unwrap();
        let sa: Vec<f64> = f.iter().chain(&a).copied().collect();
        let qr = n.reward_target.forward_one(&sa).unwrap()[0];
        let qc = n.cost_target.forward_one(&sa).unwrap()[0];
        let er = (batch.rewards[i] + 0.98 * qr).clamp(-50.0, 0.0);
        let ec = (batch.costs[i] + 0.98 * qc).max(0.0);
        assert_relative_eq!(yr[i], er, epsilon = 1e-12);
        assert_relative_eq!(yc[i], ec, epsilon = 1e-12);
    }
}

#[test]
fn critic_loss_is_zero_when_predictions_match_targets() {
    let env = planar_env();
    let mut agent = build_agent(&env, &small_config(), 7).unwrap();
    for net in [
        &mut agent.nets.reward_critic,
        &mut agent.nets.cost_critic,
        &mut agent.nets.reward_target,
        &mut agent.nets.cost_target,
    ] {
        let last = net.layers_mut().last_mut().unwrap();
        last.weight.fill(0.0);
        last.bias.fill(0.0);
    }
    let mut env = env;
    let mut batch = batch_from(&mut env, &agent, 10, 8);
    batch.rewards.fill(0.0);
    batch.costs.fill(0.0);
    let before = agent.nets.clone();
    let l = agent.update_critics(&batch).unwrap();
    assert!(l.reward.abs() < 1e-15 && l.cost.abs() < 1e-15);
    assert_eq!(before.reward_critic, agent.nets.reward_critic);
    assert_eq!(before.cost_critic, agent.nets.cost_critic);
}

#[test]
fn single_transition_critic_step_descends() {
    let cfg = AgentConfig {
        critic_lr: 1e-5,
        ..small_config()
    };
    let (mut env, mut agent) = agent_with_live_critics(cfg, 9);
    let batch = batch_from(&mut env, &agent, 1, 10);
    let pre = agent.critic_objectives(&batch).unwrap();
    let l = agent.update_critics(&batch).unwrap();
    assert_eq!(l.reward, pre[0].0);
    let post = agent.critic_objectives(&batch).unwrap();
    assert!(l.reward >= 0.0 && l.cost >= 0.0);
    assert!(post[0].0 <= pre[0].0);
    assert!(post[1].0 <= pre[1].0);
}

#[test]
fn critic_gradients_match_finite_differences() {
    let (mut env, agent) = agent_with_live_critics(small_config(), 11);
    let batch = batch_from(&mut env, &agent, 8, 12);
    let [(_, gr), (_, gc)] = agent.critic_objectives(&batch).unwrap();
    let fd_r = finite_difference(&agent.nets.reward_critic, 1e-6, |net| {
        let mut a = agent.clone();
        a.nets.reward_critic = net.clone();
        a.critic_objectives(&batch).unwrap()[0].0
    });
    let fd_c = finite_difference(&agent.nets.cost_critic, 1e-6, |net| {
        let mut a = agent.clone();
        a.nets.cost_critic = net.clone();
        a.critic_objectives(&batch).unwrap()[1].0
    });
    assert!(max_rel_error(&flat(&gr), &fd_r) < 1e-4);
    assert!(max_rel_error(&flat(&gc), &fd_c) < 1e-4);
}

#[test]
fn policy_gradient_matches_finite_differences() {
    for (mode, lambda) in [("penalty", 0.5), ("lagrangian", 2.0)] {
        let (mut env, agent) = agent_with_live_critics(small_config(), 13);
        let batch = batch_from(&mut env, &agent, 8, 14);
        let (_, g) = agent.policy_objective(&batch.features, lambda).unwrap();
        let fd = finite_difference(&agent.nets.policy, 1e-6, |net| {
            let mut a = agent.clone();
            a.nets.policy = net.clone();
            a.policy_objective(&batch.features, lambda).unwrap().0
        });
        let err = max_rel_error(&flat(&g), &fd);
        assert!(err < 1e-3, "{mode}: {err}");
    }
}

#[test]
fn zero_penalty_gives_plain_actor_gradient() {
    let (mut env, agent) = agent_with_live_critics(small_config(), 15);
    let batch = batch_from(&mut env, &agent, 8, 16);
    let (_, g) = agent.policy_objective(&batch.features, 0.0).unwrap();

    // deterministic policy gradient of −E[Q^r] + l2·E[‖a‖²], built by hand
    let n = &agent.nets;
    let b = batch.len() as f64;
    let pc = n.policy.forward_cached(&batch.features).unwrap();
    let a = pc.output().clone();
    let fw = batch.features.ncols();
    let sa = ndarray::concatenate![ndarray::Axis(1), batch.features, a];
    let rc = n.reward_critic.forward_cached(&sa).unwrap();
    let din = n
        .reward_critic
        .input_gradient(&rc, &Array2::from_elem((batch.len(), 1), -1.0 / b))
        .unwrap();
    let mut da = din.slice(ndarray::s![.., fw..]).to_owned();
    da.scaled_add(2.0 * agent.config.action_l2 / b, &a);
    let expected = n.policy.backward(&pc, &da).unwrap();
    assert_eq!(flat(&g), flat(&expected));
}

#[test]
fn cost_threshold_shifts_loss_not_gradient() {
    let (mut env, agent) = agent_with_live_critics(small_config(), 17);
    let batch = batch_from(&mut env, &agent, 8, 18);
    let mut shifted = agent.clone();
    shifted.config.cost_threshold += 3.0;
    let (l0, g0) = agent.policy_objective(&batch.features, 0.5).unwrap();
    let (l1, g1) = shifted.policy_objective(&batch.features, 0.5).unwrap();
    assert_relative_eq!(l0 - l1, 1.5, epsilon = 1e-9);
    assert_eq!(flat(&g0), flat(&g1));
}

#[test]
fn lagrangian_with_zero_multiplier_equals_zero_penalty() {
    let (mut env, agent) = agent_with_live_critics(small_config(), 19);
    let batch = batch_from(&mut env, &agent, 8, 20);
    let mut p = agent.clone();
    p.config.mode = ConstraintMode::Penalty { lambda: 0.0 };
    let mut l = agent.clone();
    l.config.mode = ConstraintMode::Lagrangian {
        lambda_init: 0.0,
        zeta: 0.1,
    };
    l.nets.lambda = 0.0;
    let lp = p.update_policy_penalty(&batch, 0.0).unwrap();
    let ll = l.update_policy_lagrangian(&batch).unwrap();
    assert_eq!(lp, ll);
    assert_eq!(p.nets.policy, l.nets.policy);
}

#[test]
fn large_multiplier_follows_cost_gradient() {
    let (mut env, agent) = agent_with_live_critics(small_config(), 21);
    let batch = batch_from(&mut env, &agent, 8, 22);
    let (_, g1) = agent.policy_objective(&batch.features, 1.0).unwrap();
    let (_, g2) = agent.policy_objective(&batch.features, 2.0).unwrap();
    let pure_cost: Vec<f64> = flat(&g2).iter().zip(flat(&g1)).map(|(a, b)| a - b).collect();
    let (_, big) = agent.policy_objective(&batch.features, 1e3).unwrap();
    assert!(cosine(&flat(&big), &pure_cost) > 0.99);
}

#[test]
fn multiplier_step_arithmetic() {
    assert_relative_eq!(multiplier_step(1.0, 0.1, 2.0), 1.2, epsilon = 1e-12);
    assert_eq!(multiplier_step(0.05, 0.1, -1.0), 0.0);
    assert_eq!(multiplier_step(0.7, 0.1, 0.0), 0.7);
}

#[test]
fn update_multiplier_uses_cost_critic_violation() {
    let cfg = AgentConfig {
        mode: ConstraintMode::Lagrangian {
            lambda_init: 1.0,
            zeta: 0.1,
        },
        ..small_config()
    };
    let (mut env, mut agent) = agent_with_live_critics(cfg, 23);
    agent.nets.lambda = 1.0;
    let batch = batch_from(&mut env, &agent, 8, 24);
    let v = agent.cost_violation(&batch).unwrap();
    let got = agent.update_multiplier(&batch, 0.1).unwrap();
    assert_eq!(v, got);
    assert_eq!(agent.nets.lambda, (1.0 + 0.1 * v).max(0.0));
}

#[test]
fn her_final_step_is_success_and_preserves_fields() {
    let env_cfg = EnvConfig::planar();
    let mut env = Env::new(env_cfg.clone()).unwrap();
    let agent = build_agent(&env, &small_config(), 25).unwrap();
    let ep = collect_episode(&mut env, &agent, 26);
    let rel = her_relabel(&ep.transitions, env_cfg.thresholds).unwrap();
    assert_eq!(rel.len(), ep.transitions.len());
    assert_eq!(rel.last().unwrap().reward, 0.0);
    let g = GoalPair(ep.transitions.last().unwrap().achieved);
    for (a, b) in ep.transitions.iter().zip(&rel) {
        assert_eq!(a.obs, b.obs);
        assert_eq!(a.action, b.action);
        assert_eq!(a.next_obs, b.next_obs);
        assert_eq!(a.cost, b.cost);
        assert_eq!(a.achieved, b.achieved);
        assert_eq!(b.goals, g);
    }
    assert!(matches!(her_relabel(&[], env_cfg.thresholds), Err(AgentError::EmptyEpisode)));
}

#[test]
fn her_on_successful_episode_lands_near_original_goals() {
    let env_cfg = EnvConfig::planar();
    let mut env = Env::new(env_cfg.clone()).unwrap();
    // goals placed at the home end-effectors, so standing still succeeds
    let home = GoalPair(env.state().ee_positions);
    let cfg = AgentConfig {
        sigma: 0.0,
        epsilon: 0.0,
        ..small_config()
    };
    let mut still = build_agent(&env, &cfg, 27).unwrap();
    for l in still.nets.policy.layers_mut() {
        l.weight.fill(0.0);
        l.bias.fill(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ep = rollout(&mut env, &still, 1, Some(home), true, &mut rng).unwrap();
    assert!(ep.success);
    let rel = her_relabel(&ep.transitions, env_cfg.thresholds).unwrap();
    for arm in 0..2 {
        assert!((rel[0].goals.0[arm] - home.0[arm]).norm() <= env_cfg.thresholds[arm]);
    }
}

#[test]
fn training_stores_two_transitions_per_step() {
    let mut env = planar_env();
    let cfg = small_config();
    let out = train(&mut env, &cfg, 28, None).unwrap();
    assert_eq!(out.log.len(), 3);
    // a buffer filled the way the trainer does it
    let mut buf = ReplayBuffer::new(10_000);
    let agent = &out.agent;
    let ep = collect_episode(&mut env, agent, 29);
    let rel = her_relabel(&ep.transitions, env.config().thresholds).unwrap();
    buf.extend(ep.transitions.clone());
    buf.extend(rel);
    assert_eq!(buf.len(), 2 * env.config().horizon);
}

#[test]
fn buffer_sampling_is_reproducible_and_bounded() {
    let mut env = planar_env();
    let agent = build_agent(&env, &small_config(), 30).unwrap();
    let ep = collect_episode(&mut env, &agent, 31);
    let mut buf = ReplayBuffer::new(25);
    buf.extend(ep.transitions.clone());
    assert_eq!(buf.len(), 25);
    // the ring overwrote the oldest entries
    assert_eq!(buf.get(0).unwrap(), &ep.transitions[50]);
    let a: Vec<_> = buf.sample(40, &mut ChaCha8Rng::seed_from_u64(1)).unwrap().into_iter().cloned().collect();
    let b: Vec<_> = buf.sample(40, &mut ChaCha8Rng::seed_from_u64(1)).unwrap().into_iter().cloned().collect();
    assert_eq!(a, b);
    assert!(matches!(
        ReplayBuffer::new(3).sample(1, &mut ChaCha8Rng::seed_from_u64(0)),
        Err(AgentError::EmptyBuffer)
    ));
}

#[test]
fn training_is_deterministic() {
    let cfg = small_config();
    let a = train(&mut planar_env(), &cfg, 32, None).unwrap();
    let b = train(&mut planar_env(), &cfg, 32, None).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.agent.nets, b.agent.nets);
}

#[test]
fn lagrangian_training_keeps_multiplier_non_negative() {
    let cfg = AgentConfig {
        mode: ConstraintMode::Lagrangian {
            lambda_init: 0.0,
            zeta: 0.05,
        },
        cost_threshold: 0.0,
        episodes: 4,
        ..small_config()
    };
    let out = train(&mut planar_env(), &cfg, 33, None).unwrap();
    let mut prev = 0.0;
    for r in &out.log {
        assert!(r.lambda >= 0.0);
        if r.cost_violation > 0.0 {
            assert!(r.lambda > prev);
        }
        prev = r.lambda;
    }
}

#[test]
fn checkpoints_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = AgentConfig {
        checkpoint_every: 2,
        episodes: 4,
        mode: ConstraintMode::Lagrangian {
            lambda_init: 0.3,
            zeta: 0.01,
        },
        ..small_config()
    };
    let out = train(&mut planar_env(), &cfg, 34, Some(dir.path())).unwrap();
    assert_eq!(out.checkpoints.len(), 2);
    let loaded = CherNetworks::from_checkpoint(&Checkpoint::load(out.checkpoints.last().unwrap()).unwrap()).unwrap();
    assert_eq!(loaded, out.agent.nets);
}

#[test]
fn train_log_csv_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(&mut planar_env(), &small_config(), 35, None).unwrap();
    let p = dir.path().join("log.csv");
    write_train_log(&p, &out.log).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert!(text.starts_with("episode,mean_e1,mean_e2,success_rate,cost_value,lambda,"));
    assert_eq!(read_train_log(&p).unwrap(), out.log);
}

#[test]
fn invalid_configs_are_rejected() {
    let env = planar_env();
    for cfg in [
        AgentConfig {
            gamma_r: 1.0,
            ..AgentConfig::default()
        },
        AgentConfig {
            mode: ConstraintMode::Penalty { lambda: -0.1 },
            ..AgentConfig::default()
        },
        AgentConfig {
            mode: ConstraintMode::Lagrangian {
                lambda_init: 0.0,
                zeta: 0.0,
            },
            ..AgentConfig::default()
        },
        AgentConfig {
            batch_size: 0,
            ..AgentConfig::default()
        },
    ] {
        assert!(matches!(build_agent(&env, &cfg, 0), Err(AgentError::InvalidConfig(_))));
    }
}

#[test]
fn feature_layout() {
    let env = planar_env();
    let map = FeatureMap {
        dofs: [2, 2],
        goal_delta_scale: 5.0,
    };
    assert_eq!(map.width(), 30);
    let g = GoalPair([Vector3::new(1.0, 0.2, 0.0), Vector3::new(1.0, -0.2, 0.0)]);
    let obs = env.observation();
    let f = map.features(&obs, &g);
    assert_eq!(f.len(), 30);
    assert_relative_eq!(f[0], obs.joint_angles(0)[0].sin(), epsilon = 1e-15);
    let d = (g.0[1] - obs.ee(1)) * 5.0;
    assert_relative_eq!(f[29], d.z, epsilon = 1e-15);
    assert_relative_eq!(f[27], d.x, epsilon = 1e-15);
}

proptest! {
    #[test]
    fn multiplier_never_negative(l in 0.0f64..10.0, z in 1e-4f64..1.0, v in -100.0f64..100.0) {
        prop_assert!(multiplier_step(l, z, v) >= 0.0);
    }

    #[test]
    fn reward_targets_stay_in_return_range(r in prop::sample::select(vec![0.0, -1.0]), q in -200.0f64..50.0) {
        let y = reward_target(r, q, 0.98, -50.0);
        prop_assert!((-50.0..=0.0).contains(&y));
    }

    #[test]
    fn exploration_stays_in_bounds(mu in -1.0f64..1.0, sigma in 0.0f64..2.0, eps in 0.0f64..1.0, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = explore_action(&[mu, -mu], sigma, eps, &mut rng);
        prop_assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn buffer_never_exceeds_capacity(cap in 1usize..50, pushes in 0usize..120) {
        let env = planar_env();
        let t = Transition {
            obs: env.observation(),
            action: vec![0.0; 4],
            goals: *env.goals(),
            reward: -1.0,
            cost: 0.0,
            next_obs: env.observation(),
            achieved: env.state().ee_positions,
            final_step: false,
        };
        let mut buf = ReplayBuffer::new(cap);
        for _ in 0..pushes {
            buf.push(t.clone());
            prop_assert!(buf.len() <= cap);
        }
        prop_assert_eq!(buf.len(), pushes.min(cap));
    }
}
