use dualarm_core::agent::{CherNetworks, FeatureMap};
use dualarm_core::env::{Env, EnvConfig};
use dualarm_core::harness::*;
use dualarm_core::dynamics::{compute_coupling_inertia, compute_jacobians};
use nalgebra::DVector;
use proptest::prelude::*;

fn random_nets(env: &EnvConfig) -> CherNetworks {
    let e = Env::new(env.clone()).unwrap();
    let map = FeatureMap { dofs: e.observation().dofs(), goal_delta_scale: 5.0 };
    CherNetworks::new(map, env.sim.limits.max_rate, 32, 2, 0.5, 3)
}

#[test]
fn static_target_bound_is_closed_form() {
    let times: Vec<f64> = (0..=100).map(|k| 0.7 + 0.05 * k as f64).collect();
    let v = vec![0.4; times.len()];
    let zero = vec![0.0; times.len()];
    let t_b = theorem1_bound(&times, &v, &zero, 0.3).unwrap();
    assert_eq!(t_b, 0.7 + 0.3 / 0.4);
}

#[test]
fn equal_speeds_never_converge() {
    let times: Vec<f64> = (0..50).map(|k| k as f64 * 0.1).collect();
    let s: Vec<f64> = times.iter().map(|t| 0.2 + 0.1 * t.sin()).collect();
    assert_eq!(theorem1_bound(&times, &s, &s, 0.1).unwrap(), f64::INFINITY);
    assert_eq!(theorem1_bound(&times, &s, &s, 0.0).unwrap(), 0.0);
}

#[test]
fn bound_rejects_bad_input() {
    let t = [0.0, 1.0];
    assert!(matches!(theorem1_bound(&t, &[1.0, 1.0], &[0.0, 0.0], -0.1), Err(HarnessError::NegativeGap(_))));
    assert!(theorem1_bound(&t, &[1.0], &[0.0, 0.0], 0.1).is_err());
    assert!(theorem1_bound(&[0.0, 0.0], &[1.0, 1.0], &[0.0, 0.0], 0.1).is_err());
}

/// Fine-grid brute force over the linear interpolant.
fn brute_force(times: &[f64], a: &[f64], b: &[f64], d: f64) -> f64 {
    let n = 20_000;
    let mut acc = 0.0;
    for k in 0..times.len() - 1 {
        let h = (times[k + 1] - times[k]) / n as f64;
        for j in 0..n {
            let s = (j as f64 + 0.5) / n as f64;
            let g = (1.0 - s) * (a[k] - b[k]) + s * (a[k + 1] - b[k + 1]);
            acc += g * h;
            if acc >= d {
                return times[k] + (j as f64 + 1.0) * h;
            }
        }
    }
    f64::INFINITY
}

#[test]
fn time_varying_bound_matches_brute_force() {
    let times: Vec<f64> = (0..40).map(|k| 0.05 * k as f64).collect();
    let ee: Vec<f64> = times.iter().map(|t| 0.6 * (1.0 - (-3.0 * t).exp()) + 0.05 * (7.0 * t).sin()).collect();
    let tgt: Vec<f64> = times.iter().map(|t| 0.1 + 0.05 * (2.0 * t).cos()).collect();
    for d in [0.01, 0.05, 0.2, 0.5] {
        let fast = theorem1_bound(&times, &ee, &tgt, d).unwrap();
        let slow = brute_force(&times, &ee, &tgt, d);
        assert!((fast - slow).abs() < 1e-4, "d {d}: {fast} vs {slow}");
    }
}

#[test]
fn verdict_only_when_finite_and_premise() {
    let c = Theorem1Check { t_b: 1.0, premise_holds: true, error_at_t_b: 0.04, bound: 0.06 };
    assert_eq!(c.verdict(), Some(true));
    assert_eq!(Theorem1Check { error_at_t_b: 0.07, ..c }.verdict(), Some(false));
    assert_eq!(Theorem1Check { premise_holds: false, ..c }.verdict(), None);
    assert_eq!(Theorem1Check { t_b: f64::INFINITY, ..c }.verdict(), None);
}

#[test]
fn slope_and_divergence() {
    let up: Vec<f64> = (0..30).map(|k| 0.1 + 0.01 * k as f64).collect();
    assert!((trend_slope(&up) - 0.01).abs() < 1e-12);
    assert!(divergence_flag(&up));
    let down: Vec<f64> = up.iter().rev().cloned().collect();
    assert!(!divergence_flag(&down));
    // rising early, flat late: only the final third counts
    let mut shape = up.clone();
    shape.extend(std::iter::repeat(0.4).take(60));
    assert!(!divergence_flag(&shape));
}

#[test]
fn convergence_step_cases() {
    assert_eq!(convergence_step(&[0.5, 0.3, 0.1, 0.05, 0.02], 0.12), Some(2));
    assert_eq!(convergence_step(&[0.5, 0.1, 0.3, 0.05, 0.02], 0.12), Some(3));
    assert_eq!(convergence_step(&[0.01, 0.02], 0.12), Some(0));
    assert_eq!(convergence_step(&[0.01, 0.2], 0.12), None);
}

#[test]
fn percentile_nearest_rank() {
    let v: Vec<f64> = (1..=100).map(|k| k as f64).collect();
    assert_eq!(percentile95(&v), 95.0);
    assert_eq!(percentile95(&[3.0]), 3.0);
    assert_eq!(percentile95(&[]), 0.0);
}

#[test]
fn speed_cap_limits_commanded_ee_speed() {
    let env = Env::new(EnvConfig::planar()).unwrap();
    let cmd = vec![1.0, -0.8, -0.9, 0.7];
    let capped = cap_ee_speed(&env, &cmd, 0.05).unwrap();
    let chain = env.simulator().chain();
    let mats = compute_coupling_inertia(chain, env.state());
    let jacs = compute_jacobians(chain, env.state());
    let g = dualarm_core::dynamics::generalized_jacobians(&mats, &jacs).unwrap();
    let q = DVector::from_column_slice(&capped);
    let speeds: Vec<f64> = g.iter().map(|j| (j.rows(0, 3) * &q).norm()).collect();
    let fastest = speeds.iter().cloned().fold(0.0, f64::max);
    assert!((fastest - 0.05).abs() < 1e-12, "{speeds:?}");
    let ratio: Vec<f64> = capped.iter().zip(&cmd).map(|(a, b)| a / b).collect();
    assert!(ratio.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-12));
    assert_eq!(cap_ee_speed(&env, &cmd, 100.0).unwrap(), cmd);
}

#[test]
fn scenario_config_validation() {
    assert!(ScenarioConfig::default().validate().is_ok());
    for bad in [
        ScenarioConfig { omega: -1.0, ..Default::default() },
        ScenarioConfig { radius: 0.0, ..Default::default() },
        ScenarioConfig { axis: [0.0; 3], ..Default::default() },
        ScenarioConfig { frame_interval: 0, ..Default::default() },
        ScenarioConfig { burn_in: 5, ..Default::default() },
        ScenarioConfig { ee_speed_cap: Some(0.0), ..Default::default() },
    ] {
        assert!(matches!(bad.validate(), Err(HarnessError::InvalidConfig(_))), "{bad:?}");
    }
    let text = "omega = 0.5\nbogus = 1\n";
    assert!(toml::from_str::<ScenarioConfig>(text).is_err());
}

#[test]
fn targets_are_diametric_on_the_circle() {
    let c = ScenarioConfig::default();
    for k in 0..10 {
        let [a, b] = c.targets(k as f64 * 0.3);
        let centre = nalgebra::Vector3::from(c.center);
        assert!(((a - centre).norm() - 0.15).abs() < 1e-12);
        assert!((a + b - 2.0 * centre).norm() < 1e-12);
        assert!(a.z.abs() < 1e-12);
    }
}

#[test]
fn tracking_is_deterministic_and_records_traces() {
    let env = EnvConfig::planar();
    let nets = random_nets(&env);
    let cfg = ScenarioConfig { steps: 60, ..Default::default() };
    let a = run_tracking_scenario(&env, &nets, &cfg, None).unwrap();
    let b = run_tracking_scenario(&env, &nets, &cfg, None).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.trace.len(), 60);
    assert_eq!(a.filter_traces[0].len(), 60 - cfg.frame_interval);
    assert!(a.metrics.e1.iter().chain(&a.metrics.e2).all(|e| *e >= 0.0));
    assert!(a.metrics.cost_value >= 0.0);
    assert!((a.rate_estimate - 0.5).abs() < 0.05, "rate {}", a.rate_estimate);
    let dir = tempfile::tempdir().unwrap();
    write_tracking_trace(dir.path().join("t.csv"), &a.trace).unwrap();
}

#[test]
fn static_scenario_predicts_measured_targets() {
    let env = EnvConfig::planar();
    let nets = random_nets(&env);
    let cfg = ScenarioConfig { omega: 0.0, steps: 80, ..Default::default() };
    let out = run_tracking_scenario(&env, &nets, &cfg, None).unwrap();
    assert_eq!(out.rate_estimate, 0.0);
    let tail = &out.trace[40..];
    assert!(tail.iter().all(|r| r.pred_err1 < 0.02 && r.pred_err2 < 0.02));
}

#[test]
fn encoder_source_needs_a_network() {
    let env = EnvConfig::planar();
    let nets = random_nets(&env);
    let cfg = ScenarioConfig { rotation_source: RotationSource::Encoder, ..Default::default() };
    assert!(matches!(run_tracking_scenario(&env, &nets, &cfg, None), Err(HarnessError::InvalidConfig(_))));
}

#[test]
fn evaluation_is_deterministic_and_rejects_empty() {
    let env = EnvConfig::planar();
    let nets = random_nets(&env);
    let opts = EvalOptions { base_mass_scales: vec![1.0, 0.5], randomize_initial: true, ..Default::default() };
    let a = evaluate_policy(&env, &nets, 3, &opts).unwrap();
    let b = evaluate_policy(&env, &nets, 3, &opts).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 2);
    assert_eq!(a[1].base_mass_scale, 0.5);
    assert!(matches!(evaluate_policy(&env, &nets, 0, &opts), Err(HarnessError::EmptyReport)));
}

fn summary(mode: &str, lambda: f64, seed: u64, cost: f64) -> RunSummary {
    RunSummary {
        run: format!("{mode}-{lambda}-{seed}"),
        mode: mode.into(),
        lambda,
        seed,
        her: true,
        episodes: 50,
        success_rate: 0.9,
        mean_e1: 0.02,
        mean_e2: 0.03,
        cost_value: cost,
    }
}

#[test]
fn report_groups_and_orders() {
    let rows = vec![
        summary("penalty", 0.5, 0, 4.0),
        summary("penalty", 0.5, 1, 4.2),
        summary("penalty", 0.0, 0, 4.5),
        summary("penalty", 0.0, 1, 4.3),
    ];
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.csv");
    write_run_summaries(&p, &rows).unwrap();
    assert_eq!(read_run_summaries(&p).unwrap(), rows);
    let g = group_summaries(&rows).unwrap();
    assert_eq!(g.len(), 2);
    let (low, high) = penalty_cost_ordering(&g).unwrap();
    assert!((low - 4.1).abs() < 1e-12 && (high - 4.4).abs() < 1e-12);
    let table = render_table(&g);
    assert_eq!(table.lines().count(), 4);
    assert!(table.contains("| penalty | 0.5 | yes | 2 |"));
    assert!(matches!(group_summaries(&[]), Err(HarnessError::EmptyReport)));
}

proptest! {
    #[test]
    fn constant_speeds_give_closed_form(v in 0.01f64..2.0, w in 0.0f64..1.0, d in 0.0f64..1.0, t0 in 0.0f64..5.0) {
        prop_assume!(v > w + 1e-3);
        let times: Vec<f64> = (0..=4000).map(|k| t0 + 0.01 * k as f64).collect();
        let ee = vec![v; times.len()];
        let tg = vec![w; times.len()];
        let t_b = theorem1_bound(&times, &ee, &tg, d).unwrap();
        let expect = t0 + d / (v - w);
        if expect <= *times.last().unwrap() {
            prop_assert!((t_b - expect).abs() < 1e-9);
        } else {
            prop_assert_eq!(t_b, f64::INFINITY);
        }
    }

    #[test]
    fn bound_is_monotone_in_gap(d1 in 0.0f64..0.5, d2 in 0.0f64..0.5) {
        let times: Vec<f64> = (0..100).map(|k| 0.05 * k as f64).collect();
        let ee: Vec<f64> = times.iter().map(|t| 0.3 + 0.2 * (3.0 * t).sin()).collect();
        let tg = vec![0.1; times.len()];
        let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        prop_assert!(theorem1_bound(&times, &ee, &tg, lo).unwrap() <= theorem1_bound(&times, &ee, &tg, hi).unwrap());
    }
}
