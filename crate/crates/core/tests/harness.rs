mod common;

use aia_core::expert::expert_plan;
use aia_core::harness::{
    batch_evaluate, robustness_scenario, run_episode, run_episode_with_snapshots, Policy, ScenarioConfig,
    TerminationReason,
};
use aia_core::{Cell, PolicyParams, SensorSpec};
use std::sync::Arc;

fn desk(seed: u64) -> aia_core::harness::Instance {
    ScenarioConfig { height: 10, width: 10, obstacle_count: 2, min_target_distance: 1.5, ..ScenarioConfig::default() }
        .instantiate(seed)
        .unwrap()
}

#[test]
fn already_localized_targets_finish_at_zero() {
    let cfg = ScenarioConfig { height: 8, width: 8, prior_sigma: 0.05, ..ScenarioConfig::default() };
    let inst = cfg.instantiate(1).unwrap();
    for policy in [Policy::Expert, Policy::Random, Policy::Greedy] {
        let r = run_episode(&inst, &policy, 1, 10).unwrap();
        assert!(r.success);
        assert_eq!(r.horizon, 0);
        assert_eq!(r.reason, TerminationReason::Success);
    }
}

#[test]
fn zero_cap_is_a_failure() {
    let inst = desk(2);
    let r = run_episode(&inst, &Policy::Expert, 2, 0).unwrap();
    assert!(!r.success);
    assert_eq!(r.horizon, 0);
    assert_eq!(r.reason, TerminationReason::HorizonCap);
}

#[test]
fn noiseless_single_robot_follows_the_open_loop_plan() {
    for seed in 0..6 {
        let cfg = ScenarioConfig {
            height: 8,
            width: 8,
            robots: 1,
            targets: 1,
            min_target_distance: 1.5,
            sensor: SensorSpec { r_sense: 1.0, noise_scale: 0.0, occlusion: true },
            ..ScenarioConfig::default()
        };
        let inst = cfg.instantiate(seed).unwrap();
        let plan = expert_plan(&inst.planning_model(), &inst.robots, &inst.prior, 30).unwrap();
        let r = run_episode(&inst, &Policy::Expert, seed, 40).unwrap();
        assert!(r.success);
        assert_eq!(r.horizon, plan.horizon, "seed {seed}");
    }
}

#[test]
fn unlimited_range_gives_complete_graphs() {
    let inst = desk(3);
    let n = inst.robots.len();
    let r = run_episode(&inst, &Policy::Random, 3, 15).unwrap();
    assert!(r.edge_counts.iter().all(|&e| e == n * n));
    assert!(r.dropped_edges.iter().all(|&d| d == 0));
}

#[test]
fn zero_rate_failure_settings_change_nothing() {
    let inst = desk(4);
    let plain = run_episode(&inst, &Policy::Random, 9, 20).unwrap();
    let mut cfg = inst.clone();
    cfg.config.edge_drop_lambda = 0.0;
    cfg.config.r_com = Some(1e6);
    let injected = run_episode(&cfg, &Policy::Random, 9, 20).unwrap();
    assert_eq!(plain, injected);
}

#[test]
fn losing_the_only_robot_ends_the_episode() {
    let cfg = ScenarioConfig { height: 8, width: 8, robots: 1, targets: 1, min_target_distance: 3.0, ..ScenarioConfig::default() };
    let inst = cfg.instantiate(5).unwrap();
    let r = robustness_scenario(&inst, &Policy::Random, 2, 0.0, None, 5).unwrap();
    if r.horizon < 2 {
        return;
    }
    assert!(!r.success);
    assert_eq!(r.reason, TerminationReason::AllRobotsFailed);
    assert_eq!(r.killed, Some(0));
    assert_eq!(r.robots[0].terminated_at, Some(2));
    assert_eq!(r.robots[0].det_sigma.len(), 2);
}

#[test]
fn robustness_preset_layout() {
    let cfg = ScenarioConfig::robustness();
    let inst = cfg.instantiate(0).unwrap();
    assert_eq!(inst.robots, vec![Cell::new(0, 0), Cell::new(1, 0), Cell::new(2, 0)]);
    assert_eq!(inst.targets.len(), 2);
    let r = robustness_scenario(&inst, &Policy::Expert, 10, 1.0, Some(4.0), 3).unwrap();
    assert!(r.killed.is_some());
    // Links within 4 m only, then Poisson drops.
    assert!(r.edge_counts.iter().all(|&e| e <= 9));
}

#[test]
fn episodes_are_reproducible() {
    let inst = desk(6);
    let params = Arc::new(PolicyParams::init(Default::default(), 6));
    for policy in [Policy::Expert, Policy::Random, Policy::Greedy, Policy::Gnn(params)] {
        let a = run_episode(&inst, &policy, 6, 20).unwrap();
        let b = run_episode(&inst, &policy, 6, 20).unwrap();
        assert_eq!(a, b, "{}", policy.name());
    }
    let a = run_episode(&inst, &Policy::Random, 1, 20).unwrap();
    let b = run_episode(&inst, &Policy::Random, 2, 20).unwrap();
    assert_ne!(a.robots[0].positions, b.robots[0].positions);
}

#[test]
fn snapshots_line_up_with_the_trace() {
    let inst = desk(7);
    let (r, snaps) = run_episode_with_snapshots(&inst, &Policy::Expert, 7, 30).unwrap();
    assert_eq!(snaps.len(), r.horizon);
    for s in &snaps {
        for (i, a) in s.actions.iter().enumerate() {
            assert_eq!(*a, r.robots[i].actions[s.t]);
            assert_eq!(s.graph.attributes[i].p, r.robots[i].positions[s.t]);
        }
    }
}

#[test]
fn batch_metrics_are_consistent() {
    let instances: Vec<_> = (0..12).map(desk).collect();
    let reports = batch_evaluate(&instances, &[Policy::Expert, Policy::Random]).unwrap();
    let (expert, random) = (&reports[0], &reports[1]);
    assert_eq!(expert.success_rate, 1.0);
    assert_eq!(expert.flowtime_increase, 0.0);
    assert!(random.success_rate <= expert.success_rate);
    assert_eq!(expert.records.len() + expert.dropped.len(), instances.len());
    for r in &random.records {
        assert!(r.horizon <= 3 * r.f_star + 1);
        assert_eq!(r.success, r.solved && r.horizon <= 3 * r.f_star);
    }
    let one = batch_evaluate(&instances[..1], &[Policy::Expert]).unwrap();
    assert!(one[0].records.len() + one[0].dropped.len() == 1);
}

#[test]
fn trace_csv_has_one_row_per_robot_step() {
    let inst = desk(8);
    let r = run_episode(&inst, &Policy::Random, 8, 12).unwrap();
    let mut buf = Vec::new();
    r.write_trace_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "t,robot_id,row,col,action,det_sigma,det_block_0,det_block_1");
    let rows: usize = r.robots.iter().map(|t| t.det_sigma.len()).sum();
    assert_eq!(lines.count(), rows);
}
