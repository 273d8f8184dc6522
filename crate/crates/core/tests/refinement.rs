mod common;

use replab::app::{AppState, Command, OpKind, Operation};
use replab::engines::{run, Protocol, Scenario};
use replab::kernel::ProcessId;
use replab::multiconsensus::McMode;
use replab::refinement::{
    check_chain, check_scenario_trace, explore, fixtures, path_to_trace, CheckConfig, ExploreBounds, Mapping,
    Property, Status,
};
use replab::specs::Style;

use common::fuzz_scenario;

fn rejected_by(verdicts: &[replab::refinement::Verdict]) -> Option<Mapping> {
    verdicts.iter().find(|v| !v.accepted()).map(|v| v.mapping)
}

#[test]
fn engine_traces_refine_the_linearizable_service() {
    for p in Protocol::ALL {
        for seed in 0..15 {
            let sc = fuzz_scenario(p, seed);
            let r = run(&sc).unwrap();
            let v = check_scenario_trace(&r.trace, &sc).unwrap();
            assert_eq!(v.len(), Mapping::chain_for(CheckConfig::for_scenario(&sc).mode).len());
            for verdict in &v {
                assert!(verdict.accepted(), "{p} seed {seed}: {:?}", verdict.status);
            }
            assert!(v.last().unwrap().abstract_events > 0, "{p} seed {seed}: nothing executed");
        }
    }
}

#[test]
fn tampered_payload_is_rejected() {
    for p in Protocol::ALL {
        let mut sc = Scenario::new(p);
        sc.workload.ops_per_client = 5;
        let r = run(&sc).unwrap();
        let bad = fixtures::tamper_payload(&r.trace).expect("trace has follower certifications");
        let v = check_scenario_trace(&bad, &sc).unwrap();
        let first = rejected_by(&v).unwrap_or_else(|| panic!("{p}: tampered trace accepted"));
        assert!(first == Mapping::EngineToMc || first == Mapping::EngineToMcPo, "{p}: {first}");
        assert!(v.iter().skip(1).all(|x| x.status == Status::NotReached));
    }
}

#[test]
fn removed_certifications_are_rejected() {
    for p in Protocol::ALL {
        let mut sc = Scenario::new(p);
        sc.workload.ops_per_client = 5;
        let r = run(&sc).unwrap();
        let bad = fixtures::drop_certifications(&r.trace).expect("slot 1 was certified by followers");
        let v = check_scenario_trace(&bad, &sc).unwrap();
        match &v[0].status {
            Status::Rejected { reason, .. } => assert!(reason.contains("observe_decision"), "{p}: {reason}"),
            other => panic!("{p}: {other:?}"),
        }
    }
}

#[test]
fn rejection_reports_states_around_the_event() {
    let sc = Scenario::new(Protocol::Paxos);
    let r = run(&sc).unwrap();
    let bad = fixtures::tamper_payload(&r.trace).unwrap();
    let v = check_scenario_trace(&bad, &sc).unwrap();
    let Status::Rejected { seq, before, after, .. } = &v[0].status else {
        panic!("accepted");
    };
    assert_eq!(bad[*seq as usize - 1].transition, "certify");
    assert!(before.is_object() && after.is_object());
}

#[test]
fn unordered_passive_trace_fails_the_passive_mapping() {
    let (trace, cfg) = fixtures::prefix_anomaly(1_000_000).expect("anomaly reachable without prefix order");
    let applied: Vec<i64> = trace
        .iter()
        .filter(|e| e.transition == "update")
        .filter_map(|e| e.params["new_state"]["value"].as_i64())
        .collect();
    assert_eq!(applied, vec![4, 7]);
    // The same trace is a legal multi-consensus run on its own.
    let mc = check_chain(&trace, &cfg, &[Mapping::EngineToMc]).unwrap();
    assert!(mc[0].accepted(), "{:?}", mc[0].status);
    let v = check_chain(&trace, &cfg, &[Mapping::McPoToPassive]).unwrap();
    match &v[0].status {
        Status::Rejected { reason, .. } => assert!(reason.contains("decide"), "{reason}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn explorer_counterexample_replays_as_rejected_trace() {
    // Without prefix order the prefix property fails quickly.
    let mut b = fixtures::register_race(McMode::Plain, 1_000_000);
    b.properties = vec![Property::PrefixOrder];
    b.goal = None;
    let report = explore(&b);
    let cx = report.violation.expect("prefix order can break");
    assert_eq!(cx.property, Property::PrefixOrder);
    let trace = path_to_trace(&cx.path);
    let cfg = CheckConfig {
        mode: McMode::Plain,
        style: Style::Passive,
        certifiers: (0..3).map(ProcessId::certifier).collect(),
        replicas: (0..2).map(ProcessId::replica).collect(),
        initial: AppState::Register { value: 3 },
        initial_sequencer: Some(ProcessId::certifier(0)),
    };
    let v = check_chain(&trace, &cfg, &[Mapping::McPoToPassive]).unwrap();
    assert!(!v[0].accepted());
}

#[test]
fn small_active_configuration_is_safe() {
    let b = ExploreBounds {
        n: 3,
        replicas: 2,
        mode: McMode::Plain,
        style: Style::Active,
        initial: AppState::Register { value: 0 },
        commands: vec![
            Command::new(ProcessId::client(0), Operation::new(1, OpKind::Inc)),
            Command::new(ProcessId::client(1), Operation::new(1, OpKind::Double)),
        ],
        max_round: 1,
        max_slots: 1,
        state_cap: 1_000_000,
        properties: Property::ALL.to_vec(),
        goal: None,
        reset_shadow: false,
    };
    let r = explore(&b);
    assert!(r.complete);
    assert!(r.violation.is_none(), "{:?}", r.violation);
    assert!(r.states > 100);
}

#[test]
fn state_cap_marks_search_incomplete() {
    let r = explore(&fixtures::register_race(McMode::PrefixOrdered, 500));
    assert!(!r.complete);
    assert_eq!(r.states, 500);
}
