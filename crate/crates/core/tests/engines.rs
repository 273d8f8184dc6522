mod common;

use std::collections::BTreeSet;

use replab::engines::{run, ConfigError, CrashAt, Dissemination, Protocol, Scenario};
use replab::kernel::{read_trace, trace_to_string, ProcessId};
use replab::metrics::Metrics;

use common::fuzz_scenario;

#[test]
fn failure_free_runs_answer_every_client() {
    for p in Protocol::ALL {
        let mut sc = Scenario::new(p);
        sc.workload.clients = 3;
        sc.workload.ops_per_client = 10;
        let r = run(&sc).unwrap();
        assert!(r.violations.is_empty(), "{p}: {:?}", r.violations);
        assert!(r.all_completed(), "{p}: {}/{}", r.completed, r.expected);
        assert_eq!(r.expected, 30);
        let recovers = r.trace.iter().filter(|e| e.transition == "recover").count();
        assert_eq!(recovers, 0, "{p}: recovery without failures");
    }
}

#[test]
fn fuzzed_runs_stay_safe() {
    for p in Protocol::ALL {
        for seed in 0..40 {
            let r = run(&fuzz_scenario(p, seed)).unwrap();
            assert!(r.violations.is_empty(), "{p} seed {seed}: {:?}", r.violations);
            assert!(r.all_completed(), "{p} seed {seed}");
        }
    }
}

#[test]
fn sequencer_crash_is_survived() {
    for p in Protocol::ALL {
        for n in [3, 5] {
            let mut sc = Scenario::new(p);
            sc.n = n;
            sc.f = (n - 1) / 2;
            sc.workload.ops_per_client = 15;
            sc.crashes.push(CrashAt {
                process: ProcessId::certifier(0),
                at: 10,
            });
            let r = run(&sc).unwrap();
            assert!(r.violations.is_empty(), "{p} n={n}: {:?}", r.violations);
            assert!(r.all_completed(), "{p} n={n}: {}/{}", r.completed, r.expected);
            let new_sequencers: BTreeSet<ProcessId> = r
                .trace
                .iter()
                .filter(|e| e.transition == "recover")
                .map(|e| e.process)
                .collect();
            assert!(!new_sequencers.is_empty(), "{p} n={n}: no recovery");
            assert!(!new_sequencers.contains(&ProcessId::certifier(0)));
        }
    }
}

#[test]
fn same_seed_same_trace_and_different_seed_differs() {
    for p in Protocol::ALL {
        let sc = fuzz_scenario(p, 3);
        let a = trace_to_string(&run(&sc).unwrap().trace);
        let b = trace_to_string(&run(&sc).unwrap().trace);
        assert_eq!(a, b);
        let mut other = sc.clone();
        other.seed += 100;
        assert_ne!(a, trace_to_string(&run(&other).unwrap().trace), "{p}");
    }
}

#[test]
fn traces_round_trip_through_jsonl() {
    let r = run(&Scenario::new(Protocol::Zab)).unwrap();
    let text = trace_to_string(&r.trace);
    let back = read_trace(text.as_bytes()).unwrap();
    assert_eq!(back, r.trace);
    assert!(back.windows(2).all(|w| w[0].seq < w[1].seq && w[0].time <= w[1].time));
}

#[test]
fn scenarios_round_trip_through_toml() {
    for p in Protocol::ALL {
        let mut sc = fuzz_scenario(p, 9);
        sc.dissemination = Dissemination::CollectThenNotify;
        let back = Scenario::from_toml(&sc.to_toml()).unwrap();
        assert_eq!(back, sc);
    }
}

#[test]
fn invalid_configuration_names_the_field() {
    let mut sc = Scenario::new(Protocol::Paxos);
    sc.n = 2;
    sc.f = 1;
    let err = run(&sc).unwrap_err();
    let ConfigError::Invalid { field, .. } = &err else {
        panic!("{err:?}");
    };
    assert!(!field.is_empty());
    let unknown = Scenario::from_toml("protocol = \"paxos\"\nbogus = 1\n");
    assert!(unknown.is_err());
}

#[test]
fn broadcast_learn_cuts_one_hop() {
    let mut collect = Scenario::new(Protocol::Paxos);
    collect.workload.ops_per_client = 30;
    let mut broadcast = collect.clone();
    broadcast.dissemination = Dissemination::BroadcastLearn;
    let a = Metrics::from_trace(&run(&collect).unwrap().trace, 3);
    let b = Metrics::from_trace(&run(&broadcast).unwrap().trace, 3);
    assert_eq!(a.latency_mean, Some(2.0));
    assert_eq!(b.latency_mean, Some(1.0));
    assert_eq!(a.commands_decided, 30);
    assert_eq!(b.commands_decided, 30);
}

#[test]
fn slow_links_delay_but_do_not_block() {
    for p in Protocol::ALL {
        let mut sc = Scenario::new(p);
        sc.workload.ops_per_client = 8;
        sc.network.slow.insert(ProcessId::certifier(2), 6);
        let r = run(&sc).unwrap();
        assert!(r.violations.is_empty() && r.all_completed(), "{p}");
    }
}
