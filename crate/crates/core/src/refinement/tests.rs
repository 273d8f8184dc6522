use super::*;
use crate::app::{OpKind, Operation};

fn cmd(client: u32, id: u64) -> Payload {
    Payload::Command(Command::new(ProcessId::client(client), Operation::new(id, OpKind::Inc)))
}

fn certs(entries: &[(Slot, u32, Payload, &[u32])]) -> BTreeMap<(Slot, RoundId), BTreeMap<Payload, BTreeSet<ProcessId>>> {
    let mut out: BTreeMap<_, BTreeMap<_, BTreeSet<_>>> = BTreeMap::new();
    for (slot, round, p, who) in entries {
        out.entry((*slot, RoundId::new(*round, 0)))
            .or_default()
            .entry(p.clone())
            .or_default()
            .extend(who.iter().map(|&i| ProcessId::certifier(i)));
    }
    out
}

#[test]
fn decisions_need_a_same_round_majority() {
    let c = certs(&[(1, 0, cmd(0, 1), &[0]), (1, 1, cmd(0, 1), &[1]), (2, 0, cmd(0, 2), &[0, 2])]);
    let d = derive_decisions(&c, 3).unwrap();
    assert_eq!(d.len(), 1);
    assert_eq!(d[&2], cmd(0, 2));
}

#[test]
fn conflicting_decisions_are_an_error() {
    let c = certs(&[(1, 0, cmd(0, 1), &[0, 1]), (1, 1, cmd(1, 1), &[1, 2])]);
    assert!(derive_decisions(&c, 3).is_err());
    let same = certs(&[(1, 0, cmd(0, 1), &[0, 1]), (1, 1, cmd(0, 1), &[1, 2])]);
    assert_eq!(derive_decisions(&same, 3).unwrap().len(), 1);
}

#[test]
fn service_state_follows_most_advanced_replica() {
    let init = AppState::Register { value: 0 };
    let mut repl = ReplicationState::new(Style::Active, init, [ProcessId::replica(0), ProcessId::replica(1)]);
    let r1 = repl.replicas.get_mut(&ProcessId::replica(1)).unwrap();
    r1.version = 3;
    r1.state = AppState::Register { value: 2 };
    assert_eq!(derive_service_state(&repl.replicas).unwrap(), AppState::Register { value: 2 });
    let r0 = repl.replicas.get_mut(&ProcessId::replica(0)).unwrap();
    r0.version = 3;
    r0.state = AppState::Register { value: 5 };
    assert!(derive_service_state(&repl.replicas).is_err());
}

#[test]
fn mapping_names_round_trip() {
    for m in Mapping::ALL {
        assert_eq!(m.name().parse::<Mapping>().unwrap(), m);
    }
    assert_eq!(
        parse_chain("engine-mc, mc-active").unwrap(),
        vec![Mapping::EngineToMc, Mapping::McToActive]
    );
    assert!(parse_chain("engine-mc,bogus").is_err());
}

#[test]
fn chains_must_compose() {
    let cfg = CheckConfig {
        mode: McMode::Plain,
        style: Style::Active,
        certifiers: vec![ProcessId::certifier(0)],
        replicas: vec![],
        initial: AppState::Register { value: 0 },
        initial_sequencer: Some(ProcessId::certifier(0)),
    };
    assert_eq!(
        check_chain(&[], &cfg, &[Mapping::EngineToMc, Mapping::PassiveToActive]),
        Err(CheckError::Chain(Mapping::EngineToMc, Mapping::PassiveToActive))
    );
    assert_eq!(check_chain(&[], &cfg, &[]), Err(CheckError::EmptyChain));
    let ok = check_chain(&[], &cfg, &Mapping::chain_for(McMode::Plain)).unwrap();
    assert!(ok.iter().all(Verdict::accepted));
}

#[test]
fn unknown_transitions_are_malformed() {
    let cfg = CheckConfig {
        mode: McMode::Plain,
        style: Style::Active,
        certifiers: vec![ProcessId::certifier(0)],
        replicas: vec![],
        initial: AppState::Register { value: 0 },
        initial_sequencer: Some(ProcessId::certifier(0)),
    };
    let ev = TraceEvent {
        seq: 7,
        time: VirtualTime(1),
        process: ProcessId::certifier(0),
        transition: "teleport".into(),
        params: Value::Null,
    };
    assert!(matches!(
        check_chain(&[ev], &cfg, &[Mapping::EngineToMc]),
        Err(CheckError::Malformed { seq: 7, .. })
    ));
}

#[test]
fn mc_events_survive_the_trace_format() {
    let ev = McEvent::Recover {
        certifier: ProcessId::certifier(1),
        round: RoundId::new(1, 1),
        coord: ProcessId::certifier(1),
        from: [ProcessId::certifier(0), ProcessId::certifier(1)].into(),
        log: Some([(1, cmd(0, 1)), (2, cmd(1, 1))].into()),
    };
    let te = mc_trace_event(1, 0, &ev);
    assert_eq!(te.process, ProcessId::certifier(1));
    match parse(&te, Level::Mc).unwrap() {
        Some(Item::Mc(back)) => assert_eq!(back, ev),
        _ => panic!("not parsed as a multi-consensus event"),
    }
}
