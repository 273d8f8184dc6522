#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use replab::engines::{CrashAt, Protocol, Scenario};
use replab::kernel::{ProcessId, SchedulePolicy};

/// A randomized scenario: 3 or 5 certifiers, lossy links with variable
/// delay, optional reordering and up to f certifier crashes.
pub fn fuzz_scenario(protocol: Protocol, seed: u64) -> Scenario {
    let mut g = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut s = Scenario::new(protocol);
    s.seed = seed;
    s.n = if seed.is_multiple_of(2) { 3 } else { 5 };
    s.f = (s.n - 1) / 2;
    s.workload.clients = g.gen_range(1..4);
    s.workload.ops_per_client = g.gen_range(3..12);
    s.network.delay_max = g.gen_range(1..6);
    s.network.loss = g.gen_range(0.0..0.2);
    if g.gen_bool(0.5) {
        s.network.policy = SchedulePolicy::Newest;
    }
    if g.gen_bool(0.3) {
        s.timers.progress = Some(g.gen_range(3..10));
    }
    let crashes = g.gen_range(0..=s.f);
    let mut idx: Vec<u32> = (0..s.n as u32).collect();
    for i in 0..crashes {
        let j = g.gen_range(i..idx.len());
        idx.swap(i, j);
        s.crashes.push(CrashAt {
            process: ProcessId::certifier(idx[i]),
            at: g.gen_range(0..150),
        });
    }
    s
}
