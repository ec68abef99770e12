use std::path::{Path, PathBuf};

use civfuzz_core::iface::ValueRole;
use civfuzz_core::monitor::{Mode, RunMonitor, RunOutcome};
use civfuzz_core::mutation::{AlterationRecord, Strategy as Alteration};
use civfuzz_core::sim::memory::{Memory, HEAP_RED_ZONE, ZERO_PAGE_END};
use civfuzz_core::sim::{self, Link, LinkError, Loopback, RunEnd, RunParams, Scenario};
use civfuzz_core::wire::{AccessKind, Command, Crossing, CrossingKind, Event, Locus};
use proptest::prelude::*;

fn corpus() -> Vec<Scenario> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../civfuzz/scenarios");
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let sc: Scenario = serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap();
            sc.validate().unwrap();
            sc
        })
        .collect()
}

fn scenario(name: &str) -> Scenario {
    corpus().into_iter().find(|s| s.name == name).unwrap()
}

fn params(seed: u64) -> RunParams {
    RunParams {
        run_id: seed,
        seed,
        schedule_nonce: 0,
        repeat: None,
    }
}

struct Recorder<'m, 'a> {
    inner: Loopback<'m, 'a>,
    seen: Vec<Crossing>,
}

impl Link for Recorder<'_, '_> {
    fn send(&mut self, event: &Event) -> Result<(), LinkError> {
        if let Event::Crossing(c) = event {
            self.seen.push(c.clone());
        }
        self.inner.send(event)
    }

    fn recv(&mut self) -> Result<Command, LinkError> {
        self.inner.recv()
    }
}

fn replay(sc: &Scenario, log: &[AlterationRecord], seed: u64) -> (RunEnd, Vec<Crossing>, Option<RunOutcome>) {
    let mut mon = RunMonitor::new(&sc.spec, Mode::Replay { log }, seed);
    let mut link = Recorder {
        inner: Loopback::new(&mut mon),
        seen: Vec::new(),
    };
    let end = sim::run(sc, &params(seed), &mut link).unwrap();
    let seen = link.seen;
    (end, seen, mon.outcome)
}

#[test]
fn unaltered_runs_finish_cleanly() {
    for sc in corpus() {
        for seed in 0..8 {
            let (end, seen, outcome) = replay(&sc, &[], seed);
            assert!(
                matches!(end, RunEnd::WorkloadDone { .. }),
                "{} seed {seed}: {end:?}",
                sc.name
            );
            assert_eq!(outcome, Some(RunOutcome::Done), "{}", sc.name);
            assert!(!seen.is_empty(), "{} crosses the interface", sc.name);
            // Entries and exits pair up and indices strictly increase.
            let mut open = Vec::new();
            for w in seen.windows(2) {
                assert!(w[0].crossing_index < w[1].crossing_index);
            }
            for c in &seen {
                if c.kind.is_entry() {
                    open.push(c.symbol.clone());
                } else {
                    assert_eq!(open.pop().as_deref(), Some(c.symbol.as_str()));
                }
            }
            assert!(open.is_empty());
        }
    }
}

#[test]
fn runs_are_deterministic_per_seed() {
    for sc in corpus() {
        let (_, a, _) = replay(&sc, &[], 42);
        let (_, b, _) = replay(&sc, &[], 42);
        assert_eq!(a, b, "{}", sc.name);
    }
}

#[test]
fn zero_page_return_is_a_null_dereference() {
    let sc = scenario("markdown");
    let (_, seen, _) = replay(&sc, &[], 0);
    let exit = seen
        .iter()
        .find(|c| c.kind == CrossingKind::CallExit && c.symbol == "md_new")
        .unwrap();
    let old = exit.value(Locus::ReturnValue).unwrap().to_vec();
    let rec = AlterationRecord {
        crossing_index: exit.crossing_index,
        kind: CrossingKind::CallExit,
        symbol: "md_new".into(),
        locus: Some(Locus::ReturnValue),
        offset: 0,
        strategy: Alteration::PtrZeroPage { address: 0x10 },
        old_bytes: old,
        new_bytes: 0x10u64.to_le_bytes().to_vec(),
        target_type_name: "md_doc*".into(),
        role: ValueRole::Other,
    };
    let (end, _, outcome) = replay(&sc, &[rec], 0);
    let RunEnd::Crashed(p) = end else { panic!("{end:?}") };
    assert_eq!(p.access, AccessKind::NullDeref);
    assert_eq!(p.faulty_address, Some(0x10));
    assert_eq!(sc.site_of(&p.frames[0].symbol, p.frames[0].offset), Some("init_handle"));
    assert_eq!(outcome, Some(RunOutcome::Crashed(p)));
}

#[test]
fn repeat_override_lengthens_the_workload() {
    let sc = scenario("markdown");
    let count = |repeat| {
        let mut mon = RunMonitor::new(&sc.spec, Mode::Replay { log: &[] }, 3);
        let p = RunParams { repeat, ..params(3) };
        sim::run_in_process(&sc, &p, &mut mon).unwrap();
        mon.crossings
    };
    assert!(count(Some(3)) > count(Some(1)));
}

#[derive(Debug, Clone)]
enum Op {
    Alloc(u64),
    Free(usize),
    FreeWild(u64),
    Write(usize, u64, Vec<u8>),
    Read(usize, u64, u64),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0u64..300).prop_map(Op::Alloc),
        any::<usize>().prop_map(Op::Free),
        any::<u64>().prop_map(Op::FreeWild),
        (any::<usize>(), 0u64..320, prop::collection::vec(any::<u8>(), 1..16)).prop_map(|(i, o, d)| Op::Write(i, o, d)),
        (any::<usize>(), 0u64..320, 1u64..16).prop_map(|(i, o, n)| Op::Read(i, o, n)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    /// The allocator against a plain list of live blocks: in-bounds access
    /// succeeds and returns what was written, anything past the end or
    /// into a freed block faults, and only live blocks can be freed.
    #[test]
    fn memory_matches_a_model(ops in prop::collection::vec(op(), 1..60)) {
        let mut mem = Memory::new(1 << 20);
        // (address, contents, live)
        let mut model: Vec<(u64, Vec<u8>, bool)> = Vec::new();
        for op in ops {
            match op {
                Op::Alloc(size) => {
                    let addr = mem.alloc(size).unwrap();
                    prop_assert!(model.iter().all(|(a, b, _)| addr >= a + b.len() as u64 + HEAP_RED_ZONE || addr < *a));
                    model.push((addr, vec![0; size as usize], true));
                }
                Op::Free(i) if !model.is_empty() => {
                    let n = model.len();
                    let (addr, _, live) = &mut model[i % n];
                    let r = mem.free(*addr);
                    if *live {
                        prop_assert!(r.is_ok());
                        *live = false;
                    } else {
                        prop_assert_eq!(r.unwrap_err().access, AccessKind::AllocMisuse);
                    }
                }
                Op::Free(_) => {}
                Op::FreeWild(addr) => {
                    let known = addr == 0 || model.iter().any(|(a, _, l)| *a == addr && *l);
                    let r = mem.free(addr);
                    if known {
                        prop_assert!(r.is_ok());
                        if let Some(m) = model.iter_mut().find(|(a, _, l)| *a == addr && *l) {
                            m.2 = false;
                        }
                    } else {
                        prop_assert_eq!(r.unwrap_err().access, AccessKind::AllocMisuse);
                    }
                }
                Op::Write(i, off, data) if !model.is_empty() => {
                    let n = model.len();
                    let (addr, bytes, live) = &mut model[i % n];
                    let fits = *live && off + data.len() as u64 <= bytes.len() as u64;
                    let r = mem.write(*addr + off, &data);
                    if fits {
                        prop_assert!(r.is_ok());
                        bytes[off as usize..off as usize + data.len()].copy_from_slice(&data);
                    } else {
                        prop_assert_eq!(r.unwrap_err().access, AccessKind::Write);
                    }
                }
                Op::Read(i, off, n) if !model.is_empty() => {
                    let (addr, bytes, live) = &model[i % model.len()];
                    let fits = *live && off + n <= bytes.len() as u64;
                    match mem.read(*addr + off, n) {
                        Ok(got) => {
                            prop_assert!(fits);
                            prop_assert_eq!(&got[..], &bytes[off as usize..(off + n) as usize]);
                        }
                        Err(f) => {
                            prop_assert!(!fits);
                            prop_assert_eq!(f.access, AccessKind::Read);
                        }
                    }
                }
                _ => {}
            }
            prop_assert_eq!(mem.live_allocations(), model.iter().filter(|m| m.2).count());
        }
    }

    #[test]
    fn zero_page_access_is_null_dereference(addr in 0..ZERO_PAGE_END, n in 1u64..8) {
        let mut mem = Memory::new(1 << 20);
        mem.alloc(64).unwrap();
        prop_assert_eq!(mem.read(addr, n).unwrap_err().access, AccessKind::NullDeref);
        prop_assert_eq!(mem.write(addr, &[1]).unwrap_err().access, AccessKind::NullDeref);
        prop_assert_eq!(mem.exec(addr).unwrap_err().access, AccessKind::NullDeref);
    }
}

#[test]
fn monitor_rejects_malformed_sessions() {
    let sc = scenario("markdown");
    let spec = &sc.spec;
    let ready = Event::Ready {
        run_id: 0,
        version: 1,
        word_size_bits: 64,
    };
    let crossing = |kind, index, symbol: &str| {
        Event::Crossing(Crossing {
            kind,
            crossing_index: index,
            symbol: symbol.into(),
            caller: "app".into(),
            values: vec![],
            snapshots: vec![],
        })
    };
    let fresh = || RunMonitor::new(spec, Mode::Replay { log: &[] }, 0);

    let mut m = fresh();
    assert!(
        m.handle(&crossing(CrossingKind::CallEntry, 0, "md_new")).is_err(),
        "before Ready"
    );

    let mut m = fresh();
    assert_eq!(m.handle(&ready), Ok(None));
    assert!(m.handle(&ready).is_err(), "second Ready");

    let mut m = fresh();
    m.handle(&ready).unwrap();
    assert!(
        m.handle(&crossing(CrossingKind::CallExit, 0, "md_new")).is_err(),
        "exit without entry"
    );

    let mut m = fresh();
    m.handle(&ready).unwrap();
    m.handle(&crossing(CrossingKind::CallEntry, 4, "md_new")).unwrap();
    assert!(
        m.handle(&crossing(CrossingKind::CallExit, 4, "md_new")).is_err(),
        "index repeated"
    );

    let mut m = fresh();
    m.handle(&ready).unwrap();
    m.handle(&crossing(CrossingKind::CallEntry, 0, "md_new")).unwrap();
    assert!(
        m.handle(&crossing(CrossingKind::CallExit, 1, "md_free")).is_err(),
        "mismatched exit"
    );

    let mut m = fresh();
    m.handle(&ready).unwrap();
    assert_eq!(
        m.handle(&Event::WorkloadDone { crossing_index: 0 }),
        Ok(Some(Command::Terminate))
    );
    assert!(
        m.handle(&crossing(CrossingKind::CallEntry, 1, "md_new")).is_err(),
        "after the end"
    );
}

#[test]
fn crossing_cap_stops_the_run() {
    let sc = scenario("pipeline");
    let mut mon = RunMonitor::new(&sc.spec, Mode::Replay { log: &[] }, 0).with_crossing_cap(3);
    let end = sim::run_in_process(&sc, &params(0), &mut mon).unwrap();
    assert!(matches!(end, RunEnd::Terminated { .. }), "{end:?}");
    assert_eq!(mon.outcome, Some(RunOutcome::CapReached));
}
