//! Alterations only ever target data the malicious side controls.

use civfuzz_core::crossing::slots;
use civfuzz_core::iface::{CallbackRegistry, Direction, InterfaceSpec};
use civfuzz_core::mutation::{command_for, Engine, MutationConfig};
use civfuzz_core::wire::{Command, Crossing, CrossingKind, Locus, Snapshot};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SPEC: &str = r#"{
  "word_size_bits": 64,
  "direction": "sandbox",
  "components": [
    {"name": "app", "role": "victim", "labels": ["app"]},
    {"name": "lib", "role": "malicious", "labels": ["lib"]}
  ],
  "functions": [
    {"symbol": "open_doc", "owner": "lib",
     "params": [
       {"name": "path", "type": {"kind": "text_string", "size_bits": 64, "type_name": "const char*"}},
       {"name": "len", "type": {"kind": "integer", "size_bits": 64, "type_name": "size_t", "signed": false}}
     ],
     "return_type": {"kind": "address", "size_bits": 64, "type_name": "doc*",
       "pointee": {"kind": "aggregate", "size_bits": 128, "type_name": "doc", "fields": [
         {"name": "data", "offset": 0, "type": {"kind": "address", "size_bits": 64, "type_name": "char*"}},
         {"name": "count", "offset": 8, "type": {"kind": "integer", "size_bits": 32, "type_name": "int", "signed": true}},
         {"name": "guard", "offset": 12, "type": {"kind": "lock", "size_bits": 32, "type_name": "lock_t"}}
       ]}}},
    {"symbol": "on_item", "owner": "app", "is_callback": true,
     "params": [{"name": "index", "type": {"kind": "integer", "size_bits": 32, "type_name": "int", "signed": true}}],
     "return_type": {"kind": "integer", "size_bits": 32, "type_name": "int", "signed": true}},
    {"symbol": "walk", "owner": "lib",
     "params": [{"name": "cb", "type": {"kind": "callable", "size_bits": 64, "type_name": "on_item"}}]}
  ]
}"#;

fn spec(direction: Direction) -> InterfaceSpec {
    let mut s: InterfaceSpec = serde_json::from_str(SPEC).unwrap();
    s.direction = direction;
    s.validate().unwrap();
    s
}

fn legal(direction: Direction, kind: CrossingKind, locus: Option<Locus>) -> bool {
    match locus {
        None => kind == CrossingKind::CallEntry,
        Some(Locus::SharedByte { .. }) => true,
        Some(l) => match direction {
            Direction::Sandbox => matches!(
                (kind, l),
                (CrossingKind::CallExit, Locus::ReturnValue) | (CrossingKind::CallbackEntry, Locus::CallbackArg(_))
            ),
            Direction::Safebox => matches!(
                (kind, l),
                (CrossingKind::CallEntry, Locus::Arg(_)) | (CrossingKind::CallbackExit, Locus::CallbackReturn)
            ),
        },
    }
}

fn word() -> impl Strategy<Value = Vec<u8>> {
    any::<u64>().prop_map(|v| v.to_le_bytes().to_vec())
}

/// Random crossing carrying every kind of locus, including ones the
/// direction forbids, so the engine has to filter them.
fn crossing() -> impl Strategy<Value = Crossing> {
    (
        prop::sample::select(vec![
            CrossingKind::CallEntry,
            CrossingKind::CallExit,
            CrossingKind::CallbackEntry,
            CrossingKind::CallbackExit,
        ]),
        prop::sample::select(vec!["open_doc", "walk", "on_item", "unknown"]),
        0u64..64,
        prop::collection::vec(word(), 4),
        prop::collection::vec(prop::collection::vec(any::<u8>(), 1..32), 0..3),
    )
        .prop_map(|(kind, symbol, crossing_index, words, snaps)| {
            let values = vec![
                (Locus::Arg(0), words[0].clone()),
                (Locus::Arg(1), words[1].clone()),
                (Locus::ReturnValue, words[2].clone()),
                (Locus::CallbackArg(0), words[3][..4].to_vec()),
                (Locus::CallbackReturn, words[3][4..].to_vec()),
            ];
            Crossing {
                kind,
                crossing_index,
                symbol: symbol.into(),
                caller: "app".into(),
                values,
                snapshots: snaps
                    .into_iter()
                    .enumerate()
                    .map(|(i, bytes)| Snapshot {
                        region: i as u32,
                        base: 0x1000_0000 + i as u64 * 0x1000,
                        bytes,
                    })
                    .collect(),
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn alterations_respect_the_direction(
        c in crossing(),
        safebox in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let direction = if safebox { Direction::Safebox } else { Direction::Sandbox };
        let spec = spec(direction);
        let registry = CallbackRegistry::new(&spec);
        let config = MutationConfig { skip_call_probability: 0.3, ..MutationConfig::default() };
        let mut engine = Engine::new(&spec, config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slots = slots(&c, &spec, &registry);
        engine.observe(&slots);
        let is_api = spec.function(&c.symbol).is_some_and(|f| !f.is_callback);
        let records = engine.propose(&c, &slots, 8, is_api, &mut rng);
        for r in &records {
            prop_assert!(legal(direction, c.kind, r.locus), "{direction:?} {:?} {:?}", c.kind, r.locus);
            if r.locus.is_none() {
                prop_assert!(is_api);
            }
        }
        match command_for(&c, &records.iter().collect::<Vec<_>>()) {
            Command::Alter(ds) => {
                for d in ds {
                    prop_assert!(legal(direction, c.kind, Some(d.locus)));
                    if let Locus::SharedByte { region, offset } = d.locus {
                        let snap = c.snapshot(region).expect("known region");
                        prop_assert!(offset as usize + d.bytes.len() <= snap.bytes.len());
                    }
                }
            }
            Command::SkipCall(_) => prop_assert!(is_api && c.kind == CrossingKind::CallEntry),
            Command::Proceed => {}
            Command::Terminate => prop_assert!(false, "engine never terminates"),
        }
    }
}
