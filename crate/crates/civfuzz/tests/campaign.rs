use std::path::PathBuf;
use std::time::Duration;

use civfuzz::adapter::{SimAdapter, Transport};
use civfuzz::campaign::{Campaign, CampaignConfig, CampaignError, ConfigError, StopReason, Target};
use civfuzz::load::read_scenario;
use civfuzz::report::IndexEntry;
use civfuzz::store::{read_events, DbEvent, CRASHDB_FILE};
use civfuzz::AdapterKind;

fn scenario(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("scenarios")
        .join(format!("{name}.json"))
}

fn config(name: &str) -> CampaignConfig {
    let mut cfg = CampaignConfig::new(scenario(name), AdapterKind::Simulated, 7);
    cfg.max_runs = Some(300);
    cfg
}

fn config_error(cfg: CampaignConfig) -> ConfigError {
    match Campaign::new(cfg) {
        Err(e) => e,
        Ok(_) => panic!("config accepted"),
    }
}

#[test]
fn bad_configs_are_rejected() {
    let mut c = config("markdown");
    c.max_runs = None;
    assert!(matches!(config_error(c), ConfigError::Unbounded));

    let mut c = config("markdown");
    c.adapter = AdapterKind::NativeShim;
    assert!(matches!(config_error(c), ConfigError::MissingWorkload));

    let mut c = config("markdown");
    c.mutation.p_cold = 0.5;
    c.mutation.p_hot = 0.2;
    assert!(matches!(config_error(c), ConfigError::Knob(_)));

    let mut c = config("markdown");
    c.mutation.skip_call_probability = 1.5;
    assert!(matches!(config_error(c), ConfigError::Knob(_)));

    let mut c = config("markdown");
    c.mutation.max_loci = 0;
    assert!(matches!(config_error(c), ConfigError::Knob(_)));

    for w in ["0", "many"] {
        let mut c = config("markdown");
        c.workload = Some(w.into());
        assert!(matches!(config_error(c), ConfigError::BadRepeat(_)));
    }

    let c = CampaignConfig {
        spec_path: "/nonexistent/scenario.json".into(),
        ..config("markdown")
    };
    assert!(matches!(config_error(c), ConfigError::Load(_)));
}

#[test]
fn config_files_deserialize_with_defaults() {
    let c: CampaignConfig = serde_json::from_str(
        r#"{"spec_path": "x.json", "adapter": "sim", "seed": 3, "time_budget": 1.5,
            "mutation": {"p_cold": 0.0, "initial_threshold": 12}}"#,
    )
    .unwrap();
    assert_eq!(c.time_budget, Some(Duration::from_millis(1500)));
    assert_eq!(c.mutation.initial_threshold, 12);
    assert_eq!(c.mutation.p_hot, 1.0);
    assert!(
        serde_json::from_str::<CampaignConfig>(r#"{"spec_path": "x", "adapter": "sim", "seed": 1, "bogus": 1}"#)
            .is_err()
    );
}

#[test]
fn outputs_agree_with_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config("keystore");
    cfg.out_dir = Some(dir.path().to_path_buf());
    let out = Campaign::new(cfg).unwrap().run().unwrap();
    let r = &out.report;
    assert!(!r.crashes.is_empty());

    let events = read_events(&dir.path().join(CRASHDB_FILE)).unwrap();
    let new: Vec<_> = events
        .iter()
        .filter_map(|e| match e {
            DbEvent::New { record } => Some(record.key.clone()),
            _ => None,
        })
        .collect();
    let keys: Vec<_> = r.crashes.iter().map(|c| c.key.clone()).collect();
    assert_eq!(new, keys);
    let duplicates = events.iter().filter(|e| matches!(e, DbEvent::Duplicate { .. })).count() as u64;
    assert_eq!(duplicates, r.crashes.iter().map(|c| c.occurrences - 1).sum::<u64>());
    assert_eq!(
        r.raw + r.raw_false_positives + r.raw_unattributable,
        r.crashes.iter().map(|c| c.occurrences).sum::<u64>()
    );

    let index: Vec<IndexEntry> =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("crashes/index.json")).unwrap()).unwrap();
    assert_eq!(index.len(), r.crashes.len());
    for (entry, c) in index.iter().zip(&r.crashes) {
        assert_eq!(entry.key, c.key);
        assert_eq!(entry.classes, c.civ_classes);
        let bundle: civfuzz_core::crash::CrashRecord =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("crashes").join(&entry.file)).unwrap())
                .unwrap();
        assert_eq!(&bundle, c);
    }
    let saved: civfuzz::CampaignReport =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(&saved, r);
}

#[test]
fn transports_agree() {
    let report = |transport| {
        let sc = read_scenario(&scenario("forwarding")).unwrap();
        let mut adapter = SimAdapter::new(sc.clone());
        adapter.transport = transport;
        let target = Target {
            name: sc.name.clone(),
            spec: sc.spec.clone(),
            adapter: Box::new(adapter),
        };
        Campaign::with_target(config("forwarding"), target)
            .unwrap()
            .run()
            .unwrap()
            .report
    };
    assert_eq!(
        report(Transport::Socket).canonical_json(),
        report(Transport::InProcess).canonical_json()
    );
}

#[test]
fn stop_conditions() {
    let mut c = config("markdown");
    c.max_runs = Some(5);
    let out = Campaign::new(c).unwrap().run().unwrap();
    assert_eq!(out.stop, StopReason::MaxRuns);
    assert_eq!(out.report.runs, 5);

    let mut c = config("markdown");
    c.max_runs = None;
    c.time_budget = Some(Duration::ZERO);
    let out = Campaign::new(c).unwrap().run().unwrap();
    assert_eq!(out.stop, StopReason::TimeBudget);
    assert_eq!(out.report.runs, 0);

    let mut c = config("markdown");
    c.max_runs = Some(100_000);
    let out = Campaign::new(c).unwrap().run().unwrap();
    assert_eq!(out.stop, StopReason::Saturated);
    assert!(out.report.saturated);
}

#[test]
fn corpus_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config("namecard");
    c.out_dir = Some(dir.path().to_path_buf());
    let first = Campaign::new(c).unwrap().run().unwrap();
    assert!(!first.corpus.is_empty());

    let mut c = config("namecard");
    c.resume_corpus = Some(dir.path().join("corpus.json"));
    let second = Campaign::new(c).unwrap().run().unwrap();
    assert!(!second.corpus.is_empty());

    let mut c = config("namecard");
    c.resume_corpus = Some(dir.path().join("missing.json"));
    match Campaign::new(c).unwrap().run() {
        Err(CampaignError::Config(ConfigError::Corpus { .. })) => {}
        other => panic!("expected a corpus error, got {:?}", other.map(|o| o.stop)),
    }
}

#[test]
fn direction_override_is_honored() {
    let mut c = config("markdown");
    c.direction = Some(civfuzz_core::iface::Direction::Safebox);
    let out = Campaign::new(c).unwrap().run().unwrap();
    assert_eq!(out.report.trust_model, civfuzz_core::iface::Direction::Safebox);
    for crash in &out.report.crashes {
        for r in &crash.alteration_log {
            assert!(!matches!(r.locus, Some(civfuzz_core::wire::Locus::ReturnValue)));
        }
    }
}
