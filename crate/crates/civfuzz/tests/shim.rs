//! The native-shim adapter against a scripted stand-in target.

use std::collections::BTreeSet;
use std::path::PathBuf;

use civfuzz::adapter::{ENV_IN_FD, ENV_OUT_FD};
use civfuzz::campaign::{Campaign, CampaignConfig, CampaignError};
use civfuzz::{AdapterError, AdapterKind};
use civfuzz_core::crash::{CivClass, Verdict};
use civfuzz_core::wire::AccessKind;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn config(mode: &str, runs: u64) -> CampaignConfig {
    let mut cfg = CampaignConfig::new(fixture("shim_spec.json"), AdapterKind::NativeShim, 5);
    cfg.max_runs = Some(runs);
    cfg.workload = Some(format!(
        "FAKE_SHIM_MODE={mode} exec python3 {}",
        fixture("fake_shim.py").display()
    ));
    cfg
}

#[test]
fn descriptor_variables_keep_their_names() {
    assert_eq!(ENV_IN_FD, "CIVFUZZ_IN_FD");
    assert_eq!(ENV_OUT_FD, "CIVFUZZ_OUT_FD");
}

#[test]
fn adapter_kind_names() {
    assert_eq!(
        serde_json::to_string(&AdapterKind::NativeShim).unwrap(),
        "\"native_shim\""
    );
    let short: AdapterKind = serde_json::from_str("\"shim\"").unwrap();
    assert_eq!(short, AdapterKind::NativeShim);
    let short: AdapterKind = serde_json::from_str("\"sim\"").unwrap();
    assert_eq!(short, AdapterKind::Simulated);
}

#[test]
fn campaign_over_the_shim_finds_the_pointer_bug() {
    let out = Campaign::new(config("normal", 60)).unwrap().run().unwrap();
    let r = &out.report;
    assert_eq!(r.discarded_runs, 0);
    assert_eq!(r.coverage.reached, 1);
    assert!(r.dedup >= 1, "{r:?}");
    let accesses: BTreeSet<AccessKind> = r.crashes.iter().map(|c| c.access).collect();
    assert!(accesses.is_subset(&[AccessKind::NullDeref, AccessKind::Read].into()));
    for c in &r.crashes {
        assert_eq!(c.verdict, Verdict::Valid { victim: "app".into() });
        assert!(c.reproduced, "{}", c.key);
        assert_eq!(c.civ_classes, BTreeSet::from([CivClass::DC1]));
        assert_eq!(c.minimized.as_ref().unwrap().len(), 1);
    }
}

#[test]
fn target_without_ready_is_a_launch_failure() {
    match Campaign::new(config("no_ready", 3)).unwrap().run() {
        Err(CampaignError::Adapter(AdapterError::Launch(_))) => {}
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("campaign should fail"),
    }
}

#[test]
fn fatal_signal_becomes_a_crash_report() {
    let out = Campaign::new(config("segv", 1)).unwrap().run().unwrap();
    let r = &out.report;
    assert_eq!(r.crashes.len(), 1);
    let c = &r.crashes[0];
    assert_eq!(c.access, AccessKind::Read);
    assert!(c.frames.is_empty());
    assert_eq!(c.verdict, Verdict::Unattributable);
}
