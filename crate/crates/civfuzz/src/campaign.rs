//! Campaign orchestration: repeated runs against a target, crash triage,
//! coverage accounting and stop conditions.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use civfuzz_core::crash::{
    classify_civ_with_replay, dedup_key, minimize, probe_arbitrariness, reproduce, CrashDatabase, CrashRecord,
    DedupOutcome, ReplayOutcome, Verdict,
};
use civfuzz_core::iface::{Direction, InterfaceSpec};
use civfuzz_core::monitor::{run_seed, Mode, RunMonitor, RunOutcome, DEFAULT_CROSSING_CAP};
use civfuzz_core::mutation::{AlterationRecord, Corpus, Engine, MutationConfig, Pattern, ThresholdState};
use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use crate::adapter::{Adapter, AdapterError, AdapterKind, RunRequest, ShimAdapter, SimAdapter};
use crate::load::{read_interface_spec, read_scenario, LoadError};
use crate::report::{CampaignReport, Coverage, Impact};
use crate::store::CrashStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    /// Scenario file for the simulated adapter, interface spec otherwise.
    pub spec_path: PathBuf,
    pub adapter: AdapterKind,
    /// Replaces the direction declared by the interface.
    #[serde(default)]
    pub direction: Option<Direction>,
    pub seed: u64,
    #[serde(default)]
    pub max_runs: Option<u64>,
    #[serde(default, with = "secs")]
    pub time_budget: Option<Duration>,
    /// Target command for the native shim; repeat count of the built-in
    /// workload for the simulated target.
    #[serde(default)]
    pub workload: Option<String>,
    #[serde(default)]
    pub mutation: MutationConfig,
    #[serde(default = "default_cap")]
    pub crossing_cap: u64,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    /// Corpus saved by an earlier campaign.
    #[serde(default)]
    pub resume_corpus: Option<PathBuf>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn default_cap() -> u64 {
    DEFAULT_CROSSING_CAP
}

fn default_timeout_ms() -> u64 {
    10_000
}

mod secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Option<Duration>, s: S) -> Result<S::Ok, S::Error> {
        match d {
            Some(d) => s.serialize_some(&d.as_secs_f64()),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Duration>, D::Error> {
        let v = Option::<f64>::deserialize(d)?;
        v.map(|s| Duration::try_from_secs_f64(s).map_err(serde::de::Error::custom))
            .transpose()
    }
}

impl CampaignConfig {
    pub fn new(spec_path: impl Into<PathBuf>, adapter: AdapterKind, seed: u64) -> Self {
        CampaignConfig {
            spec_path: spec_path.into(),
            adapter,
            direction: None,
            seed,
            max_runs: None,
            time_budget: None,
            workload: None,
            mutation: MutationConfig::default(),
            crossing_cap: DEFAULT_CROSSING_CAP,
            timeout_ms: default_timeout_ms(),
            resume_corpus: None,
            out_dir: None,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.max_runs.is_none() && self.time_budget.is_none() {
            return Err(ConfigError::Unbounded);
        }
        if self.adapter == AdapterKind::NativeShim && self.workload.is_none() {
            return Err(ConfigError::MissingWorkload);
        }
        let m = &self.mutation;
        let probabilities = [
            ("p_hot", m.p_hot),
            ("p_cold", m.p_cold),
            ("skip_call_probability", m.skip_call_probability),
            ("reuse_probability", m.reuse_probability),
            ("mutation_probability", m.mutation_probability),
            ("avoid_non_viable", m.avoid_non_viable),
        ];
        for (name, p) in probabilities {
            if !(0.0..=1.0).contains(&p) {
                return Err(ConfigError::Knob(format!("{name} must lie in [0, 1]")));
            }
        }
        if m.p_cold > m.p_hot {
            return Err(ConfigError::Knob("p_cold must not exceed p_hot".into()));
        }
        if m.max_loci == 0 || m.patience == 0 || m.corpus_cap == 0 {
            return Err(ConfigError::Knob(
                "max_loci, patience and corpus_cap must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("max_runs and time_budget cannot both be unbounded")]
    Unbounded,
    #[error("the native shim needs a workload command")]
    MissingWorkload,
    #[error("workload for the simulated target must be a positive repeat count, got `{0}`")]
    BadRepeat(String),
    #[error("{0}")]
    Knob(String),
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error("cannot read corpus {path}: {reason}")]
    Corpus { path: PathBuf, reason: String },
}

#[derive(Debug, thiserror::Error)]
pub enum CampaignError {
    #[error("configuration error: {0}")]
    Config(#[from] ConfigError),
    #[error("adapter error: {0}")]
    Adapter(AdapterError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxRuns,
    TimeBudget,
    /// The threshold moved past every crossing seen so far.
    Saturated,
}

/// Name, interface and adapter of one campaign target.
pub struct Target {
    pub name: String,
    pub spec: InterfaceSpec,
    pub adapter: Box<dyn Adapter>,
}

impl Target {
    /// Loads the target described by `config`.
    pub fn from_config(config: &CampaignConfig) -> Result<Target, ConfigError> {
        let timeout = Duration::from_millis(config.timeout_ms);
        let mut target = match config.adapter {
            AdapterKind::Simulated => {
                let sc = read_scenario(&config.spec_path)?;
                let mut adapter = SimAdapter::new(sc.clone());
                adapter.timeout = timeout;
                if let Some(w) = &config.workload {
                    let n: u32 = w
                        .parse()
                        .ok()
                        .filter(|n| *n > 0)
                        .ok_or_else(|| ConfigError::BadRepeat(w.clone()))?;
                    adapter.repeat = Some(n);
                }
                Target {
                    name: sc.name.clone(),
                    spec: sc.spec,
                    adapter: Box::new(adapter),
                }
            }
            AdapterKind::NativeShim => {
                let spec = read_interface_spec(&config.spec_path)?;
                let mut adapter = ShimAdapter::new(config.workload.clone().ok_or(ConfigError::MissingWorkload)?);
                adapter.timeout = timeout;
                let name = config
                    .spec_path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                Target {
                    name,
                    spec,
                    adapter: Box::new(adapter),
                }
            }
        };
        if let Some(d) = config.direction {
            target.spec.direction = d;
        }
        Ok(target)
    }

    pub fn simulated(sc: civfuzz_core::sim::Scenario) -> Target {
        Target {
            name: sc.name.clone(),
            spec: sc.spec.clone(),
            adapter: Box::new(SimAdapter::new(sc)),
        }
    }
}

/// Replays alteration logs against the target for the crash pipeline.
struct Replayer<'t> {
    spec: &'t InterfaceSpec,
    adapter: &'t mut dyn Adapter,
    cap: u64,
    nonce: u64,
    pub replays: u64,
}

impl Replayer<'_> {
    fn replay(&mut self, log: &[AlterationRecord], run: u64, seed: u64) -> Option<ReplayOutcome> {
        self.nonce += 1;
        self.replays += 1;
        let mut mon = RunMonitor::new(self.spec, Mode::Replay { log }, seed).with_crossing_cap(self.cap);
        let req = RunRequest {
            run_id: run,
            seed,
            schedule_nonce: self.nonce,
        };
        if let Err(e) = self.adapter.execute(&req, &mut mon) {
            debug!("replay of run {run} failed: {e}");
            return None;
        }
        match mon.outcome {
            Some(RunOutcome::Crashed(p)) => Some(ReplayOutcome {
                key: dedup_key(&p.frames, p.access),
                faulty_address: p.faulty_address,
            }),
            _ => None,
        }
    }
}

pub struct Campaign {
    pub config: CampaignConfig,
    pub target: Target,
}

/// Everything a finished campaign produced.
pub struct CampaignOutcome {
    pub report: CampaignReport,
    pub corpus: Corpus,
    pub stop: StopReason,
}

impl Campaign {
    pub fn new(config: CampaignConfig) -> Result<Campaign, ConfigError> {
        config.validate()?;
        let target = Target::from_config(&config)?;
        Ok(Campaign { config, target })
    }

    /// A campaign over an already loaded target; `config.spec_path` is
    /// only informative.
    pub fn with_target(config: CampaignConfig, target: Target) -> Result<Campaign, ConfigError> {
        config.validate()?;
        Ok(Campaign { config, target })
    }

    pub fn run(&mut self) -> Result<CampaignOutcome, CampaignError> {
        let started = Instant::now();
        let cfg = &self.config;
        let spec = &self.target.spec;
        let mut engine = Engine::new(spec, cfg.mutation.clone());
        if let Some(path) = &cfg.resume_corpus {
            let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Corpus {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            engine.corpus = serde_json::from_str(&text).map_err(|e| ConfigError::Corpus {
                path: path.clone(),
                reason: e.to_string(),
            })?;
        }
        let mut threshold = ThresholdState::new(cfg.mutation.initial_threshold);
        let mut store = match &cfg.out_dir {
            Some(dir) => Some(CrashStore::create(dir)?),
            None => None,
        };
        let mut replayer = Replayer {
            spec,
            adapter: self.target.adapter.as_mut(),
            cap: cfg.crossing_cap,
            nonce: 0,
            replays: 0,
        };

        let mut db = CrashDatabase::default();
        let mut crashes: Vec<CrashRecord> = Vec::new();
        let mut index_of: BTreeMap<String, usize> = BTreeMap::new();
        let mut reached = BTreeSet::new();
        let mut callers = BTreeSet::new();
        let mut raw = 0u64;
        let mut raw_false_positives = 0u64;
        let mut raw_unattributable = 0u64;
        let mut runs = 0u64;
        let mut discarded = 0u64;
        let mut capped = 0u64;

        let stop = loop {
            if cfg.max_runs.is_some_and(|m| runs >= m) {
                break StopReason::MaxRuns;
            }
            if cfg.time_budget.is_some_and(|b| started.elapsed() >= b) {
                break StopReason::TimeBudget;
            }
            if threshold.saturated {
                break StopReason::Saturated;
            }
            let run = runs;
            runs += 1;
            let seed = run_seed(cfg.seed, run);
            let mut mon = RunMonitor::new(
                spec,
                Mode::Fuzz {
                    engine: &mut engine,
                    threshold: &threshold,
                },
                seed,
            )
            .with_crossing_cap(cfg.crossing_cap);
            let req = RunRequest {
                run_id: run,
                seed,
                schedule_nonce: 0,
            };
            let result = replayer.adapter.execute(&req, &mut mon);
            let RunMonitor {
                log,
                reached: run_reached,
                callers: run_callers,
                crossings,
                outcome,
                ..
            } = mon;
            match result {
                Err(e @ AdapterError::Launch(_)) => return Err(CampaignError::Adapter(e)),
                Err(e) => {
                    warn!("run {run} discarded: {e}");
                    discarded += 1;
                    threshold.update(0, crossings, cfg.mutation.patience, cfg.mutation.step);
                    continue;
                }
                Ok(()) => {}
            }
            reached.extend(run_reached);
            callers.extend(run_callers);

            let mut new_unique = 0;
            match outcome {
                Some(RunOutcome::Crashed(payload)) => {
                    let mut rec = CrashRecord::new(&payload, spec, run, seed, log);
                    match rec.verdict {
                        Verdict::Valid { .. } => raw += 1,
                        Verdict::FalsePositive => raw_false_positives += 1,
                        Verdict::Unattributable => raw_unattributable += 1,
                    }
                    match db.dedup(&rec.key) {
                        DedupOutcome::Duplicate(key) => {
                            let i = index_of[&key];
                            crashes[i].occurrences += 1;
                            if let Some(s) = store.as_mut() {
                                s.append_duplicate(&key, run)?;
                            }
                        }
                        DedupOutcome::New => {
                            triage(&mut rec, spec, &mut replayer, &mut engine);
                            info!(
                                "run {run}: new crash {} ({:?}, {:?}) classes {:?}",
                                rec.key, rec.access, rec.verdict, rec.civ_classes
                            );
                            if rec.is_valid() {
                                new_unique += 1;
                            }
                            if let Some(s) = store.as_mut() {
                                s.append_new(&rec)?;
                            }
                            index_of.insert(rec.key.clone(), crashes.len());
                            crashes.push(rec);
                        }
                    }
                }
                Some(RunOutcome::CapReached) => capped += 1,
                Some(RunOutcome::Done) | None => {}
            }
            threshold.update(new_unique, crossings, cfg.mutation.patience, cfg.mutation.step);
        };

        let valid: Vec<&CrashRecord> = crashes.iter().filter(|c| c.is_valid()).collect();
        let victims: BTreeSet<String> = valid.iter().filter_map(|c| c.victim().map(String::from)).collect();
        let report = CampaignReport {
            scenario: self.target.name.clone(),
            api: api_name(spec),
            trust_model: spec.direction,
            runs,
            discarded_runs: discarded,
            capped_runs: capped,
            replays: replayer.replays,
            raw,
            dedup: valid.len() as u64,
            raw_false_positives,
            false_positives: crashes.iter().filter(|c| c.verdict == Verdict::FalsePositive).count() as u64,
            raw_unattributable,
            unattributable: crashes.iter().filter(|c| c.verdict == Verdict::Unattributable).count() as u64,
            non_reproducible: valid.iter().filter(|c| !c.reproduced).count() as u64,
            victims: victims.len() as u64,
            victim_components: victims.into_iter().collect(),
            callers: callers.len() as u64,
            caller_components: callers.into_iter().collect(),
            coverage: Coverage {
                reached: reached.len() as u64,
                total: spec.api_functions().count() as u64,
            },
            reached_functions: reached.into_iter().collect(),
            impact: Impact::of(valid.iter().copied()),
            threshold: threshold.threshold,
            saturated: threshold.saturated,
            crashes,
            wall_clock_ms: started.elapsed().as_millis() as u64,
        };
        if let Some(dir) = &cfg.out_dir {
            write_outputs(dir, &report, &engine.corpus)?;
        }
        Ok(CampaignOutcome {
            report,
            corpus: engine.corpus,
            stop,
        })
    }
}

/// Reproduction, minimization, arbitrariness probing and classification
/// of a crash seen for the first time.
fn triage(rec: &mut CrashRecord, spec: &InterfaceSpec, replayer: &mut Replayer<'_>, engine: &mut Engine) {
    let (run, seed) = (rec.run, rec.run_seed);
    let mut oracle = |log: &[AlterationRecord]| replayer.replay(log, run, seed);
    rec.reproduced = reproduce(&rec.alteration_log, &rec.key, &mut oracle);
    if !rec.reproduced {
        info!("crash {} did not reproduce", rec.key);
        return;
    }
    let min = match minimize(&rec.alteration_log, &rec.key, &mut oracle) {
        Ok(min) => min,
        Err(e) => {
            warn!("crash {}: {e}", rec.key);
            rec.replay_divergence = true;
            return;
        }
    };
    if rec.verdict == Verdict::FalsePositive {
        engine.non_viable.extend(min.essential().iter().map(Pattern::of));
    }
    if rec.access.is_memory_access() {
        if let Some(addr) = rec.faulty_address {
            rec.arbitrary = Some(probe_arbitrariness(&min, &rec.key, addr, &mut oracle));
        }
    }
    rec.civ_classes = classify_civ_with_replay(&min, &rec.key, spec, &mut oracle);
    rec.minimized = Some(min);
}

/// Name of the component exposing the fuzzed API.
fn api_name(spec: &InterfaceSpec) -> String {
    spec.api_functions().next().map(|f| f.owner.clone()).unwrap_or_default()
}

fn write_outputs(dir: &Path, report: &CampaignReport, corpus: &Corpus) -> std::io::Result<()> {
    crate::report::write_crash_bundle(dir, report)?;
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)?)?;
    std::fs::write(dir.join("corpus.json"), serde_json::to_string(corpus)?)?;
    Ok(())
}
