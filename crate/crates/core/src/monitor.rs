//! Monitor side of one run: answers every crossing event with a command,
//! either from the mutation engine (fuzzing) or from a recorded alteration
//! log (replay), and keeps the run's bookkeeping.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::crossing::{slots, typed_values};
use crate::iface::{CallbackRegistry, InterfaceSpec, TypedValue};
use crate::mutation::{command_for, decide_alter, record_matches, AlterationRecord, Engine, ThresholdState};
use crate::wire::{Command, CrashPayload, Crossing, CrossingKind, Event};

pub const DEFAULT_CROSSING_CAP: u64 = 10_000;

/// Seed of run `run` in a campaign seeded with `seed`.
pub fn run_seed(seed: u64, run: u64) -> u64 {
    let mut z = seed ^ run.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("protocol error: {0}")]
pub struct ProtocolViolation(pub String);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RunOutcome {
    Crashed(CrashPayload),
    Done,
    /// The monitor stopped the run at the crossing cap.
    CapReached,
}

pub enum Mode<'a> {
    Fuzz {
        engine: &'a mut Engine,
        threshold: &'a ThresholdState,
    },
    Replay {
        log: &'a [AlterationRecord],
    },
}

pub struct RunMonitor<'a> {
    spec: &'a InterfaceSpec,
    mode: Mode<'a>,
    registry: CallbackRegistry,
    rng: ChaCha8Rng,
    /// Open crossings: (callback, symbol, skipped).
    open: Vec<(bool, String, bool)>,
    last_index: Option<u64>,
    cap: u64,
    started: bool,
    /// Alterations performed so far, in crossing order.
    pub log: Vec<AlterationRecord>,
    /// API functions entered at least once.
    pub reached: BTreeSet<String>,
    /// Components that called into the API.
    pub callers: BTreeSet<String>,
    pub crossings: u64,
    pub outcome: Option<RunOutcome>,
}

impl<'a> RunMonitor<'a> {
    pub fn new(spec: &'a InterfaceSpec, mode: Mode<'a>, seed: u64) -> Self {
        RunMonitor {
            spec,
            mode,
            registry: CallbackRegistry::new(spec),
            rng: ChaCha8Rng::seed_from_u64(seed),
            open: Vec::new(),
            last_index: None,
            cap: DEFAULT_CROSSING_CAP,
            started: false,
            log: Vec::new(),
            reached: BTreeSet::new(),
            callers: BTreeSet::new(),
            crossings: 0,
            outcome: None,
        }
    }

    pub fn with_crossing_cap(mut self, cap: u64) -> Self {
        self.cap = cap;
        self
    }

    /// Whether `Ready` has been received.
    pub fn is_started(&self) -> bool {
        self.started
    }

    pub fn last_crossing_index(&self) -> Option<u64> {
        self.last_index
    }

    pub fn is_finished(&self) -> bool {
        self.outcome.is_some()
    }

    /// Handles one event. Returns the command to send back, or `None` for
    /// `Ready`, which is not answered.
    pub fn handle(&mut self, event: &Event) -> Result<Option<Command>, ProtocolViolation> {
        if self.outcome.is_some() {
            return Err(violation("event after the end of the run"));
        }
        match event {
            Event::Ready { .. } if self.started => Err(violation("second Ready")),
            Event::Ready { .. } => {
                self.started = true;
                Ok(None)
            }
            _ if !self.started => Err(violation("event before Ready")),
            Event::Crossing(c) => self.crossing(c).map(Some),
            Event::Crash(p) => {
                self.check_index(p.crossing_index, true)?;
                self.outcome = Some(RunOutcome::Crashed(p.clone()));
                Ok(Some(Command::Terminate))
            }
            Event::WorkloadDone { crossing_index } => {
                self.check_index(*crossing_index, true)?;
                self.outcome = Some(RunOutcome::Done);
                Ok(Some(Command::Terminate))
            }
        }
    }

    fn check_index(&mut self, index: u64, terminal: bool) -> Result<(), ProtocolViolation> {
        match self.last_index {
            Some(last) if index < last || (!terminal && index == last) => {
                Err(violation(&format!("crossing index {index} after {last}")))
            }
            _ => {
                if !terminal {
                    self.last_index = Some(index);
                }
                Ok(())
            }
        }
    }

    fn crossing(&mut self, c: &Crossing) -> Result<Command, ProtocolViolation> {
        self.check_index(c.crossing_index, false)?;
        let callback = c.kind.is_callback();
        let mut skipped = false;
        if c.kind.is_entry() {
            self.open.push((callback, c.symbol.clone(), false));
        } else {
            match self.open.pop() {
                Some((cb, sym, s)) if cb == callback && sym == c.symbol => skipped = s,
                Some((_, sym, _)) => {
                    return Err(violation(&format!("exit of `{}` while `{sym}` is innermost", c.symbol)))
                }
                None => return Err(violation(&format!("exit of `{}` without entry", c.symbol))),
            }
        }
        self.crossings += 1;
        if self.crossings > self.cap {
            self.outcome = Some(RunOutcome::CapReached);
            return Ok(Command::Terminate);
        }

        let api = self.spec.function(&c.symbol).filter(|f| !f.is_callback);
        if c.kind == CrossingKind::CallEntry {
            if let Some(f) = api {
                self.reached.insert(f.symbol.clone());
                if let Some(comp) = self.spec.component_for_label(&c.caller) {
                    self.callers.insert(comp.name.clone());
                }
                let typed = typed_values(c, self.spec, &self.registry);
                let typed: Vec<TypedValue<'_>> = typed.iter().map(|(ty, bytes)| TypedValue { ty, bytes }).collect();
                self.registry.detect_callbacks(&typed, self.spec);
            }
        }
        let slots = slots(c, self.spec, &self.registry);

        let command = match &mut self.mode {
            // The return of a skipped call is already the altered value.
            Mode::Fuzz { .. } if skipped => Command::Proceed,
            Mode::Fuzz { engine, threshold } => {
                engine.observe(&slots);
                if !decide_alter(c.crossing_index, threshold, &engine.config, &mut self.rng) {
                    return Ok(Command::Proceed);
                }
                let return_width = api
                    .and_then(|f| f.return_type.as_ref())
                    .map_or(0, |t| t.byte_size().clamp(1, 8));
                let records = engine.propose(c, &slots, return_width, api.is_some(), &mut self.rng);
                let cmd = command_for(c, &records.iter().collect::<Vec<_>>());
                self.log.extend(records);
                cmd
            }
            Mode::Replay { log } => {
                let records: Vec<&AlterationRecord> = log.iter().filter(|r| record_matches(r, c)).collect();
                let cmd = command_for(c, &records);
                self.log.extend(records.into_iter().cloned());
                cmd
            }
        };
        if matches!(command, Command::SkipCall(_)) {
            if let Some(top) = self.open.last_mut() {
                top.2 = true;
            }
        }
        Ok(command)
    }
}

fn violation(msg: &str) -> ProtocolViolation {
    ProtocolViolation(msg.into())
}
