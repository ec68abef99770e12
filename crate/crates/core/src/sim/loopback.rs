//! In-process link between the simulated target and a [`RunMonitor`].
//! Messages still go through the wire codec, so the byte format is
//! exercised on every crossing.

use alloc::format;

use crate::monitor::{ProtocolViolation, RunMonitor};
use crate::wire::{split_frame, Command, Event};

use super::machine::{run, Link, LinkError, RunEnd, RunParams, SimError};
use super::program::Scenario;

pub struct Loopback<'m, 'a> {
    monitor: &'m mut RunMonitor<'a>,
    reply: Option<Command>,
    /// Set when the monitor rejected an event.
    pub violation: Option<ProtocolViolation>,
}

impl<'m, 'a> Loopback<'m, 'a> {
    pub fn new(monitor: &'m mut RunMonitor<'a>) -> Self {
        Loopback {
            monitor,
            reply: None,
            violation: None,
        }
    }
}

fn codec<E: core::fmt::Display>(e: E) -> LinkError {
    LinkError(format!("{e}"))
}

impl Link for Loopback<'_, '_> {
    fn send(&mut self, event: &Event) -> Result<(), LinkError> {
        let bytes = event.encode();
        let (payload, _) = split_frame(&bytes).map_err(codec)?;
        let event = Event::decode_payload(payload).map_err(codec)?;
        match self.monitor.handle(&event) {
            Ok(Some(cmd)) => {
                let bytes = cmd.encode();
                let (payload, _) = split_frame(&bytes).map_err(codec)?;
                self.reply = Some(Command::decode_payload(payload).map_err(codec)?);
                Ok(())
            }
            Ok(None) => Ok(()),
            Err(v) => {
                let e = LinkError(format!("{v}"));
                self.violation = Some(v);
                Err(e)
            }
        }
    }

    fn recv(&mut self) -> Result<Command, LinkError> {
        self.reply.take().ok_or_else(|| LinkError("no command pending".into()))
    }
}

/// Runs the scenario once against `monitor` without any I/O.
pub fn run_in_process(sc: &Scenario, params: &RunParams, monitor: &mut RunMonitor<'_>) -> Result<RunEnd, SimError> {
    let mut link = Loopback::new(monitor);
    run(sc, params, &mut link)
}
