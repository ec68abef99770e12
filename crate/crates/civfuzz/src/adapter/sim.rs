use std::os::unix::net::UnixStream;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use civfuzz_core::monitor::RunMonitor;
use civfuzz_core::sim::{self, RunParams, Scenario};

use super::{Adapter, AdapterError, AdapterKind, RunRequest};
use crate::session::{Session, StreamLink};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transport {
    /// Target on its own thread behind a socket pair.
    Socket,
    /// Target called directly; messages still pass through the codec.
    InProcess,
}

pub struct SimAdapter {
    scenario: Arc<Scenario>,
    pub transport: Transport,
    pub timeout: Duration,
    /// Overrides the workload's repeat count.
    pub repeat: Option<u32>,
}

impl SimAdapter {
    pub fn new(scenario: Scenario) -> Self {
        SimAdapter {
            scenario: Arc::new(scenario),
            transport: Transport::Socket,
            timeout: Duration::from_secs(10),
            repeat: None,
        }
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    fn params(&self, req: &RunRequest) -> RunParams {
        RunParams {
            run_id: req.run_id,
            seed: req.seed,
            schedule_nonce: req.schedule_nonce,
            repeat: self.repeat,
        }
    }

    fn over_socket(&self, params: RunParams, monitor: &mut RunMonitor<'_>) -> Result<(), AdapterError> {
        let (ours, theirs) = UnixStream::pair().map_err(|e| AdapterError::Launch(e.to_string()))?;
        let reader = theirs.try_clone().map_err(|e| AdapterError::Launch(e.to_string()))?;
        let scenario = Arc::clone(&self.scenario);
        let target = thread::Builder::new()
            .name(format!("sim-run-{}", params.run_id))
            .spawn(move || {
                let mut link = StreamLink { reader, writer: theirs };
                sim::run(&scenario, &params, &mut link)
            })
            .map_err(|e| AdapterError::Launch(e.to_string()))?;

        ours.set_read_timeout(Some(self.timeout))
            .map_err(|e| AdapterError::Launch(e.to_string()))?;
        let reader = ours.try_clone().map_err(|e| AdapterError::Launch(e.to_string()))?;
        let served = Session::new(reader, &ours).serve(monitor, self.timeout);
        if served.is_err() {
            let _ = ours.shutdown(std::net::Shutdown::Both);
        }
        let target = target
            .join()
            .map_err(|_| AdapterError::Target("simulated target panicked".into()))?;
        match (served, target) {
            (Ok(_), _) => Ok(()),
            (Err(_), Err(e)) => Err(AdapterError::Target(e.to_string())),
            (Err(e), Ok(_)) => Err(e.into()),
        }
    }
}

impl Adapter for SimAdapter {
    fn kind(&self) -> AdapterKind {
        AdapterKind::Simulated
    }

    fn execute(&mut self, req: &RunRequest, monitor: &mut RunMonitor<'_>) -> Result<(), AdapterError> {
        let params = self.params(req);
        match self.transport {
            Transport::Socket => self.over_socket(params, monitor),
            Transport::InProcess => {
                let mut link = sim::Loopback::new(monitor);
                let result = sim::run(&self.scenario, &params, &mut link);
                if let Some(v) = link.violation.take() {
                    return Err(AdapterError::Session(v.into()));
                }
                result.map(|_| ()).map_err(|e| AdapterError::Target(e.to_string()))
            }
        }
    }
}
