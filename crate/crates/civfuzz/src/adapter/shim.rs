use std::os::fd::AsRawFd;
use std::os::unix::net::UnixStream;
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use civfuzz_core::monitor::RunMonitor;
use civfuzz_core::wire::{AccessKind, CrashPayload, Event};

use super::{Adapter, AdapterError, AdapterKind, RunRequest};
use crate::session::{Session, SessionError};

/// Descriptor the target reads commands from.
pub const ENV_IN_FD: &str = "CIVFUZZ_IN_FD";
/// Descriptor the target writes events to.
pub const ENV_OUT_FD: &str = "CIVFUZZ_OUT_FD";
pub const ENV_RUN_ID: &str = "CIVFUZZ_RUN_ID";
pub const ENV_RUN_SEED: &str = "CIVFUZZ_RUN_SEED";
pub const ENV_SCHEDULE_NONCE: &str = "CIVFUZZ_SCHEDULE_NONCE";

/// Runs a workload command whose target process is instrumented by a
/// native shim. The command is run with `sh -c`.
pub struct ShimAdapter {
    pub command: String,
    pub timeout: Duration,
    /// Descriptive output of the target is discarded unless set.
    pub inherit_output: bool,
}

impl ShimAdapter {
    pub fn new(command: impl Into<String>) -> Self {
        ShimAdapter {
            command: command.into(),
            timeout: Duration::from_secs(10),
            inherit_output: false,
        }
    }

    fn spawn(&self, req: &RunRequest, cmd_end: &UnixStream, event_end: &UnixStream) -> std::io::Result<Child> {
        let in_fd = cmd_end.as_raw_fd();
        let out_fd = event_end.as_raw_fd();
        let mut cmd = Command::new("sh");
        cmd.arg("-c")
            .arg(&self.command)
            .env(ENV_IN_FD, in_fd.to_string())
            .env(ENV_OUT_FD, out_fd.to_string())
            .env(ENV_RUN_ID, req.run_id.to_string())
            .env(ENV_RUN_SEED, req.seed.to_string())
            .env(ENV_SCHEDULE_NONCE, req.schedule_nonce.to_string())
            .stdin(Stdio::null());
        if !self.inherit_output {
            cmd.stdout(Stdio::null()).stderr(Stdio::null());
        }
        // SAFETY: only async-signal-safe calls between fork and exec.
        unsafe {
            cmd.pre_exec(move || {
                for fd in [in_fd, out_fd] {
                    let flags = libc::fcntl(fd, libc::F_GETFD);
                    if flags < 0 || libc::fcntl(fd, libc::F_SETFD, flags & !libc::FD_CLOEXEC) < 0 {
                        return Err(std::io::Error::last_os_error());
                    }
                }
                Ok(())
            });
        }
        cmd.spawn()
    }

    fn reap(&self, child: &mut Child) -> Option<std::process::ExitStatus> {
        let deadline = Instant::now() + self.timeout;
        loop {
            match child.try_wait() {
                Ok(Some(status)) => return Some(status),
                Ok(None) if Instant::now() < deadline => std::thread::sleep(Duration::from_millis(2)),
                _ => {
                    let _ = child.kill();
                    return child.wait().ok();
                }
            }
        }
    }
}

/// Crash inferred from how the target died, used when it could not send
/// a report itself.
fn last_resort_crash(status: std::process::ExitStatus, crossing_index: u64) -> Option<CrashPayload> {
    let access = match status.signal()? {
        libc::SIGILL => AccessKind::Exec,
        libc::SIGABRT => AccessKind::AllocMisuse,
        libc::SIGSEGV | libc::SIGBUS => AccessKind::Read,
        _ => return None,
    };
    Some(CrashPayload {
        crossing_index,
        access,
        faulty_address: None,
        frames: Vec::new(),
    })
}

impl Adapter for ShimAdapter {
    fn kind(&self) -> AdapterKind {
        AdapterKind::NativeShim
    }

    fn execute(&mut self, req: &RunRequest, monitor: &mut RunMonitor<'_>) -> Result<(), AdapterError> {
        let launch = |e: std::io::Error| AdapterError::Launch(e.to_string());
        let (event_ours, event_theirs) = UnixStream::pair().map_err(launch)?;
        let (cmd_ours, cmd_theirs) = UnixStream::pair().map_err(launch)?;
        let mut child = self.spawn(req, &cmd_theirs, &event_theirs).map_err(launch)?;
        drop(event_theirs);
        drop(cmd_theirs);
        event_ours.set_read_timeout(Some(self.timeout)).map_err(launch)?;

        let mut session = Session::new(&event_ours, &cmd_ours);
        let served = session.serve(monitor, self.timeout);
        drop(cmd_ours);
        let status = self.reap(&mut child);
        match served {
            Ok(_) => Ok(()),
            Err(e) if !monitor.is_started() => Err(AdapterError::Launch(format!("{e} (target exit: {status:?})"))),
            Err(SessionError::Frame(_)) if !monitor.is_finished() => {
                let index = monitor.last_crossing_index().unwrap_or(0);
                match status.and_then(|s| last_resort_crash(s, index)) {
                    Some(payload) if monitor.handle(&Event::Crash(payload.clone())).is_ok() => Ok(()),
                    _ => Err(AdapterError::Target(format!("target exited early ({status:?})"))),
                }
            }
            Err(e) => Err(e.into()),
        }
    }
}
