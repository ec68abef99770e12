//! Interpreter for scenario programs. Calls between components are
//! reported as crossings over a [`Link`], and the monitor's commands are
//! applied before execution continues.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::crossing::{shared_buffers, signature_for, typed_values};
use crate::iface::{read_le, write_le, CallbackRegistry, ComponentRole, RegionLength, TypeKind, TypedValue};
use crate::wire::{Command, CrashPayload, Crossing, CrossingKind, Event, Frame, Locus, Snapshot, PROTOCOL_VERSION};

use super::memory::{Fault, Memory, Perm, RegionTag, DATA_BASE, DATA_STRIDE, FUNCTION_STRIDE, TEXT_BASE};
use super::program::{Op, Operand, Reg, Scenario, REGISTERS};

/// Longest string or opaque buffer captured in a snapshot.
pub const MAX_SNAPSHOT: u64 = 4096;
pub const MAX_CALL_DEPTH: usize = 64;
pub const MAX_STEPS: u64 = 2_000_000;

/// Transport between the simulated target and the monitor.
pub trait Link {
    fn send(&mut self, event: &Event) -> Result<(), LinkError>;
    fn recv(&mut self) -> Result<Command, LinkError>;
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{0}")]
pub struct LinkError(pub String);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SimError {
    #[error("link failed: {0}")]
    Link(#[from] LinkError),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("execution limit exceeded: {0}")]
    Limit(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunParams {
    pub run_id: u64,
    pub seed: u64,
    /// Zero for the primary thread schedule; replays use other values.
    pub schedule_nonce: u64,
    /// Overrides the workload's repeat count.
    pub repeat: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RunEnd {
    WorkloadDone { crossings: u64 },
    Crashed(CrashPayload),
    Terminated { crossings: u64 },
}

enum Stop {
    Crash(CrashPayload),
    Terminated,
    Error(SimError),
}

impl From<SimError> for Stop {
    fn from(e: SimError) -> Self {
        Stop::Error(e)
    }
}

impl From<LinkError> for Stop {
    fn from(e: LinkError) -> Self {
        Stop::Error(SimError::Link(e))
    }
}

struct FrameState {
    func: usize,
    pc: usize,
}

struct Machine<'a, L: Link> {
    sc: &'a Scenario,
    link: &'a mut L,
    mem: Memory,
    registry: CallbackRegistry,
    func_by_addr: BTreeMap<u64, usize>,
    global_addr: BTreeMap<&'a str, u64>,
    /// Component index of each function, if its label belongs to one.
    component: Vec<Option<usize>>,
    stack: Vec<FrameState>,
    driver: (&'static str, u32),
    crossings: u64,
    steps: u64,
    nonce: u64,
}

/// Runs the scenario's workload once. The scenario must have been
/// validated.
pub fn run<L: Link>(sc: &Scenario, params: &RunParams, link: &mut L) -> Result<RunEnd, SimError> {
    let mut m = Machine::new(sc, link, params.schedule_nonce);
    m.link.send(&Event::Ready {
        run_id: params.run_id,
        version: PROTOCOL_VERSION,
        word_size_bits: sc.spec.word_size_bits as u16,
    })?;
    match m.workload(params) {
        Ok(()) => {
            m.link.send(&Event::WorkloadDone {
                crossing_index: m.crossings,
            })?;
            m.link.recv()?;
            Ok(RunEnd::WorkloadDone { crossings: m.crossings })
        }
        Err(Stop::Crash(payload)) => {
            m.link.send(&Event::Crash(payload.clone()))?;
            m.link.recv()?;
            Ok(RunEnd::Crashed(payload))
        }
        Err(Stop::Terminated) => Ok(RunEnd::Terminated { crossings: m.crossings }),
        Err(Stop::Error(e)) => Err(e),
    }
}

impl<'a, L: Link> Machine<'a, L> {
    fn new(sc: &'a Scenario, link: &'a mut L, nonce: u64) -> Self {
        let mut mem = Memory::new(sc.heap_cap);
        let text_len = (sc.functions.len() as u64).max(1) * FUNCTION_STRIDE;
        mem.map(TEXT_BASE, alloc::vec![0; text_len as usize], Perm::X, RegionTag::Text);
        let func_by_addr = (0..sc.functions.len())
            .map(|i| (TEXT_BASE + i as u64 * FUNCTION_STRIDE, i))
            .collect();
        let global_addr: BTreeMap<&str, u64> = sc
            .globals
            .iter()
            .enumerate()
            .map(|(i, g)| (g.name.as_str(), DATA_BASE + i as u64 * DATA_STRIDE))
            .collect();
        let component = sc
            .functions
            .iter()
            .map(|f| sc.spec.components.iter().position(|c| c.labels.contains(&f.label)))
            .collect();
        let mut m = Machine {
            sc,
            link,
            mem,
            registry: CallbackRegistry::new(&sc.spec),
            func_by_addr,
            global_addr,
            component,
            stack: Vec::new(),
            driver: ("workload", 0),
            crossings: 0,
            steps: 0,
            nonce,
        };
        for g in &sc.globals {
            let mut bytes = alloc::vec![0u8; g.size as usize];
            for (i, w) in g.words.iter().enumerate() {
                let v = m.static_value(w);
                bytes[i * 8..i * 8 + 8].copy_from_slice(&v.to_le_bytes());
            }
            if let Some(t) = &g.text {
                let at = g.words.len() * 8;
                bytes[at..at + t.len()].copy_from_slice(t.as_bytes());
            }
            m.mem
                .map(m.global_addr[g.name.as_str()], bytes, Perm::RW, RegionTag::Data);
        }
        m
    }

    fn static_value(&self, o: &Operand) -> u64 {
        match o {
            Operand::Reg(_) => 0,
            Operand::Imm(v) => *v,
            Operand::Global(g) => self.global_addr[g.as_str()],
            Operand::Func(f) => TEXT_BASE + self.sc.function_index(f).expect("validated") as u64 * FUNCTION_STRIDE,
        }
    }

    fn workload(&mut self, params: &RunParams) -> Result<(), Stop> {
        let w = &self.sc.workload;
        if let Some(warm) = &w.warmup {
            let n = params.seed % (warm.max as u64 + 1);
            let f = self.sc.function_index(&warm.call).expect("validated");
            for i in 0..n {
                self.driver = ("warmup", i as u32);
                self.call(f, Vec::new())?;
            }
        }
        for _ in 0..params.repeat.unwrap_or(w.repeat).max(1) {
            for (si, step) in w.steps.iter().enumerate() {
                self.driver = ("workload", si as u32);
                let f = self.sc.function_index(&step.call).expect("validated");
                let args = step.args.iter().map(|a| self.static_value(a)).collect();
                self.call(f, args)?;
            }
        }
        Ok(())
    }

    fn frames(&self) -> Vec<Frame> {
        let mut out: Vec<Frame> = self
            .stack
            .iter()
            .rev()
            .map(|s| {
                let f = &self.sc.functions[s.func];
                Frame {
                    symbol: f.name.clone(),
                    offset: s.pc as u32,
                    label: f.label.clone(),
                }
            })
            .collect();
        out.push(Frame {
            symbol: self.driver.0.into(),
            offset: self.driver.1,
            label: "driver".into(),
        });
        out
    }

    fn crash(&self, fault: Fault) -> Stop {
        Stop::Crash(CrashPayload {
            crossing_index: self.crossings,
            access: fault.access,
            faulty_address: fault.address,
            frames: self.frames(),
        })
    }

    fn is_crossing(&self, callee: usize) -> bool {
        let caller = self.stack.last().and_then(|s| self.component[s.func]);
        let (Some(a), Some(b)) = (caller, self.component[callee]) else {
            return false;
        };
        if a == b {
            return false;
        }
        let name = &self.sc.functions[callee].name;
        let malicious = |i: usize| self.sc.spec.components[i].role == ComponentRole::Malicious;
        self.sc.spec.function(name).is_some() || self.registry.get(name).is_some() || malicious(a) || malicious(b)
    }

    fn call(&mut self, callee: usize, args: Vec<u64>) -> Result<u64, Stop> {
        if !self.is_crossing(callee) {
            return self.exec(callee, args);
        }
        let name = self.sc.functions[callee].name.clone();
        let caller = self
            .stack
            .last()
            .map(|s| self.sc.functions[s.func].label.clone())
            .unwrap_or_default();
        let is_api = self.sc.spec.function(&name).is_some_and(|f| !f.is_callback);
        let (entry_kind, exit_kind, arg_locus, ret_locus): (_, _, fn(u16) -> Locus, _) = if is_api {
            (
                CrossingKind::CallEntry,
                CrossingKind::CallExit,
                Locus::Arg,
                Locus::ReturnValue,
            )
        } else {
            (
                CrossingKind::CallbackEntry,
                CrossingKind::CallbackExit,
                Locus::CallbackArg,
                Locus::CallbackReturn,
            )
        };
        let mut args = args;

        let mut ev = Crossing {
            kind: entry_kind,
            crossing_index: self.crossings,
            symbol: name.clone(),
            caller: caller.clone(),
            values: Vec::new(),
            snapshots: Vec::new(),
        };
        ev.values = self.arg_values(&ev, &args, arg_locus);
        if is_api {
            let typed = typed_values(&ev, &self.sc.spec, &self.registry);
            let typed: Vec<TypedValue<'_>> = typed.iter().map(|(ty, bytes)| TypedValue { ty, bytes }).collect();
            self.registry.detect_callbacks(&typed, &self.sc.spec);
        }
        ev.snapshots = self.snapshots(&ev);
        let mut skipped = None;
        match self.exchange(&ev)? {
            Command::Proceed => {}
            Command::Alter(ds) => {
                for d in ds {
                    match d.locus {
                        Locus::SharedByte { region, offset } => self.poke_shared(&ev, region, offset, &d.bytes)?,
                        l => {
                            let i = (0..args.len())
                                .find(|i| arg_locus(*i as u16) == l)
                                .ok_or_else(|| protocol(format!("locus {l:?} not in {entry_kind:?} event")))?;
                            args[i] = self.decode(&ev, l, &d.bytes);
                        }
                    }
                }
            }
            Command::SkipCall(ret) => {
                if !is_api {
                    return Err(protocol("SkipCall in response to a callback entry".into()));
                }
                skipped = Some(ret);
            }
            Command::Terminate => return Err(Stop::Terminated),
        }

        let mut ret = match skipped {
            Some(bytes) => {
                let probe = Crossing {
                    kind: exit_kind,
                    ..ev.clone()
                };
                self.decode(&probe, ret_locus, &bytes)
            }
            None => self.exec(callee, args.clone())?,
        };

        let mut exit = Crossing {
            kind: exit_kind,
            crossing_index: self.crossings,
            symbol: name,
            caller,
            values: Vec::new(),
            snapshots: Vec::new(),
        };
        exit.values = self.arg_values(&exit, &args, arg_locus);
        if let Some(width) = self.return_width(&exit) {
            exit.values.push((ret_locus, write_le(ret, width)));
        }
        exit.snapshots = self.snapshots(&exit);
        match self.exchange(&exit)? {
            Command::Proceed => {}
            Command::Alter(ds) => {
                for d in ds {
                    match d.locus {
                        Locus::SharedByte { region, offset } => self.poke_shared(&exit, region, offset, &d.bytes)?,
                        l if l == ret_locus && exit.value(l).is_some() => ret = self.decode(&exit, l, &d.bytes),
                        l if exit.value(l).is_some() => {}
                        l => return Err(protocol(format!("locus {l:?} not in {exit_kind:?} event"))),
                    }
                }
            }
            Command::SkipCall(_) => return Err(protocol("SkipCall in response to an exit event".into())),
            Command::Terminate => return Err(Stop::Terminated),
        }
        Ok(ret)
    }

    fn exchange(&mut self, c: &Crossing) -> Result<Command, Stop> {
        self.link.send(&Event::Crossing(c.clone()))?;
        self.crossings += 1;
        Ok(self.link.recv()?)
    }

    fn arg_values(&self, c: &Crossing, args: &[u64], locus: fn(u16) -> Locus) -> Vec<(Locus, Vec<u8>)> {
        let sig = signature_for(c, &self.sc.spec, &self.registry);
        args.iter()
            .enumerate()
            .map(|(i, v)| {
                let l = locus(i as u16);
                let width = crate::crossing::value_type(l, sig, &self.sc.spec)
                    .0
                    .byte_size()
                    .clamp(1, 8);
                (l, write_le(*v, width))
            })
            .collect()
    }

    fn return_width(&self, c: &Crossing) -> Option<usize> {
        match signature_for(c, &self.sc.spec, &self.registry) {
            Some(sig) => sig.return_type.as_ref().map(|t| t.byte_size().clamp(1, 8)),
            None => Some(8),
        }
    }

    /// Register value for altered bytes: zero-extended, or sign-extended
    /// for signed integers.
    fn decode(&self, c: &Crossing, locus: Locus, bytes: &[u8]) -> u64 {
        let v = read_le(bytes);
        let sig = signature_for(c, &self.sc.spec, &self.registry);
        let (ty, _) = crate::crossing::value_type(locus, sig, &self.sc.spec);
        let width = bytes.len().min(8);
        if ty.kind == TypeKind::Integer && ty.is_signed() && width > 0 && width < 8 && v >> (8 * width - 1) & 1 == 1 {
            v | (u64::MAX << (8 * width))
        } else {
            v
        }
    }

    fn snapshots(&self, c: &Crossing) -> Vec<Snapshot> {
        let typed = typed_values(c, &self.sc.spec, &self.registry);
        let regions = shared_buffers(&typed).regions;
        let mut out = Vec::new();
        for (i, r) in regions.iter().enumerate() {
            if r.base == 0 {
                continue;
            }
            let readable = self.mem.region_at(r.base).is_some_and(|(_, reg)| reg.perm.read);
            if !readable {
                continue;
            }
            let len = match r.length {
                RegionLength::Bytes(n) => n,
                RegionLength::RuntimeResolved if r.element.kind == TypeKind::TextString => {
                    let n = self.mem.c_strlen(r.base, MAX_SNAPSHOT).unwrap_or(0);
                    (n + 1).min(self.mem.span(r.base))
                }
                RegionLength::RuntimeResolved => self.mem.span(r.base).min(MAX_SNAPSHOT),
            };
            if len == 0 {
                continue;
            }
            if let Ok(bytes) = self.mem.read(r.base, len) {
                out.push(Snapshot {
                    region: i as u32,
                    base: r.base,
                    bytes,
                });
            }
        }
        out
    }

    fn poke_shared(&mut self, c: &Crossing, region: u32, offset: u32, bytes: &[u8]) -> Result<(), Stop> {
        let snap = c
            .snapshot(region)
            .ok_or_else(|| protocol(format!("shared region {region} not in event")))?;
        if offset as usize + bytes.len() > snap.bytes.len() {
            return Err(protocol(format!("shared write past the end of region {region}")));
        }
        self.mem.poke(snap.base + offset as u64, bytes);
        Ok(())
    }

    fn exec(&mut self, func: usize, args: Vec<u64>) -> Result<u64, Stop> {
        if self.stack.len() >= MAX_CALL_DEPTH {
            return Err(Stop::Error(SimError::Limit("call depth")));
        }
        let mut regs = [0u64; REGISTERS];
        for (r, a) in regs.iter_mut().zip(&args) {
            *r = *a;
        }
        self.stack.push(FrameState { func, pc: 0 });
        let ret = self.body(func, &mut regs);
        if ret.is_ok() {
            self.stack.pop();
        }
        ret
    }

    fn body(&mut self, func: usize, regs: &mut [u64; REGISTERS]) -> Result<u64, Stop> {
        let sc = self.sc;
        let body = &sc.functions[func].body;
        let mut pc = 0usize;
        while pc < body.len() {
            self.steps += 1;
            if self.steps > MAX_STEPS {
                return Err(Stop::Error(SimError::Limit("step budget")));
            }
            self.stack.last_mut().expect("frame").pc = pc;
            let op = &body[pc].op;
            pc += 1;
            match op {
                Op::Mov { dst, src } => regs[dst.0 as usize] = self.val(src, regs),
                Op::Add { dst, a, b } => regs[dst.0 as usize] = self.val(a, regs).wrapping_add(self.val(b, regs)),
                Op::Sub { dst, a, b } => regs[dst.0 as usize] = self.val(a, regs).wrapping_sub(self.val(b, regs)),
                Op::And { dst, a, b } => regs[dst.0 as usize] = self.val(a, regs) & self.val(b, regs),
                Op::Or { dst, a, b } => regs[dst.0 as usize] = self.val(a, regs) | self.val(b, regs),
                Op::Shl { dst, a, b } => {
                    regs[dst.0 as usize] = self.val(a, regs).wrapping_shl(self.val(b, regs) as u32)
                }
                Op::Shr { dst, a, b } => {
                    regs[dst.0 as usize] = self.val(a, regs).wrapping_shr(self.val(b, regs) as u32)
                }
                Op::Mul { dst, a, b } => regs[dst.0 as usize] = self.val(a, regs).wrapping_mul(self.val(b, regs)),
                Op::Load { dst, addr, off, width } => {
                    let at = self.val(addr, regs).wrapping_add(*off as u64);
                    let bytes = self.mem.read(at, *width as u64).map_err(|f| self.crash(f))?;
                    regs[dst.0 as usize] = read_le(&bytes);
                }
                Op::Store { addr, off, src, width } => {
                    let at = self.val(addr, regs).wrapping_add(*off as u64);
                    let bytes = write_le(self.val(src, regs), *width as usize);
                    self.mem.write(at, &bytes).map_err(|f| self.crash(f))?;
                }
                Op::Copy { dst, src, len } => {
                    let (dst, src, len) = (self.val(dst, regs), self.val(src, regs), self.val(len, regs));
                    let readable = self.accessible(src, Perm::R, len);
                    let writable = self.accessible(dst, Perm::RW, len);
                    let n = len.min(readable).min(writable);
                    let data = self.mem.peek(src, n).unwrap_or_default();
                    self.mem.poke(dst, &data);
                    if n < len {
                        let fault = if readable <= writable {
                            self.mem.read(src.wrapping_add(n), 1).unwrap_err()
                        } else {
                            self.mem.write(dst.wrapping_add(n), &[0]).unwrap_err()
                        };
                        return Err(self.crash(fault));
                    }
                }
                Op::Fill { dst, byte, len } => {
                    let (dst, byte, len) = (self.val(dst, regs), self.val(byte, regs) as u8, self.val(len, regs));
                    let writable = self.accessible(dst, Perm::RW, len);
                    let n = len.min(writable);
                    self.mem.poke(dst, &alloc::vec![byte; n as usize]);
                    if n < len {
                        let fault = self.mem.write(dst.wrapping_add(n), &[0]).unwrap_err();
                        return Err(self.crash(fault));
                    }
                }
                Op::WriteStr { dst, text } => {
                    let mut bytes = text.as_bytes().to_vec();
                    bytes.push(0);
                    self.mem.write(self.val(dst, regs), &bytes).map_err(|f| self.crash(f))?;
                }
                Op::Strlen { dst, addr } => {
                    let at = self.val(addr, regs);
                    let readable = self.accessible(at, Perm::R, u64::MAX);
                    let bytes = self.mem.peek(at, readable).unwrap_or_default();
                    match bytes.iter().position(|b| *b == 0) {
                        Some(n) => regs[dst.0 as usize] = n as u64,
                        None => {
                            let fault = self.mem.read(at.wrapping_add(readable), 1).unwrap_err();
                            return Err(self.crash(fault));
                        }
                    }
                }
                Op::Alloc { dst, size } => {
                    let size = self.val(size, regs);
                    regs[dst.0 as usize] = self.mem.alloc(size).map_err(|f| self.crash(f))?;
                }
                Op::Free { addr } => {
                    let at = self.val(addr, regs);
                    self.mem.free(at).map_err(|f| self.crash(f))?;
                }
                Op::Call { func, args, ret } => {
                    let callee = self.sc.function_index(func).expect("validated");
                    let args = args.iter().map(|a| self.val(a, regs)).collect();
                    let v = self.call(callee, args)?;
                    if let Some(r) = ret {
                        regs[r.0 as usize] = v;
                    }
                }
                Op::CallPtr { target, args, ret } => {
                    let target = self.val(target, regs);
                    let Some(&callee) = self.func_by_addr.get(&target) else {
                        let fault = match self.mem.exec(target) {
                            Err(f) => f,
                            Ok(()) => Fault {
                                access: crate::wire::AccessKind::Exec,
                                address: Some(target),
                            },
                        };
                        return Err(self.crash(fault));
                    };
                    let args = args.iter().map(|a| self.val(a, regs)).collect();
                    let v = self.call(callee, args)?;
                    if let Some(r) = ret {
                        regs[r.0 as usize] = v;
                    }
                }
                Op::Ret { value } => return Ok(value.as_ref().map_or(0, |v| self.val(v, regs))),
                Op::Br { cond, a, b, skip } => {
                    if cond.holds(self.val(a, regs), self.val(b, regs)) {
                        pc += *skip as usize;
                    }
                }
                Op::Jmp { skip } => pc += *skip as usize,
                Op::Lock { addr, off, width } => {
                    let at = self.val(addr, regs).wrapping_add(*off as u64);
                    let cur = self.mem.read(at, *width as u64).map_err(|f| self.crash(f))?;
                    if read_le(&cur) != 0 {
                        return Err(self.crash(Fault {
                            access: crate::wire::AccessKind::DeadlockTimeout,
                            address: Some(at),
                        }));
                    }
                    self.mem
                        .write(at, &write_le(1, *width as usize))
                        .map_err(|f| self.crash(f))?;
                }
                Op::Unlock { addr, off, width } => {
                    let at = self.val(addr, regs).wrapping_add(*off as u64);
                    self.mem
                        .write(at, &write_le(0, *width as usize))
                        .map_err(|f| self.crash(f))?;
                }
                Op::Racy { skip } => {
                    if self.nonce != 0 {
                        pc += *skip as usize;
                    }
                }
            }
        }
        Ok(0)
    }

    fn val(&self, o: &Operand, regs: &[u64; REGISTERS]) -> u64 {
        match o {
            Operand::Reg(Reg(r)) => regs[*r as usize],
            other => self.static_value(other),
        }
    }

    /// Bytes accessible from `addr` with `perm`, up to `max`.
    fn accessible(&self, addr: u64, perm: Perm, max: u64) -> u64 {
        match self.mem.region_at(addr) {
            Some((_, r)) if (!perm.read || r.perm.read) && (!perm.write || r.perm.write) => {
                self.mem.span(addr).min(max)
            }
            _ => 0,
        }
    }
}

fn protocol(msg: String) -> Stop {
    Stop::Error(SimError::Protocol(msg))
}
