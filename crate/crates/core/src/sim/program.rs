//! Scenario documents: an interface, the micro-op programs implementing
//! each side of it, a workload, and the manifest of planted bugs.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::crash::{Arbitrariness, CivClass};
use crate::iface::{InterfaceSpec, TypeKind, ValidationError};
use crate::wire::AccessKind;

use super::memory::{DEFAULT_HEAP_CAP, MAX_GLOBAL_SIZE};

pub const REGISTERS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Reg(pub u8);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Operand {
    Reg(Reg),
    Imm(u64),
    /// Address of a global.
    Global(String),
    /// Address of a function.
    Func(String),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("bad operand `{0}`")]
pub struct OperandError(String);

fn parse_reg(s: &str) -> Option<Reg> {
    let n: u8 = s.strip_prefix('r')?.parse().ok()?;
    ((n as usize) < REGISTERS).then_some(Reg(n))
}

fn parse_imm(s: &str) -> Option<u64> {
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let v = match body.strip_prefix("0x") {
        Some(hex) => u64::from_str_radix(&hex.replace('_', ""), 16).ok()?,
        None => body.replace('_', "").parse::<u64>().ok()?,
    };
    Some(if neg { v.wrapping_neg() } else { v })
}

impl FromStr for Operand {
    type Err = OperandError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || OperandError(s.into());
        if let Some(rest) = s.strip_prefix('#') {
            return parse_imm(rest).map(Operand::Imm).ok_or_else(bad);
        }
        if let Some(name) = s.strip_prefix('@') {
            return (!name.is_empty()).then(|| Operand::Global(name.into())).ok_or_else(bad);
        }
        if let Some(name) = s.strip_prefix('&') {
            return (!name.is_empty()).then(|| Operand::Func(name.into())).ok_or_else(bad);
        }
        parse_reg(s).map(Operand::Reg).ok_or_else(bad)
    }
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Reg(r) => write!(f, "r{}", r.0),
            Operand::Imm(v) => write!(f, "#{v:#x}"),
            Operand::Global(g) => write!(f, "@{g}"),
            Operand::Func(n) => write!(f, "&{n}"),
        }
    }
}

impl Serialize for Operand {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Operand {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl Serialize for Reg {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(&format_args!("r{}", self.0))
    }
}

impl<'de> Deserialize<'de> for Reg {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        parse_reg(&s).ok_or_else(|| serde::de::Error::custom(format!("bad register `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cond {
    Eq,
    Ne,
    /// Signed comparisons.
    Lt,
    Ge,
    /// Unsigned comparisons.
    Ltu,
    Geu,
}

impl Cond {
    pub fn holds(self, a: u64, b: u64) -> bool {
        match self {
            Cond::Eq => a == b,
            Cond::Ne => a != b,
            Cond::Lt => (a as i64) < (b as i64),
            Cond::Ge => (a as i64) >= (b as i64),
            Cond::Ltu => a < b,
            Cond::Geu => a >= b,
        }
    }
}

fn word() -> u8 {
    8
}

fn lock_width() -> u8 {
    4
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Op {
    Mov {
        dst: Reg,
        src: Operand,
    },
    Add {
        dst: Reg,
        a: Operand,
        b: Operand,
    },
    Sub {
        dst: Reg,
        a: Operand,
        b: Operand,
    },
    And {
        dst: Reg,
        a: Operand,
        b: Operand,
    },
    Or {
        dst: Reg,
        a: Operand,
        b: Operand,
    },
    Shl {
        dst: Reg,
        a: Operand,
        b: Operand,
    },
    Shr {
        dst: Reg,
        a: Operand,
        b: Operand,
    },
    Mul {
        dst: Reg,
        a: Operand,
        b: Operand,
    },
    Load {
        dst: Reg,
        addr: Operand,
        #[serde(default)]
        off: i64,
        #[serde(default = "word")]
        width: u8,
    },
    Store {
        addr: Operand,
        #[serde(default)]
        off: i64,
        src: Operand,
        #[serde(default = "word")]
        width: u8,
    },
    /// Byte-wise copy; each byte is read, then written.
    Copy {
        dst: Operand,
        src: Operand,
        len: Operand,
    },
    Fill {
        dst: Operand,
        byte: Operand,
        len: Operand,
    },
    /// Writes `text` followed by a NUL byte.
    WriteStr {
        dst: Operand,
        text: String,
    },
    Strlen {
        dst: Reg,
        addr: Operand,
    },
    Alloc {
        dst: Reg,
        size: Operand,
    },
    Free {
        addr: Operand,
    },
    Call {
        func: String,
        #[serde(default)]
        args: Vec<Operand>,
        #[serde(default)]
        ret: Option<Reg>,
    },
    CallPtr {
        target: Operand,
        #[serde(default)]
        args: Vec<Operand>,
        #[serde(default)]
        ret: Option<Reg>,
    },
    Ret {
        #[serde(default)]
        value: Option<Operand>,
    },
    /// Skips the next `skip` ops when the condition holds.
    Br {
        cond: Cond,
        a: Operand,
        b: Operand,
        skip: u32,
    },
    Jmp {
        skip: u32,
    },
    Lock {
        addr: Operand,
        #[serde(default)]
        off: i64,
        #[serde(default = "lock_width")]
        width: u8,
    },
    Unlock {
        addr: Operand,
        #[serde(default)]
        off: i64,
        #[serde(default = "lock_width")]
        width: u8,
    },
    /// Skips the next `skip` ops unless the run uses the primary thread
    /// schedule. Models behavior that depends on scheduling.
    Racy {
        skip: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instr {
    #[serde(flatten)]
    pub op: Op,
    /// Names the code location for the planted-bug manifest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub site: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimFunction {
    pub name: String,
    /// Code label, used to attribute frames to a component.
    pub label: String,
    #[serde(default)]
    pub params: u16,
    pub body: Vec<Instr>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Global {
    pub name: String,
    pub size: u64,
    /// Initial 8-byte little-endian words.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub words: Vec<Operand>,
    /// Initial NUL-terminated text; applied after `words`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step {
    pub call: String,
    #[serde(default)]
    pub args: Vec<Operand>,
}

/// Calls issued before the workload proper; their number depends on the
/// run seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Warmup {
    pub call: String,
    pub max: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Workload {
    pub steps: Vec<Step>,
    #[serde(default = "one")]
    pub repeat: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup: Option<Warmup>,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantedOutcome {
    Valid,
    FalsePositive,
    Unattributable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedVuln {
    pub id: String,
    pub classes: BTreeSet<CivClass>,
    /// Site tag of the faulting op.
    pub site: String,
    pub access: AccessKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arbitrary: Option<Arbitrariness>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub victim: Option<String>,
    pub outcome: PlantedOutcome,
    pub min_alterations: usize,
    #[serde(default = "yes")]
    pub reproducible: bool,
    /// Free-form pattern tags such as `error_path` or `forwarding`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tags: Vec<String>,
}

fn yes() -> bool {
    true
}

fn default_heap_cap() -> u64 {
    DEFAULT_HEAP_CAP
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub spec: InterfaceSpec,
    #[serde(default)]
    pub globals: Vec<Global>,
    pub functions: Vec<SimFunction>,
    pub workload: Workload,
    #[serde(default)]
    pub planted: Vec<PlantedVuln>,
    #[serde(default = "default_heap_cap")]
    pub heap_cap: u64,
}

impl Scenario {
    pub fn function(&self, name: &str) -> Option<&SimFunction> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn function_index(&self, name: &str) -> Option<usize> {
        self.functions.iter().position(|f| f.name == name)
    }

    /// Site tag of op `offset` in function `symbol`.
    pub fn site_of(&self, symbol: &str, offset: u32) -> Option<&str> {
        self.function(symbol)?.body.get(offset as usize)?.site.as_deref()
    }

    pub fn planted_at(&self, site: &str, access: AccessKind) -> Option<&PlantedVuln> {
        self.planted.iter().find(|p| p.site == site && p.access == access)
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        let err = |path: String, reason: String| Err(ValidationError { path, reason });
        self.spec.validate().map_err(|e| ValidationError {
            path: format!("spec.{}", e.path),
            reason: e.reason,
        })?;
        if self.spec.word_size_bits != 64 {
            return err("spec.word_size_bits".into(), "the simulated target is 64-bit".into());
        }
        let mut names = BTreeSet::new();
        for (i, f) in self.functions.iter().enumerate() {
            if !names.insert(f.name.as_str()) {
                return err(format!("functions[{i}]"), format!("duplicate function `{}`", f.name));
            }
        }
        let globals: BTreeSet<&str> = self.globals.iter().map(|g| g.name.as_str()).collect();
        for (i, g) in self.globals.iter().enumerate() {
            let needed = g.words.len() as u64 * 8 + g.text.as_ref().map_or(0, |t| t.len() as u64 + 1);
            if g.size == 0 || needed > g.size || g.size > MAX_GLOBAL_SIZE {
                return err(
                    format!("globals[{i}]"),
                    format!(
                        "global `{}` must hold its initializer and fit in {MAX_GLOBAL_SIZE} bytes",
                        g.name
                    ),
                );
            }
            for w in &g.words {
                self.check_operand(w, &globals, &names, &format!("globals[{i}].words"))?;
            }
        }
        for (fi, sig) in self.spec.functions.iter().enumerate() {
            let path = format!("spec.functions[{fi}]");
            let Some(f) = self.function(&sig.symbol) else {
                return err(path, format!("no program for `{}`", sig.symbol));
            };
            let owner = self.spec.component_for_label(&f.label).map(|c| c.name.as_str());
            if owner != Some(sig.owner.as_str()) {
                return err(
                    path,
                    format!("`{}` is not labelled as part of `{}`", sig.symbol, sig.owner),
                );
            }
            let by_value = sig
                .params
                .iter()
                .map(|p| &p.ty)
                .chain(sig.return_type.as_ref())
                .any(|t| t.kind == TypeKind::Aggregate && t.size_bits > 64);
            if by_value {
                return err(
                    path,
                    "aggregates wider than a register cannot be passed by value".into(),
                );
            }
        }
        for (fi, f) in self.functions.iter().enumerate() {
            if f.params as usize > REGISTERS {
                return err(format!("functions[{fi}].params"), "too many parameters".into());
            }
            for (oi, ins) in f.body.iter().enumerate() {
                let path = format!("functions[{fi}].body[{oi}]");
                self.check_op(&ins.op, oi, f.body.len(), &globals, &names, &path)?;
            }
        }
        self.check_acyclic()?;
        if self.workload.steps.is_empty() || self.workload.repeat == 0 {
            return err("workload".into(), "workload must issue at least one call".into());
        }
        for (si, s) in self.workload.steps.iter().enumerate() {
            if !names.contains(s.call.as_str()) {
                return err(
                    format!("workload.steps[{si}]"),
                    format!("unknown function `{}`", s.call),
                );
            }
            for a in &s.args {
                if matches!(a, Operand::Reg(_)) {
                    return err(
                        format!("workload.steps[{si}]"),
                        "workload arguments cannot be registers".into(),
                    );
                }
                self.check_operand(a, &globals, &names, &format!("workload.steps[{si}]"))?;
            }
        }
        if let Some(w) = &self.workload.warmup {
            if !names.contains(w.call.as_str()) {
                return err("workload.warmup".into(), format!("unknown function `{}`", w.call));
            }
        }
        let sites: BTreeSet<&str> = self
            .functions
            .iter()
            .flat_map(|f| f.body.iter().filter_map(|i| i.site.as_deref()))
            .collect();
        let mut seen = BTreeSet::new();
        for (pi, p) in self.planted.iter().enumerate() {
            let path = format!("planted[{pi}]");
            if !sites.contains(p.site.as_str()) {
                return err(path, format!("unknown site `{}`", p.site));
            }
            if !seen.insert(p.id.as_str()) {
                return err(path, format!("duplicate planted id `{}`", p.id));
            }
        }
        Ok(())
    }

    fn check_operand(
        &self,
        o: &Operand,
        globals: &BTreeSet<&str>,
        functions: &BTreeSet<&str>,
        path: &str,
    ) -> Result<(), ValidationError> {
        let missing = match o {
            Operand::Global(g) if !globals.contains(g.as_str()) => Some(format!("unknown global `{g}`")),
            Operand::Func(f) if !functions.contains(f.as_str()) => Some(format!("unknown function `{f}`")),
            _ => None,
        };
        match missing {
            Some(reason) => Err(ValidationError {
                path: path.into(),
                reason,
            }),
            None => Ok(()),
        }
    }

    fn check_op(
        &self,
        op: &Op,
        index: usize,
        len: usize,
        globals: &BTreeSet<&str>,
        functions: &BTreeSet<&str>,
        path: &str,
    ) -> Result<(), ValidationError> {
        let fail = |reason: String| {
            Err(ValidationError {
                path: path.into(),
                reason,
            })
        };
        let mut operands: Vec<&Operand> = Vec::new();
        match op {
            Op::Mov { src, .. } => operands.push(src),
            Op::Add { a, b, .. }
            | Op::Sub { a, b, .. }
            | Op::And { a, b, .. }
            | Op::Or { a, b, .. }
            | Op::Shl { a, b, .. }
            | Op::Shr { a, b, .. }
            | Op::Mul { a, b, .. } => operands.extend([a, b]),
            Op::Load { addr, width, .. } | Op::Lock { addr, width, .. } | Op::Unlock { addr, width, .. } => {
                if !matches!(width, 1 | 2 | 4 | 8) {
                    return fail(format!("bad width {width}"));
                }
                operands.push(addr);
            }
            Op::Store { addr, src, width, .. } => {
                if !matches!(width, 1 | 2 | 4 | 8) {
                    return fail(format!("bad width {width}"));
                }
                operands.extend([addr, src]);
            }
            Op::Copy { dst, src, len } => operands.extend([dst, src, len]),
            Op::Fill { dst, byte, len } => operands.extend([dst, byte, len]),
            Op::WriteStr { dst, .. } => operands.push(dst),
            Op::Strlen { addr, .. } => operands.push(addr),
            Op::Alloc { size, .. } => operands.push(size),
            Op::Free { addr } => operands.push(addr),
            Op::Call { func, args, .. } => {
                if !functions.contains(func.as_str()) {
                    return fail(format!("unknown function `{func}`"));
                }
                if args.len() > REGISTERS {
                    return fail("too many arguments".into());
                }
                operands.extend(args);
            }
            Op::CallPtr { target, args, .. } => {
                if args.len() > REGISTERS {
                    return fail("too many arguments".into());
                }
                operands.push(target);
                operands.extend(args);
            }
            Op::Ret { value } => operands.extend(value),
            Op::Br { a, b, skip, .. } => {
                if index + 1 + *skip as usize > len {
                    return fail("branch skips past the end of the body".into());
                }
                operands.extend([a, b]);
            }
            Op::Jmp { skip } | Op::Racy { skip } => {
                if index + 1 + *skip as usize > len {
                    return fail("jump skips past the end of the body".into());
                }
            }
        }
        for o in operands {
            self.check_operand(o, globals, functions, path)?;
        }
        Ok(())
    }

    /// Direct calls must not recurse; indirect calls are bounded at run time.
    fn check_acyclic(&self) -> Result<(), ValidationError> {
        let edges: BTreeMap<&str, Vec<&str>> = self
            .functions
            .iter()
            .map(|f| {
                let callees = f
                    .body
                    .iter()
                    .filter_map(|i| match &i.op {
                        Op::Call { func, .. } => Some(func.as_str()),
                        _ => None,
                    })
                    .collect();
                (f.name.as_str(), callees)
            })
            .collect();
        // 0 = unvisited, 1 = on stack, 2 = done
        let mut state: BTreeMap<&str, u8> = BTreeMap::new();
        fn visit<'a>(
            n: &'a str,
            edges: &BTreeMap<&'a str, Vec<&'a str>>,
            state: &mut BTreeMap<&'a str, u8>,
        ) -> Option<&'a str> {
            match state.get(n) {
                Some(1) => return Some(n),
                Some(2) => return None,
                _ => {}
            }
            state.insert(n, 1);
            for m in edges.get(n).into_iter().flatten() {
                if let Some(c) = visit(m, edges, state) {
                    return Some(c);
                }
            }
            state.insert(n, 2);
            None
        }
        for f in &self.functions {
            if let Some(c) = visit(&f.name, &edges, &mut state) {
                return Err(ValidationError {
                    path: "functions".into(),
                    reason: format!("recursive call through `{c}`"),
                });
            }
        }
        Ok(())
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}
