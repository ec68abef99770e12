//! Interface model: the semantic types that cross a compartment boundary,
//! the functions and callbacks that carry them, and the components on each
//! side.
//!
//! An [`InterfaceSpec`] is immutable once validated and is shared read-only
//! by the monitor, the mutation engine and the simulated target.

use alloc::boxed::Box;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

/// Aggregates and pointees nested deeper than this are not walked during
/// callback and shared-buffer discovery.
pub const MAX_TRAVERSAL_DEPTH: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TypeKind {
    #[serde(rename = "address")]
    AddressValue,
    Integer,
    Float,
    Aggregate,
    TextString,
    RawBuffer,
    #[serde(rename = "callable")]
    CallableRef,
    Lock,
}

/// Semantic intent of an integer, used to tell indexing corruption apart
/// from generic object corruption.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueRole {
    Size,
    Index,
    Other,
}

impl ValueRole {
    /// Name-based guess used when a parameter carries no explicit role.
    pub fn guess(name: &str) -> ValueRole {
        let name = name.to_ascii_lowercase();
        if name.contains("idx") || name.contains("index") {
            ValueRole::Index
        } else if name.contains("len") || name.contains("size") || name.contains("count") {
            ValueRole::Size
        } else {
            ValueRole::Other
        }
    }

    pub fn resolve(explicit: Option<ValueRole>, name: &str) -> ValueRole {
        explicit.unwrap_or_else(|| ValueRole::guess(name))
    }

    pub fn is_indexing(self) -> bool {
        matches!(self, ValueRole::Size | ValueRole::Index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TypeDescriptor {
    pub kind: TypeKind,
    pub size_bits: u32,
    pub type_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signed: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pointee: Option<Box<TypeDescriptor>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fields: Vec<Field>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signature: Option<CallableSignature>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Field {
    pub name: String,
    pub offset: u32,
    #[serde(rename = "type")]
    pub ty: TypeDescriptor,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<ValueRole>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Param {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: TypeDescriptor,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<ValueRole>,
}

/// Declared signature of the function a callable reference points to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CallableSignature {
    #[serde(default)]
    pub params: Vec<Param>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub return_type: Option<Box<TypeDescriptor>>,
}

impl TypeDescriptor {
    pub fn byte_size(&self) -> usize {
        (self.size_bits / 8) as usize
    }

    pub fn integer(type_name: &str, size_bits: u32, signed: bool) -> Self {
        TypeDescriptor {
            kind: TypeKind::Integer,
            size_bits,
            type_name: type_name.to_string(),
            signed: Some(signed),
            pointee: None,
            fields: Vec::new(),
            signature: None,
        }
    }

    pub fn address(type_name: &str, word_bits: u32, pointee: Option<TypeDescriptor>) -> Self {
        TypeDescriptor {
            kind: TypeKind::AddressValue,
            size_bits: word_bits,
            type_name: type_name.to_string(),
            signed: None,
            pointee: pointee.map(Box::new),
            fields: Vec::new(),
            signature: None,
        }
    }

    pub fn simple(kind: TypeKind, type_name: &str, size_bits: u32) -> Self {
        TypeDescriptor {
            kind,
            size_bits,
            type_name: type_name.to_string(),
            signed: None,
            pointee: None,
            fields: Vec::new(),
            signature: None,
        }
    }

    pub fn aggregate(type_name: &str, size_bits: u32, fields: Vec<Field>) -> Self {
        TypeDescriptor {
            fields,
            ..TypeDescriptor::simple(TypeKind::Aggregate, type_name, size_bits)
        }
    }

    pub fn callable(type_name: &str, word_bits: u32, signature: Option<CallableSignature>) -> Self {
        TypeDescriptor {
            signature,
            ..TypeDescriptor::simple(TypeKind::CallableRef, type_name, word_bits)
        }
    }

    /// Stand-in for a value whose type is unknown: one opaque machine word.
    pub fn opaque_word(word_bits: u32) -> Self {
        TypeDescriptor::simple(TypeKind::RawBuffer, "opaque_word", word_bits)
    }

    pub fn is_signed(&self) -> bool {
        self.signed.unwrap_or(false)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionSig {
    pub symbol: String,
    #[serde(default)]
    pub params: Vec<Param>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub return_type: Option<TypeDescriptor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub return_role: Option<ValueRole>,
    #[serde(default)]
    pub is_callback: bool,
    pub owner: String,
    #[serde(default, skip_serializing_if = "is_false")]
    pub variadic: bool,
    /// Set on callbacks synthesized at runtime without a declared signature.
    #[serde(default, skip_serializing_if = "is_false")]
    pub low_confidence: bool,
}

fn is_false(b: &bool) -> bool {
    !*b
}

impl FunctionSig {
    pub fn param_role(&self, index: usize) -> ValueRole {
        self.params
            .get(index)
            .map(|p| ValueRole::resolve(p.role, &p.name))
            .unwrap_or(ValueRole::Other)
    }

    pub fn return_role(&self) -> ValueRole {
        self.return_role.unwrap_or(ValueRole::Other)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentRole {
    Victim,
    Malicious,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Component {
    pub name: String,
    pub role: ComponentRole,
    /// Code labels used to attribute stack frames to this component.
    pub labels: Vec<String>,
}

/// Which side of the interface is malicious.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Malicious callee: return values, callback arguments and shared memory
    /// are attacker-controlled.
    Sandbox,
    /// Malicious caller: call arguments, callback return values and shared
    /// memory are attacker-controlled.
    Safebox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HintKind {
    ZeroPage,
    UnmappedProbe,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryHint {
    pub name: String,
    pub kind: HintKind,
    pub base: u64,
    pub length: u64,
}

/// Probe addresses used when no hint is declared. All lie far from any
/// region the simulated target maps.
pub const DEFAULT_PROBE_ADDRESSES: [u64; 3] = [0x0000_dead_0000_0000, 0x0000_7ffe_0000_0000, 0x0000_4141_4141_0000];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterfaceSpec {
    pub word_size_bits: u32,
    pub direction: Direction,
    pub components: Vec<Component>,
    pub functions: Vec<FunctionSig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub memory_map_hints: Vec<MemoryHint>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{path}: {reason}")]
pub struct ValidationError {
    pub path: String,
    pub reason: String,
}

impl ValidationError {
    fn new(path: impl Into<String>, reason: impl Into<String>) -> Self {
        ValidationError {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Position {
    TopLevel,
    Field,
    Pointee,
}

impl InterfaceSpec {
    pub fn word_bytes(&self) -> usize {
        (self.word_size_bits / 8) as usize
    }

    pub fn function(&self, symbol: &str) -> Option<&FunctionSig> {
        self.functions.iter().find(|f| f.symbol == symbol)
    }

    /// Declared API functions, callbacks excluded.
    pub fn api_functions(&self) -> impl Iterator<Item = &FunctionSig> {
        self.functions.iter().filter(|f| !f.is_callback)
    }

    pub fn malicious(&self) -> &Component {
        self.components
            .iter()
            .find(|c| c.role == ComponentRole::Malicious)
            .expect("validated spec has a malicious component")
    }

    pub fn component(&self, name: &str) -> Option<&Component> {
        self.components.iter().find(|c| c.name == name)
    }

    pub fn component_for_label(&self, label: &str) -> Option<&Component> {
        self.components.iter().find(|c| c.labels.iter().any(|l| l == label))
    }

    /// Component that implements callbacks handed across the interface.
    pub fn callback_owner(&self) -> &str {
        match self.direction {
            Direction::Sandbox => self
                .components
                .iter()
                .find(|c| c.role == ComponentRole::Victim)
                .map(|c| c.name.as_str())
                .unwrap_or(""),
            Direction::Safebox => &self.malicious().name,
        }
    }

    pub fn probe_addresses(&self) -> Vec<u64> {
        let hinted: Vec<u64> = self
            .memory_map_hints
            .iter()
            .filter(|h| h.kind == HintKind::UnmappedProbe)
            .map(|h| h.base)
            .collect();
        if hinted.is_empty() {
            DEFAULT_PROBE_ADDRESSES.to_vec()
        } else {
            hinted
        }
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.word_size_bits != 32 && self.word_size_bits != 64 {
            return Err(ValidationError::new(
                "word_size_bits",
                format!("unsupported word size {}", self.word_size_bits),
            ));
        }
        self.validate_components()?;
        if self.functions.is_empty() {
            return Err(ValidationError::new("functions", "interface declares no functions"));
        }
        let mut seen = BTreeSet::new();
        for (i, f) in self.functions.iter().enumerate() {
            let path = format!("functions[{i}]");
            if f.symbol.is_empty() {
                return Err(ValidationError::new(format!("{path}.symbol"), "empty symbol"));
            }
            if !seen.insert(f.symbol.as_str()) {
                return Err(ValidationError::new(
                    format!("{path}.symbol"),
                    format!("duplicate symbol `{}`", f.symbol),
                ));
            }
            if f.variadic {
                return Err(ValidationError::new(
                    path,
                    format!("variadic function `{}` is not supported", f.symbol),
                ));
            }
            if self.component(&f.owner).is_none() {
                return Err(ValidationError::new(
                    format!("{path}.owner"),
                    format!("unknown component `{}`", f.owner),
                ));
            }
            for (j, p) in f.params.iter().enumerate() {
                self.validate_descriptor(&format!("{path}.params[{j}].type"), &p.ty, Position::TopLevel)?;
            }
            if let Some(ret) = &f.return_type {
                self.validate_descriptor(&format!("{path}.return_type"), ret, Position::TopLevel)?;
            }
        }
        Ok(())
    }

    fn validate_components(&self) -> Result<(), ValidationError> {
        let mut names = BTreeSet::new();
        let mut labels: BTreeMap<&str, &str> = BTreeMap::new();
        for (i, c) in self.components.iter().enumerate() {
            let path = format!("components[{i}]");
            if !names.insert(c.name.as_str()) {
                return Err(ValidationError::new(path, format!("duplicate component `{}`", c.name)));
            }
            for label in &c.labels {
                if let Some(other) = labels.insert(label.as_str(), c.name.as_str()) {
                    return Err(ValidationError::new(
                        format!("{path}.labels"),
                        format!("label `{label}` already belongs to `{other}`"),
                    ));
                }
            }
        }
        let malicious = self
            .components
            .iter()
            .filter(|c| c.role == ComponentRole::Malicious)
            .count();
        if malicious != 1 {
            return Err(ValidationError::new(
                "components",
                format!("expected exactly one malicious component, found {malicious}"),
            ));
        }
        if !self.components.iter().any(|c| c.role == ComponentRole::Victim) {
            return Err(ValidationError::new("components", "no victim component"));
        }
        Ok(())
    }

    fn validate_descriptor(&self, path: &str, ty: &TypeDescriptor, pos: Position) -> Result<(), ValidationError> {
        let err = |reason: String| Err(ValidationError::new(path, reason));
        if ty.type_name.is_empty() {
            return err("empty type_name".into());
        }
        if ty.size_bits == 0 || !ty.size_bits.is_multiple_of(8) {
            return err(format!("size_bits {} is not a positive multiple of 8", ty.size_bits));
        }
        if ty.signed.is_some() && ty.kind != TypeKind::Integer {
            return err("`signed` is only valid on integers".into());
        }
        if ty.pointee.is_some() && ty.kind != TypeKind::AddressValue {
            return err("`pointee` is only valid on address values".into());
        }
        if !ty.fields.is_empty() && ty.kind != TypeKind::Aggregate {
            return err("`fields` is only valid on aggregates".into());
        }
        if ty.signature.is_some() && ty.kind != TypeKind::CallableRef {
            return err("`signature` is only valid on callable references".into());
        }
        match ty.kind {
            TypeKind::AddressValue | TypeKind::CallableRef => {
                if ty.size_bits != self.word_size_bits {
                    return err(format!(
                        "address-sized value has {} bits, word size is {}",
                        ty.size_bits, self.word_size_bits
                    ));
                }
            }
            TypeKind::Integer => {
                if !matches!(ty.size_bits, 8 | 16 | 32 | 64) {
                    return err(format!("unsupported integer width {}", ty.size_bits));
                }
            }
            TypeKind::Float => {
                if !matches!(ty.size_bits, 32 | 64) {
                    return err(format!("unsupported float width {}", ty.size_bits));
                }
            }
            TypeKind::TextString | TypeKind::RawBuffer => {
                if pos == Position::TopLevel && ty.size_bits != self.word_size_bits {
                    return err("string and buffer values crossing directly are word-sized references".into());
                }
            }
            TypeKind::Lock => {
                if pos == Position::TopLevel {
                    return err("lock may only appear as an aggregate field or pointee".into());
                }
            }
            TypeKind::Aggregate => {}
        }
        if let Some(p) = &ty.pointee {
            self.validate_descriptor(&format!("{path}.pointee"), p, Position::Pointee)?;
        }
        let size = ty.byte_size() as u64;
        let mut prev: Option<u32> = None;
        for (i, f) in ty.fields.iter().enumerate() {
            let fpath = format!("{path}.fields[{i}]");
            if let Some(prev) = prev {
                if f.offset <= prev {
                    return Err(ValidationError::new(fpath, "field offsets must be strictly increasing"));
                }
            }
            if f.offset as u64 + f.ty.byte_size() as u64 > size {
                return Err(ValidationError::new(
                    fpath,
                    format!("field `{}` does not fit in {size} bytes", f.name),
                ));
            }
            prev = Some(f.offset);
            self.validate_descriptor(&format!("{fpath}.type"), &f.ty, Position::Field)?;
        }
        if let Some(sig) = &ty.signature {
            for (j, p) in sig.params.iter().enumerate() {
                self.validate_descriptor(&format!("{path}.signature.params[{j}].type"), &p.ty, Position::TopLevel)?;
            }
            if let Some(ret) = &sig.return_type {
                self.validate_descriptor(&format!("{path}.signature.return_type"), ret, Position::TopLevel)?;
            }
        }
        Ok(())
    }
}

/// Reads a little-endian unsigned integer of up to eight bytes.
pub fn read_le(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .take(8)
        .enumerate()
        .fold(0u64, |acc, (i, b)| acc | (u64::from(*b) << (8 * i)))
}

pub fn write_le(value: u64, width: usize) -> Vec<u8> {
    (0..width)
        .map(|i| if i < 8 { (value >> (8 * i)) as u8 } else { 0 })
        .collect()
}

/// One value crossing the interface together with its descriptor.
#[derive(Debug, Clone, Copy)]
pub struct TypedValue<'a> {
    pub ty: &'a TypeDescriptor,
    pub bytes: &'a [u8],
}

/// Tracks callbacks known to the monitor. Seeded with the callbacks the
/// interface declares; further callbacks are registered the first time a
/// callable reference is seen in a crossing value.
#[derive(Debug, Clone, Default)]
pub struct CallbackRegistry {
    known: BTreeMap<String, FunctionSig>,
    /// Nested aggregates or pointees skipped because of the depth limit.
    pub truncated_traversals: usize,
}

impl CallbackRegistry {
    pub fn new(spec: &InterfaceSpec) -> Self {
        let known = spec
            .functions
            .iter()
            .filter(|f| f.is_callback)
            .map(|f| (f.symbol.clone(), f.clone()))
            .collect();
        CallbackRegistry {
            known,
            truncated_traversals: 0,
        }
    }

    pub fn get(&self, symbol: &str) -> Option<&FunctionSig> {
        self.known.get(symbol)
    }

    pub fn iter(&self) -> impl Iterator<Item = &FunctionSig> {
        self.known.values()
    }

    /// Registers every callable reference reachable from `args` and returns
    /// the signatures that were not known before.
    pub fn detect_callbacks(&mut self, args: &[TypedValue<'_>], spec: &InterfaceSpec) -> Vec<FunctionSig> {
        let mut found = Vec::new();
        for arg in args {
            self.walk(arg.ty, 0, &mut found);
        }
        let mut fresh = Vec::new();
        for callable in found {
            if self.known.contains_key(&callable.type_name) {
                continue;
            }
            let (params, return_type, low_confidence) = match &callable.signature {
                Some(sig) => (sig.params.clone(), sig.return_type.as_deref().cloned(), false),
                None => (Vec::new(), None, true),
            };
            let sig = FunctionSig {
                symbol: callable.type_name.clone(),
                params,
                return_type,
                return_role: None,
                is_callback: true,
                owner: spec.callback_owner().to_string(),
                variadic: false,
                low_confidence,
            };
            self.known.insert(sig.symbol.clone(), sig.clone());
            fresh.push(sig);
        }
        fresh
    }

    fn walk(&mut self, ty: &TypeDescriptor, depth: usize, found: &mut Vec<TypeDescriptor>) {
        match ty.kind {
            TypeKind::CallableRef => {
                if !found.iter().any(|f| f.type_name == ty.type_name) {
                    found.push(ty.clone());
                }
            }
            TypeKind::Aggregate => {
                for f in &ty.fields {
                    self.descend(&f.ty, depth, found);
                }
            }
            TypeKind::AddressValue => {
                if let Some(p) = &ty.pointee {
                    self.descend(p, depth, found);
                }
            }
            _ => {}
        }
    }

    fn descend(&mut self, ty: &TypeDescriptor, depth: usize, found: &mut Vec<TypeDescriptor>) {
        if depth + 1 > MAX_TRAVERSAL_DEPTH {
            self.truncated_traversals += 1;
        } else {
            self.walk(ty, depth + 1, found);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionLength {
    Bytes(u64),
    /// Strings and opaque buffers: the adapter measures the length at runtime.
    RuntimeResolved,
}

/// Memory reachable through a pointer that crossed the interface.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SharedRegion {
    pub base: u64,
    pub length: RegionLength,
    pub element: TypeDescriptor,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SharedBuffers {
    pub regions: Vec<SharedRegion>,
    pub truncated_traversals: usize,
}

/// Lists the buffers referenced by the pointers in `args`, in a stable
/// order. A region's index in the result is its region id on the wire.
pub fn infer_shared_buffers(args: &[TypedValue<'_>]) -> SharedBuffers {
    let mut out = SharedBuffers::default();
    for arg in args {
        collect_regions(arg.ty, Some(arg.bytes), true, 0, &mut out);
    }
    out
}

fn collect_regions(ty: &TypeDescriptor, bytes: Option<&[u8]>, top_level: bool, depth: usize, out: &mut SharedBuffers) {
    let base = || bytes.map(read_le).unwrap_or(0);
    match ty.kind {
        TypeKind::AddressValue => {
            if let Some(pointee) = &ty.pointee {
                let length = match pointee.kind {
                    TypeKind::TextString | TypeKind::RawBuffer => RegionLength::RuntimeResolved,
                    _ => RegionLength::Bytes(pointee.byte_size() as u64),
                };
                out.regions.push(SharedRegion {
                    base: base(),
                    length,
                    element: (**pointee).clone(),
                });
            }
        }
        TypeKind::TextString | TypeKind::RawBuffer if top_level => {
            out.regions.push(SharedRegion {
                base: base(),
                length: RegionLength::RuntimeResolved,
                element: ty.clone(),
            });
        }
        TypeKind::Aggregate => {
            for f in &ty.fields {
                if depth + 1 > MAX_TRAVERSAL_DEPTH {
                    out.truncated_traversals += 1;
                    continue;
                }
                let start = f.offset as usize;
                let field_bytes = bytes.and_then(|b| b.get(start..start + f.ty.byte_size()));
                collect_regions(&f.ty, field_bytes, false, depth + 1, out);
            }
        }
        _ => {}
    }
}
