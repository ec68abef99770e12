//! Typing of the raw values carried by a crossing event.
//!
//! Each alterable value (an argument, a return value, a shared-memory
//! snapshot) is split into leaf elements so strategies can pick one and know
//! what kind of data it holds.

use alloc::string::String;
use alloc::vec::Vec;

use crate::iface::{
    infer_shared_buffers, CallbackRegistry, FunctionSig, InterfaceSpec, RegionLength, SharedBuffers, TypeDescriptor,
    TypeKind, TypedValue, ValueRole, MAX_TRAVERSAL_DEPTH,
};
use crate::wire::{Crossing, Locus};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    /// Address-sized reference: data pointers, strings, buffers, callables.
    Pointer,
    Integer {
        signed: bool,
    },
    /// Opaque bytes: floats, inline strings and buffers, padding.
    Bytes,
    Lock,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Element {
    pub offset: usize,
    pub len: usize,
    pub shape: Shape,
    pub type_name: String,
    pub role: ValueRole,
}

/// One alterable value with its byte image and leaf elements.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slot {
    pub locus: Locus,
    pub bytes: Vec<u8>,
    pub elements: Vec<Element>,
}

/// Signature governing a crossing: the API function for call events, the
/// callback for callback events.
pub fn signature_for<'a>(
    crossing: &Crossing,
    spec: &'a InterfaceSpec,
    registry: &'a CallbackRegistry,
) -> Option<&'a FunctionSig> {
    if crossing.kind.is_callback() {
        registry
            .get(&crossing.symbol)
            .or_else(|| spec.function(&crossing.symbol))
    } else {
        spec.function(&crossing.symbol).filter(|f| !f.is_callback)
    }
}

/// Descriptor and role of the value at `locus`. Values the signature does
/// not describe are treated as one opaque word.
pub fn value_type(locus: Locus, sig: Option<&FunctionSig>, spec: &InterfaceSpec) -> (TypeDescriptor, ValueRole) {
    let opaque = || (TypeDescriptor::opaque_word(spec.word_size_bits), ValueRole::Other);
    let Some(sig) = sig else { return opaque() };
    match locus {
        Locus::Arg(i) | Locus::CallbackArg(i) => match sig.params.get(i as usize) {
            Some(p) => (p.ty.clone(), sig.param_role(i as usize)),
            None => opaque(),
        },
        Locus::ReturnValue | Locus::CallbackReturn => match &sig.return_type {
            Some(t) => (t.clone(), sig.return_role()),
            None => opaque(),
        },
        Locus::SharedByte { .. } => opaque(),
    }
}

/// All values in the event paired with their descriptors, in event order.
pub fn typed_values(
    crossing: &Crossing,
    spec: &InterfaceSpec,
    registry: &CallbackRegistry,
) -> Vec<(TypeDescriptor, Vec<u8>)> {
    let sig = signature_for(crossing, spec, registry);
    crossing
        .values
        .iter()
        .filter(|(l, _)| !matches!(l, Locus::SharedByte { .. }))
        .map(|(l, v)| (value_type(*l, sig, spec).0, v.clone()))
        .collect()
}

pub fn shared_buffers(values: &[(TypeDescriptor, Vec<u8>)]) -> SharedBuffers {
    let typed: Vec<TypedValue<'_>> = values.iter().map(|(ty, bytes)| TypedValue { ty, bytes }).collect();
    infer_shared_buffers(&typed)
}

/// Splits every value and snapshot of `crossing` into slots.
pub fn slots(crossing: &Crossing, spec: &InterfaceSpec, registry: &CallbackRegistry) -> Vec<Slot> {
    let sig = signature_for(crossing, spec, registry);
    let mut out = Vec::new();
    for (locus, bytes) in &crossing.values {
        let (ty, role) = value_type(*locus, sig, spec);
        out.push(Slot {
            locus: *locus,
            bytes: bytes.clone(),
            elements: top_level_elements(&ty, role, bytes.len()),
        });
    }
    let regions = shared_buffers(&typed_values(crossing, spec, registry)).regions;
    for snap in &crossing.snapshots {
        let elements = match regions.get(snap.region as usize) {
            Some(r) if r.length != RegionLength::RuntimeResolved => pointee_elements(&r.element, snap.bytes.len()),
            Some(r) => whole_bytes(&r.element.type_name, snap.bytes.len()),
            None => whole_bytes("shared", snap.bytes.len()),
        };
        out.push(Slot {
            locus: Locus::SharedByte {
                region: snap.region,
                offset: 0,
            },
            bytes: snap.bytes.clone(),
            elements,
        });
    }
    out
}

fn whole_bytes(type_name: &str, len: usize) -> Vec<Element> {
    if len == 0 {
        return Vec::new();
    }
    alloc::vec![Element {
        offset: 0,
        len,
        shape: Shape::Bytes,
        type_name: type_name.into(),
        role: ValueRole::Other,
    }]
}

fn top_level_elements(ty: &TypeDescriptor, role: ValueRole, len: usize) -> Vec<Element> {
    let mut out = Vec::new();
    match ty.kind {
        TypeKind::Aggregate => flatten(ty, 0, 0, &mut out),
        TypeKind::AddressValue | TypeKind::CallableRef | TypeKind::TextString | TypeKind::RawBuffer => {
            out.push(leaf(ty, 0, Shape::Pointer, role))
        }
        _ => out.push(leaf(ty, 0, scalar_shape(ty), role)),
    }
    clip(out, len)
}

fn pointee_elements(ty: &TypeDescriptor, len: usize) -> Vec<Element> {
    let mut out = Vec::new();
    match ty.kind {
        TypeKind::Aggregate => flatten(ty, 0, 0, &mut out),
        TypeKind::AddressValue | TypeKind::CallableRef => out.push(leaf(ty, 0, Shape::Pointer, ValueRole::Other)),
        _ => out.push(leaf(ty, 0, scalar_shape(ty), ValueRole::Other)),
    }
    clip(out, len)
}

fn scalar_shape(ty: &TypeDescriptor) -> Shape {
    match ty.kind {
        TypeKind::Integer => Shape::Integer { signed: ty.is_signed() },
        TypeKind::Lock => Shape::Lock,
        TypeKind::AddressValue | TypeKind::CallableRef => Shape::Pointer,
        _ => Shape::Bytes,
    }
}

fn leaf(ty: &TypeDescriptor, offset: usize, shape: Shape, role: ValueRole) -> Element {
    Element {
        offset,
        len: ty.byte_size(),
        shape,
        type_name: ty.type_name.clone(),
        role,
    }
}

fn flatten(ty: &TypeDescriptor, base: usize, depth: usize, out: &mut Vec<Element>) {
    let mut cursor = base;
    let end = base + ty.byte_size();
    let gap = |from: usize, to: usize, out: &mut Vec<Element>| {
        if to > from {
            out.push(Element {
                offset: from,
                len: to - from,
                shape: Shape::Bytes,
                type_name: ty.type_name.clone(),
                role: ValueRole::Other,
            });
        }
    };
    for f in &ty.fields {
        let at = base + f.offset as usize;
        gap(cursor, at, out);
        let role = ValueRole::resolve(f.role, &f.name);
        match f.ty.kind {
            TypeKind::Aggregate if depth + 1 < MAX_TRAVERSAL_DEPTH => flatten(&f.ty, at, depth + 1, out),
            TypeKind::Aggregate | TypeKind::Float | TypeKind::TextString | TypeKind::RawBuffer => {
                out.push(leaf(&f.ty, at, Shape::Bytes, role))
            }
            _ => out.push(leaf(&f.ty, at, scalar_shape(&f.ty), role)),
        }
        cursor = at + f.ty.byte_size();
    }
    gap(cursor, end, out);
}

fn clip(elements: Vec<Element>, len: usize) -> Vec<Element> {
    elements
        .into_iter()
        .filter(|e| e.offset < len)
        .map(|mut e| {
            e.len = e.len.min(len - e.offset);
            e
        })
        .filter(|e| e.len > 0)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::iface::{Component, ComponentRole, Direction, Field, Param};
    use crate::wire::CrossingKind;
    use alloc::vec;

    fn spec() -> InterfaceSpec {
        let header = TypeDescriptor::aggregate(
            "hdr",
            16 * 8,
            vec![
                Field {
                    name: "data".into(),
                    offset: 0,
                    ty: TypeDescriptor::address("u8*", 64, None),
                    role: None,
                },
                Field {
                    name: "len".into(),
                    offset: 8,
                    ty: TypeDescriptor::integer("u32", 32, false),
                    role: None,
                },
            ],
        );
        InterfaceSpec {
            word_size_bits: 64,
            direction: Direction::Sandbox,
            components: vec![
                Component {
                    name: "app".into(),
                    role: ComponentRole::Victim,
                    labels: vec!["app".into()],
                },
                Component {
                    name: "lib".into(),
                    role: ComponentRole::Malicious,
                    labels: vec!["lib".into()],
                },
            ],
            functions: vec![FunctionSig {
                symbol: "get".into(),
                params: vec![Param {
                    name: "out".into(),
                    ty: TypeDescriptor::address("hdr*", 64, Some(header)),
                    role: None,
                }],
                return_type: Some(TypeDescriptor::integer("int", 32, true)),
                return_role: None,
                is_callback: false,
                owner: "lib".into(),
                variadic: false,
                low_confidence: false,
            }],
            memory_map_hints: vec![],
        }
    }

    #[test]
    fn aggregate_snapshot_flattens_with_padding() {
        let spec = spec();
        let reg = CallbackRegistry::new(&spec);
        let c = Crossing {
            kind: CrossingKind::CallExit,
            crossing_index: 0,
            symbol: "get".into(),
            caller: "main".into(),
            values: vec![
                (Locus::Arg(0), 0x1000u64.to_le_bytes().to_vec()),
                (Locus::ReturnValue, vec![0; 4]),
            ],
            snapshots: vec![crate::wire::Snapshot {
                region: 0,
                base: 0x1000,
                bytes: vec![0; 16],
            }],
        };
        let s = slots(&c, &spec, &reg);
        assert_eq!(s.len(), 3);
        let shared = &s[2];
        let shapes: Vec<_> = shared
            .elements
            .iter()
            .map(|e| (e.offset, e.len, e.shape, e.role))
            .collect();
        assert_eq!(
            shapes,
            vec![
                (0, 8, Shape::Pointer, ValueRole::Other),
                (8, 4, Shape::Integer { signed: false }, ValueRole::Size),
                (12, 4, Shape::Bytes, ValueRole::Other),
            ]
        );
        assert_eq!(s[1].elements[0].shape, Shape::Integer { signed: true });
    }

    #[test]
    fn unknown_symbol_values_are_opaque_words() {
        let spec = spec();
        let reg = CallbackRegistry::new(&spec);
        let c = Crossing {
            kind: CrossingKind::CallbackEntry,
            crossing_index: 3,
            symbol: "mystery".into(),
            caller: String::new(),
            values: vec![(Locus::CallbackArg(0), vec![1; 8])],
            snapshots: vec![],
        };
        let s = slots(&c, &spec, &reg);
        assert_eq!(s[0].elements[0].shape, Shape::Pointer);
        assert_eq!(s[0].elements[0].len, 8);
    }
}
