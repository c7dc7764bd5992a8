//! Element types and their datatype descriptors.
//!
//! The mapping from a Rust element type to its descriptor is a trait constant,
//! so it is resolved at compile time. Types outside the five primitive kinds
//! do not implement [`Element`] and are rejected by the compiler.

use std::borrow::Cow;
use std::fmt;

/// Primitive element kinds that can travel in a message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum DatatypeKind {
    Byte = 0,
    Int32 = 1,
    Int64 = 2,
    Float32 = 3,
    Float64 = 4,
}

impl DatatypeKind {
    pub const ALL: [DatatypeKind; 5] = [
        DatatypeKind::Byte,
        DatatypeKind::Int32,
        DatatypeKind::Int64,
        DatatypeKind::Float32,
        DatatypeKind::Float64,
    ];

    /// Bytes per element.
    pub const fn extent(self) -> usize {
        match self {
            DatatypeKind::Byte => 1,
            DatatypeKind::Int32 | DatatypeKind::Float32 => 4,
            DatatypeKind::Int64 | DatatypeKind::Float64 => 8,
        }
    }

    /// Wire code.
    pub const fn code(self) -> u8 {
        self as u8
    }

    pub const fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DatatypeKind::Byte),
            1 => Some(DatatypeKind::Int32),
            2 => Some(DatatypeKind::Int64),
            3 => Some(DatatypeKind::Float32),
            4 => Some(DatatypeKind::Float64),
            _ => None,
        }
    }

    pub const fn name(self) -> &'static str {
        match self {
            DatatypeKind::Byte => "BYTE",
            DatatypeKind::Int32 => "INT32",
            DatatypeKind::Int64 => "INT64",
            DatatypeKind::Float32 => "FLOAT32",
            DatatypeKind::Float64 => "FLOAT64",
        }
    }
}

impl fmt::Display for DatatypeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Kind plus extent; `extent == kind.extent()` always holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DatatypeDescriptor {
    pub kind: DatatypeKind,
    pub extent: usize,
}

impl DatatypeDescriptor {
    pub const fn of_kind(kind: DatatypeKind) -> Self {
        DatatypeDescriptor {
            kind,
            extent: kind.extent(),
        }
    }
}

mod sealed {
    pub trait Sealed {}
}

/// A primitive element type that maps onto a [`DatatypeDescriptor`].
pub trait Element: sealed::Sealed + bytemuck::Pod + PartialEq + fmt::Debug + 'static {
    const DATATYPE: DatatypeDescriptor;
}

macro_rules! element {
    ($t:ty, $kind:ident) => {
        impl sealed::Sealed for $t {}
        impl Element for $t {
            const DATATYPE: DatatypeDescriptor = DatatypeDescriptor::of_kind(DatatypeKind::$kind);
        }
    };
}

element!(u8, Byte);
element!(i32, Int32);
element!(i64, Int64);
element!(f32, Float32);
element!(f64, Float64);

/// Descriptor for element type `T`, evaluated at compile time.
pub const fn datatype_of<T: Element>() -> DatatypeDescriptor {
    T::DATATYPE
}

/// Little-endian payload bytes for a run of elements. Borrows on
/// little-endian hosts.
pub(crate) fn to_wire_bytes<T: Element>(elems: &[T]) -> Cow<'_, [u8]> {
    let raw: &[u8] = bytemuck::cast_slice(elems);
    if cfg!(target_endian = "little") {
        Cow::Borrowed(raw)
    } else {
        let mut owned = raw.to_vec();
        swap_elements(&mut owned, T::DATATYPE.extent);
        Cow::Owned(owned)
    }
}

/// Copies little-endian payload bytes into a native-order element buffer
/// viewed as raw bytes.
pub(crate) fn copy_from_wire(src: &[u8], dst: &mut [u8], extent: usize) {
    dst[..src.len()].copy_from_slice(src);
    if cfg!(target_endian = "big") {
        swap_elements(&mut dst[..src.len()], extent);
    }
}

fn swap_elements(bytes: &mut [u8], extent: usize) {
    if extent > 1 {
        for chunk in bytes.chunks_exact_mut(extent) {
            chunk.reverse();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descriptors_match_kinds() {
        assert_eq!(datatype_of::<f64>(), DatatypeDescriptor { kind: DatatypeKind::Float64, extent: 8 });
        assert_eq!(datatype_of::<u8>(), DatatypeDescriptor { kind: DatatypeKind::Byte, extent: 1 });
        assert_eq!(datatype_of::<i32>().extent, 4);
        assert_eq!(datatype_of::<i64>().extent, 8);
        assert_eq!(datatype_of::<f32>().extent, 4);
        for kind in DatatypeKind::ALL {
            assert_eq!(DatatypeKind::from_code(kind.code()), Some(kind));
            assert_eq!(DatatypeDescriptor::of_kind(kind).extent, kind.extent());
        }
        assert_eq!(DatatypeKind::from_code(5), None);
    }

    #[test]
    fn int32_span_payload_is_four_bytes_per_element() {
        for len in [0usize, 1, 7, 1000] {
            let v: Vec<i32> = (0..len as i32).collect();
            assert_eq!(to_wire_bytes(&v).len(), 4 * len);
        }
    }

    #[test]
    fn wire_bytes_are_little_endian() {
        let v = [0x0102_0304i32, -1];
        assert_eq!(&*to_wire_bytes(&v), &[4, 3, 2, 1, 0xff, 0xff, 0xff, 0xff]);
        let mut out = [0i32; 2];
        copy_from_wire(&to_wire_bytes(&v), bytemuck::cast_slice_mut(&mut out), 4);
        assert_eq!(out, v);
    }
}
