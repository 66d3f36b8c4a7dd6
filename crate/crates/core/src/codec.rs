//! Canonical byte encoding shared by every signed or transmitted value.
//!
//! Every primitive is written as a field: a 4-byte big-endian length
//! followed by that many bytes. Composite values write their fields in
//! declared order. Lists write their element count (as a `u64` field)
//! followed by each element. Optional values write a one-byte presence tag.
//!
//! Decoding is strict: every byte string accepted by [`Decode`] is the
//! encoding of exactly one value, so `decode(b) == decode(b')` implies
//! `b == b'`. Sets must arrive strictly ascending, booleans must be 0 or 1,
//! and trailing bytes are rejected. Signature checks rely on this.

use std::collections::BTreeSet;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("unexpected end of input: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },

    #[error("field has length {actual}, expected {expected}")]
    BadLength { expected: usize, actual: usize },

    #[error("invalid tag {tag} for {type_name}")]
    InvalidTag { tag: u8, type_name: &'static str },

    #[error("field is not valid UTF-8")]
    InvalidUtf8,

    #[error("set elements are not strictly ascending at index {index}")]
    Unsorted { index: usize },

    #[error("{0} trailing bytes after value")]
    TrailingBytes(usize),

    #[error("domain label mismatch: expected {expected}")]
    WrongLabel { expected: &'static str },

    #[error("invalid value for {0}")]
    InvalidValue(&'static str),
}

/// Append-only canonical writer.
#[derive(Debug, Default, Clone)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put_field(&mut self, bytes: &[u8]) {
        let len = u32::try_from(bytes.len()).expect("field longer than u32::MAX");
        self.buf.extend_from_slice(&len.to_be_bytes());
        self.buf.extend_from_slice(bytes);
    }

    pub fn put_u64(&mut self, v: u64) {
        self.put_field(&v.to_be_bytes());
    }

    pub fn put_u8(&mut self, v: u8) {
        self.put_field(&[v]);
    }

    pub fn put<T: Encode + ?Sized>(&mut self, value: &T) {
        value.encode_to(self);
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

/// Cursor over canonical bytes.
#[derive(Debug)]
pub struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf }
    }

    pub fn field(&mut self) -> Result<&'a [u8], CodecError> {
        if self.buf.len() < 4 {
            return Err(CodecError::Truncated {
                need: 4,
                have: self.buf.len(),
            });
        }
        let (len, rest) = self.buf.split_at(4);
        let len = u32::from_be_bytes(len.try_into().unwrap()) as usize;
        if rest.len() < len {
            return Err(CodecError::Truncated {
                need: len,
                have: rest.len(),
            });
        }
        let (field, rest) = rest.split_at(len);
        self.buf = rest;
        Ok(field)
    }

    pub fn fixed<const N: usize>(&mut self) -> Result<[u8; N], CodecError> {
        let f = self.field()?;
        f.try_into().map_err(|_| CodecError::BadLength {
            expected: N,
            actual: f.len(),
        })
    }

    pub fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_be_bytes(self.fixed::<8>()?))
    }

    pub fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.fixed::<1>()?[0])
    }

    pub fn get<T: Decode>(&mut self) -> Result<T, CodecError> {
        T::decode_from(self)
    }

    /// Reads a list length, bounded by the bytes left so that a forged count
    /// cannot trigger a huge allocation.
    pub fn count(&mut self) -> Result<usize, CodecError> {
        let n = self.u64()?;
        // every element occupies at least one 4-byte length prefix
        if n > (self.buf.len() / 4) as u64 {
            return Err(CodecError::Truncated {
                need: (n as usize).saturating_mul(4),
                have: self.buf.len(),
            });
        }
        Ok(n as usize)
    }

    pub fn remaining(&self) -> usize {
        self.buf.len()
    }

    pub fn expect_label(&mut self, label: &'static str) -> Result<(), CodecError> {
        if self.field()? != label.as_bytes() {
            return Err(CodecError::WrongLabel { expected: label });
        }
        Ok(())
    }
}

pub trait Encode {
    fn encode_to(&self, w: &mut Writer);

    fn canonical_encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.encode_to(&mut w);
        w.into_bytes()
    }
}

pub trait Decode: Sized {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError>;

    fn canonical_decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        let v = Self::decode_from(&mut r)?;
        match r.remaining() {
            0 => Ok(v),
            n => Err(CodecError::TrailingBytes(n)),
        }
    }
}

impl Encode for u64 {
    fn encode_to(&self, w: &mut Writer) {
        w.put_u64(*self);
    }
}

impl Decode for u64 {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        r.u64()
    }
}

impl Encode for u32 {
    fn encode_to(&self, w: &mut Writer) {
        w.put_field(&self.to_be_bytes());
    }
}

impl Decode for u32 {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(u32::from_be_bytes(r.fixed::<4>()?))
    }
}

impl Encode for bool {
    fn encode_to(&self, w: &mut Writer) {
        w.put_u8(u8::from(*self));
    }
}

impl Decode for bool {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        match r.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            tag => Err(CodecError::InvalidTag {
                tag,
                type_name: "bool",
            }),
        }
    }
}

impl Encode for u8 {
    fn encode_to(&self, w: &mut Writer) {
        w.put_u8(*self);
    }
}

impl Decode for u8 {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        r.u8()
    }
}

impl Encode for str {
    fn encode_to(&self, w: &mut Writer) {
        w.put_field(self.as_bytes());
    }
}

impl Encode for String {
    fn encode_to(&self, w: &mut Writer) {
        w.put_field(self.as_bytes());
    }
}

impl Decode for String {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        let f = r.field()?;
        String::from_utf8(f.to_vec()).map_err(|_| CodecError::InvalidUtf8)
    }
}

impl<const N: usize> Encode for [u8; N] {
    fn encode_to(&self, w: &mut Writer) {
        w.put_field(self);
    }
}

impl<const N: usize> Decode for [u8; N] {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        r.fixed::<N>()
    }
}

/// Raw byte strings. `Vec<u8>` would otherwise go through the generic list
/// impl and spend a length prefix per byte.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Bytes(pub Vec<u8>);

impl Encode for Bytes {
    fn encode_to(&self, w: &mut Writer) {
        w.put_field(&self.0);
    }
}

impl Decode for Bytes {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(Bytes(r.field()?.to_vec()))
    }
}

impl<T: Encode> Encode for Option<T> {
    fn encode_to(&self, w: &mut Writer) {
        match self {
            None => w.put_u8(0),
            Some(v) => {
                w.put_u8(1);
                v.encode_to(w);
            }
        }
    }
}

impl<T: Decode> Decode for Option<T> {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        match r.u8()? {
            0 => Ok(None),
            1 => Ok(Some(T::decode_from(r)?)),
            tag => Err(CodecError::InvalidTag {
                tag,
                type_name: "Option",
            }),
        }
    }
}

impl<T: Encode> Encode for Vec<T> {
    fn encode_to(&self, w: &mut Writer) {
        w.put_u64(self.len() as u64);
        for item in self {
            item.encode_to(w);
        }
    }
}

impl<T: Decode> Decode for Vec<T> {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        let n = r.count()?;
        (0..n).map(|_| T::decode_from(r)).collect()
    }
}

impl<T: Encode> Encode for BTreeSet<T> {
    fn encode_to(&self, w: &mut Writer) {
        w.put_u64(self.len() as u64);
        for item in self {
            item.encode_to(w);
        }
    }
}

impl<T: Decode + Ord> Decode for BTreeSet<T> {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        let n = r.count()?;
        let mut out = BTreeSet::new();
        let mut last: Option<T> = None;
        for index in 0..n {
            let item = T::decode_from(r)?;
            if let Some(prev) = last.take() {
                if prev >= item {
                    return Err(CodecError::Unsorted { index });
                }
                out.insert(prev);
            }
            last = Some(item);
        }
        out.extend(last);
        Ok(out)
    }
}

impl<A: Encode, B: Encode> Encode for (A, B) {
    fn encode_to(&self, w: &mut Writer) {
        self.0.encode_to(w);
        self.1.encode_to(w);
    }
}

impl<A: Decode, B: Decode> Decode for (A, B) {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok((A::decode_from(r)?, B::decode_from(r)?))
    }
}

/// Implements [`Encode`]/[`Decode`] for a struct by writing its fields in the
/// listed order. The `signed` form additionally derives `signed_bytes()`:
/// the domain label followed by every field except the trailing signature.
#[macro_export]
macro_rules! canonical_struct {
    ($ty:ident { $($field:ident),+ $(,)? }) => {
        impl $crate::codec::Encode for $ty {
            fn encode_to(&self, w: &mut $crate::codec::Writer) {
                $( w.put(&self.$field); )+
            }
        }
        impl $crate::codec::Decode for $ty {
            fn decode_from(
                r: &mut $crate::codec::Reader<'_>,
            ) -> Result<Self, $crate::codec::CodecError> {
                Ok(Self { $( $field: r.get()?, )+ })
            }
        }
    };
    ($ty:ident = $label:literal { $($field:ident),+ $(,)? } signed $sig:ident) => {
        impl $ty {
            pub const DOMAIN_LABEL: &'static str = $label;

            /// Bytes covered by the signature.
            pub fn signed_bytes(&self) -> Vec<u8> {
                let mut w = $crate::codec::Writer::new();
                w.put_field($label.as_bytes());
                $( w.put(&self.$field); )+
                w.into_bytes()
            }
        }
        impl $crate::codec::Encode for $ty {
            fn encode_to(&self, w: &mut $crate::codec::Writer) {
                w.put_field($label.as_bytes());
                $( w.put(&self.$field); )+
                w.put(&self.$sig);
            }
        }
        impl $crate::codec::Decode for $ty {
            fn decode_from(
                r: &mut $crate::codec::Reader<'_>,
            ) -> Result<Self, $crate::codec::CodecError> {
                r.expect_label($label)?;
                Ok(Self { $( $field: r.get()?, )+ $sig: r.get()? })
            }
        }
    };
}

/// Implements the codec for a field-less enum as a one-byte tag.
#[macro_export]
macro_rules! canonical_tag_enum {
    ($ty:ident { $($variant:ident = $tag:literal),+ $(,)? }) => {
        impl $crate::codec::Encode for $ty {
            fn encode_to(&self, w: &mut $crate::codec::Writer) {
                w.put_u8(match self { $( $ty::$variant => $tag, )+ });
            }
        }
        impl $crate::codec::Decode for $ty {
            fn decode_from(
                r: &mut $crate::codec::Reader<'_>,
            ) -> Result<Self, $crate::codec::CodecError> {
                match r.u8()? {
                    $( $tag => Ok($ty::$variant), )+
                    tag => Err($crate::codec::CodecError::InvalidTag {
                        tag,
                        type_name: stringify!($ty),
                    }),
                }
            }
        }
    };
}
