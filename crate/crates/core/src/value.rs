// SPDX-License-Identifier: Apache-2.0

//! Tagged argument values and the slot memory that calls operate on.
//!
//! A [`Memory`] is the client's view of the untrusted buffers referenced by
//! call frames and execution graphs. Each buffer has a single [`TypeTag`];
//! a scalar variable is a buffer of length one. The memory is moved into the
//! shared job slot for the duration of a call and handed back afterwards.

use std::fmt;

use thiserror::Error;

/// Type tag of an argument slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TypeTag {
    /// `'d'`: signed integer.
    Int,
    /// `'u'`: unsigned integer.
    UInt,
    /// `'f'`: floating point.
    Float,
    /// `'b'`: boolean.
    Bool,
    /// `'p'`: opaque handle.
    Handle,
}

impl TypeTag {
    pub fn as_char(self) -> char {
        match self {
            TypeTag::Int => 'd',
            TypeTag::UInt => 'u',
            TypeTag::Float => 'f',
            TypeTag::Bool => 'b',
            TypeTag::Handle => 'p',
        }
    }

    pub fn from_char(c: char) -> Option<TypeTag> {
        match c {
            'd' => Some(TypeTag::Int),
            'u' => Some(TypeTag::UInt),
            'f' => Some(TypeTag::Float),
            'b' => Some(TypeTag::Bool),
            'p' => Some(TypeTag::Handle),
            _ => None,
        }
    }

    pub fn is_integer(self) -> bool {
        matches!(self, TypeTag::Int | TypeTag::UInt)
    }

    /// Zero value of this tag.
    pub fn zero(self) -> Value {
        match self {
            TypeTag::Int => Value::Int(0),
            TypeTag::UInt => Value::UInt(0),
            TypeTag::Float => Value::Float(0.0),
            TypeTag::Bool => Value::Bool(false),
            TypeTag::Handle => Value::Handle(0),
        }
    }
}

impl fmt::Display for TypeTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

impl TryFrom<char> for TypeTag {
    type Error = ValueError;

    fn try_from(c: char) -> Result<Self, Self::Error> {
        TypeTag::from_char(c).ok_or(ValueError::UnknownTag(c))
    }
}

/// A single tagged value stored in a slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Value {
    Int(i64),
    UInt(u64),
    Float(f64),
    Bool(bool),
    Handle(u64),
}

impl Value {
    pub fn tag(&self) -> TypeTag {
        match self {
            Value::Int(_) => TypeTag::Int,
            Value::UInt(_) => TypeTag::UInt,
            Value::Float(_) => TypeTag::Float,
            Value::Bool(_) => TypeTag::Bool,
            Value::Handle(_) => TypeTag::Handle,
        }
    }

    /// Canonical little-endian encoding (8 bytes, 1 for booleans).
    pub fn to_le_bytes(&self) -> Vec<u8> {
        match *self {
            Value::Int(v) => v.to_le_bytes().to_vec(),
            Value::UInt(v) | Value::Handle(v) => v.to_le_bytes().to_vec(),
            Value::Float(v) => v.to_bits().to_le_bytes().to_vec(),
            Value::Bool(v) => vec![v as u8],
        }
    }

    /// Inverse of [`Value::to_le_bytes`].
    pub fn from_le_bytes(tag: TypeTag, bytes: &[u8]) -> Result<Value, ValueError> {
        let word = |b: &[u8]| -> Result<[u8; 8], ValueError> {
            b.try_into().map_err(|_| ValueError::Encoding { tag, len: b.len() })
        };
        Ok(match tag {
            TypeTag::Int => Value::Int(i64::from_le_bytes(word(bytes)?)),
            TypeTag::UInt => Value::UInt(u64::from_le_bytes(word(bytes)?)),
            TypeTag::Handle => Value::Handle(u64::from_le_bytes(word(bytes)?)),
            TypeTag::Float => Value::Float(f64::from_bits(u64::from_le_bytes(word(bytes)?))),
            TypeTag::Bool => match bytes {
                [0] => Value::Bool(false),
                [1] => Value::Bool(true),
                _ => return Err(ValueError::Encoding { tag, len: bytes.len() }),
            },
        })
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(v) => write!(f, "{v}"),
            Value::UInt(v) => write!(f, "{v}"),
            Value::Float(v) => write!(f, "{v}"),
            Value::Bool(v) => write!(f, "{v}"),
            Value::Handle(v) => write!(f, "#{v}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ValueError {
    #[error("unknown type tag {0:?}")]
    UnknownTag(char),
    #[error("slot {0} does not exist")]
    NoSuchSlot(SlotId),
    #[error("slot {slot} index {index} out of bounds (len {len})")]
    OutOfBounds { slot: SlotId, index: usize, len: usize },
    #[error("slot {slot} has tag '{found}', expected '{expected}'")]
    TagMismatch { slot: SlotId, expected: TypeTag, found: TypeTag },
    #[error("cannot decode {len} bytes as '{tag}'")]
    Encoding { tag: TypeTag, len: usize },
}

/// Reference to one buffer in a [`Memory`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SlotId(pub u32);

impl fmt::Display for SlotId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Buffer {
    tag: TypeTag,
    data: Vec<Value>,
}

/// Client-owned argument buffers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Memory {
    buffers: Vec<Buffer>,
}

impl Memory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Allocates a scalar variable.
    pub fn var(&mut self, value: Value) -> SlotId {
        self.push(value.tag(), vec![value])
    }

    pub fn var_i64(&mut self, v: i64) -> SlotId {
        self.var(Value::Int(v))
    }

    pub fn var_u64(&mut self, v: u64) -> SlotId {
        self.var(Value::UInt(v))
    }

    /// Allocates a vector of `len` zero values.
    pub fn vector(&mut self, tag: TypeTag, len: usize) -> SlotId {
        self.push(tag, vec![tag.zero(); len])
    }

    pub fn vector_i64(&mut self, values: &[i64]) -> SlotId {
        self.push(TypeTag::Int, values.iter().map(|&v| Value::Int(v)).collect())
    }

    pub fn vector_u64(&mut self, values: &[u64]) -> SlotId {
        self.push(TypeTag::UInt, values.iter().map(|&v| Value::UInt(v)).collect())
    }

    /// Allocates a vector from values that all carry `tag`.
    pub fn vector_from(&mut self, tag: TypeTag, values: Vec<Value>) -> Result<SlotId, ValueError> {
        let next = SlotId(self.buffers.len() as u32);
        if let Some(bad) = values.iter().find(|v| v.tag() != tag) {
            return Err(ValueError::TagMismatch { slot: next, expected: tag, found: bad.tag() });
        }
        Ok(self.push(tag, values))
    }

    fn push(&mut self, tag: TypeTag, data: Vec<Value>) -> SlotId {
        self.buffers.push(Buffer { tag, data });
        SlotId(self.buffers.len() as u32 - 1)
    }

    pub fn slot_count(&self) -> usize {
        self.buffers.len()
    }

    fn buffer(&self, slot: SlotId) -> Result<&Buffer, ValueError> {
        self.buffers.get(slot.0 as usize).ok_or(ValueError::NoSuchSlot(slot))
    }

    fn buffer_mut(&mut self, slot: SlotId) -> Result<&mut Buffer, ValueError> {
        self.buffers.get_mut(slot.0 as usize).ok_or(ValueError::NoSuchSlot(slot))
    }

    pub fn tag(&self, slot: SlotId) -> Result<TypeTag, ValueError> {
        Ok(self.buffer(slot)?.tag)
    }

    pub fn len(&self, slot: SlotId) -> Result<usize, ValueError> {
        Ok(self.buffer(slot)?.data.len())
    }

    pub fn get(&self, slot: SlotId) -> Result<Value, ValueError> {
        self.get_at(slot, 0)
    }

    pub fn get_at(&self, slot: SlotId, index: usize) -> Result<Value, ValueError> {
        let buf = self.buffer(slot)?;
        buf.data.get(index).copied().ok_or(ValueError::OutOfBounds { slot, index, len: buf.data.len() })
    }

    pub fn set(&mut self, slot: SlotId, value: Value) -> Result<(), ValueError> {
        self.set_at(slot, 0, value)
    }

    pub fn set_at(&mut self, slot: SlotId, index: usize, value: Value) -> Result<(), ValueError> {
        let buf = self.buffer_mut(slot)?;
        if buf.tag != value.tag() {
            return Err(ValueError::TagMismatch { slot, expected: buf.tag, found: value.tag() });
        }
        let len = buf.data.len();
        let cell = buf.data.get_mut(index).ok_or(ValueError::OutOfBounds { slot, index, len })?;
        *cell = value;
        Ok(())
    }

    /// All elements of a buffer.
    pub fn values(&self, slot: SlotId) -> Result<&[Value], ValueError> {
        Ok(&self.buffer(slot)?.data)
    }

    /// Mutable elements of a buffer starting at `from`.
    pub fn values_mut_from(&mut self, slot: SlotId, from: usize) -> Result<&mut [Value], ValueError> {
        let buf = self.buffer_mut(slot)?;
        let len = buf.data.len();
        if from > len {
            return Err(ValueError::OutOfBounds { slot, index: from, len });
        }
        Ok(&mut buf.data[from..])
    }

    pub fn i64_at(&self, slot: SlotId, index: usize) -> Result<i64, ValueError> {
        match self.get_at(slot, index)? {
            Value::Int(v) => Ok(v),
            other => Err(ValueError::TagMismatch { slot, expected: TypeTag::Int, found: other.tag() }),
        }
    }

    pub fn u64_at(&self, slot: SlotId, index: usize) -> Result<u64, ValueError> {
        match self.get_at(slot, index)? {
            Value::UInt(v) => Ok(v),
            other => Err(ValueError::TagMismatch { slot, expected: TypeTag::UInt, found: other.tag() }),
        }
    }

    pub fn i64s(&self, slot: SlotId) -> Result<Vec<i64>, ValueError> {
        (0..self.len(slot)?).map(|i| self.i64_at(slot, i)).collect()
    }

    pub fn u64s(&self, slot: SlotId) -> Result<Vec<u64>, ValueError> {
        (0..self.len(slot)?).map(|i| self.u64_at(slot, i)).collect()
    }
}

/// Whether a parameter is a single variable or a list that is indexed per
/// iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Scalar,
    Vector { stride: usize },
}

/// Describes one argument of a call: which slot, how it is indexed and the
/// expected type tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamDesc {
    pub kind: ParamKind,
    pub slot: SlotId,
    pub tag: TypeTag,
}

impl ParamDesc {
    /// Scalar variable parameter, the `VAR(x, 'd')` form.
    pub fn var(slot: SlotId, tag: TypeTag) -> Self {
        Self { kind: ParamKind::Scalar, slot, tag }
    }

    /// List parameter with unit stride, the `VECTOR(xs, 'd')` form.
    pub fn vector(slot: SlotId, tag: TypeTag) -> Self {
        Self::strided(slot, tag, 1)
    }

    pub fn strided(slot: SlotId, tag: TypeTag, stride: usize) -> Self {
        Self { kind: ParamKind::Vector { stride }, slot, tag }
    }

    pub fn is_vector(&self) -> bool {
        matches!(self.kind, ParamKind::Vector { .. })
    }

    /// Element index used at logical iteration `i`.
    pub fn element(&self, i: usize) -> usize {
        match self.kind {
            ParamKind::Scalar => 0,
            ParamKind::Vector { stride } => i * stride,
        }
    }
}

impl fmt::Display for ParamDesc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ParamKind::Scalar => write!(f, "s{}:{}", self.slot, self.tag),
            ParamKind::Vector { stride: 1 } => write!(f, "v{}:{}", self.slot, self.tag),
            ParamKind::Vector { stride } => write!(f, "v{}:{}*{}", self.slot, self.tag, stride),
        }
    }
}

impl std::str::FromStr for ParamDesc {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("malformed parameter {s:?}");
        let (head, tail) = s.split_once(':').ok_or_else(bad)?;
        let (kind_char, slot) = head.split_at(head.chars().next().map_or(0, char::len_utf8));
        let slot = SlotId(slot.parse().map_err(|_| bad())?);
        let (tag, stride) = match tail.split_once('*') {
            Some((t, s)) => (t, Some(s.parse::<usize>().map_err(|_| bad())?)),
            None => (tail, None),
        };
        let mut chars = tag.chars();
        let tag = match (chars.next(), chars.next()) {
            (Some(c), None) => TypeTag::from_char(c).ok_or_else(bad)?,
            _ => return Err(bad()),
        };
        match (kind_char, stride) {
            ("s", None) => Ok(ParamDesc::var(slot, tag)),
            ("v", stride) => Ok(ParamDesc::strided(slot, tag, stride.unwrap_or(1))),
            _ => Err(bad()),
        }
    }
}
