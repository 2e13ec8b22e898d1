use std::fmt;
use std::sync::Arc;

/// Leaf field types of a message schema.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScalarType {
    F64,
    F32,
    I64,
    I32,
    U8,
    Bool,
    Str,
}

impl ScalarType {
    pub fn keyword(self) -> &'static str {
        match self {
            ScalarType::F64 => "f64",
            ScalarType::F32 => "f32",
            ScalarType::I64 => "i64",
            ScalarType::I32 => "i32",
            ScalarType::U8 => "u8",
            ScalarType::Bool => "bool",
            ScalarType::Str => "string",
        }
    }

    pub fn from_keyword(word: &str) -> Option<ScalarType> {
        Some(match word {
            "f64" => ScalarType::F64,
            "f32" => ScalarType::F32,
            "i64" => ScalarType::I64,
            "i32" => ScalarType::I32,
            "u8" => ScalarType::U8,
            "bool" => ScalarType::Bool,
            "string" => ScalarType::Str,
            _ => return None,
        })
    }

    /// Encoded width in bytes; strings have a variable width.
    pub fn fixed_width(self) -> Option<usize> {
        match self {
            ScalarType::F64 | ScalarType::I64 => Some(8),
            ScalarType::F32 | ScalarType::I32 => Some(4),
            ScalarType::U8 | ScalarType::Bool => Some(1),
            ScalarType::Str => None,
        }
    }

    pub fn is_numeric(self) -> bool {
        !matches!(self, ScalarType::Bool | ScalarType::Str)
    }
}

/// Field type as written in a schema descriptor. Nested schemas are either
/// inline anonymous structs or references to another named schema.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum FieldType {
    Scalar(ScalarType),
    FixedList(Box<FieldType>, u32),
    VarList(Box<FieldType>),
    Struct(Vec<Field>),
    Ref(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Field {
    pub name: String,
    pub ty: FieldType,
}

impl Field {
    pub fn new(name: impl Into<String>, ty: FieldType) -> Self {
        Field { name: name.into(), ty }
    }
}

/// A named message type descriptor.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MessageSchema {
    pub name: String,
    pub fields: Vec<Field>,
}

impl MessageSchema {
    pub fn new(name: impl Into<String>, fields: Vec<Field>) -> Self {
        MessageSchema { name: name.into(), fields }
    }
}

/// Identifier of a schema inside one registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SchemaId(pub u32);

impl fmt::Display for SchemaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// A field type with every schema reference replaced by the referenced
/// layout. This is what the codec and the pipeline checker walk.
#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Scalar(ScalarType),
    FixedList(Box<Shape>, u32),
    VarList(Box<Shape>),
    Struct(Arc<[ShapeField]>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeField {
    pub name: String,
    pub shape: Shape,
}

impl Shape {
    /// Smallest possible encoded size of a value of this shape.
    pub fn min_size(&self) -> usize {
        match self {
            Shape::Scalar(s) => s.fixed_width().unwrap_or(4),
            Shape::FixedList(elem, n) => elem.min_size() * *n as usize,
            Shape::VarList(_) => 4,
            Shape::Struct(fields) => fields.iter().map(|f| f.shape.min_size()).sum(),
        }
    }

    /// Encoded size if it does not depend on the value.
    pub fn static_size(&self) -> Option<usize> {
        match self {
            Shape::Scalar(s) => s.fixed_width(),
            Shape::FixedList(elem, n) => elem.static_size().map(|w| w * *n as usize),
            Shape::VarList(_) => None,
            Shape::Struct(fields) => fields.iter().map(|f| f.shape.static_size()).sum(),
        }
    }

    pub fn zero_value(&self) -> Value {
        match self {
            Shape::Scalar(s) => match s {
                ScalarType::F64 => Value::F64(0.0),
                ScalarType::F32 => Value::F32(0.0),
                ScalarType::I64 => Value::I64(0),
                ScalarType::I32 => Value::I32(0),
                ScalarType::U8 => Value::U8(0),
                ScalarType::Bool => Value::Bool(false),
                ScalarType::Str => Value::Str(String::new()),
            },
            Shape::FixedList(elem, n) => Value::List((0..*n).map(|_| elem.zero_value()).collect()),
            Shape::VarList(_) => Value::List(Vec::new()),
            Shape::Struct(fields) => Value::Struct(fields.iter().map(|f| f.shape.zero_value()).collect()),
        }
    }
}

/// Fully resolved layout of a registered schema.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub id: SchemaId,
    pub name: String,
    pub fields: Arc<[ShapeField]>,
}

impl Layout {
    pub fn as_shape(&self) -> Shape {
        Shape::Struct(self.fields.clone())
    }

    pub fn static_size(&self) -> Option<usize> {
        self.as_shape().static_size()
    }

    pub fn zero_message(&self) -> MessageValue {
        MessageValue {
            schema: self.name.clone(),
            fields: self.fields.iter().map(|f| f.shape.zero_value()).collect(),
        }
    }
}

/// A decoded field value.
///
/// Equality is structural and compares floats by bit pattern, so values
/// containing NaN still compare equal to their own round-trip.
#[derive(Debug, Clone)]
pub enum Value {
    F64(f64),
    F32(f32),
    I64(i64),
    I32(i32),
    U8(u8),
    Bool(bool),
    Str(String),
    List(Vec<Value>),
    Struct(Vec<Value>),
}

impl PartialEq for Value {
    fn eq(&self, other: &Self) -> bool {
        use Value::*;
        match (self, other) {
            (F64(a), F64(b)) => a.to_bits() == b.to_bits(),
            (F32(a), F32(b)) => a.to_bits() == b.to_bits(),
            (I64(a), I64(b)) => a == b,
            (I32(a), I32(b)) => a == b,
            (U8(a), U8(b)) => a == b,
            (Bool(a), Bool(b)) => a == b,
            (Str(a), Str(b)) => a == b,
            (List(a), List(b)) | (Struct(a), Struct(b)) => a == b,
            _ => false,
        }
    }
}

impl Value {
    /// Numeric view used by expressions; bools read as 0/1.
    pub fn as_f64(&self) -> Option<f64> {
        match *self {
            Value::F64(v) => Some(v),
            Value::F32(v) => Some(v as f64),
            Value::I64(v) => Some(v as f64),
            Value::I32(v) => Some(v as f64),
            Value::U8(v) => Some(v as f64),
            Value::Bool(b) => Some(if b { 1.0 } else { 0.0 }),
            _ => None,
        }
    }

    /// Store an f64 into a numeric slot: narrower floats round to nearest,
    /// integers round and saturate.
    pub fn assign_f64(&mut self, v: f64) -> bool {
        match self {
            Value::F64(slot) => *slot = v,
            Value::F32(slot) => *slot = v as f32,
            Value::I64(slot) => *slot = v.round() as i64,
            Value::I32(slot) => *slot = v.round() as i32,
            Value::U8(slot) => *slot = v.round() as u8,
            Value::Bool(slot) => *slot = v != 0.0 && !v.is_nan(),
            _ => return false,
        }
        true
    }
}

/// A decoded message: schema name plus top-level field values in
/// declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageValue {
    pub schema: String,
    pub fields: Vec<Value>,
}

/// Opaque payload relayed without decoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawPayload {
    pub bytes: bytes::Bytes,
    pub schema_hint: Option<String>,
}

pub fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}
