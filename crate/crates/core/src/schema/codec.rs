//! Binary message layout.
//!
//! Fields are written in declaration order with no padding. Numbers are
//! little-endian, `bool` is one byte holding 0 or 1, and strings and
//! variable-length lists carry a `u32` little-endian element count
//! (byte count for strings) before their contents.

use super::types::{Layout, MessageValue, ScalarType, Shape, ShapeField, Value};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CodecError {
    #[error("value does not match schema at `{0}`")]
    ShapeMismatch(String),
    #[error("input truncated: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("{0} trailing bytes after message")]
    TrailingBytes(usize),
    #[error("invalid utf-8 in string at offset {0}")]
    MalformedString(usize),
    #[error("length {len} at offset {offset} exceeds remaining input")]
    MalformedLength { offset: usize, len: u32 },
    #[error("invalid bool byte {byte:#04x} at offset {offset}")]
    InvalidBool { offset: usize, byte: u8 },
}

pub fn encode(layout: &Layout, value: &MessageValue) -> Result<Vec<u8>, CodecError> {
    if value.schema != layout.name {
        return Err(CodecError::ShapeMismatch(format!("<{}>", value.schema)));
    }
    let mut out = Vec::with_capacity(layout.static_size().unwrap_or(64));
    encode_fields(&layout.fields, &value.fields, "", &mut out)?;
    Ok(out)
}

fn encode_fields(
    fields: &[ShapeField],
    values: &[Value],
    prefix: &str,
    out: &mut Vec<u8>,
) -> Result<(), CodecError> {
    if fields.len() != values.len() {
        return Err(CodecError::ShapeMismatch(if prefix.is_empty() { "<root>".into() } else { prefix.into() }));
    }
    for (field, value) in fields.iter().zip(values) {
        let path = if prefix.is_empty() { field.name.clone() } else { format!("{prefix}.{}", field.name) };
        encode_value(&field.shape, value, &path, out)?;
    }
    Ok(())
}

fn encode_value(shape: &Shape, value: &Value, path: &str, out: &mut Vec<u8>) -> Result<(), CodecError> {
    let mismatch = || CodecError::ShapeMismatch(path.to_string());
    match (shape, value) {
        (Shape::Scalar(ScalarType::F64), Value::F64(v)) => out.extend_from_slice(&v.to_le_bytes()),
        (Shape::Scalar(ScalarType::F32), Value::F32(v)) => out.extend_from_slice(&v.to_le_bytes()),
        (Shape::Scalar(ScalarType::I64), Value::I64(v)) => out.extend_from_slice(&v.to_le_bytes()),
        (Shape::Scalar(ScalarType::I32), Value::I32(v)) => out.extend_from_slice(&v.to_le_bytes()),
        (Shape::Scalar(ScalarType::U8), Value::U8(v)) => out.push(*v),
        (Shape::Scalar(ScalarType::Bool), Value::Bool(v)) => out.push(*v as u8),
        (Shape::Scalar(ScalarType::Str), Value::Str(s)) => {
            let len = u32::try_from(s.len()).map_err(|_| mismatch())?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        }
        (Shape::FixedList(elem, n), Value::List(items)) => {
            if items.len() != *n as usize {
                return Err(mismatch());
            }
            for (i, item) in items.iter().enumerate() {
                encode_value(elem, item, &format!("{path}[{i}]"), out)?;
            }
        }
        (Shape::VarList(elem), Value::List(items)) => {
            let len = u32::try_from(items.len()).map_err(|_| mismatch())?;
            out.extend_from_slice(&len.to_le_bytes());
            for (i, item) in items.iter().enumerate() {
                encode_value(elem, item, &format!("{path}[{i}]"), out)?;
            }
        }
        (Shape::Struct(fields), Value::Struct(values)) => encode_fields(fields, values, path, out)?,
        _ => return Err(mismatch()),
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        let remaining = self.bytes.len() - self.pos;
        if remaining < n {
            return Err(CodecError::Truncated { offset: self.pos, needed: n - remaining });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], CodecError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn decode(layout: &Layout, bytes: &[u8]) -> Result<MessageValue, CodecError> {
    let mut reader = Reader { bytes, pos: 0 };
    let fields = decode_fields(&layout.fields, &mut reader)?;
    if reader.remaining() > 0 {
        return Err(CodecError::TrailingBytes(reader.remaining()));
    }
    Ok(MessageValue { schema: layout.name.clone(), fields })
}

fn decode_fields(fields: &[ShapeField], r: &mut Reader<'_>) -> Result<Vec<Value>, CodecError> {
    fields.iter().map(|f| decode_value(&f.shape, r)).collect()
}

fn decode_value(shape: &Shape, r: &mut Reader<'_>) -> Result<Value, CodecError> {
    Ok(match shape {
        Shape::Scalar(ScalarType::F64) => Value::F64(f64::from_le_bytes(r.array()?)),
        Shape::Scalar(ScalarType::F32) => Value::F32(f32::from_le_bytes(r.array()?)),
        Shape::Scalar(ScalarType::I64) => Value::I64(i64::from_le_bytes(r.array()?)),
        Shape::Scalar(ScalarType::I32) => Value::I32(i32::from_le_bytes(r.array()?)),
        Shape::Scalar(ScalarType::U8) => Value::U8(r.array::<1>()?[0]),
        Shape::Scalar(ScalarType::Bool) => {
            let offset = r.pos;
            match r.array::<1>()?[0] {
                0 => Value::Bool(false),
                1 => Value::Bool(true),
                byte => return Err(CodecError::InvalidBool { offset, byte }),
            }
        }
        Shape::Scalar(ScalarType::Str) => {
            let offset = r.pos;
            let len = u32::from_le_bytes(r.array()?);
            if len as usize > r.remaining() {
                return Err(CodecError::MalformedLength { offset, len });
            }
            let start = r.pos;
            let raw = r.take(len as usize)?;
            let s = std::str::from_utf8(raw).map_err(|_| CodecError::MalformedString(start))?;
            Value::Str(s.to_string())
        }
        Shape::FixedList(elem, n) => {
            Value::List((0..*n).map(|_| decode_value(elem, r)).collect::<Result<_, _>>()?)
        }
        Shape::VarList(elem) => {
            let offset = r.pos;
            let len = u32::from_le_bytes(r.array()?);
            // Element shapes are never zero-sized (enforced at registration),
            // so this bound rejects absurd counts before allocating.
            let min = elem.min_size().max(1);
            if (len as usize).saturating_mul(min) > r.remaining() {
                return Err(CodecError::MalformedLength { offset, len });
            }
            let mut items = Vec::with_capacity(len as usize);
            for _ in 0..len {
                items.push(decode_value(elem, r)?);
            }
            Value::List(items)
        }
        Shape::Struct(fields) => Value::Struct(decode_fields(fields, r)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::SchemaRegistry;

    fn twist(reg: &SchemaRegistry) -> std::sync::Arc<Layout> {
        reg.layout("Twist").unwrap()
    }

    #[test]
    fn zero_twist_is_48_zero_bytes() {
        let reg = SchemaRegistry::with_builtins();
        let layout = twist(&reg);
        let bytes = encode(&layout, &layout.zero_message()).unwrap();
        assert_eq!(bytes, vec![0u8; 48]);
        assert_eq!(decode(&layout, &bytes).unwrap(), layout.zero_message());
    }

    #[test]
    fn short_input_is_truncated() {
        let reg = SchemaRegistry::with_builtins();
        let err = decode(&twist(&reg), &[0u8; 47]).unwrap_err();
        assert!(matches!(err, CodecError::Truncated { .. }));
    }

    #[test]
    fn long_input_has_trailing_bytes() {
        let reg = SchemaRegistry::with_builtins();
        assert_eq!(decode(&twist(&reg), &[0u8; 49]).unwrap_err(), CodecError::TrailingBytes(1));
    }

    #[test]
    fn string_and_list_errors() {
        let reg = SchemaRegistry::with_builtins();
        let ps = reg.layout("PoseStamped").unwrap();
        // frame length claims 200 bytes
        let mut bytes = 200u32.to_le_bytes().to_vec();
        bytes.extend_from_slice(&[0u8; 24]);
        assert!(matches!(decode(&ps, &bytes), Err(CodecError::MalformedLength { .. })));

        let mut bad_utf8 = 2u32.to_le_bytes().to_vec();
        bad_utf8.extend_from_slice(&[0xff, 0xfe]);
        bad_utf8.extend_from_slice(&[0u8; 24]);
        assert_eq!(decode(&ps, &bad_utf8), Err(CodecError::MalformedString(4)));

        let tf = reg.layout("TFMessage").unwrap();
        let huge = u32::MAX.to_le_bytes();
        assert!(matches!(decode(&tf, &huge), Err(CodecError::MalformedLength { .. })));
    }

    #[test]
    fn shape_mismatch_is_reported_with_path() {
        let reg = SchemaRegistry::with_builtins();
        let layout = twist(&reg);
        let mut msg = layout.zero_message();
        msg.fields[1] = Value::Struct(vec![Value::F64(0.0), Value::F64(0.0), Value::I32(0)]);
        assert_eq!(encode(&layout, &msg), Err(CodecError::ShapeMismatch("angular.z".into())));
    }
}
