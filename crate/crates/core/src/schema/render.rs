use std::fmt::Write as _;

use super::types::{Layout, MessageValue, Shape, Value};

/// `Schema{path: value, ...}` with every leaf listed in declaration order.
/// Floats use the shortest text that reads back to the same value;
/// byte lists are summarized by length.
pub fn render_message(layout: &Layout, msg: &MessageValue) -> String {
    let mut out = format!("{}{{", msg.schema);
    let mut first = true;
    for (f, v) in layout.fields.iter().zip(&msg.fields) {
        leaves(&mut out, &mut first, &f.name, &f.shape, v);
    }
    out.push('}');
    out
}

fn leaves(out: &mut String, first: &mut bool, path: &str, shape: &Shape, v: &Value) {
    match (shape, v) {
        (Shape::Struct(fields), Value::Struct(vs)) => {
            for (f, v) in fields.iter().zip(vs) {
                leaves(out, first, &format!("{path}.{}", f.name), &f.shape, v);
            }
        }
        (Shape::FixedList(elem, _) | Shape::VarList(elem), Value::List(vs))
            if !matches!(**elem, Shape::Scalar(crate::schema::ScalarType::U8)) =>
        {
            if vs.is_empty() {
                sep(out, first);
                let _ = write!(out, "{path}: []");
            }
            for (i, v) in vs.iter().enumerate() {
                leaves(out, first, &format!("{path}[{i}]"), elem, v);
            }
        }
        (_, v) => {
            sep(out, first);
            let _ = write!(out, "{path}: ");
            scalar(out, v);
        }
    }
}

fn sep(out: &mut String, first: &mut bool) {
    if !*first {
        out.push_str(", ");
    }
    *first = false;
}

fn scalar(out: &mut String, v: &Value) {
    let _ = match v {
        Value::F64(x) => write!(out, "{x:?}"),
        Value::F32(x) => write!(out, "{x:?}"),
        Value::I64(x) => write!(out, "{x}"),
        Value::I32(x) => write!(out, "{x}"),
        Value::U8(x) => write!(out, "{x}"),
        Value::Bool(x) => write!(out, "{x}"),
        Value::Str(s) => write!(out, "{s:?}"),
        Value::List(vs) => write!(out, "<{} bytes>", vs.len()),
        Value::Struct(_) => write!(out, "{{..}}"),
    };
}
