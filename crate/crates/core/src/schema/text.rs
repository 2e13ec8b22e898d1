//! Descriptor text: `schema Twist { linear: {x: f64, y: f64, z: f64}, angular: {x: f64, y: f64, z: f64} }`.
//!
//! Field types are the scalar keywords, `{ ... }` for an inline struct,
//! `[T; n]` for a fixed list, `[T]` for a variable list, or the name of
//! another schema.

use std::fmt::{self, Write as _};

use super::types::{is_identifier, Field, FieldType, MessageSchema, ScalarType};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("schema text error at {line}:{column}: {message}")]
pub struct SchemaTextError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

struct Scanner<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Scanner<'a> {
    fn error(&self, message: impl Into<String>) -> SchemaTextError {
        let before = &self.src[..self.pos];
        let line = before.matches('\n').count() + 1;
        let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
        SchemaTextError { line, column, message: message.into() }
    }

    fn skip_ws(&mut self) {
        let rest = &self.src[self.pos..];
        self.pos += rest.len() - rest.trim_start().len();
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.src[self.pos..].chars().next()
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(c) {
            self.pos += c.len_utf8();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<(), SchemaTextError> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(self.error(format!("expected `{c}`")))
        }
    }

    fn word(&mut self) -> Result<&'a str, SchemaTextError> {
        self.skip_ws();
        let rest = &self.src[self.pos..];
        let len = rest.find(|c: char| !(c.is_ascii_alphanumeric() || c == '_')).unwrap_or(rest.len());
        if len == 0 {
            return Err(self.error("expected identifier"));
        }
        self.pos += len;
        Ok(&rest[..len])
    }

    fn ident(&mut self) -> Result<&'a str, SchemaTextError> {
        let start = self.pos;
        let w = self.word()?;
        if !is_identifier(w) {
            self.pos = start;
            return Err(self.error(format!("`{w}` is not an identifier")));
        }
        Ok(w)
    }
}

/// Parse one or more `schema` declarations.
pub fn parse_schemas(text: &str) -> Result<Vec<MessageSchema>, SchemaTextError> {
    let mut s = Scanner { src: text, pos: 0 };
    let mut out = Vec::new();
    while s.peek().is_some() {
        let kw = s.word()?;
        if kw != "schema" {
            return Err(s.error("expected `schema`"));
        }
        let name = s.ident()?.to_string();
        let fields = parse_fields(&mut s)?;
        out.push(MessageSchema { name, fields });
        s.eat(';');
    }
    Ok(out)
}

pub fn parse_schema(text: &str) -> Result<MessageSchema, SchemaTextError> {
    let mut all = parse_schemas(text)?;
    if all.len() != 1 {
        return Err(SchemaTextError { line: 1, column: 1, message: format!("expected one schema, found {}", all.len()) });
    }
    Ok(all.remove(0))
}

fn parse_fields(s: &mut Scanner<'_>) -> Result<Vec<Field>, SchemaTextError> {
    s.expect('{')?;
    let mut fields = Vec::new();
    loop {
        if s.eat('}') {
            break;
        }
        let name = s.ident()?.to_string();
        s.expect(':')?;
        let ty = parse_type(s)?;
        fields.push(Field { name, ty });
        if !s.eat(',') {
            s.expect('}')?;
            break;
        }
    }
    Ok(fields)
}

fn parse_type(s: &mut Scanner<'_>) -> Result<FieldType, SchemaTextError> {
    match s.peek() {
        Some('{') => Ok(FieldType::Struct(parse_fields(s)?)),
        Some('[') => {
            s.expect('[')?;
            let elem = parse_type(s)?;
            if s.eat(';') {
                let n = s.word()?;
                let n: u32 = n.parse().map_err(|_| s.error(format!("bad list length `{n}`")))?;
                s.expect(']')?;
                Ok(FieldType::FixedList(Box::new(elem), n))
            } else {
                s.expect(']')?;
                Ok(FieldType::VarList(Box::new(elem)))
            }
        }
        _ => {
            let w = s.ident()?;
            Ok(match ScalarType::from_keyword(w) {
                Some(scalar) => FieldType::Scalar(scalar),
                None => FieldType::Ref(w.to_string()),
            })
        }
    }
}

impl fmt::Display for FieldType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldType::Scalar(s) => f.write_str(s.keyword()),
            FieldType::FixedList(elem, n) => write!(f, "[{elem}; {n}]"),
            FieldType::VarList(elem) => write!(f, "[{elem}]"),
            FieldType::Struct(fields) => {
                f.write_char('{')?;
                write_fields(f, fields)?;
                f.write_char('}')
            }
            FieldType::Ref(name) => f.write_str(name),
        }
    }
}

fn write_fields(f: &mut fmt::Formatter<'_>, fields: &[Field]) -> fmt::Result {
    for (i, field) in fields.iter().enumerate() {
        if i > 0 {
            f.write_str(", ")?;
        }
        write!(f, "{}: {}", field.name, field.ty)?;
    }
    Ok(())
}

impl fmt::Display for MessageSchema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "schema {} {{ ", self.name)?;
        write_fields(f, &self.fields)?;
        if !self.fields.is_empty() {
            f.write_char(' ')?;
        }
        f.write_char('}')
    }
}
