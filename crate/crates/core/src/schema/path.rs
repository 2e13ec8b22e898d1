use std::fmt;

use super::types::{is_identifier, Layout, MessageValue, Shape, Value};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PathStep {
    Field(String),
    Index(u32),
}

/// A dotted field path such as `linear.x` or `transforms[0].theta`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FieldPath {
    pub steps: Vec<PathStep>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PathError {
    #[error("malformed field path `{0}`")]
    Malformed(String),
    #[error("no field `{field}` in `{path}`")]
    NoSuchField { path: String, field: String },
    #[error("`{0}` indexes a value that is not a list")]
    NotAList(String),
    #[error("`{0}` selects a field of a value that is not a struct")]
    NotAStruct(String),
    #[error("index {index} out of range for `{path}` (length {len})")]
    OutOfRange { path: String, index: u32, len: u32 },
}

impl FieldPath {
    pub fn parse(text: &str) -> Result<FieldPath, PathError> {
        let bad = || PathError::Malformed(text.to_string());
        let mut steps = Vec::new();
        for part in text.split('.') {
            let (name, mut rest) = match part.find('[') {
                Some(i) => (&part[..i], &part[i..]),
                None => (part, ""),
            };
            if !is_identifier(name) {
                return Err(bad());
            }
            steps.push(PathStep::Field(name.to_string()));
            while !rest.is_empty() {
                let close = rest.find(']').ok_or_else(bad)?;
                if !rest.starts_with('[') {
                    return Err(bad());
                }
                let idx: u32 = rest[1..close].parse().map_err(|_| bad())?;
                steps.push(PathStep::Index(idx));
                rest = &rest[close + 1..];
            }
        }
        if steps.is_empty() {
            return Err(bad());
        }
        Ok(FieldPath { steps })
    }

    pub fn field(names: &[&str]) -> FieldPath {
        FieldPath {
            steps: names.iter().map(|n| PathStep::Field(n.to_string())).collect(),
        }
    }
}

impl fmt::Display for FieldPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, step) in self.steps.iter().enumerate() {
            match step {
                PathStep::Field(name) => {
                    if i > 0 {
                        f.write_str(".")?;
                    }
                    f.write_str(name)?;
                }
                PathStep::Index(idx) => write!(f, "[{idx}]")?,
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Hop {
    Field(usize),
    Index(usize),
}

/// A path checked against a layout; `leaf` is the shape it selects.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedPath {
    hops: Vec<Hop>,
    pub leaf: Shape,
    pub text: String,
}

impl Layout {
    pub fn resolve(&self, path: &FieldPath) -> Result<ResolvedPath, PathError> {
        let text = path.to_string();
        let mut shape = self.as_shape();
        let mut hops = Vec::with_capacity(path.steps.len());
        for step in &path.steps {
            shape = match (step, &shape) {
                (PathStep::Field(name), Shape::Struct(fields)) => {
                    let pos = fields.iter().position(|f| &f.name == name).ok_or_else(|| {
                        PathError::NoSuchField { path: text.clone(), field: name.clone() }
                    })?;
                    hops.push(Hop::Field(pos));
                    fields[pos].shape.clone()
                }
                (PathStep::Field(_), _) => return Err(PathError::NotAStruct(text)),
                (PathStep::Index(i), Shape::FixedList(elem, n)) => {
                    if i >= n {
                        return Err(PathError::OutOfRange { path: text, index: *i, len: *n });
                    }
                    hops.push(Hop::Index(*i as usize));
                    (**elem).clone()
                }
                (PathStep::Index(i), Shape::VarList(elem)) => {
                    hops.push(Hop::Index(*i as usize));
                    (**elem).clone()
                }
                (PathStep::Index(_), _) => return Err(PathError::NotAList(text)),
            };
        }
        Ok(ResolvedPath { hops, leaf: shape, text })
    }
}

impl MessageValue {
    pub fn get(&self, path: &ResolvedPath) -> Option<&Value> {
        let (first, rest) = path.hops.split_first()?;
        let Hop::Field(i) = *first else { return None };
        let mut cur = self.fields.get(i)?;
        for hop in rest {
            cur = match (hop, cur) {
                (Hop::Field(i), Value::Struct(vs)) => vs.get(*i)?,
                (Hop::Index(i), Value::List(vs)) => vs.get(*i)?,
                _ => return None,
            };
        }
        Some(cur)
    }

    pub fn get_mut(&mut self, path: &ResolvedPath) -> Option<&mut Value> {
        let (first, rest) = path.hops.split_first()?;
        let Hop::Field(i) = *first else { return None };
        let mut cur = self.fields.get_mut(i)?;
        for hop in rest {
            cur = match (hop, cur) {
                (Hop::Field(i), Value::Struct(vs)) => vs.get_mut(*i)?,
                (Hop::Index(i), Value::List(vs)) => vs.get_mut(*i)?,
                _ => return None,
            };
        }
        Some(cur)
    }
}
