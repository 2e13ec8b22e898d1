use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use parking_lot::RwLock;

use super::text::parse_schemas;
use super::types::{is_identifier, Field, FieldType, Layout, MessageSchema, SchemaId, Shape, ShapeField};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SchemaError {
    #[error("schema `{0}` is already registered with a different shape")]
    DuplicateNameConflict(String),
    #[error("schema `{schema}` references unknown schema `{reference}`")]
    UnresolvedReference { schema: String, reference: String },
    #[error("schema reference cycle through `{0}`")]
    CyclicSchema(String),
    #[error("duplicate field `{field}` in schema `{schema}`")]
    DuplicateField { schema: String, field: String },
    #[error("`{0}` is not a valid identifier")]
    InvalidIdentifier(String),
    #[error("schema `{0}` has a variable-length list of zero-sized elements")]
    ZeroSizedElement(String),
    #[error("schema `{0}` defined twice in one batch")]
    DuplicateInBatch(String),
}

struct Entry {
    descriptor: MessageSchema,
    layout: Arc<Layout>,
}

#[derive(Default)]
struct Inner {
    by_name: HashMap<String, SchemaId>,
    entries: Vec<Entry>,
}

/// Registry of named message schemas. Reads are concurrent; definitions
/// are serialized behind a write lock.
#[derive(Default)]
pub struct SchemaRegistry {
    inner: RwLock<Inner>,
}

/// Descriptors shipped with every registry.
pub const BUILTIN_SCHEMAS: &str = "
schema Twist { linear: {x: f64, y: f64, z: f64}, angular: {x: f64, y: f64, z: f64} }
schema Pose { x: f64, y: f64, theta: f64, linear_velocity: f64, angular_velocity: f64 }
schema PoseStamped { frame: string, x: f64, y: f64, theta: f64 }
schema MoveBaseActionGoal { goal: PoseStamped }
schema Transform { frame: string, child_frame: string, x: f64, y: f64, theta: f64 }
schema TFMessage { transforms: [Transform] }
schema Numbered { index: i64, data: [u8] }
";

impl SchemaRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_builtins() -> Self {
        let reg = Self::new();
        let schemas = parse_schemas(BUILTIN_SCHEMAS).expect("builtin schema text");
        reg.define_all(schemas).expect("builtin schemas are valid");
        reg
    }

    pub fn define(&self, descriptor: MessageSchema) -> Result<SchemaId, SchemaError> {
        Ok(self.define_all(vec![descriptor])?[0])
    }

    pub fn define_text(&self, text: &str) -> Result<Vec<SchemaId>, String> {
        let schemas = parse_schemas(text).map_err(|e| e.to_string())?;
        self.define_all(schemas).map_err(|e| e.to_string())
    }

    /// Define a batch of schemas that may reference one another and any
    /// schema already registered. The batch is applied atomically.
    pub fn define_all(&self, batch: Vec<MessageSchema>) -> Result<Vec<SchemaId>, SchemaError> {
        let mut inner = self.inner.write();
        let mut pending: HashMap<&str, &MessageSchema> = HashMap::new();
        for s in &batch {
            validate_descriptor(s)?;
            if pending.insert(&s.name, s).is_some() {
                return Err(SchemaError::DuplicateInBatch(s.name.clone()));
            }
            if let Some(&id) = inner.by_name.get(&s.name) {
                if inner.entries[id.0 as usize].descriptor != *s {
                    return Err(SchemaError::DuplicateNameConflict(s.name.clone()));
                }
            }
        }

        let mut resolved: HashMap<String, Arc<[ShapeField]>> = HashMap::new();
        for s in &batch {
            let mut visiting = HashSet::new();
            resolve_schema(&s.name, &inner, &pending, &mut resolved, &mut visiting)?;
        }

        let mut ids = Vec::with_capacity(batch.len());
        for s in batch {
            if let Some(&id) = inner.by_name.get(&s.name) {
                ids.push(id);
                continue;
            }
            let id = SchemaId(inner.entries.len() as u32);
            let fields = resolved[&s.name].clone();
            let name = s.name.clone();
            inner.entries.push(Entry { layout: Arc::new(Layout { id, name: name.clone(), fields }), descriptor: s });
            inner.by_name.insert(name, id);
            ids.push(id);
        }
        Ok(ids)
    }

    pub fn id(&self, name: &str) -> Option<SchemaId> {
        self.inner.read().by_name.get(name).copied()
    }

    pub fn layout(&self, name: &str) -> Option<Arc<Layout>> {
        let inner = self.inner.read();
        inner.by_name.get(name).map(|id| inner.entries[id.0 as usize].layout.clone())
    }

    pub fn layout_by_id(&self, id: SchemaId) -> Option<Arc<Layout>> {
        self.inner.read().entries.get(id.0 as usize).map(|e| e.layout.clone())
    }

    pub fn descriptor(&self, name: &str) -> Option<MessageSchema> {
        let inner = self.inner.read();
        inner.by_name.get(name).map(|id| inner.entries[id.0 as usize].descriptor.clone())
    }

    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<_> = self.inner.read().by_name.keys().cloned().collect();
        names.sort();
        names
    }

    /// The named schema and every schema it references, dependencies
    /// first.
    pub fn closure(&self, name: &str) -> Vec<MessageSchema> {
        let mut out = Vec::new();
        let mut seen = HashSet::new();
        self.collect_closure(name, &mut seen, &mut out);
        out
    }

    fn collect_closure(&self, name: &str, seen: &mut HashSet<String>, out: &mut Vec<MessageSchema>) {
        if !seen.insert(name.to_string()) {
            return;
        }
        let Some(desc) = self.descriptor(name) else { return };
        let mut refs = Vec::new();
        for f in &desc.fields {
            collect_refs(&f.ty, &mut refs);
        }
        for r in refs {
            self.collect_closure(&r, seen, out);
        }
        out.push(desc);
    }
}

fn validate_descriptor(s: &MessageSchema) -> Result<(), SchemaError> {
    if !is_identifier(&s.name) {
        return Err(SchemaError::InvalidIdentifier(s.name.clone()));
    }
    validate_fields(&s.name, &s.fields)
}

fn validate_fields(schema: &str, fields: &[Field]) -> Result<(), SchemaError> {
    let mut seen = HashSet::new();
    for f in fields {
        if !is_identifier(&f.name) {
            return Err(SchemaError::InvalidIdentifier(f.name.clone()));
        }
        if !seen.insert(f.name.as_str()) {
            return Err(SchemaError::DuplicateField { schema: schema.to_string(), field: f.name.clone() });
        }
        validate_type(schema, &f.ty)?;
    }
    Ok(())
}

fn validate_type(schema: &str, ty: &FieldType) -> Result<(), SchemaError> {
    match ty {
        FieldType::Scalar(_) => Ok(()),
        FieldType::FixedList(elem, _) | FieldType::VarList(elem) => validate_type(schema, elem),
        FieldType::Struct(fields) => validate_fields(schema, fields),
        FieldType::Ref(name) if is_identifier(name) => Ok(()),
        FieldType::Ref(name) => Err(SchemaError::InvalidIdentifier(name.clone())),
    }
}

fn collect_refs(ty: &FieldType, out: &mut Vec<String>) {
    match ty {
        FieldType::Scalar(_) => {}
        FieldType::FixedList(elem, _) | FieldType::VarList(elem) => collect_refs(elem, out),
        FieldType::Struct(fields) => fields.iter().for_each(|f| collect_refs(&f.ty, out)),
        FieldType::Ref(name) => out.push(name.clone()),
    }
}

fn resolve_schema(
    name: &str,
    inner: &Inner,
    pending: &HashMap<&str, &MessageSchema>,
    resolved: &mut HashMap<String, Arc<[ShapeField]>>,
    visiting: &mut HashSet<String>,
) -> Result<Arc<[ShapeField]>, SchemaError> {
    if let Some(done) = resolved.get(name) {
        return Ok(done.clone());
    }
    let Some(desc) = pending.get(name) else {
        // already registered, not part of the batch
        let id = inner.by_name[name];
        return Ok(inner.entries[id.0 as usize].layout.fields.clone());
    };
    if !visiting.insert(name.to_string()) {
        return Err(SchemaError::CyclicSchema(name.to_string()));
    }
    let fields = resolve_fields(name, &desc.fields, inner, pending, resolved, visiting)?;
    visiting.remove(name);
    resolved.insert(name.to_string(), fields.clone());
    Ok(fields)
}

fn resolve_fields(
    schema: &str,
    fields: &[Field],
    inner: &Inner,
    pending: &HashMap<&str, &MessageSchema>,
    resolved: &mut HashMap<String, Arc<[ShapeField]>>,
    visiting: &mut HashSet<String>,
) -> Result<Arc<[ShapeField]>, SchemaError> {
    fields
        .iter()
        .map(|f| {
            Ok(ShapeField {
                name: f.name.clone(),
                shape: resolve_type(schema, &f.ty, inner, pending, resolved, visiting)?,
            })
        })
        .collect()
}

fn resolve_type(
    schema: &str,
    ty: &FieldType,
    inner: &Inner,
    pending: &HashMap<&str, &MessageSchema>,
    resolved: &mut HashMap<String, Arc<[ShapeField]>>,
    visiting: &mut HashSet<String>,
) -> Result<Shape, SchemaError> {
    Ok(match ty {
        FieldType::Scalar(s) => Shape::Scalar(*s),
        FieldType::FixedList(elem, n) => {
            Shape::FixedList(Box::new(resolve_type(schema, elem, inner, pending, resolved, visiting)?), *n)
        }
        FieldType::VarList(elem) => {
            let elem = resolve_type(schema, elem, inner, pending, resolved, visiting)?;
            if elem.min_size() == 0 {
                return Err(SchemaError::ZeroSizedElement(schema.to_string()));
            }
            Shape::VarList(Box::new(elem))
        }
        FieldType::Struct(fields) => Shape::Struct(resolve_fields(schema, fields, inner, pending, resolved, visiting)?),
        FieldType::Ref(name) => {
            if !pending.contains_key(name.as_str()) && !inner.by_name.contains_key(name) {
                return Err(SchemaError::UnresolvedReference { schema: schema.to_string(), reference: name.clone() });
            }
            Shape::Struct(resolve_schema(name, inner, pending, resolved, visiting)?)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::text::parse_schema;

    #[test]
    fn twist_registration_is_idempotent() {
        let reg = SchemaRegistry::new();
        let twist = parse_schema("schema Twist { linear: {x:f64,y:f64,z:f64}, angular: {x:f64,y:f64,z:f64} }").unwrap();
        let a = reg.define(twist.clone()).unwrap();
        let b = reg.define(twist).unwrap();
        assert_eq!(a, b);
        assert_eq!(reg.layout("Twist").unwrap().static_size(), Some(48));
    }

    #[test]
    fn conflicting_shape_is_rejected() {
        let reg = SchemaRegistry::with_builtins();
        let other = parse_schema("schema Twist { x: f64 }").unwrap();
        assert_eq!(reg.define(other), Err(SchemaError::DuplicateNameConflict("Twist".into())));
    }

    #[test]
    fn cycles_are_rejected() {
        let reg = SchemaRegistry::new();
        let batch = parse_schemas("schema A { b: B } schema B { a: A }").unwrap();
        assert!(matches!(reg.define_all(batch), Err(SchemaError::CyclicSchema(_))));
        let selfref = parse_schema("schema C { next: [C] }").unwrap();
        assert!(matches!(reg.define(selfref), Err(SchemaError::CyclicSchema(_))));
        assert!(reg.names().is_empty());
    }

    #[test]
    fn unresolved_and_duplicate_fields() {
        let reg = SchemaRegistry::new();
        assert!(matches!(
            reg.define(parse_schema("schema A { b: Missing }").unwrap()),
            Err(SchemaError::UnresolvedReference { .. })
        ));
        assert!(matches!(
            reg.define(parse_schema("schema A { x: f64, x: f64 }").unwrap()),
            Err(SchemaError::DuplicateField { .. })
        ));
        assert!(matches!(
            reg.define(parse_schema("schema E { xs: [{}] }").unwrap()),
            Err(SchemaError::ZeroSizedElement(_))
        ));
    }

    #[test]
    fn closure_lists_dependencies_first() {
        let reg = SchemaRegistry::with_builtins();
        let names: Vec<_> = reg.closure("MoveBaseActionGoal").into_iter().map(|s| s.name).collect();
        assert_eq!(names, ["PoseStamped", "MoveBaseActionGoal"]);
    }
}
