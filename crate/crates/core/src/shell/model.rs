//! Self-contained JSON documents describing node specs together with the
//! pipelines and schemas they use.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use crate::node::NodeSpec;
use crate::pipeline::{parse_pipeline, PipelineLibrary, PipelineSpec, Stmt};
use crate::schema::{parse_schemas, MessageSchema, SchemaRegistry, BUILTIN_SCHEMAS};

pub const MODEL_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDocument {
    pub version: u64,
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub pipelines: Vec<PipelineText>,
    /// Schema definitions in text form, dependencies first.
    #[serde(default)]
    pub schemas: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineText {
    pub name: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ModelError {
    #[error("unsupported model version {0}")]
    VersionUnsupported(String),
    #[error("{path}: {message}")]
    Validation { path: String, message: String },
}

fn invalid(path: impl Into<String>, message: impl ToString) -> ModelError {
    ModelError::Validation { path: path.into(), message: message.to_string() }
}

fn builtin_names() -> BTreeSet<String> {
    parse_schemas(BUILTIN_SCHEMAS).map(|v| v.into_iter().map(|s| s.name).collect()).unwrap_or_default()
}

fn literal_schemas(p: &PipelineSpec) -> Vec<String> {
    p.statements()
        .into_iter()
        .filter_map(|s| match s {
            Stmt::Emit(e) => Some(e.message.schema.clone()),
            _ => None,
        })
        .collect()
}

/// Build the document for `specs`, embedding every pipeline they name and
/// every non-builtin schema they use.
pub fn export_document(
    specs: &[NodeSpec],
    pipelines: &PipelineLibrary,
    schemas: &SchemaRegistry,
) -> Result<ModelDocument, ModelError> {
    let mut nodes = specs.to_vec();
    nodes.sort_by(|a, b| a.name.cmp(&b.name));
    let mut used_pipelines = BTreeSet::new();
    let mut used_schemas = BTreeSet::new();
    for (i, spec) in nodes.iter().enumerate() {
        for name in spec.pipeline_refs() {
            let p = pipelines.get(name).ok_or_else(|| invalid(format!("nodes[{i}]"), format!("pipeline `{name}` is not defined")))?;
            used_schemas.extend(literal_schemas(&p));
            used_pipelines.insert(name.to_string());
        }
        used_schemas.extend(spec.endpoints().into_iter().filter_map(|(_, e)| e.schema.clone()));
        used_schemas.extend(spec.replace.values().filter_map(|r| r.schema.clone()));
    }
    let builtins = builtin_names();
    let mut seen = BTreeSet::new();
    let mut schema_texts = Vec::new();
    for name in used_schemas.iter().filter(|n| !builtins.contains(*n)) {
        if schemas.descriptor(name).is_none() {
            return Err(invalid("schemas", format!("schema `{name}` is not defined")));
        }
        for s in schemas.closure(name) {
            if !builtins.contains(&s.name) && seen.insert(s.name.clone()) {
                schema_texts.push(s.to_string());
            }
        }
    }
    let pipelines = used_pipelines
        .into_iter()
        .map(|name| PipelineText { text: pipelines.get(&name).expect("checked above").body_text(), name })
        .collect();
    Ok(ModelDocument { version: MODEL_VERSION, nodes, pipelines, schemas: schema_texts })
}

/// Canonical text: fixed field order, sorted maps, two-space indent.
pub fn to_canonical_json(doc: &ModelDocument) -> String {
    let mut s = serde_json::to_string_pretty(doc).expect("documents serialize");
    s.push('\n');
    s
}

/// Parse document text, checking the version before anything else.
pub fn parse_document(text: &str) -> Result<ModelDocument, ModelError> {
    let value: Json = serde_json::from_str(text).map_err(|e| invalid("$", e))?;
    document_from_json(value)
}

pub fn document_from_json(value: Json) -> Result<ModelDocument, ModelError> {
    match value.get("version") {
        Some(v) if v.as_u64() == Some(MODEL_VERSION) => {}
        Some(v) => return Err(ModelError::VersionUnsupported(v.to_string())),
        None => return Err(invalid("version", "missing")),
    }
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        invalid(path, e.into_inner())
    })
}

/// Validate a document and load its schemas and pipelines. The specs are
/// returned, not started. Nothing is loaded unless everything validates.
pub fn import_document(
    doc: &ModelDocument,
    pipelines: &PipelineLibrary,
    schemas: &SchemaRegistry,
) -> Result<Vec<NodeSpec>, ModelError> {
    if doc.version != MODEL_VERSION {
        return Err(ModelError::VersionUnsupported(doc.version.to_string()));
    }
    let mut batch: Vec<MessageSchema> = Vec::new();
    for (i, text) in doc.schemas.iter().enumerate() {
        batch.extend(parse_schemas(text).map_err(|e| invalid(format!("schemas[{i}]"), e))?);
    }
    let mut parsed = Vec::new();
    for (i, p) in doc.pipelines.iter().enumerate() {
        parsed.push(parse_pipeline(&p.name, &p.text).map_err(|e| invalid(format!("pipelines[{i}].text"), e))?);
    }
    let defined: BTreeSet<&str> = doc.pipelines.iter().map(|p| p.name.as_str()).collect();
    let new_schemas: BTreeSet<&str> = batch.iter().map(|s| s.name.as_str()).collect();
    let mut names = BTreeSet::new();
    for (i, spec) in doc.nodes.iter().enumerate() {
        let at = format!("nodes[{i}]");
        spec.validate().map_err(|e| invalid(&at, e))?;
        if !names.insert(spec.name.as_str()) {
            return Err(invalid(format!("{at}.name"), format!("node `{}` appears twice", spec.name)));
        }
        for p in spec.pipeline_refs() {
            if !defined.contains(p) && pipelines.get(p).is_none() {
                return Err(invalid(&at, format!("pipeline `{p}` is not defined")));
            }
        }
        let used = spec.endpoints().into_iter().filter_map(|(_, e)| e.schema.clone()).chain(spec.replace.values().filter_map(|r| r.schema.clone()));
        for s in used {
            if !new_schemas.contains(s.as_str()) && schemas.descriptor(&s).is_none() {
                return Err(invalid(&at, format!("schema `{s}` is not defined")));
            }
        }
    }
    if !batch.is_empty() {
        schemas.define_all(batch).map_err(|e| invalid("schemas", e))?;
    }
    for p in parsed {
        pipelines.define(p);
    }
    Ok(doc.nodes.clone())
}
