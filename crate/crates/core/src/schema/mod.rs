//! Message schemas, decoded values and the binary codec.

mod codec;
mod path;
mod registry;
mod render;
mod text;
mod types;

pub use codec::{decode, encode, CodecError};
pub use path::{FieldPath, PathError, PathStep, ResolvedPath};
pub use render::render_message;
pub use registry::{SchemaError, SchemaRegistry, BUILTIN_SCHEMAS};
pub use text::{parse_schema, parse_schemas, SchemaTextError};
pub use types::{
    is_identifier, Field, FieldType, Layout, MessageSchema, MessageValue, RawPayload, ScalarType, SchemaId, Shape,
    ShapeField, Value,
};
