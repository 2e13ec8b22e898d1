//! Interactive control: the command language, the executor shared by the
//! REPL and the control API, and model documents.

mod api;
mod command;
mod exec;
mod model;
mod repl;

pub use command::{parse_command, to_request, Command, CommandError, LineAssembler, HELP};
pub use exec::{ApiError, Controller, Event, EventHub, Listener, TapGuard};
pub use model::{
    document_from_json, export_document, import_document, parse_document, to_canonical_json, ModelDocument, ModelError,
    PipelineText, MODEL_VERSION,
};
pub use api::{ApiClient, ApiServer, ClientError, DEFAULT_CONTROL_PORT, DEFAULT_SAMPLE_RATE};
pub use repl::{render, Repl};
