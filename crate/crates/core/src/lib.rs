//! Interactive node wrapping on a self-contained publish/subscribe bus.
//!
//! Nodes are declared with a fluent builder, can interpose on the topics of
//! an already running node (a *wrapping node* around a *base node*), and
//! stay reconfigurable while they run: endpoints, handler pipelines and
//! parameters can all be changed live from the shell or the control API.

pub mod bus;
pub mod launcher;
pub mod node;
pub mod pipeline;
pub mod schema;
pub mod wrap;
pub mod demo;
pub mod shell;
