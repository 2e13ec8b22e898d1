//! The line grammar of the interactive shell.

use serde_json::{json, Value as Json};

use crate::node::{Direction, EndpointSet};

/// Malformed shell input; `column` is 1-based within the command text.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{column}: {message}")]
pub struct CommandError {
    pub column: usize,
    pub message: String,
}

impl CommandError {
    pub fn caret(&self, line: &str) -> String {
        let first = line.lines().next().unwrap_or("");
        format!("{first}\n{}^", " ".repeat(self.column.saturating_sub(1)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    Empty,
    Help,
    /// Select a node, declaring it when new.
    Node(String),
    NodeList,
    NodeInfo(String),
    NodeLog(String, usize),
    Base { package: String, node: String },
    Endpoint { set: EndpointSet, direction: Direction, topic: String, schema: Option<String>, pipeline: Option<String> },
    RemoveEndpoint { set: EndpointSet, direction: Direction, topic: String },
    Replace { from: String, to: String, pipeline: String, schema: Option<String> },
    RemoveReplace(String),
    Timer { period: f64, pipeline: String },
    RemoveTimer(u32),
    /// Full `pipeline NAME { ... }` text.
    PipelineDef(String),
    PipelineList,
    PipelineShow(String),
    Schema(String),
    Create,
    Stop,
    Unwrap,
    Write { topic: String, message: String },
    ParamSet { name: String, value: f64 },
    ParamBind { name: String, value: f64 },
    ParamList,
    TopicList,
    TopicInfo(String),
    TopicEcho { topic: String, count: Option<usize>, timeout: Option<f64> },
    TopicPub { topic: String, message: String },
    ModelExport { node: String, file: String },
    ModelImport(String),
    Launch { package: String, node: String, name: Option<String> },
    ProcessList,
    ProcessStop(String),
    Graph,
}

pub const HELP: &str = "\
node NAME                                  select a node, declaring it if new
base PACKAGE NODE                          wrap a base node
reuse publish|subscribe TOPIC [type SCHEMA] [pipeline NAME]
new publish TOPIC [type SCHEMA]
new subscribe TOPIC [type SCHEMA] [pipeline NAME]
replace TOPIC as TOPIC pipeline NAME [type SCHEMA]
timer PERIOD pipeline NAME
remove reuse|new publish|subscribe TOPIC   remove replace TOPIC   remove timer ID
pipeline NAME { ... }                      define a pipeline (may span lines)
pipeline list | pipeline show NAME
schema NAME { field: type, ... }           define a message schema
create | stop | unwrap                     act on the selected node
write TOPIC SCHEMA{...}                    publish from the selected node
param set NAME VALUE | param bind NAME VALUE | param list
node list | node info NAME | node log NAME [LINES]
topic list | topic info TOPIC | topic pub TOPIC SCHEMA{...}
topic echo TOPIC [count N] [timeout SECONDS]
model export NODE FILE | model import FILE
launch PACKAGE NODE [NAME] | process list | process stop NAME
graph | help";

struct Cursor<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.text.len() && self.text.as_bytes()[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn column(&self) -> usize {
        self.text[..self.pos].chars().count() + 1
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T, CommandError> {
        Err(CommandError { column: self.column(), message: message.into() })
    }

    fn word(&mut self) -> Option<&'a str> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.text.len() && !self.text.as_bytes()[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        (self.pos > start).then(|| &self.text[start..self.pos])
    }

    fn need(&mut self, what: &str) -> Result<&'a str, CommandError> {
        self.skip_ws();
        match self.word() {
            Some(w) => Ok(w),
            None => self.err(format!("expected {what}")),
        }
    }

    fn keyword(&mut self, options: &[&str]) -> Result<&'a str, CommandError> {
        self.skip_ws();
        let at = self.pos;
        match self.word() {
            Some(w) if options.contains(&w) => Ok(w),
            _ => {
                self.pos = at;
                self.err(format!("expected {}", options.join(" or ")))
            }
        }
    }

    fn number<T: std::str::FromStr>(&mut self, what: &str) -> Result<T, CommandError> {
        self.skip_ws();
        let at = self.pos;
        let w = self.need(what)?;
        w.parse().or_else(|_| {
            self.pos = at;
            self.err(format!("expected {what}, found `{w}`"))
        })
    }

    /// Everything left, trimmed.
    fn rest(&mut self, what: &str) -> Result<&'a str, CommandError> {
        self.skip_ws();
        let r = self.text[self.pos..].trim_end();
        if r.is_empty() {
            return self.err(format!("expected {what}"));
        }
        self.pos = self.text.len();
        Ok(r)
    }

    fn end(&mut self) -> Result<(), CommandError> {
        self.skip_ws();
        if self.pos < self.text.len() {
            return self.err("unexpected trailing input");
        }
        Ok(())
    }

    /// `[type SCHEMA] [pipeline NAME]` in either order.
    fn options(&mut self, allow_pipeline: bool) -> Result<(Option<String>, Option<String>), CommandError> {
        let (mut schema, mut pipeline) = (None, None);
        loop {
            self.skip_ws();
            let at = self.pos;
            match self.word() {
                None => return Ok((schema, pipeline)),
                Some("type") if schema.is_none() => schema = Some(self.need("a schema name")?.to_string()),
                Some("pipeline") if allow_pipeline && pipeline.is_none() => {
                    pipeline = Some(self.need("a pipeline name")?.to_string())
                }
                Some(w) => {
                    self.pos = at;
                    return self.err(format!("unexpected `{w}`"));
                }
            }
        }
    }
}

fn set_of(w: &str) -> EndpointSet {
    if w == "reuse" {
        EndpointSet::Reuse
    } else {
        EndpointSet::New
    }
}

fn direction_of(w: &str) -> Direction {
    if w == "publish" {
        Direction::Publish
    } else {
        Direction::Subscribe
    }
}

pub fn parse_command(text: &str) -> Result<Command, CommandError> {
    let mut c = Cursor { text, pos: 0 };
    let Some(head) = c.word() else { return Ok(Command::Empty) };
    if head.starts_with('#') {
        return Ok(Command::Empty);
    }
    let cmd = match head {
        "help" => Command::Help,
        "graph" => Command::Graph,
        "create" => Command::Create,
        "stop" => Command::Stop,
        "unwrap" => Command::Unwrap,
        "node" => match c.need("a node name or list|info|log")? {
            "list" => Command::NodeList,
            "info" => Command::NodeInfo(c.need("a node name")?.to_string()),
            "log" => {
                let name = c.need("a node name")?.to_string();
                c.skip_ws();
                let lines = if c.pos < c.text.len() { c.number("a line count")? } else { 20 };
                Command::NodeLog(name, lines)
            }
            name => Command::Node(name.to_string()),
        },
        "base" => Command::Base { package: c.need("a package")?.to_string(), node: c.need("a node")?.to_string() },
        "reuse" | "new" => {
            let set = set_of(head);
            let direction = direction_of(c.keyword(&["publish", "subscribe"])?);
            let topic = c.need("a topic")?.to_string();
            let allow = !(set == EndpointSet::New && direction == Direction::Publish);
            let (schema, pipeline) = c.options(allow)?;
            Command::Endpoint { set, direction, topic, schema, pipeline }
        }
        "remove" => match c.keyword(&["reuse", "new", "replace", "timer"])? {
            "replace" => Command::RemoveReplace(c.need("a topic")?.to_string()),
            "timer" => Command::RemoveTimer(c.number("a timer id")?),
            set => {
                let set = set_of(set);
                let direction = direction_of(c.keyword(&["publish", "subscribe"])?);
                Command::RemoveEndpoint { set, direction, topic: c.need("a topic")?.to_string() }
            }
        },
        "replace" => {
            let from = c.need("a topic")?.to_string();
            c.keyword(&["as"])?;
            let to = c.need("a topic")?.to_string();
            let (schema, pipeline) = c.options(true)?;
            let Some(pipeline) = pipeline else { return c.err("expected `pipeline NAME`") };
            Command::Replace { from, to, pipeline, schema }
        }
        "timer" => {
            let period = c.number("a period in seconds")?;
            c.keyword(&["pipeline"])?;
            Command::Timer { period, pipeline: c.need("a pipeline name")?.to_string() }
        }
        "pipeline" => {
            let save = c.pos;
            match c.word() {
                Some("list") if c.text[c.pos..].trim().is_empty() => Command::PipelineList,
                Some("show") if !c.text[c.pos..].contains('{') => Command::PipelineShow(c.need("a pipeline name")?.to_string()),
                Some(_) => {
                    c.pos = save;
                    if !text.contains('{') {
                        return c.err("expected `NAME { ... }`");
                    }
                    Command::PipelineDef(text.trim().to_string())
                }
                None => return c.err("expected a pipeline name"),
            }
        }
        "schema" => Command::Schema(text.trim().to_string()),
        "write" => {
            let topic = c.need("a topic")?.to_string();
            Command::Write { topic, message: c.rest("a message such as Twist{linear.x := 1}")?.to_string() }
        }
        "param" => match c.keyword(&["set", "bind", "list"])? {
            "list" => Command::ParamList,
            kind => {
                let name = c.need("a parameter name")?.to_string();
                let value = c.number("a number")?;
                if kind == "set" {
                    Command::ParamSet { name, value }
                } else {
                    Command::ParamBind { name, value }
                }
            }
        },
        "topic" => match c.keyword(&["list", "info", "echo", "pub"])? {
            "list" => Command::TopicList,
            "info" => Command::TopicInfo(c.need("a topic")?.to_string()),
            "pub" => {
                let topic = c.need("a topic")?.to_string();
                Command::TopicPub { topic, message: c.rest("a message such as Twist{linear.x := 1}")?.to_string() }
            }
            _ => {
                let topic = c.need("a topic")?.to_string();
                let (mut count, mut timeout) = (None, None);
                loop {
                    c.skip_ws();
                    if c.pos >= c.text.len() {
                        break;
                    }
                    match c.keyword(&["count", "timeout"])? {
                        "count" => count = Some(c.number("a count")?),
                        _ => {
                            let at = c.pos;
                            let secs: f64 = c.number("seconds")?;
                            if !(secs >= 0.0 && secs.is_finite()) {
                                c.pos = at;
                                return c.err("timeout must be a non-negative number of seconds");
                            }
                            timeout = Some(secs);
                        }
                    }
                }
                Command::TopicEcho { topic, count, timeout }
            }
        },
        "model" => match c.keyword(&["export", "import"])? {
            "export" => Command::ModelExport { node: c.need("a node name")?.to_string(), file: c.need("a file")?.to_string() },
            _ => Command::ModelImport(c.need("a file")?.to_string()),
        },
        "launch" => {
            let package = c.need("a package")?.to_string();
            let node = c.need("a node")?.to_string();
            let name = c.word().map(str::to_string);
            Command::Launch { package, node, name }
        }
        "process" => match c.keyword(&["list", "stop"])? {
            "list" => Command::ProcessList,
            _ => Command::ProcessStop(c.need("a process name")?.to_string()),
        },
        other => {
            c.pos = 0;
            return c.err(format!("unknown command `{other}`; try `help`"));
        }
    };
    match cmd {
        Command::PipelineDef(_) | Command::Schema(_) | Command::Write { .. } | Command::TopicPub { .. } => {}
        _ => c.end()?,
    }
    Ok(cmd)
}

/// The selected node, needed by commands that act on "the" node.
fn target(selected: Option<&str>) -> Result<String, CommandError> {
    selected
        .map(str::to_string)
        .ok_or_else(|| CommandError { column: 1, message: "no node selected; use `node NAME` first".into() })
}

/// The control-API request equivalent to a command: `(op, args)`.
/// Commands that only exist locally (help, model files) return `None`.
pub fn to_request(cmd: &Command, selected: Option<&str>) -> Result<Option<(&'static str, Json)>, CommandError> {
    let r = match cmd {
        Command::Empty | Command::Help | Command::ModelExport { .. } | Command::ModelImport(_) => return Ok(None),
        Command::TopicEcho { .. } => return Ok(None),
        Command::Node(name) => ("node.declare", json!({ "name": name })),
        Command::NodeList => ("node.list", json!({})),
        Command::NodeInfo(name) => ("node.info", json!({ "name": name })),
        Command::NodeLog(name, n) => ("node.log", json!({ "name": name, "lines": n })),
        Command::Base { package, node } => ("node.base", json!({ "node": target(selected)?, "package": package, "base": node })),
        Command::Endpoint { set, direction, topic, schema, pipeline } => (
            "node.endpoint",
            json!({ "node": target(selected)?, "set": set, "direction": direction, "topic": topic, "type": schema, "pipeline": pipeline }),
        ),
        Command::RemoveEndpoint { set, direction, topic } => (
            "node.remove_endpoint",
            json!({ "node": target(selected)?, "set": set, "direction": direction, "topic": topic }),
        ),
        Command::Replace { from, to, pipeline, schema } => (
            "node.replace",
            json!({ "node": target(selected)?, "from": from, "to": to, "pipeline": pipeline, "type": schema }),
        ),
        Command::RemoveReplace(from) => ("node.remove_replace", json!({ "node": target(selected)?, "from": from })),
        Command::Timer { period, pipeline } => ("node.timer", json!({ "node": target(selected)?, "period": period, "pipeline": pipeline })),
        Command::RemoveTimer(id) => ("node.remove_timer", json!({ "node": target(selected)?, "id": id })),
        Command::PipelineDef(text) => ("pipeline.define", json!({ "text": text })),
        Command::PipelineList => ("pipeline.list", json!({})),
        Command::PipelineShow(name) => ("pipeline.get", json!({ "name": name })),
        Command::Schema(text) => ("schema.define", json!({ "text": text })),
        Command::Create => ("node.create", json!({ "node": target(selected)? })),
        Command::Stop => ("node.stop", json!({ "node": target(selected)? })),
        Command::Unwrap => ("node.unwrap", json!({ "node": target(selected)? })),
        Command::Write { topic, message } => ("node.write", json!({ "node": target(selected)?, "topic": topic, "message": message })),
        Command::ParamSet { name, value } => ("param.set", json!({ "name": name, "value": value })),
        Command::ParamBind { name, value } => ("node.param", json!({ "node": target(selected)?, "name": name, "value": value })),
        Command::ParamList => ("param.list", json!({})),
        Command::TopicList => ("topic.list", json!({})),
        Command::TopicInfo(t) => ("topic.info", json!({ "topic": t })),
        Command::TopicPub { topic, message } => ("topic.pub", json!({ "topic": topic, "message": message })),
        Command::Launch { package, node, name } => ("process.launch", json!({ "package": package, "node": node, "name": name })),
        Command::ProcessList => ("process.list", json!({})),
        Command::ProcessStop(name) => ("process.stop", json!({ "name": name })),
        Command::Graph => ("graph.get", json!({})),
    };
    Ok(Some(r))
}

/// Joins physical lines into commands: a line that opens more braces than
/// it closes continues until they balance.
#[derive(Debug, Default)]
pub struct LineAssembler {
    buf: String,
    depth: i64,
}

impl LineAssembler {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_pending(&self) -> bool {
        !self.buf.is_empty()
    }

    /// Feed one line; returns a complete command when one is ready.
    pub fn feed(&mut self, line: &str) -> Option<String> {
        let mut in_str = false;
        for ch in line.chars() {
            match ch {
                '"' => in_str = !in_str,
                '{' if !in_str => self.depth += 1,
                '}' if !in_str => self.depth -= 1,
                _ => {}
            }
        }
        if !self.buf.is_empty() {
            self.buf.push('\n');
        }
        self.buf.push_str(line);
        if self.depth > 0 {
            return None;
        }
        self.depth = 0;
        Some(std::mem::take(&mut self.buf))
    }

    /// Abandon a partial command.
    pub fn reset(&mut self) {
        self.buf.clear();
        self.depth = 0;
    }
}
