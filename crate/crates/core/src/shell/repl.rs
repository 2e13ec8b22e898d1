//! One interactive session: a selected node, multi-line input and text
//! rendering of results. Errors are printed; nothing ends the session.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, Write};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde_json::{json, Value as Json};

use super::command::{parse_command, to_request, Command, LineAssembler, HELP};
use super::exec::{ApiError, Controller};
use super::model::{document_from_json, to_canonical_json};
use crate::bus::TopicName;

pub struct Repl {
    controller: Arc<Controller>,
    selected: Option<String>,
    lines: LineAssembler,
    /// Set (by SIGINT) to stop a running `topic echo`.
    pub interrupt: Arc<AtomicBool>,
    /// Echo timeout when the command gives none; `None` runs until
    /// interrupted.
    pub echo_timeout: Option<Duration>,
}

impl Repl {
    pub fn new(controller: Arc<Controller>) -> Repl {
        Repl {
            controller,
            selected: None,
            lines: LineAssembler::new(),
            interrupt: Arc::new(AtomicBool::new(false)),
            echo_timeout: Some(Duration::from_secs(1)),
        }
    }

    pub fn selected(&self) -> Option<&str> {
        self.selected.as_deref()
    }

    pub fn prompt(&self) -> String {
        if self.lines.is_pending() {
            return "... ".to_string();
        }
        match &self.selected {
            Some(n) => format!("nw:{n}> "),
            None => "nw> ".to_string(),
        }
    }

    /// Drop a half-entered multi-line command. True if there was one.
    pub fn discard_pending(&mut self) -> bool {
        let pending = self.lines.is_pending();
        self.lines.reset();
        pending
    }

    /// Feed one physical line. Output lines are passed to `out` as they
    /// are produced (echo streams).
    pub fn feed(&mut self, line: &str, out: &mut dyn FnMut(&str)) {
        if let Some(text) = self.lines.feed(line) {
            self.eval_streaming(&text, out);
        }
    }

    /// Evaluate one complete command and collect its output.
    pub fn eval(&mut self, text: &str) -> String {
        let mut s = String::new();
        self.eval_streaming(text, &mut |l| {
            s.push_str(l);
            s.push('\n');
        });
        s
    }

    fn eval_streaming(&mut self, text: &str, out: &mut dyn FnMut(&str)) {
        let cmd = match parse_command(text) {
            Ok(c) => c,
            Err(e) => {
                out(&format!("error: {}", e.message));
                out(&e.caret(text));
                return;
            }
        };
        if let Err(e) = self.run(&cmd, out) {
            out(&format!("error: {}: {}", e.kind, e.message));
        }
    }

    fn run(&mut self, cmd: &Command, out: &mut dyn FnMut(&str)) -> Result<(), ApiError> {
        match cmd {
            Command::Empty => return Ok(()),
            Command::Help => {
                HELP.lines().for_each(&mut *out);
                return Ok(());
            }
            Command::TopicEcho { topic, count, timeout } => {
                let t = TopicName::parse(topic)?;
                let timeout = timeout.map(|s| Duration::try_from_secs_f64(s).unwrap_or(Duration::MAX)).or(self.echo_timeout);
                self.interrupt.store(false, Ordering::SeqCst);
                self.controller.echo(&t, *count, timeout, &self.interrupt, |l| out(&l))?;
                return Ok(());
            }
            Command::ModelExport { node, file } => {
                let doc = self.controller.execute("model.export", &json!({ "node": node }))?;
                let doc = document_from_json(doc)?;
                fs::write(file, to_canonical_json(&doc)).map_err(|e| ApiError::new("Io", format!("{file}: {e}")))?;
                out(&format!("exported {node} to {file}"));
                return Ok(());
            }
            Command::ModelImport(file) => {
                let text = fs::read_to_string(file).map_err(|e| ApiError::new("Io", format!("{file}: {e}")))?;
                let r = self.controller.execute("model.import", &json!({ "document": text }))?;
                let names: Vec<&str> = r["nodes"].as_array().into_iter().flatten().filter_map(Json::as_str).collect();
                out(&format!("imported {} (declared, not created)", names.join(", ")));
                return Ok(());
            }
            _ => {}
        }
        let (op, args) = to_request(cmd, self.selected.as_deref())
            .map_err(|e| ApiError::new("NoNodeSelected", e.message))?
            .expect("local commands handled above");
        let result = self.controller.execute(op, &args)?;
        if let Command::Node(name) = cmd {
            self.selected = Some(name.clone());
        }
        render(op, &result).lines().for_each(out);
        Ok(())
    }

    /// Read commands from `input` until EOF, writing prompts and output.
    pub fn run_stream(&mut self, input: impl BufRead, output: &mut impl Write, interactive: bool) {
        let mut lines = input.lines();
        loop {
            if interactive {
                let _ = write!(output, "{}", self.prompt());
                let _ = output.flush();
            }
            let Some(Ok(line)) = lines.next() else { break };
            self.feed(&line, &mut |l| {
                let _ = writeln!(output, "{l}");
                let _ = output.flush();
            });
        }
        if self.lines.is_pending() {
            let _ = writeln!(output, "error: input ended inside an unclosed brace");
            self.lines.reset();
        }
    }
}

fn pid(v: &Json) -> String {
    v.as_u64().map(|p| format!(" pid {p}")).unwrap_or_default()
}

fn proc_state(p: &Json) -> String {
    let st = if p["state"].is_object() { &p["state"] } else { p };
    match (st["state"].as_str(), &st["code"], &st["signal"]) {
        (Some(s), c, _) if c.is_i64() => format!("{s} ({c})"),
        (Some(s), _, sig) if sig.is_i64() => format!("{s} (signal {sig})"),
        (s, _, _) => s.unwrap_or("?").to_string(),
    }
}

fn list(v: &Json) -> impl Iterator<Item = &Json> {
    v.as_array().into_iter().flatten()
}

fn str_list(v: &Json) -> String {
    list(v).filter_map(Json::as_str).collect::<Vec<_>>().join(", ")
}

/// Text form of an operation result.
pub fn render(op: &str, r: &Json) -> String {
    let mut s = String::new();
    match op {
        "node.declare" => {
            let verb = if r["new"].as_bool() == Some(true) { "declared" } else { "selected" };
            let _ = write!(s, "{verb} {} ({})", r["name"].as_str().unwrap_or(""), r["state"].as_str().unwrap_or(""));
        }
        "node.list" => {
            for n in list(r) {
                let mode = n["mode"].as_str().map(|m| format!(" [{m}]")).unwrap_or_default();
                let _ = writeln!(s, "{}  {}{mode}{}", n["name"].as_str().unwrap_or(""), n["state"].as_str().unwrap_or(""), pid(&n["pid"]));
            }
        }
        "node.info" => {
            let _ = writeln!(s, "node {}  {}", r["name"].as_str().unwrap_or(""), r["state"].as_str().unwrap_or(""));
            if let Some(m) = r["mode"].as_str() {
                let _ = writeln!(s, "mode: {m}");
            }
            let g = &r["graph"];
            if !g.is_null() {
                for (label, key) in [("publications", "publications"), ("subscriptions", "subscriptions")] {
                    let _ = writeln!(s, "{label}:");
                    for e in list(&g[key]) {
                        let (topic, req) = (e["topic"].as_str().unwrap_or(""), e["requested"].as_str().unwrap_or(""));
                        let schema = e["schema"].as_str().unwrap_or("*");
                        if topic == req {
                            let _ = writeln!(s, "  {topic} [{schema}]");
                        } else {
                            let _ = writeln!(s, "  {req} -> {topic} [{schema}]");
                        }
                    }
                }
            }
            if r["stats"].is_object() {
                let st = &r["stats"];
                let _ = writeln!(
                    s,
                    "handled {}  published {}  dropped {}  errors {}",
                    st["handled"], st["published"], st["dropped"], st["errors"]
                );
            }
            if r["spec"].is_object() {
                let _ = writeln!(s, "spec: {}", r["spec"]);
            }
        }
        "node.log" => list(&r["lines"]).filter_map(Json::as_str).for_each(|l| {
            let _ = writeln!(s, "{l}");
        }),
        "node.endpoint" => {
            let _ = write!(s, "ok {}", r["id"].as_str().unwrap_or(""));
        }
        "node.timer" => {
            let _ = write!(s, "timer {}", r["id"]);
        }
        "node.create" => {
            let _ = write!(s, "created {} ({})", r["name"].as_str().unwrap_or(""), r["mode"].as_str().unwrap_or(""));
        }
        "node.stop" => {
            let _ = write!(s, "stopped {}", r["name"].as_str().unwrap_or(""));
        }
        "node.unwrap" => {
            let _ = write!(s, "unwrapped {}", r["name"].as_str().unwrap_or(""));
        }
        "node.write" | "topic.pub" => {
            let _ = write!(s, "sent seq {}", r["seq"]);
        }
        "pipeline.define" | "pipeline.get" => {
            let _ = write!(s, "{}", r["text"].as_str().unwrap_or(""));
        }
        "pipeline.list" => {
            let _ = write!(s, "{}", str_list(r));
        }
        "schema.define" => {
            let _ = write!(s, "defined {}", str_list(&r["names"]));
        }
        "param.set" => {
            let _ = write!(s, "{} = {} (version {})", r["name"].as_str().unwrap_or(""), r["value"], r["version"]);
        }
        "param.list" => {
            if let Some(m) = r.as_object() {
                for (k, v) in m {
                    let _ = writeln!(s, "{k} = {}", v.get("value").unwrap_or(v));
                }
            }
        }
        "topic.list" => {
            for t in list(r) {
                let _ = writeln!(s, "{}", t["name"].as_str().unwrap_or(""));
            }
        }
        "topic.info" => {
            let t = &r["topic"];
            let _ = writeln!(s, "topic {}", t["name"].as_str().unwrap_or(""));
            let _ = writeln!(s, "type: {}", t["schema"].as_str().unwrap_or("*"));
            let _ = writeln!(s, "publishers: {}", str_list(&t["publishers"]));
            let _ = writeln!(s, "subscribers: {}", str_list(&t["subscribers"]));
            for a in list(&r["aliases"]) {
                let _ = writeln!(
                    s,
                    "alias: {} {} -> {}",
                    a["node"].as_str().unwrap_or(""),
                    a["external"].as_str().unwrap_or(""),
                    a["internal"].as_str().unwrap_or("")
                );
            }
        }
        "process.list" => {
            for p in list(r) {
                let _ = writeln!(s, "{}  {}{}", p["name"].as_str().unwrap_or(""), proc_state(p), pid(&p["pid"]));
            }
        }
        "process.launch" => {
            let _ = write!(s, "launched {}{}", r["name"].as_str().unwrap_or(""), pid(&r["pid"]));
        }
        "process.stop" => {
            let _ = write!(s, "stopped {}: {}", r["name"].as_str().unwrap_or(""), proc_state(r));
        }
        "graph.get" => {
            let _ = write!(s, "{}", serde_json::to_string_pretty(r).unwrap_or_default());
        }
        _ => {
            if r.as_object().is_some_and(|m| !m.is_empty()) {
                let _ = write!(s, "{r}");
            } else {
                let _ = write!(s, "ok");
            }
        }
    }
    s.trim_end().to_string()
}
