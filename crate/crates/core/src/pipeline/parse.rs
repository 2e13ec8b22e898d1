use std::fmt;

use super::ast::{BinOp, Emit, Expr, Func, MessageLiteral, PipelineSpec, Stage, Stmt};
use crate::bus::TopicName;
use crate::schema::{is_identifier, FieldPath};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseErrorKind {
    Syntax,
    UnknownStageKind,
    BadFieldPath,
}

/// Parse diagnostic with a 1-based line and column.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{line}:{column}: {message}")]
pub struct ParseError {
    pub kind: ParseErrorKind,
    pub line: usize,
    pub column: usize,
    pub message: String,
}

impl ParseError {
    /// The offending source line with a caret under the error column.
    pub fn caret(&self, source: &str) -> String {
        let line = source.lines().nth(self.line.saturating_sub(1)).unwrap_or("");
        format!("{line}\n{}^", " ".repeat(self.column.saturating_sub(1)))
    }
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
    /// Brace nesting; newlines only separate stages at depth zero.
    depth: usize,
}

type PResult<T> = Result<T, ParseError>;

fn is_topic_char(c: u8) -> bool {
    c.is_ascii_alphanumeric() || c == b'_' || c == b'/'
}

fn is_path_char(c: u8) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, b'_' | b'.' | b'[' | b']')
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Self {
        Parser { src, pos: 0, depth: 0 }
    }

    fn error_at(&self, pos: usize, kind: ParseErrorKind, message: impl Into<String>) -> ParseError {
        let before = &self.src[..pos.min(self.src.len())];
        let line = before.matches('\n').count() + 1;
        let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
        ParseError { kind, line, column, message: message.into() }
    }

    fn error(&self, message: impl Into<String>) -> ParseError {
        self.error_at(self.pos, ParseErrorKind::Syntax, message)
    }

    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn peek(&self) -> Option<u8> {
        self.src.as_bytes().get(self.pos).copied()
    }

    /// Skip blanks and comments; newlines too when inside braces.
    fn skip_ws(&mut self) {
        while let Some(c) = self.peek() {
            match c {
                b' ' | b'\t' | b'\r' => self.pos += 1,
                b'\n' if self.depth > 0 => self.pos += 1,
                b'#' => {
                    while self.peek().is_some_and(|c| c != b'\n') {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn skip_separators(&mut self) {
        loop {
            self.skip_ws();
            match self.peek() {
                Some(b'\n') | Some(b';') => self.pos += 1,
                _ => break,
            }
        }
    }

    fn at_end(&mut self) -> bool {
        self.skip_ws();
        self.pos >= self.src.len()
    }

    fn eat(&mut self, token: &str) -> bool {
        self.skip_ws();
        if self.rest().starts_with(token) {
            self.pos += token.len();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, token: &str) -> PResult<()> {
        if self.eat(token) {
            Ok(())
        } else {
            Err(self.error(format!("expected `{token}`")))
        }
    }

    fn peek_word(&mut self) -> Option<&'a str> {
        self.skip_ws();
        let rest = self.rest();
        let len = rest.bytes().take_while(|c| c.is_ascii_alphanumeric() || *c == b'_').count();
        (len > 0 && !rest.as_bytes()[0].is_ascii_digit()).then(|| &rest[..len])
    }

    fn word(&mut self) -> PResult<&'a str> {
        let w = self.peek_word().ok_or_else(|| self.error("expected a name"))?;
        self.pos += w.len();
        Ok(w)
    }

    fn eat_keyword(&mut self, kw: &str) -> bool {
        if self.peek_word() == Some(kw) {
            self.pos += kw.len();
            true
        } else {
            false
        }
    }

    fn expect_keyword(&mut self, kw: &str) -> PResult<()> {
        if self.eat_keyword(kw) {
            Ok(())
        } else {
            Err(self.error(format!("expected `{kw}`")))
        }
    }

    fn string(&mut self) -> PResult<String> {
        self.skip_ws();
        if self.peek() != Some(b'"') {
            return Err(self.error("expected a quoted string"));
        }
        let start = self.pos;
        self.pos += 1;
        let mut out = String::new();
        let mut chars = self.rest().char_indices();
        while let Some((i, c)) = chars.next() {
            match c {
                '"' => {
                    self.pos += i + 1;
                    return Ok(out);
                }
                '\\' => match chars.next() {
                    Some((_, 'n')) => out.push('\n'),
                    Some((_, c @ ('"' | '\\'))) => out.push(c),
                    _ => return Err(self.error_at(self.pos + i, ParseErrorKind::Syntax, "bad escape")),
                },
                '\n' => break,
                c => out.push(c),
            }
        }
        Err(self.error_at(start, ParseErrorKind::Syntax, "unterminated string"))
    }

    fn topic(&mut self) -> PResult<TopicName> {
        self.skip_ws();
        let start = self.pos;
        let text = if self.peek() == Some(b'"') {
            self.string()?
        } else {
            let len = self.rest().bytes().take_while(|c| is_topic_char(*c)).count();
            self.pos += len;
            self.src[start..self.pos].to_string()
        };
        TopicName::parse(&text).map_err(|_| self.error_at(start, ParseErrorKind::Syntax, format!("invalid topic `{text}`")))
    }

    fn number(&mut self) -> PResult<f64> {
        self.skip_ws();
        let start = self.pos;
        let b = self.src.as_bytes();
        let mut i = self.pos;
        if matches!(b.get(i), Some(b'-' | b'+')) {
            i += 1;
        }
        let digits_start = i;
        while b.get(i).is_some_and(|c| c.is_ascii_digit()) {
            i += 1;
        }
        if b.get(i) == Some(&b'.') {
            i += 1;
            while b.get(i).is_some_and(|c| c.is_ascii_digit()) {
                i += 1;
            }
        }
        if i == digits_start || (i == digits_start + 1 && b[digits_start] == b'.') {
            return Err(self.error("expected a number"));
        }
        if matches!(b.get(i), Some(b'e' | b'E')) {
            let mut j = i + 1;
            if matches!(b.get(j), Some(b'-' | b'+')) {
                j += 1;
            }
            if b.get(j).is_some_and(|c| c.is_ascii_digit()) {
                while b.get(j).is_some_and(|c| c.is_ascii_digit()) {
                    j += 1;
                }
                i = j;
            }
        }
        let v: f64 = self.src[start..i].parse().map_err(|_| self.error("expected a number"))?;
        self.pos = i;
        Ok(v)
    }

    /// A field path, with an optional leading `msg.`.
    fn path(&mut self) -> PResult<FieldPath> {
        self.skip_ws();
        let start = self.pos;
        let len = self.rest().bytes().take_while(|c| is_path_char(*c)).count();
        let mut text = &self.src[start..start + len];
        if let Some(stripped) = text.strip_prefix("msg.") {
            text = stripped;
        }
        let path = FieldPath::parse(text)
            .map_err(|_| self.error_at(start, ParseErrorKind::BadFieldPath, format!("bad field path `{text}`")))?;
        self.pos = start + len;
        Ok(path)
    }

    fn expr(&mut self) -> PResult<Expr> {
        self.binary(1)
    }

    fn peek_binop(&mut self) -> Option<(BinOp, usize)> {
        self.skip_ws();
        let r = self.rest();
        let ops: [(&str, BinOp); 12] = [
            ("||", BinOp::Or),
            ("&&", BinOp::And),
            ("==", BinOp::Eq),
            ("!=", BinOp::Ne),
            ("<=", BinOp::Le),
            (">=", BinOp::Ge),
            ("<", BinOp::Lt),
            (">", BinOp::Gt),
            ("+", BinOp::Add),
            ("-", BinOp::Sub),
            ("*", BinOp::Mul),
            ("/", BinOp::Div),
        ];
        ops.iter().find(|(s, _)| r.starts_with(s)).map(|(s, op)| (*op, s.len()))
    }

    fn binary(&mut self, min_prec: u8) -> PResult<Expr> {
        let mut lhs = self.unary()?;
        while let Some((op, len)) = self.peek_binop() {
            if op.precedence() < min_prec {
                break;
            }
            self.pos += len;
            let rhs = self.binary(op.precedence() + 1)?;
            lhs = Expr::binary(op, lhs, rhs);
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> PResult<Expr> {
        self.skip_ws();
        match self.peek() {
            Some(b'!') if !self.rest().starts_with("!=") => {
                self.pos += 1;
                Ok(Expr::Not(Box::new(self.unary()?)))
            }
            Some(b'-') => {
                self.pos += 1;
                Ok(Expr::Neg(Box::new(self.unary()?)))
            }
            _ => self.primary(),
        }
    }

    fn primary(&mut self) -> PResult<Expr> {
        self.skip_ws();
        let start = self.pos;
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                self.depth += 1;
                let e = self.expr();
                self.depth -= 1;
                let e = e?;
                self.expect(")")?;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => Ok(Expr::Num(self.number()?)),
            Some(_) => {
                let Some(word) = self.peek_word() else {
                    return Err(self.error("expected an expression"));
                };
                match word {
                    "true" | "false" => {
                        self.pos += word.len();
                        Ok(Expr::Bool(word == "true"))
                    }
                    "msg" if self.src[self.pos + 3..].starts_with('.') => Ok(Expr::Field(self.path()?)),
                    "param" => {
                        self.pos += word.len();
                        self.expect("(")?;
                        let at = self.pos;
                        let name = self.string()?;
                        if !is_identifier(&name) {
                            return Err(self.error_at(at, ParseErrorKind::Syntax, format!("invalid parameter name `{name}`")));
                        }
                        self.expect(")")?;
                        Ok(Expr::Param(name))
                    }
                    _ => {
                        let Some(f) = Func::from_name(word) else {
                            return Err(self.error(format!("unknown name `{word}`")));
                        };
                        self.pos += word.len();
                        self.expect("(")?;
                        self.depth += 1;
                        let mut args = Vec::new();
                        let result = (|| {
                            loop {
                                args.push(self.expr()?);
                                if !self.eat(",") {
                                    break;
                                }
                            }
                            Ok(())
                        })();
                        self.depth -= 1;
                        result?;
                        self.expect(")")?;
                        if args.len() != f.arity() {
                            return Err(self.error_at(
                                start,
                                ParseErrorKind::Syntax,
                                format!("{} takes {} argument(s)", f.name(), f.arity()),
                            ));
                        }
                        Ok(Expr::Call(f, args))
                    }
                }
            }
            None => Err(self.error("expected an expression")),
        }
    }

    fn literal(&mut self) -> PResult<MessageLiteral> {
        let at = self.pos;
        let schema = self.word()?.to_string();
        if !is_identifier(&schema) {
            return Err(self.error_at(at, ParseErrorKind::Syntax, "expected a schema name"));
        }
        self.expect("{")?;
        self.depth += 1;
        let result = (|| {
            let mut fields = Vec::new();
            if !self.eat("}") {
                loop {
                    let path = self.path()?;
                    self.expect(":=")?;
                    fields.push((path, self.expr()?));
                    if self.eat("}") {
                        break;
                    }
                    self.expect(",")?;
                }
            }
            Ok(fields)
        })();
        self.depth -= 1;
        Ok(MessageLiteral { schema, fields: result? })
    }

    fn emit(&mut self) -> PResult<Emit> {
        let message = self.literal()?;
        self.expect_keyword("to")?;
        Ok(Emit { message, topic: self.topic()? })
    }

    fn block(&mut self) -> PResult<Vec<Stmt>> {
        self.expect("{")?;
        self.depth += 1;
        let result = (|| {
            let mut stmts = Vec::new();
            loop {
                self.skip_separators();
                if self.eat("}") {
                    return Ok(stmts);
                }
                if self.at_end() {
                    return Err(self.error("expected `}`"));
                }
                stmts.push(self.stmt()?);
            }
        })();
        self.depth -= 1;
        result
    }

    fn stmt(&mut self) -> PResult<Stmt> {
        self.skip_ws();
        match self.peek_word() {
            Some("if") => {
                self.pos += 2;
                let cond = self.expr()?;
                let then = self.block()?;
                let otherwise = if self.eat_keyword("else") {
                    if self.peek_word() == Some("if") {
                        Some(vec![self.stmt()?])
                    } else {
                        Some(self.block()?)
                    }
                } else {
                    None
                };
                Ok(Stmt::If { cond, then, otherwise })
            }
            Some("drop") => {
                self.pos += 4;
                Ok(Stmt::Drop)
            }
            Some("forward") => {
                self.pos += 7;
                self.expect("(")?;
                let t = self.topic()?;
                self.expect(")")?;
                Ok(Stmt::Forward(t))
            }
            Some("emit") => {
                self.pos += 4;
                Ok(Stmt::Emit(self.emit()?))
            }
            Some(_) => {
                let path = self.path()?;
                self.expect(":=")?;
                Ok(Stmt::Assign(path, self.expr()?))
            }
            None => Err(self.error("expected a statement")),
        }
    }

    fn stage(&mut self) -> PResult<Stage> {
        let start = self.pos;
        let kind = self.word().map_err(|_| self.error_at(start, ParseErrorKind::Syntax, "expected a stage"))?;
        match kind {
            "relay" => {
                self.expect_keyword("to")?;
                Ok(Stage::Relay(self.topic()?))
            }
            "clamp" => {
                let path = self.path()?;
                let at = self.pos;
                let min = self.number()?;
                let max = self.number()?;
                if min > max {
                    return Err(self.error_at(at, ParseErrorKind::Syntax, "clamp minimum exceeds maximum"));
                }
                Ok(Stage::Clamp { path, min, max })
            }
            "scale" => {
                let path = self.path()?;
                Ok(Stage::Scale { path, factor: self.number()? })
            }
            "gate" => Ok(Stage::Gate(self.expr()?)),
            "drop" => Ok(Stage::Drop),
            "log" => Ok(Stage::Log(self.string()?)),
            "expr" => Ok(Stage::Expr(self.block()?)),
            "emit" => Ok(Stage::Expr(vec![Stmt::Emit(self.emit()?)])),
            other => {
                Err(self.error_at(start, ParseErrorKind::UnknownStageKind, format!("unknown stage kind `{other}`")))
            }
        }
    }

    fn stages(&mut self, closing: bool) -> PResult<Vec<Stage>> {
        let mut stages = Vec::new();
        loop {
            self.skip_separators();
            if closing && self.rest().starts_with('}') {
                return Ok(stages);
            }
            if self.at_end() {
                if closing {
                    return Err(self.error("expected `}`"));
                }
                return Ok(stages);
            }
            stages.push(self.stage()?);
            self.skip_ws();
            match self.peek() {
                None | Some(b'\n') | Some(b';') => {}
                Some(b'}') if closing => {}
                _ => return Err(self.error("expected end of stage")),
            }
        }
    }

    fn finish(&mut self) -> PResult<()> {
        self.skip_separators();
        if self.pos < self.src.len() {
            return Err(self.error("unexpected trailing input"));
        }
        Ok(())
    }
}

/// Parse a pipeline body: one stage per line (or `;`-separated).
pub fn parse_pipeline(name: &str, body: &str) -> Result<PipelineSpec, ParseError> {
    if !is_identifier(name) {
        return Err(ParseError {
            kind: ParseErrorKind::Syntax,
            line: 1,
            column: 1,
            message: format!("invalid pipeline name `{name}`"),
        });
    }
    let mut p = Parser::new(body);
    let stages = p.stages(false)?;
    p.finish()?;
    Ok(PipelineSpec { name: name.to_string(), stages })
}

/// Parse `pipeline NAME { ... }`.
pub fn parse_pipeline_def(text: &str) -> Result<PipelineSpec, ParseError> {
    let mut p = Parser::new(text);
    p.skip_separators();
    p.expect_keyword("pipeline")?;
    let name = p.word()?.to_string();
    p.expect("{")?;
    let stages = p.stages(true)?;
    p.expect("}")?;
    p.finish()?;
    Ok(PipelineSpec { name, stages })
}

pub fn parse_expr(text: &str) -> Result<Expr, ParseError> {
    let mut p = Parser::new(text);
    p.depth = 1;
    let e = p.expr()?;
    p.finish()?;
    Ok(e)
}

/// Parse a message constructor such as `Twist{linear.x := 2.0}`.
pub fn parse_literal(text: &str) -> Result<MessageLiteral, ParseError> {
    let mut p = Parser::new(text);
    p.depth = 1;
    let lit = p.literal()?;
    p.finish()?;
    Ok(lit)
}

impl fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParseErrorKind::Syntax => "syntax error",
            ParseErrorKind::UnknownStageKind => "unknown stage kind",
            ParseErrorKind::BadFieldPath => "bad field path",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn relay_velocity() {
        let p = parse_pipeline("relayVelocity", "relay to mobile_base/commands/velocity").unwrap();
        assert_eq!(p.stages, [Stage::Relay(TopicName::parse("/mobile_base/commands/velocity").unwrap())]);
    }

    #[test]
    fn empty_body() {
        assert!(parse_pipeline("p", "").unwrap().stages.is_empty());
        assert!(parse_pipeline("p", "\n  # nothing\n").unwrap().stages.is_empty());
    }

    #[test]
    fn control_velocity() {
        let text = r#"expr { if msg.linear.x > 0 { msg.linear.x := param("speed") }; forward("/mobile_base/commands/velocity") }"#;
        let p = parse_pipeline("controlVelocity", text).unwrap();
        let [Stage::Expr(stmts)] = p.stages.as_slice() else { panic!("{p:?}") };
        assert_eq!(stmts.len(), 2);
        assert_eq!(
            p.body_text(),
            r#"expr { if msg.linear.x > 0.0 { msg.linear.x := param("speed") }; forward(/mobile_base/commands/velocity) }"#
        );
    }

    #[test]
    fn emit_sugar_round_trips() {
        let p = parse_pipeline("tick", "emit Twist{linear.x:=2.0, angular.z:=1.8} to /turtle1/cmd_vel").unwrap();
        assert_eq!(p.body_text(), "emit Twist{linear.x := 2.0, angular.z := 1.8} to /turtle1/cmd_vel");
        assert!(p.has_emit());
    }

    #[test]
    fn multi_line_definition() {
        let text = "pipeline safe {\n  clamp linear.x -5 5\n  expr {\n    if msg.linear.x < 0 {\n      drop\n    }\n    else { msg.angular.z := 1 }\n  }\n  relay to /out\n}";
        let p = parse_pipeline_def(text).unwrap();
        assert_eq!(p.name, "safe");
        assert_eq!(p.stages.len(), 3);
        assert_eq!(parse_pipeline_def(&p.to_string()).unwrap(), p);
    }

    #[test]
    fn diagnostics_carry_positions() {
        let e = parse_pipeline("p", "relay to /a\nfrobnicate x").unwrap_err();
        assert_eq!((e.kind, e.line, e.column), (ParseErrorKind::UnknownStageKind, 2, 1));
        let e = parse_pipeline("p", "clamp linear..x 0 1").unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::BadFieldPath);
        let e = parse_pipeline("p", "gate msg.a >").unwrap_err();
        assert_eq!((e.kind, e.line, e.column), (ParseErrorKind::Syntax, 1, 13));
        assert!(parse_pipeline("p", "clamp x 5 -5").is_err());
        assert!(parse_pipeline("p", "relay to /a extra").is_err());
        assert!(parse_pipeline("p", "expr { foo(1) }").is_err());
    }

    #[test]
    fn precedence() {
        let e = parse_expr("1 + 2 * 3 < 4 && !true || false").unwrap();
        assert_eq!(e.to_string(), "1.0 + 2.0 * 3.0 < 4.0 && !true || false");
        let e = parse_expr("(1 - 2) - (3 - 4)").unwrap();
        assert_eq!(e.to_string(), "1.0 - 2.0 - (3.0 - 4.0)");
        let e = parse_expr("-(1 + msg.a[2].b) * max(1, abs(-2))").unwrap();
        assert_eq!(e.to_string(), "-(1.0 + msg.a[2].b) * max(1.0, abs(-2.0))");
    }

    fn arb_path() -> impl Strategy<Value = FieldPath> {
        prop::collection::vec(("[a-z][a-z0-9_]{0,4}", prop::option::of(0u32..4)), 1..3).prop_map(|parts| {
            let text: Vec<String> = parts
                .into_iter()
                .map(|(n, i)| match i {
                    Some(i) => format!("{n}[{i}]"),
                    None => n,
                })
                .collect();
            FieldPath::parse(&text.join(".")).unwrap()
        })
    }

    fn arb_topic() -> impl Strategy<Value = TopicName> {
        "(/[a-z_]{1,6}){1,3}".prop_map(|t| TopicName::parse(&t).unwrap())
    }

    fn arb_num() -> impl Strategy<Value = f64> {
        prop_oneof![0.0..1e6f64, Just(0.0), Just(1e-9), Just(3e20)]
    }

    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            arb_num().prop_map(Expr::Num),
            any::<bool>().prop_map(Expr::Bool),
            arb_path().prop_map(Expr::Field),
            "[a-z_]{1,6}".prop_map(Expr::Param),
        ];
        leaf.prop_recursive(4, 24, 3, |inner| {
            let ops = prop_oneof![
                Just(BinOp::Or),
                Just(BinOp::And),
                Just(BinOp::Eq),
                Just(BinOp::Ne),
                Just(BinOp::Lt),
                Just(BinOp::Le),
                Just(BinOp::Gt),
                Just(BinOp::Ge),
                Just(BinOp::Add),
                Just(BinOp::Sub),
                Just(BinOp::Mul),
                Just(BinOp::Div),
            ];
            prop_oneof![
                (ops, inner.clone(), inner.clone()).prop_map(|(op, a, b)| Expr::binary(op, a, b)),
                inner.clone().prop_map(|e| Expr::Not(Box::new(e))),
                inner.clone().prop_map(|e| Expr::Neg(Box::new(e))),
                inner.clone().prop_map(|e| Expr::Call(Func::Abs, vec![e])),
                (inner.clone(), inner).prop_map(|(a, b)| Expr::Call(Func::Min, vec![a, b])),
            ]
        })
    }

    fn arb_emit() -> impl Strategy<Value = Emit> {
        ("[A-Z][a-z]{1,5}", prop::collection::vec((arb_path(), arb_expr()), 0..3), arb_topic())
            .prop_map(|(schema, fields, topic)| Emit { message: MessageLiteral { schema, fields }, topic })
    }

    fn arb_stmt() -> impl Strategy<Value = Stmt> {
        let leaf = prop_oneof![
            (arb_path(), arb_expr()).prop_map(|(p, e)| Stmt::Assign(p, e)),
            Just(Stmt::Drop),
            arb_topic().prop_map(Stmt::Forward),
            arb_emit().prop_map(Stmt::Emit),
        ];
        leaf.prop_recursive(2, 8, 3, |inner| {
            (arb_expr(), prop::collection::vec(inner.clone(), 0..3), prop::option::of(prop::collection::vec(inner, 0..2)))
                .prop_map(|(cond, then, otherwise)| Stmt::If { cond, then, otherwise })
        })
    }

    fn arb_stage() -> impl Strategy<Value = Stage> {
        prop_oneof![
            arb_topic().prop_map(Stage::Relay),
            (arb_path(), arb_num(), arb_num())
                .prop_map(|(path, a, b)| Stage::Clamp { path, min: -a.max(b), max: a.max(b) }),
            (arb_path(), arb_num()).prop_map(|(path, factor)| Stage::Scale { path, factor: -factor }),
            arb_expr().prop_map(Stage::Gate),
            Just(Stage::Drop),
            "[ -~]{0,12}".prop_map(Stage::Log),
            prop::collection::vec(arb_stmt(), 0..4).prop_map(Stage::Expr),
        ]
    }

    proptest! {
        #[test]
        fn print_parse_is_a_fixed_point(stages in prop::collection::vec(arb_stage(), 0..5)) {
            let spec = PipelineSpec::new("p", stages);
            let text = spec.body_text();
            let back = parse_pipeline("p", &text).map_err(|e| TestCaseError::fail(format!("{e}\n{text}")))?;
            prop_assert_eq!(&back, &spec);
            prop_assert_eq!(back.body_text(), text);
            let def = parse_pipeline_def(&spec.to_string()).unwrap();
            prop_assert_eq!(def, spec);
        }

        #[test]
        fn arbitrary_text_never_panics(text in "\\PC{0,60}") {
            let _ = parse_pipeline("p", &text);
            let _ = parse_pipeline_def(&text);
            let _ = parse_literal(&text);
        }
    }
}
