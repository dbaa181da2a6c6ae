use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::lexer::{tokenize, Pos, Tok, Token};
use super::{placeholders, Domain, ParameterDecl, Plan, PlanOptions, Step, TaskScript, Value};

/// A problem found in plan source, with a 1-based position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: {}", self.line, self.column, self.message)
    }
}

/// Non-empty list of diagnostics returned when a plan does not parse.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseDiagnostics(pub Vec<Diagnostic>);

impl ParseDiagnostics {
    pub fn iter(&self) -> impl Iterator<Item = &Diagnostic> {
        self.0.iter()
    }

    pub fn first(&self) -> &Diagnostic {
        &self.0[0]
    }
}

impl fmt::Display for ParseDiagnostics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("\n")?;
            }
            write!(f, "{d}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ParseDiagnostics {}

/// Parses and validates plan source.
pub fn parse_plan(text: &str) -> Result<Plan, ParseDiagnostics> {
    let (tokens, lex_errors) = tokenize(text);
    let end = end_pos(text);
    let mut p = Parser { tokens, i: 0, end, diags: Vec::new() };
    for e in lex_errors {
        p.diags.push(diag(e.pos, e.message));
    }
    let raw = p.plan();
    let mut diags = p.diags;
    validate(&raw, &mut diags);
    if !diags.is_empty() {
        diags.sort_by_key(|d| (d.line, d.column));
        diags.dedup();
        return Err(ParseDiagnostics(diags));
    }
    Ok(Plan {
        name: raw.name.map(|(n, _)| n).unwrap_or_else(|| "experiment".to_string()),
        options: raw.options,
        parameters: raw.params.into_iter().map(|p| p.decl).collect(),
        task: TaskScript { steps: raw.steps.into_iter().map(|(s, _)| s).collect() },
    })
}

fn end_pos(text: &str) -> Pos {
    let line = text.lines().count().max(1);
    let column = text.lines().last().map(|l| l.chars().count() + 1).unwrap_or(1);
    Pos { line, column }
}

fn diag(pos: Pos, message: impl Into<String>) -> Diagnostic {
    Diagnostic { line: pos.line, column: pos.column, message: message.into() }
}

struct RawParam {
    decl: ParameterDecl,
    pos: Pos,
    literal_pos: Vec<Pos>,
}

#[derive(Default)]
struct RawPlan {
    name: Option<(String, Pos)>,
    options: PlanOptions,
    params: Vec<RawParam>,
    task_pos: Option<Pos>,
    steps: Vec<(Step, Pos)>,
}

struct Parser {
    tokens: Vec<Token>,
    i: usize,
    end: Pos,
    diags: Vec<Diagnostic>,
}

type PResult<T> = Result<T, Diagnostic>;

const STEP_WORDS: [&str; 5] = ["stage_in", "stage_out", "substitute", "execute", "output"];

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.i)
    }

    fn next(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.i).cloned();
        if t.is_some() {
            self.i += 1;
        }
        t
    }

    fn at_word(&self, word: &str) -> bool {
        matches!(self.peek(), Some(Token { tok: Tok::Word(w), .. }) if w.eq_ignore_ascii_case(word))
    }

    fn unexpected(&self, expected: &str) -> Diagnostic {
        match self.peek() {
            Some(t) => diag(t.pos, format!("syntax error: expected {expected}, found {}", t.tok.describe())),
            None => diag(self.end, format!("syntax error: expected {expected}, found end of input")),
        }
    }

    fn keyword(&mut self, word: &str) -> PResult<Pos> {
        if self.at_word(word) {
            Ok(self.next().unwrap().pos)
        } else {
            Err(self.unexpected(&format!("`{word}`")))
        }
    }

    fn ident(&mut self, what: &str) -> PResult<(String, Pos)> {
        match self.peek() {
            Some(Token { tok: Tok::Word(w), pos }) => {
                let out = (w.clone(), *pos);
                self.i += 1;
                Ok(out)
            }
            _ => Err(self.unexpected(what)),
        }
    }

    fn string(&mut self, what: &str) -> PResult<(String, Pos)> {
        match self.peek() {
            Some(Token { tok: Tok::Str(s), pos }) => {
                let out = (s.clone(), *pos);
                self.i += 1;
                Ok(out)
            }
            _ => Err(self.unexpected(what)),
        }
    }

    fn semi(&mut self) -> PResult<()> {
        match self.peek() {
            Some(Token { tok: Tok::Semi, .. }) => {
                self.i += 1;
                Ok(())
            }
            _ => Err(self.unexpected("`;`")),
        }
    }

    fn number(&mut self, what: &str) -> PResult<(Tok, Pos)> {
        match self.peek() {
            Some(Token { tok: tok @ (Tok::Int(_) | Tok::Real(_)), pos }) => {
                let out = (tok.clone(), *pos);
                self.i += 1;
                Ok(out)
            }
            _ => Err(self.unexpected(what)),
        }
    }

    fn skip_statement(&mut self) {
        while let Some(t) = self.peek() {
            match &t.tok {
                Tok::Semi => {
                    self.i += 1;
                    return;
                }
                Tok::Word(w) if ["parameter", "task", "plan", "option"].iter().any(|k| w.eq_ignore_ascii_case(k)) => {
                    return
                }
                _ => self.i += 1,
            }
        }
    }

    fn skip_step(&mut self) {
        while let Some(t) = self.peek() {
            if let Tok::Word(w) = &t.tok {
                if w.eq_ignore_ascii_case("endtask") || STEP_WORDS.iter().any(|k| w.eq_ignore_ascii_case(k)) {
                    return;
                }
            }
            self.i += 1;
        }
    }

    fn plan(&mut self) -> RawPlan {
        let mut raw = RawPlan::default();
        while let Some(tok) = self.peek() {
            let pos = tok.pos;
            let result = match &tok.tok {
                Tok::Word(w) if w.eq_ignore_ascii_case("parameter") => self.parameter().map(|p| raw.params.push(p)),
                Tok::Word(w) if w.eq_ignore_ascii_case("task") => {
                    if raw.task_pos.is_some() {
                        self.diags.push(diag(pos, "duplicate task block"));
                    }
                    self.task(&mut raw)
                }
                Tok::Word(w) if w.eq_ignore_ascii_case("plan") => self.plan_name().map(|n| {
                    if raw.name.is_some() {
                        self.diags.push(diag(pos, "duplicate plan name declaration"));
                    }
                    raw.name = Some(n);
                }),
                Tok::Word(w) if w.eq_ignore_ascii_case("option") => self.option(&mut raw.options),
                _ => Err(self.unexpected("`parameter`, `task`, `plan` or `option`")),
            };
            if let Err(d) = result {
                self.diags.push(d);
                let before = self.i;
                self.skip_statement();
                if self.i == before {
                    self.i += 1;
                }
            }
        }
        raw
    }

    fn plan_name(&mut self) -> PResult<(String, Pos)> {
        self.keyword("plan")?;
        let name = self.ident("plan name")?;
        self.semi()?;
        Ok(name)
    }

    fn option(&mut self, options: &mut PlanOptions) -> PResult<()> {
        self.keyword("option")?;
        let (key, key_pos) = self.ident("option name")?;
        match self.peek() {
            Some(Token { tok: Tok::Eq, .. }) => self.i += 1,
            _ => return Err(self.unexpected("`=`")),
        }
        let (tok, pos) = self.number("option value")?;
        let value = match tok {
            Tok::Int(i) => i as f64,
            Tok::Real(r) => r,
            _ => unreachable!(),
        };
        self.semi()?;
        let allowed_zero = key == "payload_mb" && value == 0.0;
        if !(value.is_finite() && value > 0.0) && !allowed_zero {
            return Err(diag(pos, format!("option `{key}` must be positive")));
        }
        match key.as_str() {
            "expected_job_hours" => options.expected_job_hours = Some(value),
            "payload_mb" => options.payload_mb = Some(value),
            _ => return Err(diag(key_pos, format!("unknown option `{key}`"))),
        }
        Ok(())
    }

    fn parameter(&mut self) -> PResult<RawParam> {
        self.keyword("parameter")?;
        let (name, pos) = self.ident("parameter name")?;
        let mut label = None;
        if self.at_word("label") {
            self.i += 1;
            label = Some(self.string("label text")?.0);
        }
        let mut literal_pos = Vec::new();
        let domain = if self.at_word("integer") || self.at_word("real") {
            let integer = self.at_word("integer");
            self.i += 1;
            self.keyword("range")?;
            self.keyword("from")?;
            let from = self.number("range start")?;
            self.keyword("to")?;
            let to = self.number("range end")?;
            self.keyword("step")?;
            let step = self.number("range step")?;
            if integer {
                let as_int = |(t, p): (Tok, Pos)| match t {
                    Tok::Int(i) => Ok(i),
                    _ => Err(diag(p, "integer range bounds must be integers")),
                };
                Domain::IntRange { from: as_int(from)?, to: as_int(to)?, step: as_int(step)? }
            } else {
                let as_real = |(t, _): (Tok, Pos)| match t {
                    Tok::Int(i) => i as f64,
                    Tok::Real(r) => r,
                    _ => unreachable!(),
                };
                Domain::RealRange { from: as_real(from), to: as_real(to), step: as_real(step) }
            }
        } else if self.at_word("list") {
            self.i += 1;
            let mut values = Vec::new();
            if !matches!(self.peek(), Some(Token { tok: Tok::Semi, .. })) {
                loop {
                    let t = self.next().ok_or_else(|| self.unexpected("list value"))?;
                    literal_pos.push(t.pos);
                    values.push(match t.tok {
                        Tok::Str(s) => Value::Text(s),
                        Tok::Int(i) => Value::Int(i),
                        Tok::Real(r) => Value::Real(r),
                        other => {
                            return Err(diag(
                                t.pos,
                                format!("syntax error: expected list value, found {}", other.describe()),
                            ))
                        }
                    });
                    match self.peek() {
                        Some(Token { tok: Tok::Comma, .. }) => self.i += 1,
                        _ => break,
                    }
                }
            }
            Domain::List { values }
        } else {
            return Err(self.unexpected("`integer`, `real` or `list`"));
        };
        self.semi()?;
        Ok(RawParam { decl: ParameterDecl { name, label, domain }, pos, literal_pos })
    }

    fn task(&mut self, raw: &mut RawPlan) -> PResult<()> {
        let pos = self.keyword("task")?;
        let (name, name_pos) = self.ident("task name")?;
        if name != "main" {
            self.diags.push(diag(name_pos, format!("unknown task `{name}` (only `main` is supported)")));
        }
        raw.task_pos = Some(pos);
        loop {
            if self.peek().is_none() {
                return Err(diag(self.end, "syntax error: missing `endtask`"));
            }
            if self.at_word("endtask") {
                self.i += 1;
                if matches!(self.peek(), Some(Token { tok: Tok::Semi, .. })) {
                    self.i += 1;
                }
                return Ok(());
            }
            match self.step() {
                Ok(s) => raw.steps.push(s),
                Err(d) => {
                    self.diags.push(d);
                    let before = self.i;
                    self.skip_step();
                    if self.i == before {
                        self.i += 1;
                    }
                }
            }
        }
    }

    fn optional_string(&mut self) -> Option<String> {
        match self.peek() {
            Some(Token { tok: Tok::Str(s), .. }) => {
                let s = s.clone();
                self.i += 1;
                Some(s)
            }
            _ => None,
        }
    }

    fn step(&mut self) -> PResult<(Step, Pos)> {
        let (word, pos) = self.ident("task step")?;
        let step = match word.to_ascii_lowercase().as_str() {
            "stage_in" => {
                let (source, _) = self.string("source path")?;
                let dest = self.optional_string().unwrap_or_else(|| base_name(&source).to_string());
                Step::StageIn { source, dest }
            }
            "stage_out" => {
                let (source, _) = self.string("source name")?;
                let dest = self.optional_string().unwrap_or_else(|| source.clone());
                Step::StageOut { source, dest }
            }
            "substitute" => {
                let (template, _) = self.string("template name")?;
                let (output, _) = self.string("output name")?;
                Step::Substitute { template, output }
            }
            "execute" => Step::Execute { command: self.string("command line")?.0 },
            "output" => Step::Output { name: self.string("output name")?.0 },
            _ => {
                return Err(diag(
                    pos,
                    format!("syntax error: unknown step `{word}` (expected stage_in, substitute, execute, output, stage_out or endtask)"),
                ))
            }
        };
        Ok((step, pos))
    }
}

fn base_name(path: &str) -> &str {
    path.rsplit(['/', '\\']).next().unwrap_or(path)
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_alphabetic() || c == '_') && chars.all(|c| c.is_alphanumeric() || c == '_')
}

const KEYWORDS: [&str; 17] = [
    "plan",
    "option",
    "parameter",
    "label",
    "integer",
    "real",
    "range",
    "from",
    "to",
    "step",
    "list",
    "task",
    "endtask",
    "stage_in",
    "stage_out",
    "substitute",
    "execute",
];

fn validate(raw: &RawPlan, diags: &mut Vec<Diagnostic>) {
    let mut seen = BTreeSet::new();
    for p in &raw.params {
        let name = &p.decl.name;
        if KEYWORDS.iter().any(|k| k.eq_ignore_ascii_case(name)) || name.eq_ignore_ascii_case("output") {
            diags.push(diag(p.pos, format!("parameter name `{name}` is a reserved word")));
        }
        if !seen.insert(name.as_str()) {
            diags.push(diag(p.pos, format!("duplicate parameter `{name}`")));
        }
        match p.decl.domain {
            Domain::IntRange { from, to, step } => {
                if step <= 0 {
                    diags.push(diag(p.pos, "invalid range: step must be positive"));
                } else if from > to {
                    diags.push(diag(p.pos, "invalid range: `from` exceeds `to`"));
                }
            }
            Domain::RealRange { from, to, step } => {
                if !from.is_finite() || !to.is_finite() || !step.is_finite() {
                    diags.push(diag(p.pos, "invalid range: bounds must be finite"));
                } else if step <= 0.0 {
                    diags.push(diag(p.pos, "invalid range: step must be positive"));
                } else if from > to {
                    diags.push(diag(p.pos, "invalid range: `from` exceeds `to`"));
                }
            }
            Domain::List { ref values } => {
                if values.is_empty() {
                    diags.push(diag(p.pos, format!("empty domain for parameter `{name}`")));
                }
                for (v, pos) in values.iter().zip(&p.literal_pos) {
                    if let Value::Text(t) = v {
                        if t.contains("${") {
                            diags.push(diag(*pos, "list values may not contain `${`"));
                        }
                    }
                }
                let mut rendered = BTreeSet::new();
                for (v, pos) in values.iter().zip(&p.literal_pos) {
                    if !rendered.insert(v.render()) {
                        diags.push(diag(*pos, format!("duplicate value `{}` in domain of `{name}`", v.render())));
                    }
                }
            }
        }
    }
    if raw.params.is_empty() {
        diags.push(diag(Pos { line: 1, column: 1 }, "plan declares no parameters"));
    }
    let Some(task_pos) = raw.task_pos else {
        diags.push(diag(Pos { line: 1, column: 1 }, "plan has no `task main` block"));
        return;
    };
    if !raw.steps.iter().any(|(s, _)| matches!(s, Step::Execute { .. })) {
        diags.push(diag(task_pos, "task has no execute step"));
    }
    for (step, pos) in &raw.steps {
        for text in step.texts() {
            for name in placeholders(text) {
                if !is_identifier(name) {
                    diags.push(diag(*pos, format!("malformed placeholder `${{{name}`")));
                } else if !seen.contains(name) {
                    diags.push(diag(*pos, format!("unknown placeholder `${{{name}}}`")));
                }
            }
        }
    }
    let produced: Vec<&str> = raw
        .steps
        .iter()
        .filter_map(|(s, _)| match s {
            Step::StageIn { dest, .. } => Some(dest.as_str()),
            Step::Substitute { output, .. } => Some(output.as_str()),
            Step::Output { name } => Some(name.as_str()),
            _ => None,
        })
        .collect();
    for (step, pos) in &raw.steps {
        if let Step::StageOut { source, .. } = step {
            if !produced.contains(&source.as_str()) {
                diags.push(diag(*pos, format!("stage_out of `{source}` which no step produces or declares")));
            }
        }
    }
}
