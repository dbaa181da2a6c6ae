use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::plan::{Step, TaskScript};

/// One primitive of the job wrapper.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verb", rename_all = "snake_case")]
pub enum WrapperCommand {
    /// Copy `source` from home to `dest` on the resource; with `substitute`
    /// the file's `${name}` placeholders are filled in on the way.
    StageIn {
        source: String,
        dest: String,
        substitute: bool,
    },
    Execute {
        command: String,
    },
    StageOut {
        source: String,
        dest: String,
    },
    Report,
}

/// The command list a job wrapper interprets on the resource.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WrapperScript {
    pub commands: Vec<WrapperCommand>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WrapperError {
    #[error("malformed task: {0}")]
    MalformedTask(String),
    #[error("unresolved placeholder in `{0}`")]
    Unresolved(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("wrapper layout: {0}")]
    Layout(String),
}

impl WrapperScript {
    /// Translates a resolved task: stage-ins and substitutions first, then the
    /// execute block, then stage-outs (declared outputs not staged out
    /// explicitly are staged back under their own name), then `report`.
    pub fn from_task(task: &TaskScript) -> Result<Self, WrapperError> {
        task.check().map_err(WrapperError::MalformedTask)?;
        if let Some(text) = task.steps.iter().flat_map(|s| s.texts()).find(|t| t.contains("${")) {
            return Err(WrapperError::Unresolved(text.to_string()));
        }
        let mut ins = Vec::new();
        let mut execs = Vec::new();
        let mut outs = Vec::new();
        let mut declared = Vec::new();
        for step in &task.steps {
            match step {
                Step::StageIn { source, dest } => {
                    ins.push(WrapperCommand::StageIn { source: source.clone(), dest: dest.clone(), substitute: false })
                }
                Step::Substitute { template, output } => ins.push(WrapperCommand::StageIn {
                    source: template.clone(),
                    dest: output.clone(),
                    substitute: true,
                }),
                Step::Execute { command } => execs.push(WrapperCommand::Execute { command: command.clone() }),
                Step::StageOut { source, dest } => {
                    outs.push(WrapperCommand::StageOut { source: source.clone(), dest: dest.clone() })
                }
                Step::Output { name } => declared.push(name.clone()),
            }
        }
        for name in declared {
            let staged = outs.iter().any(|c| matches!(c, WrapperCommand::StageOut { source, .. } if *source == name));
            if !staged {
                outs.push(WrapperCommand::StageOut { source: name.clone(), dest: name });
            }
        }
        let mut commands = ins;
        commands.extend(execs);
        commands.extend(outs);
        commands.push(WrapperCommand::Report);
        Ok(WrapperScript { commands })
    }

    /// Checks the layout: stage-ins, one contiguous execute block,
    /// stage-outs, and a final report.
    pub fn check(&self) -> Result<(), WrapperError> {
        let rank = |c: &WrapperCommand| match c {
            WrapperCommand::StageIn { .. } => 0,
            WrapperCommand::Execute { .. } => 1,
            WrapperCommand::StageOut { .. } => 2,
            WrapperCommand::Report => 3,
        };
        let ranks: Vec<u8> = self.commands.iter().map(rank).collect();
        if ranks.windows(2).any(|w| w[0] > w[1]) {
            return Err(WrapperError::Layout("commands out of order".into()));
        }
        if !ranks.contains(&1) {
            return Err(WrapperError::Layout("no execute command".into()));
        }
        if ranks.iter().filter(|r| **r == 3).count() != 1 || ranks.last() != Some(&3) {
            return Err(WrapperError::Layout("must end with a single report".into()));
        }
        Ok(())
    }
}

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

impl fmt::Display for WrapperCommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WrapperCommand::StageIn { source, dest, substitute } => {
                let flag = if *substitute { " --substitute" } else { "" };
                write!(f, "stage_in{flag} {} {}", quote(source), quote(dest))
            }
            WrapperCommand::Execute { command } => write!(f, "execute {}", quote(command)),
            WrapperCommand::StageOut { source, dest } => write!(f, "stage_out {} {}", quote(source), quote(dest)),
            WrapperCommand::Report => f.write_str("report"),
        }
    }
}

impl fmt::Display for WrapperScript {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.commands {
            writeln!(f, "{c}")?;
        }
        Ok(())
    }
}

/// Splits a line into bare words and quoted strings.
fn words(line: &str) -> Result<Vec<(bool, String)>, String> {
    let mut out = Vec::new();
    let mut chars = line.chars().peekable();
    while let Some(&c) = chars.peek() {
        if c.is_whitespace() {
            chars.next();
        } else if c == '"' {
            chars.next();
            let mut s = String::new();
            loop {
                match chars.next() {
                    None => return Err("unterminated string".into()),
                    Some('"') => break,
                    Some('\\') => match chars.next() {
                        Some('n') => s.push('\n'),
                        Some('t') => s.push('\t'),
                        Some('r') => s.push('\r'),
                        Some(e @ ('"' | '\\')) => s.push(e),
                        other => return Err(format!("bad escape {other:?}")),
                    },
                    Some(c) => s.push(c),
                }
            }
            out.push((true, s));
        } else {
            let mut s = String::new();
            while let Some(&c) = chars.peek() {
                if c.is_whitespace() || c == '"' {
                    break;
                }
                s.push(c);
                chars.next();
            }
            out.push((false, s));
        }
    }
    Ok(out)
}

impl FromStr for WrapperScript {
    type Err = WrapperError;

    fn from_str(text: &str) -> Result<Self, WrapperError> {
        let mut commands = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let err = |message: String| WrapperError::Parse { line: i + 1, message };
            let w = words(line).map_err(err)?;
            let Some(((false, verb), args)) = w.split_first() else {
                if w.is_empty() {
                    continue;
                }
                return Err(err("expected a verb".into()));
            };
            let strings = |args: &[(bool, String)], n: usize| -> Result<Vec<String>, WrapperError> {
                if args.len() != n || args.iter().any(|(q, _)| !q) {
                    return Err(err(format!("`{verb}` takes {n} quoted argument(s)")));
                }
                Ok(args.iter().map(|(_, s)| s.clone()).collect())
            };
            let cmd = match verb.as_str() {
                "stage_in" => {
                    let (substitute, rest) = match args.first() {
                        Some((false, flag)) if flag == "--substitute" => (true, &args[1..]),
                        _ => (false, args),
                    };
                    let mut a = strings(rest, 2)?;
                    let dest = a.pop().unwrap();
                    WrapperCommand::StageIn { source: a.pop().unwrap(), dest, substitute }
                }
                "execute" => WrapperCommand::Execute { command: strings(args, 1)?.pop().unwrap() },
                "stage_out" => {
                    let mut a = strings(args, 2)?;
                    let dest = a.pop().unwrap();
                    WrapperCommand::StageOut { source: a.pop().unwrap(), dest }
                }
                "report" => {
                    strings(args, 0)?;
                    WrapperCommand::Report
                }
                other => return Err(err(format!("unknown verb `{other}`"))),
            };
            commands.push(cmd);
        }
        Ok(WrapperScript { commands })
    }
}
