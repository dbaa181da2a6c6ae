//! Canonical plan printer: one declaration per line, lowercase keywords.

use std::fmt::{self, Write};

use super::{Domain, Plan, Step, Value};

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

// Debug formatting of f64 is the shortest text that parses back to the same
// value and always carries a `.` or exponent, so it re-lexes as a real.
fn real(r: f64) -> String {
    format!("{r:?}")
}

fn literal(v: &Value) -> String {
    match v {
        Value::Int(i) => i.to_string(),
        Value::Real(r) => real(*r),
        Value::Text(t) => quote(t),
    }
}

impl fmt::Display for Plan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "plan {};", self.name)?;
        if let Some(h) = self.options.expected_job_hours {
            writeln!(f, "option expected_job_hours = {};", real(h))?;
        }
        if let Some(mb) = self.options.payload_mb {
            writeln!(f, "option payload_mb = {};", real(mb))?;
        }
        for p in &self.parameters {
            let mut line = format!("parameter {}", p.name);
            if let Some(label) = &p.label {
                write!(line, " label {}", quote(label))?;
            }
            match &p.domain {
                Domain::IntRange { from, to, step } => write!(line, " integer range from {from} to {to} step {step}")?,
                Domain::RealRange { from, to, step } => {
                    write!(line, " real range from {} to {} step {}", real(*from), real(*to), real(*step))?
                }
                Domain::List { values } => {
                    let items: Vec<String> = values.iter().map(literal).collect();
                    write!(line, " list {}", items.join(", "))?;
                }
            }
            writeln!(f, "{line};")?;
        }
        writeln!(f, "task main")?;
        for step in &self.task.steps {
            let line = match step {
                Step::StageIn { source, dest } => format!("stage_in {} {}", quote(source), quote(dest)),
                Step::Substitute { template, output } => format!("substitute {} {}", quote(template), quote(output)),
                Step::Execute { command } => format!("execute {}", quote(command)),
                Step::Output { name } => format!("output {}", quote(name)),
                Step::StageOut { source, dest } => format!("stage_out {} {}", quote(source), quote(dest)),
            };
            writeln!(f, "    {line}")?;
        }
        writeln!(f, "endtask")
    }
}
