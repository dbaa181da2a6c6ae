//! The parametric plan language.
//!
//! A plan declares parameters with finite domains and a per-job task script.
//! [`parse_plan`] turns source text into a validated [`Plan`], [`expand_jobs`]
//! enumerates the full cross-product of parameter values as [`JobSpec`]s, and
//! `Display` on [`Plan`] prints the canonical form, which re-parses to an equal
//! plan.
//!
//! ```text
//! plan ionization;
//! option expected_job_hours = 1.5;
//! parameter energy label "beam energy" real range from 0.5 to 2.0 step 0.5;
//! parameter material list "air", "argon";
//! task main
//!     substitute "skel.in" "run.in"
//!     execute "chamber -e ${energy} -m ${material} run.in"
//!     output "dose.dat"
//!     stage_out "dose.dat" "dose-${energy}-${material}.dat"
//! endtask
//! ```

mod expand;
mod lexer;
mod parser;
mod print;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use expand::{
    cardinality, expand_jobs, resolve_task, resolve_text, ExpandError, JobId, JobSpec, UnresolvedPlaceholder,
    DEFAULT_JOB_CAP,
};
pub use parser::{parse_plan, Diagnostic, ParseDiagnostics};

/// A parsed and validated parametric experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub name: String,
    pub options: PlanOptions,
    pub parameters: Vec<ParameterDecl>,
    pub task: TaskScript,
}

impl Plan {
    pub fn parameter(&self, name: &str) -> Option<&ParameterDecl> {
        self.parameters.iter().find(|p| p.name == name)
    }

    /// Number of jobs the plan expands to, or `None` on overflow.
    pub fn job_count(&self) -> Option<u64> {
        cardinality(self)
    }

    /// Reference-machine cpu-hours per job (defaults to 1.0).
    pub fn expected_job_hours(&self) -> f64 {
        self.options.expected_job_hours.unwrap_or(1.0)
    }

    /// Data staged per job, in MB (defaults to 0).
    pub fn payload_mb(&self) -> f64 {
        self.options.payload_mb.unwrap_or(0.0)
    }
}

/// Plan-level knobs set with `option <key> = <number>;`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PlanOptions {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_job_hours: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload_mb: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterDecl {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub domain: Domain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Domain {
    IntRange { from: i64, to: i64, step: i64 },
    RealRange { from: f64, to: f64, step: f64 },
    List { values: Vec<Value> },
}

/// Tolerance applied when counting the steps of a real range, so that
/// `0 to 0.3 step 0.1` includes its end point.
const REAL_RANGE_SLACK: f64 = 1e-9;

impl Domain {
    /// Number of values in the domain; `None` if it does not fit in `u64`.
    pub fn cardinality(&self) -> Option<u64> {
        match *self {
            Domain::IntRange { from, to, step } => {
                if step <= 0 || from > to {
                    return Some(0);
                }
                let span = (to as i128 - from as i128) / step as i128;
                u64::try_from(span + 1).ok()
            }
            Domain::RealRange { from, to, step } => {
                if step.is_nan() || step <= 0.0 || from > to {
                    return Some(0);
                }
                let k = ((to - from) / step + REAL_RANGE_SLACK).floor();
                if !k.is_finite() || k >= u64::MAX as f64 {
                    return None;
                }
                Some(k as u64 + 1)
            }
            Domain::List { ref values } => Some(values.len() as u64),
        }
    }

    /// The `index`-th value of the domain, in declaration order.
    pub fn value_at(&self, index: u64) -> Value {
        match *self {
            Domain::IntRange { from, step, .. } => Value::Int(from + step * index as i64),
            Domain::RealRange { from, step, .. } => Value::Real(from + step * index as f64),
            Domain::List { ref values } => values[index as usize].clone(),
        }
    }
}

/// A concrete parameter value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Int(i64),
    Real(f64),
    Text(String),
}

impl Value {
    /// The text substituted for a `${name}` placeholder. Reals use six
    /// significant digits so job identity does not depend on float noise.
    pub fn render(&self) -> String {
        match self {
            Value::Int(i) => i.to_string(),
            Value::Real(r) => format_significant(*r, 6),
            Value::Text(t) => t.clone(),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// `%g`-style formatting with `digits` significant digits.
pub fn format_significant(value: f64, digits: usize) -> String {
    if value == 0.0 {
        return "0".to_string();
    }
    if !value.is_finite() {
        return value.to_string();
    }
    let digits = digits.max(1);
    // Round first so that 9.999996 -> 10 picks the right exponent.
    let sci = format!("{:.*e}", digits - 1, value);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -4 || exp >= digits as i32 {
        let mantissa = trim_fraction(mantissa);
        return format!("{mantissa}e{exp}");
    }
    let decimals = (digits as i32 - 1 - exp).max(0) as usize;
    trim_fraction(&format!("{value:.decimals$}")).to_string()
}

fn trim_fraction(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// The per-job script: staging, substitution and execution steps.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskScript {
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Step {
    StageIn {
        source: String,
        dest: String,
    },
    Substitute {
        template: String,
        output: String,
    },
    Execute {
        command: String,
    },
    /// Declares a file the job produces; declared outputs are always staged back.
    Output {
        name: String,
    },
    StageOut {
        source: String,
        dest: String,
    },
}

impl Step {
    /// Every text field of the step, in a fixed order.
    pub fn texts(&self) -> Vec<&str> {
        match self {
            Step::StageIn { source, dest } | Step::StageOut { source, dest } => vec![source, dest],
            Step::Substitute { template, output } => vec![template, output],
            Step::Execute { command } => vec![command],
            Step::Output { name } => vec![name],
        }
    }

    fn map_texts(
        &self,
        mut f: impl FnMut(&str) -> Result<String, UnresolvedPlaceholder>,
    ) -> Result<Step, UnresolvedPlaceholder> {
        Ok(match self {
            Step::StageIn { source, dest } => Step::StageIn { source: f(source)?, dest: f(dest)? },
            Step::StageOut { source, dest } => Step::StageOut { source: f(source)?, dest: f(dest)? },
            Step::Substitute { template, output } => Step::Substitute { template: f(template)?, output: f(output)? },
            Step::Execute { command } => Step::Execute { command: f(command)? },
            Step::Output { name } => Step::Output { name: f(name)? },
        })
    }
}

impl TaskScript {
    pub fn has_execute(&self) -> bool {
        self.steps.iter().any(|s| matches!(s, Step::Execute { .. }))
    }

    /// Names a `stage_out` may legally refer to.
    pub fn produced_names(&self) -> Vec<&str> {
        self.steps
            .iter()
            .filter_map(|s| match s {
                Step::StageIn { dest, .. } => Some(dest.as_str()),
                Step::Substitute { output, .. } => Some(output.as_str()),
                Step::Output { name } => Some(name.as_str()),
                _ => None,
            })
            .collect()
    }

    /// Checks the structural invariants: at least one execute step, and every
    /// stage_out source is produced by an earlier step or declared as an output.
    pub fn check(&self) -> Result<(), String> {
        if !self.has_execute() {
            return Err("task has no execute step".into());
        }
        let produced = self.produced_names();
        for step in &self.steps {
            if let Step::StageOut { source, .. } = step {
                if !produced.contains(&source.as_str()) {
                    return Err(format!("stage_out of `{source}` which no step produces or declares"));
                }
            }
        }
        Ok(())
    }

    /// True when no `${...}` placeholder remains anywhere in the script.
    pub fn is_resolved(&self) -> bool {
        self.steps.iter().all(|s| s.texts().iter().all(|t| placeholders(t).next().is_none()))
    }
}

/// Iterates over placeholder names (`${name}`) in `text`. An unterminated
/// `${` yields the rest of the string as a name, which never matches a
/// declared identifier.
pub fn placeholders(text: &str) -> impl Iterator<Item = &str> {
    let mut rest = text;
    std::iter::from_fn(move || {
        let start = rest.find("${")?;
        let after = &rest[start + 2..];
        match after.find('}') {
            Some(end) => {
                let name = &after[..end];
                rest = &after[end + 1..];
                Some(name)
            }
            None => {
                rest = "";
                Some(after)
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn significant_digit_rendering() {
        assert_eq!(format_significant(0.1 + 0.2, 6), "0.3");
        assert_eq!(format_significant(1.0, 6), "1");
        assert_eq!(format_significant(2.5, 6), "2.5");
        assert_eq!(format_significant(123456.7, 6), "123457");
        assert_eq!(format_significant(1234567.0, 6), "1.23457e6");
        assert_eq!(format_significant(0.000012345, 6), "1.2345e-5");
        assert_eq!(format_significant(-0.25, 6), "-0.25");
        assert_eq!(format_significant(9.9999996, 6), "10");
    }

    #[test]
    fn real_range_includes_end_point() {
        let d = Domain::RealRange { from: 0.0, to: 0.3, step: 0.1 };
        assert_eq!(d.cardinality(), Some(4));
        assert_eq!(d.value_at(3).render(), "0.3");
    }

    #[test]
    fn placeholder_scan() {
        let names: Vec<_> = placeholders("a ${x} b ${yy}${x} ${open").collect();
        assert_eq!(names, vec!["x", "yy", "x", "open"]);
        assert_eq!(placeholders("no placeholders").count(), 0);
    }
}
