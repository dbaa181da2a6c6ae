//! Cross-product expansion of a plan into concrete jobs.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::{placeholders, Plan, TaskScript, Value};

/// Default ceiling on the number of jobs a plan may expand to.
pub const DEFAULT_JOB_CAP: u64 = 1_000_000;

/// Ordinal of a job within its experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JobId(pub u32);

impl fmt::Display for JobId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "j{}", self.0)
    }
}

/// One concrete parameter binding with its resolved task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    pub experiment_id: String,
    pub id: JobId,
    /// Parameter name to value, in declaration order.
    pub binding: Vec<(String, Value)>,
    pub task: TaskScript,
}

impl JobSpec {
    pub fn value(&self, name: &str) -> Option<&Value> {
        self.binding.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ExpandError {
    #[error("plan expands to {count} jobs, more than the cap of {cap}")]
    TooManyJobs { count: u64, cap: u64 },
    #[error("plan expands to more jobs than can be counted")]
    Overflow,
    #[error(transparent)]
    Unresolved(#[from] UnresolvedPlaceholder),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unresolved placeholder `${{{0}}}`")]
pub struct UnresolvedPlaceholder(pub String);

/// Product of all domain sizes; `None` on overflow.
pub fn cardinality(plan: &Plan) -> Option<u64> {
    plan.parameters.iter().try_fold(1u64, |acc, p| acc.checked_mul(p.domain.cardinality()?))
}

/// Enumerates the cross-product of parameter values in row-major order (the
/// last declared parameter varies fastest).
pub fn expand_jobs(plan: &Plan, experiment_id: &str, cap: u64) -> Result<Vec<JobSpec>, ExpandError> {
    let count = cardinality(plan).ok_or(ExpandError::Overflow)?;
    if count > cap {
        return Err(ExpandError::TooManyJobs { count, cap });
    }
    let radices: Vec<u64> = plan.parameters.iter().map(|p| p.domain.cardinality().unwrap_or(0)).collect();
    let mut jobs = Vec::with_capacity(count as usize);
    for ordinal in 0..count {
        let mut rem = ordinal;
        let mut digits = vec![0u64; radices.len()];
        for (slot, radix) in digits.iter_mut().zip(&radices).rev() {
            *slot = rem % radix;
            rem /= radix;
        }
        let binding: Vec<(String, Value)> =
            plan.parameters.iter().zip(&digits).map(|(p, &d)| (p.name.clone(), p.domain.value_at(d))).collect();
        let task = resolve_task(&plan.task, &binding)?;
        jobs.push(JobSpec {
            experiment_id: experiment_id.to_string(),
            id: JobId(u32::try_from(ordinal).map_err(|_| ExpandError::Overflow)?),
            binding,
            task,
        });
    }
    Ok(jobs)
}

/// Replaces each `${name}` in `text` with its rendered binding. Substituted
/// values are not rescanned.
pub fn resolve_text(text: &str, binding: &[(String, Value)]) -> Result<String, UnresolvedPlaceholder> {
    if !text.contains("${") {
        return Ok(text.to_string());
    }
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let Some(end) = after.find('}') else {
            return Err(UnresolvedPlaceholder(after.to_string()));
        };
        let name = &after[..end];
        let value = binding
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
            .ok_or_else(|| UnresolvedPlaceholder(name.to_string()))?;
        out.push_str(&value.render());
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Resolves every placeholder in a task script. Already-resolved scripts come
/// back unchanged.
pub fn resolve_task(task: &TaskScript, binding: &[(String, Value)]) -> Result<TaskScript, UnresolvedPlaceholder> {
    let steps = task.steps.iter().map(|s| s.map_texts(|t| resolve_text(t, binding))).collect::<Result<Vec<_>, _>>()?;
    debug_assert!(steps.iter().all(|s| s.texts().iter().all(|t| placeholders(t).next().is_none())));
    Ok(TaskScript { steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::{parse_plan, Step};

    fn bind(pairs: &[(&str, Value)]) -> Vec<(String, Value)> {
        pairs.iter().map(|(n, v)| (n.to_string(), v.clone())).collect()
    }

    #[test]
    fn two_parameter_cross_product() {
        let plan = parse_plan(
            "parameter x integer range from 1 to 3 step 1; parameter y list \"a\", \"b\"; task main execute \"m ${x} ${y}\" endtask",
        )
        .unwrap();
        let jobs = expand_jobs(&plan, "e1", DEFAULT_JOB_CAP).unwrap();
        assert_eq!(jobs.len(), 6);
        assert_eq!(jobs[0].binding, bind(&[("x", Value::Int(1)), ("y", Value::Text("a".into()))]));
        assert_eq!(jobs[1].binding, bind(&[("x", Value::Int(1)), ("y", Value::Text("b".into()))]));
        assert_eq!(jobs[5].task.steps[0], Step::Execute { command: "m 3 b".into() });
        assert!(jobs.iter().all(|j| j.task.is_resolved()));
    }

    #[test]
    fn single_value_gives_one_job() {
        let plan = parse_plan("parameter x list 42; task main execute \"m ${x}\" endtask").unwrap();
        let jobs = expand_jobs(&plan, "e", DEFAULT_JOB_CAP).unwrap();
        assert_eq!(jobs.len(), 1);
        assert_eq!(jobs[0].id, JobId(0));
    }

    #[test]
    fn cap_refuses_with_count() {
        let plan = parse_plan(
            "parameter a integer range from 1 to 100 step 1; parameter b integer range from 1 to 100 step 1; task main execute \"m\" endtask",
        )
        .unwrap();
        assert_eq!(expand_jobs(&plan, "e", 9_999), Err(ExpandError::TooManyJobs { count: 10_000, cap: 9_999 }));
        assert_eq!(expand_jobs(&plan, "e", 10_000).unwrap().len(), 10_000);
    }

    #[test]
    fn resolve_examples() {
        let b = bind(&[("x", Value::Int(2))]);
        assert_eq!(resolve_text("model -x ${x}", &b).unwrap(), "model -x 2");
        assert_eq!(resolve_text("no placeholders", &b).unwrap(), "no placeholders");
        let seven = bind(&[("x", Value::Int(7))]);
        assert_eq!(resolve_text("${x}${x}", &seven).unwrap(), "77");
        assert_eq!(resolve_text("${y}", &b), Err(UnresolvedPlaceholder("y".into())));
    }

    #[test]
    fn resolve_is_idempotent() {
        let task = TaskScript { steps: vec![Step::Execute { command: "run ${x}".into() }] };
        let b = bind(&[("x", Value::Real(0.1 + 0.2))]);
        let once = resolve_task(&task, &b).unwrap();
        assert_eq!(once.steps[0], Step::Execute { command: "run 0.3".into() });
        assert_eq!(resolve_task(&once, &b).unwrap(), once);
        assert_eq!(resolve_task(&once, &[]).unwrap(), once);
    }
}
