use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use super::{DispatchOrder, Executor, StatusPhase, StatusUpdate, WrapperCommand, WrapperScript};
use crate::fabric::Unavailable;
use crate::plan::Value;
use crate::time::SimTime;

/// Runs wrappers as real processes, one scratch directory per attempt.
/// Files are staged in from and out to `home`. Runs happen synchronously in
/// `launch`; their status updates are collected with [`LocalExecutor::poll`].
#[derive(Debug)]
pub struct LocalExecutor {
    home: PathBuf,
    scratch: PathBuf,
    shell: String,
    updates: Vec<StatusUpdate>,
}

impl LocalExecutor {
    pub fn new(home: impl Into<PathBuf>, scratch: impl Into<PathBuf>) -> Self {
        LocalExecutor { home: home.into(), scratch: scratch.into(), shell: "sh".into(), updates: Vec::new() }
    }

    /// Status updates produced since the last poll.
    pub fn poll(&mut self) -> Vec<StatusUpdate> {
        std::mem::take(&mut self.updates)
    }

    fn run(
        &self,
        dir: &Path,
        wrapper: &WrapperScript,
        binding: &[(String, Value)],
    ) -> Result<Vec<StatusPhase>, String> {
        let mut reached = vec![StatusPhase::StagingIn];
        for cmd in &wrapper.commands {
            match cmd {
                WrapperCommand::StageIn { source, dest, substitute } => {
                    let from = self.home.join(source);
                    let to = dir.join(dest);
                    if let Some(parent) = to.parent() {
                        fs::create_dir_all(parent).map_err(|e| e.to_string())?;
                    }
                    if *substitute {
                        let text = fs::read_to_string(&from).map_err(|e| format!("stage_in {source}: {e}"))?;
                        fs::write(&to, substitute_lenient(&text, binding)).map_err(|e| e.to_string())?;
                    } else {
                        fs::copy(&from, &to).map_err(|e| format!("stage_in {source}: {e}"))?;
                    }
                }
                WrapperCommand::Execute { command } => {
                    if !reached.contains(&StatusPhase::Started) {
                        reached.push(StatusPhase::Started);
                    }
                    let status = Command::new(&self.shell)
                        .arg("-c")
                        .arg(command)
                        .current_dir(dir)
                        .status()
                        .map_err(|e| format!("execute: {e}"))?;
                    if !status.success() {
                        return Err(format!("execution error: `{command}` exited with {status}"));
                    }
                }
                WrapperCommand::StageOut { source, dest } => {
                    let to = self.home.join(dest);
                    if let Some(parent) = to.parent() {
                        fs::create_dir_all(parent).map_err(|e| e.to_string())?;
                    }
                    fs::copy(dir.join(source), &to).map_err(|e| format!("stage_out {source}: {e}"))?;
                }
                WrapperCommand::Report => {
                    reached.push(StatusPhase::StagedOut);
                }
            }
        }
        Ok(reached)
    }
}

/// Fills `${name}` for bound names and leaves anything else untouched.
fn substitute_lenient(text: &str, binding: &[(String, Value)]) -> String {
    let mut out = text.to_string();
    for (name, value) in binding {
        out = out.replace(&format!("${{{name}}}"), &value.render());
    }
    out
}

impl Executor for LocalExecutor {
    fn launch(&mut self, _now: SimTime, order: &DispatchOrder, wrapper: &WrapperScript) -> Result<(), Unavailable> {
        let dir = self.scratch.join(format!("{}-{}", order.job_id, order.handle));
        fs::create_dir_all(&dir).map_err(|e| Unavailable {
            resource: order.resource_id.clone(),
            reason: format!("scratch directory: {e}"),
        })?;
        let t0 = Instant::now();
        let result = self.run(&dir, wrapper, &order.binding);
        let cpu_hours = t0.elapsed().as_secs_f64() / 3600.0;
        let update = |phase| {
            let mut u = StatusUpdate::new(order.handle, order.job_id, phase);
            u.cpu_hours = cpu_hours;
            u
        };
        match result {
            Ok(phases) => {
                self.updates.extend(phases.into_iter().filter(|p| *p != StatusPhase::StagingIn).map(update));
                self.updates.push(update(StatusPhase::Completed));
            }
            Err(message) => {
                let mut u = update(StatusPhase::Failed);
                u.message = Some(message);
                self.updates.push(u);
            }
        }
        Ok(())
    }
}
