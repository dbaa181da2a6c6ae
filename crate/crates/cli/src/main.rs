use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use taskfarm::engine::{
    read_journal_file, Action, Engine, EngineConfig, ExperimentConstraints, FileJournal, MemoryJournal, Phase, Steer,
};
use taskfarm::fabric::{load_fabric, synthesize, FabricConfig};
use taskfarm::money::Money;
use taskfarm::plan::parse_plan;
use taskfarm::sim::{RunUntil, SimOptions, SimRunner};
use taskfarm::time::{SimDuration, SimTime};
use taskfarm_cli::report::{comparison_table, summarize, write_journal_reports, write_run_reports};
use taskfarm_cli::{Hub, HubConfig};

/// Deadline- and budget-driven parametric task farming on a simulated grid.
#[derive(Parser)]
#[command(name = "taskfarm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Quote a plan against a fabric; exits 2 when the constraints cannot be met.
    Quote(QuoteArgs),
    /// Run one journaled experiment, optionally stopping early; resumes an existing journal.
    Run(RunArgs),
    /// Print the status of a journaled experiment.
    Status(ExperimentRef),
    /// Change the deadline or budget of a journaled experiment.
    Steer(SteerArgs),
    /// Write ledger, usage and decision reports from a journal.
    Report(ReportArgs),
    /// Run a plan to completion once per deadline and write comparison reports.
    Simulate(SimulateArgs),
    /// Serve the HTTP control API.
    Serve(ServeArgs),
}

#[derive(Args, Clone)]
struct FabricArgs {
    /// Fabric description (JSON).
    #[arg(long, conflicts_with = "synthesize")]
    fabric: Option<PathBuf>,
    /// Generate a fabric of N resources instead of reading one.
    #[arg(long, value_name = "N")]
    synthesize: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Pin rates through a sealed-bid tender at start.
    #[arg(long)]
    tender: bool,
}

impl FabricArgs {
    fn load(&self) -> Result<FabricConfig> {
        match (&self.fabric, self.synthesize) {
            (Some(path), _) => load_fabric(path).with_context(|| format!("loading {}", path.display())),
            (None, Some(n)) => Ok(synthesize(n, self.seed)),
            (None, None) => bail!("one of --fabric or --synthesize is required"),
        }
    }
}

#[derive(Args)]
struct ConstraintArgs {
    /// Deadline relative to start, e.g. `10h` or `PT10H`.
    #[arg(long)]
    deadline: SimDuration,
    /// Budget, e.g. `1500.00`.
    #[arg(long)]
    budget: Money,
    #[arg(long, default_value = "user")]
    user: String,
}

#[derive(Args)]
struct QuoteArgs {
    #[arg(long)]
    plan: PathBuf,
    #[command(flatten)]
    fabric: FabricArgs,
    #[command(flatten)]
    constraints: ConstraintArgs,
}

#[derive(Args)]
struct RunArgs {
    /// Plan file; required unless the experiment's journal already exists.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[command(flatten)]
    fabric: FabricArgs,
    #[arg(long)]
    deadline: Option<SimDuration>,
    #[arg(long)]
    budget: Option<Money>,
    #[arg(long, default_value = "user")]
    user: String,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Experiment id; defaults to the plan file stem.
    #[arg(long)]
    id: Option<String>,
    /// Stop after this much simulated time since the experiment began.
    #[arg(long)]
    until: Option<SimDuration>,
    #[arg(long, default_value = "cli")]
    client: String,
    /// Usage table sampling interval.
    #[arg(long, default_value = "15m")]
    step: SimDuration,
}

#[derive(Args)]
struct ExperimentRef {
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long)]
    id: String,
}

#[derive(Args)]
struct SteerArgs {
    #[command(flatten)]
    experiment: ExperimentRef,
    #[arg(long)]
    deadline: Option<SimDuration>,
    #[arg(long)]
    budget: Option<Money>,
    #[arg(long, default_value = "cli")]
    client: String,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    experiment: ExperimentRef,
    #[arg(long, default_value = "15m")]
    step: SimDuration,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    plan: PathBuf,
    #[command(flatten)]
    fabric: FabricArgs,
    /// One run per deadline; repeat the flag or separate values with `/` or `,`.
    #[arg(long, required = true, value_delimiter = ',')]
    deadline: Vec<String>,
    #[arg(long)]
    budget: Money,
    #[arg(long, default_value = "user")]
    user: String,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long, default_value = "15m")]
    step: SimDuration,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    #[command(flatten)]
    fabric: FabricArgs,
    /// Journal directory; experiments found there are resumed.
    #[arg(long)]
    journal_dir: Option<PathBuf>,
    /// Simulated seconds per wall-clock second.
    #[arg(long, default_value_t = 60.0)]
    speed: f64,
}

/// What a journaled experiment needs besides its journal to resume.
#[derive(Serialize, Deserialize)]
struct RunSetup {
    fabric: FabricConfig,
    seed: u64,
    options: SimOptions,
}

fn setup_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.setup.json"))
}

fn read_plan(path: &Path) -> Result<taskfarm::plan::Plan> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_plan(&text).map_err(|d| {
        let lines: Vec<String> = d.iter().map(|d| format!("{}:{d}", path.display())).collect();
        anyhow::anyhow!("plan has errors:\n{}", lines.join("\n"))
    })
}

/// Writes to stdout; a closed reader ends the process quietly.
fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    if out.write_all(text.as_bytes()).and_then(|_| out.flush()).is_err() {
        std::process::exit(0);
    }
}

fn success(phase: Phase) -> bool {
    !matches!(phase, Phase::Aborted | Phase::DeadlineMissed | Phase::BudgetExhausted)
}

fn print_paths(paths: &[PathBuf]) {
    for p in paths {
        emit(&format!("wrote {}\n", p.display()));
    }
}

/// Rebuilds a journaled experiment. With `append` the journal file keeps
/// growing; otherwise recovery records stay in memory.
fn reopen(dir: &Path, id: &str, append: bool) -> Result<SimRunner> {
    let path = FileJournal::path_for(dir, id);
    let prefix = read_journal_file(&path).with_context(|| format!("reading {}", path.display()))?;
    if let Some(t) = &prefix.truncated {
        eprintln!("warning: journal truncated at line {}: {}", t.line, t.reason);
    }
    let setup: RunSetup = serde_json::from_str(&fs::read_to_string(setup_path(dir, id))?)?;
    let bytes = fs::read(&path)?;
    let valid = &bytes[..prefix.valid_len as usize];
    let engine = if append {
        Engine::recover(valid, Box::new(FileJournal::reopen(&path, prefix.valid_len)?), None)?.0
    } else {
        Engine::recover(valid, Box::new(MemoryJournal::new()), None)?.0
    };
    Ok(SimRunner::new(engine, setup.fabric, setup.seed, setup.options)?)
}

fn quote(args: QuoteArgs) -> Result<ExitCode> {
    let plan = read_plan(&args.plan)?;
    let fabric = args.fabric.load()?;
    let c = args.constraints;
    let constraints = ExperimentConstraints::new(c.deadline, c.budget, c.user);
    let engine = Engine::create(
        "quote",
        &plan,
        constraints,
        EngineConfig::default(),
        Box::new(MemoryJournal::new()),
        SimTime::ZERO,
    )?;
    let runner = SimRunner::new(engine, fabric, args.fabric.seed, SimOptions { tender: args.fabric.tender })?;
    let q = runner.quote();
    emit(&format!("{}\n", serde_json::to_string_pretty(&q)?));
    if q.feasible {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("infeasible: {}", q.reason.as_deref().unwrap_or("constraints cannot be met"));
        Ok(ExitCode::from(2))
    }
}

fn run(args: RunArgs) -> Result<ExitCode> {
    fs::create_dir_all(&args.out_dir)?;
    let id = match (&args.id, &args.plan) {
        (Some(id), _) => id.clone(),
        (None, Some(p)) => p.file_stem().map(|s| s.to_string_lossy().into_owned()).context("plan path has no name")?,
        (None, None) => bail!("--id or --plan is required"),
    };
    let client = Some(args.client.as_str());
    let mut runner = if FileJournal::path_for(&args.out_dir, &id).exists() {
        eprintln!("resuming {id}");
        reopen(&args.out_dir, &id, true)?
    } else {
        let plan = read_plan(args.plan.as_deref().context("--plan is required for a new experiment")?)?;
        let (Some(deadline), Some(budget)) = (args.deadline, args.budget) else {
            bail!("--deadline and --budget are required for a new experiment");
        };
        let setup = RunSetup {
            fabric: args.fabric.load()?,
            seed: args.fabric.seed,
            options: SimOptions { tender: args.fabric.tender },
        };
        fs::write(setup_path(&args.out_dir, &id), serde_json::to_string_pretty(&setup)?)?;
        let engine = Engine::create(
            &id,
            &plan,
            ExperimentConstraints::new(deadline, budget, args.user.clone()),
            EngineConfig::default(),
            Box::new(FileJournal::create(&args.out_dir, &id)?),
            SimTime::ZERO,
        )?;
        let mut runner = SimRunner::new(engine, setup.fabric, setup.seed, setup.options)?;
        runner.record_quote()?;
        runner
    };
    if runner.phase() == Phase::Negotiating {
        runner.control(Action::Accept, client)?;
    }
    if runner.phase() == Phase::Ready {
        runner.start(client)?;
    }
    let until = match args.until {
        Some(d) => {
            let origin = runner.engine().experiment().clock_origin.unwrap_or(runner.now());
            RunUntil::Time(origin + d)
        }
        None => RunUntil::Terminal,
    };
    let outcome = runner.run_until(until)?;
    if let Some(why) = &outcome.stalled {
        eprintln!("stalled: {why}");
    }
    let summary = summarize(runner.engine(), args.step);
    emit(&comparison_table(std::slice::from_ref(&summary)));
    print_paths(&[FileJournal::path_for(&args.out_dir, &id)]);
    print_paths(&write_run_reports(&runner, &args.out_dir, args.step)?);
    Ok(if success(outcome.phase) { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn status(args: ExperimentRef) -> Result<ExitCode> {
    let runner = reopen(&args.out_dir, &args.id, false)?;
    emit(&format!("{}\n", serde_json::to_string_pretty(&runner.engine().snapshot())?));
    Ok(ExitCode::SUCCESS)
}

fn steer(args: SteerArgs) -> Result<ExitCode> {
    if args.deadline.is_none() && args.budget.is_none() {
        bail!("nothing to change: give --deadline and/or --budget");
    }
    let mut runner = reopen(&args.experiment.out_dir, &args.experiment.id, true)?;
    let spent = runner.engine().experiment().ledger.committed();
    let q = runner.steer(&Steer { deadline: args.deadline, budget: args.budget }, Some(&args.client))?;
    if args.budget.is_some_and(|b| b <= spent) {
        eprintln!("warning: budget does not exceed the {spent} already spent");
    }
    let body = serde_json::json!({
        "constraints": runner.engine().experiment().constraints,
        "phase": runner.phase(),
        "quote": q,
    });
    emit(&format!("{}\n", serde_json::to_string_pretty(&body)?));
    Ok(ExitCode::SUCCESS)
}

fn report(args: ReportArgs) -> Result<ExitCode> {
    let runner = reopen(&args.experiment.out_dir, &args.experiment.id, false)?;
    let summary = summarize(runner.engine(), args.step);
    emit(&comparison_table(std::slice::from_ref(&summary)));
    print_paths(&write_journal_reports(runner.engine(), &args.experiment.out_dir, args.step)?);
    Ok(ExitCode::SUCCESS)
}

fn simulate(args: SimulateArgs) -> Result<ExitCode> {
    let plan = read_plan(&args.plan)?;
    let fabric = args.fabric.load()?;
    let stem = args.plan.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "plan".into());
    fs::create_dir_all(&args.out_dir)?;
    let deadlines: Vec<&str> = args.deadline.iter().flat_map(|d| d.split('/')).filter(|d| !d.is_empty()).collect();
    let mut summaries = Vec::new();
    let mut paths = Vec::new();
    for text in deadlines {
        let deadline: SimDuration = text.parse().map_err(|e| anyhow::anyhow!("--deadline {text}: {e}"))?;
        let id = format!("{stem}-{}", text.to_ascii_lowercase().replace(|c: char| !c.is_ascii_alphanumeric(), ""));
        let journal = FileJournal::path_for(&args.out_dir, &id);
        if journal.exists() {
            fs::remove_file(&journal)?;
        }
        let engine = Engine::create(
            &id,
            &plan,
            ExperimentConstraints::new(deadline, args.budget, args.user.clone()),
            EngineConfig::default(),
            Box::new(FileJournal::create(&args.out_dir, &id)?),
            SimTime::ZERO,
        )?;
        let options = SimOptions { tender: args.fabric.tender };
        let mut runner = SimRunner::new(engine, fabric.clone(), args.fabric.seed, options)?;
        runner.record_quote()?;
        runner.start(Some("cli"))?;
        let outcome = runner.run_until(RunUntil::Terminal)?;
        if let Some(why) = &outcome.stalled {
            eprintln!("{id}: stalled: {why}");
        }
        summaries.push(summarize(runner.engine(), args.step));
        paths.push(journal);
        paths.extend(write_run_reports(&runner, &args.out_dir, args.step)?);
    }
    let table = comparison_table(&summaries);
    let table_path = args.out_dir.join(format!("{stem}.comparison.txt"));
    fs::write(&table_path, &table)?;
    paths.push(table_path);
    emit(&table);
    print_paths(&paths);
    Ok(if summaries.iter().all(|s| success(s.phase)) { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn serve(args: ServeArgs) -> Result<ExitCode> {
    if let Some(dir) = &args.journal_dir {
        fs::create_dir_all(dir)?;
    }
    let hub = Arc::new(Hub::new(HubConfig {
        fabric: args.fabric.load()?,
        seed: args.fabric.seed,
        journal_dir: args.journal_dir.clone(),
        options: SimOptions { tender: args.fabric.tender },
    }));
    for id in hub.recover_all()? {
        eprintln!("resumed {id}");
    }
    tokio::runtime::Runtime::new()?.block_on(async {
        let listener = tokio::net::TcpListener::bind(args.addr).await?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        taskfarm_cli::serve(hub, listener, args.speed).await
    })?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let result = match Cli::parse().command {
        Command::Quote(a) => quote(a),
        Command::Run(a) => run(a),
        Command::Status(a) => status(a),
        Command::Steer(a) => steer(a),
        Command::Report(a) => report(a),
        Command::Simulate(a) => simulate(a),
        Command::Serve(a) => serve(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
