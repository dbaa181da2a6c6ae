use std::fs;
use std::path::{Path, PathBuf};

use taskfarm::plan::{expand_jobs, parse_plan, Domain, Plan};

pub struct CorpusPlan {
    pub path: PathBuf,
    pub text: String,
    /// Value of the `# key: value` header on the first line.
    pub header: String,
}

fn load(dir: &str, key: &str) -> Vec<CorpusPlan> {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/plans").join(dir);
    let mut paths: Vec<PathBuf> = fs::read_dir(&root)
        .unwrap_or_else(|e| panic!("{}: {e}", root.display()))
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "plan"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|path| {
            let text = fs::read_to_string(&path).unwrap();
            let first = text.lines().next().unwrap_or_default();
            let prefix = format!("# {key}: ");
            let header = first
                .strip_prefix(&prefix)
                .unwrap_or_else(|| panic!("{} lacks a `{prefix}` header", path.display()))
                .trim()
                .to_string();
            CorpusPlan { path, text, header }
        })
        .collect()
}

pub fn valid() -> Vec<CorpusPlan> {
    load("valid", "jobs")
}

pub fn invalid() -> Vec<CorpusPlan> {
    load("invalid", "error")
}

/// Domain size counted by walking the values, independent of the library's
/// own cardinality arithmetic.
fn walk_size(domain: &Domain) -> u64 {
    match domain {
        Domain::List { values } => values.len() as u64,
        Domain::IntRange { from, to, step } => {
            let mut n = 0;
            let mut v = *from;
            while v <= *to {
                n += 1;
                v += step;
            }
            n
        }
        Domain::RealRange { from, to, step } => {
            let mut n = 0u64;
            while from + n as f64 * step <= to + step * 1e-9 {
                n += 1;
            }
            n
        }
    }
}

pub fn walked_product(plan: &Plan) -> u64 {
    plan.parameters.iter().map(|p| walk_size(&p.domain)).product()
}

/// Checks one valid plan; returns a description of the first problem.
pub fn check_valid(p: &CorpusPlan) -> Result<(), String> {
    let name = p.path.file_name().unwrap().to_string_lossy();
    let plan = parse_plan(&p.text).map_err(|d| format!("{name}: {d}"))?;
    let printed = plan.to_string();
    let reparsed = parse_plan(&printed).map_err(|d| format!("{name}: printed form does not parse: {d}"))?;
    if reparsed != plan {
        return Err(format!("{name}: parse(print(plan)) differs"));
    }
    if reparsed.to_string() != printed {
        return Err(format!("{name}: printing is not stable"));
    }
    let expected: u64 = p.header.parse().map_err(|_| format!("{name}: bad header"))?;
    let walked = walked_product(&plan);
    let jobs = expand_jobs(&plan, "corpus", 1_000_000).map_err(|e| format!("{name}: {e}"))?;
    if walked != expected || jobs.len() as u64 != expected {
        return Err(format!("{name}: expected {expected} jobs, walked {walked}, expanded {}", jobs.len()));
    }
    Ok(())
}

/// Checks one invalid plan is rejected with a diagnostic at the pinned
/// `line:column`.
pub fn check_invalid(p: &CorpusPlan) -> Result<(), String> {
    let name = p.path.file_name().unwrap().to_string_lossy();
    let diags = match parse_plan(&p.text) {
        Ok(_) => return Err(format!("{name}: accepted")),
        Err(d) => d,
    };
    let (line, column) = p.header.split_once(':').ok_or_else(|| format!("{name}: bad header"))?;
    let (line, column): (usize, usize) = (line.parse().unwrap(), column.parse().unwrap());
    if diags.iter().any(|d| d.line == 0 || d.column == 0 || d.message.is_empty()) {
        return Err(format!("{name}: unpositioned diagnostic in {diags}"));
    }
    if !diags.iter().any(|d| d.line == line && d.column == column) {
        return Err(format!("{name}: expected a diagnostic at {line}:{column}, got {diags}"));
    }
    Ok(())
}
