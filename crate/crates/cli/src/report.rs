use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::config::ReportParams;
use crate::error::{CliError, CliResult};
use crate::output::{OutDir, TIMING};
use crate::tasks::Context;

const RUN_HEADER: [&str; 5] = ["step", "risk", "gap", "dist_before", "dist_after"];
const SUMMARY: &str = "summary.csv";

#[derive(Debug, Deserialize)]
struct Row {
    step: usize,
    risk: f64,
    gap: f64,
    dist_before: Option<f64>,
    dist_after: Option<f64>,
}

#[derive(Debug)]
struct Run {
    name: String,
    last: Row,
}

fn read_run(path: &Path) -> CliResult<Run> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::io(path, e))?;
    let header = reader.headers().map_err(|e| CliError::io(path, e))?;
    if header.iter().ne(RUN_HEADER) {
        return Err(CliError::io(path, "not a run record (unexpected header)"));
    }
    let mut last = None;
    for row in reader.deserialize::<Row>() {
        last = Some(row.map_err(|e| CliError::io(path, e))?);
    }
    let last = last.ok_or_else(|| CliError::io(path, "run record has no rows"))?;
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| CliError::io(path, "file name is not UTF-8"))?
        .to_string();
    Ok(Run { name, last })
}

fn read_timing(dir: &Path) -> CliResult<BTreeMap<String, f64>> {
    let path = dir.join(TIMING);
    match std::fs::read_to_string(&path) {
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(BTreeMap::new()),
        Err(e) => Err(CliError::io(&path, e)),
        Ok(text) => serde_json::from_str(&text).map_err(|e| CliError::io(&path, e)),
    }
}

/// The ARM run trained alongside an EBM run, and vice versa.
fn partner(name: &str) -> Option<String> {
    if let Some(rest) = name.strip_prefix("ebm_") {
        Some(format!("arm_{rest}"))
    } else {
        name.strip_prefix("arm_").map(|rest| format!("ebm_{rest}"))
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

pub fn report(ctx: &Context, out: PathBuf) -> CliResult<()> {
    let params: ReportParams = ctx.loaded.params()?;
    let dir = ctx.loaded.resolve(&params.runs);
    let entries = std::fs::read_dir(&dir).map_err(|e| CliError::io(&dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::io(&dir, e))?.path();
        let is_csv = path.extension().is_some_and(|e| e == "csv");
        if is_csv && path.file_name().is_some_and(|n| n != SUMMARY) {
            paths.push(path);
        }
    }
    if paths.is_empty() {
        return Err(CliError::io(&dir, "no run records found"));
    }
    paths.sort();
    let runs: Vec<Run> = paths.iter().map(|p| read_run(p)).collect::<CliResult<_>>()?;
    let timing = read_timing(&dir)?;
    let risks: BTreeMap<&str, f64> = runs.iter().map(|r| (r.name.as_str(), r.last.risk)).collect();

    let mut text = String::from("run,steps,final_risk,final_gap,dist_before,dist_after,wall_seconds,risk_diff\n");
    for run in &runs {
        // ARM risk minus EBM risk, on both rows of a pair
        let risk_diff = partner(&run.name)
            .and_then(|p| risks.get(p.as_str()).copied())
            .map(|other| {
                if run.name.starts_with("arm_") {
                    run.last.risk - other
                } else {
                    other - run.last.risk
                }
            });
        text.push_str(&format!(
            "{},{},{:e},{:e},{},{},{},{}\n",
            run.name,
            run.last.step,
            run.last.risk,
            run.last.gap,
            opt(run.last.dist_before),
            opt(run.last.dist_after),
            opt(timing.get(&run.name).copied()),
            opt(risk_diff),
        ));
    }
    let mut out = OutDir::create(out)?;
    out.write(SUMMARY, text.as_bytes())?;
    out.finish()
}
