use std::fs;
use std::path::{Path, PathBuf};

use mirror_core::dataset::{dialogue_funnel, DatasetSample, DialogueRecord, ImageStore};
use mirror_core::loop_engine::{load_trajectory_document, TrajectoryDocument};
use mirror_core::stats::{quality_report, round_distribution, StatsError};
use serde::Serialize;
use walkdir::WalkDir;

use crate::session::{read_jsonl, runtime, usage, CliError, Session};
use crate::StatsCommand;

pub fn cmd_stats(cmd: StatsCommand) -> u8 {
    let (name, out) = match &cmd {
        StatsCommand::Rounds { out, .. } => ("stats rounds", out.clone()),
        StatsCommand::Quality { out, .. } => ("stats quality", out.clone()),
        StatsCommand::Funnel { out, .. } => ("stats funnel", out.clone()),
    };
    let mut s = Session::new(name, out);
    let result = match cmd {
        StatsCommand::Rounds { inputs, json, .. } => rounds(&inputs, json, &mut s),
        StatsCommand::Quality { subsets, sample, seed, config, json, .. } => {
            quality(&subsets, sample, seed, config.as_deref(), json, &mut s)
        }
        StatsCommand::Funnel { input, json, .. } => funnel(&input, json, &mut s),
    };
    s.finish(result)
}

/// Prints the report and, with `--out`, also writes it as JSON.
fn emit<T: Serialize>(s: &mut Session, file: &str, report: &T, table: String, json: bool) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(report).map_err(|e| runtime(e.to_string()))?;
    if json {
        println!("{text}");
    } else {
        print!("{table}");
    }
    if let Some(out) = s.out.clone() {
        fs::create_dir_all(&out).map_err(|e| runtime(format!("--out: {e}")))?;
        let path = out.join(file);
        fs::write(&path, text + "\n").map_err(|e| runtime(format!("--out: {e}")))?;
        s.output(&path);
    }
    Ok(())
}

fn trajectory_files(input: &Path) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = WalkDir::new(input)
        .into_iter()
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file() && e.file_name() == "trajectory.json")
        .map(|e| e.into_path())
        .collect();
    files.sort();
    files
}

fn rounds(inputs: &[PathBuf], json: bool, s: &mut Session) -> Result<(), CliError> {
    let mut lengths = Vec::new();
    for input in inputs {
        s.input(input);
        if input.is_dir() {
            for file in trajectory_files(input) {
                let doc = load_trajectory_document(&file).map_err(|e| usage(format!("--in: {e}")))?;
                lengths.push(doc.rounds);
            }
        } else if input.extension().is_some_and(|e| e == "jsonl") {
            let docs: Vec<(usize, TrajectoryDocument)> = read_jsonl(input)?;
            lengths.extend(docs.iter().map(|(_, d)| d.rounds));
        } else if input.is_file() {
            let doc = load_trajectory_document(input).map_err(|e| usage(format!("--in: {e}")))?;
            lengths.push(doc.rounds);
        } else {
            return Err(usage(format!("--in: no such file or directory: {}", input.display())));
        }
    }
    let hist = round_distribution(&lengths).map_err(|e| usage(format!("--in: {e}")))?;
    let table = hist.to_table();
    emit(s, "rounds.json", &hist, table, json)
}

fn quality(
    subsets: &[String],
    sample: Option<usize>,
    seed: u64,
    config: Option<&Path>,
    json: bool,
    s: &mut Session,
) -> Result<(), CliError> {
    let cfg = s.load_config(config)?;
    s.manifest.seed = Some(seed);
    let mut loaded = Vec::new();
    let mut roots = Vec::new();
    for arg in subsets {
        let (name, path) = arg
            .split_once('=')
            .filter(|(n, p)| !n.is_empty() && !p.is_empty())
            .ok_or_else(|| usage(format!("--subset: expected NAME=PATH, got `{arg}`")))?;
        let path = PathBuf::from(path);
        s.input(&path);
        let samples: Vec<DatasetSample> = read_jsonl(&path)?.into_iter().map(|(_, v)| v).collect();
        roots.push(path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf));
        loaded.push((name.to_string(), samples));
    }
    let backends = cfg.backends().map_err(|e| usage(format!("--config: {e}")))?;
    let mut rows = Vec::new();
    // Each subset resolves image references against its own directory.
    for (subset, root) in loaded.into_iter().zip(roots) {
        let store = ImageStore::at(root);
        let report = quality_report(std::slice::from_ref(&subset), backends.judge.as_ref(), &store, sample, seed)
            .map_err(|e| match e {
                StatsError::Backend(_) => runtime(e.to_string()),
                other => usage(other.to_string()),
            })?;
        rows.extend(report.rows);
    }
    let report = mirror_core::stats::QualityReport { rows };
    let table = report.to_table();
    emit(s, "quality.json", &report, table, json)
}

fn funnel(input: &Path, json: bool, s: &mut Session) -> Result<(), CliError> {
    s.input(input);
    let records: Vec<DialogueRecord> = read_jsonl(input)?.into_iter().map(|(_, v)| v).collect();
    let report = dialogue_funnel(&records);
    let table = report.to_table();
    s.manifest.funnel = Some(report.clone());
    emit(s, "funnel.json", &report, table, json)
}
