//! Exit codes, the run manifest and JSONL helpers shared by all commands.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use mirror_core::config::Config;
use mirror_core::dataset::FunnelReport;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

pub const MANIFEST_NAME: &str = "run_manifest.json";

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, missing files or malformed input. Exit 1.
    Usage(String),
    /// Backend failures and other runtime problems. Exit 2.
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub fn runtime(msg: impl Into<String>) -> CliError {
    CliError::Runtime(msg.into())
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub version: String,
    pub config_path: Option<String>,
    pub config: Value,
    pub seed: Option<u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub started_at: String,
    pub finished_at: String,
    pub exit_code: u8,
    pub funnel: Option<FunnelReport>,
    pub warnings: Vec<String>,
    pub errors: Vec<String>,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// One command invocation. Collects what the manifest needs and writes it
/// into the output directory when the command ends.
pub struct Session {
    pub manifest: RunManifest,
    pub out: Option<PathBuf>,
}

impl Session {
    pub fn new(command: &str, out: Option<PathBuf>) -> Self {
        Session {
            manifest: RunManifest {
                command: command.to_string(),
                args: std::env::args().skip(1).collect(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                config_path: None,
                config: Value::Null,
                seed: None,
                inputs: Vec::new(),
                outputs: Vec::new(),
                started_at: now(),
                finished_at: String::new(),
                exit_code: 0,
                funnel: None,
                warnings: Vec::new(),
                errors: Vec::new(),
            },
            out,
        }
    }

    pub fn out_dir(&self) -> Result<&Path, CliError> {
        self.out.as_deref().ok_or_else(|| usage("--out is required"))
    }

    /// Loads the config (flag, then `MIRROR_CONFIG`, then defaults) and
    /// records it in the manifest.
    pub fn load_config(&mut self, path: Option<&Path>) -> Result<Config, CliError> {
        let (cfg, used) = Config::resolve(path).map_err(|e| usage(format!("--config: {e}")))?;
        self.manifest.config_path = used.map(|p| p.display().to_string());
        self.manifest.config = serde_json::to_value(&cfg).unwrap_or(Value::Null);
        Ok(cfg)
    }

    pub fn input(&mut self, path: &Path) {
        self.manifest.inputs.push(path.display().to_string());
    }

    pub fn output(&mut self, path: &Path) {
        self.manifest.outputs.push(path.display().to_string());
    }

    pub fn warn(&mut self, msg: String) {
        tracing::warn!("{msg}");
        self.manifest.warnings.push(msg);
    }

    pub fn error(&mut self, msg: String) {
        tracing::error!("{msg}");
        self.manifest.errors.push(msg);
    }

    /// Reports the outcome, writes the manifest and returns the exit code.
    pub fn finish(mut self, result: Result<(), CliError>) -> u8 {
        let code = match &result {
            Ok(()) => 0,
            Err(e) => {
                eprintln!("error: {}", e.message());
                self.manifest.errors.push(e.message().to_string());
                e.code()
            }
        };
        self.manifest.exit_code = code;
        self.manifest.finished_at = now();
        if let Some(out) = &self.out {
            let written = fs::create_dir_all(out).and_then(|_| {
                let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
                fs::write(out.join(MANIFEST_NAME), json + "\n")
            });
            if let Err(e) = written {
                eprintln!("error: cannot write run manifest: {e}");
                return 2;
            }
        }
        code
    }
}

/// Reads a JSONL file into `(line number, value)` pairs. A line that does
/// not parse is a usage error naming the line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("--in: cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(line)
            .map_err(|e| usage(format!("{}: line {}: {e}", path.display(), i + 1)))?;
        out.push((i + 1, value));
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), CliError> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item).map_err(|e| runtime(e.to_string()))?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))?;
    f.write_all(&buf).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}
