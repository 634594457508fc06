//! Run manifests, JSON emission and timing.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use anyhow::{Context as _, Result};
use serde::Serialize;
use serde_json::Value;

pub struct Context {
    timing: bool,
}

impl Context {
    pub fn new(timing: bool) -> Self {
        Context { timing }
    }

    /// Runs `f`, reporting its wall time on stderr when timing is on.
    pub fn timed<T>(&self, phase: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let v = f();
        if self.timing {
            eprintln!("[timing] {phase}: {:.3} ms", start.elapsed().as_secs_f64() * 1e3);
        }
        v
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub inputs: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub config: BTreeMap<String, Value>,
    pub tool_version: String,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            inputs: BTreeMap::new(),
            seed: None,
            config: BTreeMap::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn input(mut self, name: &str, path: &Path) -> Self {
        self.inputs.insert(name.to_string(), path.display().to_string());
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn config(mut self, key: &str, value: impl Serialize) -> Self {
        self.config
            .insert(key.to_string(), serde_json::to_value(value).expect("serializable"));
        self
    }
}

/// Writes a report as pretty JSON to `out`, or to stdout.
pub fn emit(report: &impl Serialize, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    match out {
        Some(p) => std::fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display())),
        None => {
            let mut out = std::io::stdout().lock();
            match writeln!(out, "{text}") {
                Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
                r => Ok(r?),
            }
        }
    }
}

fn kind(e: &anyhow::Error) -> &'static str {
    use rftrace::Error as E;
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<E>() {
            return match err {
                E::Shape { .. } => "shape",
                E::InvalidArgument(_) => "invalid_argument",
                E::Parse { .. } => "parse",
                E::Validation(_) => "validation",
                E::Cycle(_) => "cycle",
                E::MissingWeights { .. } => "missing_weights",
                E::Trace(_) => "trace",
                E::ParamLength { .. } => "param_length",
                E::EmptyMask => "empty_mask",
                E::Metric(_) => "metric",
                E::Format(_) => "format",
                E::Io(_) => "io",
                E::Json(_) => "json",
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return "json";
        }
    }
    "usage"
}

/// Structured error document on stdout; the message chain also goes to
/// stderr.
pub fn emit_error(e: &anyhow::Error) {
    let doc = serde_json::json!({
        "error": {
            "kind": kind(e),
            "message": format!("{e:#}"),
        },
        "tool_version": env!("CARGO_PKG_VERSION"),
    });
    println!("{}", serde_json::to_string_pretty(&doc).expect("serializable"));
    eprintln!("error: {e:#}");
}
