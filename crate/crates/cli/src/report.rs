//! Machine-readable result documents. A report carries enough provenance to
//! reproduce the run (config hash, seed, tool version); re-running the same
//! configuration and seed reproduces every field outside `solver_trace`
//! bit-exactly.

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

#[derive(Serialize)]
pub struct Tool {
    pub name: &'static str,
    pub version: &'static str,
}

#[derive(Serialize)]
pub struct Report {
    pub tool: Tool,
    pub command: String,
    pub config_sha256: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_name: Option<String>,
    pub seed: u64,
    pub parameters: Value,
    pub verdict: String,
    pub results: Value,
    pub summary: String,
    /// Solver iteration counts, status strings, and timings — the only
    /// fields allowed to differ between identical runs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub solver_trace: Option<Value>,
}

impl Report {
    pub fn new(command: &str, config_sha256: String, config_name: Option<String>, seed: u64) -> Self {
        Report {
            tool: Tool {
                name: "mjrobust",
                version: env!("CARGO_PKG_VERSION"),
            },
            command: command.to_string(),
            config_sha256,
            config_name,
            seed,
            parameters: Value::Null,
            verdict: String::new(),
            results: Value::Null,
            summary: String::new(),
            solver_trace: None,
        }
    }

    /// Writes `report.json` under `out_dir` and echoes the summary to stdout.
    pub fn finish(&self, out_dir: &Path) -> io::Result<PathBuf> {
        fs::create_dir_all(out_dir)?;
        let path = out_dir.join("report.json");
        let mut body = serde_json::to_string_pretty(self).expect("report serialization");
        body.push('\n');
        fs::write(&path, body)?;
        say(&self.summary);
        say(&format!("report: {}", path.display()));
        Ok(path)
    }
}

/// Prints one stdout line, tolerating a consumer that closed the pipe early
/// (`mjrobust ... | head`): the contract outputs are the files, stdout is
/// narration, and a broken pipe must not turn a finished run into a panic.
pub fn say(line: &str) {
    use io::Write;
    let _ = writeln!(io::stdout(), "{line}");
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn solver_trace_json(diag: &mjrobust_core::lmi::SolverDiag) -> Value {
    json!({
        "status": diag.status,
        "iterations": diag.iterations,
        "solve_time_s": diag.solve_time_s,
        "objective": diag.objective,
    })
}
