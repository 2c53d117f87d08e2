use std::path::Path;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use psygat::session::write_atomic;

use crate::error::CliResult;

pub const GIT_DESCRIBE: &str = env!("PSYGAT_GIT_DESCRIBE");

/// Everything needed to rerun a command. Timing lives in a sidecar so the
/// manifest itself is identical across reruns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub corpus_manifest: Option<String>,
    pub seeds: Vec<u64>,
    pub git_describe: String,
    pub timing: String,
    /// Emitted artifacts, relative to the output directory.
    pub outputs: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub started_unix_secs: u64,
    pub wall_clock_secs: f64,
}

pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const TIMING_FILE: &str = "timing.json";

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut json = serde_json::to_string_pretty(value)?;
    json.push('\n');
    write_atomic(path, json.as_bytes())?;
    Ok(())
}

pub fn finish(
    out: &Path,
    command: &str,
    config: serde_json::Value,
    corpus_manifest: Option<String>,
    seeds: Vec<u64>,
    mut outputs: Vec<String>,
    started: SystemTime,
) -> CliResult<()> {
    outputs.sort();
    let manifest = RunManifest {
        command: command.into(),
        config,
        corpus_manifest,
        seeds,
        git_describe: GIT_DESCRIBE.into(),
        timing: TIMING_FILE.into(),
        outputs,
    };
    let timing = Timing {
        started_unix_secs: started.duration_since(UNIX_EPOCH).unwrap_or(Duration::ZERO).as_secs(),
        wall_clock_secs: started.elapsed().unwrap_or(Duration::ZERO).as_secs_f64(),
    };
    write_json(&out.join(TIMING_FILE), &timing)?;
    write_json(&out.join(MANIFEST_FILE), &manifest)
}
