use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

pub const FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct StageTiming {
    pub stage: String,
    /// Seconds since the run started.
    pub started: f64,
    pub seconds: f64,
}

#[derive(Debug, Serialize)]
pub struct Seeds {
    pub montecarlo: u64,
    pub assumptions: u64,
}

#[derive(Debug, Serialize)]
pub struct Versions {
    pub fbcontrol: &'static str,
    pub trajectory_format: u32,
}

/// Record of one invocation, written to `manifest.json` whatever the outcome.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub scenario: Option<String>,
    pub scenario_sha256: Option<String>,
    pub versions: Versions,
    pub seeds: Option<Seeds>,
    pub threads: Option<usize>,
    pub outputs: Vec<String>,
    pub stages: Vec<StageTiming>,
    pub exit_code: i32,
    pub error: Option<String>,
    #[serde(skip)]
    clock: Option<Instant>,
}

impl RunManifest {
    pub fn new(command: &str, threads: Option<usize>) -> Self {
        RunManifest {
            command: command.to_string(),
            scenario: None,
            scenario_sha256: None,
            versions: Versions {
                fbcontrol: env!("CARGO_PKG_VERSION"),
                trajectory_format: fbcontrol::io::VERSION,
            },
            seeds: None,
            threads,
            outputs: Vec::new(),
            stages: Vec::new(),
            exit_code: 0,
            error: None,
            clock: Some(Instant::now()),
        }
    }

    pub fn hash_scenario(&mut self, path: &Path, bytes: &[u8]) {
        self.scenario = Some(path.display().to_string());
        self.scenario_sha256 = Some(hex::encode(Sha256::digest(bytes)));
    }

    /// Run `f` as a named stage and record its wall-clock time.
    pub fn stage<T>(&mut self, name: &str, f: impl FnOnce() -> T) -> T {
        let origin = *self.clock.get_or_insert_with(Instant::now);
        let start = Instant::now();
        let out = f();
        self.stages.push(StageTiming {
            stage: name.to_string(),
            started: start.duration_since(origin).as_secs_f64(),
            seconds: start.elapsed().as_secs_f64(),
        });
        log::info!("stage {name} took {:.3}s", start.elapsed().as_secs_f64());
        out
    }

    pub fn output(&mut self, name: &str) {
        self.outputs.push(name.to_string());
    }

    pub fn write(&mut self, dir: &Path) -> std::io::Result<()> {
        self.output(FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest is plain data");
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(FILE), text + "\n")
    }
}
