use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::error::CliResult;

pub const MANIFEST_FILE: &str = "manifest.txt";

/// Record of one command invocation, written next to its outputs.
#[derive(Clone, Debug)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    pub inputs: Vec<(String, PathBuf)>,
    pub outputs: Vec<(String, PathBuf)>,
    pub config: BTreeMap<String, String>,
    pub wall_seconds: f64,
    started: Instant,
}

impl RunManifest {
    pub fn start(command: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            version: concat!("hooknet ", env!("CARGO_PKG_VERSION")).to_string(),
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            config: BTreeMap::new(),
            wall_seconds: 0.0,
            started: Instant::now(),
        }
    }

    pub fn input(&mut self, name: &str, path: &Path) {
        self.inputs.push((name.to_string(), path.to_path_buf()));
    }

    pub fn output(&mut self, name: &str, path: &Path) {
        self.outputs.push((name.to_string(), path.to_path_buf()));
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: &dyn std::fmt::Display| writeln!(s, "{k} = {v}").expect("string write");
        line("command", &self.command);
        line("version", &self.version);
        if let Some(seed) = self.seed {
            line("seed", &seed);
        }
        for (k, p) in &self.inputs {
            line(&format!("input.{k}"), &p.display());
        }
        for (k, p) in &self.outputs {
            line(&format!("output.{k}"), &p.display());
        }
        for (k, v) in &self.config {
            line(&format!("config.{k}"), v);
        }
        line("wall_seconds", &format!("{:.3}", self.wall_seconds));
        s
    }

    /// Stamps the elapsed time and writes `manifest.txt` into `dir`.
    pub fn finish(mut self, dir: &Path) -> CliResult<()> {
        self.wall_seconds = self.started.elapsed().as_secs_f64();
        let p = dir.join(MANIFEST_FILE);
        std::fs::write(&p, self.to_text()).map_err(|e| hooknet_core::Error::Io { path: p, source: e })?;
        Ok(())
    }
}
