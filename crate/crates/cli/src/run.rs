use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

/// One JSON object per line on stderr.
pub fn log(level: &str, command: &str, event: &str, fields: Value) {
    let mut line = json!({"level": level, "command": command, "event": event});
    if let (Value::Object(dst), Value::Object(src)) = (&mut line, fields) {
        dst.extend(src);
    }
    eprintln!("{line}");
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Digest over the sorted relative paths and contents of every file below `dir`.
pub fn sha256_dir(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(dir).unwrap_or(&f);
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(sha256_file(&f)?.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

fn digest(path: &Path) -> Result<String> {
    if path.is_dir() {
        sha256_dir(path)
    } else {
        sha256_file(path)
    }
}

#[derive(Debug, Serialize)]
struct FileDigest {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct RunManifest {
    command_line: Vec<String>,
    toolkit_version: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    config_hashes: BTreeMap<String, String>,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
    wall_clock_ms: u128,
    #[serde(skip_serializing_if = "serde_json::Map::is_empty")]
    summary: serde_json::Map<String, Value>,
}

/// Collects what a run read and wrote; [`Run::finish`] writes the manifest
/// beside the primary output.
pub struct Run {
    command: &'static str,
    started: Instant,
    seed: Option<u64>,
    configs: Vec<PathBuf>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    summary: serde_json::Map<String, Value>,
}

impl Run {
    pub fn start(command: &'static str) -> Self {
        log("info", command, "start", json!({}));
        Self {
            command,
            started: Instant::now(),
            seed: None,
            configs: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            summary: serde_json::Map::new(),
        }
    }

    pub fn seed(&mut self, seed: u64) {
        self.seed = Some(seed);
    }

    pub fn config(&mut self, path: &Path) {
        self.configs.push(path.to_path_buf());
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn note(&mut self, key: &str, value: impl Serialize) {
        self.summary.insert(key.to_string(), serde_json::to_value(value).expect("summary serializes"));
    }

    pub fn event(&self, event: &str, fields: Value) {
        log("info", self.command, event, fields);
    }

    /// Writes `<primary output>.run.json` and logs completion.
    pub fn finish(self) -> Result<()> {
        let digests = |paths: &[PathBuf]| -> Result<Vec<FileDigest>> {
            paths
                .iter()
                .map(|p| Ok(FileDigest { path: p.display().to_string(), sha256: digest(p)? }))
                .collect()
        };
        let manifest = RunManifest {
            command_line: std::env::args().collect(),
            toolkit_version: env!("CARGO_PKG_VERSION"),
            seed: self.seed,
            config_hashes: self
                .configs
                .iter()
                .map(|p| Ok((p.display().to_string(), digest(p)?)))
                .collect::<Result<_>>()?,
            inputs: digests(&self.inputs)?,
            outputs: digests(&self.outputs)?,
            wall_clock_ms: self.started.elapsed().as_millis(),
            summary: self.summary,
        };
        if let Some(primary) = self.outputs.first() {
            let path = manifest_path(primary);
            fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
                .with_context(|| format!("writing {}", path.display()))?;
        }
        log(
            "info",
            self.command,
            "done",
            json!({"wall_clock_ms": manifest.wall_clock_ms, "summary": manifest.summary}),
        );
        Ok(())
    }
}

pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".run.json");
    output.with_file_name(name)
}
