//! Run directories: config copy, content hash of the inputs, logs, results.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use paintransfer::frames::{frame_path, FLOW_SUBDIR};
use paintransfer::manifest::resolve_frame_dir;
use paintransfer::types::DatasetManifest;

use crate::config::Config;

pub const RUN_FILE: &str = "run.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const LOG_FILE: &str = "log.txt";

static LOG_SINK: Mutex<Option<File>> = Mutex::new(None);

/// Logs to stderr and, once a run directory exists, to its `log.txt`.
struct TeeLogger {
    level: log::LevelFilter,
}

impl log::Log for TeeLogger {
    fn enabled(&self, metadata: &log::Metadata) -> bool {
        metadata.level() <= self.level
    }

    fn log(&self, record: &log::Record) {
        if !self.enabled(record.metadata()) {
            return;
        }
        let line = format!("[{} {}] {}\n", record.level(), record.target(), record.args());
        eprint!("{line}");
        if let Ok(mut sink) = LOG_SINK.lock() {
            if let Some(f) = sink.as_mut() {
                let _ = f.write_all(line.as_bytes());
            }
        }
    }

    fn flush(&self) {
        if let Ok(mut sink) = LOG_SINK.lock() {
            if let Some(f) = sink.as_mut() {
                let _ = f.flush();
            }
        }
    }
}

pub fn init_logging(verbose: bool) {
    let level = match std::env::var("RUST_LOG").ok().as_deref() {
        Some("debug") => log::LevelFilter::Debug,
        Some("trace") => log::LevelFilter::Trace,
        Some("warn") => log::LevelFilter::Warn,
        Some("error") => log::LevelFilter::Error,
        _ if verbose => log::LevelFilter::Debug,
        _ => log::LevelFilter::Info,
    };
    if log::set_boxed_logger(Box::new(TeeLogger { level })).is_ok() {
        log::set_max_level(level);
    }
}

/// SHA-256 of a file's bytes.
pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Tree hash: SHA-256 over `<relative path> <file hash>` lines of every
/// file below `dir`, in sorted path order.
pub fn hash_tree(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in &files {
        h.update(format!("{} {}\n", rel, hash_file(&dir.join(rel))?).as_bytes());
    }
    Ok(format!("{:x}", h.finalize()))
}

fn collect_files(base: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir).with_context(|| format!("cannot list {}", dir.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(base, &path, out)?;
        } else {
            let rel = path.strip_prefix(base).expect("walk stays below base");
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

/// Hash of a manifest file and the RGB frames of every video it names;
/// with `include_flow` the flow images are included too.
pub fn hash_dataset(manifest_path: &Path, manifest: &DatasetManifest, root: &Path, include_flow: bool) -> Result<String> {
    let mut h = Sha256::new();
    h.update(format!("manifest {}\n", hash_file(manifest_path)?).as_bytes());
    for r in manifest.records() {
        let dir = resolve_frame_dir(root, r);
        for i in 0..r.n_frames {
            let f = frame_path(&dir, i);
            let f = if f.exists() { f } else { f.with_extension("jpg") };
            h.update(format!("{} rgb {i} {}\n", r.video_id, hash_file(&f)?).as_bytes());
        }
        if include_flow {
            let flow = dir.join(FLOW_SUBDIR);
            let tree = if flow.is_dir() { hash_tree(&flow)? } else { "missing".into() };
            h.update(format!("{} flow {}\n", r.video_id, tree).as_bytes());
        }
    }
    Ok(format!("{:x}", h.finalize()))
}

#[derive(Debug, Clone, Serialize)]
pub struct InputRecord {
    pub role: String,
    pub hash: String,
}

#[derive(Debug, Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    tool_version: &'a str,
    inputs: &'a [InputRecord],
    /// Hash over the config copy and all input hashes.
    input_hash: String,
}

pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// Creates the directory, writes the resolved config and the input
    /// record, and starts copying the log into it.
    pub fn create(path: &Path, command: &str, cfg: &Config, inputs: &[InputRecord]) -> Result<Self> {
        fs::create_dir_all(path).with_context(|| format!("cannot create run directory {}", path.display()))?;
        let config_text = cfg.to_toml()?;
        fs::write(path.join(CONFIG_FILE), &config_text)?;
        let mut h = Sha256::new();
        h.update(format!("config {:x}\n", Sha256::digest(config_text.as_bytes())).as_bytes());
        for i in inputs {
            h.update(format!("{} {}\n", i.role, i.hash).as_bytes());
        }
        let record = RunRecord {
            command,
            tool_version: env!("CARGO_PKG_VERSION"),
            inputs,
            input_hash: format!("{:x}", h.finalize()),
        };
        fs::write(path.join(RUN_FILE), serde_json::to_string_pretty(&record)? + "\n")?;
        let log = File::create(path.join(LOG_FILE))?;
        if let Ok(mut sink) = LOG_SINK.lock() {
            *sink = Some(log);
        }
        Ok(RunDir { path: path.to_path_buf() })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let p = self.file(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&p, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("cannot write {}", p.display()))?;
        Ok(p)
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<PathBuf> {
        let p = self.file(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&p, text).with_context(|| format!("cannot write {}", p.display()))?;
        Ok(p)
    }

    pub fn create_file(&self, name: &str) -> Result<File> {
        let p = self.file(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        File::create(&p).with_context(|| format!("cannot create {}", p.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tree_hash_depends_on_content_and_names() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        for d in [a.path(), b.path()] {
            fs::create_dir_all(d.join("x")).unwrap();
            fs::write(d.join("x/1.txt"), "one").unwrap();
            fs::write(d.join("2.txt"), "two").unwrap();
        }
        assert_eq!(hash_tree(a.path()).unwrap(), hash_tree(b.path()).unwrap());
        fs::write(b.path().join("2.txt"), "Two").unwrap();
        assert_ne!(hash_tree(a.path()).unwrap(), hash_tree(b.path()).unwrap());
        fs::write(b.path().join("2.txt"), "two").unwrap();
        fs::rename(b.path().join("2.txt"), b.path().join("3.txt")).unwrap();
        assert_ne!(hash_tree(a.path()).unwrap(), hash_tree(b.path()).unwrap());
    }
}
