use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use chrono::{SecondsFormat, Utc};
use serde_json::{json, Value};

use crate::{CliError, CliResult};

pub struct Context {
    pub root: PathBuf,
    pub argv: Vec<String>,
}

/// `base`, or `base-1`, `base-2`, ... for the first name not yet taken.
pub fn fresh_path(base: &Path) -> PathBuf {
    if !base.exists() {
        return base.to_path_buf();
    }
    let name = base.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    (1..)
        .map(|i| base.with_file_name(format!("{name}-{i}")))
        .find(|p| !p.exists())
        .expect("unbounded suffix search")
}

pub fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::User(format!("cannot create {}: {e}", path.display())))
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::Internal(format!("writing {}: {e}", path.display())))
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Secs, true)
}

fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

/// One invocation's output directory plus the manifest describing it.
pub struct Run {
    pub dir: PathBuf,
    started: String,
    manifest: Value,
    outputs: Vec<String>,
}

impl Run {
    /// Creates `<root>/<command>-<timestamp>` with a numeric suffix when the
    /// name is taken.
    pub fn start(ctx: &Context, command: &str) -> CliResult<Run> {
        let stamp = Utc::now().format("%Y%m%d-%H%M%S");
        let dir = fresh_path(&ctx.root.join(format!("{command}-{stamp}")));
        create_dir(&dir)?;
        Ok(Run {
            dir,
            started: now(),
            manifest: json!({
                "command": ctx.argv.join(" "),
                "git": git_describe(),
            }),
            outputs: Vec::new(),
        })
    }

    pub fn path(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.dir.join(name)
    }

    pub fn record(&mut self, key: &str, value: Value) {
        self.manifest[key] = value;
    }

    pub fn finish(mut self) -> CliResult<PathBuf> {
        self.manifest["started"] = json!(self.started);
        self.manifest["finished"] = json!(now());
        self.manifest["outputs"] = json!(self.outputs);
        let text = serde_json::to_string_pretty(&self.manifest).map_err(|e| CliError::Internal(e.to_string()))?;
        write_file(&self.dir.join("manifest.json"), text)?;
        println!("{}", self.dir.display());
        Ok(self.dir)
    }
}
