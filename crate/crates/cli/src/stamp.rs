//! Up-to-date checks. A stage that finishes writes a stamp recording its
//! resolved settings and the size and mtime of every input; a rerun with the
//! same stamp and all outputs present is skipped.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::UNIX_EPOCH;

use anyhow::{Context, Result};

pub struct Stamp {
    path: PathBuf,
    digest: String,
    outputs: Vec<PathBuf>,
}

fn describe(path: &Path, out: &mut String) {
    let Ok(meta) = fs::metadata(path) else {
        out.push_str(&format!("{}:missing\n", path.display()));
        return;
    };
    if meta.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)
            .map(|d| d.filter_map(|e| e.ok().map(|e| e.path())).collect())
            .unwrap_or_default();
        entries.retain(|p| p.extension().is_none_or(|e| e != "stamp"));
        entries.sort();
        for e in entries {
            describe(&e, out);
        }
    } else {
        let mtime = meta
            .modified()
            .ok()
            .and_then(|t| t.duration_since(UNIX_EPOCH).ok())
            .map_or(0, |d| d.as_nanos());
        out.push_str(&format!("{}:{}:{mtime}\n", path.display(), meta.len()));
    }
}

impl Stamp {
    /// `settings` is any rendering of the resolved stage settings.
    pub fn new(
        path: PathBuf,
        stage: &str,
        settings: &str,
        inputs: &[&Path],
        outputs: &[&Path],
    ) -> Self {
        let mut digest = format!("stage {stage}\n{settings}\n");
        for p in inputs {
            describe(p, &mut digest);
        }
        Self {
            path,
            digest,
            outputs: outputs.iter().map(|p| p.to_path_buf()).collect(),
        }
    }

    pub fn is_current(&self) -> bool {
        self.outputs.iter().all(|p| p.exists())
            && fs::read_to_string(&self.path).is_ok_and(|s| s == self.digest)
    }

    pub fn write(&self) -> Result<()> {
        if let Some(dir) = self.path.parent() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        fs::write(&self.path, &self.digest).with_context(|| format!("writing {}", self.path.display()))
    }
}

/// Stamp file kept beside a single-file output.
pub fn beside(file: &Path) -> PathBuf {
    let mut name = file.file_name().unwrap_or_default().to_os_string();
    name.push(".stamp");
    file.with_file_name(name)
}
