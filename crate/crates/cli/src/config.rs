//! Flat `key = value` config files.
//!
//! Keys are the long flag names of the subcommand (underscores are accepted
//! for hyphens). `include = other.conf` splices another file in place,
//! resolved relative to the including file. Later assignments win, and
//! command-line flags win over everything in the file.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use persona_core::Error;

const MAX_DEPTH: usize = 16;

pub fn load(path: &Path) -> Result<Vec<(String, String)>, Error> {
    let mut out = Vec::new();
    load_into(path, &mut out, &mut Vec::new())?;
    // Keep only the last assignment of each key, in first-seen order.
    let mut merged: Vec<(String, String)> = Vec::new();
    for (k, v) in out {
        match merged.iter_mut().find(|(mk, _)| *mk == k) {
            Some(slot) => slot.1 = v,
            None => merged.push((k, v)),
        }
    }
    Ok(merged)
}

fn load_into(path: &Path, out: &mut Vec<(String, String)>, stack: &mut Vec<PathBuf>) -> Result<(), Error> {
    let canonical = path
        .canonicalize()
        .map_err(|e| Error::Usage(format!("cannot read config {}: {e}", path.display())))?;
    if stack.contains(&canonical) {
        return Err(Error::Usage(format!("config include cycle through {}", path.display())));
    }
    if stack.len() >= MAX_DEPTH {
        return Err(Error::Usage("config includes nested too deeply".into()));
    }
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Usage(format!("cannot read config {}: {e}", path.display())))?;
    stack.push(canonical);
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Usage(format!(
                "{}:{}: expected key = value, got {line:?}",
                path.display(),
                n + 1
            )));
        };
        let key = k.trim().replace('_', "-");
        let value = v.trim().to_string();
        if key.is_empty() {
            return Err(Error::Usage(format!("{}:{}: empty key", path.display(), n + 1)));
        }
        if key == "include" {
            let dir = path.parent().unwrap_or(Path::new("."));
            load_into(&dir.join(&value), out, stack)?;
        } else {
            out.push((key, value));
        }
    }
    stack.pop();
    Ok(())
}

/// Removes `--config FILE` (or `--config=FILE`) from `args`.
pub fn take_config_flag(args: &mut Vec<OsString>) -> Result<Option<PathBuf>, Error> {
    let mut found = None;
    let mut i = 0;
    while i < args.len() {
        let s = args[i].to_string_lossy().into_owned();
        if s == "--config" {
            let value = args
                .get(i + 1)
                .ok_or_else(|| Error::Usage("--config needs a file".into()))?
                .clone();
            found = Some(PathBuf::from(value));
            args.drain(i..i + 2);
        } else if let Some(v) = s.strip_prefix("--config=") {
            found = Some(PathBuf::from(v));
            args.remove(i);
        } else {
            i += 1;
        }
    }
    Ok(found)
}

/// Splices config entries into `args` right after the subcommand so that
/// flags given later on the command line override them. `known` lists a
/// subcommand's long flags, and `None` lists those of every subcommand: one
/// file can configure a whole pipeline, so keys another subcommand takes are
/// skipped and only keys nobody takes are rejected.
pub fn splice(
    args: &mut Vec<OsString>,
    entries: &[(String, String)],
    known: impl Fn(Option<&str>) -> Option<Vec<String>>,
) -> Result<(), Error> {
    let Some(pos) = args.iter().skip(1).position(|a| !a.to_string_lossy().starts_with('-')) else {
        return Err(Error::Usage("--config given without a subcommand".into()));
    };
    let pos = pos + 1;
    let sub = args[pos].to_string_lossy().into_owned();
    let flags = known(Some(&sub)).ok_or_else(|| Error::Usage(format!("unknown subcommand {sub:?}")))?;
    let everywhere = known(None).unwrap_or_default();
    let mut injected = Vec::with_capacity(entries.len());
    for (k, v) in entries {
        if flags.iter().any(|f| f == k) {
            injected.push(OsString::from(format!("--{k}={v}")));
        } else if !everywhere.iter().any(|f| f == k) {
            return Err(Error::Usage(format!("unknown config key {k:?}")));
        }
    }
    args.splice(pos + 1..pos + 1, injected);
    Ok(())
}
