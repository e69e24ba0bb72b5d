use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::CliError;

/// Writes `bytes` to a temporary file beside `path` and renames it into
/// place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let fail = |e: std::io::Error| CliError::Runtime(format!("cannot write {}: {e}", path.display()));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(fail)?;
    tmp.write_all(bytes).map_err(fail)?;
    tmp.as_file().sync_all().map_err(fail)?;
    tmp.persist(path).map_err(|e| fail(e.error))?;
    Ok(())
}

#[derive(Serialize)]
pub struct Envelope<'a, C: Serialize, P: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: &'a str,
    pub config: &'a C,
    /// Absent with `--omit-timing`.
    pub duration_seconds: Option<f64>,
    pub payload: P,
}

pub fn write_report<C: Serialize, P: Serialize>(path: &Path, envelope: &Envelope<'_, C, P>) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(envelope)
        .map_err(|e| CliError::Runtime(format!("cannot serialize report: {e}")))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::{json, Value};

    #[test]
    fn report_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        let config = json!({"seed": 42, "pairs": 10});
        let payload = json!({"s": 2.8284, "n": [1, 2, 3]});
        let env = Envelope {
            tool: "t",
            version: "0",
            subcommand: "chsh",
            config: &config,
            duration_seconds: None,
            payload: &payload,
        };
        write_report(&path, &env).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.ends_with('\n'));
        let back: Value = serde_json::from_str(&text).unwrap();
        assert_eq!(back["payload"], payload);
        assert_eq!(back["config"]["seed"], 42);
        assert!(back["duration_seconds"].is_null());
    }

    #[test]
    fn failed_write_leaves_target_untouched() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.json");
        std::fs::write(&path, b"old").unwrap();
        write_atomic(&path, b"new").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"new");
        // The target is a directory, so the rename fails after the data was written.
        let blocked = dir.path().join("blocked");
        std::fs::create_dir(&blocked).unwrap();
        std::fs::write(blocked.join("keep"), b"x").unwrap();
        assert!(write_atomic(&blocked, b"partial").is_err());
        assert!(blocked.is_dir());
        let names: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(names.len(), 2, "{names:?}");
    }
}
