use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use drivesql::jsonio;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Audit record written next to the outputs of every command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_digest: String,
    pub input_digests: BTreeMap<String, String>,
    pub output_paths: Vec<String>,
    pub tool_version: String,
    pub wall_time_secs: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes through a temporary file in the target directory and renames it
/// into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

/// Tracks inputs and outputs of one command run.
pub struct Run {
    command: String,
    started: Instant,
    config_digest: String,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

impl Run {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            started: Instant::now(),
            config_digest: sha256_hex(b"{}"),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    /// Digest of the effective settings, as sorted-key JSON.
    pub fn set_config<T: Serialize>(&mut self, config: &T) {
        self.config_digest = sha256_hex(jsonio::to_sorted_string(config).as_bytes());
    }

    pub fn read(&mut self, path: &Path) -> CliResult<String> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        self.inputs
            .insert(path.display().to_string(), sha256_hex(&bytes));
        String::from_utf8(bytes)
            .map_err(|e| CliError::in_file(path, format_args!("not UTF-8: {e}")))
    }

    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> CliResult<()> {
        write_atomic(path, bytes)?;
        self.outputs.push(path.display().to_string());
        Ok(())
    }

    pub fn finish(self, manifest_path: &Path) -> CliResult<RunManifest> {
        let manifest = RunManifest {
            command: self.command,
            config_digest: self.config_digest,
            input_digests: self.inputs,
            output_paths: self.outputs,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            wall_time_secs: self.started.elapsed().as_secs_f64(),
        };
        write_atomic(
            manifest_path,
            jsonio::to_sorted_string_pretty(&manifest).as_bytes(),
        )?;
        Ok(manifest)
    }
}

/// `<output>.manifest.json`
pub fn manifest_path_for(output: &Path) -> PathBuf {
    let mut name = output
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".manifest.json");
    output.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.txt");
        std::fs::write(&input, "abc").unwrap();
        let out = dir.path().join("sub/out.txt");
        let mut run = Run::new("test");
        assert_eq!(run.read(&input).unwrap(), "abc");
        run.write(&out, b"xyz").unwrap();
        let m = run.finish(&manifest_path_for(&out)).unwrap();
        assert_eq!(std::fs::read_to_string(&out).unwrap(), "xyz");
        assert_eq!(
            m.input_digests[&input.display().to_string()],
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert!(dir.path().join("sub/out.txt.manifest.json").exists());
    }
}
