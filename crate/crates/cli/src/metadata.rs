//! Run metadata: enough to reproduce an output bit-exactly.

use std::io::Read;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use ovdet3d::scene_io::{to_canonical_json, SamplingInfo};

use crate::args::RunConfig;
use crate::CliError;

#[derive(Debug, Serialize)]
struct InputDigest {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Metadata<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    scene_id: &'a str,
    config: &'a RunConfig,
    sampling: SamplingInfo,
    frames_used: usize,
    inputs: Vec<InputDigest>,
}

/// `<out>.meta.json` next to `out`.
pub fn metadata_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".meta.json");
    out.with_file_name(name)
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let mut file = std::fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

pub struct RunRecord<'a> {
    pub command: &'a str,
    pub scene_id: &'a str,
    pub config: &'a RunConfig,
    pub sampling: SamplingInfo,
    pub frames_used: usize,
    pub inputs: &'a [PathBuf],
}

/// Writes the metadata record for `out`. Inputs are listed as given, each
/// with its SHA-256.
pub fn write_metadata(out: &Path, record: &RunRecord<'_>) -> Result<(), CliError> {
    let inputs = record
        .inputs
        .iter()
        .map(|p| {
            Ok(InputDigest {
                path: p.display().to_string(),
                sha256: sha256_file(p).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let meta = Metadata {
        tool: "ovdet3d",
        version: env!("CARGO_PKG_VERSION"),
        command: record.command,
        scene_id: record.scene_id,
        config: record.config,
        sampling: record.sampling,
        frames_used: record.frames_used,
        inputs,
    };
    let value = serde_json::to_value(&meta).expect("metadata serializes");
    let path = metadata_path(out);
    std::fs::write(&path, to_canonical_json(&value)).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sidecar_name() {
        assert_eq!(metadata_path(Path::new("out/boxes.json")), PathBuf::from("out/boxes.json.meta.json"));
    }

    #[test]
    fn digest_of_known_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("abc");
        std::fs::write(&p, b"abc").unwrap();
        assert_eq!(
            sha256_file(&p).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
