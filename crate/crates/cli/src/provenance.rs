use std::fs::File;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use gramlm::Error;

/// What produced an output file: command, seed, a hash of the effective
/// settings and a hash of every input.
pub struct Provenance {
    pub command: &'static str,
    pub seed: u64,
    pub config_hash: String,
    pub inputs: Vec<(PathBuf, String)>,
}

pub fn sha256_file(path: &Path) -> Result<String, Error> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    std::io::copy(&mut f, &mut h).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(h.finalize()))
}

impl Provenance {
    pub fn new<C: Serialize>(command: &'static str, seed: u64, config: &C, inputs: &[&Path]) -> Result<Self, Error> {
        let json = serde_json::to_string(config).expect("serializable settings");
        let config_hash = hex::encode(Sha256::digest(json.as_bytes()));
        let inputs = inputs
            .iter()
            .map(|p| Ok((p.to_path_buf(), sha256_file(p)?)))
            .collect::<Result<_, Error>>()?;
        Ok(Provenance {
            command,
            seed,
            config_hash,
            inputs,
        })
    }

    /// Single-line form used in text headers.
    pub fn line(&self) -> String {
        let inputs: Vec<String> = self
            .inputs
            .iter()
            .map(|(p, h)| format!("{}=sha256:{h}", p.display()))
            .collect();
        format!(
            "gramlm {} {} seed={} config=sha256:{} inputs=[{}]",
            env!("CARGO_PKG_VERSION"),
            self.command,
            self.seed,
            self.config_hash,
            inputs.join(",")
        )
    }

    pub fn json(&self) -> serde_json::Value {
        serde_json::json!({
            "tool": format!("gramlm {}", env!("CARGO_PKG_VERSION")),
            "command": self.command,
            "seed": self.seed,
            "config_sha256": self.config_hash,
            "inputs": self.inputs.iter().map(|(p, h)| serde_json::json!({
                "path": p.display().to_string(),
                "sha256": h,
            })).collect::<Vec<_>>(),
        })
    }
}
