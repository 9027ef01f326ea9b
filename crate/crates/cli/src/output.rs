//! Output directory layout: one CSV per table plus `summary.json`.

use std::fs;
use std::path::Path;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::run::Artifacts;

pub const SCHEMA_ID: &str = "bsde-lab/summary/v1";
pub const SUMMARY_SCHEMA: &str = include_str!("../schema/summary.schema.json");

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// The config hash is taken over the canonical (key-sorted, comment-free) JSON.
pub fn summary(experiment: &str, config: &Value, art: &Artifacts) -> Value {
    let canonical = serde_json::to_string(config).expect("serializable");
    let artifacts: Vec<Value> = art
        .files
        .iter()
        .map(|(name, body)| json!({"file": name, "sha256": sha256_hex(body.as_bytes())}))
        .collect();
    json!({
        "schema": SCHEMA_ID,
        "experiment": experiment,
        "provenance": {
            "config_sha256": sha256_hex(canonical.as_bytes()),
            "versions": {
                "bsde-lab": env!("CARGO_PKG_VERSION"),
                "bsde-lab-core": bsde_lab::VERSION,
            },
        },
        "config": config,
        "results": art.results,
        "passed": art.passed,
        "artifacts": artifacts,
        "warnings": art.warnings,
    })
}

pub fn write_all(dir: &Path, summary: &Value, art: &Artifacts) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    for (name, body) in &art.files {
        fs::write(dir.join(name), body)?;
    }
    let mut text = serde_json::to_string_pretty(summary).expect("serializable");
    text.push('\n');
    fs::write(dir.join("summary.json"), text)
}
