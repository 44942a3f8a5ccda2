//! `manifest.json`: the commit point of a dataset directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::record::{read_record, ActivationRecord};
use crate::activation_gen::HookSpec;
use crate::error::{Result, TideError};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleInfo {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub model: String,
    pub layer_taps: Vec<HookSpec>,
    pub schedule: Option<ScheduleInfo>,
    /// Free-form model configuration (toy DiT config or exporter job).
    #[serde(default)]
    pub model_config: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShardEntry {
    /// Path relative to the manifest's directory.
    pub file: String,
    pub records: u64,
    /// Lower-case hex SHA-256 of the shard bytes.
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub provenance: Provenance,
    pub token_count: u32,
    pub dim: u32,
    pub labels: bool,
    pub split: String,
    pub total_records: u64,
    /// False when generation aborted; shards listed are the ones completed.
    pub complete: bool,
    pub shards: Vec<ShardEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| TideError::io_at(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        // write-then-rename so a manifest is never observed half written
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, text).map_err(|e| TideError::io_at(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| TideError::io_at(path, e))?;
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Resolve a manifest argument that may be a directory or the file itself.
pub fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(MANIFEST_FILE)
    } else {
        p.to_path_buf()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShardStatus {
    pub file: String,
    pub ok: bool,
    pub records_found: u64,
    pub issues: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub manifest: PathBuf,
    pub shards: Vec<ShardStatus>,
    pub declared_total: u64,
    pub found_total: u64,
    /// Manifest-level problems (count mismatch, incomplete marker, ...).
    pub issues: Vec<String>,
}

impl ValidationReport {
    pub fn all_pass(&self) -> bool {
        self.issues.is_empty() && self.shards.iter().all(|s| s.ok)
    }

    /// Every issue, shard-level ones prefixed with their file.
    pub fn problems(&self) -> Vec<String> {
        let mut out = self.issues.clone();
        for s in &self.shards {
            out.extend(s.issues.iter().map(|i| format!("{}: {i}", s.file)));
        }
        out
    }
}

/// Check digests, record counts, and header consistency. Never fails on
/// bad data; every problem becomes a report entry.
pub fn validate_dataset(manifest: &Path) -> ValidationReport {
    let path = manifest_path(manifest);
    let mut report = ValidationReport {
        manifest: path.clone(),
        shards: Vec::new(),
        declared_total: 0,
        found_total: 0,
        issues: Vec::new(),
    };
    let m = match Manifest::load(&path) {
        Ok(m) => m,
        Err(e) => {
            report.issues.push(format!("manifest unreadable: {e}"));
            return report;
        }
    };
    report.declared_total = m.total_records;
    if m.format_version != MANIFEST_FORMAT_VERSION {
        report.issues.push(format!(
            "unsupported manifest format_version {}",
            m.format_version
        ));
    }
    if !m.complete {
        report
            .issues
            .push("dataset marked incomplete (partial output)".into());
    }
    let listed: u64 = m.shards.iter().map(|s| s.records).sum();
    if listed != m.total_records {
        report.issues.push(format!(
            "count mismatch: shards list {listed} records, manifest declares {}",
            m.total_records
        ));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let taps: Vec<u16> = m
        .provenance
        .layer_taps
        .iter()
        .map(|h| h.layer_index as u16)
        .collect();
    for s in &m.shards {
        let mut st = ShardStatus {
            file: s.file.clone(),
            ok: true,
            records_found: 0,
            issues: Vec::new(),
        };
        match fs::read(base.join(&s.file)) {
            Err(e) => st.issues.push(format!("unreadable: {e}")),
            Ok(bytes) => {
                if sha256_hex(&bytes) != s.digest {
                    st.issues.push("digest mismatch".into());
                }
                let mut cur = bytes.as_slice();
                loop {
                    match read_record(&mut cur) {
                        Ok(Some(rec)) => {
                            st.records_found += 1;
                            check_header(&m, &taps, &rec, st.records_found, &mut st.issues);
                        }
                        Ok(None) => break,
                        Err(e) => {
                            st.issues
                                .push(format!("record {}: {e}", st.records_found + 1));
                            break;
                        }
                    }
                }
                if st.records_found != s.records {
                    st.issues.push(format!(
                        "count mismatch: {} records on disk, {} listed",
                        st.records_found, s.records
                    ));
                }
            }
        }
        st.ok = st.issues.is_empty();
        report.found_total += st.records_found;
        report.shards.push(st);
    }
    if report.found_total != m.total_records {
        report.issues.push(format!(
            "count mismatch: {} records on disk, manifest declares {}",
            report.found_total, m.total_records
        ));
    }
    report
}

fn check_header(
    m: &Manifest,
    taps: &[u16],
    rec: &ActivationRecord,
    idx: u64,
    issues: &mut Vec<String>,
) {
    let h = &rec.header;
    if h.token_count != m.token_count || h.dim != m.dim {
        issues.push(format!(
            "record {idx}: shape {}x{} differs from manifest {}x{}",
            h.token_count, h.dim, m.token_count, m.dim
        ));
    }
    if h.has_labels() != m.labels {
        issues.push(format!("record {idx}: label flag differs from manifest"));
    }
    if !taps.is_empty() && !taps.contains(&h.layer_index) {
        issues.push(format!(
            "record {idx}: layer {} not among manifest taps",
            h.layer_index
        ));
    }
    if let Some(s) = &m.provenance.schedule {
        if h.timestep as usize >= s.steps {
            issues.push(format!(
                "record {idx}: timestep {} >= T {}",
                h.timestep, s.steps
            ));
        }
    }
}

/// Load every record of a dataset in manifest order.
pub fn load_records(manifest: &Path) -> Result<(Manifest, Vec<ActivationRecord>)> {
    let path = manifest_path(manifest);
    let m = Manifest::load(&path)?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut out = Vec::with_capacity(m.total_records as usize);
    for s in &m.shards {
        let file = base.join(&s.file);
        let bytes = fs::read(&file).map_err(|e| TideError::io_at(&file, e))?;
        let mut cur = bytes.as_slice();
        while let Some(rec) = read_record(&mut cur)? {
            out.push(rec);
        }
    }
    Ok((m, out))
}
