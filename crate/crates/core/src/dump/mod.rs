//! Binary interchange format for activation records plus the dataset
//! manifest, validation, and token batching.

mod batches;
mod manifest;
mod record;

pub use batches::{iterate_batches, BatchIter, TokenBatch, TokenTable};
pub use manifest::{
    load_records, manifest_path, sha256_hex, validate_dataset, Manifest, Provenance, ScheduleInfo,
    ShardEntry, ShardStatus, ValidationReport, MANIFEST_FILE, MANIFEST_FORMAT_VERSION,
};
pub use record::{
    read_all, read_record, write_record, ActivationRecord, DumpHeader, FLAG_LABELS, HEADER_LEN,
    MAGIC, VERSION,
};
