//! Core library for building and evaluating small-model CWE detectors.
//!
//! The pipeline runs from synthetic pair generation ([`synth`]) through
//! human review ([`review`]) and dataset assembly ([`dataset`]) to
//! evaluation ([`eval`]), timing ([`bench`]) and scanning ([`scan`]) against
//! any locally served completion backend ([`backend`]).

pub mod backend;
pub mod bench;
pub mod catalog;
pub mod dataset;
pub mod eval;
pub mod review;
pub mod scan;
pub mod synth;
pub mod syntax;

pub use catalog::{load_catalog, parse_cwe_id, Catalog, CweEntry, CweId};
pub use dataset::{LabeledInstance, PairedExample, ReviewState, Snippet, Verdict};

/// Version tag written into every JSON artifact.
pub const SCHEMA_VERSION: u32 = 1;

/// Hex-encoded SHA-256 of `bytes`.
pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes.as_ref()))
}
