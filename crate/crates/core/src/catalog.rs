//! The target weakness taxonomy: CWE identifiers and the Top 25 catalog.
//!
//! The embedded default is the 2023 MITRE Top 25 list. A catalog file with
//! the same JSONL record shape (`id`, `rank`, `name`, `summary`) overrides it.

use std::collections::HashSet;
use std::fmt;
use std::num::NonZeroU32;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

const DEFAULT_CATALOG: &str = include_str!("../data/top25_2023.jsonl");

/// Number of entries every catalog must hold.
pub const CATALOG_SIZE: usize = 25;

/// A CWE identifier, rendered canonically as `CWE-<n>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CweId(NonZeroU32);

impl CweId {
    pub fn new(number: u32) -> Option<Self> {
        NonZeroU32::new(number).map(Self)
    }

    pub fn number(self) -> u32 {
        self.0.get()
    }
}

impl fmt::Display for CweId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CWE-{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CweIdError {
    #[error("missing \"CWE-\" prefix in {0:?}")]
    MissingPrefix(String),
    #[error("non-numeric CWE number in {0:?}")]
    NotNumeric(String),
    #[error("CWE number must be at least 1 in {0:?}")]
    Zero(String),
}

/// Parses `CWE-<digits>`, ignoring case and surrounding whitespace.
pub fn parse_cwe_id(text: &str) -> Result<CweId, CweIdError> {
    let trimmed = text.trim();
    let digits = trimmed
        .get(..4)
        .filter(|prefix| prefix.eq_ignore_ascii_case("cwe-"))
        .map(|_| &trimmed[4..])
        .ok_or_else(|| CweIdError::MissingPrefix(text.to_owned()))?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return Err(CweIdError::NotNumeric(text.to_owned()));
    }
    // all-digit strings only fail to parse on overflow
    let number: u32 = digits
        .parse()
        .map_err(|_| CweIdError::NotNumeric(text.to_owned()))?;
    CweId::new(number).ok_or_else(|| CweIdError::Zero(text.to_owned()))
}

impl FromStr for CweId {
    type Err = CweIdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_cwe_id(s)
    }
}

impl Serialize for CweId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CweId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        parse_cwe_id(&text).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CweEntry {
    pub id: CweId,
    pub rank: u32,
    pub name: String,
    pub summary: String,
}

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("reading catalog {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("catalog line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("expected {CATALOG_SIZE} entries, found {0}")]
    WrongCount(usize),
    #[error("duplicate rank {rank} (line {line})")]
    DuplicateRank { rank: u32, line: usize },
    #[error("duplicate id {id} (line {line})")]
    DuplicateId { id: CweId, line: usize },
    #[error("rank {rank} of {id} (line {line}) is outside 1..={CATALOG_SIZE}")]
    RankOutOfRange { id: CweId, rank: u32, line: usize },
}

/// A validated Top 25 catalog, ordered by rank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Catalog {
    entries: Vec<CweEntry>,
}

impl Catalog {
    pub fn embedded() -> Self {
        Self::from_jsonl(DEFAULT_CATALOG).expect("embedded catalog is valid")
    }

    pub fn from_jsonl(text: &str) -> Result<Self, CatalogError> {
        let mut entries = Vec::with_capacity(CATALOG_SIZE);
        let mut ranks = HashSet::new();
        let mut ids = HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let entry: CweEntry = serde_json::from_str(raw).map_err(|e| CatalogError::Malformed {
                line,
                message: e.to_string(),
            })?;
            if !(1..=CATALOG_SIZE as u32).contains(&entry.rank) {
                return Err(CatalogError::RankOutOfRange {
                    id: entry.id,
                    rank: entry.rank,
                    line,
                });
            }
            if !ranks.insert(entry.rank) {
                return Err(CatalogError::DuplicateRank {
                    rank: entry.rank,
                    line,
                });
            }
            if !ids.insert(entry.id) {
                return Err(CatalogError::DuplicateId { id: entry.id, line });
            }
            entries.push(entry);
        }
        if entries.len() != CATALOG_SIZE {
            return Err(CatalogError::WrongCount(entries.len()));
        }
        entries.sort_by_key(|e| e.rank);
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[CweEntry] {
        &self.entries
    }

    pub fn get(&self, id: CweId) -> Option<&CweEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn rank_of(&self, id: CweId) -> Option<u32> {
        self.get(id).map(|e| e.rank)
    }

    pub fn ids(&self) -> impl Iterator<Item = CweId> + '_ {
        self.entries.iter().map(|e| e.id)
    }
}

/// Loads the catalog from `source`, or the embedded 2023 list when `None`.
pub fn load_catalog(source: Option<&Path>) -> Result<Catalog, CatalogError> {
    match source {
        None => Ok(Catalog::embedded()),
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|source| CatalogError::Io {
                path: path.display().to_string(),
                source,
            })?;
            Catalog::from_jsonl(&text)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn embedded_lines() -> Vec<&'static str> {
        DEFAULT_CATALOG.lines().collect()
    }

    #[test]
    fn embedded_catalog_has_ranks_one_to_25() {
        let catalog = load_catalog(None).unwrap();
        let ranks: Vec<u32> = catalog.entries().iter().map(|e| e.rank).collect();
        assert_eq!(ranks, (1..=25).collect::<Vec<_>>());
        assert_eq!(catalog.get(CweId::new(79).unwrap()).unwrap().rank, 2);
        assert_eq!(catalog, load_catalog(None).unwrap());
    }

    #[test]
    fn parse_accepts_canonical_and_sloppy_forms() {
        assert_eq!(parse_cwe_id("CWE-79").unwrap(), CweId::new(79).unwrap());
        assert_eq!(parse_cwe_id("  cwe-89 ").unwrap(), CweId::new(89).unwrap());
        assert_eq!(parse_cwe_id("Cwe-007").unwrap().to_string(), "CWE-7");
    }

    #[test]
    fn parse_rejects_bad_ids() {
        assert!(matches!(parse_cwe_id("CWE-XXX"), Err(CweIdError::NotNumeric(_))));
        assert!(matches!(parse_cwe_id("CWE-"), Err(CweIdError::NotNumeric(_))));
        assert!(matches!(parse_cwe_id("79"), Err(CweIdError::MissingPrefix(_))));
        assert!(matches!(parse_cwe_id("CWE-0"), Err(CweIdError::Zero(_))));
        assert!(matches!(parse_cwe_id("CWE--5"), Err(CweIdError::NotNumeric(_))));
        assert!(parse_cwe_id("CWE-99999999999").is_err());
    }

    #[test]
    fn short_catalog_is_rejected() {
        let text = embedded_lines()[..24].join("\n");
        let err = Catalog::from_jsonl(&text).unwrap_err();
        assert!(err.to_string().contains("expected 25 entries"), "{err}");
    }

    #[test]
    fn duplicate_rank_names_the_rank() {
        let mut lines = embedded_lines();
        let dup = lines[2].replace("\"CWE-89\"", "\"CWE-1000\"");
        lines[24] = &dup;
        let err = Catalog::from_jsonl(&lines.join("\n")).unwrap_err();
        assert!(matches!(err, CatalogError::DuplicateRank { rank: 3, .. }), "{err}");
        assert!(err.to_string().contains("rank 3"));
    }

    #[test]
    fn duplicate_id_and_bad_syntax_are_rejected() {
        let mut lines = embedded_lines();
        let dup = lines[0].replace("\"rank\":1", "\"rank\":26");
        lines.push(&dup);
        assert!(matches!(
            Catalog::from_jsonl(&lines.join("\n")),
            Err(CatalogError::RankOutOfRange { rank: 26, line: 26, .. })
        ));

        let mut lines = embedded_lines();
        let dup = lines[0].replace("\"rank\":1", "\"rank\":25");
        lines[24] = &dup;
        assert!(matches!(
            Catalog::from_jsonl(&lines.join("\n")),
            Err(CatalogError::DuplicateId { line: 25, .. })
        ));

        let mut lines = embedded_lines();
        let bad = lines[4].replace("CWE-78", "CWE-7B");
        lines[4] = &bad;
        let err = Catalog::from_jsonl(&lines.join("\n")).unwrap_err();
        assert!(matches!(err, CatalogError::Malformed { line: 5, .. }), "{err}");
    }

    #[test]
    fn override_file_is_loaded() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("catalog.jsonl");
        let text = DEFAULT_CATALOG.replace("Out-of-bounds Write", "OOB Write");
        std::fs::write(&path, text).unwrap();
        let catalog = load_catalog(Some(&path)).unwrap();
        assert_eq!(catalog.entries()[0].name, "OOB Write");
        assert!(matches!(
            load_catalog(Some(&dir.path().join("missing.jsonl"))),
            Err(CatalogError::Io { .. })
        ));
    }

    proptest::proptest! {
        #[test]
        fn render_parse_round_trip(n in 1u32..) {
            let id = CweId::new(n).unwrap();
            proptest::prop_assert_eq!(parse_cwe_id(&id.to_string()).unwrap(), id);
        }
    }
}
