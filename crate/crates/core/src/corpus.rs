//! Labeled sample manifests: build, deduplicate by code hash, split, summarize.
//!
//! Manifests are JSON Lines. The first line is a header
//! `{"format":"bineye-manifest","version":1,"provenance":{..}}`; every following line is one
//! [`SampleRecord`].

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::elf::{load_code_image, ElfError};

pub const MANIFEST_FORMAT: &str = "bineye-manifest";
pub const MANIFEST_VERSION: u32 = 1;
pub const DEFAULT_TEST_FRACTION: f64 = 0.2;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("unknown optimization flag {0:?}")]
    UnknownFlag(String),
    #[error("{path}: {source}")]
    Extract {
        path: String,
        #[source]
        source: ElfError,
    },
    #[error("path already in manifest: {0}")]
    DuplicatePath(String),
    #[error("no records labeled {0}")]
    EmptyClass(OptLevel),
    #[error("test fraction {0} not in (0, 1)")]
    BadFraction(f64),
    #[error("manifest line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("manifest version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Four-way optimization label; `-O2` and `-O3` share a class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OptLevel {
    O0,
    O1,
    O2O3,
    Os,
}

impl OptLevel {
    pub const ALL: [OptLevel; 4] = [OptLevel::O0, OptLevel::O1, OptLevel::O2O3, OptLevel::Os];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<OptLevel> {
        Self::ALL.get(i).copied()
    }

    /// Maps a compiler flag (`-O0`, `-O1`, `-O2`, `-O3`, `-Os`; leading dash optional).
    pub fn from_flag(flag: &str) -> Result<OptLevel, CorpusError> {
        match flag.trim().trim_start_matches('-') {
            "O0" => Ok(OptLevel::O0),
            "O1" => Ok(OptLevel::O1),
            "O2" | "O3" => Ok(OptLevel::O2O3),
            "Os" => Ok(OptLevel::Os),
            _ => Err(CorpusError::UnknownFlag(flag.to_string())),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OptLevel::O0 => "O0",
            OptLevel::O1 => "O1",
            OptLevel::O2O3 => "O2O3",
            OptLevel::Os => "Os",
        }
    }
}

impl fmt::Display for OptLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OptLevel {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "O2O3" | "O2/O3" | "-O2/-O3" => Ok(OptLevel::O2O3),
            other => OptLevel::from_flag(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    #[default]
    Unassigned,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub path: String,
    pub label: OptLevel,
    /// SHA-256 of the extracted code bytes, lowercase hex.
    pub code_hash: String,
    pub code_len: u64,
    #[serde(default)]
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub test_fraction: f64,
    pub seed: u64,
    pub stratified: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compiler: Option<String>,
    /// Raw optimization flags seen while adding samples.
    #[serde(default)]
    pub flags: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitInfo>,
    #[serde(default)]
    pub notes: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    #[serde(default)]
    provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorpusManifest {
    pub version: u32,
    pub provenance: Provenance,
    pub records: Vec<SampleRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DedupReport {
    /// Records dropped because their code hash appears under more than one label.
    pub conflicting_removed: usize,
    /// Hashes that carried conflicting labels.
    pub conflicting_hashes: usize,
    /// Same-label copies collapsed into one record.
    pub duplicates_collapsed: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LabelStats {
    pub files: u64,
    pub code_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CorpusStats {
    pub per_label: BTreeMap<OptLevel, LabelStats>,
    pub total_files: u64,
    pub total_code_bytes: u64,
    pub train: u64,
    pub test: u64,
    pub unassigned: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AddReport {
    pub added: usize,
    pub failed: Vec<(String, String)>,
}

pub fn hash_code(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Extracts and hashes one file's code. Pure with respect to the manifest.
pub fn make_record(path: &Path, raw_flag: &str, all_exec: bool) -> Result<SampleRecord, CorpusError> {
    let label = OptLevel::from_flag(raw_flag)?;
    let (_, image) = load_code_image(path, all_exec).map_err(|source| CorpusError::Extract {
        path: path.display().to_string(),
        source,
    })?;
    Ok(SampleRecord {
        path: path.display().to_string(),
        label,
        code_hash: hash_code(&image.bytes),
        code_len: image.len() as u64,
        split: Split::Unassigned,
    })
}

impl CorpusManifest {
    pub fn new() -> Self {
        CorpusManifest {
            version: MANIFEST_VERSION,
            ..Default::default()
        }
    }

    fn push(&mut self, record: SampleRecord, raw_flag: &str) -> Result<(), CorpusError> {
        if self.records.iter().any(|r| r.path == record.path) {
            return Err(CorpusError::DuplicatePath(record.path));
        }
        self.provenance.flags.insert(raw_flag.trim().to_string());
        self.records.push(record);
        Ok(())
    }

    /// Extracts the file's code, hashes it and appends a labeled record.
    pub fn add_sample(&mut self, path: &Path, raw_flag: &str, all_exec: bool) -> Result<(), CorpusError> {
        let rec = make_record(path, raw_flag, all_exec)?;
        self.push(rec, raw_flag)
    }

    /// Adds many files, extracting in parallel. Records are appended sorted by path so the
    /// result does not depend on scheduling; failures are collected, not fatal.
    pub fn add_samples(&mut self, items: &[(PathBuf, String)], all_exec: bool) -> AddReport {
        let mut results: Vec<(String, &str, Result<SampleRecord, CorpusError>)> = items
            .par_iter()
            .map(|(p, flag)| (p.display().to_string(), flag.as_str(), make_record(p, flag, all_exec)))
            .collect();
        results.sort_by(|a, b| a.0.cmp(&b.0));
        let mut report = AddReport::default();
        for (path, flag, res) in results {
            match res.and_then(|rec| self.push(rec, flag)) {
                Ok(()) => report.added += 1,
                Err(e) => report.failed.push((path, e.to_string())),
            }
        }
        report
    }

    /// Removes every record whose code hash occurs under two or more labels, then collapses
    /// same-label duplicates to the record with the smallest path.
    pub fn dedup(&self) -> (CorpusManifest, DedupReport) {
        let mut labels: HashMap<&str, BTreeSet<OptLevel>> = HashMap::new();
        for r in &self.records {
            labels.entry(&r.code_hash).or_default().insert(r.label);
        }
        let mut report = DedupReport {
            conflicting_hashes: labels.values().filter(|l| l.len() > 1).count(),
            ..Default::default()
        };
        let mut keeper: HashMap<&str, &str> = HashMap::new();
        for r in &self.records {
            if labels[r.code_hash.as_str()].len() > 1 {
                continue;
            }
            let k = keeper.entry(&r.code_hash).or_insert(&r.path);
            if r.path.as_str() < *k {
                *k = &r.path;
            }
        }
        let mut kept = Vec::new();
        let mut emitted: BTreeSet<&str> = BTreeSet::new();
        for r in &self.records {
            if labels[r.code_hash.as_str()].len() > 1 {
                report.conflicting_removed += 1;
            } else if keeper[r.code_hash.as_str()] == r.path && emitted.insert(&r.code_hash) {
                kept.push(r.clone());
            } else {
                report.duplicates_collapsed += 1;
            }
        }
        let out = CorpusManifest {
            version: self.version,
            provenance: self.provenance.clone(),
            records: kept,
        };
        (out, report)
    }

    /// Stratified random train/test assignment, deterministic in `seed`.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<CorpusManifest, CorpusError> {
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            return Err(CorpusError::BadFraction(test_fraction));
        }
        let mut out = self.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for level in OptLevel::ALL {
            let mut idx: Vec<usize> = (0..out.records.len())
                .filter(|&i| out.records[i].label == level)
                .collect();
            if idx.is_empty() {
                return Err(CorpusError::EmptyClass(level));
            }
            idx.sort_by(|&a, &b| out.records[a].path.cmp(&out.records[b].path));
            idx.shuffle(&mut rng);
            let n_test = (idx.len() as f64 * test_fraction).round() as usize;
            for (rank, &i) in idx.iter().enumerate() {
                out.records[i].split = if rank < n_test { Split::Test } else { Split::Train };
            }
        }
        out.provenance.split = Some(SplitInfo {
            test_fraction,
            seed,
            stratified: true,
        });
        Ok(out)
    }

    pub fn stats(&self) -> CorpusStats {
        let mut s = CorpusStats::default();
        for level in OptLevel::ALL {
            s.per_label.insert(level, LabelStats::default());
        }
        for r in &self.records {
            let e = s.per_label.get_mut(&r.label).expect("all labels present");
            e.files += 1;
            e.code_bytes += r.code_len;
            s.total_files += 1;
            s.total_code_bytes += r.code_len;
            match r.split {
                Split::Train => s.train += 1,
                Split::Test => s.test += 1,
                Split::Unassigned => s.unassigned += 1,
            }
        }
        s
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn to_jsonl(&self) -> String {
        let header = Header {
            format: MANIFEST_FORMAT.to_string(),
            version: self.version,
            provenance: self.provenance.clone(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<CorpusManifest, CorpusError> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or(CorpusError::Parse {
            line: 1,
            msg: "empty manifest".into(),
        })?;
        let header: Header = serde_json::from_str(first).map_err(|e| CorpusError::Parse {
            line: 1,
            msg: e.to_string(),
        })?;
        if header.format != MANIFEST_FORMAT {
            return Err(CorpusError::Parse {
                line: 1,
                msg: format!("format {:?}", header.format),
            });
        }
        if header.version != MANIFEST_VERSION {
            return Err(CorpusError::VersionMismatch {
                found: header.version,
                expected: MANIFEST_VERSION,
            });
        }
        let mut records = Vec::new();
        for (i, line) in lines {
            let rec: SampleRecord = serde_json::from_str(line).map_err(|e| CorpusError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
            records.push(rec);
        }
        Ok(CorpusManifest {
            version: header.version,
            provenance: header.provenance,
            records,
        })
    }

    pub fn read(path: &Path) -> Result<CorpusManifest, CorpusError> {
        let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_jsonl(&text)
    }

    pub fn write(&self, path: &Path) -> Result<(), CorpusError> {
        std::fs::write(path, self.to_jsonl()).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Shell recipe that rewrites optimization flags in unpacked package sources to `flag`, the
/// manual step used to build per-level corpora with a cross toolchain. Documentation only;
/// nothing here runs a compiler.
pub fn flag_substitution_recipe(flag: &str) -> Result<String, CorpusError> {
    OptLevel::from_flag(flag)?;
    let target = format!("-{}", flag.trim().trim_start_matches('-'));
    Ok(format!(
        "# Rewrite every optimization flag in the unpacked package sources to {target}.\n\
         # Run from the build tree after downloading sources (e.g. `make source`).\n\
         find \"${{SRC_DIR:-.}}\" -type f \\( -name 'Makefile*' -o -name '*.mk' -o -name 'configure' \\\n    \
         -o -name '*.in' -o -name '*.am' -o -name 'CMakeLists.txt' \\) \\\n    \
         -exec sed -i -E 's/(^|[[:space:]\"=])-O([0-3s]|fast|g)?([[:space:]\"]|$)/\\1{target}\\3/g' {{}} +\n\
         # Also force the toolchain default, then rebuild:\n\
         export CFLAGS=\"$CFLAGS {target}\" CXXFLAGS=\"$CXXFLAGS {target}\"\n\
         make\n"
    ))
}
