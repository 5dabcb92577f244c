//! Append-only JSONL store of [`ProbRecord`]s.
//!
//! One record per line. A key may appear many times; the last complete line
//! wins. Lines that fail to parse (a torn tail after a crash, or garbage) are
//! skipped with a warning and reported by line number.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset_io::SampleId;
use crate::gateway::ProbRecord;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CacheKey {
    pub sample_id: SampleId,
    pub prompt_id: u8,
    pub model_id: String,
    pub k: u8,
}

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("refusing to store invalid record: {0}")]
    InvalidRecord(String),
}

/// A skipped line (1-based line number).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CorruptLine {
    pub line: usize,
    pub reason: String,
    /// True when this is the final line and lacks a trailing newline.
    pub torn_tail: bool,
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct ScanFilter {
    pub model_id: Option<String>,
    pub prompt_id: Option<u8>,
}

#[derive(Debug)]
pub struct ScoreCache {
    path: PathBuf,
    index: BTreeMap<CacheKey, ProbRecord>,
    corrupt: Vec<CorruptLine>,
    lines: usize,
    file: Option<File>,
    /// The file is non-empty and does not end in a newline.
    unterminated: bool,
}

#[derive(Debug, Clone, Default)]
struct Parsed {
    records: Vec<ProbRecord>,
    corrupt: Vec<CorruptLine>,
    lines: usize,
    unterminated: bool,
}

fn parse_lines(bytes: &[u8]) -> Parsed {
    let mut parsed = Parsed {
        unterminated: !bytes.is_empty() && !bytes.ends_with(b"\n"),
        ..Parsed::default()
    };
    let mut pieces = bytes.split(|b| *b == b'\n').peekable();
    let mut line_no = 0;
    while let Some(piece) = pieces.next() {
        line_no += 1;
        let last = pieces.peek().is_none();
        if last && piece.is_empty() {
            break;
        }
        parsed.lines += 1;
        if piece.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        let result = serde_json::from_slice::<ProbRecord>(piece)
            .map_err(|e| e.to_string())
            .and_then(|r| r.check().map(|()| r));
        match result {
            Ok(r) => parsed.records.push(r),
            Err(reason) => parsed.corrupt.push(CorruptLine {
                line: line_no,
                reason,
                torn_tail: last,
            }),
        }
    }
    parsed
}

/// Serializes `record` as one JSON line and writes it with a single call.
pub fn append_record<W: Write>(w: &mut W, record: &ProbRecord) -> io::Result<()> {
    let mut line = serde_json::to_vec(record).map_err(io::Error::other)?;
    line.push(b'\n');
    w.write_all(&line)?;
    w.flush()
}

impl ScoreCache {
    /// Opens (without creating) the cache file at `path`; a missing file is an empty cache.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, CacheError> {
        let path = path.as_ref().to_path_buf();
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(source) => return Err(CacheError::Io { path, source }),
        };
        let parsed = parse_lines(&bytes);
        for c in &parsed.corrupt {
            tracing::warn!(path = %path.display(), line = c.line, reason = %c.reason, "skipping corrupt cache line");
        }
        let mut index = BTreeMap::new();
        for r in parsed.records {
            index.insert(r.key(), r);
        }
        Ok(ScoreCache {
            path,
            index,
            corrupt: parsed.corrupt,
            lines: parsed.lines,
            file: None,
            unterminated: parsed.unterminated,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn io_err(&self, source: io::Error) -> CacheError {
        CacheError::Io {
            path: self.path.clone(),
            source,
        }
    }

    pub fn put(&mut self, record: ProbRecord) -> Result<(), CacheError> {
        record.check().map_err(CacheError::InvalidRecord)?;
        if self.file.is_none() {
            if let Some(dir) = self.path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| self.io_err(e))?;
            }
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&self.path)
                .map_err(|e| self.io_err(e))?;
            self.file = Some(file);
        }
        let file = self.file.as_mut().expect("opened above");
        if self.unterminated {
            // Seal a torn tail so the new record starts on its own line.
            file.write_all(b"\n").map_err(|source| CacheError::Io {
                path: self.path.clone(),
                source,
            })?;
            self.unterminated = false;
        }
        append_record(file, &record).map_err(|source| CacheError::Io {
            path: self.path.clone(),
            source,
        })?;
        self.lines += 1;
        self.index.insert(record.key(), record);
        Ok(())
    }

    pub fn get(&self, key: &CacheKey) -> Option<&ProbRecord> {
        self.index.get(key)
    }

    pub fn contains(&self, key: &CacheKey) -> bool {
        self.index.contains_key(key)
    }

    /// Latest record per key, in key order.
    pub fn scan<'a>(&'a self, filter: &'a ScanFilter) -> impl Iterator<Item = &'a ProbRecord> + 'a {
        self.index.values().filter(move |r| {
            filter.model_id.as_ref().is_none_or(|m| &r.model_id == m)
                && filter.prompt_id.is_none_or(|p| r.prompt_id == p)
        })
    }

    /// All records of one sample, in key order.
    pub fn records_for<'a>(&'a self, sample_id: &'a SampleId) -> impl Iterator<Item = &'a ProbRecord> + 'a {
        let start = CacheKey {
            sample_id: sample_id.clone(),
            prompt_id: 0,
            model_id: String::new(),
            k: 0,
        };
        self.index
            .range(start..)
            .map(|(_, r)| r)
            .take_while(move |r| &r.sample_id == sample_id)
    }

    /// Number of distinct keys.
    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn corrupt_lines(&self) -> &[CorruptLine] {
        &self.corrupt
    }

    /// Non-empty lines seen on open plus lines appended since.
    pub fn line_count(&self) -> usize {
        self.lines
    }

    /// Record counts per (model_id, prompt_id).
    pub fn stats(&self) -> BTreeMap<(String, u8), usize> {
        let mut counts = BTreeMap::new();
        for r in self.index.values() {
            *counts.entry((r.model_id.clone(), r.prompt_id)).or_default() += 1;
        }
        counts
    }

    pub fn sync(&mut self) -> Result<(), CacheError> {
        if let Some(f) = self.file.as_mut() {
            f.sync_all().map_err(|source| CacheError::Io {
                path: self.path.clone(),
                source,
            })?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub lines: usize,
    pub valid: usize,
    pub distinct_keys: usize,
    pub corrupt: Vec<CorruptLine>,
}

/// Re-parses every line of the cache file.
pub fn verify(path: impl AsRef<Path>) -> Result<VerifyReport, CacheError> {
    let cache = ScoreCache::open(path)?;
    let corrupt = cache.corrupt.clone();
    Ok(VerifyReport {
        lines: cache.lines,
        valid: cache.lines - corrupt.len(),
        distinct_keys: cache.len(),
        corrupt,
    })
}
