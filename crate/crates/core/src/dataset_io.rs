//! Alpaca-style instruction datasets: loading, validation, content ids, writing.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Separator byte placed between hashed fields (ASCII unit separator).
const FIELD_SEPARATOR: u8 = 0x1f;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("malformed JSON in {path} at line {line}, column {column}: {message}")]
    MalformedJson {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("schema violation in record {index}: {reason}")]
    SchemaViolation { index: usize, reason: String },
    #[error("sample id collision between records {first} and {second} ({id})")]
    IdCollision {
        id: SampleId,
        first: usize,
        second: usize,
    },
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

/// Content-derived 64-bit identifier, rendered as 16 lowercase hex digits.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SampleId(String);

impl SampleId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for SampleId {
    fn from(s: &str) -> Self {
        SampleId(s.to_owned())
    }
}

/// Hashes `instruction`, `input`, `output` in that order, each followed by a
/// separator byte, and keeps the first 8 bytes of the SHA-256 digest.
pub fn compute_sample_id(instruction: &str, input: &str, output: &str) -> SampleId {
    let mut hasher = Sha256::new();
    for field in [instruction, input, output] {
        hasher.update(field.as_bytes());
        hasher.update([FIELD_SEPARATOR]);
    }
    let digest = hasher.finalize();
    let mut id = String::with_capacity(16);
    for byte in &digest[..8] {
        id.push_str(&format!("{byte:02x}"));
    }
    SampleId(id)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub instruction: String,
    pub input: String,
    pub output: String,
    pub sample_id: SampleId,
}

impl Sample {
    pub fn new(
        instruction: impl Into<String>,
        input: impl Into<String>,
        output: impl Into<String>,
    ) -> Self {
        let instruction = instruction.into();
        let input = input.into();
        let output = output.into();
        let sample_id = compute_sample_id(&instruction, &input, &output);
        Sample {
            instruction,
            input,
            output,
            sample_id,
        }
    }

    /// Character count of instruction + input + output.
    pub fn char_len(&self) -> usize {
        self.instruction.chars().count() + self.input.chars().count() + self.output.chars().count()
    }

    /// Whitespace-delimited token count of instruction + input + output.
    pub fn ws_token_len(&self) -> usize {
        [&self.instruction, &self.input, &self.output]
            .iter()
            .map(|f| f.split_whitespace().count())
            .sum()
    }
}

/// A record skipped at load time, with its position in the source array.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Rejection {
    pub index: usize,
    pub reason: RejectReason,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    EmptyInstruction,
    EmptyOutput,
    Duplicate,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub source_path: PathBuf,
    pub rejections: Vec<Rejection>,
}

impl Dataset {
    pub fn from_samples(samples: Vec<Sample>) -> Self {
        Dataset {
            samples,
            source_path: PathBuf::new(),
            rejections: Vec::new(),
        }
    }

    pub fn count(&self) -> usize {
        self.samples.len()
    }

    pub fn duplicates_dropped(&self) -> usize {
        self.rejections
            .iter()
            .filter(|r| r.reason == RejectReason::Duplicate)
            .count()
    }

    pub fn get(&self, id: &SampleId) -> Option<&Sample> {
        self.samples.iter().find(|s| &s.sample_id == id)
    }

    pub fn index_by_id(&self) -> HashMap<&SampleId, usize> {
        self.samples
            .iter()
            .enumerate()
            .map(|(i, s)| (&s.sample_id, i))
            .collect()
    }
}

#[derive(Serialize)]
struct AlpacaRecord<'a> {
    instruction: &'a str,
    input: &'a str,
    output: &'a str,
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, DatasetError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| {
        if source.kind() == io::ErrorKind::NotFound {
            DatasetError::FileNotFound(path.to_path_buf())
        } else {
            DatasetError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    })?;
    let mut dataset = parse_dataset(&bytes).map_err(|e| match e {
        ParseError::Json(err) => DatasetError::MalformedJson {
            path: path.to_path_buf(),
            line: err.line(),
            column: err.column(),
            message: err.to_string(),
        },
        ParseError::Dataset(err) => err,
    })?;
    dataset.source_path = path.to_path_buf();
    Ok(dataset)
}

enum ParseError {
    Json(serde_json::Error),
    Dataset(DatasetError),
}

fn parse_dataset(bytes: &[u8]) -> Result<Dataset, ParseError> {
    let value: Value = serde_json::from_slice(bytes).map_err(ParseError::Json)?;
    let records = match value {
        Value::Array(items) => items,
        other => {
            return Err(ParseError::Dataset(DatasetError::SchemaViolation {
                index: 0,
                reason: format!("top-level value must be an array, found {}", kind(&other)),
            }))
        }
    };

    let mut samples = Vec::with_capacity(records.len());
    let mut rejections = Vec::new();
    // id -> index in source array of the first record carrying it
    let mut seen: HashMap<SampleId, (usize, usize)> = HashMap::with_capacity(records.len());

    for (index, record) in records.iter().enumerate() {
        let obj = record.as_object().ok_or_else(|| {
            ParseError::Dataset(DatasetError::SchemaViolation {
                index,
                reason: format!("expected object, found {}", kind(record)),
            })
        })?;
        let field = |name: &str, required: bool| -> Result<String, ParseError> {
            match obj.get(name) {
                Some(Value::String(s)) => Ok(s.clone()),
                None if !required => Ok(String::new()),
                None => Err(ParseError::Dataset(DatasetError::SchemaViolation {
                    index,
                    reason: format!("missing string field \"{name}\""),
                })),
                Some(other) => Err(ParseError::Dataset(DatasetError::SchemaViolation {
                    index,
                    reason: format!("field \"{name}\" must be a string, found {}", kind(other)),
                })),
            }
        };
        let instruction = field("instruction", true)?;
        let input = field("input", false)?;
        let output = field("output", true)?;

        if instruction.trim().is_empty() {
            rejections.push(Rejection {
                index,
                reason: RejectReason::EmptyInstruction,
            });
            continue;
        }
        if output.trim().is_empty() {
            rejections.push(Rejection {
                index,
                reason: RejectReason::EmptyOutput,
            });
            continue;
        }

        let sample = Sample::new(instruction, input, output);
        if let Some(&(first, pos)) = seen.get(&sample.sample_id) {
            let prior: &Sample = &samples[pos];
            if prior.instruction == sample.instruction
                && prior.input == sample.input
                && prior.output == sample.output
            {
                rejections.push(Rejection {
                    index,
                    reason: RejectReason::Duplicate,
                });
                continue;
            }
            return Err(ParseError::Dataset(DatasetError::IdCollision {
                id: sample.sample_id,
                first,
                second: index,
            }));
        }
        seen.insert(sample.sample_id.clone(), (index, samples.len()));
        samples.push(sample);
    }

    Ok(Dataset {
        samples,
        source_path: PathBuf::new(),
        rejections,
    })
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "bool",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

/// Serializes samples as a pretty-printed Alpaca JSON array. `input` is always present.
pub fn to_alpaca_json<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> String {
    let records: Vec<AlpacaRecord<'_>> = samples
        .into_iter()
        .map(|s| AlpacaRecord {
            instruction: &s.instruction,
            input: &s.input,
            output: &s.output,
        })
        .collect();
    let mut text = serde_json::to_string_pretty(&records).expect("string records serialize");
    text.push('\n');
    text
}

pub fn write_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    write_samples(&dataset.samples, path)
}

pub fn write_samples<'a>(
    samples: impl IntoIterator<Item = &'a Sample>,
    path: impl AsRef<Path>,
) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let text = to_alpaca_json(samples);
    let io_err = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = fs::File::create(path).map_err(io_err)?;
    file.write_all(text.as_bytes()).map_err(io_err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn empty_array_loads_empty() {
        let dir = tempdir().unwrap();
        let ds = load_dataset(write(dir.path(), "d.json", "[]")).unwrap();
        assert_eq!(ds.count(), 0);
        assert!(ds.rejections.is_empty());
    }

    #[test]
    fn identical_records_are_deduplicated() {
        let dir = tempdir().unwrap();
        let body = r#"[{"instruction":"a","input":"","output":"b"},
                       {"instruction":"a","input":"","output":"b"}]"#;
        let ds = load_dataset(write(dir.path(), "d.json", body)).unwrap();
        assert_eq!(ds.count(), 1);
        assert_eq!(ds.duplicates_dropped(), 1);
        assert_eq!(ds.rejections[0].index, 1);
    }

    #[test]
    fn missing_input_defaults_to_empty() {
        let dir = tempdir().unwrap();
        let body = r#"[{"instruction":"a","output":"b"}]"#;
        let ds = load_dataset(write(dir.path(), "d.json", body)).unwrap();
        assert_eq!(ds.samples[0].input, "");
        assert_eq!(ds.samples[0].sample_id, compute_sample_id("a", "", "b"));
    }

    #[test]
    fn empty_fields_are_rejected_not_fatal() {
        let dir = tempdir().unwrap();
        let body = r#"[{"instruction":"  ","output":"b"},
                       {"instruction":"a","output":""},
                       {"instruction":"a","output":"ok"}]"#;
        let ds = load_dataset(write(dir.path(), "d.json", body)).unwrap();
        assert_eq!(ds.count(), 1);
        assert_eq!(
            ds.rejections,
            vec![
                Rejection { index: 0, reason: RejectReason::EmptyInstruction },
                Rejection { index: 1, reason: RejectReason::EmptyOutput },
            ]
        );
    }

    #[test]
    fn missing_file() {
        let err = load_dataset("/nonexistent/dir/d.json").unwrap_err();
        assert!(matches!(err, DatasetError::FileNotFound(_)));
    }

    #[test]
    fn malformed_json_reports_position() {
        let dir = tempdir().unwrap();
        let p = write(dir.path(), "d.json", "[\n{\"instruction\": \"a\",\n  oops }]");
        match load_dataset(p).unwrap_err() {
            DatasetError::MalformedJson { line, column, .. } => {
                assert_eq!(line, 3);
                assert!(column > 0);
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn schema_violation_reports_index() {
        let dir = tempdir().unwrap();
        let body = r#"[{"instruction":"a","output":"b"},{"instruction":"a","output":3}]"#;
        match load_dataset(write(dir.path(), "d.json", body)).unwrap_err() {
            DatasetError::SchemaViolation { index, .. } => assert_eq!(index, 1),
            e => panic!("unexpected {e:?}"),
        }
        let body = r#"[{"instruction":"a","output":"b"},"nope"]"#;
        assert!(matches!(
            load_dataset(write(dir.path(), "e.json", body)).unwrap_err(),
            DatasetError::SchemaViolation { index: 1, .. }
        ));
        let body = r#"{"instruction":"a"}"#;
        assert!(matches!(
            load_dataset(write(dir.path(), "f.json", body)).unwrap_err(),
            DatasetError::SchemaViolation { .. }
        ));
    }

    #[test]
    fn ids_are_deterministic_and_field_separated() {
        let a = compute_sample_id("a", "", "b");
        assert_eq!(a, compute_sample_id("a", "", "b"));
        assert_eq!(a.as_str().len(), 16);
        assert!(a.as_str().chars().all(|c| c.is_ascii_hexdigit() && !c.is_ascii_uppercase()));
        assert_ne!(a, compute_sample_id("a", "b", ""));
        assert_ne!(a, compute_sample_id("a", "x", "b"));
        assert_ne!(compute_sample_id("ab", "", ""), compute_sample_id("a", "b", ""));
    }

    #[test]
    fn round_trip_preserves_order_and_fields() {
        let dir = tempdir().unwrap();
        let samples: Vec<Sample> = (0..100)
            .map(|i| {
                let input = if i % 3 == 0 { String::new() } else { format!("ctx {i}") };
                Sample::new(format!("task {}", 99 - i), input, format!("answer \"{i}\"\n"))
            })
            .collect();
        let ds = Dataset::from_samples(samples);
        let p = dir.path().join("out.json");
        write_dataset(&ds, &p).unwrap();
        let back = load_dataset(&p).unwrap();
        assert_eq!(back.samples, ds.samples);
        let raw: Value = serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
        assert!(raw[0].get("input").is_some());
    }

    #[test]
    fn unwritable_path_is_io_failure() {
        let ds = Dataset::from_samples(vec![Sample::new("a", "", "b")]);
        let err = write_dataset(&ds, "/nonexistent/dir/out.json").unwrap_err();
        assert!(matches!(err, DatasetError::Io { .. }));
    }

    #[test]
    fn lengths() {
        let s = Sample::new("héllo world", "", "a b  c");
        assert_eq!(s.char_len(), 11 + 6);
        assert_eq!(s.ws_token_len(), 5);
    }
}
