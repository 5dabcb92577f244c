//! Ranking by a strategy score and top-fraction selection.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset_io::{self, Dataset, DatasetError, SampleId};
use crate::scoring::ScoreBreakdown;

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("strategy {strategy} has no usable score for sample {sample_id}")]
    MissingScore { strategy: Strategy, sample_id: SampleId },
    #[error("nothing to select from")]
    EmptyInput,
    #[error("selection report references sample {0}, which is not in the dataset")]
    UnknownSampleId(SampleId),
    #[error("fraction must be in (0, 1], got {0}")]
    InvalidFraction(f64),
    #[error("count must be positive")]
    InvalidCount,
    #[error("unknown strategy {0:?}")]
    UnknownStrategy(String),
    #[error("malformed selection report {path} line {line}: {message}")]
    MalformedReport {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Selectit,
    TokenR,
    SentenceR,
    ModelR,
    Random,
    Length,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Selectit,
        Strategy::TokenR,
        Strategy::SentenceR,
        Strategy::ModelR,
        Strategy::Random,
        Strategy::Length,
    ];

    /// The three single-level reflection strategies.
    pub const INDIVIDUAL: [Strategy; 3] = [Strategy::TokenR, Strategy::SentenceR, Strategy::ModelR];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Selectit => "selectit",
            Strategy::TokenR => "token_r",
            Strategy::SentenceR => "sentence_r",
            Strategy::ModelR => "model_r",
            Strategy::Random => "random",
            Strategy::Length => "length",
        }
    }

    /// Score of a breakdown under this strategy, for the score-based strategies.
    pub fn breakdown_score(self, b: &ScoreBreakdown) -> Option<f64> {
        let s = match self {
            Strategy::Selectit => b.s_model,
            Strategy::TokenR => b.s_token_single,
            Strategy::SentenceR => b.s_sent_single,
            Strategy::ModelR => b.s_model_from_base,
            Strategy::Random | Strategy::Length => return None,
        };
        s.is_finite().then_some(s)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = SelectError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| SelectError::UnknownStrategy(s.to_owned()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionSize {
    Fraction(f64),
    Count(usize),
}

impl SelectionSize {
    pub fn validate(self) -> Result<Self, SelectError> {
        match self {
            SelectionSize::Fraction(f) if !(f > 0.0 && f <= 1.0) => Err(SelectError::InvalidFraction(f)),
            SelectionSize::Count(0) => Err(SelectError::InvalidCount),
            ok => Ok(ok),
        }
    }

    /// Number of samples to keep out of `n`.
    pub fn count_of(self, n: usize) -> usize {
        match self {
            SelectionSize::Fraction(f) => floor_fraction(f, n),
            SelectionSize::Count(c) => c.min(n),
        }
    }
}

/// `floor(fraction * n)`, treating products within 1e-9 (relative) of an
/// integer as that integer so decimal fractions like 0.3 are not undercounted
/// by binary rounding.
pub fn floor_fraction(fraction: f64, n: usize) -> usize {
    let x = fraction * n as f64;
    let r = x.round();
    let v = if (x - r).abs() <= 1e-9 * r.abs().max(1.0) { r } else { x.floor() };
    (v.max(0.0) as usize).min(n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub sample_id: SampleId,
    pub score: f64,
}

/// Descending score, ties by ascending sample id.
pub fn sort_ranked(entries: &mut [RankedEntry]) {
    entries.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.sample_id.cmp(&b.sample_id))
    });
}

/// Ranks the samples of `breakdowns` under `strategy`. `dataset` is needed
/// for the length baseline; `seed` only for the random baseline.
pub fn rank(
    breakdowns: &[ScoreBreakdown],
    strategy: Strategy,
    dataset: &Dataset,
    seed: u64,
) -> Result<Vec<RankedEntry>, SelectError> {
    let mut entries = match strategy {
        Strategy::Random => {
            let mut ids: Vec<&SampleId> = breakdowns.iter().map(|b| &b.sample_id).collect();
            ids.sort();
            ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let n = ids.len();
            ids.into_iter()
                .enumerate()
                .map(|(pos, id)| RankedEntry {
                    sample_id: id.clone(),
                    score: (n - pos) as f64,
                })
                .collect::<Vec<_>>()
        }
        Strategy::Length => {
            let index = dataset.index_by_id();
            breakdowns
                .iter()
                .map(|b| {
                    let i = index.get(&b.sample_id).ok_or_else(|| SelectError::MissingScore {
                        strategy,
                        sample_id: b.sample_id.clone(),
                    })?;
                    Ok(RankedEntry {
                        sample_id: b.sample_id.clone(),
                        score: dataset.samples[*i].char_len() as f64,
                    })
                })
                .collect::<Result<Vec<_>, SelectError>>()?
        }
        _ => breakdowns
            .iter()
            .map(|b| {
                let score = strategy.breakdown_score(b).ok_or_else(|| SelectError::MissingScore {
                    strategy,
                    sample_id: b.sample_id.clone(),
                })?;
                Ok(RankedEntry {
                    sample_id: b.sample_id.clone(),
                    score,
                })
            })
            .collect::<Result<Vec<_>, SelectError>>()?,
    };
    sort_ranked(&mut entries);
    Ok(entries)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub config_fingerprint: String,
    pub strategy: Strategy,
    pub fraction_or_count: SelectionSize,
    pub boundary_score: Option<f64>,
    pub total: usize,
    pub selected_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub sample_id: SampleId,
    pub score: f64,
    pub rank: usize,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionReport {
    pub header: ReportHeader,
    /// In rank order.
    pub entries: Vec<ReportEntry>,
}

impl SelectionReport {
    pub fn selected_ids(&self) -> HashSet<&SampleId> {
        self.entries
            .iter()
            .filter(|e| e.selected)
            .map(|e| &e.sample_id)
            .collect()
    }

    pub fn ids(&self) -> HashSet<&SampleId> {
        self.entries.iter().map(|e| &e.sample_id).collect()
    }

    pub fn ranked_ids(&self) -> Vec<SampleId> {
        self.entries.iter().map(|e| e.sample_id.clone()).collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), SelectError> {
        let path = path.as_ref();
        let io_err = |source| SelectError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut f = fs::File::create(path).map_err(io_err)?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(io_err)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, SelectError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| SelectError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let malformed = |line: usize, message: String| SelectError::MalformedReport {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or_else(|| malformed(1, "empty report".into()))?;
        let header: ReportHeader =
            serde_json::from_str(first).map_err(|e| malformed(1, e.to_string()))?;
        let entries = lines
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| malformed(i + 1, e.to_string())))
            .collect::<Result<Vec<ReportEntry>, _>>()?;
        Ok(SelectionReport { header, entries })
    }
}

/// Marks the first `size.count_of(n)` ranked entries as selected.
pub fn select_top(
    ranked: &[RankedEntry],
    strategy: Strategy,
    size: SelectionSize,
    config_fingerprint: &str,
) -> Result<SelectionReport, SelectError> {
    if ranked.is_empty() {
        return Err(SelectError::EmptyInput);
    }
    let size = size.validate()?;
    let n_selected = size.count_of(ranked.len());
    let entries: Vec<ReportEntry> = ranked
        .iter()
        .enumerate()
        .map(|(i, e)| ReportEntry {
            sample_id: e.sample_id.clone(),
            score: e.score,
            rank: i + 1,
            selected: i < n_selected,
        })
        .collect();
    let boundary_score = n_selected.checked_sub(1).map(|i| ranked[i].score);
    Ok(SelectionReport {
        header: ReportHeader {
            config_fingerprint: config_fingerprint.to_owned(),
            strategy,
            fraction_or_count: size,
            boundary_score,
            total: ranked.len(),
            selected_count: n_selected,
        },
        entries,
    })
}

/// Writes the selected samples in original dataset order, plus the report.
pub fn emit_selected(
    dataset: &Dataset,
    report: &SelectionReport,
    selected_path: impl AsRef<Path>,
    report_path: impl AsRef<Path>,
) -> Result<usize, SelectError> {
    let index = dataset.index_by_id();
    if let Some(e) = report.entries.iter().find(|e| !index.contains_key(&e.sample_id)) {
        return Err(SelectError::UnknownSampleId(e.sample_id.clone()));
    }
    let chosen = report.selected_ids();
    let selected: Vec<_> = dataset
        .samples
        .iter()
        .filter(|s| chosen.contains(&s.sample_id))
        .collect();
    dataset_io::write_samples(selected.iter().copied(), selected_path)?;
    report.write(report_path)?;
    Ok(selected.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset_io::Sample;
    use proptest::prelude::*;
    use super::Strategy;

    fn breakdown(id: &str, s: f64) -> ScoreBreakdown {
        ScoreBreakdown {
            sample_id: SampleId::from(id),
            config_fingerprint: String::new(),
            cells: vec![],
            models: vec![],
            s_model: s,
            s_model_from_base: s,
            s_token_single: s,
            s_sent_single: s,
            reference_model: "m".into(),
            degenerate_cells: 0,
        }
    }

    fn empty() -> Dataset {
        Dataset::from_samples(vec![])
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let bs = [breakdown("a", 3.3), breakdown("b", 2.5), breakdown("c", 3.3)];
        let order: Vec<String> = rank(&bs, Strategy::Selectit, &empty(), 0)
            .unwrap()
            .into_iter()
            .map(|e| e.sample_id.to_string())
            .collect();
        assert_eq!(order, ["a", "c", "b"]);
    }

    #[test]
    fn random_is_seeded() {
        let bs: Vec<_> = (0..50).map(|i| breakdown(&format!("{i:016x}"), 1.0)).collect();
        let a = rank(&bs, Strategy::Random, &empty(), 7).unwrap();
        let b = rank(&bs, Strategy::Random, &empty(), 7).unwrap();
        let c = rank(&bs, Strategy::Random, &empty(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let mut reversed = bs.clone();
        reversed.reverse();
        assert_eq!(rank(&reversed, Strategy::Random, &empty(), 7).unwrap(), a);
    }

    #[test]
    fn length_uses_dataset_chars() {
        let samples = vec![Sample::new("short", "", "x"), Sample::new("a much longer one", "", "yy")];
        let ds = Dataset::from_samples(samples.clone());
        let bs: Vec<_> = samples.iter().map(|s| breakdown(s.sample_id.as_str(), 0.0)).collect();
        let r = rank(&bs, Strategy::Length, &ds, 0).unwrap();
        assert_eq!(r[0].sample_id, samples[1].sample_id);
        assert_eq!(r[0].score, 19.0);
        let foreign = [breakdown("ffff", 1.0)];
        assert!(matches!(rank(&foreign, Strategy::Length, &ds, 0), Err(SelectError::MissingScore { .. })));
    }

    #[test]
    fn nan_score_is_missing() {
        let bs = [breakdown("a", f64::NAN)];
        assert!(matches!(rank(&bs, Strategy::TokenR, &empty(), 0), Err(SelectError::MissingScore { .. })));
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{}\"", s.as_str()));
        }
        assert!("best".parse::<Strategy>().is_err());
    }

    fn ranked_of(n: usize) -> Vec<RankedEntry> {
        (0..n)
            .map(|i| RankedEntry { sample_id: SampleId::from(format!("{i:016x}").as_str()), score: (n - i) as f64 })
            .collect()
    }

    #[test]
    fn selection_counts() {
        let r = select_top(&ranked_of(52_002), Strategy::Selectit, SelectionSize::Fraction(0.2), "fp").unwrap();
        assert_eq!(r.header.selected_count, 10_400);
        let r = select_top(&ranked_of(10), Strategy::Selectit, SelectionSize::Fraction(0.2), "fp").unwrap();
        assert_eq!(r.header.selected_count, 2);
        assert_eq!(r.header.boundary_score, Some(9.0));
        let r = select_top(&ranked_of(5), Strategy::Selectit, SelectionSize::Count(9), "fp").unwrap();
        assert_eq!(r.header.selected_count, 5);
        let r = select_top(&ranked_of(5), Strategy::Selectit, SelectionSize::Fraction(0.1), "fp").unwrap();
        assert_eq!(r.header.selected_count, 0);
        assert_eq!(r.header.boundary_score, None);
        assert!(matches!(
            select_top(&[], Strategy::Selectit, SelectionSize::Fraction(0.2), "fp"),
            Err(SelectError::EmptyInput)
        ));
        assert!(matches!(
            select_top(&ranked_of(3), Strategy::Selectit, SelectionSize::Fraction(1.5), "fp"),
            Err(SelectError::InvalidFraction(_))
        ));
    }

    #[test]
    fn decimal_fractions_are_not_undercounted() {
        // 0.3 * 10 and 0.7 * 10 land a hair off the integer in binary.
        assert_eq!(floor_fraction(0.3, 10), 3);
        assert_eq!(floor_fraction(0.7, 10), 7);
        assert_eq!(floor_fraction(0.2, 52_002), 10_400);
        assert_eq!(floor_fraction(1.0, 7), 7);
    }

    #[test]
    fn count_law_exhaustive() {
        for tenths in 1..=10u64 {
            let f = tenths as f64 / 10.0;
            for n in 1..=1_000_000u64 {
                assert_eq!(floor_fraction(f, n as usize) as u64, tenths * n / 10, "f={f} n={n}");
            }
        }
    }

    #[test]
    fn report_jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let r = select_top(&ranked_of(7), Strategy::TokenR, SelectionSize::Fraction(0.5), "abc").unwrap();
        let p = dir.path().join("r.jsonl");
        r.write(&p).unwrap();
        assert_eq!(SelectionReport::read(&p).unwrap(), r);
        let text = fs::read_to_string(&p).unwrap();
        let header: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in ["config_fingerprint", "strategy", "fraction_or_count", "boundary_score", "total", "selected_count"] {
            assert!(header.get(key).is_some(), "{key}");
        }
        let entry: serde_json::Value = serde_json::from_str(text.lines().nth(1).unwrap()).unwrap();
        assert_eq!(entry.as_object().unwrap().len(), 4);
    }

    #[test]
    fn emit_keeps_dataset_order_and_rejects_foreign_ids() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<Sample> = (0..10).map(|i| Sample::new(format!("q{i}"), "", "a".repeat(i + 1))).collect();
        let ds = Dataset::from_samples(samples.clone());
        let bs: Vec<_> = samples.iter().map(|s| breakdown(s.sample_id.as_str(), s.output.len() as f64)).collect();
        let ranked = rank(&bs, Strategy::Selectit, &ds, 0).unwrap();
        let report = select_top(&ranked, Strategy::Selectit, SelectionSize::Fraction(0.2), "fp").unwrap();
        let sel = dir.path().join("selected.json");
        let rep = dir.path().join("selection_report.jsonl");
        assert_eq!(emit_selected(&ds, &report, &sel, &rep).unwrap(), 2);
        let back = dataset_io::load_dataset(&sel).unwrap();
        assert_eq!(back.samples, vec![samples[8].clone(), samples[9].clone()]);

        let mut bad = report.clone();
        bad.entries[0].sample_id = SampleId::from("deadbeefdeadbeef");
        assert!(matches!(emit_selected(&ds, &bad, &sel, &rep), Err(SelectError::UnknownSampleId(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn selection_dominance(scores in prop::collection::vec(0u8..6, 1..60), tenths in 1u32..=10) {
            let bs: Vec<_> = scores.iter().enumerate()
                .map(|(i, s)| breakdown(&format!("{:016x}", i * 7919 % 1000), *s as f64 / 2.0))
                .collect();
            let ranked = rank(&bs, Strategy::Selectit, &empty(), 0).unwrap();
            let r = select_top(&ranked, Strategy::Selectit, SelectionSize::Fraction(tenths as f64 / 10.0), "").unwrap();
            let (sel, unsel): (Vec<_>, Vec<_>) = r.entries.iter().partition(|e| e.selected);
            prop_assert_eq!(sel.len() as u64, tenths as u64 * bs.len() as u64 / 10);
            if let (Some(min_sel), Some(max_un)) = (
                sel.iter().map(|e| e.score).reduce(f64::min),
                unsel.iter().map(|e| e.score).reduce(f64::max),
            ) {
                prop_assert!(min_sel >= max_un);
                if min_sel == max_un {
                    let last_sel = sel.iter().filter(|e| e.score == min_sel).map(|e| &e.sample_id).max().unwrap();
                    let first_un = unsel.iter().filter(|e| e.score == max_un).map(|e| &e.sample_id).min().unwrap();
                    prop_assert!(last_sel < first_un);
                }
            }
            let mut ranks: Vec<usize> = r.entries.iter().map(|e| e.rank).collect();
            ranks.sort();
            prop_assert_eq!(ranks, (1..=bs.len()).collect::<Vec<_>>());
        }
    }
}
