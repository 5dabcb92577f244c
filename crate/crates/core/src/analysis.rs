//! Dataset-characteristic reports over a selection: length statistics,
//! length-vs-fraction curves, strategy overlap and score histograms.
//!
//! Overlap semantics, with `A` the combined-strategy selection and `B` one
//! individual strategy's selection of the same size:
//!
//! * `overall_pct = 100 * |A ∩ B| / |A|`
//! * `unique_pct = 100 * |B \ (union of the other individual selections)| / |B|`
//!
//! `unique_pct` is only defined when at least two individual selections are
//! supplied.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset_io::{Dataset, SampleId};
use crate::ranker::{floor_fraction, SelectionReport};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("selection covers a different set of samples than {0}")]
    MismatchedUniverse(String),
    #[error("selections differ in size: {a} vs {b}")]
    MismatchedSize { a: usize, b: usize },
    #[error("sample {0} is not in the dataset")]
    UnknownSampleId(SampleId),
    #[error("histogram needs at least one bin")]
    NoBins,
    #[error("fractions must be ascending within (0, 1]")]
    BadFractions,
    #[error("tag file {path}: {message}")]
    BadTags { path: PathBuf, message: String },
    #[error("CSV output failed: {0}")]
    Csv(#[from] csv::Error),
    #[error("I/O failure: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GroupStats {
    pub count: usize,
    pub total_chars: u64,
    pub total_ws_tokens: u64,
}

impl GroupStats {
    fn add(&mut self, chars: usize, tokens: usize) {
        self.count += 1;
        self.total_chars += chars as u64;
        self.total_ws_tokens += tokens as u64;
    }

    pub fn mean_chars(&self) -> Option<f64> {
        (self.count > 0).then(|| self.total_chars as f64 / self.count as f64)
    }

    pub fn mean_ws_tokens(&self) -> Option<f64> {
        (self.count > 0).then(|| self.total_ws_tokens as f64 / self.count as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LengthStats {
    pub selected: GroupStats,
    pub unselected: GroupStats,
    pub full: GroupStats,
}

fn empty_group() -> GroupStats {
    GroupStats {
        count: 0,
        total_chars: 0,
        total_ws_tokens: 0,
    }
}

/// Mean lengths (instruction + input + output) of the selected, unselected
/// and full populations.
pub fn length_stats(dataset: &Dataset, report: &SelectionReport) -> Result<LengthStats, AnalysisError> {
    let index = dataset.index_by_id();
    let mut stats = LengthStats {
        selected: empty_group(),
        unselected: empty_group(),
        full: empty_group(),
    };
    for e in &report.entries {
        let i = index
            .get(&e.sample_id)
            .ok_or_else(|| AnalysisError::UnknownSampleId(e.sample_id.clone()))?;
        let s = &dataset.samples[*i];
        let (chars, tokens) = (s.char_len(), s.ws_token_len());
        stats.full.add(chars, tokens);
        if e.selected {
            stats.selected.add(chars, tokens);
        } else {
            stats.unselected.add(chars, tokens);
        }
    }
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub fraction: f64,
    pub count: usize,
    pub mean_length_chars: Option<f64>,
    pub mean_length_tokens: Option<f64>,
}

/// Mean length of the top `floor(f * N)` ranked samples for each fraction.
pub fn fraction_curve(
    ranked: &[SampleId],
    dataset: &Dataset,
    fractions: &[f64],
) -> Result<Vec<CurvePoint>, AnalysisError> {
    if fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) || fractions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(AnalysisError::BadFractions);
    }
    let index = dataset.index_by_id();
    let lengths = ranked
        .iter()
        .map(|id| {
            let s = &dataset.samples[*index
                .get(id)
                .ok_or_else(|| AnalysisError::UnknownSampleId(id.clone()))?];
            Ok((s.char_len() as u64, s.ws_token_len() as u64))
        })
        .collect::<Result<Vec<_>, AnalysisError>>()?;

    // prefix sums keep every point exact
    let mut prefix = Vec::with_capacity(lengths.len() + 1);
    prefix.push((0u64, 0u64));
    for (c, t) in &lengths {
        let (pc, pt) = *prefix.last().unwrap();
        prefix.push((pc + c, pt + t));
    }
    Ok(fractions
        .iter()
        .map(|&fraction| {
            let count = floor_fraction(fraction, lengths.len());
            let (c, t) = prefix[count];
            CurvePoint {
                fraction,
                count,
                mean_length_chars: (count > 0).then(|| c as f64 / count as f64),
                mean_length_tokens: (count > 0).then(|| t as f64 / count as f64),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverlapStats {
    pub strategy_a: String,
    pub strategy_b: String,
    pub unique_pct: Option<f64>,
    pub overall_pct: f64,
}

fn pct(part: usize, whole: usize, empty: f64) -> f64 {
    if whole == 0 {
        empty
    } else {
        100.0 * part as f64 / whole as f64
    }
}

fn check_same_universe(a: &SelectionReport, b: &SelectionReport, name: &str) -> Result<(), AnalysisError> {
    if a.ids() != b.ids() {
        return Err(AnalysisError::MismatchedUniverse(name.to_owned()));
    }
    if a.header.selected_count != b.header.selected_count {
        return Err(AnalysisError::MismatchedSize {
            a: a.header.selected_count,
            b: b.header.selected_count,
        });
    }
    Ok(())
}

/// Share of `a`'s selection also chosen by `b`. An empty `a` counts as fully covered.
pub fn overlap_stats(a: &SelectionReport, b: &SelectionReport) -> Result<OverlapStats, AnalysisError> {
    check_same_universe(a, b, b.header.strategy.as_str())?;
    let sa = a.selected_ids();
    let sb = b.selected_ids();
    Ok(OverlapStats {
        strategy_a: a.header.strategy.to_string(),
        strategy_b: b.header.strategy.to_string(),
        unique_pct: None,
        overall_pct: pct(sa.intersection(&sb).count(), sa.len(), 100.0),
    })
}

/// One row per individual strategy against the combined selection `a`.
pub fn overlap_table(
    a: &SelectionReport,
    individuals: &[&SelectionReport],
) -> Result<Vec<OverlapStats>, AnalysisError> {
    let sets: Vec<HashSet<&SampleId>> = individuals.iter().map(|r| r.selected_ids()).collect();
    let mut rows = Vec::with_capacity(individuals.len());
    for (i, b) in individuals.iter().enumerate() {
        let mut row = overlap_stats(a, b)?;
        if individuals.len() >= 2 {
            let others: HashSet<&SampleId> = sets
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .flat_map(|(_, s)| s.iter().copied())
                .collect();
            let only_here = sets[i].iter().filter(|id| !others.contains(*id)).count();
            row.unique_pct = Some(pct(only_here, sets[i].len(), 0.0));
        }
        rows.push(row);
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Equal-width histogram over `[0, upper]`; out-of-range values are clamped
/// into the edge bins and the last bin is closed on the right.
pub fn score_histogram(scores: &[f64], bins: usize, upper: f64) -> Result<Vec<Bin>, AnalysisError> {
    if bins == 0 {
        return Err(AnalysisError::NoBins);
    }
    let width = upper / bins as f64;
    let mut out: Vec<Bin> = (0..bins)
        .map(|i| Bin {
            lo: i as f64 * width,
            hi: if i + 1 == bins { upper } else { (i + 1) as f64 * width },
            count: 0,
        })
        .collect();
    for &s in scores {
        let i = if s.is_nan() || s <= 0.0 {
            0
        } else {
            ((s / width) as usize).min(bins - 1)
        };
        out[i].count += 1;
    }
    Ok(out)
}

/// Loads a JSON object mapping sample ids to a free-form tag.
pub fn load_tags(path: impl AsRef<Path>) -> Result<HashMap<SampleId, String>, AnalysisError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let map: BTreeMap<String, String> = serde_json::from_str(&text).map_err(|e| AnalysisError::BadTags {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(map.into_iter().map(|(k, v)| (SampleId::from(k.as_str()), v)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagShare {
    pub tag: String,
    pub selected_count: usize,
    pub selected_pct: f64,
    pub full_count: usize,
    pub full_pct: f64,
}

/// Per-tag share of the selection versus the full dataset; untagged samples
/// are counted under the empty tag.
pub fn tag_proportions(report: &SelectionReport, tags: &HashMap<SampleId, String>) -> Vec<TagShare> {
    let mut counts: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for e in &report.entries {
        let tag = tags.get(&e.sample_id).map_or("", String::as_str);
        let c = counts.entry(tag).or_default();
        c.1 += 1;
        if e.selected {
            c.0 += 1;
        }
    }
    let n_sel = report.header.selected_count;
    let n = report.entries.len();
    counts
        .into_iter()
        .map(|(tag, (sel, full))| TagShare {
            tag: tag.to_owned(),
            selected_count: sel,
            selected_pct: pct(sel, n_sel, 0.0),
            full_count: full,
            full_pct: pct(full, n, 0.0),
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_length_stats_csv(path: impl AsRef<Path>, stats: &LengthStats) -> Result<(), AnalysisError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["group", "count", "mean_length_chars", "mean_length_tokens"])?;
    for (name, g) in [("selected", &stats.selected), ("unselected", &stats.unselected), ("full", &stats.full)] {
        w.write_record([
            name.to_owned(),
            g.count.to_string(),
            opt(g.mean_chars()),
            opt(g.mean_ws_tokens()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_fraction_curve_csv(path: impl AsRef<Path>, curve: &[CurvePoint]) -> Result<(), AnalysisError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["fraction", "mean_length_chars", "mean_length_tokens"])?;
    for p in curve {
        w.write_record([p.fraction.to_string(), opt(p.mean_length_chars), opt(p.mean_length_tokens)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_overlap_csv(path: impl AsRef<Path>, rows: &[OverlapStats]) -> Result<(), AnalysisError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["strategy_a", "strategy_b", "unique_pct", "overall_pct"])?;
    for r in rows {
        w.write_record([
            r.strategy_a.clone(),
            r.strategy_b.clone(),
            opt(r.unique_pct),
            r.overall_pct.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_histogram_csv(path: impl AsRef<Path>, bins: &[Bin]) -> Result<(), AnalysisError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["bin_lo", "bin_hi", "count"])?;
    for b in bins {
        w.write_record([b.lo.to_string(), b.hi.to_string(), b.count.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_tag_csv(path: impl AsRef<Path>, rows: &[TagShare]) -> Result<(), AnalysisError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset_io::Sample;
    use crate::ranker::{select_top, RankedEntry, SelectionSize, Strategy};
    use rand::{Rng, SeedableRng};

    fn corpus(lengths: &[usize]) -> Dataset {
        Dataset::from_samples(
            lengths
                .iter()
                .enumerate()
                .map(|(i, &n)| Sample::new(format!("{i:03}"), "", "x".repeat(n - 3)))
                .collect(),
        )
    }

    fn report_by(ds: &Dataset, strategy: Strategy, score: impl Fn(&Sample) -> f64, size: SelectionSize) -> SelectionReport {
        let mut ranked: Vec<RankedEntry> = ds
            .samples
            .iter()
            .map(|s| RankedEntry { sample_id: s.sample_id.clone(), score: score(s) })
            .collect();
        crate::ranker::sort_ranked(&mut ranked);
        select_top(&ranked, strategy, size, "").unwrap()
    }

    #[test]
    fn full_selection_matches_full_stats() {
        let ds = corpus(&[10, 20, 35]);
        let r = report_by(&ds, Strategy::Selectit, |s| s.char_len() as f64, SelectionSize::Fraction(1.0));
        let st = length_stats(&ds, &r).unwrap();
        assert_eq!(st.selected, st.full);
        assert_eq!(st.unselected.count, 0);
        assert_eq!(st.unselected.mean_chars(), None);
    }

    #[test]
    fn two_sample_hand_case() {
        let ds = corpus(&[10, 30]);
        let r = report_by(&ds, Strategy::Selectit, |s| s.char_len() as f64, SelectionSize::Count(1));
        let st = length_stats(&ds, &r).unwrap();
        assert_eq!(st.selected.mean_chars(), Some(30.0));
        assert_eq!(st.unselected.mean_chars(), Some(10.0));
        assert_eq!(st.full.mean_chars(), Some(20.0));
    }

    #[test]
    fn planted_correlation_lifts_selected_mean() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let lengths: Vec<usize> = (0..500).map(|_| rng.gen_range(5..400)).collect();
        let ds = corpus(&lengths);
        let mut noise = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let scores: HashMap<SampleId, f64> = ds
            .samples
            .iter()
            .map(|s| (s.sample_id.clone(), s.char_len() as f64 + noise.gen_range(-50.0..50.0)))
            .collect();
        let r = report_by(&ds, Strategy::Selectit, |s| scores[&s.sample_id], SelectionSize::Fraction(0.2));
        let st = length_stats(&ds, &r).unwrap();
        assert!(st.selected.mean_chars().unwrap() > st.full.mean_chars().unwrap());
        // recombination
        let recombined = (st.selected.total_chars + st.unselected.total_chars) as f64 / st.full.count as f64;
        assert!((recombined - st.full.mean_chars().unwrap()).abs() < 1e-9);
    }

    #[test]
    fn curve_endpoint_and_monotone_plant() {
        let lengths: Vec<usize> = (0..100).map(|i| 10 + 3 * i).collect();
        let ds = corpus(&lengths);
        let r = report_by(&ds, Strategy::Length, |s| s.char_len() as f64, SelectionSize::Fraction(0.2));
        let fractions: Vec<f64> = (1..=10).map(|t| t as f64 / 10.0).collect();
        let curve = fraction_curve(&r.ranked_ids(), &ds, &fractions).unwrap();
        for w in curve.windows(2) {
            assert!(w[1].mean_length_chars.unwrap() < w[0].mean_length_chars.unwrap());
        }
        let full = length_stats(&ds, &r).unwrap().full.mean_chars().unwrap();
        assert_eq!(curve.last().unwrap().mean_length_chars.unwrap(), full);
        let at_02 = fraction_curve(&r.ranked_ids(), &ds, &[0.2]).unwrap();
        assert_eq!(at_02[0].mean_length_chars, length_stats(&ds, &r).unwrap().selected.mean_chars());
        assert!(matches!(fraction_curve(&r.ranked_ids(), &ds, &[0.5, 0.2]), Err(AnalysisError::BadFractions)));
        assert!(matches!(fraction_curve(&r.ranked_ids(), &ds, &[0.0]), Err(AnalysisError::BadFractions)));
    }

    #[test]
    fn overlap_identity_and_disjoint() {
        let ds = corpus(&[10, 11, 12, 13, 14, 15, 16, 17, 18, 19]);
        let a = report_by(&ds, Strategy::Selectit, |s| s.char_len() as f64, SelectionSize::Fraction(0.5));
        let same = report_by(&ds, Strategy::TokenR, |s| s.char_len() as f64, SelectionSize::Fraction(0.5));
        let opposite = report_by(&ds, Strategy::ModelR, |s| -(s.char_len() as f64), SelectionSize::Fraction(0.5));
        assert_eq!(overlap_stats(&a, &a).unwrap().overall_pct, 100.0);
        assert_eq!(overlap_stats(&a, &same).unwrap().overall_pct, 100.0);
        assert_eq!(overlap_stats(&a, &opposite).unwrap().overall_pct, 0.0);
        let small = report_by(&ds, Strategy::ModelR, |s| s.char_len() as f64, SelectionSize::Count(2));
        assert!(matches!(overlap_stats(&a, &small), Err(AnalysisError::MismatchedSize { .. })));
        let other = report_by(&corpus(&[10, 11]), Strategy::ModelR, |s| s.char_len() as f64, SelectionSize::Count(5));
        assert!(matches!(overlap_stats(&a, &other), Err(AnalysisError::MismatchedUniverse(_))));
    }

    #[test]
    fn histogram_cases() {
        let h = score_histogram(&[2.5; 7], 10, 5.0).unwrap();
        assert_eq!(h.iter().filter(|b| b.count > 0).count(), 1);
        assert_eq!(h[5].count, 7);
        let h = score_histogram(&[0.0, 5.0, 4.999, 9.0, -1.0], 5, 5.0).unwrap();
        assert_eq!(h.iter().map(|b| b.count).sum::<usize>(), 5);
        assert_eq!(h[0].count, 2);
        assert_eq!(h[4].count, 3);
        assert_eq!(h[4].hi, 5.0);
        assert!(matches!(score_histogram(&[], 0, 5.0), Err(AnalysisError::NoBins)));
    }

    #[test]
    fn uniform_histogram_is_flat() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
        let scores: Vec<f64> = (0..100_000).map(|_| rng.gen_range(0.0..5.0)).collect();
        let h = score_histogram(&scores, 10, 5.0).unwrap();
        assert_eq!(h.iter().map(|b| b.count).sum::<usize>(), 100_000);
        for b in &h {
            assert!((b.count as f64 - 10_000.0).abs() <= 500.0, "{b:?}");
        }
    }

    #[test]
    fn tags() {
        let ds = corpus(&[10, 20, 30, 40]);
        let r = report_by(&ds, Strategy::Selectit, |s| s.char_len() as f64, SelectionSize::Count(2));
        let mut tags = HashMap::new();
        tags.insert(ds.samples[3].sample_id.clone(), "math".to_string());
        tags.insert(ds.samples[0].sample_id.clone(), "math".to_string());
        let rows = tag_proportions(&r, &tags);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].tag, "math");
        assert_eq!((rows[1].selected_count, rows[1].full_count), (1, 2));
        assert_eq!(rows[1].selected_pct, 50.0);
    }
}
