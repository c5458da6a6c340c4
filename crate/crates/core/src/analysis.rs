//! Fine-grained binning, candidate pruning, input ablations,
//! abstractiveness and oracle-surpass statistics.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::word_count;
use crate::decoding::DecodeConfig;
use crate::error::{Error, Result};
use crate::fusion::{AblationMode, FusionModel};
use crate::metrics::{self, Objective, RougeTriple};
use crate::pipeline::{fusion_predict, score_predictions, FusedRecord};
use crate::scalar::Scalar;
use crate::tokenizer::Vocab;

pub const N_BINS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    Quality,
    Diversity,
    SourceLength,
    CompressionRatio,
}

impl Feature {
    pub const ALL: [Feature; 4] = [
        Feature::Quality,
        Feature::Diversity,
        Feature::SourceLength,
        Feature::CompressionRatio,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Feature::Quality => "quality",
            Feature::Diversity => "diversity",
            Feature::SourceLength => "source_length",
            Feature::CompressionRatio => "compression_ratio",
        }
    }
}

/// Per-example features and scores feeding the binned analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub id: String,
    /// Mean over candidates of their mean ROUGE.
    pub quality: f64,
    /// Mean pairwise `1 - ROUGE-1` between candidates.
    pub diversity: f64,
    /// Words in the source.
    pub source_length: f64,
    /// Reference words over source words.
    pub compression_ratio: f64,
    /// Mean ROUGE of the top beam candidate.
    pub baseline: f64,
    /// Mean ROUGE of the fusion output.
    pub fusion: f64,
}

impl ExampleRecord {
    pub fn feature(&self, f: Feature) -> f64 {
        match f {
            Feature::Quality => self.quality,
            Feature::Diversity => self.diversity,
            Feature::SourceLength => self.source_length,
            Feature::CompressionRatio => self.compression_ratio,
        }
    }
}

pub fn example_records(records: &[FusedRecord], predictions: &[String]) -> Result<Vec<ExampleRecord>> {
    if records.len() != predictions.len() {
        return Err(Error::Invalid("prediction count differs from record count".into()));
    }
    records
        .iter()
        .zip(predictions)
        .map(|(r, p)| {
            let reference = r.target.as_deref().ok_or_else(|| Error::MissingTarget(r.id.clone()))?;
            let first = r
                .candidates
                .first()
                .ok_or_else(|| Error::Invalid(format!("record {:?} has no candidates", r.id)))?;
            let src_words = word_count(&r.source).max(1) as f64;
            Ok(ExampleRecord {
                id: r.id.clone(),
                quality: metrics::mean_candidate_quality(&r.candidates, reference)?,
                diversity: metrics::candidate_diversity(&r.candidates)?,
                source_length: word_count(&r.source) as f64,
                compression_ratio: word_count(reference) as f64 / src_words,
                baseline: metrics::rouge_triple(first, reference).mean,
                fusion: metrics::rouge_triple(p, reference).mean,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub baseline_mean: f64,
    pub fusion_mean: f64,
    pub ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinnedReport {
    pub feature: Feature,
    pub bins: Vec<Bin>,
}

/// Bin sizes for `n` items: equal, with the remainder on the leading bins.
pub fn bin_sizes(n: usize, bins: usize) -> Vec<usize> {
    (0..bins).map(|i| n / bins + usize::from(i < n % bins)).collect()
}

/// Sorts by the feature (ties by id) and cuts into ten equal bins.
pub fn binned_analysis(records: &[ExampleRecord]) -> Result<Vec<BinnedReport>> {
    if records.len() < N_BINS {
        return Err(Error::InsufficientData(format!(
            "binned analysis needs at least {N_BINS} examples, got {}",
            records.len()
        )));
    }
    Feature::ALL
        .iter()
        .map(|&feature| {
            let mut sorted: Vec<&ExampleRecord> = records.iter().collect();
            sorted.sort_by(|a, b| {
                a.feature(feature)
                    .total_cmp(&b.feature(feature))
                    .then_with(|| a.id.cmp(&b.id))
            });
            let mut start = 0;
            let bins = bin_sizes(sorted.len(), N_BINS)
                .into_iter()
                .map(|size| {
                    let slice = &sorted[start..start + size];
                    start += size;
                    let n = size as f64;
                    Bin {
                        lo: slice[0].feature(feature),
                        hi: slice[size - 1].feature(feature),
                        count: size,
                        baseline_mean: slice.iter().map(|r| r.baseline).sum::<f64>() / n,
                        fusion_mean: slice.iter().map(|r| r.fusion).sum::<f64>() / n,
                        ids: slice.iter().map(|r| r.id.clone()).collect(),
                    }
                })
                .collect();
            Ok(BinnedReport { feature, bins })
        })
        .collect()
}

pub fn binned_tsv(reports: &[BinnedReport]) -> String {
    let mut out = String::from("feature\tbin\tlo\thi\tcount\tbaseline_mean\tfusion_mean\n");
    for r in reports {
        for (i, b) in r.bins.iter().enumerate() {
            let _ = writeln!(
                out,
                "{}\t{i}\t{}\t{}\t{}\t{}\t{}",
                r.feature.name(),
                b.lo,
                b.hi,
                b.count,
                b.baseline_mean,
                b.fusion_mean
            );
        }
    }
    out
}

/// Scores of one inference configuration, with the per-example values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub label: String,
    pub scores: RougeTriple,
    pub ids: Vec<String>,
    pub per_example: Vec<RougeTriple>,
}

fn score_row<T: Scalar>(
    model: &FusionModel<T>,
    vocab: &Vocab,
    records: &[FusedRecord],
    decode: &DecodeConfig,
    mode: AblationMode,
    label: String,
) -> Result<ScoreRow> {
    let preds = fusion_predict(model, vocab, records, decode, mode)?;
    let per_example = score_predictions(&preds, records)?;
    Ok(ScoreRow {
        label,
        scores: RougeTriple::average(&per_example),
        ids: records.iter().map(|r| r.id.clone()).collect(),
        per_example,
    })
}

/// Inference keeping only the first `k` candidates, for each `k`.
pub fn prune_sweep<T: Scalar>(
    model: &FusionModel<T>,
    vocab: &Vocab,
    records: &[FusedRecord],
    ks: &[usize],
    decode: &DecodeConfig,
) -> Result<Vec<ScoreRow>> {
    let m_min = records.iter().map(|r| r.candidates.len()).min().unwrap_or(0);
    if let Some(&bad) = ks.iter().find(|&&k| k == 0 || k > m_min) {
        return Err(Error::Invalid(format!("prune k = {bad} outside 1..={m_min}")));
    }
    ks.iter()
        .map(|&k| score_row(model, vocab, records, decode, AblationMode::FirstK(k), format!("k={k}")))
        .collect()
}

pub fn ablation_name(mode: AblationMode) -> String {
    match mode {
        AblationMode::Full => "full".into(),
        AblationMode::NoSource => "no_source".into(),
        AblationMode::NoCandidates => "no_candidates".into(),
        AblationMode::FirstK(k) => format!("first_{k}"),
    }
}

/// One decode pass per input ablation.
pub fn ablation_eval<T: Scalar>(
    model: &FusionModel<T>,
    vocab: &Vocab,
    records: &[FusedRecord],
    modes: &[AblationMode],
    decode: &DecodeConfig,
) -> Result<Vec<ScoreRow>> {
    modes
        .iter()
        .map(|&m| score_row(model, vocab, records, decode, m, ablation_name(m)))
        .collect()
}

pub fn score_rows_tsv(rows: &[ScoreRow]) -> String {
    let mut out = String::from("label\tr1\tr2\trl\tmean\tn\n");
    for r in rows {
        let s = r.scores;
        let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}\t{}", r.label, s.r1, s.r2, s.rl, s.mean, r.ids.len());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbstractivenessRow {
    pub id: String,
    /// Novel n-gram percentages for n = 1, 2, 3; `None` when the summary is
    /// shorter than n.
    pub source: [Option<f64>; 3],
    pub candidates: [Option<f64>; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbstractivenessReport {
    /// Macro averages over examples where the n-gram order is defined.
    pub source: [f64; 3],
    pub candidates: [f64; 3],
    pub per_example: Vec<AbstractivenessRow>,
}

/// Novel n-gram fractions of summaries with respect to their sources and to
/// their candidate sets; summaries are aligned to records by id.
pub fn abstractiveness_report(summaries: &[(String, String)], records: &[FusedRecord]) -> Result<AbstractivenessReport> {
    let by_id: HashMap<&str, &FusedRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut missing: Vec<String> = summaries
        .iter()
        .filter(|(id, _)| !by_id.contains_key(id.as_str()))
        .map(|(id, _)| id.clone())
        .collect();
    if !missing.is_empty() {
        missing.sort();
        return Err(Error::Coverage(missing));
    }
    let novel = |text: &str, against: &[&str], n: usize| metrics::novel_ngram_fraction(text, against, n).ok();
    let per_example: Vec<AbstractivenessRow> = summaries
        .iter()
        .map(|(id, text)| {
            let r = by_id[id.as_str()];
            let cands: Vec<&str> = r.candidates.iter().map(String::as_str).collect();
            AbstractivenessRow {
                id: id.clone(),
                source: [1, 2, 3].map(|n| novel(text, &[r.source.as_str()], n)),
                candidates: [1, 2, 3].map(|n| novel(text, &cands, n)),
            }
        })
        .collect();
    let macro_avg = |pick: fn(&AbstractivenessRow) -> [Option<f64>; 3]| {
        [0, 1, 2].map(|i| {
            let vals: Vec<f64> = per_example.iter().filter_map(|r| pick(r)[i]).collect();
            if vals.is_empty() {
                0.0
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        })
    };
    Ok(AbstractivenessReport {
        source: macro_avg(|r| r.source),
        candidates: macro_avg(|r| r.candidates),
        per_example,
    })
}

pub fn abstractiveness_tsv(report: &AbstractivenessReport) -> String {
    let mut out = String::from("against\tnovel_1\tnovel_2\tnovel_3\n");
    for (name, v) in [("source", report.source), ("candidates", report.candidates)] {
        let _ = writeln!(out, "{name}\t{}\t{}\t{}", v[0], v[1], v[2]);
    }
    out
}

/// Mean-ROUGE of the best among the first `k` candidates, for `k = 1..=m`.
pub fn k_oracle_scores(record: &FusedRecord) -> Result<Vec<f64>> {
    let reference = record
        .target
        .as_deref()
        .ok_or_else(|| Error::MissingTarget(record.id.clone()))?;
    let scores: Vec<f64> = record
        .candidates
        .iter()
        .map(|c| metrics::rouge_triple(c, reference).mean)
        .collect();
    Ok(scores
        .iter()
        .scan(f64::NEG_INFINITY, |best, &s| {
            *best = best.max(s);
            Some(*best)
        })
        .collect())
}

/// Percentage of examples whose fusion mean-ROUGE strictly exceeds the
/// oracle over their first `k` candidates.
pub fn oracle_surpass_rate(fusion: &[f64], records: &[FusedRecord], k: usize) -> Result<f64> {
    if fusion.len() != records.len() || records.is_empty() {
        return Err(Error::Invalid("fusion scores and records must align and be non-empty".into()));
    }
    let mut hits = 0usize;
    for (score, r) in fusion.iter().zip(records) {
        if k == 0 || k > r.candidates.len() {
            return Err(Error::Invalid(format!(
                "k = {k} outside 1..={} for record {:?}",
                r.candidates.len(),
                r.id
            )));
        }
        let reference = r.target.as_deref().ok_or_else(|| Error::MissingTarget(r.id.clone()))?;
        let (_, oracle) = metrics::oracle_select(&r.candidates[..k], reference, Objective::Mean)?;
        if *score > oracle.mean {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / records.len() as f64)
}

/// Writes `<name>.json` and `<name>.tsv` into `dir`.
pub fn write_report<S: Serialize>(dir: impl AsRef<Path>, name: &str, report: &S, tsv: &str) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    let jp = dir.join(format!("{name}.json"));
    std::fs::write(&jp, json + "\n").map_err(|e| Error::io(&jp, e))?;
    let tp = dir.join(format!("{name}.tsv"));
    std::fs::write(&tp, tsv).map_err(|e| Error::io(&tp, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(i: usize, q: f64) -> ExampleRecord {
        ExampleRecord {
            id: format!("e{i:03}"),
            quality: q,
            diversity: 0.5,
            source_length: i as f64,
            compression_ratio: 0.1,
            baseline: i as f64,
            fusion: 2.0 * i as f64,
        }
    }

    #[test]
    fn hundred_examples_make_ten_bins_of_ten() {
        let rs: Vec<_> = (0..100).map(|i| rec(i, i as f64)).collect();
        let reports = binned_analysis(&rs).unwrap();
        assert_eq!(reports.len(), 4);
        assert!(reports[0].bins.iter().all(|b| b.count == 10));
        assert_eq!(reports[0].bins[0].baseline_mean, 4.5);
    }

    #[test]
    fn remainder_goes_to_leading_bins() {
        assert_eq!(bin_sizes(23, 10), vec![3, 3, 3, 2, 2, 2, 2, 2, 2, 2]);
    }

    #[test]
    fn constant_feature_still_bins_by_id() {
        let rs: Vec<_> = (0..20).rev().map(|i| rec(i, 1.0)).collect();
        let reports = binned_analysis(&rs).unwrap();
        assert_eq!(reports[0].bins[0].ids, vec!["e000", "e001"]);
    }

    #[test]
    fn too_few_examples_rejected() {
        let rs: Vec<_> = (0..9).map(|i| rec(i, 0.0)).collect();
        assert!(binned_analysis(&rs).is_err());
    }

    #[test]
    fn surpass_is_strict() {
        let r = FusedRecord {
            id: "a".into(),
            source: "x y z".into(),
            target: Some("x y".into()),
            candidates: vec!["x".into(), "x y".into()],
        };
        assert_eq!(oracle_surpass_rate(&[1.0], &[r.clone()], 2).unwrap(), 0.0);
        let top = metrics::rouge_triple("x", "x y").mean;
        assert_eq!(oracle_surpass_rate(&[top + 0.01], &[r], 1).unwrap(), 100.0);
    }
}
