//! ROUGE-1/2/L and the candidate-pool statistics built on them.
//!
//! Texts are normalized before scoring: lowercased, every character that is
//! neither alphanumeric nor whitespace replaced by a space, then split on
//! whitespace. Any comparison where either side has no n-grams scores 0.

use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn normalize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect::<String>()
        .to_lowercase();
    cleaned.split_whitespace().map(str::to_string).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn from_counts(overlap: usize, hyp_total: usize, ref_total: usize) -> Self {
        if hyp_total == 0 || ref_total == 0 || overlap == 0 {
            return Self::default();
        }
        let precision = overlap as f64 / hyp_total as f64;
        let recall = overlap as f64 / ref_total as f64;
        Self {
            precision,
            recall,
            f1: 2.0 * precision * recall / (precision + recall),
        }
    }
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for w in tokens.windows(n) {
        *counts.entry(w.iter().map(|s| s.as_ref()).collect()).or_insert(0) += 1;
    }
    counts
}

/// Clipped n-gram overlap on pre-normalized tokens.
pub fn rouge_n_tokens<S: AsRef<str>>(hyp: &[S], reference: &[S], n: usize) -> Prf {
    assert!(n >= 1, "n-gram order must be at least 1");
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let overlap = h
        .iter()
        .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    Prf::from_counts(
        overlap,
        hyp.len().saturating_sub(n - 1),
        reference.len().saturating_sub(n - 1),
    )
}

pub fn rouge_n_prf(hyp: &str, reference: &str, n: usize) -> Prf {
    rouge_n_tokens(&normalize(hyp), &normalize(reference), n)
}

/// ROUGE-N F-measure.
pub fn rouge_n(hyp: &str, reference: &str, n: usize) -> f64 {
    rouge_n_prf(hyp, reference, n).f1
}

/// Length of the longest common subsequence, O(|a|·|b|) time and O(|b|)
/// memory.
pub fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l_tokens<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> Prf {
    Prf::from_counts(lcs_len(hyp, reference), hyp.len(), reference.len())
}

pub fn rouge_l_prf(hyp: &str, reference: &str) -> Prf {
    rouge_l_tokens(&normalize(hyp), &normalize(reference))
}

/// Summary-level ROUGE-L F-measure (single LCS over the whole text).
pub fn rouge_l(hyp: &str, reference: &str) -> f64 {
    rouge_l_prf(hyp, reference).f1
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RougeTriple {
    pub r1: f64,
    pub r2: f64,
    pub rl: f64,
    pub mean: f64,
}

impl RougeTriple {
    pub fn new(r1: f64, r2: f64, rl: f64) -> Self {
        Self {
            r1,
            r2,
            rl,
            mean: (r1 + r2 + rl) / 3.0,
        }
    }

    pub fn get(&self, objective: Objective) -> f64 {
        match objective {
            Objective::R1 => self.r1,
            Objective::R2 => self.r2,
            Objective::RL => self.rl,
            Objective::Mean => self.mean,
        }
    }

    /// Component-wise mean of several triples.
    pub fn average(items: &[RougeTriple]) -> RougeTriple {
        if items.is_empty() {
            return RougeTriple::default();
        }
        let n = items.len() as f64;
        RougeTriple::new(
            items.iter().map(|t| t.r1).sum::<f64>() / n,
            items.iter().map(|t| t.r2).sum::<f64>() / n,
            items.iter().map(|t| t.rl).sum::<f64>() / n,
        )
    }
}

pub fn rouge_triple_tokens<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> RougeTriple {
    RougeTriple::new(
        rouge_n_tokens(hyp, reference, 1).f1,
        rouge_n_tokens(hyp, reference, 2).f1,
        rouge_l_tokens(hyp, reference).f1,
    )
}

pub fn rouge_triple(hyp: &str, reference: &str) -> RougeTriple {
    rouge_triple_tokens(&normalize(hyp), &normalize(reference))
}

/// Selection objective for oracle and label computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    R1,
    R2,
    #[serde(rename = "rl")]
    RL,
    Mean,
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "r1" | "rouge-1" => Ok(Objective::R1),
            "r2" | "rouge-2" => Ok(Objective::R2),
            "rl" | "rouge-l" => Ok(Objective::RL),
            "mean" => Ok(Objective::Mean),
            other => Err(Error::Config(format!("unknown metric {other:?}"))),
        }
    }
}

/// Index of the best-scoring entry; ties go to the lowest index.
pub fn argmax_first(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// The candidate maximizing `objective` against the reference.
pub fn oracle_select<S: AsRef<str>>(
    candidates: &[S],
    reference: &str,
    objective: Objective,
) -> Result<(usize, RougeTriple)> {
    if candidates.is_empty() {
        return Err(Error::Invalid("oracle selection over an empty candidate set".into()));
    }
    let r = normalize(reference);
    let triples: Vec<RougeTriple> = candidates
        .iter()
        .map(|c| rouge_triple_tokens(&normalize(c.as_ref()), &r))
        .collect();
    let scores: Vec<f64> = triples.iter().map(|t| t.get(objective)).collect();
    let idx = argmax_first(&scores).expect("non-empty");
    Ok((idx, triples[idx]))
}

/// Uniform random candidate index, reproducible per seed.
pub fn random_select(set_len: usize, seed: u64) -> Result<usize> {
    if set_len == 0 {
        return Err(Error::Invalid("random selection over an empty candidate set".into()));
    }
    Ok(ChaCha8Rng::seed_from_u64(seed).gen_range(0..set_len))
}

/// Mean of `1 - ROUGE-1` over all unordered candidate pairs.
pub fn candidate_diversity<S: AsRef<str>>(candidates: &[S]) -> Result<f64> {
    if candidates.len() < 2 {
        return Err(Error::Invalid(format!(
            "diversity needs at least two candidates, got {}",
            candidates.len()
        )));
    }
    let toks: Vec<Vec<String>> = candidates.iter().map(|c| normalize(c.as_ref())).collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..toks.len() {
        for j in i + 1..toks.len() {
            total += 1.0 - rouge_n_tokens(&toks[i], &toks[j], 1).f1;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Percentage of the summary's n-gram positions whose n-gram occurs in none
/// of the `against` texts.
pub fn novel_ngram_fraction<S: AsRef<str>>(summary: &str, against: &[S], n: usize) -> Result<f64> {
    let toks = normalize(summary);
    if n == 0 || toks.len() < n {
        return Err(Error::Invalid(format!(
            "summary has {} tokens, fewer than n = {n}",
            toks.len()
        )));
    }
    let pool: Vec<Vec<String>> = against.iter().map(|t| normalize(t.as_ref())).collect();
    let mut seen: HashSet<&[String]> = HashSet::new();
    for p in &pool {
        if p.len() >= n {
            seen.extend(p.windows(n));
        }
    }
    let grams: Vec<&[String]> = toks.windows(n).collect();
    let novel = grams.iter().filter(|g| !seen.contains(*g)).count();
    Ok(100.0 * novel as f64 / grams.len() as f64)
}

/// Mean over candidates of the mean ROUGE against the reference.
pub fn mean_candidate_quality<S: AsRef<str>>(candidates: &[S], reference: &str) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::Invalid("quality of an empty candidate set".into()));
    }
    let r = normalize(reference);
    let total: f64 = candidates
        .iter()
        .map(|c| rouge_triple_tokens(&normalize(c.as_ref()), &r).mean)
        .sum();
    Ok(total / candidates.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rouge_one_worked_example() {
        let p = rouge_n_prf("the cat sat", "the cat ran", 1);
        assert!((p.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((p.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((p.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(rouge_n("a b", "c d", 1), 0.0);
        assert_eq!(rouge_n("x y z", "x y z", 2), 1.0);
    }

    #[test]
    fn rouge_l_worked_example() {
        assert!((rouge_l("the cat sat", "the cat ran") - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(rouge_l("same text here", "same text here"), 1.0);
        assert_eq!(rouge_l("", "ref"), 0.0);
        assert_eq!(rouge_l("", ""), 0.0);
    }

    #[test]
    fn triple_worked_example() {
        let t = rouge_triple("the cat sat", "the cat ran");
        assert!((t.r2 - 0.5).abs() < 1e-12);
        assert!((t.mean - (2.0 / 3.0 + 0.5 + 2.0 / 3.0) / 3.0).abs() < 1e-12);
        assert_eq!(rouge_triple("a b c", "a b c"), RougeTriple::new(1.0, 1.0, 1.0));
        assert_eq!(rouge_triple("a b", "c d"), RougeTriple::default());
    }

    #[test]
    fn normalization_strips_punctuation_and_case() {
        assert_eq!(normalize("The  Cat, sat!"), ["the", "cat", "sat"]);
        assert_eq!(rouge_n("Cat.", "cat", 1), 1.0);
    }

    #[test]
    fn oracle_ties_go_to_lowest_index() {
        let (i, _) = oracle_select(&["x"], "y", Objective::Mean).unwrap();
        assert_eq!(i, 0);
        assert_eq!(argmax_first(&[0.2, 0.9, 0.9]), Some(1));
        let (i, t) = oracle_select(&["q", "a b", "a b"], "a b", Objective::R1).unwrap();
        assert_eq!(i, 1);
        assert_eq!(t.r1, 1.0);
        assert!(oracle_select::<&str>(&[], "a", Objective::R1).is_err());
    }

    #[test]
    fn random_select_contract() {
        assert_eq!(random_select(1, 42).unwrap(), 0);
        assert_eq!(random_select(15, 42).unwrap(), random_select(15, 42).unwrap());
        assert!(random_select(0, 1).is_err());
    }

    #[test]
    fn diversity_extremes() {
        assert_eq!(candidate_diversity(&["a b", "a b", "a b"]).unwrap(), 0.0);
        assert_eq!(candidate_diversity(&["a b", "c d"]).unwrap(), 1.0);
        assert!(candidate_diversity(&["a"]).is_err());
    }

    #[test]
    fn novel_ngrams() {
        assert_eq!(novel_ngram_fraction("b c", &["a b c d"], 1).unwrap(), 0.0);
        assert_eq!(novel_ngram_fraction("x y", &["a b c d"], 1).unwrap(), 100.0);
        assert_eq!(novel_ngram_fraction("a b c", &["a b", "x c"], 2).unwrap(), 50.0);
        assert!(novel_ngram_fraction("a", &["a"], 2).is_err());
    }

    #[test]
    fn quality_extremes() {
        assert_eq!(mean_candidate_quality(&["a b", "a b"], "a b").unwrap(), 1.0);
        assert_eq!(mean_candidate_quality(&["x", "y z"], "a b").unwrap(), 0.0);
        assert!(mean_candidate_quality::<&str>(&[], "a").is_err());
    }
}
