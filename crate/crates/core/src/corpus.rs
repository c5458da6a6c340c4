//! Examples, candidate sets, the synthetic corpus generator, data splits and
//! corpus statistics.

use std::collections::{BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub source: String,
    pub target: Option<String>,
}

impl Example {
    pub fn new(id: impl Into<String>, source: impl Into<String>, target: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            source: source.into(),
            target: Some(target.into()),
        }
    }

    pub fn target_or_err(&self) -> Result<&str> {
        self.target
            .as_deref()
            .ok_or_else(|| Error::MissingTarget(self.id.clone()))
    }

    /// Content digest over id, source and target.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.id.as_bytes());
        h.update([0u8]);
        h.update(self.source.as_bytes());
        h.update([0u8]);
        if let Some(t) = &self.target {
            h.update([1u8]);
            h.update(t.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Order-independent content hash of a set of examples.
pub fn fingerprint(examples: &[Example]) -> String {
    let digests: BTreeSet<String> = examples.iter().map(Example::digest).collect();
    let mut h = Sha256::new();
    for d in &digests {
        h.update(d.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    pub group: usize,
    pub rank: usize,
    pub logprob: f64,
}

/// First-stage candidates of one example, in diverse-beam order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    #[serde(rename = "id")]
    pub example_id: String,
    pub candidates: Vec<Candidate>,
}

impl CandidateSet {
    pub fn new(example_id: impl Into<String>, candidates: Vec<Candidate>) -> Result<Self> {
        let set = Self {
            example_id: example_id.into(),
            candidates,
        };
        set.validate(None)?;
        Ok(set)
    }

    /// Checks the ordering contract: non-empty, `(group, rank)` strictly
    /// increasing, log-probabilities not positive, and at most `m_max`
    /// candidates when a bound is given.
    pub fn validate(&self, m_max: Option<usize>) -> Result<()> {
        let id = &self.example_id;
        if self.candidates.is_empty() {
            return Err(Error::Invalid(format!("candidate set {id:?} is empty")));
        }
        if let Some(m) = m_max {
            if self.candidates.len() > m {
                return Err(Error::Invalid(format!(
                    "candidate set {id:?} has {} candidates, limit is {m}",
                    self.candidates.len()
                )));
            }
        }
        for pair in self.candidates.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if (a.group, a.rank) >= (b.group, b.rank) {
                return Err(Error::Invalid(format!(
                    "candidate set {id:?} is not ordered by (group, rank): ({}, {}) before ({}, {})",
                    a.group, a.rank, b.group, b.rank
                )));
            }
        }
        if let Some(c) = self.candidates.iter().find(|c| c.logprob.is_nan() || c.logprob > 0.0) {
            return Err(Error::Invalid(format!(
                "candidate set {id:?} has invalid logprob {}",
                c.logprob
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn texts(&self) -> Vec<&str> {
        self.candidates.iter().map(|c| c.text.as_str()).collect()
    }
}

pub(crate) fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).expect("records serialize");
        w.write_all(line.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn ensure_unique_ids<'a>(ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::DuplicateId(id.to_string()));
        }
    }
    Ok(())
}

/// Reads `examples.jsonl`: one `{"id", "source", "target"}` object per line.
pub fn load_examples(path: impl AsRef<Path>) -> Result<Vec<Example>> {
    let examples: Vec<Example> = read_jsonl(path.as_ref())?;
    ensure_unique_ids(examples.iter().map(|e| e.id.as_str()))?;
    for e in &examples {
        if e.target.is_some() && e.source.trim().is_empty() {
            return Err(Error::Invalid(format!("example {:?} has an empty source", e.id)));
        }
    }
    Ok(examples)
}

pub fn save_examples(path: impl AsRef<Path>, examples: &[Example]) -> Result<()> {
    write_jsonl(path.as_ref(), examples)
}

/// Reads `candidates.jsonl` and validates every set.
pub fn load_candidates(path: impl AsRef<Path>) -> Result<Vec<CandidateSet>> {
    let sets: Vec<CandidateSet> = read_jsonl(path.as_ref())?;
    ensure_unique_ids(sets.iter().map(|s| s.example_id.as_str()))?;
    for s in &sets {
        s.validate(None)?;
    }
    Ok(sets)
}

pub fn save_candidates(path: impl AsRef<Path>, sets: &[CandidateSet]) -> Result<()> {
    write_jsonl(path.as_ref(), sets)
}

/// Parameters of the synthetic "salient-token extraction" task.
///
/// Vocabulary words are `w000`, `w001`, ... . The first quarter of the
/// vocabulary is salient, the second quarter holds decoys and the rest is
/// filler. A source is a filler sequence where each position is salient with
/// probability `density` (salient words are distinct within a source and at
/// least one is always present). With probability `noise`, a decoy word is
/// inserted right after each salient word. The target lists the salient
/// words in vocabulary order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub density: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            vocab_size: 200,
            min_len: 12,
            max_len: 24,
            density: 0.25,
            noise: 0.1,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 8 {
            return Err(Error::Config("synthetic vocab_size must be at least 8".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "invalid synthetic length range ({}, {})",
                self.min_len, self.max_len
            )));
        }
        if !(self.density > 0.0 && self.density < 1.0) {
            return Err(Error::Config("synthetic density must be in (0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(Error::Config("synthetic noise must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn word(index: usize) -> String {
        format!("w{index:03}")
    }

    pub fn salient_count(&self) -> usize {
        (self.vocab_size / 4).max(1)
    }

    pub fn is_salient(&self, index: usize) -> bool {
        index < self.salient_count()
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec, n: usize) -> Result<Vec<Example>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Invalid("synthetic corpus size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_salient = spec.salient_count();
    let decoys = n_salient..(spec.vocab_size / 2).max(n_salient + 1);
    let fillers = decoys.end..spec.vocab_size;

    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let mut pool: Vec<usize> = (0..n_salient).collect();
        pool.shuffle(&mut rng);
        let mut tokens: Vec<usize> = Vec::with_capacity(len);
        let mut salient: Vec<usize> = Vec::new();
        for _ in 0..len {
            if rng.gen_bool(spec.density) {
                if let Some(s) = pool.pop() {
                    tokens.push(s);
                    salient.push(s);
                    continue;
                }
            }
            tokens.push(rng.gen_range(fillers.clone()));
        }
        if salient.is_empty() {
            let pos = rng.gen_range(0..tokens.len());
            let s = pool.pop().expect("salient pool is non-empty");
            tokens[pos] = s;
            salient.push(s);
        }
        let mut source = Vec::with_capacity(tokens.len() + salient.len());
        for t in tokens {
            source.push(t);
            if spec.is_salient(t) && spec.noise > 0.0 && rng.gen_bool(spec.noise) {
                source.push(rng.gen_range(decoys.clone()));
            }
        }
        salient.sort_unstable();
        let words = |v: &[usize]| {
            v.iter()
                .map(|&t| SyntheticSpec::word(t))
                .collect::<Vec<_>>()
                .join(" ")
        };
        out.push(Example::new(
            format!("syn-{}-{i:06}", spec.seed),
            words(&source),
            words(&salient),
        ));
    }
    Ok(out)
}

fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

fn pick(corpus: &[Example], idx: &[usize]) -> Vec<Example> {
    let mut idx = idx.to_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| corpus[i].clone()).collect()
}

/// Random partition into two halves; the first half takes the extra example
/// when the size is odd. Each half keeps the corpus order.
pub fn split_halves(corpus: &[Example], seed: u64) -> Result<(Vec<Example>, Vec<Example>)> {
    if corpus.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "cannot split {} example(s) into halves",
            corpus.len()
        )));
    }
    let idx = shuffled_indices(corpus.len(), seed);
    let cut = corpus.len().div_ceil(2);
    Ok((pick(corpus, &idx[..cut]), pick(corpus, &idx[cut..])))
}

/// Random held-out subset of `n` examples and the rest, both in corpus order.
pub fn holdout(corpus: &[Example], n: usize, seed: u64) -> Result<(Vec<Example>, Vec<Example>)> {
    if n > corpus.len() {
        return Err(Error::InsufficientData(format!(
            "cannot hold out {n} of {} examples",
            corpus.len()
        )));
    }
    let idx = shuffled_indices(corpus.len(), seed);
    let cut = corpus.len() - n;
    Ok((pick(corpus, &idx[..cut]), pick(corpus, &idx[cut..])))
}

/// Disjoint random train and validation samples of `k` examples each.
pub fn sample_fewshot(corpus: &[Example], k: usize, seed: u64) -> Result<(Vec<Example>, Vec<Example>)> {
    if k == 0 || corpus.len() < 2 * k {
        return Err(Error::InsufficientData(format!(
            "{k}-shot sampling needs at least {} examples, corpus has {}",
            2 * k,
            corpus.len()
        )));
    }
    let idx = shuffled_indices(corpus.len(), seed);
    Ok((pick(corpus, &idx[..k]), pick(corpus, &idx[k..2 * k])))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_examples: usize,
    pub mean_doc_words: f64,
    pub mean_summary_words: f64,
    pub mean_doc_tokens: f64,
    pub mean_summary_tokens: f64,
    /// Summary words over source words, percent (default variant).
    pub compression_ratio: f64,
    /// Summary sentences over source sentences, percent.
    pub compression_ratio_sentences: f64,
    /// Novel 1/2/3-gram fractions of summaries against sources, percent.
    pub novel_ngrams: [f64; 3],
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Sentences are delimited by `.`, `!` or `?` followed by whitespace (or
/// the end of the text).
pub fn sentence_count(text: &str) -> usize {
    let chars: Vec<char> = text.chars().collect();
    let mut count = 0;
    let mut has_content = false;
    for (i, &c) in chars.iter().enumerate() {
        if !c.is_whitespace() {
            has_content = true;
        }
        let terminal = matches!(c, '.' | '!' | '?');
        let boundary = chars.get(i + 1).is_none_or(|n| n.is_whitespace());
        if terminal && boundary && has_content {
            count += 1;
            has_content = false;
        }
    }
    if has_content {
        count += 1;
    }
    count
}

pub fn corpus_stats(corpus: &[Example]) -> Result<CorpusStats> {
    if corpus.is_empty() {
        return Err(Error::InsufficientData("corpus statistics need at least one example".into()));
    }
    let n = corpus.len() as f64;
    let mut doc_words = 0.0;
    let mut sum_words = 0.0;
    let mut doc_tokens = 0.0;
    let mut sum_tokens = 0.0;
    let mut ratio_words = 0.0;
    let mut ratio_sents = 0.0;
    let mut novel = [(0.0f64, 0usize); 3];
    for e in corpus {
        let target = e.target_or_err()?;
        let (dw, sw) = (word_count(&e.source), word_count(target));
        doc_words += dw as f64;
        sum_words += sw as f64;
        doc_tokens += crate::tokenizer::pre_tokenize(&e.source).len() as f64;
        sum_tokens += crate::tokenizer::pre_tokenize(target).len() as f64;
        if dw > 0 {
            ratio_words += 100.0 * sw as f64 / dw as f64;
        }
        let ds = sentence_count(&e.source);
        if ds > 0 {
            ratio_sents += 100.0 * sentence_count(target) as f64 / ds as f64;
        }
        for (order, slot) in novel.iter_mut().enumerate() {
            if let Ok(f) = metrics::novel_ngram_fraction(target, &[e.source.as_str()], order + 1) {
                slot.0 += f;
                slot.1 += 1;
            }
        }
    }
    let novel_ngrams = novel.map(|(s, c)| if c == 0 { 0.0 } else { s / c as f64 });
    Ok(CorpusStats {
        n_examples: corpus.len(),
        mean_doc_words: doc_words / n,
        mean_summary_words: sum_words / n,
        mean_doc_tokens: doc_tokens / n,
        mean_summary_tokens: sum_tokens / n,
        compression_ratio: ratio_words / n,
        compression_ratio_sentences: ratio_sents / n,
        novel_ngrams,
    })
}
