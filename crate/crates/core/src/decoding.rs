//! Greedy, beam and diverse beam search over any step-wise model.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, DecoderState, IncrementalDecoder};
use crate::corpus::Candidate;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{log_softmax, Matrix};
use crate::tokenizer::{TokenId, Vocab, EOS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMethod {
    Greedy,
    Beam,
    DiverseBeam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub method: DecodeMethod,
    pub beam: usize,
    /// Number of groups for diverse beam search.
    pub groups: usize,
    /// Hamming diversity strength.
    pub diversity: f64,
    /// Exponent `alpha` of the ranking score `logprob / len^alpha`.
    pub length_penalty: f64,
    pub repetition_penalty: f64,
    pub trigram_blocking: bool,
    pub max_len: usize,
}

impl DecodeConfig {
    pub fn greedy(max_len: usize) -> Self {
        Self {
            method: DecodeMethod::Greedy,
            beam: 1,
            groups: 1,
            diversity: 0.0,
            length_penalty: 1.0,
            repetition_penalty: 1.0,
            trigram_blocking: false,
            max_len,
        }
    }

    pub fn beam(beam: usize, max_len: usize) -> Self {
        Self {
            method: DecodeMethod::Beam,
            beam,
            ..Self::greedy(max_len)
        }
    }

    /// One beam per group, diversity strength 1.
    pub fn diverse(beam: usize, max_len: usize) -> Self {
        Self {
            method: DecodeMethod::DiverseBeam,
            beam,
            groups: beam,
            diversity: 1.0,
            ..Self::greedy(max_len)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(Error::Config("beam width must be at least 1".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        if self.method == DecodeMethod::DiverseBeam && (self.groups == 0 || self.beam % self.groups != 0) {
            return Err(Error::Config(format!(
                "beam width {} is not divisible by {} groups",
                self.beam, self.groups
            )));
        }
        if !(self.diversity >= 0.0) {
            return Err(Error::Config("diversity strength must be non-negative".into()));
        }
        if !(self.repetition_penalty >= 1.0) {
            return Err(Error::Config("repetition penalty must be at least 1".into()));
        }
        if !self.length_penalty.is_finite() {
            return Err(Error::Config("length penalty must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedCandidate {
    /// Generated ids, ending with EOS unless cut at `max_len`.
    pub tokens: Vec<TokenId>,
    pub text: String,
    /// Sum of chosen-token log-probabilities after constraints, before any
    /// diversity or length penalty.
    pub logprob: f64,
    /// Length-penalized ranking score.
    pub score: f64,
    pub group: usize,
    pub rank: usize,
}

impl DecodedCandidate {
    pub fn to_candidate(&self) -> Candidate {
        Candidate {
            text: self.text.clone(),
            group: self.group,
            rank: self.rank,
            logprob: self.logprob.min(0.0),
        }
    }
}

/// A left-to-right model exposing next-token logits.
pub trait StepModel {
    type State: Clone;

    /// State before the first generated token.
    fn start(&self) -> Result<Self::State>;
    fn logits<'s>(&self, state: &'s Self::State) -> &'s [f64];
    fn advance(&self, state: &Self::State, token: TokenId) -> Result<Self::State>;

    fn eos(&self) -> TokenId {
        EOS
    }

    /// Tokens never generated.
    fn suppressed(&self) -> &[TokenId] {
        &[]
    }
}

/// Backbone decoder over a fixed memory; reserved tokens other than EOS are
/// suppressed.
pub struct BackboneStep<'m, T> {
    decoder: IncrementalDecoder<'m, T>,
    suppressed: Vec<TokenId>,
}

impl<'m, T: Scalar> BackboneStep<'m, T> {
    pub fn new(backbone: &'m Backbone<T>, memory: &Matrix<T>, vocab: &Vocab) -> Result<Self> {
        if vocab.len() != backbone.config.vocab_size {
            return Err(Error::Invalid(format!(
                "vocabulary of {} tokens, model expects {}",
                vocab.len(),
                backbone.config.vocab_size
            )));
        }
        let suppressed = (0..vocab.len() as TokenId)
            .filter(|&id| id != EOS && vocab.is_reserved(id))
            .collect();
        Ok(Self {
            decoder: backbone.start_decoding(memory)?,
            suppressed,
        })
    }

    pub fn max_positions(&self) -> usize {
        self.decoder.max_positions()
    }
}

impl<T: Scalar> StepModel for BackboneStep<'_, T> {
    type State = DecoderState<T>;

    fn start(&self) -> Result<Self::State> {
        self.decoder.start()
    }

    fn logits<'s>(&self, state: &'s Self::State) -> &'s [f64] {
        state.logits()
    }

    fn advance(&self, state: &Self::State, token: TokenId) -> Result<Self::State> {
        self.decoder.advance(state, token)
    }

    fn suppressed(&self) -> &[TokenId] {
        &self.suppressed
    }
}

/// Repetition penalty on already emitted tokens and trigram blocking.
pub fn apply_constraints(logits: &[f64], emitted: &[TokenId], cfg: &DecodeConfig) -> Vec<f64> {
    let mut out = logits.to_vec();
    if cfg.repetition_penalty != 1.0 {
        let mut seen = emitted.to_vec();
        seen.sort_unstable();
        seen.dedup();
        for &t in &seen {
            if let Some(v) = out.get_mut(t as usize) {
                *v = if *v > 0.0 { *v / cfg.repetition_penalty } else { *v * cfg.repetition_penalty };
            }
        }
    }
    if cfg.trigram_blocking && emitted.len() >= 2 {
        let n = emitted.len();
        let (a, b) = (emitted[n - 2], emitted[n - 1]);
        for w in emitted.windows(3) {
            if w[0] == a && w[1] == b {
                if let Some(v) = out.get_mut(w[2] as usize) {
                    *v = f64::NEG_INFINITY;
                }
            }
        }
    }
    out
}

fn step_logprobs<M: StepModel>(model: &M, state: &M::State, emitted: &[TokenId], cfg: &DecodeConfig) -> Vec<f64> {
    let mut row = apply_constraints(model.logits(state), emitted, cfg);
    for &t in model.suppressed() {
        if let Some(v) = row.get_mut(t as usize) {
            *v = f64::NEG_INFINITY;
        }
    }
    log_softmax(&row)
}

/// `logprob / len^alpha`.
pub fn penalized_score(logprob: f64, len: usize, alpha: f64) -> f64 {
    if alpha == 0.0 {
        logprob
    } else {
        logprob / (len.max(1) as f64).powf(alpha)
    }
}

pub fn greedy<M: StepModel>(model: &M, cfg: &DecodeConfig) -> Result<DecodedCandidate> {
    cfg.validate()?;
    let mut state = model.start()?;
    let mut tokens = Vec::new();
    let mut logprob = 0.0;
    loop {
        let lp = step_logprobs(model, &state, &tokens, cfg);
        let (tok, best) = lp
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        if best == f64::NEG_INFINITY {
            return Err(Error::Invalid("every token is blocked".into()));
        }
        tokens.push(tok as TokenId);
        logprob += best;
        if tok as TokenId == model.eos() || tokens.len() >= cfg.max_len {
            break;
        }
        state = model.advance(&state, tok as TokenId)?;
    }
    Ok(DecodedCandidate {
        score: penalized_score(logprob, tokens.len(), cfg.length_penalty),
        tokens,
        text: String::new(),
        logprob,
        group: 0,
        rank: 0,
    })
}

#[derive(Clone)]
struct Hyp<S> {
    tokens: Vec<TokenId>,
    logprob: f64,
    state: S,
}

struct Finished {
    tokens: Vec<TokenId>,
    logprob: f64,
    score: f64,
}

/// One expansion of an active hypothesis.
struct Expansion {
    key: f64,
    logprob: f64,
    parent: usize,
    token: TokenId,
}

/// Bookkeeping of one beam (a whole beam search, or one diverse group).
struct Beam<S> {
    width: usize,
    active: Vec<Hyp<S>>,
    finished: Vec<Finished>,
}

impl<S: Clone> Beam<S> {
    /// Stops once `width` hypotheses have finished, so that width one is
    /// exactly greedy decoding.
    fn done(&self) -> bool {
        self.active.is_empty() || self.finished.len() >= self.width
    }

    /// Expansions of every active hypothesis, ranked by `key` (cumulative
    /// logprob minus the diversity penalty) with index tie-breaks.
    fn expansions<M: StepModel<State = S>>(
        &self,
        model: &M,
        cfg: &DecodeConfig,
        penalty: &HashMap<TokenId, usize>,
    ) -> Vec<Expansion> {
        let mut out = Vec::new();
        for (parent, h) in self.active.iter().enumerate() {
            let lp = step_logprobs(model, &h.state, &h.tokens, cfg);
            for (tok, &v) in lp.iter().enumerate() {
                if v == f64::NEG_INFINITY {
                    continue;
                }
                let token = tok as TokenId;
                let logprob = h.logprob + v;
                let hits = penalty.get(&token).copied().unwrap_or(0);
                out.push(Expansion {
                    key: logprob - cfg.diversity * hits as f64,
                    logprob,
                    parent,
                    token,
                });
            }
        }
        out.sort_by(|a, b| {
            b.key
                .partial_cmp(&a.key)
                .unwrap_or(Ordering::Equal)
                .then(a.parent.cmp(&b.parent))
                .then(a.token.cmp(&b.token))
        });
        out
    }

    /// Advances one step; returns the tokens chosen at this step.
    fn step<M: StepModel<State = S>>(
        &mut self,
        model: &M,
        cfg: &DecodeConfig,
        penalty: &HashMap<TokenId, usize>,
    ) -> Result<Vec<TokenId>> {
        let expansions = self.expansions(model, cfg, penalty);
        let mut next = Vec::with_capacity(self.width);
        let mut chosen = Vec::new();
        let mut closed = 0;
        for e in expansions {
            if next.len() >= self.width {
                break;
            }
            let parent = &self.active[e.parent];
            let finishing = e.token == model.eos() || parent.tokens.len() + 1 >= cfg.max_len;
            if finishing && closed >= self.width {
                continue;
            }
            let mut tokens = parent.tokens.clone();
            tokens.push(e.token);
            chosen.push(e.token);
            if finishing {
                closed += 1;
                self.finished.push(Finished {
                    score: penalized_score(e.logprob, tokens.len(), cfg.length_penalty),
                    tokens,
                    logprob: e.logprob,
                });
            } else {
                let state = model.advance(&parent.state, e.token)?;
                next.push(Hyp {
                    tokens,
                    logprob: e.logprob,
                    state,
                });
            }
        }
        self.active = next;
        Ok(chosen)
    }

    fn results(mut self, group: usize) -> Vec<DecodedCandidate> {
        self.finished.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(Ordering::Equal)
                .then(b.logprob.partial_cmp(&a.logprob).unwrap_or(Ordering::Equal))
                .then(a.tokens.cmp(&b.tokens))
        });
        self.finished
            .into_iter()
            .take(self.width)
            .enumerate()
            .map(|(rank, f)| DecodedCandidate {
                tokens: f.tokens,
                text: String::new(),
                logprob: f.logprob,
                score: f.score,
                group,
                rank,
            })
            .collect()
    }
}

fn run_groups<M: StepModel>(model: &M, cfg: &DecodeConfig, groups: usize) -> Result<Vec<DecodedCandidate>> {
    let width = cfg.beam / groups;
    let root = Hyp {
        tokens: Vec::new(),
        logprob: 0.0,
        state: model.start()?,
    };
    let mut beams: Vec<Beam<M::State>> = (0..groups)
        .map(|_| Beam {
            width,
            active: vec![root.clone()],
            finished: Vec::new(),
        })
        .collect();
    while beams.iter().any(|b| !b.done()) {
        let mut counts: HashMap<TokenId, usize> = HashMap::new();
        for beam in beams.iter_mut() {
            if beam.done() {
                continue;
            }
            for tok in beam.step(model, cfg, &counts)? {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
    }
    Ok(beams
        .into_iter()
        .enumerate()
        .flat_map(|(g, b)| b.results(g))
        .collect())
}

/// Length-normalized beam search; up to `beam` finished hypotheses sorted by
/// penalized score.
pub fn beam_search<M: StepModel>(model: &M, cfg: &DecodeConfig) -> Result<Vec<DecodedCandidate>> {
    cfg.validate()?;
    run_groups(model, cfg, 1)
}

/// Diverse beam search with Hamming diversity; output ordered by group, then
/// by penalized score within the group.
pub fn diverse_beam_search<M: StepModel>(model: &M, cfg: &DecodeConfig) -> Result<Vec<DecodedCandidate>> {
    let mut cfg = cfg.clone();
    cfg.method = DecodeMethod::DiverseBeam;
    cfg.validate()?;
    run_groups(model, &cfg, cfg.groups)
}

/// Dispatches on `cfg.method`.
pub fn decode<M: StepModel>(model: &M, cfg: &DecodeConfig) -> Result<Vec<DecodedCandidate>> {
    match cfg.method {
        DecodeMethod::Greedy => Ok(vec![greedy(model, cfg)?]),
        DecodeMethod::Beam => beam_search(model, cfg),
        DecodeMethod::DiverseBeam => diverse_beam_search(model, cfg),
    }
}

/// Decodes over an encoder memory and fills in candidate texts.
pub fn generate<T: Scalar>(
    backbone: &Backbone<T>,
    memory: &Matrix<T>,
    vocab: &Vocab,
    cfg: &DecodeConfig,
) -> Result<Vec<DecodedCandidate>> {
    let step = BackboneStep::new(backbone, memory, vocab)?;
    let mut cfg = cfg.clone();
    cfg.max_len = cfg.max_len.min(step.max_positions());
    let mut out = decode(&step, &cfg)?;
    for c in out.iter_mut() {
        c.text = vocab.decode(&c.tokens)?;
    }
    Ok(out)
}
